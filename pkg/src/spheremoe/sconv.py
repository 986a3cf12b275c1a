"""1-ring spherical convolution restricted to ROI vertices, plus pooling.

Fields are stored compactly: only the rows of selected vertices exist, in
increasing vertex order, with shape ``(n_selected, C)`` or
``(n_selected, B, C)`` for a batch. Vertex-major layout keeps every gather
and scatter on axis 0.

Padding rules inside the kernel footprint:

* pentagon (``SENTINEL``) slot reads the centre vertex value;
* a neighbour outside the input ROI reads zero.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import grad as G
from .errors import ConfigError, DegenerateInputError, ShapeError
from .grad import Tensor, parameter, resolve_dtype
from .mesh import SENTINEL, Hemisphere, MeshHierarchy, MeshLevel
from .nn import Module
from .roi import RoiMask

PENTAGON_PADDING = "duplicate_center"
ROI_PADDING = "zero"
DOWNSAMPLE_MODES = ("strided_conv", "mean_pool")
RECEPTIVE_FIELDS = ("ring", "center_only")


@dataclass(frozen=True)
class SurfaceField:
    level: int
    hemisphere: Hemisphere
    values: Tensor
    valid_mask: RoiMask

    def __post_init__(self):
        if self.values.shape[0] != self.valid_mask.count:
            raise ShapeError(
                f"field has {self.values.shape[0]} rows but mask selects {self.valid_mask.count}"
            )
        if self.valid_mask.level != self.level:
            raise ConfigError("field level and mask level differ")

    @property
    def channels(self) -> int:
        return int(self.values.shape[-1])

    @property
    def batched(self) -> bool:
        return self.values.ndim == 3

    @classmethod
    def from_dense(cls, values, mask: RoiMask, dtype=None) -> "SurfaceField":
        """Keep the rows of ``values`` (``(V, C)`` or ``(V, B, C)``) that ``mask`` selects."""
        if isinstance(values, Tensor):
            t = G.gather_rows(values, mask.indices)
        else:
            arr = np.asarray(values)
            if arr.ndim == 1:
                arr = arr[:, None]
            t = Tensor(arr[mask.indices], dtype=dtype)
        return cls(mask.level, mask.hemisphere, t, mask)

    def to_dense(self) -> np.ndarray:
        shape = (self.valid_mask.selected.size,) + self.values.shape[1:]
        out = np.zeros(shape, dtype=self.values.dtype)
        out[self.valid_mask.indices] = self.values.data
        return out


class SphConvLayer(Module):
    """Hexagonal kernel: slot 0 is the centre, slots 1..6 follow the ring order."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator | None = None,
                 dtype="f32", receptive_field: str = "ring"):
        if receptive_field not in RECEPTIVE_FIELDS:
            raise ConfigError(f"receptive_field must be one of {RECEPTIVE_FIELDS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = resolve_dtype(dtype)
        fan_in = in_ch * (7 if receptive_field == "ring" else 1)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.receptive_field = receptive_field
        self.kernel = parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(out_ch, in_ch, 7)), dtype=dt)
        self.bias = parameter(np.zeros(out_ch), dtype=dt)

    def kernel_matrix(self) -> Tensor:
        """``(7*in_ch, out_ch)`` matrix matching slot-major gathered inputs."""
        if self.receptive_field == "center_only":
            return G.transpose(self.kernel[:, :, 0], (1, 0))
        k = G.transpose(self.kernel, (2, 1, 0))
        return G.reshape(k, (7 * self.in_ch, self.out_ch))


def shuffled_mesh(mesh: MeshLevel, seed: int) -> MeshLevel:
    """Copy of ``mesh`` whose neighbour entries pass through a fixed random vertex permutation."""
    perm = np.random.default_rng(seed).permutation(mesh.n_vertices)
    nb = mesh.neighbors
    shuffled = np.where(nb == SENTINEL, SENTINEL, perm[np.where(nb == SENTINEL, 0, nb)])
    shuffled.setflags(write=False)
    return dataclasses.replace(mesh, neighbors=shuffled)


_PLANS: dict = {}


def _plan(table: np.ndarray, in_mask: RoiMask, out_mask: RoiMask, center_only: bool) -> np.ndarray:
    """Gather index into the zero-padded compact input for every (out vertex, slot)."""
    key = (id(table), in_mask.key, out_mask.level, out_mask.key, center_only)
    hit = _PLANS.get(key)
    if hit is not None and hit[0] is table:
        return hit[1]
    out_v = out_mask.indices
    if center_only:
        slots = out_v[:, None]
    else:
        ring = table[out_v]
        ring = np.where(ring == SENTINEL, out_v[:, None], ring)
        slots = np.concatenate([out_v[:, None], ring], axis=1)
    pos = np.full(in_mask.selected.size, in_mask.count, dtype=np.int64)
    pos[in_mask.indices] = np.arange(in_mask.count)
    gidx = pos[slots].reshape(-1)
    if len(_PLANS) > 512:
        _PLANS.clear()
    _PLANS[key] = (table, gidx)
    return gidx


def _apply_kernel(x: SurfaceField, layer: SphConvLayer, table: np.ndarray, out_mask: RoiMask) -> Tensor:
    if x.channels != layer.in_ch:
        raise ShapeError(f"field has {x.channels} channels, layer expects {layer.in_ch}")
    center_only = layer.receptive_field == "center_only"
    nslot = 1 if center_only else 7
    gidx = _plan(table, x.valid_mask, out_mask, center_only)
    vals = x.values
    zero = Tensor(np.zeros((1,) + vals.shape[1:], dtype=vals.dtype))
    padded = G.concat([vals, zero], axis=0)
    gathered = G.gather_rows(padded, gidx)
    n_out = out_mask.count
    C = x.channels
    if x.batched:
        B = vals.shape[1]
        h = G.reshape(gathered, (n_out, nslot, B, C))
        if nslot > 1:
            h = G.transpose(h, (0, 2, 1, 3))
        h = G.reshape(h, (n_out, B, nslot * C))
    else:
        h = G.reshape(gathered, (n_out, nslot * C))
    return G.add(G.matmul(h, layer.kernel_matrix()), layer.bias)


def sph_conv(x: SurfaceField, layer: SphConvLayer, mesh: MeshLevel, out_mask: RoiMask) -> SurfaceField:
    """Same-level convolution evaluated only at ``out_mask`` vertices."""
    if not (x.level == mesh.level == out_mask.level):
        raise ConfigError(
            f"level mismatch: field {x.level}, mesh {mesh.level}, output mask {out_mask.level}"
        )
    y = _apply_kernel(x, layer, mesh.neighbors, out_mask)
    return SurfaceField(out_mask.level, out_mask.hemisphere, y, out_mask)


def sph_downconv(x: SurfaceField, layer: SphConvLayer, hierarchy: MeshHierarchy | MeshLevel,
                 out_mask: RoiMask, mode: str = "strided_conv") -> SurfaceField:
    """Stride-2 convolution from level ``L`` onto the coarse vertices of ``L-1``.

    The kernel is evaluated with the fine-level ring of each retained coarse
    vertex (coarse indices are valid fine indices). ``mode="mean_pool"``
    averages the in-ROI members of each pooling support, then applies the
    centre slot of the kernel as a 1x1 channel map.
    """
    fine = hierarchy if isinstance(hierarchy, MeshLevel) else hierarchy[x.level]
    if fine.level != x.level or out_mask.level != x.level - 1:
        raise ConfigError(
            f"downconv expects field at L and output mask at L-1, got {x.level} -> {out_mask.level}"
        )
    if mode == "strided_conv":
        y = _apply_kernel(x, layer, fine.neighbors, out_mask)
    elif mode == "mean_pool":
        y = _mean_pool_down(x, layer, fine.neighbors, out_mask)
    else:
        raise ConfigError(f"downsample mode must be one of {DOWNSAMPLE_MODES}")
    return SurfaceField(out_mask.level, out_mask.hemisphere, y, out_mask)


def _mean_pool_down(x: SurfaceField, layer: SphConvLayer, table: np.ndarray, out_mask: RoiMask) -> Tensor:
    if x.channels != layer.in_ch:
        raise ShapeError(f"field has {x.channels} channels, layer expects {layer.in_ch}")
    gidx = _plan(table, x.valid_mask, out_mask, False)
    n_in, n_out = x.valid_mask.count, out_mask.count
    valid = (gidx < n_in).reshape(n_out, 7)
    weights = valid / np.maximum(valid.sum(axis=1, keepdims=True), 1)
    vals = x.values
    zero = Tensor(np.zeros((1,) + vals.shape[1:], dtype=vals.dtype))
    gathered = G.gather_rows(G.concat([vals, zero], axis=0), gidx)
    wshape = (n_out * 7,) + (1,) * (vals.ndim - 1)
    weighted = G.mul(gathered, Tensor(weights.reshape(wshape), dtype=vals.dtype))
    pooled = G.sum(G.reshape(weighted, (n_out, 7) + vals.shape[1:]), axis=1)
    w = G.transpose(layer.kernel[:, :, 0], (1, 0))
    return G.add(G.matmul(pooled, w), layer.bias)


def pool_mean(x: SurfaceField) -> Tensor:
    """Channelwise mean over the selected vertices: ``(C,)`` or ``(B, C)``."""
    if x.valid_mask.count == 0:
        raise DegenerateInputError("pool_mean over an empty ROI")
    return G.mean(x.values, axis=0)


def map_field(x: SurfaceField, fn) -> SurfaceField:
    """Apply a pointwise tensor function to the values of ``x``."""
    return SurfaceField(x.level, x.hemisphere, fn(x.values), x.valid_mask)
