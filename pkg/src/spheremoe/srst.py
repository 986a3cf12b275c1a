"""Selective ROI spherical tokenizer.

The functional stack turns per-vertex responses into a token sequence laid
out as ``[CLS 0-3][GLOBAL 4-7][left locals][right locals]``:

* local tokens: a linear projection of the last-stage features at every
  selected vertex of the target level, plus a learned embedding indexed by
  (hemisphere, vertex);
* GLOBAL tokens: four separate linear heads over the concatenated left/right
  mean-pooled last-stage features;
* CLS tokens: learned constants.

The structural stack maps the four anatomy channels to a per-local-token
embedding (shallow stack ending at the functional target level) and a
single pooled embedding (deep stack ending at the structural target level).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .config import SrstConfig
from .errors import ConfigError, DegenerateInputError
from .grad import Tensor, parameter, resolve_dtype
from .mesh import Hemisphere, MeshLevel, build_hierarchy, n_vertices
from .nn import Linear, Module
from .roi import RoiMask, RoiPyramid
from .sconv import SphConvLayer, SurfaceField, map_field, pool_mean, shuffled_mesh, sph_conv, sph_downconv

N_SPECIAL = 8
CLS_SLICE = slice(0, 4)
GLOBAL_SLICE = slice(4, 8)
ANATOMY_CHANNELS = ("thickness", "area", "sulcal_depth", "curvature")


@dataclass
class TokenSequence:
    tokens: Tensor          # (B, T, d)
    origin: list            # ("CLS", i) | ("GLOBAL", i) | ("L", vertex) | ("R", vertex)
    n_left: int
    n_right: int

    @property
    def n_tokens(self) -> int:
        return N_SPECIAL + self.n_left + self.n_right


@dataclass
class StructEmbedding:
    per_local_token: Tensor  # (T_local, d_s) or (T_local, S, d_s)
    global_: Tensor          # (d_s,) or (S, d_s)

    @property
    def d_s(self) -> int:
        return int(self.global_.shape[-1])


def token_origins(left: RoiMask, right: RoiMask) -> list:
    return (
        [("CLS", i) for i in range(4)]
        + [("GLOBAL", i) for i in range(4)]
        + [("L", int(v)) for v in left.indices]
        + [("R", int(v)) for v in right.indices]
    )


def _meshes(base_level: int, shuffle_seed: int) -> dict[int, MeshLevel]:
    h = build_hierarchy(base_level)
    if shuffle_seed is None or shuffle_seed < 0:
        return {L: h[L] for L in range(base_level + 1)}
    return {L: shuffled_mesh(h[L], shuffle_seed + L) for L in range(base_level + 1)}


def _check_pyramid(pyr: RoiPyramid, base: int, target: int, what: str) -> None:
    if pyr.base_level != base or pyr.target_level > target:
        raise ConfigError(
            f"{what} ROI pyramid spans {pyr.target_level}..{pyr.base_level}, need {target}..{base}"
        )


class _SurfaceStack(Module):
    """Conv at the base level followed by one stride-2 conv per level down."""

    def __init__(self, channels, in_ch, rng, dtype, receptive_field="ring"):
        chans = [in_ch] + list(channels)
        self.convs = [
            SphConvLayer(chans[i], chans[i + 1], rng, dtype, receptive_field) for i in range(len(channels))
        ]

    def __call__(self, x: SurfaceField, pyr: RoiPyramid, meshes, downsample="strided_conv",
                 dropout=0.0, train=False, rng=None) -> SurfaceField:
        base = x.level

        def act(f):
            return map_field(f, lambda v: G.dropout(G.gelu(v), dropout, train, rng))

        h = act(sph_conv(x, self.convs[0], meshes[base], pyr[base]))
        for i, layer in enumerate(self.convs[1:]):
            level = base - i - 1
            h = act(sph_downconv(h, layer, meshes[level + 1], pyr[level], mode=downsample))
        return h


class FunctionalTokenizer(Module):
    def __init__(self, cfg: SrstConfig, rng: np.random.Generator, dtype="f32", in_channels: int = 1):
        self.cfg = cfg
        dt = resolve_dtype(dtype)
        d = cfg.model_dim
        ch = tuple(cfg.functional_channels)
        self.stack = _SurfaceStack(ch, in_channels, rng, dtype, cfg.receptive_field)
        self.local_proj = Linear(ch[-1], d, rng, dtype)
        self.global_heads = [Linear(2 * ch[-1], d, rng, dtype) for _ in range(cfg.n_global)]
        self.cls = parameter(rng.normal(0.0, 0.02, size=(cfg.n_cls, d)), dtype=dt)
        self.pos = parameter(
            rng.normal(0.0, 0.02, size=(2, n_vertices(cfg.functional_target_level), d)), dtype=dt
        )
        self._meshes = _meshes(cfg.base_level, cfg.shuffle_topology_seed)

    def features(self, x: SurfaceField, pyr: RoiPyramid, train=False, rng=None) -> SurfaceField:
        cfg = self.cfg
        _check_pyramid(pyr, cfg.base_level, cfg.functional_target_level, "functional")
        if pyr[cfg.functional_target_level].count == 0:
            raise DegenerateInputError(f"{pyr.hemisphere.name} ROI is empty at the token level")
        return self.stack(x, pyr, self._meshes, cfg.downsample, cfg.dropout, train, rng)

    def __call__(self, x_L: SurfaceField, x_R: SurfaceField, pyr_L: RoiPyramid, pyr_R: RoiPyramid,
                 train: bool = False, rng=None) -> TokenSequence:
        cfg = self.cfg
        tgt = cfg.functional_target_level
        f_L = self.features(x_L, pyr_L, train, rng)
        f_R = self.features(x_R, pyr_R, train, rng)
        batched = f_L.batched
        d = cfg.model_dim

        def locals_(f: SurfaceField, hemi_row: int) -> Tensor:
            tok = self.local_proj(f.values)
            pos = G.gather_rows(self.pos[hemi_row], f.valid_mask.indices)
            if batched:
                pos = G.reshape(pos, (pos.shape[0], 1, d))
            return G.add(tok, pos)

        loc_L = locals_(f_L, 0)
        loc_R = locals_(f_R, 1)

        pooled = G.concat([pool_mean(f_L), pool_mean(f_R)], axis=-1)
        if not cfg.global_tokens:
            pooled = Tensor(np.zeros(pooled.shape, dtype=pooled.dtype))
        if batched:
            B = pooled.shape[0]
            glob = G.concat([G.reshape(h(pooled), (1, B, d)) for h in self.global_heads], axis=0)
            zeros = Tensor(np.zeros((cfg.n_cls, B, d), dtype=pooled.dtype))
            cls = G.add(zeros, G.reshape(self.cls, (cfg.n_cls, 1, d)))
            seq = G.concat([cls, glob, loc_L, loc_R], axis=0)
            tokens = G.transpose(seq, (1, 0, 2))
        else:
            glob = G.concat([G.reshape(h(pooled), (1, d)) for h in self.global_heads], axis=0)
            tokens = G.reshape(G.concat([self.cls, glob, loc_L, loc_R], axis=0), (1, -1, d))
        mask_L, mask_R = pyr_L[tgt], pyr_R[tgt]
        return TokenSequence(tokens, token_origins(mask_L, mask_R), mask_L.count, mask_R.count)


class StructuralTokenizer(Module):
    def __init__(self, cfg: SrstConfig, rng: np.random.Generator, dtype="f32", in_channels: int = 4):
        self.cfg = cfg
        self.in_channels = in_channels
        ds = cfg.struct_dim
        n_shallow = cfg.base_level - cfg.functional_target_level + 1
        self.shallow = _SurfaceStack((ds,) * n_shallow, in_channels, rng, dtype)
        deep = tuple(cfg.structural_channels)
        self.deep = _SurfaceStack(deep, in_channels, rng, dtype)
        self.global_proj = Linear(2 * deep[-1], ds, rng, dtype)
        self._meshes = _meshes(cfg.base_level, cfg.shuffle_topology_seed)

    def __call__(self, a_L: SurfaceField, a_R: SurfaceField, pyr_L: RoiPyramid, pyr_R: RoiPyramid) -> StructEmbedding:
        cfg = self.cfg
        for a in (a_L, a_R):
            if a.channels != self.in_channels:
                raise ConfigError(f"structural input needs {self.in_channels} channels, got {a.channels}")
        for pyr in (pyr_L, pyr_R):
            _check_pyramid(pyr, cfg.base_level, cfg.structural_target_level, "structural")
        s_L = self.shallow(a_L, pyr_L, self._meshes)
        s_R = self.shallow(a_R, pyr_R, self._meshes)
        per_token = G.concat([s_L.values, s_R.values], axis=0)
        d_L = self.deep(a_L, pyr_L, self._meshes)
        d_R = self.deep(a_R, pyr_R, self._meshes)
        glob = self.global_proj(G.concat([pool_mean(d_L), pool_mean(d_R)], axis=-1))
        return StructEmbedding(per_token, glob)


def tokenize_functional(x_L: SurfaceField, x_R: SurfaceField, roi: tuple[RoiPyramid, RoiPyramid],
                        tokenizer: FunctionalTokenizer, train=False, rng=None) -> TokenSequence:
    return tokenizer(x_L, x_R, roi[0], roi[1], train=train, rng=rng)


def tokenize_structural(a_L: SurfaceField, a_R: SurfaceField, roi: tuple[RoiPyramid, RoiPyramid],
                        tokenizer: StructuralTokenizer) -> StructEmbedding:
    if a_L.channels != 4 or a_R.channels != 4:
        raise ConfigError(
            f"anatomy needs 4 channels {ANATOMY_CHANNELS}, got {a_L.channels}/{a_R.channels}"
        )
    return tokenizer(a_L, a_R, roi[0], roi[1])


def token_budget(cfg: SrstConfig, left: RoiMask | RoiPyramid, right: RoiMask | RoiPyramid,
                 level: int | None = None) -> dict:
    """Local-token counts with and without the ROI restriction.

    ``level`` defaults to the functional target level; masks are coarsened
    to it when given at a finer level.
    """
    from .roi import pyramid

    level = cfg.functional_target_level if level is None else level

    def at_level(m):
        if isinstance(m, RoiPyramid):
            if level in m.masks:
                return m[level]
            m = m[m.target_level]
        if m.level == level:
            return m
        if m.level < level:
            raise ConfigError(f"mask at level {m.level} cannot be refined to level {level}")
        return pyramid(m, level)[level]

    mL, mR = at_level(left), at_level(right)
    full = 2 * n_vertices(level)
    sel = mL.count + mR.count
    return {
        "level": level,
        "tokens_selective": sel,
        "tokens_full": full,
        "sequence_selective": N_SPECIAL + sel,
        "sequence_full": N_SPECIAL + full,
        "reduction": (full - sel) / full,
    }


__all__ = [
    "ANATOMY_CHANNELS", "FunctionalTokenizer", "StructuralTokenizer", "StructEmbedding",
    "TokenSequence", "token_budget", "tokenize_functional", "tokenize_structural", "Hemisphere",
]
