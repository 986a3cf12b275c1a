"""Parameter containers and the handful of layers shared across modules."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import grad as G
from .grad import Tensor, parameter, resolve_dtype


class Module:
    """Minimal parameter container.

    Parameters are discovered from instance attributes in definition order,
    recursing into sub-modules and lists/tuples of them, so the ordering of
    :meth:`named_parameters` is stable across runs.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr.astype(p.dtype, copy=False)

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype="f32",
                 bias: bool = True, std: float | None = None):
        dt = resolve_dtype(dtype)
        std = 1.0 / np.sqrt(d_in) if std is None else std
        self.weight = parameter(rng.normal(0.0, std, size=(d_in, d_out)), dtype=dt)
        self.bias = parameter(np.zeros(d_out), dtype=dt) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            y = G.reshape(G.matmul(G.reshape(x, (1, -1)), self.weight), (-1,))
        else:
            y = G.matmul(x, self.weight)
        return G.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype="f32", eps: float = 1e-5):
        dt = resolve_dtype(dtype)
        self.gain = parameter(np.ones(dim), dtype=dt)
        self.shift = parameter(np.zeros(dim), dtype=dt)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return G.add(G.mul(G.layer_norm(x, axis=-1, eps=self.eps), self.gain), self.shift)


class FeedForward(Module):
    """``d -> hidden -> d`` with GELU; the unit used for every expert."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype="f32"):
        self.up = Linear(dim, hidden, rng, dtype)
        self.down = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(G.gelu(self.up(x)))
