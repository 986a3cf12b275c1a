"""Structure-guided mixture of experts.

Each token is routed by a small MLP over its hidden state and (depending
on the variant) a structural embedding. The top-k raw scores are selected
with ties broken towards the lower expert index, and the selected scores
are normalized into gate weights. Experts are evaluated only on the tokens
routed to them, so an expert that a token does not select receives exactly
zero gradient from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad as G
from .config import MoeConfig
from .errors import ConfigError, NumericError
from .grad import Tensor
from .nn import FeedForward, Linear, Module

VARIANTS = ("anatomy", "subject_id", "swapped_anatomy", "random_anatomy", "none", "functional_stats")
GATE_NORMS = ("softmax_topk", "sigmoid_norm")
ROUTER_INPUTS = ("concat", "struct_only")


@dataclass(eq=False)
class GateDecision:
    """Routing of ``N`` tokens: ``expert_indices``/``weights`` are ``(N, k)``."""

    expert_indices: np.ndarray
    weights: np.ndarray
    raw_scores: np.ndarray
    weight_tensor: Tensor | None = field(default=None, repr=False)
    probs: Tensor | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return int(self.expert_indices.shape[-1])

    @property
    def n_routed(self) -> int:
        return int(self.raw_scores.shape[-1])

    def same_routing(self, other: "GateDecision") -> bool:
        return (
            np.array_equal(self.expert_indices, other.expert_indices)
            and np.array_equal(self.weights, other.weights)
        )


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores per row; ties go to the lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def router_uses_structure(cfg: MoeConfig) -> bool:
    return cfg.variant != "none"


class Router(Module):
    def __init__(self, in_dim: int, hidden: int, n_routed: int, rng, dtype="f32"):
        self.fc1 = Linear(in_dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, n_routed, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(G.gelu(self.fc1(x)))


class SGMoE(Module):
    def __init__(self, dim: int, cfg: MoeConfig, struct_dim: int, rng: np.random.Generator, dtype="f32"):
        if not 1 <= cfg.top_k <= cfg.n_routed:
            raise ConfigError("need 1 <= top_k <= n_routed")
        self.cfg = cfg
        if cfg.variant == "none":
            in_dim = dim
        elif cfg.router_input == "struct_only":
            in_dim = struct_dim
        else:
            in_dim = dim + struct_dim
        self.router = Router(in_dim, cfg.router_hidden, cfg.n_routed, rng, dtype)
        self.experts = [FeedForward(dim, cfg.hidden, rng, dtype) for _ in range(cfg.n_routed)]
        self.shared = [FeedForward(dim, cfg.hidden, rng, dtype) for _ in range(cfg.n_shared)]

    def router_input(self, e: Tensor, e_stru: Tensor | None) -> Tensor:
        cfg = self.cfg
        if cfg.variant == "none":
            return e
        if e_stru is None:
            raise ConfigError(f"variant {cfg.variant!r} needs a structural embedding")
        if cfg.router_input == "struct_only":
            return e_stru
        return G.concat([e, e_stru], axis=-1)

    def route(self, e: Tensor, e_stru: Tensor | None, frozen: np.ndarray | None = None) -> GateDecision:
        return route(e, e_stru, self, frozen=frozen)

    def __call__(self, e: Tensor, e_stru: Tensor | None = None, frozen: np.ndarray | None = None):
        gate = self.route(e, e_stru, frozen)
        return moe_forward(e, gate, self.experts, self.shared), gate


def route(e: Tensor, e_stru: Tensor | None, layer: SGMoE, frozen: np.ndarray | None = None) -> GateDecision:
    """Gate decision for ``N`` tokens (``e`` is ``(N, d)``).

    ``frozen`` replaces the top-k selection with fixed indices; weights are
    still differentiable functions of the scores at those indices.
    """
    cfg = layer.cfg
    scores = layer.router(layer.router_input(e, e_stru))
    raw = scores.data
    if not np.all(np.isfinite(raw)):
        raise NumericError("router produced non-finite scores")
    N, n = raw.shape
    k = cfg.top_k
    idx = top_k_indices(raw, k) if frozen is None else np.asarray(frozen, dtype=np.int64)
    if idx.shape != (N, k):
        raise ConfigError(f"frozen routing has shape {idx.shape}, expected {(N, k)}")
    flat = (np.arange(N, dtype=np.int64)[:, None] * n + idx).reshape(-1)
    sel = G.reshape(G.gather_rows(G.reshape(scores, (N * n,)), flat), (N, k))
    if cfg.gate_norm == "softmax_topk":
        w = G.softmax(sel, axis=-1)
    else:
        s = G.sigmoid(sel)
        w = G.div(s, G.sum(s, axis=-1, keepdims=True))
    probs = G.softmax(scores, axis=-1)
    return GateDecision(idx, w.data.copy(), raw.copy(), w, probs)


def moe_forward(e: Tensor, gate: GateDecision, experts, shared_experts) -> Tensor:
    """Shared experts on every token plus the gate-weighted selected experts."""
    N, d = e.shape
    idx = gate.expert_indices
    w = gate.weight_tensor if gate.weight_tensor is not None else Tensor(gate.weights, dtype=e.dtype)
    w_flat = G.reshape(w, (N * gate.k, 1))
    flat_expert = idx.reshape(-1)
    flat_token = np.repeat(np.arange(N, dtype=np.int64), gate.k)

    parts, rows = [], []
    for i, expert in enumerate(experts):
        pairs = np.flatnonzero(flat_expert == i)
        if pairs.size == 0:
            continue
        tok = flat_token[pairs]
        h = expert(G.gather_rows(e, tok))
        parts.append(G.mul(h, G.gather_rows(w_flat, pairs)))
        rows.append(tok)
    out = None
    if parts:
        out = G.scatter_add(G.concat(parts, axis=0), np.concatenate(rows), N)
    for s in shared_experts:
        out = s(e) if out is None else G.add(out, s(e))
    if out is None:
        out = Tensor(np.zeros((N, d), dtype=e.dtype))
    return out


def load_balance_loss(gates, n_routed: int | None = None) -> Tensor:
    """``n * sum_i f_i * P_i`` averaged over the given decisions.

    ``f_i`` is the share of the ``N*k`` token-expert assignments that go to
    expert ``i``; ``P_i`` the mean softmax probability of expert ``i`` over
    all raw scores.
    """
    gates = list(gates)
    if not gates:
        raise ConfigError("load_balance_loss needs at least one gate decision")
    total = None
    for g in gates:
        n = g.n_routed if n_routed is None else n_routed
        if n != g.n_routed:
            raise ConfigError(f"gate has {g.n_routed} experts, n_routed={n}")
        counts = np.bincount(g.expert_indices.reshape(-1), minlength=n).astype(np.float64)
        frac = counts / counts.sum()
        probs = g.probs
        if probs is None:
            z = g.raw_scores - g.raw_scores.max(axis=-1, keepdims=True)
            ez = np.exp(z)
            probs = Tensor(ez / ez.sum(axis=-1, keepdims=True))
        P = G.mean(probs, axis=0)
        term = G.scale(G.sum(G.mul(P, Tensor(frac, dtype=P.dtype))), float(n))
        total = term if total is None else G.add(total, term)
    return G.scale(total, 1.0 / len(gates))


def expert_entropy(gates, n_routed: int) -> float:
    """Entropy (nats) of the empirical expert-usage distribution."""
    counts = np.zeros(n_routed)
    for g in gates:
        counts += np.bincount(np.asarray(g.expert_indices).reshape(-1), minlength=n_routed)
    p = counts / max(counts.sum(), 1)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
