"""Routing statistics, attribution, identification metrics and the ablation harness."""

from __future__ import annotations

import csv
import io
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import grad as G
from .config import RunConfig
from .errors import ConfigError, ContractError
from .grad import Tape, Tensor, backward, resolve_dtype
from .srst import N_SPECIAL

ABLATIONS = (
    "anatomy", "subject_id", "swapped_anatomy", "random_anatomy", "none", "functional_stats",
    "full_cortex", "shuffle_sphere", "rf1", "no_global_token",
)
ABLATION_COLUMNS = (
    "variant", "seed", "seen_loss", "heldout_loss", "two_way", "acc1", "peak_mem_bytes", "wall_s",
)


# --------------------------------------------------------------------------
# identification metrics

def _row_standardize(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ContractError(f"{what} needs at least two items as rows of a 2-D array")
    c = a - a.mean(axis=1, keepdims=True)
    n = np.sqrt((c * c).sum(axis=1, keepdims=True))
    if np.any(n == 0):
        raise ContractError(f"{what} contains a constant vector; correlation is undefined")
    return c / n


def correlation_matrix(preds, targets) -> np.ndarray:
    """``C[i, j] = corr(preds[i], targets[j])``."""
    p = _row_standardize(preds, "preds")
    t = _row_standardize(targets, "targets")
    if p.shape != t.shape:
        raise ContractError(f"preds {p.shape} and targets {t.shape} differ")
    return p @ t.T


def two_way_accuracy(preds, targets, trials: int = 10_000, seed: int = 0) -> float:
    """Fraction of random (item, distractor) trials won by the true target."""
    C = correlation_matrix(preds, targets)
    n = C.shape[0]
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, trials)
    j = (i + rng.integers(1, n, trials)) % n  # uniform over the other n-1 items
    return float(np.mean(C[i, i] > C[i, j]))


def retrieval_topk(preds, targets, k: int = 1) -> float:
    """Acc@k: the true target is among the ``k`` best-correlated candidates."""
    C = correlation_matrix(preds, targets)
    if k < 1:
        raise ContractError("k must be >= 1")
    better = (C > np.diag(C)[:, None]).sum(axis=1)
    return float(np.mean(better < k))


# --------------------------------------------------------------------------
# routing statistics

@dataclass
class RoutingCounts:
    counts: np.ndarray                 # (S, depth, T, N) int64
    subjects: list[int]
    origin: list = field(default_factory=list)
    variant: str = ""
    k: int = 0

    def normalized(self) -> np.ndarray:
        tot = self.counts.sum(axis=-1, keepdims=True)
        return np.divide(self.counts, tot, out=np.zeros(self.counts.shape), where=tot > 0)


def collect_routing(model, bank, rows: dict[int, np.ndarray], batch_size: int = 64) -> RoutingCounts:
    """Exact expert activation counts per (subject, layer, token, expert)."""
    from .model import Batch, SemanticDecoder
    from .srst import token_origins

    if not isinstance(model, SemanticDecoder) or not getattr(model, "routing_trace", True):
        raise ConfigError("routing statistics need a semantic model with routing trace enabled")
    model.eval()
    sids = sorted(int(s) for s in rows)
    depth, N = len(model.blocks), model.cfg.moe.n_routed
    T = N_SPECIAL + bank.pyr_L[model.cfg.srst.functional_target_level].count + \
        bank.pyr_R[model.cfg.srst.functional_target_level].count
    counts = np.zeros((len(sids), depth, T, N), dtype=np.int64)
    for si, sid in enumerate(sids):
        r = np.asarray(rows[sid])
        for i in range(0, r.size, batch_size):
            b = Batch(np.full(r[i:i + batch_size].size, sid), r[i:i + batch_size])
            pred = model.predict(b, bank, trace=True)
            for layer, idx in enumerate(pred.routing):
                tok = np.broadcast_to(np.arange(T)[None, :, None], idx.shape)
                np.add.at(counts[si, layer], (tok.reshape(-1), idx.reshape(-1)), 1)
    tgt = model.cfg.srst.functional_target_level
    return RoutingCounts(counts, sids, token_origins(bank.pyr_L[tgt], bank.pyr_R[tgt]),
                         model.variant, model.cfg.moe.top_k)


@dataclass
class DependenceMap:
    region_dependence: np.ndarray      # (depth,)
    subject_dependence: np.ndarray     # (depth, T)

    def regular_subject_dependence(self) -> np.ndarray:
        """Per-layer mean subject dependence over regular (local) tokens."""
        return self.subject_dependence[:, N_SPECIAL:].mean(axis=1)

    def global_subject_dependence(self) -> np.ndarray:
        return self.subject_dependence[:, 4:N_SPECIAL].mean(axis=1)


def dependence_maps(counts: RoutingCounts | np.ndarray) -> DependenceMap:
    """Variance of row-normalized expert distributions across tokens and across subjects.

    The variance of a set of distribution vectors is their mean squared
    distance to the mean vector (population variance summed over experts).
    Region dependence uses the subject-averaged distributions of the regular
    tokens; subject dependence is computed per (layer, token).
    """
    c = counts if isinstance(counts, RoutingCounts) else RoutingCounts(np.asarray(counts), [])
    p = c.normalized()
    S, D, T, N = p.shape
    if S < 2:
        raise ContractError("subject dependence needs at least two subjects")
    if T - N_SPECIAL < 2:
        raise ContractError("region dependence needs at least two regular tokens")
    reg = p.mean(axis=0)[:, N_SPECIAL:, :]                       # (D, T_reg, N)
    region = reg.var(axis=1).sum(axis=-1)
    subject = p.var(axis=0).sum(axis=-1)
    return DependenceMap(region, subject)


def global_depth_trend(dm: DependenceMap) -> dict:
    """How often subject dependence is non-decreasing with depth, GLOBAL vs regular tokens."""
    g = dm.global_subject_dependence()
    r = dm.regular_subject_dependence()
    return {
        "global_nondecreasing": float(np.mean(np.diff(g) >= 0)) if g.size > 1 else float("nan"),
        "regular_nondecreasing": float(np.mean(np.diff(r) >= 0)) if r.size > 1 else float("nan"),
    }


def routing_vs_anatomy_similarity(counts: RoutingCounts, anatomies: dict) -> dict:
    """Pairwise anatomy similarity vs routing similarity.

    ``anatomies`` maps subject id to an ``(n_vertices, 4)`` array (both
    hemispheres stacked). Returns ``rows`` of ``(a, b, anatomy_sim,
    routing_sim)`` and the Spearman correlation between the two columns.
    """
    sids = counts.subjects
    if len(sids) < 3:
        raise ContractError("similarity analysis needs at least three subjects")
    p = counts.normalized().reshape(len(sids), -1)
    rows = []
    for i in range(len(sids)):
        for j in range(i + 1, len(sids)):
            a, b = np.asarray(anatomies[sids[i]], float), np.asarray(anatomies[sids[j]], float)
            anat = float(np.mean([np.corrcoef(a[:, c], b[:, c])[0, 1] for c in range(a.shape[1])]))
            route = float(p[i] @ p[j] / (np.linalg.norm(p[i]) * np.linalg.norm(p[j])))
            rows.append((sids[i], sids[j], anat, route))
    s_a, s_r = np.array([r[2] for r in rows]), np.array([r[3] for r in rows])
    if len(rows) > 1 and np.ptp(s_a) > 0 and np.ptp(s_r) > 0:
        rho = spearmanr(s_a, s_r).statistic
    else:
        rho = float("nan")  # rank correlation is undefined for a constant list
    return {"rows": rows, "spearman": float(rho)}


def format_similarity_table(result: dict) -> str:
    lines = ["pair,anatomy_similarity,routing_similarity"]
    for a, b, s_a, s_r in result["rows"]:
        lines.append(f"sub-{a:02d}/sub-{b:02d},{s_a:.4f},{s_r:.4f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# attribution

def input_x_gradient(fn, inputs: list[np.ndarray], dtype="f64") -> list[np.ndarray]:
    """Mean over output entries of ``|input * d out / d input|`` for each input array.

    ``fn`` maps a list of tensors to one output tensor; each output entry is
    back-propagated separately.
    """
    ts = [Tensor(np.array(a, copy=True), requires_grad=True, dtype=dtype) for a in inputs]
    with Tape() as tape:
        out = fn(ts)
    n_out = out.data.size
    acc = [np.zeros(t.shape) for t in ts]
    for o in range(n_out):
        seed = np.zeros(out.data.size)
        seed[o] = 1.0
        gs = backward(out, tape, ts, grad_output=seed.reshape(out.shape))
        for a, t, g in zip(acc, ts, gs):
            a += np.abs(t.data * g)
    return [a / n_out for a in acc]


@dataclass
class Attribution:
    channel: np.ndarray     # (C,), sums to 1
    vertex_L: np.ndarray    # (n_L,)
    vertex_R: np.ndarray


def normalize_attribution(per_input: list[np.ndarray]) -> Attribution:
    """Aggregate ``(n, C)`` importance arrays per channel (normalized) and per vertex."""
    ch = sum(a.sum(axis=0) for a in per_input)
    total = ch.sum()
    ch = ch / total if total > 0 else ch
    vL = per_input[0].sum(axis=1)
    vR = per_input[1].sum(axis=1) if len(per_input) > 1 else np.zeros(0)
    return Attribution(ch, vL, vR)


def attribution(model, bank, batch, dtype: str | None = None) -> Attribution:
    """Input-times-gradient importance of the anatomy channels for one subject's samples."""
    from .model import SemanticDecoder

    if not isinstance(model, SemanticDecoder) or model.variant not in ("anatomy", "swapped_anatomy"):
        raise ConfigError("attribution needs a semantic model routed by anatomy")
    sids = np.unique(batch.subjects)
    if sids.size != 1:
        raise ConfigError("attribution takes samples from a single subject")
    sid = int(sids[0])
    src = bank[model._anatomy_source(sid)]
    model.eval()

    def fn(ts):
        r = model.forward(batch, bank, anatomy={sid: (ts[0], ts[1])})
        return G.concat([r.e_image, r.e_text], axis=-1)

    dt = dtype or model.cfg.train.dtype
    imp = input_x_gradient(fn, [src.anat_L, src.anat_R], dtype=resolve_dtype(dt))
    return normalize_attribution(imp)


# --------------------------------------------------------------------------
# ablations

def ablation_config(base: RunConfig, variant: str, seed: int) -> RunConfig:
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {ABLATIONS}")
    cfg = base.copy()
    cfg.train.seed = int(seed)
    cfg.train.path = "semantic"
    if variant in ("anatomy", "subject_id", "swapped_anatomy", "random_anatomy", "none", "functional_stats"):
        cfg.moe.variant = variant
    else:
        cfg.moe.variant = "anatomy"
        if variant == "full_cortex":
            cfg.data.roi = "full"
        elif variant == "shuffle_sphere":
            cfg.srst.shuffle_topology_seed = int(seed)
        elif variant == "rf1":
            cfg.srst.receptive_field = "center_only"
        elif variant == "no_global_token":
            cfg.srst.global_tokens = False
    return cfg.validate()


def run_ablation(cohort, base: RunConfig, variant: str, seed: int, epochs: int | None = None,
                 measure_memory: bool = True) -> dict:
    """Train one variant and report seen/held-out metrics, peak traced memory and wall time."""
    from .model import bank_from_cohort, train

    cfg = ablation_config(base, variant, seed)
    if measure_memory:
        tracemalloc.start()
    t0 = time.perf_counter()
    try:
        bank = bank_from_cohort(cohort, cfg)
        res = train(bank, cfg, heldout_ids=cohort.heldout, epochs=epochs)
        wall = time.perf_counter() - t0
        peak = tracemalloc.get_traced_memory()[1] if measure_memory else None
    finally:
        if measure_memory:
            tracemalloc.stop()
    last = res.metrics[-1]
    return {
        "variant": variant,
        "seed": int(seed),
        "seen_loss": last.get("seen_loss"),
        "heldout_loss": last.get("heldout_loss"),
        "two_way": last.get("two_way"),
        "acc1": last.get("acc1"),
        "peak_mem_bytes": peak,
        "wall_s": wall,
    }


def run_ablation_matrix(cohort, base: RunConfig, variants, seeds, epochs: int | None = None,
                        measure_memory: bool = True, progress=None) -> list[dict]:
    """Every variant at every seed with an identical budget; one row per run."""
    variants = list(variants)
    for v in variants:
        if v not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {v!r}; choose from {ABLATIONS}")
    rows = []
    for seed in seeds:
        for v in variants:
            row = run_ablation(cohort, base, v, seed, epochs, measure_memory)
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r.get(c) for c in ABLATION_COLUMNS])
    return buf.getvalue()
