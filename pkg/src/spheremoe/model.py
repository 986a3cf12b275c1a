"""Transformer backbone with SG-MoE feed-forward layers, decoders and training loops.

Two decoders share the data plumbing:

* :class:`SemanticDecoder` tokenizes both hemispheres, runs ``depth`` pre-LN
  blocks of self-attention followed by an SG-MoE layer, and reads the image
  embedding from the mean of CLS tokens 0-1 and the text embedding from the
  mean of CLS tokens 2-3.
* :class:`PerceptionDecoder` is a plain MLP on the flattened ROI signal.

Training uses AdamW with decoupled weight decay and global-norm clipping.
All randomness (initialization, batching, dropout) flows from the run seed,
so two runs with the same seed produce identical loss curves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G
from .config import RunConfig, from_flat
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .grad import Tape, Tensor, backward, parameter, resolve_dtype
from .mesh import Hemisphere, n_vertices
from .nn import LayerNorm, Linear, Module
from .roi import RoiMask, RoiPyramid, cap_roi, load_roi, pyramid
from .sconv import SurfaceField
from .sgmoe import GateDecision, SGMoE, expert_entropy, load_balance_loss
from .srst import N_SPECIAL, FunctionalTokenizer, StructuralTokenizer

CLS_IMAGE = (0, 1)
CLS_TEXT = (2, 3)
METRIC_COLUMNS = (
    "epoch", "train_loss", "semantic_loss", "lb_loss", "perception_loss", "expert_entropy",
    "seen_loss", "heldout_loss", "two_way", "acc1",
)
STRUCT_VARIANTS = ("anatomy", "swapped_anatomy", "functional_stats")


# --------------------------------------------------------------------------
# data

def build_roi(cfg: RunConfig) -> tuple[RoiMask, RoiMask]:
    """ROI masks at the base level as selected by ``data.roi``."""
    level = cfg.srst.base_level
    d = cfg.data
    if d.roi == "full":
        return RoiMask.full(level, "L"), RoiMask.full(level, "R")
    if d.roi == "cap":
        if not 0 < d.roi_fraction <= 1:
            raise ConfigError("data.roi_fraction must be in (0, 1]")
        count = max(1, int(round(d.roi_fraction * n_vertices(level))))
        return cap_roi(level, "L", count), cap_roi(level, "R", count)
    if d.roi == "files":
        if not d.roi_left or not d.roi_right:
            raise ConfigError("data.roi = files needs data.roi_left and data.roi_right")
        left, right = load_roi(d.roi_left), load_roi(d.roi_right)
        if left.level != level or right.level != level:
            raise ConfigError(f"ROI files must be at srst.base_level {level}")
        return left, right
    raise ConfigError("data.roi must be cap, full or files")


@dataclass(eq=False)
class SubjectData:
    """One subject's ROI-restricted responses, targets and anatomy."""

    id: int
    x_L: np.ndarray        # (N, n_L)
    x_R: np.ndarray        # (N, n_R)
    e_image: np.ndarray
    e_text: np.ndarray
    z: np.ndarray
    stim_ids: np.ndarray
    anat_L: np.ndarray     # (n_L, 4)
    anat_R: np.ndarray

    @property
    def n(self) -> int:
        return int(self.x_L.shape[0])

    def functional_stats(self, rows=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-vertex mean and std of the responses as two channels."""
        rows = slice(None) if rows is None else rows
        out = []
        for x in (self.x_L[rows], self.x_R[rows]):
            out.append(np.stack([x.mean(axis=0), x.std(axis=0)], axis=-1).astype(x.dtype))
        return out[0], out[1]


class SubjectBank:
    """Subjects restricted to a fixed ROI, plus the ROI pyramids down to ``to_level``."""

    def __init__(self, roi: tuple[RoiMask, RoiMask], subjects: dict[int, SubjectData], to_level: int):
        self.roi = roi
        self.subjects = dict(subjects)
        self.pyr_L: RoiPyramid = pyramid(roi[0], to_level)
        self.pyr_R: RoiPyramid = pyramid(roi[1], to_level)
        self._stats: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __getitem__(self, sid: int) -> SubjectData:
        try:
            return self.subjects[int(sid)]
        except KeyError:
            raise ConfigError(f"subject {sid} not in the data bank") from None

    @property
    def ids(self) -> list[int]:
        return sorted(self.subjects)

    @property
    def n_flat(self) -> int:
        return self.roi[0].count + self.roi[1].count

    def set_stats_rows(self, sid: int, rows) -> None:
        self._stats[int(sid)] = self[sid].functional_stats(rows)

    def stats(self, sid: int):
        if int(sid) not in self._stats:
            self._stats[int(sid)] = self[sid].functional_stats()
        return self._stats[int(sid)]


def bank_from_cohort(cohort, cfg: RunConfig, roi: tuple[RoiMask, RoiMask] | None = None) -> SubjectBank:
    if cohort.level != cfg.srst.base_level:
        raise ConfigError(f"cohort is at level {cohort.level}, srst.base_level is {cfg.srst.base_level}")
    roi = build_roi(cfg) if roi is None else roi
    dt = resolve_dtype(cfg.train.dtype)
    iL, iR = roi[0].indices, roi[1].indices
    subjects = {}
    for subj in cohort.subjects:
        s = cohort.samples[subj.id]
        subjects[subj.id] = SubjectData(
            subj.id, s.x_L[:, iL].astype(dt), s.x_R[:, iR].astype(dt), s.e_image.astype(dt),
            s.e_text.astype(dt), s.z.astype(dt), s.stim_ids.copy(),
            subj.anatomy_L[iL].astype(dt), subj.anatomy_R[iR].astype(dt),
        )
    to_level = min(cfg.srst.functional_target_level, cfg.srst.structural_target_level)
    return SubjectBank(roi, subjects, to_level)


@dataclass
class Batch:
    subjects: np.ndarray   # (B,) subject ids
    rows: np.ndarray       # (B,) sample rows within each subject

    def __len__(self):
        return int(self.subjects.size)

    def gather(self, bank: SubjectBank, name: str) -> np.ndarray:
        return np.stack([getattr(bank[s], name)[r] for s, r in zip(self.subjects, self.rows)])


def derangement(ids, seed: int) -> dict[int, int]:
    """Seeded permutation of ``ids`` with no fixed points (identity for one id)."""
    ids = [int(i) for i in ids]
    if len(ids) < 2:
        return {i: i for i in ids}
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 5])
    while True:
        perm = rng.permutation(len(ids))
        if not np.any(perm == np.arange(len(ids))):
            return {ids[i]: ids[int(p)] for i, p in enumerate(perm)}


# --------------------------------------------------------------------------
# layers

class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype="f32", dropout: float = 0.0):
        if dim % heads:
            raise ConfigError("dim must be divisible by heads")
        self.heads = heads
        self.dropout = dropout
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor, train=False, rng=None) -> Tensor:
        B, T, d = x.shape
        H = self.heads
        dh = d // H
        qkv = G.transpose(G.reshape(self.qkv(x), (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = G.scale(G.matmul(q, G.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = G.dropout(G.softmax(att, axis=-1), self.dropout, train, rng)
        h = G.reshape(G.transpose(G.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
        return self.out(h)


class Block(Module):
    """Pre-LN block: ``x + attn(ln(x))`` then ``h + moe(ln(h))``."""

    def __init__(self, cfg: RunConfig, struct_dim: int, rng, dtype="f32"):
        d = cfg.model.dim
        self.ln1 = LayerNorm(d, dtype)
        self.attn = Attention(d, cfg.model.heads, rng, dtype, cfg.model.attn_dropout)
        self.ln2 = LayerNorm(d, dtype)
        self.moe = SGMoE(d, cfg.moe, struct_dim, rng, dtype)

    def __call__(self, x: Tensor, e_stru: Tensor | None, train=False, rng=None, frozen=None):
        B, T, d = x.shape
        h = G.add(x, self.attn(self.ln1(x), train, rng))
        flat = G.reshape(self.ln2(h), (B * T, d))
        m, gate = self.moe(flat, e_stru, frozen)
        return G.add(h, G.reshape(m, (B, T, d))), gate


@dataclass
class Prediction:
    e_image_hat: np.ndarray
    e_text_hat: np.ndarray
    z_hat: np.ndarray | None = None
    routing: list | None = None       # per layer: expert indices (B, T, k)


@dataclass
class ForwardResult:
    e_image: Tensor
    e_text: Tensor
    gates: list[GateDecision]
    n_tokens: int

    def prediction(self, trace: bool = False) -> Prediction:
        routing = None
        if trace:
            B = self.e_image.shape[0]
            routing = [g.expert_indices.reshape(B, self.n_tokens, -1).copy() for g in self.gates]
        return Prediction(self.e_image.data.copy(), self.e_text.data.copy(), None, routing)


class SemanticDecoder(Module):
    """Functional tokens + structure-conditioned SG-MoE transformer + two heads."""

    def __init__(self, cfg: RunConfig, subject_ids, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = np.random.default_rng(cfg.train.seed) if rng is None else rng
        dt = cfg.train.dtype
        self.cfg = cfg
        self.variant = cfg.moe.variant
        self.subject_ids = [int(s) for s in subject_ids]
        ds = cfg.srst.struct_dim
        self.struct_dim = 0 if self.variant == "none" else 2 * ds
        d = cfg.model.dim
        self.tokenizer = FunctionalTokenizer(cfg.srst, rng, dt)
        self.struct = None
        self.subject_table = None
        if self.variant in ("anatomy", "swapped_anatomy"):
            self.struct = StructuralTokenizer(cfg.srst, rng, dt, in_channels=4)
        elif self.variant == "functional_stats":
            self.struct = StructuralTokenizer(cfg.srst, rng, dt, in_channels=2)
        elif self.variant == "subject_id":
            self.subject_table = parameter(rng.normal(0, 1.0, (len(self.subject_ids), 2 * ds)), dtype=dt)
        self.blocks = [Block(cfg, self.struct_dim, rng, dt) for _ in range(cfg.model.depth)]
        self.ln_f = LayerNorm(d, dt)
        self.head_img = Linear(d, cfg.model.d_image, rng, dt)
        self.head_txt = Linear(d, cfg.model.d_text, rng, dt)
        self.derangement = derangement(self.subject_ids, cfg.train.seed) if self.variant == "swapped_anatomy" else {}

    # -- structural conditioning -------------------------------------------

    def _anatomy_source(self, sid: int) -> int:
        return self.derangement.get(int(sid), int(sid)) if self.variant == "swapped_anatomy" else int(sid)

    def subject_struct(self, sids, bank: SubjectBank, anatomy: dict | None = None) -> Tensor:
        """Per-subject token conditioning ``(S, T, 2*d_s)`` (zeros on special tokens' local half).

        ``anatomy`` maps a subject id to ``(a_L, a_R)`` tensors and overrides
        the bank, which lets attribution differentiate through the input.
        """
        dt = resolve_dtype(self.cfg.train.dtype)
        a_L, a_R = [], []
        for sid in sids:
            if anatomy is not None and int(sid) in anatomy:
                tl, tr = anatomy[int(sid)]
            elif self.variant == "functional_stats":
                tl, tr = (Tensor(a, dtype=dt) for a in bank.stats(sid))
            else:
                src = bank[self._anatomy_source(sid)]
                tl, tr = Tensor(src.anat_L, dtype=dt), Tensor(src.anat_R, dtype=dt)
            a_L.append(G.reshape(tl, (tl.shape[0], 1, tl.shape[1])))
            a_R.append(G.reshape(tr, (tr.shape[0], 1, tr.shape[1])))
        f_L = SurfaceField(bank.roi[0].level, Hemisphere.LEFT, G.concat(a_L, axis=1), bank.roi[0])
        f_R = SurfaceField(bank.roi[1].level, Hemisphere.RIGHT, G.concat(a_R, axis=1), bank.roi[1])
        emb = self.struct(f_L, f_R, bank.pyr_L, bank.pyr_R)
        S = len(sids)
        per = G.transpose(emb.per_local_token, (1, 0, 2))          # (S, T_loc, d_s)
        ds = per.shape[-1]
        zeros = Tensor(np.zeros((S, N_SPECIAL, ds), dtype=dt))
        local = G.concat([zeros, per], axis=1)                     # (S, T, d_s)
        T = local.shape[1]
        if not self.cfg.moe.struct_global:
            return G.concat([local, Tensor(np.zeros((S, T, ds), dtype=dt))], axis=-1)
        glob = G.add(Tensor(np.zeros((S, T, ds), dtype=dt)), G.reshape(emb.global_, (S, 1, ds)))
        return G.concat([local, glob], axis=-1)

    def token_struct(self, batch: Batch, bank: SubjectBank, T: int, anatomy: dict | None = None) -> Tensor | None:
        """Structural embedding for every token of the batch, flattened to ``(B*T, 2*d_s)``."""
        B = len(batch)
        dt = resolve_dtype(self.cfg.train.dtype)
        v = self.variant
        if v == "none":
            return None
        if v == "subject_id":
            pos = np.array([self.subject_ids.index(int(s)) for s in batch.subjects])
            per_b = G.gather_rows(self.subject_table, pos)          # (B, 2ds)
            full = G.add(Tensor(np.zeros((B, T, self.struct_dim), dtype=dt)),
                         G.reshape(per_b, (B, 1, self.struct_dim)))
            return G.reshape(full, (B * T, self.struct_dim))
        if v == "random_anatomy":
            seed = self.cfg.train.seed
            rows = []
            for s, r in zip(batch.subjects, batch.rows):
                stim = int(bank[s].stim_ids[r])
                g = np.random.default_rng([seed & 0xFFFFFFFF, int(s), stim & 0xFFFFFFFF, stim >> 32])
                rows.append(g.standard_normal((T, self.struct_dim)))
            return Tensor(np.concatenate(rows, axis=0), dtype=dt)
        uniq, inv = np.unique(batch.subjects, return_inverse=True)
        per_subject = self.subject_struct(uniq, bank, anatomy)   # (S, T, 2ds)
        if per_subject.shape[1] != T:
            raise ShapeError("structural and functional token counts differ")
        return G.reshape(G.gather_rows(per_subject, inv), (B * T, self.struct_dim))

    # -- forward -------------------------------------------------------------

    def forward(self, batch: Batch, bank: SubjectBank, train: bool = False, rng=None,
                frozen=None, anatomy: dict | None = None, x: tuple | None = None) -> ForwardResult:
        dt = resolve_dtype(self.cfg.train.dtype)
        if x is None:
            xl = Tensor(batch.gather(bank, "x_L").T[:, :, None], dtype=dt)
            xr = Tensor(batch.gather(bank, "x_R").T[:, :, None], dtype=dt)
        else:
            xl, xr = x
        f_L = SurfaceField(bank.roi[0].level, Hemisphere.LEFT, xl, bank.roi[0])
        f_R = SurfaceField(bank.roi[1].level, Hemisphere.RIGHT, xr, bank.roi[1])
        seq = self.tokenizer(f_L, f_R, bank.pyr_L, bank.pyr_R, train=train, rng=rng)
        h = seq.tokens
        B, T, d = h.shape
        e_stru = self.token_struct(batch, bank, T, anatomy)
        gates = []
        for i, blk in enumerate(self.blocks):
            h, gate = blk(h, e_stru, train, rng, None if frozen is None else frozen[i])
            gates.append(gate)
        h = self.ln_f(h)
        img = G.mean(h[:, CLS_IMAGE[0]:CLS_IMAGE[-1] + 1, :], axis=1)
        txt = G.mean(h[:, CLS_TEXT[0]:CLS_TEXT[-1] + 1, :], axis=1)
        return ForwardResult(self.head_img(img), self.head_txt(txt), gates, T)

    def predict(self, batch: Batch, bank: SubjectBank, trace: bool = False) -> Prediction:
        return self.forward(batch, bank).prediction(trace)


class PerceptionDecoder(Module):
    """Flattened ROI signal -> two GELU hidden layers of width ``4*dim`` -> ``d_latent``."""

    def __init__(self, cfg: RunConfig, n_flat: int, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = np.random.default_rng(cfg.train.seed) if rng is None else rng
        dt = cfg.train.dtype
        w = 4 * cfg.model.dim
        self.cfg = cfg
        self.n_flat = n_flat
        self.fc1 = Linear(n_flat, w, rng, dt)
        self.fc2 = Linear(w, w, rng, dt)
        self.fc3 = Linear(w, cfg.model.d_latent, rng, dt)

    def __call__(self, flat: Tensor) -> Tensor:
        if flat.shape[-1] != self.n_flat:
            raise ShapeError(f"flattened ROI has length {flat.shape[-1]}, decoder expects {self.n_flat}")
        return self.fc3(G.gelu(self.fc2(G.gelu(self.fc1(flat)))))


def forward_perception(model: PerceptionDecoder, x_L, x_R) -> Tensor:
    dt = resolve_dtype(model.cfg.train.dtype)
    xl = x_L if isinstance(x_L, Tensor) else Tensor(np.atleast_2d(x_L), dtype=dt)
    xr = x_R if isinstance(x_R, Tensor) else Tensor(np.atleast_2d(x_R), dtype=dt)
    return model(G.concat([xl, xr], axis=-1))


# --------------------------------------------------------------------------
# losses

def squared_error(pred: Tensor, target) -> Tensor:
    """Per-sample squared error summed over feature dims, averaged over the batch."""
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    n = pred.shape[0] if pred.ndim > 1 else 1
    return G.scale(G.mse(pred, target, reduction="sum"), 1.0 / n)


def semantic_loss(img_hat: Tensor, txt_hat: Tensor, img, txt, gates=None, lb_coeff: float = 0.0) -> Tensor:
    loss = G.add(squared_error(img_hat, img), squared_error(txt_hat, txt))
    if gates and lb_coeff > 0:
        loss = G.add(loss, G.scale(load_balance_loss(gates), lb_coeff))
    return loss


def perception_loss(z_hat: Tensor, z) -> Tensor:
    return squared_error(z_hat, z)


# --------------------------------------------------------------------------
# optimization

class AdamW:
    """Adam with decoupled weight decay: ``p *= 1 - lr*wd`` before the Adam step."""

    def __init__(self, params, lr=1e-4, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            t = p.dtype.type
            if self.wd:
                p.data *= t(1.0 - self.lr * self.wd)
            m *= t(b1)
            m += t(1 - b1) * g
            v *= t(b2)
            v += t(1 - b2) * g * g
            upd = (m / t(c1)) / (np.sqrt(v / t(c2)) + t(self.eps))
            p.data -= t(self.lr) * upd

    def state(self) -> dict:
        return {"t": self.t}


def clip_grad_norm(grads, max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        k = max_norm / (total + 1e-12)
        grads = [g * g.dtype.type(k) for g in grads]
    return grads, total


# --------------------------------------------------------------------------
# splits and batching

@dataclass
class Split:
    train: dict[int, np.ndarray]
    test: dict[int, np.ndarray]


def make_split(bank: SubjectBank, train_ids, heldout_ids, eval_fraction: float, seed: int) -> Split:
    """Seeded per-subject train/test rows; held-out subjects are test-only."""
    tr, te = {}, {}
    for sid in train_ids:
        n = bank[sid].n
        perm = np.random.default_rng([seed & 0xFFFFFFFF, 17, int(sid)]).permutation(n)
        n_test = int(round(eval_fraction * n))
        te[int(sid)] = np.sort(perm[:n_test])
        tr[int(sid)] = np.sort(perm[n_test:])
    for sid in heldout_ids:
        te[int(sid)] = np.arange(bank[sid].n)
    return Split(tr, te)


def balanced_batches(rows: dict[int, np.ndarray], batch_size: int, rng: np.random.Generator) -> list[Batch]:
    """Each batch draws an equal share from every subject (one epoch of the largest subject)."""
    sids = sorted(rows)
    per = max(1, batch_size // len(sids))
    perms = {s: rows[s][rng.permutation(rows[s].size)] for s in sids}
    n_steps = max(int(np.ceil(rows[s].size / per)) for s in sids)
    out = []
    for i in range(n_steps):
        subj, rr = [], []
        for s in sids:
            p = perms[s]
            take = np.arange(i * per, (i + 1) * per) % p.size
            subj.append(np.full(per, s))
            rr.append(p[take])
        out.append(Batch(np.concatenate(subj), np.concatenate(rr)))
    return out


def eval_batches(rows: dict[int, np.ndarray], size: int = 64) -> list[Batch]:
    out = []
    for s in sorted(rows):
        r = rows[s]
        for i in range(0, r.size, size):
            out.append(Batch(np.full(r[i:i + size].size, s), r[i:i + size]))
    return out


# --------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    loss: float
    two_way: float
    acc1: float
    n: int
    preds: np.ndarray = field(repr=False, default=None)
    targets: np.ndarray = field(repr=False, default=None)


def evaluate(model, bank: SubjectBank, rows: dict[int, np.ndarray], seed: int = 0) -> EvalResult:
    """Loss, 2-way identification and Acc@1 on the given rows (eval mode)."""
    from .analysis import retrieval_topk, two_way_accuracy

    model.eval()
    preds, targets, losses = [], [], []
    for b in eval_batches(rows):
        if isinstance(model, PerceptionDecoder):
            zh = forward_perception(model, b.gather(bank, "x_L"), b.gather(bank, "x_R")).data
            tgt = b.gather(bank, "z")
            p = zh
        else:
            r = model.forward(b, bank)
            p = np.concatenate([r.e_image.data, r.e_text.data], axis=1)
            tgt = np.concatenate([b.gather(bank, "e_image"), b.gather(bank, "e_text")], axis=1)
        losses.append(((p.astype(np.float64) - tgt) ** 2).sum(axis=1))
        preds.append(p)
        targets.append(tgt)
    P, Y = np.concatenate(preds), np.concatenate(targets)
    loss = float(np.concatenate(losses).mean())
    tw = two_way_accuracy(P, Y, trials=2000, seed=seed) if len(P) >= 2 else float("nan")
    a1 = retrieval_topk(P, Y, 1) if len(P) >= 2 else float("nan")
    return EvalResult(loss, tw, a1, len(P), P, Y)


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: Module
    metrics: list[dict]
    split: Split
    seconds: float = 0.0


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(rows: list[dict], path) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(c)) for c in METRIC_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _step_loss(model, bank: SubjectBank, batch: Batch, train: bool, rng, lb_coeff: float):
    """Returns (total loss, task loss, lb loss tensor or None, gates)."""
    if isinstance(model, PerceptionDecoder):
        zh = forward_perception(model, batch.gather(bank, "x_L"), batch.gather(bank, "x_R"))
        loss = perception_loss(zh, batch.gather(bank, "z"))
        return loss, loss, None, []
    r = model.forward(batch, bank, train=train, rng=rng)
    task = semantic_loss(r.e_image, r.e_text, batch.gather(bank, "e_image"), batch.gather(bank, "e_text"))
    lb = load_balance_loss(r.gates)
    total = G.add(task, G.scale(lb, lb_coeff)) if lb_coeff > 0 else task
    return total, task, lb, r.gates


def fit(model, bank: SubjectBank, rows: dict[int, np.ndarray], cfg: RunConfig, epochs: int,
        rng: np.random.Generator, eval_fn=None, batch_size: int | None = None,
        start_epoch: int = 1) -> list[dict]:
    """Run ``epochs`` epochs of AdamW on ``rows``; one metrics dict per epoch."""
    t = cfg.train
    semantic = not isinstance(model, PerceptionDecoder)
    if batch_size is None:
        batch_size = t.batch_semantic if semantic else t.batch_perception
    params = model.parameters()
    opt = AdamW(params, t.lr, t.weight_decay, (t.beta1, t.beta2), t.adam_eps)
    n_routed = cfg.moe.n_routed
    log = []
    step = 0
    for epoch in range(start_epoch, start_epoch + epochs):
        model.train()
        tot, task_sum, lb_sum, n_b = 0.0, 0.0, 0.0, 0
        all_gates = []
        for batch in balanced_batches(rows, batch_size, rng):
            try:
                with Tape() as tape:
                    loss, task, lb, gates = _step_loss(model, bank, batch, True, rng, cfg.moe.lb_coeff)
                val = float(loss.data)
                if not np.isfinite(val):
                    raise NumericError("non-finite loss")
            except NumericError as exc:
                err = NumericError(f"{exc} at epoch {epoch}, batch {n_b} (step {step})")
                err.batch_index = n_b
                raise err from exc
            grads = backward(loss, tape, params)
            grads, _ = clip_grad_norm(grads, t.grad_clip_norm)
            opt.step(grads)
            tot += val
            task_sum += float(task.data)
            if lb is not None:
                lb_sum += float(lb.data)
            all_gates.extend(gates)
            n_b += 1
            step += 1
        row = {
            "epoch": epoch,
            "train_loss": tot / n_b,
            "semantic_loss": task_sum / n_b if semantic else None,
            "lb_loss": lb_sum / n_b if semantic else None,
            "perception_loss": None if semantic else task_sum / n_b,
            "expert_entropy": expert_entropy(all_gates, n_routed) if semantic else None,
        }
        if eval_fn is not None:
            row.update(eval_fn(epoch))
        log.append(row)
    model.eval()
    return log


def make_model(cfg: RunConfig, bank: SubjectBank, subject_ids=None):
    rng = np.random.default_rng(cfg.train.seed)
    if cfg.train.path == "perception":
        return PerceptionDecoder(cfg, bank.n_flat, rng)
    return SemanticDecoder(cfg, bank.ids if subject_ids is None else subject_ids, rng)


def train(bank: SubjectBank, cfg: RunConfig, train_ids=None, heldout_ids=(), epochs: int | None = None,
          eval_every: int = 0, model=None) -> TrainResult:
    """Train a decoder on ``train_ids`` (default: every subject not held out).

    Metrics for seen-subject test rows and held-out subjects are filled in on
    the final epoch and every ``eval_every`` epochs.
    """
    import time

    cfg.validate()
    heldout_ids = [int(h) for h in heldout_ids]
    train_ids = [s for s in bank.ids if s not in heldout_ids] if train_ids is None else [int(s) for s in train_ids]
    if not train_ids:
        raise ConfigError("training needs at least one subject")
    t = cfg.train
    if epochs is None:
        epochs = t.epochs_semantic if t.path == "semantic" else t.epochs_perception
    split = make_split(bank, train_ids, heldout_ids, cfg.data.eval_fraction, t.seed)
    for sid in train_ids:
        bank.set_stats_rows(sid, split.train[sid])
    model = make_model(cfg, bank) if model is None else model
    rng = np.random.default_rng([t.seed & 0xFFFFFFFF, 99])

    def eval_fn(epoch):
        if not (epoch == epochs or (eval_every and epoch % eval_every == 0)):
            return {}
        out = {}
        seen = {s: split.test[s] for s in train_ids if split.test[s].size}
        if seen:
            out["seen_loss"] = evaluate(model, bank, seen, t.seed).loss
        if heldout_ids:
            r = evaluate(model, bank, {s: split.test[s] for s in heldout_ids}, t.seed)
            out.update(heldout_loss=r.loss, two_way=r.two_way, acc1=r.acc1)
        return out

    t0 = time.perf_counter()
    rows = {s: split.train[s] for s in train_ids}
    log = fit(model, bank, rows, cfg, epochs, rng, eval_fn)
    return TrainResult(model, log, split, time.perf_counter() - t0)


@dataclass
class FinetuneResult:
    model: Module
    metrics: list[dict]
    train_rows: np.ndarray
    test_rows: np.ndarray


def finetune(model, bank: SubjectBank, subject: int, fraction: float, epochs: int, cfg: RunConfig,
             seed: int | None = None) -> FinetuneResult:
    """Adapt every parameter to one new subject using a seeded fraction of its data.

    The subject's rows are split into a fine-tuning pool and a test part
    (``data.eval_fraction``); ``fraction`` of the pool is used. Row 0 of the
    curve is the zero-shot model.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    seed = cfg.train.seed if seed is None else seed
    sid = int(subject)
    n = bank[sid].n
    perm = np.random.default_rng([seed & 0xFFFFFFFF, 23, sid]).permutation(n)
    n_test = int(round(cfg.data.eval_fraction * n))
    test, pool = np.sort(perm[:n_test]), perm[n_test:]
    n_use = max(1, int(round(fraction * pool.size)))
    use = np.sort(pool[:n_use])
    if isinstance(model, SemanticDecoder) and sid not in model.subject_ids:
        if model.variant == "subject_id":
            raise ConfigError("subject_id models cannot be fine-tuned to an unseen subject id")
    bank.set_stats_rows(sid, use)

    def metrics(epoch):
        r = evaluate(model, bank, {sid: test}, seed)
        return {"heldout_loss": r.loss, "two_way": r.two_way, "acc1": r.acc1}

    curve = [{"epoch": 0, **metrics(0)}]
    if epochs:
        rng = np.random.default_rng([seed & 0xFFFFFFFF, 31])
        curve += fit(model, bank, {sid: use}, cfg, epochs, rng, metrics)
    return FinetuneResult(model, curve, use, test)


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model, path, extra: dict | None = None) -> None:
    cfg: RunConfig = model.cfg
    meta = {"config": cfg.to_flat(), "kind": type(model).__name__, **(extra or {})}
    if isinstance(model, SemanticDecoder):
        meta["subject_ids"] = model.subject_ids
        meta["derangement"] = {str(k): v for k, v in model.derangement.items()}
    else:
        meta["n_flat"] = model.n_flat
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns ``(model, meta)``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    cfg = from_flat(meta["config"]).validate()
    if meta["kind"] == "SemanticDecoder":
        model = SemanticDecoder(cfg, meta["subject_ids"])
        model.derangement = {int(k): int(v) for k, v in meta.get("derangement", {}).items()}
    else:
        model = PerceptionDecoder(cfg, int(meta["n_flat"]))
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint {path} does not match its model: {exc}") from exc
    model.eval()
    return model, meta
