"""Synthetic multi-subject cohorts with a shared anatomy-to-function rule.

Every subject has four smooth, standardized anatomy channels per hemisphere.
A stimulus latent ``y`` produces the response at vertex ``v``::

    x(v) = g(a(v)) . (M phi(y)) + sigma * eps(v)

where ``g``, ``M`` and ``phi`` are drawn once from the rule seed and shared
by all subjects. Decoding targets are fixed linear projections of ``y``.

Two rules for ``g`` are available:

* ``"mlp"`` (default): a frozen 4 -> 16 -> d_mix tanh network without biases.
* ``"layout_sign"``: the first three channels pick which latent feature a
  vertex carries (a sharp softmax over fixed projections) and the fourth
  channel sets its polarity through ``tanh``. Paired with per-channel
  template weights such as ``(1, 1, 1, 0)``, the feature layout is common
  to all subjects while the polarity pattern is individual.

Subjects can share part of their anatomy through a cohort template
(``template_weight``), which controls how similar anatomy is across the
cohort.

On disk a cohort is a directory::

    index.json
    subjects/sub-XX.anat.bin     # SMOE header + float32 (2, V, 4)
    samples/sub-XX.bin           # SMOE header + float32 arrays
"""

from __future__ import annotations

import json
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .mesh import SENTINEL, MeshLevel, mesh_level, n_vertices
from .roi import RoiMask, cap_roi
from .config import DataConfig

MAGIC = b"SMOE"
VERSION = 1
KIND_ANATOMY = 1
KIND_SAMPLES = 2
_HEADER = struct.Struct("<4sIIIIIIIII")  # magic, version, kind, 7 dims


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


# --------------------------------------------------------------------------
# anatomy

def ring_smooth(values: np.ndarray, mesh: MeshLevel, rounds: int) -> np.ndarray:
    """``rounds`` passes of the 1-ring mean (pentagons duplicate the centre)."""
    nb = mesh.neighbors
    slots = np.concatenate([np.arange(nb.shape[0])[:, None], np.where(nb == SENTINEL, np.arange(nb.shape[0])[:, None], nb)], axis=1)
    out = values
    for _ in range(rounds):
        out = out[slots].mean(axis=1)
    return out


def ring_autocorrelation(values: np.ndarray, mesh: MeshLevel, mask: np.ndarray | None = None) -> float:
    """Pearson correlation of a scalar field across all mesh edges (lag-1)."""
    e = mesh.edges()
    if mask is not None:
        e = e[mask[e[:, 0]] & mask[e[:, 1]]]
    a = np.concatenate([values[e[:, 0]], values[e[:, 1]]])
    b = np.concatenate([values[e[:, 1]], values[e[:, 0]]])
    return float(np.corrcoef(a, b)[0, 1])


def _standardize(field_: np.ndarray, sel: np.ndarray) -> np.ndarray:
    mu = field_[sel].mean(axis=0)
    sd = field_[sel].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (field_ - mu) / sd


@dataclass(eq=False)
class SyntheticSubject:
    id: int
    anatomy_L: np.ndarray  # (V, 4) float32
    anatomy_R: np.ndarray
    seed: int
    smoothing: int
    level: int

    def anatomy(self, hemi: str) -> np.ndarray:
        return self.anatomy_L if hemi in ("L", "LEFT") else self.anatomy_R


def _smooth_noise(seed: int, tag: int, level: int, rounds: int) -> tuple[np.ndarray, np.ndarray]:
    mesh = mesh_level(level)
    V = mesh.n_vertices
    rng = _rng(seed, tag)
    raw = rng.standard_normal((2, V, 4))
    return ring_smooth(raw[0], mesh, rounds), ring_smooth(raw[1], mesh, rounds)


def template_weights(value) -> np.ndarray:
    """Normalize a scalar or per-channel template weight to a ``(4,)`` array in [0, 1]."""
    try:
        w = np.broadcast_to(np.asarray(value, dtype=np.float64), (4,)).copy()
    except ValueError:
        raise ConfigError(f"template_weight needs 1 or 4 values, got {value!r}") from None
    if np.any(w < 0) or np.any(w > 1):
        raise ConfigError("template_weight must be in [0, 1]")
    return w


def gen_subject(seed: int, smoothing_rounds: int, level: int = 4, subject_id: int = 0,
                roi: tuple[RoiMask, RoiMask] | None = None, template_seed: int | None = None,
                template_weight=0.0) -> SyntheticSubject:
    """Smooth random anatomy, standardized per channel over the ROI.

    With ``template_seed`` the raw field is ``sqrt(w) * template + sqrt(1 - w) * own``
    so subjects share a common spatial layout, as registered brains do.
    ``template_weight`` is a scalar or one weight per channel.
    """
    if smoothing_rounds < 0:
        raise ConfigError("smoothing_rounds must be >= 0")
    w = template_weights(template_weight)
    own_L, own_R = _smooth_noise(seed, 1, level, smoothing_rounds)
    if template_seed is not None and np.any(w > 0):
        t_L, t_R = _smooth_noise(template_seed, 2, level, smoothing_rounds)
        # rescale both parts to unit variance before mixing
        own_L, own_R = own_L / own_L.std(0), own_R / own_R.std(0)
        t_L, t_R = t_L / t_L.std(0), t_R / t_R.std(0)
        own_L = np.sqrt(w) * t_L + np.sqrt(1 - w) * own_L
        own_R = np.sqrt(w) * t_R + np.sqrt(1 - w) * own_R
    V = n_vertices(level)
    sel_L = roi[0].selected if roi is not None else np.ones(V, bool)
    sel_R = roi[1].selected if roi is not None else np.ones(V, bool)
    a_L = _standardize(own_L, sel_L).astype(np.float32)
    a_R = _standardize(own_R, sel_R).astype(np.float32)
    return SyntheticSubject(subject_id, a_L, a_R, seed, smoothing_rounds, level)


# --------------------------------------------------------------------------
# shared rule

RULES = ("mlp", "layout_sign")
# share of each anatomy channel's variance that comes from the cohort template
TEMPLATE_WEIGHT = 0.3


@dataclass(eq=False)
class World:
    """The structure-to-function rule and target projections shared by all subjects."""

    seed: int
    d_latent: int = 8
    d_mix: int = 8
    d_image: int = 32
    d_text: int = 32
    d_vae: int = 16
    g_hidden: int = 16
    rule: str = "mlp"
    beta: float = 4.0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}, got {self.rule!r}")
        rng = _rng(self.seed, 7)
        self.g_w1 = rng.normal(0, 1.0, (4, self.g_hidden))
        self.g_w2 = rng.normal(0, 1.0 / np.sqrt(self.g_hidden), (self.g_hidden, self.d_mix))
        q, _ = np.linalg.qr(rng.normal(size=(self.d_mix, self.d_mix)))
        self.mix = q
        self.phi = rng.normal(0, 1.0 / np.sqrt(self.d_latent), (self.d_mix, self.d_latent))
        self.p_image = rng.normal(0, 1.0 / np.sqrt(self.d_latent), (self.d_image, self.d_latent))
        self.p_text = rng.normal(0, 1.0 / np.sqrt(self.d_latent), (self.d_text, self.d_latent))
        self.p_vae = rng.normal(0, 1.0 / np.sqrt(self.d_latent), (self.d_vae, self.d_latent))
        self.layout = rng.normal(0, 1.0, (3, self.d_mix))
        # normalize so responses have unit variance for standard-normal anatomy
        self.gain = 1.0
        probe_a = rng.standard_normal((2048, 4))
        probe_y = rng.standard_normal((256, self.d_latent))
        self.gain = 1.0 / float(np.sqrt(np.mean(self.response(probe_a, probe_y) ** 2)))

    def g(self, anatomy: np.ndarray) -> np.ndarray:
        """Per-vertex mixing weights ``(V, d_mix)`` from anatomy ``(V, 4)``."""
        if self.rule == "mlp":
            return np.tanh(anatomy @ self.g_w1) @ self.g_w2
        z = self.beta * (anatomy[:, :3] @ self.layout)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True) * np.tanh(self.beta * anatomy[:, 3:4])

    def features(self, y: np.ndarray) -> np.ndarray:
        """``M phi(y)`` for a batch of latents ``(n, d_latent)`` -> ``(n, d_mix)``."""
        return y @ self.phi.T @ self.mix.T

    def response(self, anatomy: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Noise-free responses ``(n, V)``."""
        return self.gain * self.features(y) @ self.g(anatomy).T

    def targets(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return y @ self.p_image.T, y @ self.p_text.T, y @ self.p_vae.T


@dataclass(eq=False)
class SynthSample:
    y: np.ndarray
    x_L: np.ndarray
    x_R: np.ndarray
    e_image: np.ndarray
    e_text: np.ndarray
    z: np.ndarray


def stimulus_latent(world: World, stim_seed: int) -> np.ndarray:
    return _rng(world.seed, 11, stim_seed).standard_normal(world.d_latent)


def gen_sample(subject: SyntheticSubject, stim_seed: int, sigma: float, world: World,
               noise_seed: int | None = None) -> SynthSample:
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    y = stimulus_latent(world, stim_seed)[None]
    x_L = world.response(subject.anatomy_L.astype(np.float64), y)[0]
    x_R = world.response(subject.anatomy_R.astype(np.float64), y)[0]
    if sigma > 0:
        nrng = _rng(world.seed, 13, subject.seed, stim_seed if noise_seed is None else noise_seed)
        x_L = x_L + sigma * nrng.standard_normal(x_L.shape)
        x_R = x_R + sigma * nrng.standard_normal(x_R.shape)
    img, txt, z = world.targets(y)
    return SynthSample(y[0], x_L, x_R, img[0], txt[0], z[0])


@dataclass(eq=False)
class SampleSet:
    """All samples of one subject, as float32 arrays with a leading sample axis."""

    stim_ids: np.ndarray  # int64 (N,)
    y: np.ndarray
    x_L: np.ndarray       # (N, V)
    x_R: np.ndarray
    e_image: np.ndarray
    e_text: np.ndarray
    z: np.ndarray

    def __len__(self):
        return int(self.stim_ids.size)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(*(getattr(self, f)[idx] for f in SampleSet.__dataclass_fields__))


def gen_samples(subject: SyntheticSubject, stim_ids, sigma: float, world: World) -> SampleSet:
    stim_ids = np.asarray(stim_ids, dtype=np.int64)
    ys = [gen_sample(subject, int(s), sigma, world) for s in stim_ids]
    f32 = np.float32
    return SampleSet(
        stim_ids,
        np.stack([s.y for s in ys]).astype(f32),
        np.stack([s.x_L for s in ys]).astype(f32),
        np.stack([s.x_R for s in ys]).astype(f32),
        np.stack([s.e_image for s in ys]).astype(f32),
        np.stack([s.e_text for s in ys]).astype(f32),
        np.stack([s.z for s in ys]).astype(f32),
    )


# --------------------------------------------------------------------------
# cohorts

@dataclass(eq=False)
class Cohort:
    level: int
    world: World
    sigma: float
    smoothing: int
    subjects: list[SyntheticSubject]
    samples: dict[int, SampleSet]
    heldout: list[int] = field(default_factory=list)
    n_shared: int = 0
    seed: int = 0
    template_weight: list = field(default_factory=lambda: [0.0] * 4)

    @property
    def subject_ids(self) -> list[int]:
        return [s.id for s in self.subjects]

    @property
    def train_ids(self) -> list[int]:
        return [s for s in self.subject_ids if s not in self.heldout]

    def subject(self, sid: int) -> SyntheticSubject:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise ConfigError(f"no subject {sid} in cohort")

    @property
    def n_samples(self) -> int:
        return sum(len(s) for s in self.samples.values())

    def index(self) -> dict:
        w = self.world
        return {
            "format": "SMOE",
            "version": VERSION,
            "level": self.level,
            "n_vertices": n_vertices(self.level),
            "n_subjects": len(self.subjects),
            "n_samples": self.n_samples,
            "samples_per_subject": {f"sub-{s:02d}": len(self.samples[s]) for s in self.subject_ids},
            "subjects": [{"id": s.id, "seed": s.seed, "smoothing": s.smoothing} for s in self.subjects],
            "heldout": list(self.heldout),
            "sigma": self.sigma,
            "smoothing": self.smoothing,
            "n_shared": self.n_shared,
            "seed": self.seed,
            "template_weight": self.template_weight,
            "world": {"seed": w.seed, "d_latent": w.d_latent, "d_mix": w.d_mix, "d_image": w.d_image,
                      "d_text": w.d_text, "d_vae": w.d_vae, "g_hidden": w.g_hidden,
                      "rule": w.rule, "beta": w.beta},
        }


def derive_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(base) & 0xFFFFFFFF] + [int(k) for k in keys]).generate_state(1)[0])


def gen_cohort(n_subjects: int, samples_per_subject: int, seed: int = 0, *, level: int = 4,
               sigma: float = 0.3, smoothing: int = 20, n_heldout: int = 0, n_shared: int = 0,
               template_weight=TEMPLATE_WEIGHT, roi: tuple[RoiMask, RoiMask] | None = None,
               roi_fraction: float | None = DataConfig.roi_fraction,
               world: World | None = None, clone: tuple[int, int] | None = None,
               out=None, force: bool = False) -> Cohort:
    """Generate (and optionally write) a cohort.

    The first ``n_shared`` stimuli are common to all subjects; the rest are
    unique per subject. The last ``n_heldout`` subjects are marked unseen.
    ``clone=(src, dst)`` gives subject ``dst`` the anatomy of ``src``.
    Anatomy is standardized over ``roi``; without one, over the cap ROI of
    ``roi_fraction`` (the default decoding ROI), or over the whole sphere
    when ``roi_fraction`` is None.
    """
    if n_subjects < 1 or samples_per_subject < 1:
        raise ConfigError("need at least one subject and one sample")
    if not 0 <= n_heldout < n_subjects:
        raise ConfigError("n_heldout must leave at least one training subject")
    if out is not None:
        out = Path(out)
        if out.exists() and any(out.iterdir()) if out.is_dir() else out.exists():
            if not force:
                raise ConfigError(f"{out} already exists (use force to overwrite)")
    if roi is None and roi_fraction is not None:
        if not 0 < roi_fraction <= 1:
            raise ConfigError("roi_fraction must be in (0, 1]")
        count = max(1, int(round(roi_fraction * n_vertices(level))))
        roi = (cap_roi(level, "L", count), cap_roi(level, "R", count))
    world = world if world is not None else World(derive_seed(seed, 1))
    template_seed = derive_seed(seed, 2)
    subjects = []
    for s in range(n_subjects):
        src = clone[0] if clone is not None and s == clone[1] else s
        subj = gen_subject(derive_seed(seed, 3, src), smoothing, level, subject_id=s, roi=roi,
                           template_seed=template_seed, template_weight=template_weight)
        subjects.append(subj)
    samples = {}
    for subj in subjects:
        shared = np.arange(n_shared)
        own = 1_000_000 * (subj.id + 1) + np.arange(samples_per_subject - n_shared)
        stim = np.concatenate([shared, own])[:samples_per_subject]
        samples[subj.id] = gen_samples(subj, stim, sigma, world)
    heldout = list(range(n_subjects - n_heldout, n_subjects))
    cohort = Cohort(level, world, sigma, smoothing, subjects, samples, heldout, n_shared, seed,
                    template_weights(template_weight).tolist())
    if out is not None:
        save_cohort(cohort, out, force=force)
    return cohort


def _write_block(path: Path, kind: int, dims, arrays) -> None:
    dims = list(dims) + [0] * (7 - len(dims))
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, kind, *dims))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_block(path: Path, kind: int):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, k, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if k != kind:
        raise FormatError(f"{path}: expected block kind {kind}, found {k}")
    return dims, np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)


def save_cohort(cohort: Cohort, out, force: bool = False) -> None:
    out = Path(out)
    if out.exists():
        if not force:
            raise ConfigError(f"{out} already exists (use force to overwrite)")
        shutil.rmtree(out)
    (out / "subjects").mkdir(parents=True)
    (out / "samples").mkdir()
    V = n_vertices(cohort.level)
    for subj in cohort.subjects:
        _write_block(out / "subjects" / f"sub-{subj.id:02d}.anat.bin", KIND_ANATOMY,
                     [cohort.level, V, 4], [subj.anatomy_L, subj.anatomy_R])
        s = cohort.samples[subj.id]
        w = cohort.world
        _write_block(out / "samples" / f"sub-{subj.id:02d}.bin", KIND_SAMPLES,
                     [len(s), V, w.d_latent, w.d_image, w.d_text, w.d_vae],
                     [s.stim_ids.astype(np.float32), s.y, s.x_L, s.x_R, s.e_image, s.e_text, s.z])
        # stim ids are also kept exactly in the index (float32 cannot hold large ids)
    idx = cohort.index()
    idx["stim_ids"] = {f"sub-{s:02d}": cohort.samples[s].stim_ids.tolist() for s in cohort.subject_ids}
    (out / "index.json").write_text(json.dumps(idx, indent=1))


def load_cohort(path) -> Cohort:
    path = Path(path)
    try:
        idx = json.loads((path / "index.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: no index.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}/index.json: {exc}") from exc
    w = World(**idx["world"])
    level = int(idx["level"])
    V = n_vertices(level)
    subjects, samples = [], {}
    for meta in idx["subjects"]:
        sid = int(meta["id"])
        dims, data = _read_block(path / "subjects" / f"sub-{sid:02d}.anat.bin", KIND_ANATOMY)
        if dims[0] != level or dims[1] != V or data.size != 2 * V * 4:
            raise FormatError(f"anatomy file for subject {sid} has inconsistent dims")
        anat = data.reshape(2, V, 4)
        subjects.append(SyntheticSubject(sid, anat[0].copy(), anat[1].copy(), int(meta["seed"]),
                                         int(meta["smoothing"]), level))
        dims, data = _read_block(path / "samples" / f"sub-{sid:02d}.bin", KIND_SAMPLES)
        n, v, dl, di, dt, dz = dims[:6]
        sizes = [n, n * dl, n * v, n * v, n * di, n * dt, n * dz]
        if v != V or data.size != sum(sizes):
            raise FormatError(f"sample file for subject {sid} has inconsistent dims")
        parts = np.split(data, np.cumsum(sizes)[:-1])
        stim = np.asarray(idx["stim_ids"][f"sub-{sid:02d}"], dtype=np.int64)
        samples[sid] = SampleSet(
            stim, parts[1].reshape(n, dl).copy(), parts[2].reshape(n, v).copy(), parts[3].reshape(n, v).copy(),
            parts[4].reshape(n, di).copy(), parts[5].reshape(n, dt).copy(), parts[6].reshape(n, dz).copy(),
        )
    return Cohort(level, w, float(idx["sigma"]), int(idx["smoothing"]), subjects, samples,
                  [int(h) for h in idx["heldout"]], int(idx["n_shared"]), int(idx["seed"]),
                  template_weights(idx.get("template_weight", 0.0)).tolist())
