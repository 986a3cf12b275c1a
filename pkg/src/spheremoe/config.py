"""Run configuration: typed sections, named profiles and the flat text format.

Config files hold one ``key = value`` pair per line with dotted keys::

    # desk run
    moe.top_k = 6
    moe.variant = anatomy
    srst.functional_channels = [8, 16, 32, 64]

Values are read as Python literals when possible and as bare strings
otherwise. Unknown keys are errors.
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class SrstConfig:
    base_level: int = 4
    functional_target_level: int = 1
    functional_channels: tuple = (8, 16, 32, 64)
    structural_target_level: int = 1
    structural_channels: tuple = (8, 16, 16, 32)
    struct_dim: int = 16
    model_dim: int = 64
    n_cls: int = 4
    n_global: int = 4
    dropout: float = 0.3
    downsample: str = "strided_conv"
    receptive_field: str = "ring"
    shuffle_topology_seed: int = -1
    global_tokens: bool = True


@dataclass
class MoeConfig:
    n_routed: int = 16
    n_shared: int = 2
    top_k: int = 6
    hidden: int = 64
    lb_coeff: float = 0.01
    variant: str = "anatomy"
    gate_norm: str = "softmax_topk"
    router_input: str = "concat"
    router_hidden: int = 32
    struct_global: bool = True


@dataclass
class BackboneConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 4
    attn_dropout: float = 0.5
    d_image: int = 32
    d_text: int = 32
    d_latent: int = 16


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip_norm: float = 0.1
    batch_semantic: int = 24
    batch_perception: int = 64
    epochs_semantic: int = 15
    epochs_perception: int = 100
    seed: int = 0
    dtype: str = "f32"
    path: str = "semantic"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class DataConfig:
    dir: str = ""
    roi: str = "cap"          # cap | full | files
    roi_fraction: float = 0.1
    roi_left: str = ""
    roi_right: str = ""
    heldout: tuple = ()
    eval_fraction: float = 0.25


@dataclass
class RunConfig:
    srst: SrstConfig = field(default_factory=SrstConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        s, m, b, t = self.srst, self.moe, self.model, self.train
        if not 0 <= s.functional_target_level < s.base_level <= 6:
            raise ConfigError("need 0 <= srst.functional_target_level < srst.base_level <= 6")
        if not 0 <= s.structural_target_level <= s.functional_target_level:
            raise ConfigError("srst.structural_target_level must be in 0..functional_target_level")
        if len(s.functional_channels) != s.base_level - s.functional_target_level + 1:
            raise ConfigError("srst.functional_channels needs one entry per stage (levels base..target)")
        if len(s.structural_channels) != s.base_level - s.structural_target_level + 1:
            raise ConfigError("srst.structural_channels needs one entry per stage (levels base..target)")
        if s.model_dim != b.dim:
            raise ConfigError(f"srst.model_dim ({s.model_dim}) must equal model.dim ({b.dim})")
        if s.n_cls != 4 or s.n_global != 4:
            raise ConfigError("token layout is fixed at 4 CLS + 4 GLOBAL tokens")
        if not 1 <= m.top_k <= m.n_routed:
            raise ConfigError("need 1 <= moe.top_k <= moe.n_routed")
        if m.n_shared < 0:
            raise ConfigError("moe.n_shared must be >= 0")
        if b.dim % b.heads:
            raise ConfigError("model.dim must be divisible by model.heads")
        from .sgmoe import GATE_NORMS, ROUTER_INPUTS, VARIANTS
        if m.variant not in VARIANTS:
            raise ConfigError(f"moe.variant must be one of {VARIANTS}")
        if m.gate_norm not in GATE_NORMS:
            raise ConfigError(f"moe.gate_norm must be one of {GATE_NORMS}")
        if m.router_input not in ROUTER_INPUTS:
            raise ConfigError(f"moe.router_input must be one of {ROUTER_INPUTS}")
        if s.downsample not in ("strided_conv", "mean_pool"):
            raise ConfigError("srst.downsample must be strided_conv or mean_pool")
        if s.receptive_field not in ("ring", "center_only"):
            raise ConfigError("srst.receptive_field must be ring or center_only")
        for name in ("lr", "weight_decay", "grad_clip_norm"):
            if getattr(t, name) < 0:
                raise ConfigError(f"train.{name} must be non-negative")
        for name in ("batch_semantic", "batch_perception"):
            if getattr(t, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if t.dtype not in ("f32", "f64"):
            raise ConfigError("train.dtype must be f32 or f64")
        if t.path not in ("semantic", "perception"):
            raise ConfigError("train.path must be semantic or perception")
        if m.lb_coeff < 0:
            raise ConfigError("moe.lb_coeff must be non-negative")
        return self

    def to_flat(self) -> dict[str, object]:
        out = {}
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                out[f"{sec.name}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def copy(self, **flat) -> "RunConfig":
        cfg = from_flat(self.to_flat())
        return apply_overrides(cfg, flat) if flat else cfg


def _sections(cfg: RunConfig) -> dict[str, object]:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def _coerce(current, value, key: str):
    if isinstance(current, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
        if isinstance(value, (bool, int)):
            return bool(value)
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        try:
            return tuple(type(current[0])(v) if current else v for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a list, got {value!r}") from None
    if isinstance(current, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    return str(value)


def apply_overrides(cfg: RunConfig, flat: dict[str, object]) -> RunConfig:
    secs = _sections(cfg)
    for key, value in flat.items():
        try:
            sec_name, name = key.split(".", 1)
        except ValueError:
            raise ConfigError(f"config key {key!r} must look like section.name") from None
        sec = secs.get(sec_name)
        if sec is None or name not in {f.name for f in dataclasses.fields(sec)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(sec, name, _coerce(getattr(sec, name), value, key))
        if key == "srst.model_dim":
            cfg.model.dim = cfg.srst.model_dim
        elif key == "model.dim":
            cfg.srst.model_dim = cfg.model.dim
    return cfg


def from_flat(flat: dict[str, object]) -> RunConfig:
    return apply_overrides(RunConfig(), dict(flat))


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip("\"'")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    flat: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        flat[key.strip()] = parse_value(value)
    return flat


def load_config(path, profile: str = "desk") -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    flat = parse_config_text(p.read_text(), str(p))
    prof = flat.pop("profile", profile)
    cfg = profile_config(str(prof))
    return apply_overrides(cfg, flat).validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        lines.append(f"{key} = {json.dumps(value) if not isinstance(value, str) else value}")
    return "\n".join(lines) + "\n"


def desk_config() -> RunConfig:
    """Small defaults sized so the acceptance suite runs on one CPU core.

    The router sees per-token structure only: at this scale the pooled
    structural vector, identical for every token of a subject, makes routing
    follow the subject rather than the region.
    """
    cfg = RunConfig()
    cfg.moe.struct_global = False
    return cfg.validate()


def paper_config() -> RunConfig:
    """Architecture constants at the published scale (not trained here)."""
    cfg = RunConfig()
    cfg.srst = SrstConfig(
        base_level=6,
        functional_target_level=3,
        functional_channels=(64, 128, 256, 512),
        structural_target_level=1,
        structural_channels=(16, 32, 64, 128, 256, 512),
        struct_dim=64,
        model_dim=768,
    )
    cfg.moe = MoeConfig(n_routed=16, n_shared=2, top_k=6, hidden=512, router_hidden=768)
    cfg.model = BackboneConfig(dim=768, depth=12, heads=12, attn_dropout=0.5, d_image=768, d_text=768, d_latent=16384)
    cfg.train = TrainConfig(lr=1e-4, weight_decay=0.01, grad_clip_norm=0.1, batch_semantic=96,
                            batch_perception=64, epochs_semantic=600, epochs_perception=100)
    cfg.data = DataConfig(roi="files")
    return cfg.validate()


PROFILES = {"desk": desk_config, "paper": paper_config}


def profile_config(name: str) -> RunConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
