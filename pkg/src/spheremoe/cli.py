"""``sphere-moe`` command line entry point.

Exit codes: 0 success, 2 configuration/input error (including bad flags),
3 numeric failure during training. Errors are printed to stderr as one JSON
object ``{"error": <kind>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NumericError, SphereMoeError

EVAL_COLUMNS = ("split", "subject", "n", "loss", "two_way", "acc1")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def code_version() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def dataset_hash(path) -> str:
    """SHA-256 over every file of a dataset directory, in sorted path order."""
    h = hashlib.sha256()
    root = Path(path)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, default=float))


# --------------------------------------------------------------------------
# config / data helpers

def _load_cfg(args):
    from .config import apply_overrides, load_config, parse_value, profile_config

    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = profile_config(getattr(args, "profile", "desk") or "desk")
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            from .errors import ConfigError
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(v)
    if getattr(args, "dtype", None):
        overrides["train.dtype"] = args.dtype
    cfg = apply_overrides(cfg, overrides)
    seed_source = "config"
    env = os.environ.get("SMOE_SEED")
    if env is not None and env.strip():
        try:
            cfg.train.seed = int(env)
        except ValueError:
            from .errors import ConfigError
            raise ConfigError(f"SMOE_SEED must be an integer, got {env!r}") from None
        seed_source = "SMOE_SEED"
    return cfg.validate(), seed_source


def _data_dir(args, cfg) -> Path:
    from .errors import ConfigError

    d = getattr(args, "data", None) or cfg.data.dir
    if not d:
        raise ConfigError("no dataset: pass --data or set data.dir")
    return Path(d)


def _heldout(cfg, cohort) -> list[int]:
    return [int(h) for h in cfg.data.heldout] if cfg.data.heldout else list(cohort.heldout)


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, cfg, seed_source: str, data: Path | None, variant: str,
                    derangement: dict, command: str, extra: dict | None = None) -> dict:
    man = {
        "command": command,
        "config": cfg.to_flat(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.train.seed,
        "seed_source": seed_source,
        "dataset": str(data) if data else None,
        "dataset_hash": dataset_hash(data) if data else None,
        "code_version": code_version(),
        "variant": variant,
        "derangement": {str(k): v for k, v in derangement.items()},
        "started_at": _now(),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(man, indent=1), encoding="utf-8")
    return man


# --------------------------------------------------------------------------
# subcommands

def cmd_mesh_info(args) -> int:
    from .mesh import mesh_info

    _emit(mesh_info(args.level))
    return 0


def cmd_roi_stats(args) -> int:
    from .errors import ConfigError
    from .roi import cap_roi, load_roi, roi_stats

    if args.left and args.right:
        left, right = load_roi(args.left), load_roi(args.right)
    elif args.left_count is not None and args.right_count is not None:
        left = cap_roi(args.level, "L", args.left_count)
        right = cap_roi(args.level, "R", args.right_count)
    else:
        raise ConfigError("roi-stats needs --left/--right files or --left-count/--right-count")
    _emit(roi_stats(left, right))
    return 0


def cmd_gen(args) -> int:
    from .errors import ConfigError
    from .synth import TEMPLATE_WEIGHT, gen_cohort

    weight = TEMPLATE_WEIGHT
    if args.template_weight is not None:
        try:
            weight = [float(v) for v in args.template_weight.split(",")]
        except ValueError:
            raise ConfigError(f"bad --template-weight {args.template_weight!r}") from None
        weight = weight[0] if len(weight) == 1 else weight
    extra = {} if args.roi_fraction is None else {"roi_fraction": args.roi_fraction}
    c = gen_cohort(args.subjects, args.samples, seed=args.seed, level=args.level, sigma=args.sigma,
                   smoothing=args.smoothing, n_heldout=args.heldout, n_shared=args.shared,
                   template_weight=weight, out=args.out, force=args.force, **extra)
    _emit({"out": str(args.out), "n_subjects": len(c.subjects), "n_samples": c.n_samples,
           "heldout": c.heldout})
    return 0


def cmd_train(args) -> int:
    from .errors import ConfigError
    from .model import bank_from_cohort, save_checkpoint, train, write_metrics
    from .synth import load_cohort

    if args.config and not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    cfg, seed_source = _load_cfg(args)
    data = _data_dir(args, cfg)
    cohort = load_cohort(data)
    heldout = _heldout(cfg, cohort)
    out = _out_dir(args, "runs/train")
    bank = bank_from_cohort(cohort, cfg)
    from .model import make_model
    model = make_model(cfg, bank)
    der = getattr(model, "derangement", {})
    _write_manifest(out, cfg, seed_source, data, cfg.moe.variant, der, "train", {"heldout": heldout})
    res = train(bank, cfg, heldout_ids=heldout, epochs=args.epochs, eval_every=args.eval_every, model=model)
    write_metrics(res.metrics, out / "metrics.csv")
    save_checkpoint(res.model, out / "checkpoint.npz", {"heldout": heldout, "data": str(data)})
    _emit({"out": str(out), "final": res.metrics[-1]})
    return 0


def cmd_finetune(args) -> int:
    from .model import bank_from_cohort, finetune, load_checkpoint, save_checkpoint, write_metrics
    from .synth import load_cohort

    model, meta = load_checkpoint(args.ckpt)
    cfg = model.cfg
    seed_source = "config"
    if os.environ.get("SMOE_SEED", "").strip():
        cfg.train.seed = int(os.environ["SMOE_SEED"])
        seed_source = "SMOE_SEED"
    data = Path(args.data or meta.get("data") or cfg.data.dir)
    cohort = load_cohort(data)
    out = _out_dir(args, "runs/finetune")
    _write_manifest(out, cfg, seed_source, data, cfg.moe.variant, getattr(model, "derangement", {}),
                    "finetune", {"ckpt": str(args.ckpt), "subject": args.subject, "fraction": args.fraction,
                                 "epochs": args.epochs})
    bank = bank_from_cohort(cohort, cfg)
    res = finetune(model, bank, args.subject, args.fraction, args.epochs, cfg)
    write_metrics(res.metrics, out / "metrics.csv")
    save_checkpoint(res.model, out / "checkpoint.npz", {"data": str(data), "finetuned_on": args.subject})
    _emit({"out": str(out), "curve": res.metrics})
    return 0


def _eval_rows(model, bank, cfg, heldout, cohort):
    from .model import evaluate, make_split

    train_ids = [s for s in bank.ids if s not in heldout]
    split = make_split(bank, train_ids, heldout, cfg.data.eval_fraction, cfg.train.seed)
    rows = []
    for name, ids in (("seen", train_ids), ("heldout", heldout)):
        for sid in ids:
            if split.test[sid].size < 2:
                continue
            r = evaluate(model, bank, {sid: split.test[sid]}, cfg.train.seed)
            rows.append({"split": name, "subject": sid, "n": r.n, "loss": r.loss, "two_way": r.two_way,
                         "acc1": r.acc1})
    return rows


def cmd_eval(args) -> int:
    from .model import bank_from_cohort, load_checkpoint
    from .synth import load_cohort

    model, meta = load_checkpoint(args.ckpt)
    cfg = model.cfg
    data = Path(args.data or meta.get("data") or cfg.data.dir)
    cohort = load_cohort(data)
    heldout = [int(h) for h in meta.get("heldout", cohort.heldout)]
    out = _out_dir(args, "runs/eval")
    _write_manifest(out, cfg, "config", data, cfg.moe.variant, getattr(model, "derangement", {}), "eval",
                    {"ckpt": str(args.ckpt)})
    bank = bank_from_cohort(cohort, cfg)
    for sid in bank.ids:
        if sid not in heldout:
            from .model import make_split
            sp = make_split(bank, [sid], [], cfg.data.eval_fraction, cfg.train.seed)
            bank.set_stats_rows(sid, sp.train[sid])
    rows = _eval_rows(model, bank, cfg, heldout, cohort)
    lines = [",".join(EVAL_COLUMNS)] + [",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                                                  for c in EVAL_COLUMNS) for r in rows]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _emit({"out": str(out), "rows": rows})
    return 0


def _read_matrix(path) -> list[str]:
    from .errors import ConfigError

    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"variant matrix not found: {path}")
    names = []
    for line in p.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        names.extend(n for n in line.replace(",", " ").split() if n)
    if not names:
        raise ConfigError(f"{path} lists no variants")
    return names


def cmd_ablate(args) -> int:
    from .analysis import ABLATIONS, ablation_csv, run_ablation_matrix
    from .errors import ConfigError
    from .synth import load_cohort

    variants = _read_matrix(args.matrix)
    for v in variants:
        if v not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {v!r}; choose from {ABLATIONS}")
    cfg, seed_source = _load_cfg(args)
    data = _data_dir(args, cfg)
    cohort = load_cohort(data)
    if cfg.data.heldout:
        cohort.heldout = [int(h) for h in cfg.data.heldout]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    out = _out_dir(args, "runs/ablate")
    _write_manifest(out, cfg, seed_source, data, ",".join(variants), {}, "ablate", {"seeds": seeds})
    rows = run_ablation_matrix(cohort, cfg, variants, seeds, epochs=args.epochs,
                               measure_memory=not args.no_memory)
    (out / "ablation.csv").write_text(ablation_csv(rows), encoding="utf-8")
    print(ablation_csv(rows), end="")
    return 0


def cmd_analyze(args) -> int:
    from . import analysis as A
    from .model import Batch, bank_from_cohort, load_checkpoint, make_split
    from .synth import load_cohort

    model, meta = load_checkpoint(args.ckpt)
    cfg = model.cfg
    data = Path(args.data or meta.get("data") or cfg.data.dir)
    cohort = load_cohort(data)
    bank = bank_from_cohort(cohort, cfg)
    heldout = [int(h) for h in meta.get("heldout", cohort.heldout)]
    split = make_split(bank, [s for s in bank.ids if s not in heldout], heldout, cfg.data.eval_fraction,
                       cfg.train.seed)
    for sid in bank.ids:
        if sid not in heldout:
            bank.set_stats_rows(sid, split.train[sid])
    out = _out_dir(args, f"runs/analyze-{args.what}")
    rows = {s: split.test[s] for s in bank.ids if split.test[s].size}
    result: dict
    if args.what == "routing":
        counts = A.collect_routing(model, bank, rows)
        dm = A.dependence_maps(counts)
        np.save(out / "routing_counts.npy", counts.counts)
        lines = ["layer,region_dependence,subject_dependence_regular,subject_dependence_global"]
        for i in range(dm.region_dependence.size):
            lines.append(f"{i},{dm.region_dependence[i]!r},{dm.regular_subject_dependence()[i]!r},"
                         f"{dm.global_subject_dependence()[i]!r}")
        (out / "dependence.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        result = {"region_dependence": dm.region_dependence.tolist(),
                  "subject_dependence_regular": dm.regular_subject_dependence().tolist(),
                  "subject_dependence_global": dm.global_subject_dependence().tolist(),
                  **A.global_depth_trend(dm)}
    elif args.what == "attrib":
        per = []
        for sid in sorted(rows):
            r = rows[sid][: args.samples]
            att = A.attribution(model, bank, Batch(np.full(r.size, sid), r))
            per.append(att.channel)
        from .srst import ANATOMY_CHANNELS
        ch = np.mean(per, axis=0)
        lines = ["channel,importance"] + [f"{n},{v!r}" for n, v in zip(ANATOMY_CHANNELS, ch)]
        (out / "attribution.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        result = {"channel_importance": dict(zip(ANATOMY_CHANNELS, ch.tolist()))}
    else:
        counts = A.collect_routing(model, bank, rows)
        anat = {s: np.concatenate([bank[s].anat_L, bank[s].anat_R]) for s in counts.subjects}
        sim = A.routing_vs_anatomy_similarity(counts, anat)
        (out / "similarity.csv").write_text(A.format_similarity_table(sim), encoding="utf-8")
        result = {"spearman": sim["spearman"], "pairs": len(sim["rows"])}
    (out / f"{args.what}.json").write_text(json.dumps(result, indent=1), encoding="utf-8")
    _emit(result)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sphere-moe", description="Spherical ROI tokenization with structure-guided experts.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("mesh-info", help="vertex/edge/face counts of an icosphere level")
    s.add_argument("--level", type=int, required=True)
    s.set_defaults(fn=cmd_mesh_info)

    s = sub.add_parser("roi-stats", help="token reduction of a left/right ROI pair")
    s.add_argument("--left")
    s.add_argument("--right")
    s.add_argument("--level", type=int, default=6)
    s.add_argument("--left-count", type=int)
    s.add_argument("--right-count", type=int)
    s.set_defaults(fn=cmd_roi_stats)

    s = sub.add_parser("gen", help="generate a synthetic cohort")
    s.add_argument("--subjects", type=int, default=4)
    s.add_argument("--samples", type=int, default=256)
    s.add_argument("--level", type=int, default=4)
    s.add_argument("--sigma", type=float, default=0.3)
    s.add_argument("--smoothing", type=int, default=20)
    s.add_argument("--heldout", type=int, default=0)
    s.add_argument("--shared", type=int, default=0, help="stimuli shown to every subject")
    s.add_argument("--template-weight", default=None,
                   help="one weight or four comma-separated per-channel weights in [0, 1]")
    s.add_argument("--roi-fraction", type=float, default=None,
                   help="cap ROI fraction used to standardize anatomy")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_gen)

    def run_opts(s):
        s.add_argument("--config")
        s.add_argument("--profile", default="desk")
        s.add_argument("--data")
        s.add_argument("--out")
        s.add_argument("--set", action="append", metavar="KEY=VALUE")
        s.add_argument("--dtype", choices=("f32", "f64"))

    s = sub.add_parser("train", help="train a decoder")
    run_opts(s)
    s.add_argument("--epochs", type=int)
    s.add_argument("--eval-every", type=int, default=0)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("finetune", help="adapt a checkpoint to one subject")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--subject", type=int, required=True)
    s.add_argument("--fraction", type=float, default=1.0)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="train a matrix of variants")
    run_opts(s)
    s.add_argument("--matrix", required=True, help="text file listing variant names")
    s.add_argument("--seeds", help="comma-separated seeds")
    s.add_argument("--epochs", type=int)
    s.add_argument("--no-memory", action="store_true", help="skip peak-memory tracing")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("analyze", help="routing, attribution or similarity analysis")
    s.add_argument("what", choices=("routing", "attrib", "similarity"))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--samples", type=int, default=8, help="samples per subject for attribution")
    s.set_defaults(fn=cmd_analyze)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return int(args.fn(args))
    except NumericError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3
    except SphereMoeError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
