"""``csmixer`` command line: describe, gradcheck, train, eval, export-weights.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure,
4 acceptance check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, load_into
from .config import (VARIANTS, ConfigError, ModelConfig, cifar_config, is_canonical,
                     tiny_config, variant)
from .data import DataFormatError, ImageDataset, load_cifar10, synth_dataset
from .export import export_weight_grids
from .gradcheck import gradcheck_model
from .model import CSMixer
from .profiler import audit_published, compare_to_published, profile
from .tensor import ShapeError
from .training import NumericError, Recipe, accuracy, train

PRESETS = {"tiny": tiny_config, "cifar": cifar_config}

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4

log = logging.getLogger("csmixer")


class UsageError(Exception):
    pass


# model-config keys accepted in config files and --set, with aliases
_MODEL_KEYS = {
    "C": "base_dim", "base_dim": "base_dim",
    "d": "rank", "rank": "rank",
    "g": "group_size", "group_size": "group_size",
    "depths": "depths", "heads": "heads",
    "image_size": "image_size", "K": "num_classes", "num_classes": "num_classes",
    "drop_path_rate": "drop_path_rate", "mlp_affines": "mlp_affines",
    "mlp_ratio": "mlp_ratio", "in_channels": "in_channels",
}
_RUN_KEYS = {
    "dataset": str, "data_path": str, "seed": int, "epochs": int, "batch": int, "lr": float,
    "warmup_epochs": int, "cooldown_epochs": int, "weight_decay": float,
    "ema_decay": float, "train_samples": int, "val_samples": int,
    "eval_crop_pct": float, "grad_clip": float, "min_lr": float, "warmup_lr": float,
}


@dataclass
class RunSpec:
    command: str
    variant: str | None = None
    config_file: str | None = None
    dataset: str = "synth"
    data_path: str | None = None
    seed: int = 0
    out: str | None = None
    overrides: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        model_over = {}
        for k, v in self.overrides.items():
            if k in _MODEL_KEYS:
                model_over[_MODEL_KEYS[k]] = _coerce_model(_MODEL_KEYS[k], v)
        name = self.variant or "tiny"
        base = PRESETS[name]() if name in PRESETS else variant(name)
        return base.replace(**model_over) if model_over else base

    def run_value(self, key, default=None):
        v = self.overrides.get(key)
        return default if v is None else _RUN_KEYS[key](v)

    def recipe(self) -> Recipe:
        r = Recipe()
        mapping = {"epochs": "epochs", "batch": "batch_size", "lr": "base_lr",
                   "warmup_epochs": "warmup_epochs", "cooldown_epochs": "cooldown_epochs",
                   "weight_decay": "weight_decay", "ema_decay": "ema_decay",
                   "eval_crop_pct": "eval_crop_pct", "grad_clip": "grad_clip",
                   "min_lr": "min_lr", "warmup_lr": "warmup_lr"}
        kw = {dst: self.run_value(src) for src, dst in mapping.items() if src in self.overrides}
        for k, v in kw.items():
            setattr(r, k, v)
        if r.warmup_epochs + r.cooldown_epochs > r.epochs:
            r.warmup_epochs = min(r.warmup_epochs, max(r.epochs - r.cooldown_epochs, 0))
        return r

    def resolved(self) -> dict:
        cfg = self.model_config()
        return {"command": self.command, "variant": self.variant, "config_file": self.config_file,
                "dataset": self.dataset, "data_path": self.data_path, "seed": self.seed,
                "out": self.out, "overrides": {k: str(v) for k, v in sorted(self.overrides.items())},
                "model": cfg.to_dict(), "recipe": self.recipe().to_dict(),
                "version": __version__}


def _ints(v) -> tuple[int, ...]:
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace("x", ",").split(",") if x.strip())


def _coerce_model(key: str, v):
    if key in ("depths", "heads"):
        return _ints(v)
    if key == "image_size":
        vals = _ints(v)
        return vals * 2 if len(vals) == 1 else vals
    if key == "drop_path_rate":
        return float(v)
    return int(v)


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_runspec(args) -> RunSpec:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    values.update(_parse_sets(getattr(args, "set", None)))
    for flag in ("epochs", "batch", "lr", "train_samples", "val_samples"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = str(v)
    var = getattr(args, "variant", None) or values.pop("variant", None)
    dataset = getattr(args, "dataset", None) or values.pop("dataset", "synth")
    values.pop("dataset", None)
    data_path = getattr(args, "data_path", None) or values.pop("data_path", None)
    values.pop("data_path", None)
    seed_flag = getattr(args, "seed", None)
    file_seed = values.pop("seed", None)
    if seed_flag is not None:
        seed = seed_flag
    elif file_seed is not None:
        seed = int(file_seed)
    else:
        seed = int(os.environ.get("CSMX_SEED", "0"))
    unknown = [k for k in values if k not in _MODEL_KEYS and k not in _RUN_KEYS]
    if unknown:
        raise UsageError(f"unknown setting(s): {', '.join(sorted(unknown))}")
    if var is not None and var not in PRESETS and var.upper() not in VARIANTS:
        raise UsageError(f"unknown variant {var!r}; choose from "
                         f"{', '.join(list(PRESETS) + list(VARIANTS))}")
    if var is not None and var not in PRESETS:
        var = var.upper()
    return RunSpec(args.command, var, getattr(args, "config", None), dataset, data_path, seed,
                   getattr(args, "out", None), values)


def write_manifest(out_dir, spec: RunSpec, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = spec.resolved()
    if extra:
        body.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def load_datasets(spec: RunSpec, cfg: ModelConfig) -> tuple[ImageDataset, ImageDataset, dict]:
    n_train = spec.run_value("train_samples")
    n_val = spec.run_value("val_samples")
    if spec.dataset == "synth":
        n_train = 512 if n_train is None else n_train
        n_val = 256 if n_val is None else n_val
        tr = synth_dataset(n_train, cfg.num_classes, cfg.image_size, seed=spec.seed)
        va = synth_dataset(n_val, cfg.num_classes, cfg.image_size, seed=spec.seed + 1)
    elif spec.dataset == "cifar10":
        if not spec.data_path:
            raise UsageError("cifar10 needs --data-path")
        tr = load_cifar10(spec.data_path, "train")
        va = load_cifar10(spec.data_path, "test")
        if n_train is not None:
            tr = tr.subset(np.arange(min(n_train, len(tr))))
        if n_val is not None:
            va = va.subset(np.arange(min(n_val, len(va))))
    else:
        raise UsageError(f"unknown dataset {spec.dataset!r} (synth or cifar10)")
    info = {"dataset": spec.dataset, "data_path": spec.data_path, "seed": spec.seed,
            "train_samples": len(tr), "val_samples": len(va)}
    return tr, va, info


def val_set_from_info(info: dict, cfg: ModelConfig) -> ImageDataset:
    if info["dataset"] == "synth":
        return synth_dataset(info["val_samples"], cfg.num_classes, cfg.image_size,
                             seed=info["seed"] + 1)
    va = load_cifar10(info["data_path"], "test")
    return va.subset(np.arange(min(info["val_samples"], len(va))))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_describe(args) -> int:
    if args.all:
        audit = audit_published()
        print(audit.to_text())
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "published_audit.csv").write_text(audit.to_csv())
            for v in VARIANTS:
                (out / f"cost_{v}.csv").write_text(profile(VARIANTS[v]).to_csv())
        return EXIT_OK if audit.passes() else EXIT_CHECK
    if not (args.variant or args.config):
        raise UsageError("describe needs --variant, --config or --all")
    spec = build_runspec(args)
    cfg = spec.model_config()
    rep = profile(cfg)
    print(rep.to_text())
    status = EXIT_OK
    row = compare_to_published(cfg) if is_canonical(cfg) else None
    if row is not None:
        ok_p = row.params_rel_err <= 0.05
        ok_m = row.macs_rel_err <= 0.10
        print(f"published {cfg.variant}: params {row.params / 1e6:.2f} M vs {row.ref_params_m} M "
              f"(rel_err {row.params_rel_err:.2%}) {'PASS' if ok_p else 'FAIL'}; "
              f"GMACs {row.macs / 1e9:.2f} vs {row.ref_gmacs} "
              f"(rel_err {row.macs_rel_err:.2%}) {'PASS' if ok_m else 'FAIL'}")
        status = EXIT_OK if ok_p and ok_m else EXIT_CHECK
    else:
        print("non-canonical config: no published comparison")
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    if args.out:
        write_manifest(args.out, spec)
        (Path(args.out) / "cost.csv").write_text(rep.to_csv())
    return status


GRADCHECK_PARAM_LIMIT = 1_000_000


def cmd_gradcheck(args) -> int:
    spec = build_runspec(args)
    cfg = spec.model_config()
    n = profile(cfg).params
    if n > GRADCHECK_PARAM_LIMIT and not args.force:
        raise UsageError(f"config has {n:,} parameters (> {GRADCHECK_PARAM_LIMIT:,}); "
                         "pass --force to check anyway")
    report = gradcheck_model(cfg, spec.seed, args.samples, args.batch)
    print(report.to_text())
    if args.out:
        write_manifest(args.out, spec, {"gradcheck": {
            "max_rel_err": report.max_rel_err, "passed": report.passed}})
    if report.nonfinite:
        return EXIT_NUMERIC
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_train(args) -> int:
    if not args.out:
        raise UsageError("train needs --out")
    spec = build_runspec(args)
    cfg = spec.model_config()
    tr, va, info = load_datasets(spec, cfg)
    if tr.num_classes != cfg.num_classes:
        cfg = cfg.replace(num_classes=tr.num_classes)
        spec.overrides["K"] = str(tr.num_classes)
    recipe = spec.recipe()
    out = Path(args.out)
    write_manifest(out, spec, {"data": info})
    rng = np.random.default_rng(spec.seed)
    model = CSMixer(cfg, rng)
    result = train(model, tr, va, recipe, rng, out, resume=args.resume,
                   stop_after=args.stop_after, extra={"data": info})
    if (out / "final.ckpt").exists():
        export_weight_grids(model.params, cfg, out / "grids")
    for row in result.metrics[-1:]:
        print(f"epoch {row['epoch']}: train_loss {row['train_loss']:.4f} "
              f"val_acc {row['val_acc']:.2f} ema_val_acc {row['ema_val_acc']:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config
    model = CSMixer(cfg, 0)
    load_into(model, ck)
    if args.ema:
        if ck.ema is None:
            raise DataFormatError("checkpoint has no EMA weights")
        model.load_arrays(ck.ema)
    recipe = Recipe.from_dict(ck.header["recipe"]) if "recipe" in ck.header else Recipe()
    if args.dataset or args.data_path:
        info = {"dataset": args.dataset or "cifar10", "data_path": args.data_path,
                "seed": args.seed if args.seed is not None else 0,
                "val_samples": args.val_samples if args.val_samples is not None else 10**9}
        if info["dataset"] == "synth" and args.val_samples is None:
            info["val_samples"] = 256
    elif "data" in ck.header:
        info = ck.header["data"]
    else:
        raise UsageError("checkpoint has no dataset record; pass --dataset/--data-path")
    if info["dataset"] == "cifar10" and args.data_path and Path(args.data_path).is_file():
        va = load_cifar10(args.data_path)
        if args.val_samples is not None:
            va = va.subset(np.arange(min(args.val_samples, len(va))))
    else:
        va = val_set_from_info(info, cfg)
    if len(va) == 0:
        raise DataFormatError("evaluation dataset is empty")
    acc = accuracy(model, va, recipe.mean, recipe.std, recipe.eval_crop_pct)
    print(f"accuracy {acc!r} ({'ema' if args.ema else 'raw'} weights, {len(va)} images)")
    return EXIT_OK


def cmd_export_weights(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    arrays = ck.ema if (args.ema and ck.ema is not None) else ck.params
    manifest = export_weight_grids(arrays, ck.config, args.out)
    for f in manifest["files"]:
        print(f"stage {f['stage']} {f['mode']}: {f['csv']}, {f['pgm']}")
    for note in manifest["notes"]:
        print(f"note: {note}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p, model=True):
    if model:
        p.add_argument("--variant", help="T, S, B, L, or a desk preset: tiny, cifar")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a setting (repeatable), e.g. g=2 or depths=1,1,2,1")
    p.add_argument("--seed", type=int, default=None, help="defaults to $CSMX_SEED or 0")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="csmixer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    d = sub.add_parser("describe", help="parameter/MAC report and published audit")
    _common(d)
    d.add_argument("--all", action="store_true", help="audit all four variants")
    d.add_argument("--csv", help="write the per-layer report as CSV")
    d.add_argument("--out", help="directory for manifest and CSV reports")

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    _common(g)
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--batch", type=int, default=2)
    g.add_argument("--force", action="store_true", help="allow configs above 1M parameters")
    g.add_argument("--out")

    t = sub.add_parser("train", help="train at desk scale")
    _common(t)
    t.add_argument("--dataset", choices=("synth", "cifar10"))
    t.add_argument("--data-path")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--train-samples", type=int)
    t.add_argument("--val-samples", type=int)
    t.add_argument("--out", required=False)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    t.add_argument("--stop-after", type=int, help="stop once this many epochs are done")

    e = sub.add_parser("eval", help="accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--ema", action="store_true", help="use EMA weights")
    e.add_argument("--dataset", choices=("synth", "cifar10"))
    e.add_argument("--data-path")
    e.add_argument("--val-samples", type=int)
    e.add_argument("--seed", type=int)

    x = sub.add_parser("export-weights", help="write spatial weight grids")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--ema", action="store_true")
    return p


COMMANDS = {"describe": cmd_describe, "gradcheck": cmd_gradcheck, "train": cmd_train,
            "eval": cmd_eval, "export-weights": cmd_export_weights}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, CheckpointError, ShapeError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
