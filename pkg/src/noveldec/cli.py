"""Command-line entry points.

Every command reads one YAML (or JSON) run config. ``train`` writes a run
manifest holding the fully resolved config, so ``noveldec train
run_manifest.json`` repeats the run exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .augment import AugmentationPolicy
from .dataset import (
    DatasetManifest,
    OneClassSplit,
    Protocol,
    load_dataset,
    make_one_class_split,
    read_image_file,
    split_from_ids,
)
from .exceptions import ConfigError, DataError, NovelDecError
from .scoring import SCORE_METRICS, anomaly_score, evaluate
from .trainer import ABLATIONS, FEATURE_TABLE, MI_TABLE, TrainConfig, apply_ablation, load_checkpoint, train

log = logging.getLogger("noveldec")

SEED_ENV = "NOVELDEC_SEED"
MANIFEST_VERSION = 1
GRIDS = {"mi": MI_TABLE, "features": FEATURE_TABLE}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetManifest
    target_class: int
    protocol: Protocol = Protocol.HOLDOUT_80_20
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: Path = Path("runs/default")
    seed: int = 0
    ablations: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        object.__setattr__(self, "ablations", tuple(self.ablations))
        for name in self.ablations:
            if name not in ABLATIONS:
                raise ConfigError(f"unknown ablation {name!r}")

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d)
        allowed = {f.name for f in fields(cls)} | {"augmentation"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        if "dataset" not in d or "target_class" not in d:
            raise ConfigError("run config needs 'dataset' and 'target_class'")
        ds = d["dataset"]
        if isinstance(ds, (str, Path)):
            ds_path = Path(base_dir or ".") / ds
            d["dataset"] = DatasetManifest.from_dict(_read_mapping(ds_path), base_dir=ds_path.parent)
        elif isinstance(ds, dict):
            d["dataset"] = DatasetManifest.from_dict(ds, base_dir=base_dir)
        else:
            raise ConfigError("'dataset' must be a manifest mapping or a path to one")
        train_cfg = dict(d.get("train") or {})
        if "augmentation" in d:
            if "augmentation" in train_cfg:
                raise ConfigError("give 'augmentation' either at top level or under 'train', not both")
            train_cfg["augmentation"] = d.pop("augmentation")
        d["train"] = TrainConfig.from_dict(train_cfg)
        if base_dir is not None and "output_dir" in d and not Path(d["output_dir"]).is_absolute():
            d["output_dir"] = Path(base_dir) / d["output_dir"]
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        return {
            "dataset": self.dataset.to_dict(),
            "target_class": self.target_class,
            "protocol": self.protocol.value,
            "train": self.train.to_dict(),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "ablations": list(self.ablations),
        }

    @property
    def augmentation(self) -> AugmentationPolicy:
        return self.train.augmentation

    def resolved_train_config(self) -> TrainConfig:
        """Training config with ablations applied and the run seed copied in."""
        return replace(apply_ablation(self.train, *self.ablations), seed=self.seed)


def _read_mapping(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping")
    return data


def load_run_config(path) -> RunConfig:
    """Read a run config, or the resolved config inside a run manifest."""
    path = Path(path)
    data = _read_mapping(path)
    if "run_manifest_version" in data:
        return RunConfig.from_dict(data["config"])
    return RunConfig.from_dict(data, base_dir=path.parent)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Precedence for the seed: --seed, then $NOVELDEC_SEED, then the file."""
    changes = {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            changes["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        changes["output_dir"] = Path(args.out)
    if getattr(args, "ablate", None):
        changes["ablations"] = tuple(cfg.ablations) + tuple(args.ablate)
    cfg = replace(cfg, **changes)
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    return cfg


# --------------------------------------------------------------------------
# data plumbing


def _load_samples(cfg: RunConfig):
    train = load_dataset(cfg.dataset, "train")
    test = load_dataset(cfg.dataset, "test") if cfg.dataset.test_files else None
    return train, test


def build_split(cfg: RunConfig, split_file=None) -> OneClassSplit:
    train, test = _load_samples(cfg)
    if split_file is not None:
        try:
            data = json.loads(Path(split_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read split file {split_file}: {exc}") from exc
        return split_from_ids(data, train, test)
    return make_one_class_split(train, test, cfg.target_class, cfg.protocol, cfg.seed)


def write_split(split: OneClassSplit, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(split.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def write_run_manifest(cfg: RunConfig, command, path):
    payload = {
        "run_manifest_version": MANIFEST_VERSION,
        "command": command,
        "code_version": __version__,
        "seed": cfg.seed,
        "resolved_train_config": cfg.resolved_train_config().to_dict(),
        "config": cfg.to_dict(),
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args):
    cfg = apply_overrides(load_run_config(args.config), args)
    split = build_split(cfg)
    out = Path(args.split_out) if args.split_out else cfg.output_dir / "split.json"
    write_split(split, out)
    print(out)
    return 0


def cmd_train(args):
    cfg = apply_overrides(load_run_config(args.config), args)
    split = build_split(cfg, args.split)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_split(split, out / "split.json")
    write_run_manifest(cfg, "train", out / "run_manifest.json")
    ckpt, history = train(split, cfg.resolved_train_config(), out, resume_from=args.resume)
    print(ckpt)
    return 0


def cmd_eval(args):
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    cfg = apply_overrides(load_run_config(args.config), args)
    state = load_checkpoint(args.checkpoint)
    split_file = args.split
    if split_file is None and (Path(args.checkpoint).parent / "split.json").exists():
        split_file = Path(args.checkpoint).parent / "split.json"
    split = build_split(cfg, split_file)
    out = Path(args.out) if args.out else cfg.output_dir / "eval"
    metrics = Path(args.checkpoint).parent / "metrics.csv"
    report = evaluate(
        split,
        state,
        out,
        plots=not args.no_plots,
        metric=args.metric,
        threshold_percentile=args.threshold_percentile,
        metrics_csv=metrics if metrics.exists() else None,
    )
    print(json.dumps({"auc": report.auc, "latent_auc": report.latent_auc, "threshold": report.threshold}))
    return 0


def cmd_score(args):
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    state = load_checkpoint(args.checkpoint)
    arch = state.config.arch
    path = Path(args.image)
    if path.suffix == ".npy":
        pixels = np.load(path).astype(np.float32)
        if pixels.ndim == 2:
            pixels = pixels[None]
    else:
        pixels = read_image_file(path, arch.image_size, arch.channels)
    print(repr(anomaly_score(pixels, state, args.metric)))
    return 0


def cmd_ablate(args):
    cfg = apply_overrides(load_run_config(args.config), args)
    names = list(GRIDS[args.grid]) if args.grid in GRIDS else args.grid.split(",")
    for name in names:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}")
    seeds = args.seeds or [cfg.seed]
    split = build_split(cfg, args.split)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_split(split, out / "split.json")
    rows = []
    for name in names:
        for seed in seeds:
            run = replace(cfg, ablations=cfg.ablations + (name,), seed=seed, output_dir=out / f"{name}-seed{seed}")
            run.output_dir.mkdir(parents=True, exist_ok=True)
            write_run_manifest(run, "ablate", run.output_dir / "run_manifest.json")
            ckpt, _ = train(split, run.resolved_train_config(), run.output_dir)
            report = evaluate(split, ckpt, run.output_dir / "eval", plots=False, metric=args.metric)
            rows.append({"ablation": name, "seed": seed, "auc": report.auc, "latent_auc": report.latent_auc})
            log.info("%s seed %d: AUC %.4f", name, seed, report.auc)
    summary = out / "ablation_summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["ablation", "seed", "auc", "latent_auc"])
        writer.writeheader()
        writer.writerows(rows)
    print(summary)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="noveldec", description="One-class novelty detection with a decoder-encoder.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("config", help="run config (YAML/JSON) or a run_manifest.json")
        p.add_argument("--seed", type=int, help=f"overrides ${SEED_ENV} and the config seed")
        if out:
            p.add_argument("--out", help="output directory (default: config output_dir)")

    p = sub.add_parser("prepare", help="write the one-class split to disk")
    common(p)
    p.add_argument("--split-out", help="split file path (default: <out>/split.json)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), help="ablation preset; repeatable")
    p.add_argument("--epochs", type=int)
    p.add_argument("--split", help="reuse a split file written by 'prepare'")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score the test split and write a report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split")
    p.add_argument("--metric", choices=SCORE_METRICS, default="laplacian")
    p.add_argument("--threshold-percentile", type=float, default=95.0)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="print the anomaly score of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image", help="image file, or a .npy array in [-1, 1]")
    p.add_argument("--metric", choices=SCORE_METRICS, default="laplacian")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate", help="train and evaluate a grid of ablations")
    common(p)
    p.add_argument("--grid", default="mi", help="'mi', 'features' or a comma-separated list of presets")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--split")
    p.add_argument("--metric", choices=SCORE_METRICS, default="laplacian")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NovelDecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
