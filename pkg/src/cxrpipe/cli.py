"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .augment import ABLATION_PRESETS, augment_training_batch
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data_ingest import (DatasetSplit, ManifestError, SplitError, load_images, load_manifest,
                          normalize_image, read_grayscale, split_dataset)
from .evalreport import (ConfusionMatrix3, SeedResult, ablation, accuracy, evaluate_model, render_table,
                         repeated_trials, sensitivity, write_report)
from .hypersearch import SearchFailed, SearchSpace, fit_runner, run_search
from .toydata import generate_toy_dataset
from .trainer import TrainingDiverged, config_hash, fit, run_dir_name

log = logging.getLogger("cxrpipe")


class UsageError(Exception):
    pass


TOY_CONFIG = """\
[data]
manifest = manifest.csv
counts = {counts}
split_seed = 42
channels = 1

[hyperparams]
input_size = {size}
dropout_p = 0.1
fc_units = 416
learning_rate = 1e-3
batch_size = 8
max_epochs = 30
patience = 7
freeze_depth = 0

[augmentation]
conventional = true
mixup = true
mixup_alpha = 0.1
ricap = false
ricap_beta = 0.3

[architecture]
blocks = 8x1,16x1,32x1,64x1
in_channels = 1

[run]
out = runs
workers = 1
seeds = 1,2,3,4,5
"""


def _toy_counts(n: int) -> tuple[int, int, int]:
    val = test = n // 7
    return n - val - test, val, test


def _config(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig()
    return load_config(args.config)


def _out_dir(args, cfg: ExperimentConfig, default: Optional[Path] = None) -> Path:
    if args.out is not None:
        return Path(args.out)
    return default if default is not None else cfg.out


def _claim(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} already exists; pass --force to overwrite")


class Dataset:
    """Manifest plus split, with images loaded lazily per input size."""

    def __init__(self, manifest: Path, split: DatasetSplit, channels: int, workers: int):
        self.records = {r.id: r for r in load_manifest(manifest)}
        missing = [i for ids in (split.train, split.validation, split.test) for i in ids if i not in self.records]
        if missing:
            raise ManifestError(f"split refers to id {missing[0]!r} which is not in {manifest}")
        self.root = manifest.parent
        self.split = split
        self.channels = channels
        self.workers = workers
        self._cache: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}

    def part(self, name: str, size: int):
        key = (name, size)
        if key not in self._cache:
            ids = getattr(self.split, name)
            self._cache[key] = load_images([self.records[i] for i in ids], self.root, size,
                                           self.channels, self.workers)
        return self._cache[key]


def _dataset(args, cfg: ExperimentConfig) -> Dataset:
    manifest = Path(args.manifest) if getattr(args, "manifest", None) else cfg.manifest
    if manifest is None:
        raise UsageError("no manifest given (use --manifest or [data] manifest in the config)")
    if not manifest.is_file():
        raise UsageError(f"manifest not found: {manifest}")
    split_path = Path(args.data) if getattr(args, "data", None) else cfg.split_file
    if split_path is not None:
        if not split_path.is_file():
            raise UsageError(f"split file not found: {split_path}")
        split = DatasetSplit.load(split_path)
    else:
        split = split_dataset(load_manifest(manifest), cfg.split_counts, cfg.split_seed)
    return Dataset(manifest, split, cfg.channels, args.workers or cfg.workers)


# --- subcommands --------------------------------------------------------------

def cmd_gen_toy(args) -> int:
    out = Path(args.out or "toy")
    _claim(out / "manifest.csv", args.force)
    seed = 0 if args.seed is None else args.seed
    records = generate_toy_dataset(out, args.n_per_class, args.image_size, seed)
    counts = _toy_counts(len(records))
    (out / "experiment.cfg").write_text(
        TOY_CONFIG.format(counts=",".join(map(str, counts)), size=args.image_size), encoding="utf-8")
    print(f"wrote {len(records)} images and {out / 'manifest.csv'}")
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    manifest = Path(args.manifest) if args.manifest else cfg.manifest
    if manifest is None:
        raise UsageError("no manifest given (use --manifest or [data] manifest in the config)")
    if not manifest.is_file():
        raise UsageError(f"manifest not found: {manifest}")
    counts = cfg.split_counts
    if args.counts:
        try:
            counts = tuple(int(v) for v in args.counts.split(","))
        except ValueError:
            raise UsageError(f"--counts must be three integers, got {args.counts!r}") from None
    seed = cfg.split_seed if args.seed is None else args.seed
    out = _out_dir(args, cfg, Path("."))
    target = out / "split.json"
    _claim(target, args.force)
    out.mkdir(parents=True, exist_ok=True)
    split = split_dataset(load_manifest(manifest), counts, seed)
    split.save(target)
    print(f"wrote {target} ({len(split.train)}/{len(split.validation)}/{len(split.test)})")
    return 0


def _seed_report(seed: int, state, data: Dataset, size: int) -> Optional[dict]:
    if not data.split.test:
        return None
    loss, cm = evaluate_model(state, *data.part("test", size))
    res = SeedResult(seed, loss, accuracy(cm), cm)
    out = res.as_dict()
    out["sensitivity"] = {}
    for c in ("healthy", "non_covid_pneumonia", "covid_pneumonia"):
        try:
            out["sensitivity"][c] = sensitivity(cm, c)
        except ValueError:
            out["sensitivity"][c] = None
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg.hp.validate(cfg.arch)
    seed = 0 if args.seed is None else args.seed
    data = _dataset(args, cfg)
    run_dir = _out_dir(args, cfg) / run_dir_name(cfg.hp, cfg.arch, seed)
    _claim(run_dir, args.force)
    init = None
    if args.init:
        init = load_checkpoint(args.init, cfg.hp, cfg.arch)
    size = cfg.hp.input_size
    res = fit(cfg.hp, data.part("train", size), data.part("validation", size), seed, cfg.arch,
              workers=args.workers or cfg.workers, run_dir=run_dir, init=init)
    report = {"seed": seed, "config": {"hp": cfg.hp.as_dict(), "arch": cfg.arch.to_config()},
              "config_hash": config_hash(cfg.hp, cfg.arch),
              "stopped_epoch": res.stopped_epoch, "best_epoch": res.best_epoch,
              "best_val_loss": res.best_val_loss, "best_val_accuracy": res.best_val_accuracy,
              "test": _seed_report(seed, res.model, data, size)}
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    msg = f"{run_dir}: best epoch {res.best_epoch}, val loss {res.best_val_loss:.4f}"
    if report["test"]:
        msg += f", test accuracy {100 * report['test']['test_accuracy']:.2f}%"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if not Path(args.model).is_file():
        raise UsageError(f"model checkpoint not found: {args.model}")
    data = _dataset(args, cfg)
    if not data.split.test:
        raise UsageError("the split has an empty test set")
    state = load_checkpoint(args.model, cfg.hp, cfg.arch)
    out = _out_dir(args, cfg, Path(args.model).parent)
    target = out / "eval_report.json"
    _claim(target, args.force)
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    report = _seed_report(seed, state, data, cfg.hp.input_size)
    report["model"] = str(args.model)
    target.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cm = report["confusion_matrix"]
    text = ConfusionMatrix3.from_array(cm).render()
    target.with_suffix(".txt").write_text(
        f"test loss {report['test_loss']:.4f}\naccuracy {100 * report['test_accuracy']:.2f} %\n\n{text}\n",
        encoding="utf-8")
    print(f"test loss {report['test_loss']:.4f}, accuracy {100 * report['test_accuracy']:.2f}%")
    print(text)
    return 0


def _seeds(args, cfg: ExperimentConfig) -> list[int]:
    if args.seeds is not None:
        start = 1 if args.seed is None else args.seed
        return list(range(start, start + args.seeds))
    return list(cfg.seeds)


def cmd_trials(args) -> int:
    cfg = _config(args)
    cfg.hp.validate(cfg.arch)
    seeds = _seeds(args, cfg)
    if len(seeds) < 2:
        raise UsageError("trials need at least two seeds")
    data = _dataset(args, cfg)
    size = cfg.hp.input_size
    parts = [data.part(n, size) for n in ("train", "validation", "test")]
    if len(parts[2][0]) == 0:
        raise UsageError("the split has an empty test set")
    workers = args.workers or cfg.workers
    root = _out_dir(args, cfg)
    if args.ablation is not None:
        presets = [p.strip() for p in args.ablation.split(",") if p.strip()] or list(ABLATION_PRESETS)
        target = root / f"ablation_{config_hash(cfg.hp, cfg.arch)}"
        _claim(target, args.force)
        results = ablation(cfg.hp, presets, *parts, seeds, cfg.arch, workers)
        target.mkdir(parents=True, exist_ok=True)
        table = render_table(results)
        (target / "ablation.tsv").write_text(table, encoding="utf-8")
        (target / "ablation.json").write_text(json.dumps(
            {name: agg.as_dict() for name, agg in results.items()}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print(table, end="")
        return 0
    target = root / f"trials_{config_hash(cfg.hp, cfg.arch)}"
    _claim(target, args.force)
    target.mkdir(parents=True, exist_ok=True)
    agg = repeated_trials(cfg.hp, *parts, seeds, cfg.arch, workers, run_root=target)
    write_report(agg, target / "report.json")
    print(render_table({cfg.hp.policy.name: agg}), end="")
    return 0


def cmd_search(args) -> int:
    cfg = _config(args)
    if not Path(args.space).is_file():
        raise UsageError(f"space file not found: {args.space}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if cfg.parser is not None:
        cp.read_dict(cfg.parser)
    cp.read(args.space, encoding="utf-8")
    try:
        space = SearchSpace.from_config(cp)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    seed = 0 if args.seed is None else args.seed
    data = _dataset(args, cfg)
    workers = args.workers or cfg.workers
    runner = fit_runner(lambda size: (data.part("train", size), data.part("validation", size)), cfg.arch)
    out = _out_dir(args, cfg)
    store = out / f"search_{seed}"
    if args.force and store.exists():
        shutil.rmtree(store)
    elif store.exists():
        log.info("resuming search from %s", store)
    ranked = run_search(space, args.trials, seed, out, runner, workers, cfg.arch)
    best = ranked[0]
    print(f"best trial {best.config.trial_id}: val loss {best.val_loss:.4f}, "
          f"val accuracy {100 * best.val_accuracy:.2f}%, {best.config.hp.as_dict()}")
    return 0


def cmd_augment_preview(args) -> int:
    cfg = _config(args)
    if not Path(args.image).is_file():
        raise UsageError(f"image not found: {args.image}")
    out = _out_dir(args, cfg, Path("preview"))
    _claim(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    size = args.size or cfg.hp.input_size
    img = normalize_image(read_grayscale(args.image), (size, size))
    batch = np.repeat(img[None], args.n, axis=0)
    labels = np.tile([1.0, 0.0, 0.0], (args.n, 1))
    aug, _ = augment_training_batch(batch, labels, cfg.hp.policy, np.random.default_rng(seed),
                                    args.workers or cfg.workers)
    for i, a in enumerate(aug):
        Image.fromarray(np.round(np.clip(a[0], 0, 1) * 255).astype(np.uint8)).save(out / f"sample_{i:03d}.png")
    print(f"wrote {args.n} samples to {out}")
    return 0


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="parallel workers (results do not depend on it)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cxrpipe", description="Chest X-ray 3-class training pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", parents=[common], help="write a synthetic toy dataset")
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("split", parents=[common], help="stratified train/validation/test split")
    p.add_argument("--manifest")
    p.add_argument("--counts", help="n_train,n_val,n_test")
    p.set_defaults(func=cmd_split)

    for name, func, help_ in (("train", cmd_train, "train one model"),
                              ("trials", cmd_trials, "repeated-seed trials"),
                              ("eval", cmd_eval, "evaluate a checkpoint on the test split"),
                              ("search", cmd_search, "random hyperparameter search")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--data", help="split JSON file")
        p.add_argument("--manifest")
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--init", help="start from this checkpoint")
        elif name == "trials":
            p.add_argument("--seeds", type=int, help="number of seeds (consecutive from --seed, default 1)")
            p.add_argument("--ablation", nargs="?", const="",
                           help="comma-separated presets (default: the ablation preset list)")
        elif name == "eval":
            p.add_argument("--model", required=True)
        elif name == "search":
            p.add_argument("--space", required=True)  # an existing search_<seed> store is resumed unless --force
            p.add_argument("--trials", type=int, default=20)

    p = sub.add_parser("augment-preview", parents=[common], help="render augmented samples of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be at least 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ManifestError, SplitError, CheckpointError, FileNotFoundError) as exc:
        print(f"cxrpipe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, SearchFailed) as exc:
        print(f"cxrpipe {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"cxrpipe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"cxrpipe {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
