"""Experiment configuration files (INI-style ``key = value`` with sections).

Every hyperparameter default is the value reported for the VGG16-based model.
Example::

    [data]
    manifest = toy/manifest.csv
    split = toy/split.json        ; or: counts = 998,125,125 / split_seed = 42
    channels = 1

    [hyperparams]
    input_size = 220
    dropout_p = 0.1
    fc_units = 416
    learning_rate = 1e-4
    batch_size = 8
    max_epochs = 100
    patience = 7
    freeze_depth = 10

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

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from io import StringIO
from pathlib import Path
from typing import Optional

from .augment import DEFAULT_POLICY, AugmentationPolicy
from .data_ingest import COHORT_SPLIT
from .neuralnet import DEFAULT_ARCH, ArchSpec, HyperParams


class ConfigError(ValueError):
    """Collects every invalid field of a configuration."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


HP_FIELDS = {"input_size": int, "dropout_p": float, "fc_units": int, "learning_rate": float,
             "batch_size": int, "max_epochs": int, "patience": int, "freeze_depth": int}


@dataclass
class ExperimentConfig:
    manifest: Optional[Path] = None
    split_file: Optional[Path] = None
    split_counts: tuple[int, int, int] = COHORT_SPLIT
    split_seed: int = 42
    channels: int = 1
    hp: HyperParams = field(default_factory=HyperParams)
    arch: ArchSpec = DEFAULT_ARCH
    out: Path = Path("runs")
    workers: int = 1
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    parser: Optional[configparser.ConfigParser] = None

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        data = {"counts": ",".join(map(str, self.split_counts)), "split_seed": str(self.split_seed),
                "channels": str(self.channels)}
        if self.manifest:
            data["manifest"] = str(self.manifest)
        if self.split_file:
            data["split"] = str(self.split_file)
        cp["data"] = data
        cp["hyperparams"] = {k: repr(getattr(self.hp, k)) for k in HP_FIELDS}
        cp["augmentation"] = self.hp.policy.to_config()
        cp["architecture"] = self.arch.to_config()
        cp["run"] = {"out": str(self.out), "workers": str(self.workers), "seeds": ",".join(map(str, self.seeds))}
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def _collect(problems: list[str], label: str, fn):
    try:
        return fn()
    except (ValueError, TypeError, KeyError) as exc:
        problems.append(f"{label}: {exc}")
        return None


def hyperparams_from_config(cp: configparser.ConfigParser, problems: Optional[list[str]] = None) -> HyperParams:
    own = problems is None
    problems = [] if own else problems
    sec = cp["hyperparams"] if cp.has_section("hyperparams") else {}
    kwargs = {}
    for name, cast in HP_FIELDS.items():
        if name in sec:
            val = _collect(problems, f"hyperparams.{name}", lambda: cast(sec[name]))
            if val is not None:
                kwargs[name] = val
    policy = DEFAULT_POLICY
    if cp.has_section("augmentation"):
        policy = _collect(problems, "augmentation", lambda: AugmentationPolicy.from_config(cp["augmentation"])) or policy
    hp = HyperParams(**kwargs, policy=policy)
    problems.extend(f"hyperparams: {p}" for p in hp.problems())
    if own and problems:
        raise ConfigError(problems)
    return hp


def parse_config(text: str, base_dir: Path = Path(".")) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_string(text)
    problems: list[str] = []
    cfg = ExperimentConfig(parser=cp)
    known = {"data", "hyperparams", "augmentation", "architecture", "run", "space"}
    for sec in cp.sections():
        if sec not in known:
            problems.append(f"unknown section [{sec}]")
    if cp.has_section("data"):
        d = cp["data"]
        if d.get("manifest"):
            cfg.manifest = base_dir / d["manifest"]
        if d.get("split"):
            cfg.split_file = base_dir / d["split"]
        if "counts" in d:
            counts = _collect(problems, "data.counts", lambda: tuple(int(v) for v in d["counts"].split(",")))
            if counts is not None and len(counts) != 3:
                problems.append("data.counts: expected three comma-separated integers")
            elif counts is not None:
                cfg.split_counts = counts
        cfg.split_seed = _collect(problems, "data.split_seed", lambda: int(d.get("split_seed", 42))) or 0
        ch = _collect(problems, "data.channels", lambda: int(d.get("channels", 1)))
        if ch not in (1, 3):
            problems.append(f"data.channels: must be 1 or 3 (got {d.get('channels')})")
        else:
            cfg.channels = ch
    cfg.hp = hyperparams_from_config(cp, problems)
    if cp.has_section("architecture"):
        cfg.arch = _collect(problems, "architecture", lambda: ArchSpec.from_config(cp["architecture"])) or DEFAULT_ARCH
    if cfg.hp.freeze_depth > cfg.arch.n_conv:
        problems.append(f"hyperparams.freeze_depth: {cfg.hp.freeze_depth} exceeds the "
                        f"{cfg.arch.n_conv} conv layers of the architecture")
    if cfg.arch.in_channels != cfg.channels:
        problems.append(f"architecture.in_channels ({cfg.arch.in_channels}) differs from data.channels ({cfg.channels})")
    if cp.has_section("run"):
        r = cp["run"]
        cfg.out = base_dir / r.get("out", "runs")
        w = _collect(problems, "run.workers", lambda: int(r.get("workers", 1)))
        if w is not None and w < 1:
            problems.append("run.workers: must be at least 1")
        elif w is not None:
            cfg.workers = w
        seeds = _collect(problems, "run.seeds", lambda: tuple(int(s) for s in r.get("seeds", "1,2,3,4,5").split(",")))
        if seeds:
            cfg.seeds = seeds
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent)
