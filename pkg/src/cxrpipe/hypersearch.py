"""Plain random search over hyperparameters and augmentation presets.

Trial ``k`` of a search with seed ``s`` samples its configuration from the
substream (s, k) and trains with seed ``substream_seed(s, k, 1)``, so results
do not depend on execution order and an interrupted search resumes exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ._sampling import substream, substream_seed
from .augment import PRESET_NAMES, preset
from .config import hyperparams_from_config
from .neuralnet import DEFAULT_ARCH, ArchSpec, HyperParams
from .trainer import TrainingDiverged, fit

log = logging.getLogger(__name__)


class SearchFailed(RuntimeError):
    pass


def _pair(raw, cast=float):
    vals = [cast(v) for v in str(raw).replace(" ", "").split(",") if v]
    return tuple(vals)


@dataclass(frozen=True)
class SearchSpace:
    dropout_p: tuple[float, float] = (0.0, 0.5)
    fc_units: tuple[int, int, int] = (64, 512, 32)  # low, high, step
    input_size: tuple[int, ...] = (192, 220, 224)
    learning_rate: tuple[float, float] = (1e-5, 1e-3)  # sampled log-uniformly
    presets: tuple[str, ...] = PRESET_NAMES
    freeze_depth: tuple[int, ...] = (0, 10)
    base: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        errs = []
        lo, hi = self.dropout_p
        if not 0 <= lo <= hi < 1:
            errs.append(f"dropout_p range {self.dropout_p} must satisfy 0 <= low <= high < 1")
        lo_u, hi_u, step = self.fc_units
        if not (0 < lo_u <= hi_u and step > 0):
            errs.append(f"fc_units range {self.fc_units} is empty")
        lr_lo, lr_hi = self.learning_rate
        if not 0 < lr_lo <= lr_hi:
            errs.append(f"learning_rate range {self.learning_rate} is empty")
        for name in ("input_size", "presets", "freeze_depth"):
            if not getattr(self, name):
                errs.append(f"{name} set is empty")
        for p in self.presets:
            try:
                preset(p)
            except ValueError as exc:
                errs.append(str(exc))
        if errs:
            raise ValueError("; ".join(errs))

    @classmethod
    def desk(cls, base: Optional[HyperParams] = None) -> "SearchSpace":
        """Small-image variant for the toy dataset and the default 4-conv backbone."""
        return cls(input_size=(32, 64), freeze_depth=(0, 1, 2), base=base or HyperParams(freeze_depth=0))

    def fc_choices(self) -> list[int]:
        lo, hi, step = self.fc_units
        return list(range(lo, hi + 1, step))

    def identity(self) -> str:
        blob = json.dumps({k: v for k, v in asdict(self).items()}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def contains(self, hp: HyperParams) -> bool:
        return (self.dropout_p[0] <= hp.dropout_p <= self.dropout_p[1]
                and hp.fc_units in self.fc_choices()
                and hp.input_size in self.input_size
                and self.learning_rate[0] <= hp.learning_rate <= self.learning_rate[1]
                and hp.policy.name in self.presets
                and hp.freeze_depth in self.freeze_depth)

    @classmethod
    def from_config(cls, parser) -> "SearchSpace":
        """Build from a ``configparser`` with a ``[space]`` section (base values from ``[hyperparams]``)."""
        base = hyperparams_from_config(parser)
        sec = parser["space"] if parser.has_section("space") else {}
        default = cls.desk(base)
        return cls(
            dropout_p=_pair(sec.get("dropout_p", "0.0,0.5")),
            fc_units=_pair(sec.get("fc_units", "64,512,32"), int),
            input_size=_pair(sec.get("input_size", ",".join(map(str, default.input_size))), int),
            learning_rate=_pair(sec.get("learning_rate", "1e-5,1e-3")),
            presets=tuple(p.strip() for p in sec.get("augmentation", ",".join(PRESET_NAMES)).split(",") if p.strip()),
            freeze_depth=_pair(sec.get("freeze_depth", ",".join(map(str, default.freeze_depth))), int),
            base=base,
        )


@dataclass(frozen=True)
class TrialConfig:
    trial_id: int
    hp: HyperParams
    sampled_from: str


def sample_config(space: SearchSpace, rng: np.random.Generator, trial_id: int = 0) -> TrialConfig:
    """Draw dropout, fc units, input size, learning rate, preset, freeze depth (in that order)."""
    dropout = float(rng.uniform(*space.dropout_p))
    fcs = space.fc_choices()
    fc = fcs[int(rng.integers(len(fcs)))]
    size = space.input_size[int(rng.integers(len(space.input_size)))]
    lo, hi = space.learning_rate
    lr = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    lr = min(max(lr, lo), hi)
    name = space.presets[int(rng.integers(len(space.presets)))]
    freeze = space.freeze_depth[int(rng.integers(len(space.freeze_depth)))]
    base = space.base
    hp = replace(base, input_size=size, dropout_p=dropout, fc_units=fc, learning_rate=lr,
                 freeze_depth=freeze, policy=preset(name, base.policy.mixup_alpha, base.policy.ricap_beta))
    return TrialConfig(trial_id, hp, space.identity())


@dataclass(frozen=True)
class TrialOutcome:
    config: TrialConfig
    status: str  # "complete" or "failed"
    val_loss: float = math.inf
    val_accuracy: float = 0.0
    log_path: Optional[str] = None
    error: Optional[str] = None

    def to_json(self) -> dict:
        return {"trial_id": self.config.trial_id, "sampled_from": self.config.sampled_from,
                "config": self.config.hp.as_dict(), "status": self.status,
                "val_loss": None if self.status != "complete" else self.val_loss,
                "val_accuracy": None if self.status != "complete" else self.val_accuracy,
                "log_path": self.log_path, "error": self.error}


# (config, fit seed, trial directory) -> (best val loss, its val accuracy, log path)
TrialRunner = Callable[[TrialConfig, int, Path], tuple[float, float, Optional[str]]]
DataFn = Callable[[int], tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]]


def fit_runner(data: DataFn, arch: ArchSpec = DEFAULT_ARCH) -> TrialRunner:
    """Default runner: full ``fit`` on data resized to the trial's input size."""
    def run(cfg: TrialConfig, seed: int, trial_dir: Path):
        train, val = data(cfg.hp.input_size)
        res = fit(cfg.hp, train, val, seed, arch, run_dir=trial_dir)
        return res.best_val_loss, res.best_val_accuracy, str(trial_dir / "train_log.csv")
    return run


def _write_atomic(path: Path, obj: dict) -> None:
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _load_outcome(path: Path, cfg: TrialConfig) -> Optional[TrialOutcome]:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None
    if obj.get("status") not in ("complete", "failed") or obj.get("sampled_from") != cfg.sampled_from:
        return None
    if obj["status"] == "complete":
        return TrialOutcome(cfg, "complete", float(obj["val_loss"]), float(obj["val_accuracy"]), obj.get("log_path"))
    return TrialOutcome(cfg, "failed", error=obj.get("error"))


def rank(outcomes: list[TrialOutcome]) -> list[TrialOutcome]:
    """Completed trials by ascending validation loss, ties by trial id."""
    done = [o for o in outcomes if o.status == "complete"]
    return sorted(done, key=lambda o: (o.val_loss, o.config.trial_id))


def run_search(space: SearchSpace, n_trials: int, seed: int, store: str | Path,
               runner: TrialRunner, workers: int = 1,
               arch: Optional[ArchSpec] = None) -> list[TrialOutcome]:
    """Run (or resume) ``n_trials`` random trials; return completed ones ranked.

    Each finished trial is persisted to ``store/search_<seed>/trial_<id>.json``
    before the next result is collected. Trials whose file already exists are
    not rerun. Stored log paths are relative to the search directory.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    if arch is not None and max(space.freeze_depth) > arch.n_conv:
        raise ValueError(f"freeze_depth set {space.freeze_depth} exceeds the {arch.n_conv} conv layers")
    root = Path(store) / f"search_{seed}"
    root.mkdir(parents=True, exist_ok=True)

    def one(trial_id: int) -> TrialOutcome:
        cfg = sample_config(space, substream(seed, trial_id), trial_id)
        path = root / f"trial_{trial_id}.json"
        cached = _load_outcome(path, cfg)
        if cached is not None:
            return cached
        trial_dir = root / f"trial_{trial_id}"
        try:
            loss, acc, log_path = runner(cfg, substream_seed(seed, trial_id, 1), trial_dir)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite validation loss {loss}")
            if log_path is not None:
                log_path = os.path.relpath(log_path, root)
            outcome = TrialOutcome(cfg, "complete", float(loss), float(acc), log_path)
        except (TrainingDiverged, FloatingPointError) as exc:
            log.warning("trial %d failed: %s", trial_id, exc)
            outcome = TrialOutcome(cfg, "failed", error=str(exc))
        _write_atomic(path, outcome.to_json())
        return outcome

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(one, range(n_trials)))
    else:
        outcomes = [one(t) for t in range(n_trials)]
    ranked = rank(outcomes)
    if not ranked:
        raise SearchFailed(f"all {n_trials} trials failed")
    _write_atomic(root / "ranking.json", {"seed": seed, "ranking": [
        {"trial_id": o.config.trial_id, "val_loss": o.val_loss, "val_accuracy": o.val_accuracy} for o in ranked]})
    return ranked
