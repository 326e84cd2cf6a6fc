"""Test-set metrics, repeated-seed trials and report rendering."""

from __future__ import annotations

import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import preset
from .data_ingest import CLASSES
from .neuralnet import DEFAULT_ARCH, ArchSpec, HyperParams, ModelState, loss_softmax_ce, predict_proba
from .trainer import TrainingDiverged, fit, one_hot, run_dir_name

CLASS_TITLES = ("healthy", "non-COVID-19 pneumonia", "COVID-19 pneumonia")


def predict_class(probs: np.ndarray) -> int:
    """Argmax; ties resolve to the lowest class index."""
    return int(np.argmax(probs))


@dataclass(frozen=True)
class ConfusionMatrix3:
    """Rows are ground truth, columns predictions, in ``CLASSES`` order."""
    counts: tuple[tuple[int, int, int], ...]

    @classmethod
    def from_array(cls, arr) -> "ConfusionMatrix3":
        arr = np.asarray(arr, dtype=np.int64)
        if arr.shape != (3, 3) or (arr < 0).any():
            raise ValueError("confusion matrix must be 3x3 with non-negative counts")
        return cls(tuple(tuple(int(v) for v in row) for row in arr))

    def array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.array().sum())

    def to_list(self) -> list[list[int]]:
        return [list(r) for r in self.counts]

    def render(self) -> str:
        width = max(len(t) for t in CLASS_TITLES)
        head = " " * (width + 2) + "  ".join(f"{t:>{width}}" for t in CLASS_TITLES)
        lines = ["rows: ground truth, columns: prediction", head]
        for title, row in zip(CLASS_TITLES, self.counts):
            lines.append(f"{title:>{width}}  " + "  ".join(f"{v:>{width}d}" for v in row))
        return "\n".join(lines)


def confusion_matrix(truth: Sequence[int], predicted: Sequence[int]) -> ConfusionMatrix3:
    truth = np.asarray(truth, dtype=np.int64).ravel()
    predicted = np.asarray(predicted, dtype=np.int64).ravel()
    if truth.shape != predicted.shape:
        raise ValueError(f"length mismatch: {truth.size} labels vs {predicted.size} predictions")
    counts = np.zeros((3, 3), dtype=np.int64)
    np.add.at(counts, (truth, predicted), 1)
    return ConfusionMatrix3.from_array(counts)


def accuracy(cm: ConfusionMatrix3) -> float:
    arr = cm.array()
    if arr.sum() == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return float(np.trace(arr) / arr.sum())


def sensitivity(cm: ConfusionMatrix3, cls: int | str) -> float:
    c = CLASSES.index(cls) if isinstance(cls, str) else int(cls)
    row = cm.array()[c]
    if row.sum() == 0:
        raise ValueError(f"class {CLASSES[c]} is absent from the ground truth")
    return float(row[c] / row.sum())


def evaluate_model(state: ModelState, x: np.ndarray, y: np.ndarray) -> tuple[float, ConfusionMatrix3]:
    """Eval-mode loss against one-hot labels and the argmax confusion matrix."""
    if len(x) == 0:
        raise ValueError("empty test set")
    probs = predict_proba(state, x)
    loss = loss_softmax_ce(probs, one_hot(y))
    preds = [predict_class(p) for p in probs]
    return loss, confusion_matrix(y, preds)


@dataclass(frozen=True)
class SeedResult:
    seed: int
    test_loss: float
    test_accuracy: float
    confusion: ConfusionMatrix3

    def as_dict(self) -> dict:
        return {"seed": self.seed, "test_loss": self.test_loss, "test_accuracy": self.test_accuracy,
                "confusion_matrix": self.confusion.to_list()}


@dataclass
class AggregateResult:
    per_seed: list[SeedResult]
    config: dict = field(default_factory=dict)

    def _stat(self, attr: str) -> tuple[float, float]:
        vals = [getattr(r, attr) for r in self.per_seed]
        mean = statistics.fmean(vals)
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        return mean, sd

    @property
    def mean_loss(self) -> float:
        return self._stat("test_loss")[0]

    @property
    def sd_loss(self) -> float:
        return self._stat("test_loss")[1]

    @property
    def mean_accuracy(self) -> float:
        return self._stat("test_accuracy")[0]

    @property
    def sd_accuracy(self) -> float:
        return self._stat("test_accuracy")[1]

    def pooled_confusion(self) -> ConfusionMatrix3:
        return ConfusionMatrix3.from_array(sum(r.confusion.array() for r in self.per_seed))

    def covid_sensitivity(self) -> dict[str, Optional[float]]:
        """Mean of per-seed sensitivities and the pooled-matrix sensitivity."""
        per_seed = []
        for r in self.per_seed:
            try:
                per_seed.append(sensitivity(r.confusion, "covid_pneumonia"))
            except ValueError:
                pass
        try:
            pooled = sensitivity(self.pooled_confusion(), "covid_pneumonia")
        except ValueError:
            pooled = None
        return {"mean_per_seed": statistics.fmean(per_seed) if per_seed else None, "pooled": pooled}

    def as_dict(self) -> dict:
        return {
            "config": self.config,
            "seeds": [r.seed for r in self.per_seed],
            "per_seed": [r.as_dict() for r in self.per_seed],
            "mean_loss": self.mean_loss, "sd_loss": self.sd_loss,
            "mean_accuracy": self.mean_accuracy, "sd_accuracy": self.sd_accuracy,
            "covid_sensitivity": self.covid_sensitivity(),
        }

    def table_row(self, name: str) -> str:
        return (f"{name}\t{self.mean_loss:.4f} ± {self.sd_loss:.4f}\t"
                f"{100 * self.mean_accuracy:.2f} ± {100 * self.sd_accuracy:.2f}")


def repeated_trials(hp: HyperParams, train, val, test, seeds: Sequence[int], arch: ArchSpec = DEFAULT_ARCH,
                    workers: int = 1, run_root: Optional[Path] = None,
                    config: Optional[dict] = None) -> AggregateResult:
    """Fit and evaluate once per seed on a fixed split, then aggregate (sample sd)."""
    if len(seeds) < 2:
        raise ValueError("repeated trials need at least two seeds")

    def one(seed: int) -> SeedResult:
        run_dir = run_root / run_dir_name(hp, arch, seed) if run_root is not None else None
        try:
            res = fit(hp, train, val, seed, arch, run_dir=run_dir)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"seed {seed}: {exc}") from exc
        loss, cm = evaluate_model(res.model, *test)
        return SeedResult(int(seed), loss, accuracy(cm), cm)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    return AggregateResult(results, config or {"hp": hp.as_dict(), "arch": arch.to_config()})


def ablation(hp: HyperParams, presets: Sequence[str], train, val, test, seeds: Sequence[int],
             arch: ArchSpec = DEFAULT_ARCH, workers: int = 1) -> dict[str, AggregateResult]:
    """Repeated trials for each augmentation preset with otherwise identical settings."""
    out = {}
    for name in presets:
        policy = preset(name, hp.policy.mixup_alpha, hp.policy.ricap_beta)
        out[name] = repeated_trials(replace(hp, policy=policy), train, val, test, seeds, arch, workers)
    return out


def render_table(results: dict[str, AggregateResult]) -> str:
    lines = ["Models\tLoss of test set\t3-category accuracy of test set (%)"]
    lines += [agg.table_row(name) for name, agg in results.items()]
    return "\n".join(lines) + "\n"


def write_report(agg: AggregateResult, path: str | Path) -> None:
    path = Path(path)
    path.write_text(json.dumps(agg.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text = [f"mean loss {agg.mean_loss:.4f} ± {agg.sd_loss:.4f}",
            f"mean accuracy {100 * agg.mean_accuracy:.2f} ± {100 * agg.sd_accuracy:.2f} %",
            "", "pooled confusion matrix", agg.pooled_confusion().render()]
    path.with_suffix(".txt").write_text("\n".join(text) + "\n", encoding="utf-8")
