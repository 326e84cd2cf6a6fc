"""Mini-batch training with augmentation, validation early stopping and best-weight snapshots."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import augment_training_batch
from .checkpoint import save_checkpoint
from .neuralnet import (DEFAULT_ARCH, N_CLASSES, ArchSpec, HyperParams, ModelState, backward,
                        build_model, forward, loss_softmax_ce, predict_proba, rmsprop_step)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class EarlyStopState:
    patience: int
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_without_improvement: int = 0
    epoch: int = 0


def early_stop_update(es: EarlyStopState, val_loss: float) -> tuple[EarlyStopState, str]:
    """Advance one epoch. Improvement means strictly below the best so far.

    Returns ``"stop"`` once more than ``patience`` consecutive epochs have
    failed to improve.
    """
    if math.isnan(val_loss):
        raise TrainingDiverged(f"validation loss is NaN at epoch {es.epoch + 1}")
    epoch = es.epoch + 1
    if val_loss < es.best_val_loss:
        es = replace(es, best_val_loss=val_loss, best_epoch=epoch, epochs_without_improvement=0, epoch=epoch)
    else:
        es = replace(es, epochs_without_improvement=es.epochs_without_improvement + 1, epoch=epoch)
    return es, "stop" if es.epochs_without_improvement > es.patience else "continue"


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    wall_time_s: float

    def key(self) -> tuple:
        """Everything except wall-clock time."""
        return (self.epoch, self.train_loss, self.val_loss, self.val_accuracy)


@dataclass
class FitResult:
    model: ModelState
    history: list[EpochRecord]
    stopped_epoch: int
    best_epoch: int

    @property
    def best_val_loss(self) -> float:
        return min(r.val_loss for r in self.history)

    @property
    def best_val_accuracy(self) -> float:
        return self.history[self.best_epoch - 1].val_accuracy


def one_hot(y: np.ndarray, n: int = N_CLASSES) -> np.ndarray:
    return np.eye(n, dtype=np.float64)[np.asarray(y, dtype=np.int64)]


def _as_targets(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    return one_hot(y) if y.ndim == 1 else y.astype(np.float64)


def evaluate_loss(state: ModelState, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy; no augmentation, no mutation."""
    probs = predict_proba(state, x)
    targets = _as_targets(y)
    acc = float(np.mean(probs.argmax(axis=1) == targets.argmax(axis=1)))
    return loss_softmax_ce(probs, targets), acc


def train_one_epoch(state: ModelState, x: np.ndarray, y: np.ndarray, hp: HyperParams,
                    rng: np.random.Generator, workers: int = 1) -> tuple[ModelState, float]:
    """One pass over shuffled data in batches of ``hp.batch_size`` (last batch kept).

    Returns the state (updated in place) and the example-weighted mean loss.
    """
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    targets = _as_targets(y)
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, hp.batch_size):
        idx = order[start:start + hp.batch_size]
        xb, yb = augment_training_batch(x[idx], targets[idx], hp.policy, rng, workers)
        probs, cache = forward(state, xb, "train", rng)
        loss = loss_softmax_ce(probs, yb)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite training loss {loss}")
        grads = backward(state, cache, yb)
        if hp.learning_rate:
            rmsprop_step(state, grads, hp.learning_rate)
        total += loss * len(idx)
    return state, total / n


def config_hash(hp: HyperParams, arch: ArchSpec) -> str:
    blob = json.dumps({"hp": hp.as_dict(), "arch": arch.to_config()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def run_dir_name(hp: HyperParams, arch: ArchSpec, seed: int) -> str:
    return f"run_{config_hash(hp, arch)}_{seed}"


def write_training_log(history: list[EpochRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy", "wall_time_s"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_accuracy), f"{r.wall_time_s:.3f}"])


def fit(hp: HyperParams, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
        seed: int, arch: ArchSpec = DEFAULT_ARCH, workers: int = 1,
        run_dir: Optional[str | Path] = None, init: Optional[ModelState] = None) -> FitResult:
    """Train up to ``hp.max_epochs`` epochs and return the best-validation snapshot.

    ``init`` starts from given weights (e.g. a loaded checkpoint) instead of a
    fresh initialisation. With ``run_dir`` the epoch log and best checkpoint
    are written there.
    """
    x_tr, y_tr = train
    x_va, y_va = val
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("fit needs non-empty training and validation sets")
    hp.validate(arch)
    rng = np.random.default_rng(seed)
    init_seed = int(rng.integers(0, 2**63 - 1))
    state = init.copy() if init is not None else build_model(hp, arch, init_seed)
    es = EarlyStopState(hp.patience)
    history: list[EpochRecord] = []
    best = state.copy()
    for epoch in range(1, hp.max_epochs + 1):
        t0 = time.perf_counter()
        state, train_loss = train_one_epoch(state, x_tr, y_tr, hp, rng, workers)
        val_loss, val_acc = evaluate_loss(state, x_va, y_va)
        history.append(EpochRecord(epoch, train_loss, val_loss, val_acc, time.perf_counter() - t0))
        es, decision = early_stop_update(es, val_loss)
        if es.best_epoch == epoch:
            best = state.copy()
        log.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.3f", epoch, train_loss, val_loss, val_acc)
        if decision == "stop":
            break
    result = FitResult(best, history, history[-1].epoch, es.best_epoch)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_training_log(history, run_dir / "train_log.csv")
        save_checkpoint(best, run_dir / "best.ckpt")
    return result
