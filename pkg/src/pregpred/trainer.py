"""User-level splitting, balanced batching, training loop, and grid search.

Splits are assigned by hashing user ids so one user's cycles never straddle
splits.  Training batches are rebalanced 50/50 by downsampling the majority
class; validation and test evaluation always use the natural distribution.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .codec import (
    SPLIT_TEST,
    SPLIT_TRAIN,
    SPLIT_VAL,
    Batch,
    EncodedDataset,
    make_batch,
)
from .metrics import auc
from .predictors import build_model

DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)  # train / val / test shares of users


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the partial report."""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class SplitSpec:
    train_users: frozenset[str]
    val_users: frozenset[str]
    test_users: frozenset[str]
    seed: int

    def split_of(self, user_id: str) -> int:
        if user_id in self.train_users:
            return SPLIT_TRAIN
        if user_id in self.val_users:
            return SPLIT_VAL
        if user_id in self.test_users:
            return SPLIT_TEST
        raise KeyError(user_id)


def _user_unit(user_id: str, seed: int) -> float:
    """Stable hash of (seed, user) mapped into [0, 1)."""
    digest = hashlib.blake2b(f"{seed}:{user_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def assign_split(
    user_id: str, seed: int, fractions: Sequence[float] = DEFAULT_FRACTIONS
) -> int:
    u = _user_unit(user_id, seed)
    if u < fractions[0]:
        return SPLIT_TRAIN
    if u < fractions[0] + fractions[1]:
        return SPLIT_VAL
    return SPLIT_TEST


def split_by_user(
    user_ids: Iterable[str], seed: int, fractions: Sequence[float] = DEFAULT_FRACTIONS
) -> SplitSpec:
    """Partition users into train/val/test by hashed assignment."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negatives summing to 1: {fractions}")
    buckets: tuple[set[str], set[str], set[str]] = (set(), set(), set())
    for uid in set(user_ids):
        buckets[assign_split(uid, seed, fractions)].add(uid)
    return SplitSpec(frozenset(buckets[0]), frozenset(buckets[1]), frozenset(buckets[2]), seed)


def balanced_batches(
    labels: np.ndarray, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Yield index batches with ceil(b/2) positives and floor(b/2) negatives.

    Sampling is without replacement within one epoch pass; the minority
    class bounds the number of batches, the majority class is subsampled.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("balanced batches need both classes present")
    per_pos = (batch_size + 1) // 2
    per_neg = batch_size // 2
    n_batches = min(len(pos) // per_pos, len(neg) // per_neg if per_neg else len(pos))
    pos = rng.permutation(pos)
    neg = rng.permutation(neg)
    for b in range(n_batches):
        yield np.concatenate(
            [pos[b * per_pos : (b + 1) * per_pos], neg[b * per_neg : (b + 1) * per_neg]]
        )


@dataclass
class Hyper:
    """One hyperparameter point."""

    learning_rate: float = 1e-3
    hidden_size: int = 32
    num_layers: int = 1
    batch_size: int = 64
    dropout: float = 0.0
    l2: float = 0.0
    embed_size: int = 16

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class HyperGrid:
    """Candidate lists for the exhaustive search."""

    learning_rate: list[float] = field(default_factory=lambda: [1e-3])
    hidden_size: list[int] = field(default_factory=lambda: [32])
    num_layers: list[int] = field(default_factory=lambda: [1])
    batch_size: list[int] = field(default_factory=lambda: [64])
    dropout: list[float] = field(default_factory=lambda: [0.0])
    l2: list[float] = field(default_factory=lambda: [0.0])

    def __post_init__(self):
        for name in ("learning_rate", "hidden_size", "num_layers", "batch_size", "dropout", "l2"):
            if not getattr(self, name):
                raise ValueError(f"empty grid dimension: {name}")

    def points(self) -> list[Hyper]:
        return [
            Hyper(lr, hs, nl, bs, dr, l2)
            for lr, hs, nl, bs, dr, l2 in itertools.product(
                self.learning_rate,
                self.hidden_size,
                self.num_layers,
                self.batch_size,
                self.dropout,
                self.l2,
            )
        ]


@dataclass
class TrainReport:
    variant: str
    hyper: dict
    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    chosen_epoch: int = 0  # 1-based epoch with the best validation AUC
    wall_clock_sec: float = 0.0
    n_train: int = 0
    n_val: int = 0
    selection_split: str = "val"

    def best_val_auc(self) -> float:
        return self.val_auc[self.chosen_epoch - 1] if self.val_auc else float("nan")

    def to_dict(self, with_timing: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not with_timing:
            # wall clock is machine noise; it lives in a timing sidecar so
            # reports stay byte-identical across reruns
            d.pop("wall_clock_sec")
        return d

    def to_json(self, with_timing: bool = False) -> str:
        return json.dumps(self.to_dict(with_timing), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class AdamOptimizer:
    """Per-coordinate adaptive steps; the default optimizer."""

    def __init__(self, params, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


class MomentumOptimizer:
    """Plain mini-batch gradient descent with momentum."""

    def __init__(self, params, learning_rate: float, momentum: float = 0.9):
        self.params = params
        self.lr = learning_rate
        self.momentum = momentum
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads) -> None:
        for k, g in grads.items():
            self.vel[k] = self.momentum * self.vel[k] - self.lr * g
            self.params[k] += self.vel[k]


OPTIMIZERS = {"adam": AdamOptimizer, "momentum": MomentumOptimizer}


# ---------------------------------------------------------------------------
# Training loop and grid search
# ---------------------------------------------------------------------------

def predict_dataset(
    model, dataset: EncodedDataset, indices: np.ndarray, chunk: int = 1024
) -> np.ndarray:
    """Eval-mode predictions over arbitrary dataset rows, chunked for memory."""
    with_history = model.variant == "embedding"
    parts = [
        model.predict_proba(make_batch(dataset, indices[i : i + chunk], with_history))
        for i in range(0, len(indices), chunk)
    ]
    return np.concatenate(parts) if parts else np.empty(0)


def train(
    variant: str,
    dataset: EncodedDataset,
    hyper: Hyper | dict | None = None,
    seed: int = 0,
    max_epochs: int = 50,
    patience: int = 5,
    optimizer: str = "adam",
):
    """Train one model on the dataset's train split.

    Minimizes mean binary cross-entropy on balanced batches, scores the
    unbalanced validation split by AUC after every epoch, keeps the best
    checkpoint, and stops once `patience` epochs pass without improvement
    (patience 0 therefore stops after the first epoch).  Returns
    (model, TrainReport).  Non-finite loss aborts with TrainingDiverged.
    """
    if isinstance(hyper, dict):
        hyper = Hyper(**hyper)
    hyper = hyper or Hyper()
    t0 = time.perf_counter()
    model = build_model(variant, dataset.schema, hyper.to_dict(), seed)
    train_idx = dataset.indices_for(SPLIT_TRAIN)
    val_idx = dataset.indices_for(SPLIT_VAL)
    labels = dataset.label.astype(int)
    report = TrainReport(
        variant=variant, hyper=hyper.to_dict(), seed=seed,
        n_train=len(train_idx), n_val=len(val_idx),
    )
    # Validation needs both classes for AUC; degenerate splits fall back to
    # selecting on the training set (recorded in the report).
    if len(val_idx) == 0 or len(np.unique(labels[val_idx])) < 2:
        val_idx = train_idx
        report.selection_split = "train"

    rng = np.random.default_rng(seed)
    opt = OPTIMIZERS[optimizer](model.params, hyper.learning_rate)
    with_history = variant == "embedding"
    best_auc = -np.inf
    best_params = None
    stale = 0
    step_counter = 0
    for epoch in range(1, max_epochs + 1):
        losses = []
        for batch_rows in balanced_batches(labels[train_idx], hyper.batch_size, rng):
            batch = make_batch(dataset, train_idx[batch_rows], with_history)
            step_counter += 1
            loss, grads = model.loss_and_grads(batch, dropout_seed=seed * 1_000_003 + step_counter)
            if not np.isfinite(loss):
                report.wall_clock_sec = time.perf_counter() - t0
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", report)
            opt.step(grads)
            losses.append(loss)
        report.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        val_auc = auc(predict_dataset(model, dataset, val_idx), labels[val_idx])
        report.val_auc.append(float(val_auc))
        if val_auc > best_auc:
            best_auc = val_auc
            best_params = {k: v.copy() for k, v in model.params.items()}
            report.chosen_epoch = epoch
            stale = 0
        else:
            stale += 1
        if stale >= patience:
            break
    if best_params is not None:
        for k in model.params:
            model.params[k][...] = best_params[k]
    report.wall_clock_sec = time.perf_counter() - t0
    return model, report


@dataclass
class GridResult:
    best: Hyper
    best_report: TrainReport
    reports: list[TrainReport]

    def to_json(self) -> str:
        return json.dumps(
            {
                "best": self.best.to_dict(),
                "reports": [r.to_dict() for r in self.reports],
            },
            sort_keys=True,
            indent=2,
        )


def grid_search(
    variant: str,
    dataset: EncodedDataset,
    grid: HyperGrid,
    seed: int = 0,
    max_epochs: int = 50,
    patience: int = 5,
    optimizer: str = "adam",
    n_jobs: int = 1,
) -> GridResult:
    """Exhaustive search over the grid's product, selected by validation AUC.

    Ties break toward smaller hidden size, then larger regularization, then
    lower learning rate.  Grid points are independent; n_jobs > 1 runs them
    on a thread pool (results are keyed by point, so the outcome does not
    depend on scheduling).
    """
    points = grid.points()

    def run(point: Hyper) -> TrainReport:
        return train(variant, dataset, point, seed, max_epochs, patience, optimizer)[1]

    if n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            reports = list(pool.map(run, points))
    else:
        reports = [run(point) for point in points]
    order = sorted(
        range(len(points)),
        key=lambda i: (
            -reports[i].best_val_auc(),
            points[i].hidden_size,
            -points[i].l2,
            points[i].learning_rate,
        ),
    )
    best_i = order[0]
    return GridResult(best=points[best_i], best_report=reports[best_i], reports=reports)
