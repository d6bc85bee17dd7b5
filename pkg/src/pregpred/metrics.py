"""Evaluation: AUC, decile stratification, and multi-cycle extrapolation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

N_DECILES = 10
EXTRAPOLATION_CYCLES = 6


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Ties count one half.  Computed from midranks in O(n log n); both
    classes must be present.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)  # average rank for ties
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def six_cycle(p):
    """Chance of at least one success in six independent cycles: 1 - (1-p)^6."""
    arr = np.asarray(p, dtype=float)
    if np.any((arr < 0.0) | (arr > 1.0)):
        raise ValueError("probability outside [0, 1]")
    out = 1.0 - (1.0 - arr) ** EXTRAPOLATION_CYCLES
    return float(out) if np.ndim(p) == 0 else out


@dataclass
class DecileRow:
    decile: int  # 0 = lowest scores, 9 = highest
    count: int
    positive_rate: float
    six_cycle_rate: float


def decile_stratify(scores, labels) -> list[DecileRow]:
    """Split by predicted score into 10 contiguous groups of near-equal size.

    Groups are formed over a stable ascending sort (ties keep input
    order); sizes differ by at most one.  Each row reports the group's
    empirical positive rate and its six-cycle extrapolation.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(float)
    if len(scores) < N_DECILES:
        raise ValueError(f"need at least {N_DECILES} examples, got {len(scores)}")
    order = np.argsort(scores, kind="stable")
    rows = []
    for i, group in enumerate(np.array_split(order, N_DECILES)):
        rate = float(labels[group].mean())
        rows.append(DecileRow(i, len(group), rate, six_cycle(rate)))
    return rows


@dataclass
class EvalResult:
    model: str
    auc: float
    n_examples: int
    n_positive: int
    deciles: list[DecileRow]

    @property
    def top(self) -> DecileRow:
        return self.deciles[-1]

    @property
    def bottom(self) -> DecileRow:
        return self.deciles[0]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "auc": self.auc,
            "n_examples": self.n_examples,
            "n_positive": self.n_positive,
            "deciles": [dataclasses.asdict(r) for r in self.deciles],
            "summary": {
                "single_cycle_top": self.top.positive_rate,
                "single_cycle_bottom": self.bottom.positive_rate,
                "six_cycle_top": self.top.six_cycle_rate,
                "six_cycle_bottom": self.bottom.six_cycle_rate,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def evaluate(scores, labels, model_name: str = "model") -> EvalResult:
    labels_arr = np.asarray(labels).ravel().astype(int)
    return EvalResult(
        model=model_name,
        auc=auc(scores, labels_arr),
        n_examples=len(labels_arr),
        n_positive=int(labels_arr.sum()),
        deciles=decile_stratify(scores, labels_arr),
    )


SUMMARY_CSV_HEADER = (
    "model,auc,single_cycle_top,single_cycle_bottom,six_cycle_top,six_cycle_bottom"
)


def results_to_csv(results: list[EvalResult]) -> str:
    """One summary row per model: AUC plus top/bottom decile rates."""
    lines = [SUMMARY_CSV_HEADER]
    for r in results:
        lines.append(
            f"{r.model},{r.auc:.6f},{r.top.positive_rate:.6f},{r.bottom.positive_rate:.6f},"
            f"{r.top.six_cycle_rate:.6f},{r.bottom.six_cycle_rate:.6f}"
        )
    return "\n".join(lines) + "\n"
