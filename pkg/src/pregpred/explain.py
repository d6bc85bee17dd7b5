"""Perturbation-based time trends and logistic coefficient trends.

For any predictor, the effect of logging binary feature b on cycle day d
is measured by flipping that one input slot on and off for every test
example and averaging the difference in predicted probability.  For the
logistic model the per-day coefficients are available directly, in
log-odds units.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .codec import SEX_ACT_FEATURES, WINDOW_DAYS, Batch, FeatureSchema
from .linmodel import LinearParams, lr_coefficient_trend


@dataclass
class TrendCurve:
    feature: str
    values: np.ndarray  # (24,)
    model_id: str
    n_examples: int
    units: str = "probability_delta"

    def to_rows(self) -> list[tuple[str, str, int, float]]:
        return [(self.model_id, self.feature, d, float(v)) for d, v in enumerate(self.values)]


def _slice_batch(batch: Batch, sl: slice) -> Batch:
    return Batch(
        day=batch.day[sl],
        mask=batch.mask[sl],
        user=batch.user[sl],
        label=batch.label[sl],
        history=None if batch.history is None else batch.history[sl],
    )


def perturb_deltas(
    model, batch: Batch, feature: str, day: int, chunk: int = 2048
) -> np.ndarray:
    """Per-example Pr(preg | x_bd=1) - Pr(preg | x_bd=0).

    Everything else is held fixed.  Day `day` is unmasked in both arms so
    the contrast is between logging and not logging the feature on a real
    day, even when the original day was masked out.
    """
    schema: FeatureSchema = model.schema
    slot = schema.day_slot(feature)
    if not 0 <= day < WINDOW_DAYS:
        raise ValueError(f"cycle day out of range: {day}")
    out = np.empty(len(batch))
    for i in range(0, len(batch), chunk):
        sub = _slice_batch(batch, slice(i, i + chunk))
        mask_on = sub.mask.copy()
        mask_on[:, day] = 1.0
        day_on = sub.day.copy()
        day_on[:, day, slot] = 1.0
        day_off = sub.day.copy()
        day_off[:, day, slot] = 0.0
        p1 = model.predict_proba(Batch(day_on, mask_on, sub.user, sub.label, sub.history))
        p0 = model.predict_proba(Batch(day_off, mask_on, sub.user, sub.label, sub.history))
        out[i : i + len(sub)] = p1 - p0
    return out


def perturb_delta(model, batch: Batch, feature: str, day: int) -> float:
    """Mean perturbation effect over the batch; bounded in [-1, 1]."""
    return float(perturb_deltas(model, batch, feature, day).mean())


def trend_deltas(model, batch: Batch, feature: str) -> np.ndarray:
    """(B, 24) per-example perturbation effects for every cycle day."""
    return np.stack(
        [perturb_deltas(model, batch, feature, d) for d in range(WINDOW_DAYS)], axis=1
    )


def trend_curve(model, batch: Batch, feature: str) -> TrendCurve:
    deltas = trend_deltas(model, batch, feature)
    return TrendCurve(
        feature=feature,
        values=deltas.mean(axis=0),
        model_id=model.variant,
        n_examples=len(batch),
    )


def lr_trend(params: LinearParams, schema: FeatureSchema, feature: str) -> TrendCurve:
    """Per-day logistic coefficients as a trend curve (log-odds units)."""
    return TrendCurve(
        feature=feature,
        values=lr_coefficient_trend(params, schema, feature),
        model_id="logistic",
        n_examples=0,
        units="log_odds",
    )


# ---------------------------------------------------------------------------
# Uncertainty and flatness
# ---------------------------------------------------------------------------

def bootstrap_se(deltas: np.ndarray, n_boot: int = 200, seed: int = 0) -> np.ndarray:
    """Bootstrap standard error of each day's mean effect, resampling examples."""
    rng = np.random.default_rng(seed)
    n = deltas.shape[0]
    means = np.empty((n_boot, deltas.shape[1]))
    for b in range(n_boot):
        means[b] = deltas[rng.integers(0, n, size=n)].mean(axis=0)
    return means.std(axis=0, ddof=1)


@dataclass
class FlatnessReport:
    """Is the trend curve flat relative to its sampling noise?

    flat means (max - min) of the day means stays under 3x the largest
    per-day bootstrap standard error.
    """

    curve_range: float
    max_se: float
    flat: bool
    values: np.ndarray
    se: np.ndarray

    def to_dict(self) -> dict:
        return {
            "curve_range": self.curve_range,
            "max_se": self.max_se,
            "flat": self.flat,
            "values": [float(v) for v in self.values],
            "se": [float(v) for v in self.se],
        }


def flatness_report(
    model, batch: Batch, feature: str, n_boot: int = 200, seed: int = 0
) -> FlatnessReport:
    deltas = trend_deltas(model, batch, feature)
    values = deltas.mean(axis=0)
    se = bootstrap_se(deltas, n_boot, seed)
    rng_ = float(values.max() - values.min())
    max_se = float(se.max())
    return FlatnessReport(rng_, max_se, rng_ < 3.0 * max_se, values, se)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

TREND_CSV_HEADER = "model,feature,day,value"


def trends_to_csv(curves: list[TrendCurve]) -> str:
    lines = [TREND_CSV_HEADER]
    for curve in curves:
        for model_id, feature, day, value in curve.to_rows():
            lines.append(f"{model_id},{feature},{day},{value:.10g}")
    return "\n".join(lines) + "\n"


def sex_trend_bundle(
    model, batch: Batch, linear: LinearParams | None = None, schema: FeatureSchema | None = None
) -> list[TrendCurve]:
    """Trend curves for the three sex-act features: perturbation trends for
    the given model, plus coefficient trends when a linear model is given.

    The two groups mirror the usual side-by-side presentation of
    coefficient-based and perturbation-based associations.
    """
    curves = [trend_curve(model, batch, f) for f in SEX_ACT_FEATURES]
    if linear is not None:
        if schema is None:
            raise ValueError("schema required for coefficient trends")
        curves.extend(lr_trend(linear, schema, f) for f in SEX_ACT_FEATURES)
    return curves
