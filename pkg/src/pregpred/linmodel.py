"""Logistic-regression baseline over the flattened example vector.

Every (binary feature, cycle day) pair owns one coefficient, so trained
weights read directly as per-day time trends.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import WINDOW_DAYS, Batch, FeatureSchema, flatten_batch
from .neural import GradCheckReport, sigmoid

LOGIT_CLAMP = 30.0


@dataclass
class LinearParams:
    weights: np.ndarray  # (flat_width,)
    bias: float = 0.0
    l2_strength: float = 0.0


def lr_predict(params: LinearParams, x: np.ndarray) -> np.ndarray | float:
    """sigmoid(w.x + b), with the logit clamped to +-30 before exponentiation."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.weights.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != weight width {params.weights.shape[0]}")
    z = np.clip(x @ params.weights + params.bias, -LOGIT_CLAMP, LOGIT_CLAMP)
    p = sigmoid(z)
    return float(p) if np.ndim(p) == 0 else p


def lr_loss_grad(
    params: LinearParams, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, float]:
    """Mean binary cross-entropy plus (l2/2)*||w||^2; the bias is unregularized.

    Returns (loss, gradient wrt weights, gradient wrt bias).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) == 0:
        raise ValueError("empty batch")
    p = np.asarray(lr_predict(params, X)).ravel()
    eps = 1e-12
    pc = np.clip(p, eps, 1.0 - eps)
    loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    loss += 0.5 * params.l2_strength * float(params.weights @ params.weights)
    resid = (p - y) / len(y)
    grad_w = X.T @ resid + params.l2_strength * params.weights
    grad_b = float(resid.sum())
    return loss, grad_w, grad_b


def lr_coefficient_trend(
    params: LinearParams, schema: FeatureSchema, feature: str
) -> np.ndarray:
    """The 24 weights of one binary feature, in cycle-day order (log-odds units)."""
    idx = [schema.flat_slot(feature, d) for d in range(WINDOW_DAYS)]
    return params.weights[idx].copy()


class LogisticModel:
    """Trainer-facing wrapper with the shared model interface.

    Parameters start at zero (the objective is convex, so initialization
    only shifts the optimization path).
    """

    variant = "logistic"

    def __init__(self, schema: FeatureSchema, l2: float = 0.0, seed: int = 0, **_ignored):
        self.schema = schema
        self.l2 = float(l2)
        self.seed = seed
        self.params: dict[str, np.ndarray] = {
            "w": np.zeros(schema.flat_width),
            "b": np.zeros(1),
        }

    @property
    def linear_params(self) -> LinearParams:
        return LinearParams(self.params["w"], float(self.params["b"][0]), self.l2)

    def arch(self) -> dict:
        return {"variant": self.variant, "l2": self.l2, "seed": self.seed}

    def predict_proba(self, batch: Batch, train: bool = False, rng=None) -> np.ndarray:
        return np.asarray(lr_predict(self.linear_params, flatten_batch(batch))).ravel()

    def loss(self, batch: Batch, dropout_seed: int = 0) -> float:
        loss, _, _ = lr_loss_grad(self.linear_params, flatten_batch(batch), batch.label)
        return loss

    def loss_and_grads(self, batch: Batch, dropout_seed: int = 0):
        loss, gw, gb = lr_loss_grad(self.linear_params, flatten_batch(batch), batch.label)
        return loss, {"w": gw, "b": np.array([gb])}
