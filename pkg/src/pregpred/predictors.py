"""The three recurrent predictors and the model factory.

Variants:
  * "lstm": sequence classifier; final hidden state concatenated with the
    user vector feeds a dense sigmoid head.
  * "bms": structured probability head.  Per-day fertility f_d comes from
    the hidden state; per-type risks r_t are free parameters squashed to
    (0, 1); the cycle's pregnancy probability multiplies the per-(day,
    type) survival factors.  A fourth "none" type is active on unmasked
    days without any sex log, so unlogged sex can still carry risk.
  * "embedding": a second recurrent net encodes the 180 days before the
    cycle into a user embedding, concatenated onto every day's input of
    the prediction net; both nets train jointly.

All variants share the checkpoint format: a JSON header line followed by
the ordered flat parameter arrays.
"""

from __future__ import annotations

import json
from typing import Mapping

import numpy as np

from . import neural
from .codec import (
    SEX_TYPES,
    WINDOW_DAYS,
    Batch,
    FeatureSchema,
    read_tensor_file,
    write_tensor_file,
)
from .linmodel import LogisticModel
from .neural import Params, backward, dense_backward, dense_forward, sequence_forward, sigmoid

HISTORY_DAYS = 180
BMS_CLAMP = 1e-12
PROB_EPS = 1e-12


def bce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient wrt p (already 1/B scaled)."""
    p = np.asarray(p, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    dp = (-y / pc + (1.0 - y) / (1.0 - pc)) / len(y)
    return loss, dp


def l2_penalty(params: Params, strength: float) -> tuple[float, Params]:
    """Quadratic penalty on weight matrices only (biases and risks exempt)."""
    if strength == 0.0:
        return 0.0, {}
    loss = 0.0
    grads: Params = {}
    for name, arr in params.items():
        if name.endswith(("_W", "_Wx", "_Wh")):
            loss += 0.5 * strength * float(np.sum(arr * arr))
            grads[name] = strength * arr
    return loss, grads


def sex_indicators(day: np.ndarray, mask: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """(B, 24, 4) binary matrix over (protected, unprotected, withdrawal, none).

    "none" is the complement: active on unmasked days without any sex-act
    log.  Masked days are all zero.
    """
    day = np.asarray(day, dtype=float)
    mask = np.asarray(mask, dtype=float)
    acts = (day[..., schema.sex_act_slots] != 0.0).astype(float) * mask[..., None]
    none = mask * (1.0 - acts.max(axis=-1))
    return np.concatenate([acts, none[..., None]], axis=-1)


def bms_probability(f: np.ndarray, r: np.ndarray, s: np.ndarray) -> np.ndarray | float:
    """Pregnancy probability 1 - prod_{d,t} (1 - r_t f_d)^{s_dt}.

    Evaluated in log space: 1 - exp(sum s_dt * log(1 - r_t f_d)), with each
    survival factor clamped below at 1e-12 before the log.  f is (24,) or
    (B, 24); s matches with a trailing type axis of 4; r is (4,).
    """
    f = np.asarray(f, dtype=float)
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if r.shape != (len(SEX_TYPES),):
        raise ValueError(f"expected {len(SEX_TYPES)} risk values, got shape {r.shape}")
    if np.any((f < 0.0) | (f > 1.0)) or np.any((r < 0.0) | (r > 1.0)):
        raise ValueError("fertility and risk values must lie in [0, 1]")
    squeeze = f.ndim == 1
    fb = np.atleast_2d(f)
    sb = s if s.ndim == 3 else s[None]
    surv = np.clip(1.0 - r[None, None, :] * fb[:, :, None], BMS_CLAMP, None)
    log_total = np.sum(sb * np.log(surv), axis=(1, 2))
    prob = -np.expm1(log_total)
    return float(prob[0]) if squeeze else prob


class PlainLstmModel:
    """Sequence classifier: LSTM over the 24 day vectors, dense head on
    (final hidden state, user vector)."""

    variant = "lstm"

    def __init__(
        self,
        schema: FeatureSchema,
        hidden_size: int = 32,
        num_layers: int = 1,
        dropout: float = 0.0,
        l2: float = 0.0,
        seed: int = 0,
    ):
        self.schema = schema
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.dropout = float(dropout)
        self.l2 = float(l2)
        self.seed = seed
        self.params = neural.init_params(
            {
                "lstm": [
                    {
                        "prefix": "seq",
                        "input_size": schema.day_width,
                        "hidden_size": hidden_size,
                        "num_layers": num_layers,
                    }
                ],
                "dense": [
                    {"name": "head", "fan_in": hidden_size + schema.user_width, "fan_out": 1}
                ],
            },
            seed,
        )

    def arch(self) -> dict:
        return {
            "variant": self.variant,
            "hidden_size": self.hidden_size,
            "num_layers": self.num_layers,
            "dropout": self.dropout,
            "l2": self.l2,
            "seed": self.seed,
        }

    def _forward(self, batch: Batch, train: bool, rng):
        drop = self.dropout if (train and rng is not None) else 0.0
        h, tape = sequence_forward(self.params, batch.day, batch.mask, "seq", drop, rng)
        hmask = neural.dropout_mask(h.shape, drop, rng) if drop > 0.0 else None
        hd = h * hmask if hmask is not None else h
        hu = np.concatenate([hd, batch.user], axis=1)
        z = dense_forward(self.params, hu, "head")[:, 0]
        return sigmoid(z), tape, hu, hmask

    def predict_proba(self, batch: Batch, train: bool = False, rng=None) -> np.ndarray:
        p, _, _, _ = self._forward(batch, train, rng)
        return p

    def loss(self, batch: Batch, dropout_seed: int = 0) -> float:
        rng = np.random.default_rng(dropout_seed) if self.dropout > 0.0 else None
        p, _, _, _ = self._forward(batch, self.dropout > 0.0, rng)
        loss, _ = bce_loss(p, batch.label)
        return loss + l2_penalty(self.params, self.l2)[0]

    def loss_and_grads(self, batch: Batch, dropout_seed: int = 0):
        rng = np.random.default_rng(dropout_seed) if self.dropout > 0.0 else None
        p, tape, hu, hmask = self._forward(batch, self.dropout > 0.0, rng)
        loss, _ = bce_loss(p, batch.label)
        dz = ((p - batch.label) / len(batch))[:, None]
        head_grads, dhu = dense_backward(self.params, hu, dz, "head")
        dh = dhu[:, : self.hidden_size]
        if hmask is not None:
            dh = dh * hmask
        seq_grads, _ = backward(tape, dh)
        grads = neural.zeros_like_params(self.params)
        neural.add_grads(grads, head_grads)
        neural.add_grads(grads, seq_grads)
        reg_loss, reg_grads = l2_penalty(self.params, self.l2)
        neural.add_grads(grads, reg_grads)
        return loss + reg_loss, grads


class BmsModel:
    """Recurrent fertility curve with per-type sex risks.

    f_d = sigmoid(dense(h_d)); r_t = sigmoid(rho_t); the output is
    bms_probability(f, r, s) with s derived from the example's sex slots.
    The user vector is not consumed: all structure flows through the days.
    """

    variant = "bms"

    def __init__(
        self,
        schema: FeatureSchema,
        hidden_size: int = 32,
        num_layers: int = 1,
        dropout: float = 0.0,
        l2: float = 0.0,
        seed: int = 0,
    ):
        self.schema = schema
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.dropout = float(dropout)
        self.l2 = float(l2)
        self.seed = seed
        self.params = neural.init_params(
            {
                "lstm": [
                    {
                        "prefix": "seq",
                        "input_size": schema.day_width,
                        "hidden_size": hidden_size,
                        "num_layers": num_layers,
                    }
                ],
                "dense": [{"name": "fhead", "fan_in": hidden_size, "fan_out": 1}],
                "raw": [{"name": "rho", "shape": [len(SEX_TYPES)], "value": -2.2}],
            },
            seed,
        )
        # start small: with ~24 active survival factors per cycle, neutral
        # r = f = 0.5 would put every initial prediction near 1
        self.params["fhead_b"][...] = -2.5

    def arch(self) -> dict:
        return {
            "variant": self.variant,
            "hidden_size": self.hidden_size,
            "num_layers": self.num_layers,
            "dropout": self.dropout,
            "l2": self.l2,
            "seed": self.seed,
        }

    def risks(self) -> dict[str, float]:
        r = sigmoid(self.params["rho"])
        return {t: float(r[i]) for i, t in enumerate(SEX_TYPES)}

    def _forward(self, batch: Batch, train: bool, rng):
        drop = self.dropout if (train and rng is not None) else 0.0
        _, tape = sequence_forward(self.params, batch.day, batch.mask, "seq", drop, rng)
        h_all = tape.top_hidden  # (B, 24, H)
        hmask = neural.dropout_mask(h_all.shape, drop, rng) if drop > 0.0 else None
        hd = h_all * hmask if hmask is not None else h_all
        f = sigmoid(dense_forward(self.params, hd, "fhead")[..., 0])  # (B, 24)
        r = sigmoid(self.params["rho"])
        s = sex_indicators(batch.day, batch.mask, self.schema)
        surv = np.clip(1.0 - r[None, None, :] * f[:, :, None], BMS_CLAMP, None)
        log_total = np.sum(s * np.log(surv), axis=(1, 2))
        p = -np.expm1(log_total)
        return p, tape, hd, hmask, f, r, s, surv, log_total

    def predict_proba(self, batch: Batch, train: bool = False, rng=None) -> np.ndarray:
        return self._forward(batch, train, rng)[0]

    def loss(self, batch: Batch, dropout_seed: int = 0) -> float:
        rng = np.random.default_rng(dropout_seed) if self.dropout > 0.0 else None
        p = self._forward(batch, self.dropout > 0.0, rng)[0]
        loss, _ = bce_loss(p, batch.label)
        return loss + l2_penalty(self.params, self.l2)[0]

    def loss_and_grads(self, batch: Batch, dropout_seed: int = 0):
        rng = np.random.default_rng(dropout_seed) if self.dropout > 0.0 else None
        p, tape, hd, hmask, f, r, s, surv, log_total = self._forward(
            batch, self.dropout > 0.0, rng
        )
        loss, dp = bce_loss(p, batch.label)
        # p = 1 - exp(L); dL_total = dp * (p - 1)
        dlog_total = dp * (p - 1.0)  # (B,)
        unclamped = (1.0 - r[None, None, :] * f[:, :, None]) > BMS_CLAMP
        common = dlog_total[:, None, None] * s / surv * unclamped  # d wrt (1 - r f) factor logs
        df = -(common * r[None, None, :]).sum(axis=2)  # (B, 24)
        dr = -(common * f[:, :, None]).sum(axis=(0, 1))  # (4,)
        drho = dr * r * (1.0 - r)
        dfz = (df * f * (1.0 - f))[..., None]  # through the sigmoid head
        fhead_grads, dhd = dense_backward(self.params, hd, dfz, "fhead")
        if hmask is not None:
            dhd = dhd * hmask
        seq_grads, _ = backward(tape, dhd)
        grads = neural.zeros_like_params(self.params)
        neural.add_grads(grads, fhead_grads)
        neural.add_grads(grads, seq_grads)
        grads["rho"] += drho
        reg_loss, reg_grads = l2_penalty(self.params, self.l2)
        neural.add_grads(grads, reg_grads)
        return loss + reg_loss, grads


class EmbeddingModel:
    """Dual-network model: a history encoder feeding a sequence classifier.

    The 180 pre-cycle days run through the history net without masking
    (a silent day is a real zero-input day); its final hidden state is the
    user embedding, appended to every day vector of the prediction net.
    """

    variant = "embedding"

    def __init__(
        self,
        schema: FeatureSchema,
        hidden_size: int = 32,
        num_layers: int = 1,
        embed_size: int = 16,
        dropout: float = 0.0,
        l2: float = 0.0,
        seed: int = 0,
    ):
        self.schema = schema
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.embed_size = embed_size
        self.dropout = float(dropout)
        self.l2 = float(l2)
        self.seed = seed
        self.params = neural.init_params(
            {
                "lstm": [
                    {
                        "prefix": "hist",
                        "input_size": schema.day_width,
                        "hidden_size": embed_size,
                        "num_layers": 1,
                    },
                    {
                        "prefix": "seq",
                        "input_size": schema.day_width + embed_size,
                        "hidden_size": hidden_size,
                        "num_layers": num_layers,
                    },
                ],
                "dense": [
                    {"name": "head", "fan_in": hidden_size + schema.user_width, "fan_out": 1}
                ],
            },
            seed,
        )

    def arch(self) -> dict:
        return {
            "variant": self.variant,
            "hidden_size": self.hidden_size,
            "num_layers": self.num_layers,
            "embed_size": self.embed_size,
            "dropout": self.dropout,
            "l2": self.l2,
            "seed": self.seed,
        }

    def encode_history(self, history: np.ndarray) -> np.ndarray:
        """User embedding: final hidden state of the history net, (B, E)."""
        e, _ = sequence_forward(self.params, np.asarray(history, dtype=float), None, "hist")
        return e

    def _forward(self, batch: Batch, train: bool, rng):
        if batch.history is None:
            raise ValueError("embedding model needs batch.history")
        e, hist_tape = sequence_forward(self.params, batch.history, None, "hist")
        B = len(batch)
        xcat = np.concatenate(
            [batch.day, np.broadcast_to(e[:, None, :], (B, WINDOW_DAYS, self.embed_size))],
            axis=2,
        )
        drop = self.dropout if (train and rng is not None) else 0.0
        h, tape = sequence_forward(self.params, xcat, batch.mask, "seq", drop, rng)
        hmask = neural.dropout_mask(h.shape, drop, rng) if drop > 0.0 else None
        hd = h * hmask if hmask is not None else h
        hu = np.concatenate([hd, batch.user], axis=1)
        z = dense_forward(self.params, hu, "head")[:, 0]
        return sigmoid(z), tape, hist_tape, hu, hmask

    def predict_proba(self, batch: Batch, train: bool = False, rng=None) -> np.ndarray:
        return self._forward(batch, train, rng)[0]

    def loss(self, batch: Batch, dropout_seed: int = 0) -> float:
        rng = np.random.default_rng(dropout_seed) if self.dropout > 0.0 else None
        p = self._forward(batch, self.dropout > 0.0, rng)[0]
        loss, _ = bce_loss(p, batch.label)
        return loss + l2_penalty(self.params, self.l2)[0]

    def loss_and_grads(self, batch: Batch, dropout_seed: int = 0):
        rng = np.random.default_rng(dropout_seed) if self.dropout > 0.0 else None
        p, tape, hist_tape, hu, hmask = self._forward(batch, self.dropout > 0.0, rng)
        loss, _ = bce_loss(p, batch.label)
        dz = ((p - batch.label) / len(batch))[:, None]
        head_grads, dhu = dense_backward(self.params, hu, dz, "head")
        dh = dhu[:, : self.hidden_size]
        if hmask is not None:
            dh = dh * hmask
        seq_grads, dxcat = backward(tape, dh)
        de = dxcat[:, :, self.schema.day_width :].sum(axis=1)  # embedding reused every day
        hist_grads, _ = backward(hist_tape, de)
        grads = neural.zeros_like_params(self.params)
        neural.add_grads(grads, head_grads)
        neural.add_grads(grads, seq_grads)
        neural.add_grads(grads, hist_grads)
        reg_loss, reg_grads = l2_penalty(self.params, self.l2)
        neural.add_grads(grads, reg_grads)
        return loss + reg_loss, grads


MODEL_VARIANTS = ("logistic", "lstm", "bms", "embedding")


def build_model(
    variant: str, schema: FeatureSchema, hyper: Mapping | None = None, seed: int = 0
):
    """Construct any model variant from a hyperparameter mapping."""
    hyper = dict(hyper or {})
    kwargs = {
        k: hyper[k]
        for k in ("hidden_size", "num_layers", "embed_size", "dropout", "l2")
        if k in hyper
    }
    if variant == "logistic":
        return LogisticModel(schema, l2=hyper.get("l2", 0.0), seed=seed)
    if variant == "lstm":
        return PlainLstmModel(schema, seed=seed, **kwargs)
    if variant == "bms":
        kwargs.pop("embed_size", None)
        return BmsModel(schema, seed=seed, **kwargs)
    if variant == "embedding":
        return EmbeddingModel(schema, seed=seed, **kwargs)
    raise ValueError(f"unknown model variant: {variant!r} (expected one of {MODEL_VARIANTS})")


def save_checkpoint(model, path, extra: Mapping | None = None) -> None:
    """JSON header (variant, architecture, schema) + flat parameter arrays."""
    header = {
        "kind": "checkpoint",
        "arch": model.arch(),
        "schema": json.loads(model.schema.to_json()),
    }
    if extra:
        header["extra"] = dict(extra)
    write_tensor_file(path, model.params, header)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint written by save_checkpoint."""
    header, arrays = read_tensor_file(path)
    if header.get("kind") != "checkpoint":
        raise ValueError(f"not a checkpoint file: {path}")
    schema = FeatureSchema.from_json(json.dumps(header["schema"]))
    arch = dict(header["arch"])
    variant = arch.pop("variant")
    seed = arch.pop("seed", 0)
    model = build_model(variant, schema, arch, seed)
    for name in model.params:
        model.params[name][...] = arrays[name].astype(float)
    return model
