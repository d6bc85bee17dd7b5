"""From-scratch recurrent primitives in double precision numpy.

Provides a gated recurrent (LSTM) stack with masking, dense layers,
dropout, exact reverse-mode gradients through sequences, deterministic
initialization, and a finite-difference gradient checker.  Parameters live
in a plain ordered dict of named float64 arrays; gate blocks are stored
stacked in the order input, forget, output, candidate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

Params = dict[str, np.ndarray]

GATES = ("input", "forget", "output", "candidate")


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dropout(
    vector: np.ndarray, rate: float, mode: str = "train", rng: np.random.Generator | None = None
) -> np.ndarray:
    """Zero entries with probability rate and rescale survivors by 1/(1-rate).

    In eval mode (or at rate 0) this is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1): {rate}")
    if mode == "eval" or rate == 0.0:
        return np.asarray(vector, dtype=float)
    if mode != "train":
        raise ValueError(f"unknown dropout mode: {mode!r}")
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    return np.asarray(vector, dtype=float) * dropout_mask(np.shape(vector), rate, rng)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Pre-scaled keep mask: 1/(1-rate) where kept, 0 where dropped."""
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_lstm_params(
    input_size: int,
    hidden_size: int,
    num_layers: int,
    rng: np.random.Generator,
    prefix: str = "lstm",
) -> Params:
    """Uniform(-s, s) with s = 1/sqrt(fan_in); forget-gate biases start at 1."""
    params: Params = {}
    for layer in range(num_layers):
        d = input_size if layer == 0 else hidden_size
        sx, sh = 1.0 / np.sqrt(d), 1.0 / np.sqrt(hidden_size)
        params[f"{prefix}{layer}_Wx"] = rng.uniform(-sx, sx, size=(d, 4 * hidden_size))
        params[f"{prefix}{layer}_Wh"] = rng.uniform(-sh, sh, size=(hidden_size, 4 * hidden_size))
        b = np.zeros(4 * hidden_size)
        b[hidden_size : 2 * hidden_size] = 1.0
        params[f"{prefix}{layer}_b"] = b
    return params


def init_dense_params(
    fan_in: int, fan_out: int, rng: np.random.Generator, name: str = "dense"
) -> Params:
    s = 1.0 / np.sqrt(fan_in)
    return {f"{name}_W": rng.uniform(-s, s, size=(fan_in, fan_out)), f"{name}_b": np.zeros(fan_out)}


def init_params(arch: Mapping, seed: int) -> Params:
    """Build a parameter dict from an architecture description.

    arch keys: "lstm" -> list of {prefix, input_size, hidden_size,
    num_layers}; "dense" -> list of {name, fan_in, fan_out}; "raw" -> list
    of {name, shape, value|scale}.  Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    params: Params = {}
    for spec in arch.get("lstm", []):
        params.update(
            init_lstm_params(
                spec["input_size"], spec["hidden_size"], spec["num_layers"], rng, spec["prefix"]
            )
        )
    for spec in arch.get("dense", []):
        params.update(init_dense_params(spec["fan_in"], spec["fan_out"], rng, spec["name"]))
    for spec in arch.get("raw", []):
        if "value" in spec:
            params[spec["name"]] = np.full(spec["shape"], float(spec["value"]))
        else:
            s = float(spec.get("scale", 0.1))
            params[spec["name"]] = rng.uniform(-s, s, size=spec["shape"])
    return params


# ---------------------------------------------------------------------------
# LSTM cell and sequence forward/backward
# ---------------------------------------------------------------------------

def lstm_cell(
    Wx: np.ndarray,
    Wh: np.ndarray,
    b: np.ndarray,
    x: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One recurrence step: gates from (x, h_prev), then state update.

    c = f*c_prev + i*g and h = o*tanh(c), with i, f, o logistic and g tanh.
    """
    hidden = Wh.shape[0]
    if x.shape[-1] != Wx.shape[0] or h_prev.shape[-1] != hidden or c_prev.shape[-1] != hidden:
        raise ValueError("lstm_cell: input/state width does not match parameters")
    z = x @ Wx + h_prev @ Wh + b
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden : 2 * hidden])
    o = sigmoid(z[..., 2 * hidden : 3 * hidden])
    g = np.tanh(z[..., 3 * hidden :])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


@dataclass
class Tape:
    """Forward intermediates of one sequence pass, consumed once by backward."""

    prefix: str
    hidden_size: int
    num_layers: int
    mask: np.ndarray  # (B, T)
    inputs: list[np.ndarray]  # per layer, post-dropout input (B, T, D_l)
    gates: list[np.ndarray]  # per layer, activated i|f|o|g (B, T, 4H)
    c_new: list[np.ndarray]  # per layer, pre-mask cell states (B, T, H)
    h_seq: list[np.ndarray]  # per layer, post-mask hidden states (B, T, H)
    c_seq: list[np.ndarray]  # per layer, post-mask cell states (B, T, H)
    drop_masks: list[np.ndarray | None] = field(default_factory=list)
    consumed: bool = False
    _params: Params = field(default_factory=dict, repr=False)

    @property
    def top_hidden(self) -> np.ndarray:
        """All post-mask top-layer hidden states (B, T, H)."""
        return self.h_seq[-1]


def sequence_forward(
    params: Params,
    x: np.ndarray,
    mask: np.ndarray | None = None,
    prefix: str = "lstm",
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, Tape]:
    """Run the LSTM stack over a (B, T, D) batch with optional day masking.

    Masked timesteps pass hidden and cell state through unchanged, which is
    distinct from feeding an all-zero input.  Inter-layer dropout applies
    in training mode only (rng given and rate > 0).  Returns the final
    top-layer hidden state and the tape for backward.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    B, T, _ = x.shape
    mask = np.ones((B, T)) if mask is None else np.asarray(mask, dtype=float).reshape(B, T)
    num_layers = 0
    while f"{prefix}{num_layers}_Wx" in params:
        num_layers += 1
    if num_layers == 0:
        raise ValueError(f"no parameters with prefix {prefix!r}")
    hidden = params[f"{prefix}0_Wh"].shape[0]

    tape = Tape(
        prefix=prefix, hidden_size=hidden, num_layers=num_layers, mask=mask,
        inputs=[], gates=[], c_new=[], h_seq=[], c_seq=[],
    )
    layer_in = x
    for layer in range(num_layers):
        Wx = params[f"{prefix}{layer}_Wx"]
        Wh = params[f"{prefix}{layer}_Wh"]
        b = params[f"{prefix}{layer}_b"]
        if layer_in.shape[-1] != Wx.shape[0]:
            raise ValueError(
                f"layer {layer} input width {layer_in.shape[-1]} != {Wx.shape[0]}"
            )
        drop = None
        if layer > 0 and dropout_rate > 0.0 and rng is not None:
            drop = dropout_mask(layer_in.shape, dropout_rate, rng)
            layer_in = layer_in * drop
        tape.drop_masks.append(drop)
        tape.inputs.append(layer_in)

        zx = layer_in @ Wx + b  # (B, T, 4H); recurrent term added per step
        gates = np.empty((B, T, 4 * hidden))
        c_new = np.empty((B, T, hidden))
        h_seq = np.empty((B, T, hidden))
        c_seq = np.empty((B, T, hidden))
        h = np.zeros((B, hidden))
        c = np.zeros((B, hidden))
        for t in range(T):
            z = zx[:, t] + h @ Wh
            i = sigmoid(z[:, :hidden])
            f = sigmoid(z[:, hidden : 2 * hidden])
            o = sigmoid(z[:, 2 * hidden : 3 * hidden])
            g = np.tanh(z[:, 3 * hidden :])
            cn = f * c + i * g
            hn = o * np.tanh(cn)
            m = mask[:, t : t + 1]
            h = m * hn + (1.0 - m) * h
            c = m * cn + (1.0 - m) * c
            gates[:, t, :hidden] = i
            gates[:, t, hidden : 2 * hidden] = f
            gates[:, t, 2 * hidden : 3 * hidden] = o
            gates[:, t, 3 * hidden :] = g
            c_new[:, t] = cn
            h_seq[:, t] = h
            c_seq[:, t] = c
        tape.gates.append(gates)
        tape.c_new.append(c_new)
        tape.h_seq.append(h_seq)
        tape.c_seq.append(c_seq)
        layer_in = h_seq
    tape._params = params  # backward needs the weight matrices
    return tape.h_seq[-1][:, -1], tape


def backward(tape: Tape, output_gradient: np.ndarray) -> tuple[Params, np.ndarray]:
    """Exact gradients of the recorded pass.

    output_gradient is either (B, H), taken as the gradient on the final
    top-layer hidden state, or (B, T, H) with per-timestep gradients on all
    top-layer hidden states.  Returns (parameter gradients, gradient on
    the original input sequence).  A tape can be consumed only once.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a backward pass")
    tape.consumed = True
    H = tape.hidden_size
    B, T = tape.mask.shape
    out_g = np.asarray(output_gradient, dtype=float)
    if out_g.shape == (B, H):
        dH_top = np.zeros((B, T, H))
        dH_top[:, -1] = out_g
    elif out_g.shape == (B, T, H):
        dH_top = out_g
    else:
        raise ValueError(f"output_gradient shape {out_g.shape} matches neither final nor full form")

    grads: Params = {}
    d_layer_out = dH_top
    dx = np.empty(0)
    for layer in reversed(range(tape.num_layers)):
        X = tape.inputs[layer]
        gates = tape.gates[layer]
        c_new = tape.c_new[layer]
        h_seq = tape.h_seq[layer]
        c_seq = tape.c_seq[layer]
        name = f"{tape.prefix}{layer}"
        Wx = tape._params[f"{name}_Wx"]
        Wh = tape._params[f"{name}_Wh"]

        dZ = np.zeros((B, T, 4 * H))
        dWh = np.zeros_like(Wh)
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in reversed(range(T)):
            dh = dh + d_layer_out[:, t]
            m = tape.mask[:, t : t + 1]
            i = gates[:, t, :H]
            f = gates[:, t, H : 2 * H]
            o = gates[:, t, 2 * H : 3 * H]
            g = gates[:, t, 3 * H :]
            c_prev = c_seq[:, t - 1] if t > 0 else np.zeros((B, H))
            h_prev = h_seq[:, t - 1] if t > 0 else np.zeros((B, H))
            tc = np.tanh(c_new[:, t])

            dhn = m * dh
            dcn = m * dc
            dh_pass = (1.0 - m) * dh
            dc_pass = (1.0 - m) * dc
            do = dhn * tc
            dcn = dcn + dhn * o * (1.0 - tc * tc)
            df = dcn * c_prev
            di = dcn * g
            dg = dcn * i
            dc = dc_pass + dcn * f
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1
            )
            dZ[:, t] = dz
            dWh += h_prev.T @ dz
            dh = dh_pass + dz @ Wh.T
        dX = dZ @ Wx.T
        grads[f"{name}_Wx"] = X.reshape(B * T, -1).T @ dZ.reshape(B * T, 4 * H)
        grads[f"{name}_Wh"] = dWh
        grads[f"{name}_b"] = dZ.sum(axis=(0, 1))
        drop = tape.drop_masks[layer]
        if drop is not None:
            dX = dX * drop
        d_layer_out = dX
        dx = dX
    return grads, dx


def dense_forward(params: Params, x: np.ndarray, name: str = "dense") -> np.ndarray:
    return x @ params[f"{name}_W"] + params[f"{name}_b"]


def dense_backward(
    params: Params, x: np.ndarray, dz: np.ndarray, name: str = "dense"
) -> tuple[Params, np.ndarray]:
    """Gradients of z = x @ W + b given dz; x may be (..., fan_in)."""
    W = params[f"{name}_W"]
    x2 = x.reshape(-1, W.shape[0])
    dz2 = dz.reshape(-1, W.shape[1])
    grads = {f"{name}_W": x2.T @ dz2, f"{name}_b": dz2.sum(axis=0)}
    return grads, (dz2 @ W.T).reshape(x.shape)


# ---------------------------------------------------------------------------
# Parameter-dict utilities
# ---------------------------------------------------------------------------

def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_grads(total: Params, part: Mapping[str, np.ndarray], scale: float = 1.0) -> None:
    """In-place total[k] += scale * part[k] for the keys present in part."""
    for k, v in part.items():
        total[k] += scale * v


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in params]) if params else np.empty(0)


def set_flat_params(params: Params, vec: np.ndarray) -> None:
    off = 0
    for k in params:
        n = params[k].size
        params[k][...] = vec[off : off + n].reshape(params[k].shape)
        off += n
    if off != vec.size:
        raise ValueError(f"flat vector length {vec.size} != parameter count {off}")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    passed: bool
    worst_param: str = ""
    worst_index: int = -1

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: max rel error {self.max_rel_error:.3e} over {self.n_checked} "
            f"coordinates (tolerance {self.tolerance:.1e}, worst {self.worst_param}[{self.worst_index}])"
        )


def grad_check(
    model,
    batch,
    tolerance: float,
    n_coords: int = 200,
    seed: int = 0,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    The model must expose .params and .loss_and_grads(batch); a plain
    .loss(batch) is used for the probes when available.  A random subset
    of at least n_coords coordinates (all, if fewer exist) is probed; the
    error measure is |analytic - numeric| scaled by
    max(1, |analytic|, |numeric|).
    """
    rng = np.random.default_rng(seed)
    loss_fn: Callable = getattr(model, "loss", None) or (lambda b: model.loss_and_grads(b)[0])
    _, grads = model.loss_and_grads(batch)
    names = list(model.params)
    sizes = np.array([model.params[k].size for k in names])
    total = int(sizes.sum())
    picked = np.arange(total) if total <= n_coords else np.sort(
        rng.choice(total, size=n_coords, replace=False)
    )
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    report = GradCheckReport(0.0, len(picked), tolerance, True)
    for flat_idx in picked:
        pi = int(np.searchsorted(bounds, flat_idx, side="right") - 1)
        name = names[pi]
        local = int(flat_idx - bounds[pi])
        arr = model.params[name].ravel()
        orig = arr[local]
        arr[local] = orig + step
        loss_plus = loss_fn(batch)
        arr[local] = orig - step
        loss_minus = loss_fn(batch)
        arr[local] = orig
        numeric = (loss_plus - loss_minus) / (2.0 * step)
        analytic = grads[name].ravel()[local]
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        if err > report.max_rel_error:
            report.max_rel_error = err
            report.worst_param = name
            report.worst_index = local
    report.passed = report.max_rel_error <= tolerance
    return report
