"""Tiny double-precision neural network core.

Dense layers and vanilla (peephole-free) LSTM layers stacked sequentially,
mean-squared-error loss, backpropagation through time, Adam, and a flat
weight store with a per-weight trainable mask.

Sequence semantics of a layer stack:

* a dense layer applied to a ``(B, T, d)`` tensor acts per time step;
* an LSTM layer consumes ``(B, T, d)``; if it receives a ``(B, d)`` vector it
  repeats that vector for every step of the input sequence length;
* an LSTM layer emits its final hidden state ``(B, h)`` unless
  ``return_sequences`` is set, in which case it emits ``(B, T, h)``.

LSTM weights of one layer are stored as ``W (in, 4h)``, ``U (h, 4h)``,
``b (4h,)`` with gate blocks ordered input, forget, output, candidate.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._io import atomic_write_text
from .errors import ConfigError, DimensionError, NumericError, SchemaError

FORMAT_VERSION = 1
ACTIVATIONS = ("tanh", "linear", "sigmoid")


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, name):
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(a, name):
    """Derivative expressed through the activation output ``a``."""
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(a)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "linear"
    return_sequences: bool = False

    def __post_init__(self):
        if self.kind not in ("dense", "lstm"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if int(self.in_dim) < 1 or int(self.out_dim) < 1:
            raise ConfigError(f"layer dims must be >= 1, got in={self.in_dim} out={self.out_dim}")
        if self.kind == "dense" and self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        i, o = self.in_dim, self.out_dim
        if self.kind == "dense":
            return i * o + o
        return 4 * (i * o + o * o + o)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "in": self.in_dim, "out": self.out_dim}
        if self.kind == "dense":
            d["activation"] = self.activation
        else:
            d["return_sequences"] = self.return_sequences
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            in_dim=int(d["in"]),
            out_dim=int(d["out"]),
            activation=d.get("activation", "linear"),
            return_sequences=bool(d.get("return_sequences", False)),
        )


def dense(in_dim, out_dim, activation="linear") -> LayerSpec:
    return LayerSpec("dense", in_dim, out_dim, activation)


def lstm(in_dim, hidden, return_sequences=False) -> LayerSpec:
    return LayerSpec("lstm", in_dim, hidden, return_sequences=return_sequences)


def param_count(layers) -> int:
    """Total number of weights of a layer stack."""
    return sum(layer.n_params for layer in layers)


def layer_offsets(layers) -> list[int]:
    offsets = [0]
    for layer in layers:
        offsets.append(offsets[-1] + layer.n_params)
    return offsets


def unpack(layer: LayerSpec, flat: np.ndarray) -> dict:
    """Named views into one layer's slice of the flat weight store."""
    i, o = layer.in_dim, layer.out_dim
    if layer.kind == "dense":
        return {"W": flat[: i * o].reshape(i, o), "b": flat[i * o : i * o + o]}
    g = 4 * o
    return {
        "W": flat[: i * g].reshape(i, g),
        "U": flat[i * g : i * g + o * g].reshape(o, g),
        "b": flat[i * g + o * g : i * g + o * g + g],
    }


@dataclass
class ModelBundle:
    layers: tuple
    weights: np.ndarray
    trainable_mask: np.ndarray
    seed: int = 0
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.trainable_mask = np.asarray(self.trainable_mask, dtype=bool)
        n = param_count(self.layers)
        if self.weights.shape != (n,):
            raise SchemaError(f"weight array has length {self.weights.size}, layers need {n}")
        if self.trainable_mask.shape != (n,):
            raise SchemaError(f"mask has length {self.trainable_mask.size}, layers need {n}")

    @property
    def total_weights(self) -> int:
        return int(self.weights.size)

    @property
    def trainable_weights(self) -> int:
        return int(self.trainable_mask.sum())

    @property
    def offsets(self) -> list[int]:
        return layer_offsets(self.layers)

    def params(self, index: int) -> dict:
        off = self.offsets
        return unpack(self.layers[index], self.weights[off[index] : off[index + 1]])

    def lstm_indices(self) -> list[int]:
        return [k for k, layer in enumerate(self.layers) if layer.kind == "lstm"]

    @property
    def is_recurrent(self) -> bool:
        return self.layers[0].kind == "lstm"

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            self.layers,
            self.weights.copy(),
            self.trainable_mask.copy(),
            self.seed,
            json.loads(json.dumps(self.train_meta)),
        )


def init_weights(layers, rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot for dense, uniform +-sqrt(1/h) for LSTM, forget bias 1."""
    parts = []
    for layer in layers:
        flat = np.zeros(layer.n_params)
        p = unpack(layer, flat)
        i, o = layer.in_dim, layer.out_dim
        if layer.kind == "dense":
            lim = np.sqrt(6.0 / (i + o))
            p["W"][...] = rng.uniform(-lim, lim, size=(i, o))
        else:
            lim = np.sqrt(1.0 / o)
            p["W"][...] = rng.uniform(-lim, lim, size=(i, 4 * o))
            p["U"][...] = rng.uniform(-lim, lim, size=(o, 4 * o))
            p["b"][o : 2 * o] = 1.0
        parts.append(flat)
    return np.concatenate(parts) if parts else np.zeros(0)


def init_bundle(layers, seed: int) -> ModelBundle:
    layers = tuple(layers)
    _check_chain(layers)
    rng = np.random.default_rng(seed)
    weights = init_weights(layers, rng)
    return ModelBundle(layers, weights, np.ones(weights.size, dtype=bool), int(seed))


def _check_chain(layers):
    if not layers:
        raise ConfigError("a model needs at least one layer")
    for a, b in zip(layers, layers[1:]):
        if a.out_dim != b.in_dim:
            raise ConfigError(f"layer output {a.out_dim} does not feed input {b.in_dim}")


# ---------------------------------------------------------------------------
# LSTM cell


class LstmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


def lstm_step(x, state: LstmState, params: dict) -> LstmState:
    """One LSTM update; works for a single vector or a ``(B, d)`` batch."""
    W, U, b = params["W"], params["U"], params["b"]
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[0] or state.h.shape[-1] != U.shape[0]:
        raise DimensionError(
            f"lstm_step expects input {W.shape[0]} / hidden {U.shape[0]}, "
            f"got {x.shape[-1]} / {state.h.shape[-1]}"
        )
    n = U.shape[0]
    z = x @ W + state.h @ U + b
    i = sigmoid(z[..., :n])
    f = sigmoid(z[..., n : 2 * n])
    o = sigmoid(z[..., 2 * n : 3 * n])
    g = np.tanh(z[..., 3 * n :])
    c = f * state.c + i * g
    return LstmState(o * np.tanh(c), c)


def _lstm_forward(x_seq, p, hidden):
    B, T, _ = x_seq.shape
    hs = np.zeros((B, T + 1, hidden))
    cs = np.zeros((B, T + 1, hidden))
    gates = np.zeros((B, T, 4 * hidden))
    tanh_c = np.zeros((B, T, hidden))
    # input projection for every step at once
    xw = x_seq @ p["W"] + p["b"]
    n = hidden
    for t in range(T):
        z = xw[:, t] + hs[:, t] @ p["U"]
        a = np.empty_like(z)
        a[:, : 3 * n] = sigmoid(z[:, : 3 * n])
        a[:, 3 * n :] = np.tanh(z[:, 3 * n :])
        c = a[:, n : 2 * n] * cs[:, t] + a[:, :n] * a[:, 3 * n :]
        tc = np.tanh(c)
        cs[:, t + 1] = c
        tanh_c[:, t] = tc
        hs[:, t + 1] = a[:, 2 * n : 3 * n] * tc
        gates[:, t] = a
    return hs, cs, gates, tanh_c


def _lstm_backward(dh_seq, x_seq, p, cache, hidden):
    hs, cs, gates, tanh_c = cache
    B, T, _ = x_seq.shape
    n = hidden
    dz_all = np.zeros((B, T, 4 * n))
    dh_next = np.zeros((B, n))
    dc_next = np.zeros((B, n))
    U_T = p["U"].T
    for t in range(T - 1, -1, -1):
        a = gates[:, t]
        i, f, o, g = a[:, :n], a[:, n : 2 * n], a[:, 2 * n : 3 * n], a[:, 3 * n :]
        dh = dh_seq[:, t] + dh_next
        tc = tanh_c[:, t]
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_all[:, t]
        dz[:, :n] = dc * g * i * (1.0 - i)
        dz[:, n : 2 * n] = dc * cs[:, t] * f * (1.0 - f)
        dz[:, 2 * n : 3 * n] = dh * tc * o * (1.0 - o)
        dz[:, 3 * n :] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dz @ U_T
    flat_dz = dz_all.reshape(B * T, 4 * n)
    dW = x_seq.reshape(B * T, -1).T @ flat_dz
    dU = hs[:, :T].reshape(B * T, n).T @ flat_dz
    db = flat_dz.sum(axis=0)
    dx = dz_all @ p["W"].T
    return dx, dW, dU, db


# ---------------------------------------------------------------------------
# whole-model passes


def _prepare_input(bundle: ModelBundle, x):
    x = np.asarray(x, dtype=np.float64)
    first = bundle.layers[0]
    single = x.ndim == (2 if first.kind == "lstm" else 1)
    if single:
        x = x[None]
    allowed = (3,) if first.kind == "lstm" else (2, 3)
    if x.ndim not in allowed:
        raise DimensionError(f"input of rank {x.ndim} does not fit a {first.kind} first layer")
    if x.shape[-1] != first.in_dim:
        raise DimensionError(f"input width {x.shape[-1]} != first layer input {first.in_dim}")
    if x.shape[0] == 0:
        raise DimensionError("empty batch")
    return x, single


def _run(bundle: ModelBundle, x):
    seq_len = x.shape[1] if x.ndim == 3 else None
    caches = []
    a = x
    for k, layer in enumerate(bundle.layers):
        p = bundle.params(k)
        if layer.kind == "dense":
            out = _activate(a @ p["W"] + p["b"], layer.activation)
            caches.append((a, out))
        else:
            repeated = a.ndim == 2
            if repeated:
                if seq_len is None:
                    raise DimensionError("an lstm layer fed by a vector needs a sequence input")
                x_seq = np.repeat(a[:, None, :], seq_len, axis=1)
            else:
                x_seq = a
            cache = _lstm_forward(x_seq, p, layer.out_dim)
            hs = cache[0]
            out = hs[:, 1:].copy() if layer.return_sequences else hs[:, -1].copy()
            caches.append((x_seq, repeated, cache))
        a = out
    return a, caches


def forward(bundle: ModelBundle, x) -> np.ndarray:
    """Network output for a batch (or a single row / single sequence)."""
    x, single = _prepare_input(bundle, x)
    out, _ = _run(bundle, x)
    return out[0] if single else out


def hidden_states(bundle: ModelBundle, x) -> list[np.ndarray]:
    """Per-step hidden states ``(B, T, h)`` of every LSTM layer, in layer order."""
    x, single = _prepare_input(bundle, x)
    _, caches = _run(bundle, x)
    states = []
    for layer, cache in zip(bundle.layers, caches):
        if layer.kind == "lstm":
            hs = cache[2][0][:, 1:]
            states.append(hs[0] if single else hs)
    return states


def mse(pred, target) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))


def loss_and_gradient(bundle: ModelBundle, x, y):
    """MSE (mean over batch and output dims) and its gradient w.r.t. all weights.

    Gradient entries of frozen weights are zero.
    """
    x, single = _prepare_input(bundle, x)
    y = np.asarray(y, dtype=np.float64)
    if single:
        y = y[None]
    out, caches = _run(bundle, x)
    if y.shape != out.shape:
        raise DimensionError(f"target shape {y.shape} != output shape {out.shape}")
    diff = out - y
    loss = float(np.mean(diff * diff))
    grad = np.zeros_like(bundle.weights)
    if not bundle.trainable_mask.any():
        return loss, grad

    off = bundle.offsets
    d = 2.0 * diff / diff.size
    for k in range(len(bundle.layers) - 1, -1, -1):
        layer = bundle.layers[k]
        p = bundle.params(k)
        g = unpack(layer, grad[off[k] : off[k + 1]])
        if layer.kind == "dense":
            a_in, a_out = caches[k]
            dz = d * _activation_grad(a_out, layer.activation)
            g["W"][...] = a_in.reshape(-1, layer.in_dim).T @ dz.reshape(-1, layer.out_dim)
            g["b"][...] = dz.reshape(-1, layer.out_dim).sum(axis=0)
            d = dz @ p["W"].T
        else:
            x_seq, repeated, cache = caches[k]
            B, T, _ = x_seq.shape
            if layer.return_sequences:
                dh_seq = d
            else:
                dh_seq = np.zeros((B, T, layer.out_dim))
                dh_seq[:, -1] = d
            dx, dW, dU, db = _lstm_backward(dh_seq, x_seq, p, cache, layer.out_dim)
            g["W"][...] = dW
            g["U"][...] = dU
            g["b"][...] = db
            d = dx.sum(axis=1) if repeated else dx
    grad[~bundle.trainable_mask] = 0.0
    return loss, grad


def backward(bundle: ModelBundle, x, y) -> np.ndarray:
    return loss_and_gradient(bundle, x, y)[1]


def loss(bundle: ModelBundle, x, y) -> float:
    return mse(forward(bundle, x), y)


def gradient_check(bundle: ModelBundle, x, y, step: float = 1e-5, floor: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per weight is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps weights whose true gradient is ~0 from dominating.
    """
    analytic = backward(bundle, x, y)
    probe = bundle.copy()
    numeric = np.zeros_like(analytic)
    for j in np.flatnonzero(bundle.trainable_mask):
        w0 = probe.weights[j]
        probe.weights[j] = w0 + step
        lp = loss(probe, x, y)
        probe.weights[j] = w0 - step
        lm = loss(probe, x, y)
        probe.weights[j] = w0
        numeric[j] = (lp - lm) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    weights,
    gradients,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    mask=None,
) -> np.ndarray:
    """Return updated weights; ``state`` is advanced in place.

    Entries where ``mask`` is False are returned bit-identical.
    """
    weights = np.asarray(weights, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if weights.shape != gradients.shape or state.m.shape != weights.shape:
        raise DimensionError("weights, gradients and optimizer state must share a shape")
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    bad = np.flatnonzero(~np.isfinite(gradients))
    if bad.size:
        raise NumericError(f"non-finite gradient at weight index {int(bad[0])}")
    mask = np.ones(weights.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    g = np.where(mask, gradients, 0.0)
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    return np.where(mask, weights - update, weights)


# ---------------------------------------------------------------------------
# persistence


def _checksum(weights: np.ndarray, mask: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(weights, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    return h.hexdigest()


def bundle_to_dict(bundle: ModelBundle) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layers": [layer.to_dict() for layer in bundle.layers],
        "weights": bundle.weights.tolist(),
        "trainable_mask": [bool(v) for v in bundle.trainable_mask],
        "seed": int(bundle.seed),
        "train_meta": bundle.train_meta,
        "checksum": _checksum(bundle.weights, bundle.trainable_mask),
    }


def bundle_from_dict(doc: dict) -> ModelBundle:
    if doc.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported model format_version {doc.get('format_version')!r}")
    try:
        layers = tuple(LayerSpec.from_dict(d) for d in doc["layers"])
        weights = np.asarray(doc["weights"], dtype=np.float64)
        mask = np.asarray(doc["trainable_mask"], dtype=bool)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model document: {exc}") from exc
    need = param_count(layers)
    if weights.size != need or mask.size != need:
        raise SchemaError(
            f"weight array length {weights.size} / mask length {mask.size} != param count {need}"
        )
    if "checksum" in doc and doc["checksum"] != _checksum(weights, mask):
        raise SchemaError("model checksum mismatch")
    return ModelBundle(layers, weights, mask, int(doc.get("seed", 0)), doc.get("train_meta", {}))


def save_model(bundle: ModelBundle, path):
    return atomic_write_text(path, json.dumps(bundle_to_dict(bundle)) + "\n")


def load_model(path) -> ModelBundle:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return bundle_from_dict(doc)
