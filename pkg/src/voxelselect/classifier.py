"""Per-voxel foreground classifier: a small fully-connected network
(two hidden layers of 128, ReLU, sigmoid output) trained on lifted
scribble voxels with binary cross-entropy and Adam.

Pure numpy, float64. Training holds out a validation fraction to pick
the epoch count, then retrains on all samples for that many epochs.
Per-feature standardization is computed from the samples and stored in
the model, so callers always pass raw features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

HIDDEN_WIDTHS = (128, 128)


class ClassifierError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 1024
    val_fraction: float = 0.1
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ClassifierError("learning rate must be positive")
        if not (0 < self.val_fraction < 1):
            raise ClassifierError("validation fraction must be in (0, 1)")


@dataclass
class MlpModel:
    weights: list          # per layer, (fan_in, fan_out) float64
    biases: list           # per layer, (fan_out,) float64
    mu: np.ndarray         # feature standardization mean, (C,)
    sd: np.ndarray         # feature standardization scale, (C,)
    seed: int = 0

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]


def init_model(C: int, seed: int = 0, hidden=HIDDEN_WIDTHS) -> MlpModel:
    """Fan-in-scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    zero biases; bit-reproducible for a fixed seed."""
    if C < 1:
        raise ClassifierError("need at least one input feature")
    rng = np.random.default_rng(seed)
    dims = [C] + list(hidden) + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, np.zeros(C), np.ones(C), seed)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(model, X):
    """Returns (logits, activations list) for standardized input X."""
    acts = [X]
    h = X
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        if i < len(model.weights) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            return z[:, 0], acts
    raise AssertionError("unreachable")


def _standardize(model, X):
    return (X - model.mu) / model.sd


def bce_from_logits(logits, y):
    """Mean binary cross-entropy, numerically stable."""
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def loss_and_grads(model: MlpModel, X: np.ndarray, y: np.ndarray):
    """BCE loss and analytic gradients for pre-standardized X.

    Returns (loss, [dW...], [db...]) matching model.weights order.
    """
    logits, acts = _forward(model, X)
    B = X.shape[0]
    loss = bce_from_logits(logits, y)
    delta = ((_sigmoid(logits) - y) / B)[:, None]   # dL/dz_out
    dWs = [None] * len(model.weights)
    dbs = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        dWs[i] = acts[i].T @ delta
        dbs[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return loss, dWs, dbs


def _adam_step(params, grads, m, v, t, cfg):
    b1, b2 = cfg.beta1, cfg.beta2
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= b1
        mi += (1 - b1) * g
        vi *= b2
        vi += (1 - b2) * g * g
        mhat = mi / (1 - b1 ** t)
        vhat = vi / (1 - b2 ** t)
        p -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


def _fit(model, X, y, cfg, epochs, rng, X_val=None, y_val=None):
    """In-place Adam training; returns (train_history, val_history)."""
    n = X.shape[0]
    params = model.weights + model.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    t = 0
    hist, val_hist = [], []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, dWs, dbs = loss_and_grads(model, X[idx], y[idx])
            t += 1
            _adam_step(params, dWs + dbs, m, v, t, cfg)
        logits, _ = _forward(model, X)
        hist.append(bce_from_logits(logits, y))
        if X_val is not None:
            logits_v, _ = _forward(model, X_val)
            val_hist.append(bce_from_logits(logits_v, y_val))
    return hist, val_hist


def train(model: MlpModel, X: np.ndarray, y: np.ndarray,
          cfg: TrainConfig | None = None):
    """Train on labeled samples; returns (trained model, history dict).

    Phase 1 holds out cfg.val_fraction of the samples to select the
    epoch count (best validation BCE, early stop after cfg.patience
    epochs without improvement); phase 2 reinitializes from the same
    seed and trains on all samples for the selected count.
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ClassifierError("X must be (n, C) with matching labels")
    if X.shape[1] != model.input_width:
        raise ClassifierError(
            f"feature width {X.shape[1]} != model input {model.input_width}")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ClassifierError("need samples of both classes to train")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    Xs = (X - mu) / sd

    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    n_val = max(1, int(round(n * cfg.val_fraction)))
    perm = rng.permutation(n)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if len(np.unique(y[tr_idx])) < 2:
        # tiny sets: skip selection, train on everything for all epochs
        best_epochs = cfg.epochs
        val_hist = []
    else:
        probe = MlpModel([w.copy() for w in model.weights],
                         [b.copy() for b in model.biases],
                         np.zeros(model.input_width),
                         np.ones(model.input_width), model.seed)
        sel_rng = np.random.default_rng(cfg.seed + 1)
        _, val_hist = _fit(probe, Xs[tr_idx], y[tr_idx], cfg, cfg.epochs,
                           sel_rng, Xs[val_idx], y[val_idx])
        best = int(np.argmin(val_hist))
        # honor patience: training would have stopped once no epoch beat
        # the best within the window
        stop = len(val_hist)
        for e in range(len(val_hist)):
            if e - int(np.argmin(val_hist[:e + 1])) >= cfg.patience:
                stop = e + 1
                break
        best_epochs = int(np.argmin(val_hist[:stop])) + 1
        val_hist = val_hist[:stop]

    out = MlpModel([w.copy() for w in model.weights],
                   [b.copy() for b in model.biases], mu, sd, model.seed)
    fit_rng = np.random.default_rng(cfg.seed + 1)
    hist, _ = _fit(out, Xs, y, cfg, best_epochs, fit_rng)
    history = {"train": hist, "val": val_hist, "epochs": best_epochs}
    return out, history


def predict(model: MlpModel, v: np.ndarray) -> np.ndarray:
    """Foreground probability in (0, 1) for (C,) or (n, C) raw features."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    X = v[None, :] if single else v
    if X.shape[1] != model.input_width:
        raise ClassifierError(
            f"feature width {X.shape[1]} != model input {model.input_width}")
    logits, _ = _forward(model, _standardize(model, X))
    p = np.clip(_sigmoid(logits), 1e-15, 1.0 - 1e-15)
    return float(p[0]) if single else p


def predict_volume(model: MlpModel, fv) -> np.ndarray:
    """Probability volume (D, H, W) from a FeatureVolume."""
    if fv.channels != model.input_width:
        raise ClassifierError(
            f"feature width {fv.channels} != model input {model.input_width}")
    flat = fv.flat().astype(np.float64)
    out = np.empty(flat.shape[0])
    step = 65536
    for i in range(0, flat.shape[0], step):
        out[i:i + step] = predict(model, flat[i:i + step])
    return out.reshape(fv.values.shape[:3])


# -- checkpoint format -------------------------------------------------------
#
# Little-endian: magic 8s b"MLPCKPT1", version u32, seed i64, n_dims u32,
# dims u32 each, mu/sd float64 vectors (C each), then per layer W then b
# as float32, then a u32-length UTF-8 config echo string.

_CK_MAGIC = b"MLPCKPT1"


def save_model(path, model: MlpModel, config_echo: str = "") -> None:
    dims = model.layer_widths
    with open(path, "wb") as f:
        f.write(struct.pack("<8sIqI", _CK_MAGIC, 1, model.seed, len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        f.write(model.mu.astype("<f8").tobytes())
        f.write(model.sd.astype("<f8").tobytes())
        for W, b in zip(model.weights, model.biases):
            f.write(W.astype("<f4").tobytes())
            f.write(b.astype("<f4").tobytes())
        echo = config_echo.encode("utf-8")
        f.write(struct.pack("<I", len(echo)) + echo)


def load_model(path):
    """Returns (model, config_echo). Weights round through float32."""
    with open(path, "rb") as f:
        data = f.read()
    head = struct.Struct("<8sIqI")
    if len(data) < head.size or data[:8] != _CK_MAGIC:
        raise ClassifierError(f"{path}: not a model checkpoint")
    _, version, seed, n_dims = head.unpack_from(data, 0)
    if version != 1:
        raise ClassifierError(f"{path}: unsupported version {version}")
    off = head.size
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    C = dims[0]
    mu = np.frombuffer(data, "<f8", C, off).copy()
    off += 8 * C
    sd = np.frombuffer(data, "<f8", C, off).copy()
    off += 8 * C
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = np.frombuffer(data, "<f4", fan_in * fan_out, off)
        off += 4 * fan_in * fan_out
        b = np.frombuffer(data, "<f4", fan_out, off)
        off += 4 * fan_out
        weights.append(W.reshape(fan_in, fan_out).astype(np.float64))
        biases.append(b.astype(np.float64))
    (echo_len,) = struct.unpack_from("<I", data, off)
    off += 4
    echo = data[off:off + echo_len].decode("utf-8")
    return MlpModel(weights, biases, mu, sd, seed), echo
