"""Eddy-viscosity coefficient map g = f(a).

A small fully-connected network (ReLU hidden layers, identity output) trained
by mini-batch gradient descent on the mean squared error, written from
scratch on numpy; plus a Gaussian radial-basis-function interpolant as an
alternative.  Inputs and targets are standardized internally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.spatial.distance as ssd

from .snapshots import CoeffSeries, FormatError


class TrainingDivergenceError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class MlpModel:
    """Fully-connected network with standardization folded into the model."""

    sizes: list
    weights: list
    biases: list
    mu_in: np.ndarray
    sd_in: np.ndarray
    mu_out: np.ndarray
    sd_out: np.ndarray
    epochs: int = 0
    lr: float = 0.0
    seed: int = 0
    final_loss: float = 0.0
    loss_history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Batched forward pass on raw (unstandardized) inputs."""
        H = (np.atleast_2d(X) - self.mu_in) / self.sd_in
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            H = np.maximum(H @ W.T + b, 0.0)
        H = H @ self.weights[-1].T + self.biases[-1]
        return H * self.sd_out + self.mu_out


def init_mlp(sizes, seed: int = 0) -> MlpModel:
    """Glorot-uniform weights, zero biases, identity standardization."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpModel(sizes=list(sizes), weights=Ws, biases=bs,
                    mu_in=np.zeros(sizes[0]), sd_in=np.ones(sizes[0]),
                    mu_out=np.zeros(sizes[-1]), sd_out=np.ones(sizes[-1]), seed=seed)


def _forward_std(model: MlpModel, X: np.ndarray):
    """Forward pass in standardized coordinates, keeping activations."""
    acts = [X]
    H = X
    for W, b in zip(model.weights[:-1], model.biases[:-1]):
        H = np.maximum(H @ W.T + b, 0.0)
        acts.append(H)
    out = H @ model.weights[-1].T + model.biases[-1]
    return out, acts


def mlp_loss_and_grads(model: MlpModel, X: np.ndarray, Y: np.ndarray):
    """MSE loss and its parameter gradients, inputs already standardized.

    The loss is mean over samples and output components of the squared error.
    """
    out, acts = _forward_std(model, X)
    diff = out - Y
    n = diff.size
    loss = float(np.sum(diff**2)) / n
    gWs = [None] * len(model.weights)
    gbs = [None] * len(model.biases)
    delta = 2.0 * diff / n
    for layer in range(len(model.weights) - 1, -1, -1):
        gWs[layer] = delta.T @ acts[layer]
        gbs[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ model.weights[layer]) * (acts[layer] > 0.0)
    return loss, gWs, gbs


def train_mlp(a: CoeffSeries, g: CoeffSeries, epochs: int = 5000, lr: float = 1e-5,
              batch: int | None = None, seed: int = 0,
              hidden=(256, 64), adam: bool = False) -> MlpModel:
    """Train the coefficient map by (mini-batch) gradient descent.

    ``batch=None`` uses full-batch updates.  With ``adam`` the same gradients
    feed an Adam update instead of the plain rule.  Deterministic per seed.
    """
    if len(a.times) != len(g.times):
        raise ValueError("input and target series lengths differ")
    X_raw = a.values
    Y_raw = g.values
    sizes = [X_raw.shape[1], *hidden, Y_raw.shape[1]]
    model = init_mlp(sizes, seed)
    model.mu_in = X_raw.mean(axis=0)
    model.sd_in = np.where(X_raw.std(axis=0) > 0, X_raw.std(axis=0), 1.0)
    model.mu_out = Y_raw.mean(axis=0)
    model.sd_out = np.where(Y_raw.std(axis=0) > 0, Y_raw.std(axis=0), 1.0)
    X = (X_raw - model.mu_in) / model.sd_in
    Y = (Y_raw - model.mu_out) / model.sd_out
    n_samples = X.shape[0]
    rng = np.random.default_rng(seed + 1)
    if adam:
        mW = [np.zeros_like(W) for W in model.weights]
        vW = [np.zeros_like(W) for W in model.weights]
        mb = [np.zeros_like(b) for b in model.biases]
        vb = [np.zeros_like(b) for b in model.biases]
        b1, b2, eps = 0.9, 0.999, 1e-8
        t_adam = 0
    history = np.empty(epochs)
    for epoch in range(epochs):
        if batch is None or batch >= n_samples:
            slices = [np.arange(n_samples)]
        else:
            perm = rng.permutation(n_samples)
            slices = [perm[i:i + batch] for i in range(0, n_samples, batch)]
        epoch_loss = 0.0
        for idx in slices:
            loss, gWs, gbs = mlp_loss_and_grads(model, X[idx], Y[idx])
            epoch_loss += loss * len(idx)
            if adam:
                t_adam += 1
                for k in range(len(model.weights)):
                    mW[k] = b1 * mW[k] + (1 - b1) * gWs[k]
                    vW[k] = b2 * vW[k] + (1 - b2) * gWs[k]**2
                    mb[k] = b1 * mb[k] + (1 - b1) * gbs[k]
                    vb[k] = b2 * vb[k] + (1 - b2) * gbs[k]**2
                    mh = mW[k] / (1 - b1**t_adam)
                    vh = vW[k] / (1 - b2**t_adam)
                    model.weights[k] -= lr * mh / (np.sqrt(vh) + eps)
                    mhb = mb[k] / (1 - b1**t_adam)
                    vhb = vb[k] / (1 - b2**t_adam)
                    model.biases[k] -= lr * mhb / (np.sqrt(vhb) + eps)
            else:
                for k in range(len(model.weights)):
                    model.weights[k] -= lr * gWs[k]
                    model.biases[k] -= lr * gbs[k]
        epoch_loss /= n_samples
        if not np.isfinite(epoch_loss):
            raise TrainingDivergenceError(epoch)
        history[epoch] = epoch_loss
    model.epochs = epochs
    model.lr = lr
    model.loss_history = history
    model.final_loss = float(history[-1]) if epochs else 0.0
    return model


@dataclass
class RbfModel:
    """Gaussian RBF interpolant through the training pairs."""

    centers: np.ndarray
    coeffs: np.ndarray
    epsilon: float

    def forward(self, X: np.ndarray) -> np.ndarray:
        d = ssd.cdist(np.atleast_2d(X), self.centers)
        return np.exp(-(self.epsilon * d) ** 2) @ self.coeffs

    @property
    def n_in(self) -> int:
        return self.centers.shape[1]


def train_rbf(a: CoeffSeries, g: CoeffSeries, epsilon: float | None = None) -> RbfModel:
    """Solve the Gaussian interpolation system; checks the residual."""
    X = a.values
    Y = g.values
    d = ssd.squareform(ssd.pdist(X))
    if epsilon is None:
        pos = d[d > 0]
        epsilon = 1.0 / float(np.median(pos)) if len(pos) else 1.0
    K = np.exp(-(epsilon * d) ** 2)
    coeffs = la.lstsq(K, Y)[0]
    rel = la.norm(K @ coeffs - Y) / max(la.norm(Y), 1e-300)
    if rel > 1e-8:
        raise ValueError(f"RBF interpolation residual {rel:.3e} exceeds 1e-8")
    return RbfModel(centers=X.copy(), coeffs=coeffs, epsilon=epsilon)


def predict_g(model, a: np.ndarray) -> np.ndarray:
    """Evaluate a trained coefficient map on a single input vector."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or len(a) != model.n_in:
        raise ValueError(f"expected input of length {model.n_in}, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("input coefficients must be finite")
    return model.forward(a[None, :])[0]


def gradcheck_mlp(model: MlpModel, X: np.ndarray, Y: np.ndarray, h: float = 1e-5) -> float:
    """Max relative discrepancy of backprop gradients vs central differences."""
    if not 1e-7 <= h <= 1e-4:
        raise ValueError("finite-difference step must lie in [1e-7, 1e-4]")
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    _, gWs, gbs = mlp_loss_and_grads(model, X, Y)
    params = list(model.weights) + list(model.biases)
    grads = list(gWs) + list(gbs)
    worst = 0.0
    for P, G in zip(params, grads):
        flat = P.ravel()
        gflat = G.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp, _, _ = mlp_loss_and_grads(model, X, Y)
            flat[idx] = orig - h
            lm, _, _ = mlp_loss_and_grads(model, X, Y)
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            scale = max(abs(fd), abs(gflat[idx]), 1e-8)
            worst = max(worst, abs(fd - gflat[idx]) / scale)
    return worst


# ROMMLP v1 --------------------------------------------------------------------

_MLP_MAGIC = b"ROMMLP01"


def write_mlp(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MLP_MAGIC)
        fh.write(struct.pack("<I", len(model.sizes)))
        fh.write(struct.pack(f"<{len(model.sizes)}I", *model.sizes))
        fh.write(struct.pack("<IdQd", model.epochs, model.lr, model.seed, model.final_loss))
        for arr in (model.mu_in, model.sd_in, model.mu_out, model.sd_out):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for W, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def read_mlp(path) -> MlpModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MLP_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {_MLP_MAGIC!r}", byte_offset=0)
    off = 8
    (n_layers,) = struct.unpack_from("<I", data, off)
    off += 4
    sizes = list(struct.unpack_from(f"<{n_layers}I", data, off))
    off += 4 * n_layers
    epochs, lr, seed, final_loss = struct.unpack_from("<IdQd", data, off)
    off += struct.calcsize("<IdQd")

    def take(count):
        nonlocal off
        end = off + 8 * count
        if end > len(data):
            raise FormatError("truncated payload", byte_offset=len(data))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
        off = end
        return arr

    mu_in, sd_in = take(sizes[0]), take(sizes[0])
    mu_out, sd_out = take(sizes[-1]), take(sizes[-1])
    Ws, bs = [], []
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        Ws.append(take(fi * fo).reshape(fo, fi))
        bs.append(take(fo))
    if off != len(data):
        raise FormatError(f"trailing bytes after payload", byte_offset=off)
    return MlpModel(sizes=sizes, weights=Ws, biases=bs, mu_in=mu_in, sd_in=sd_in,
                    mu_out=mu_out, sd_out=sd_out, epochs=epochs, lr=lr,
                    seed=seed, final_loss=final_loss)
