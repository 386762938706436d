"""Learned fusion of the pilot-based and measurement-based estimates.

Two subnet pairs (one for location, one for speed) read the concatenated
estimates ``(x_p, v_p, x_m, v_m)``.  In each pair a weight subnet produces
``w`` in (0, 1) and a bias subnet produces one bias per source; the fused
value is ``w (p - b_p) + (1 - w) (m - b_m)``.

Everything, including batch normalisation and backpropagation, is plain
numpy so the gradients can be checked against finite differences.
"""

from __future__ import annotations

import copy
import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import Diverged, ParseError

logger = logging.getLogger(__name__)

MAGIC = b"FUSN1"
DATASET_HEADER = ["x_p", "v_p", "x_m", "v_m", "x_tar", "v_tar"]


# -- layers ------------------------------------------------------------------

class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        lim = scale / np.sqrt(n_in)
        self.W = rng.uniform(-lim, lim, size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    def forward(self, x, train=False):
        self._x = x
        return x @ self.W + self.b

    def backward(self, g):
        self.dW = self._x.T @ g
        self.db = g.sum(axis=0)
        return g @ self.W.T

    def params(self):
        return [(self.W, self.dW), (self.b, self.db)]

    def arrays(self):
        return [self.W, self.b]


class BatchNorm:
    """Per-feature batch normalisation; running stats use ``momentum`` on the old value."""

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps
        self.dgamma = np.zeros(dim)
        self.dbeta = np.zeros(dim)

    def forward(self, x, train=False, update_stats=True):
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            if update_stats:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1 - m) * mu
                self.running_var = m * self.running_var + (1 - m) * var
        else:
            mu, var = self.running_mean, self.running_var
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mu) * self._inv
        return self.gamma * self._xhat + self.beta

    def backward(self, g):
        n = g.shape[0]
        self.dgamma = np.sum(g * self._xhat, axis=0)
        self.dbeta = g.sum(axis=0)
        gx = g * self.gamma
        return (self._inv / n) * (n * gx - gx.sum(axis=0)
                                  - self._xhat * np.sum(gx * self._xhat, axis=0))

    def params(self):
        return [(self.gamma, self.dgamma), (self.beta, self.dbeta)]

    def arrays(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]


class ReLU:
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask

    def params(self):
        return []

    def arrays(self):
        return []


class Subnet:
    """Dense -> BN -> ReLU -> Dense -> BN -> ReLU -> Dense (+ optional sigmoid)."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng, sigmoid: bool,
                 momentum: float = 0.9, eps: float = 1e-5, out_scale: float = 1.0):
        self.layers = [Dense(n_in, hidden, rng), BatchNorm(hidden, momentum, eps), ReLU(),
                       Dense(hidden, hidden, rng), BatchNorm(hidden, momentum, eps), ReLU(),
                       Dense(hidden, n_out, rng, scale=out_scale)]
        self.sigmoid = sigmoid

    def forward(self, x, train=False, update_stats=True):
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                x = layer.forward(x, train, update_stats)
            else:
                x = layer.forward(x, train)
        if self.sigmoid:
            x = 1.0 / (1.0 + np.exp(-x))
            self._out = x
        return x

    def backward(self, g):
        if self.sigmoid:
            g = g * self._out * (1.0 - self._out)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def arrays(self):
        return [a for layer in self.layers for a in layer.arrays()]

    def batchnorms(self):
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]


# -- network -----------------------------------------------------------------

@dataclass
class FusionOutput:
    x: np.ndarray
    v: np.ndarray
    w_x: np.ndarray
    w_v: np.ndarray
    b_x: np.ndarray  # (N, 2): pilot, measurement
    b_v: np.ndarray


class FusionNetwork:
    """Location and speed subnet pairs with fixed physical input/bias scaling.

    Inputs are divided by ``(x_scale, v_scale, x_scale, v_scale)``; bias
    subnet outputs are multiplied by ``bias_x_scale`` / ``bias_v_scale``.
    """

    def __init__(self, rng: np.random.Generator | None = None, hidden: int = 32,
                 x_scale: float = 100.0, v_scale: float = 200.0,
                 bias_x_scale: float = 1.0, bias_v_scale: float = 1.0,
                 momentum: float = 0.9, eps: float = 1e-5):
        rng = np.random.default_rng(0) if rng is None else rng
        self.scales = np.array([x_scale, v_scale, bias_x_scale, bias_v_scale], dtype=float)
        kw = dict(momentum=momentum, eps=eps)
        self.wx = Subnet(4, hidden, 1, rng, sigmoid=True, **kw)
        self.bx = Subnet(4, hidden, 2, rng, sigmoid=False, out_scale=0.0, **kw)
        self.wv = Subnet(4, hidden, 1, rng, sigmoid=True, **kw)
        self.bv = Subnet(4, hidden, 2, rng, sigmoid=False, out_scale=0.0, **kw)

    @property
    def subnets(self):
        return [self.wx, self.bx, self.wv, self.bv]

    def _scaled(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s = self.scales
        return X, X / np.array([s[0], s[1], s[0], s[1]])

    def forward(self, X, train: bool = False, update_stats: bool = True) -> FusionOutput:
        """Fuse a batch ``X`` of shape (N, 4) ordered (x_p, v_p, x_m, v_m)."""
        X, Z = self._scaled(X)
        w_x = self.wx.forward(Z, train, update_stats)[:, 0]
        b_x = self.bx.forward(Z, train, update_stats) * self.scales[2]
        w_v = self.wv.forward(Z, train, update_stats)[:, 0]
        b_v = self.bv.forward(Z, train, update_stats) * self.scales[3]
        x = w_x * (X[:, 0] - b_x[:, 0]) + (1.0 - w_x) * (X[:, 2] - b_x[:, 1])
        v = w_v * (X[:, 1] - b_v[:, 0]) + (1.0 - w_v) * (X[:, 3] - b_v[:, 1])
        self._cache = (X, w_x, b_x, w_v, b_v)
        return FusionOutput(x=x, v=v, w_x=w_x, w_v=w_v, b_x=b_x, b_v=b_v)

    def __call__(self, x_p, v_p, x_m, v_m):
        """Inference on scalars or equal-length arrays; returns (x, v)."""
        X = np.column_stack([np.atleast_1d(np.asarray(a, dtype=float))
                             for a in (x_p, v_p, x_m, v_m)])
        out = self.forward(X, train=False)
        if np.ndim(x_p) == 0:
            return float(out.x[0]), float(out.v[0])
        return out.x, out.v

    def loss(self, X, T, train: bool = False, update_stats: bool = True,
             weights=None) -> float:
        """Mean squared error of location plus speed; ``weights`` (N, 2) scale each term."""
        out = self.forward(X, train, update_stats)
        T = np.atleast_2d(T)
        W = np.ones_like(T) if weights is None else np.atleast_2d(weights)
        return float(np.mean(W[:, 0] * (out.x - T[:, 0]) ** 2
                             + W[:, 1] * (out.v - T[:, 1]) ** 2))

    def backward(self, T, weights=None):
        """Gradients of the mean loss for the last forward pass (stored on the layers)."""
        X, w_x, b_x, w_v, b_v = self._cache
        T = np.atleast_2d(T)
        W = np.ones_like(T) if weights is None else np.atleast_2d(weights)
        n = X.shape[0]
        for tgt, wt, col_p, col_m, w, b, wnet, bnet, bscale in (
                (T[:, 0], W[:, 0], 0, 2, w_x, b_x, self.wx, self.bx, self.scales[2]),
                (T[:, 1], W[:, 1], 1, 3, w_v, b_v, self.wv, self.bv, self.scales[3])):
            p = X[:, col_p] - b[:, 0]
            m = X[:, col_m] - b[:, 1]
            fused = w * p + (1.0 - w) * m
            g = 2.0 * wt * (fused - tgt) / n
            wnet.backward((g * (p - m))[:, None])
            bnet.backward(np.column_stack([-g * w, -g * (1.0 - w)]) * bscale)

    def params(self):
        return [p for net in self.subnets for p in net.params()]

    def arrays(self):
        return [self.scales] + [a for net in self.subnets for a in net.arrays()]

    def batchnorms(self):
        return [bn for net in self.subnets for bn in net.batchnorms()]

    def freeze_statistics(self, X):
        """Set every BN's running stats to the population stats of ``X``."""
        X, Z = self._scaled(X)
        for net in self.subnets:
            h = Z
            for layer in net.layers:
                if isinstance(layer, BatchNorm):
                    layer.running_mean = h.mean(axis=0)
                    layer.running_var = h.var(axis=0)
                    h = layer.forward(h, train=False)
                else:
                    h = layer.forward(h, train=False)

    # serialisation: magic, then (uint32 length, float64[length]) per array in
    # the order scales, wx, bx, wv, bv; within a subnet layer by layer with
    # Dense -> W (row-major), b and BN -> gamma, beta, running_mean, running_var.
    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            for a in self.arrays():
                flat = np.ascontiguousarray(a, dtype="<f8").reshape(-1)
                fh.write(struct.pack("<I", flat.size))
                fh.write(flat.tobytes())

    @classmethod
    def load(cls, path) -> "FusionNetwork":
        data = Path(path).read_bytes()
        if not data.startswith(MAGIC):
            raise ParseError(f"{path}: not a fusion network file")
        pos = len(MAGIC)
        arrays = []
        while pos < len(data):
            if pos + 4 > len(data):
                raise ParseError(f"{path}: truncated length field")
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            end = pos + 8 * n
            if end > len(data):
                raise ParseError(f"{path}: truncated array")
            arrays.append(np.frombuffer(data[pos:end], dtype="<f8").astype(float))
            pos = end
        scales = arrays[0]
        hidden = int(arrays[2].size)  # first BN gamma
        net = cls(hidden=hidden, x_scale=scales[0], v_scale=scales[1],
                  bias_x_scale=scales[2], bias_v_scale=scales[3])
        targets = net.arrays()
        if len(targets) != len(arrays):
            raise ParseError(f"{path}: expected {len(targets)} arrays, found {len(arrays)}")
        for dst, src in zip(targets, arrays):
            if dst.size != src.size:
                raise ParseError(f"{path}: array size mismatch")
            dst[...] = src.reshape(dst.shape)
        return net


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 20
    plateau: int = 5
    decay: float = 0.5
    val_fraction: float = 0.2
    optimizer: str = "adam"
    hidden: int = 32
    bias_x_scale: float = 1.0
    bias_v_scale: float = 1.0
    x_scale: float = 100.0
    v_scale: float = 200.0


@dataclass
class TrainResult:
    net: FusionNetwork
    train_idx: np.ndarray
    val_idx: np.ndarray
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0


class _Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p, _ in params]
        self.v = [np.zeros_like(p) for p, _ in params]
        self.b1, self.b2, self.eps, self.t = b1, b2, eps, 0

    def step(self, params, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for (p, g), m, v in zip(params, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_fusion(X, T, settings: TrainSettings = TrainSettings(),
                 rng: np.random.Generator | None = None, weights=None) -> TrainResult:
    """Mini-batch training with plateau decay, early stopping and best-snapshot restore.

    Raises Diverged when the validation loss exceeds 1000 times its initial
    value (floored at 1, so a near-perfect start does not trip it).

    ``weights`` (N, 2) optionally weight the location and speed error of each
    sample in both the training and the validation loss.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    if X.shape[0] != T.shape[0] or X.shape[0] < 2:
        raise ValueError("need matching, non-trivial input and target arrays")
    s = settings
    tr, va = split_indices(X.shape[0], s.val_fraction, rng)
    if va.size == 0:
        va = tr
    net = FusionNetwork(rng, hidden=s.hidden, x_scale=s.x_scale, v_scale=s.v_scale,
                        bias_x_scale=s.bias_x_scale, bias_v_scale=s.bias_v_scale)
    adam = _Adam(net.params()) if s.optimizer == "adam" else None
    lr = s.lr
    net.freeze_statistics(X[tr])
    W = np.ones_like(T) if weights is None else np.asarray(weights, dtype=float)
    if W.shape != T.shape or np.any(W < 0):
        raise ValueError("weights must be non-negative with the shape of T")
    init_loss = net.loss(X[va], T[va], weights=W[va])
    best, best_net, best_epoch = init_loss, copy.deepcopy(net), 0
    since_best = since_lr = 0
    hist = [init_loss]
    for epoch in range(1, s.max_epochs + 1):
        order = rng.permutation(tr)
        for k in range(0, order.size, s.batch_size):
            idx = order[k:k + s.batch_size]
            if idx.size < 2:
                continue
            net.forward(X[idx], train=True)
            net.backward(T[idx], W[idx])
            params = net.params()
            if adam is None:
                for p, g in params:
                    p -= lr * g
            else:
                adam.step(params, lr)
        val = net.loss(X[va], T[va], weights=W[va])
        hist.append(val)
        if not np.isfinite(val) or val > 1e3 * max(init_loss, 1.0):
            raise Diverged(f"validation loss {val:.3g} at epoch {epoch}")
        if val < best:
            best, best_net, best_epoch = val, copy.deepcopy(net), epoch
            since_best = since_lr = 0
        else:
            since_best += 1
            since_lr += 1
            if since_lr >= s.plateau:
                lr *= s.decay
                since_lr = 0
            if since_best >= s.patience:
                break
    logger.info("fusion training stopped after %d epochs, best %d (val %.4g)",
                epoch, best_epoch, best)
    best_net.freeze_statistics(X[tr])
    return TrainResult(net=best_net, train_idx=tr, val_idx=va, val_loss=hist,
                       best_epoch=best_epoch)


# -- dataset I/O -------------------------------------------------------------

def write_dataset(path, X, T) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for row in np.column_stack([X, T]):
            w.writerow([repr(float(a)) for a in row])


def read_dataset(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DATASET_HEADER:
            raise ParseError(f"expected header {','.join(DATASET_HEADER)}", lineno=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(a) for a in row])
            except ValueError as exc:
                raise ParseError(str(exc), lineno=lineno) from None
            if len(row) != 6:
                raise ParseError("expected 6 columns", lineno=lineno)
    arr = np.array(rows, dtype=float).reshape(-1, 6)
    return arr[:, :4], arr[:, 4:]
