"""Railway track geometry.

A track is described by its projection-distance function ``f(x)``: an MT at
projected location ``x`` sits at ``(x, f(x))`` in a frame centred on the BS.
Three families are supported: a straight track parallel to the x-axis, an
analytic quadratic, and the learnable piecewise-linear approximator.

All ``value``/``slope`` evaluations clamp ``x`` to the support
``[-r_max, r_max]``; beyond the support the track is therefore flat, which
keeps Monte-Carlo trajectories that overshoot the cell well defined.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import integrate

from .errors import EmptyBin, NoBracket

logger = logging.getLogger(__name__)

TOL_QUADRATURE = 1e-8
TOL_ARC = 1e-4
# lookup table used by the vectorised inverse arc-length
_TABLE_STEP = 0.01
_TABLE_EXTENSION = 500.0


class Track:
    """Base class: subclasses implement ``_value``, ``_slope`` and ``_antiderivative``."""

    r_max: float

    def __post_init__(self):
        self._warned = False

    @property
    def support(self) -> tuple[float, float]:
        return (-self.r_max, self.r_max)

    def _clamp(self, x):
        x = np.asarray(x, dtype=float)
        clamped = np.clip(x, -self.r_max, self.r_max)
        if not self._warned and np.any(clamped != x):
            logger.warning(
                "projected location outside [-%g, %g] m clamped to the support",
                self.r_max, self.r_max,
            )
            self._warned = True
        return clamped

    def value(self, x):
        """f(x), vectorised."""
        return self._value(self._clamp(x))

    def slope(self, x):
        """f'(x), vectorised; zero outside the support."""
        x = np.asarray(x, dtype=float)
        inside = np.abs(x) <= self.r_max
        return np.where(inside, self._slope(np.clip(x, -self.r_max, self.r_max)), 0.0)

    def breakpoints(self) -> np.ndarray:
        """Points where the slope may jump (support edges at least)."""
        return np.array([-self.r_max, self.r_max])

    def _arc_primitive(self, x):
        """Exact primitive of sqrt(1 + f'^2), including the flat extension."""
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, -self.r_max, self.r_max)
        return self._antiderivative(xc) + (x - xc)

    @cached_property
    def _arc_table(self):
        lo = -self.r_max - _TABLE_EXTENSION
        hi = self.r_max + _TABLE_EXTENSION
        grid = np.linspace(lo, hi, int(round((hi - lo) / _TABLE_STEP)) + 1)
        return grid, self._arc_primitive(grid)


@dataclass(eq=False)
class LinearTrack(Track):
    """Straight track at constant distance ``d`` from the BS."""

    d: float
    r_max: float = 100.0

    def __post_init__(self):
        super().__post_init__()
        if self.d <= 0:
            raise ValueError("track distance d must be positive")

    def _value(self, x):
        return np.full_like(x, self.d, dtype=float)

    def _slope(self, x):
        return np.zeros_like(x, dtype=float)

    def _antiderivative(self, x):
        return x


@dataclass(eq=False)
class QuadraticTrack(Track):
    """f(x) = a x^2 + b x + c."""

    a: float
    b: float
    c: float
    r_max: float = 100.0

    def __post_init__(self):
        super().__post_init__()

    @classmethod
    def from_vertex(cls, curvature: float, x0: float, y0: float, r_max: float = 100.0):
        """f(x) = curvature * (x - x0)^2 + y0."""
        return cls(a=curvature, b=-2.0 * curvature * x0,
                   c=curvature * x0 ** 2 + y0, r_max=r_max)

    @classmethod
    def hsr_default(cls, r_max: float = 100.0):
        """The curved test track (6/200)^2 (x - 5)^2 + 11."""
        return cls.from_vertex((6.0 / 200.0) ** 2, 5.0, 11.0, r_max=r_max)

    def _value(self, x):
        return (self.a * x + self.b) * x + self.c

    def _slope(self, x):
        return 2.0 * self.a * x + self.b

    def _antiderivative(self, x):
        if self.a == 0.0:
            return x * math.sqrt(1.0 + self.b ** 2)
        u = 2.0 * self.a * x + self.b
        return (u * np.sqrt(1.0 + u * u) + np.arcsinh(u)) / (4.0 * self.a)


@dataclass(eq=False)
class PiecewiseTrack(Track):
    """Continuous piecewise-linear track on ``N_x`` equal pieces.

    Breakpoints sit at ``x_i = -r_max + (i-1) dx`` with ``dx = 2 r_max / N_x``;
    ``y`` holds the ``N_x + 1`` breakpoint values.
    """

    r_max: float
    y: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        super().__post_init__()
        self.y = np.array(self.y, dtype=float)
        if self.y.ndim != 1 or self.y.size < 2:
            raise ValueError("need at least two breakpoint values")
        self.y.setflags(write=False)

    @property
    def n_pieces(self) -> int:
        return self.y.size - 1

    @property
    def delta_x(self) -> float:
        return 2.0 * self.r_max / self.n_pieces

    @property
    def knots(self) -> np.ndarray:
        return -self.r_max + np.arange(self.n_pieces + 1) * self.delta_x

    def breakpoints(self):
        return self.knots

    def _locate(self, x):
        """Piece index (right piece at breakpoints) and local coordinate in [0, 1]."""
        i = np.floor((x + self.r_max) / self.delta_x).astype(int)
        i = np.clip(i, 0, self.n_pieces - 1)
        t = (x - self.knots[i]) / self.delta_x
        return i, t

    def piece_value(self, i, t):
        """Value of piece ``i`` (0-based) at local coordinate ``t``."""
        return self.y[i] * (1.0 - t) + self.y[i + 1] * t

    def _value(self, x):
        i, t = self._locate(x)
        return self.piece_value(i, t)

    def _slope(self, x):
        i, _ = self._locate(x)
        return (self.y[i + 1] - self.y[i]) / self.delta_x

    def _antiderivative(self, x):
        seg = np.sqrt(1.0 + (np.diff(self.y) / self.delta_x) ** 2)
        cum = np.concatenate([[0.0], np.cumsum(seg * self.delta_x)])
        i, t = self._locate(x)
        return cum[i] + seg[i] * t * self.delta_x - self.r_max


def track_eval(track: Track, x):
    """f(x) with clamping to the support."""
    out = track.value(x)
    return float(out) if np.ndim(out) == 0 else out


def track_slope(track: Track, x):
    out = track.slope(x)
    return float(out) if np.ndim(out) == 0 else out


def phi_of_x(track: Track, x):
    """LoS angle of departure, measured from the BS broadside (y-axis).

    ``arctan(x / f(x))`` for f > 0, so the result lies in (-pi/2, pi/2) and
    matches the straight-track formula exactly.
    """
    fx = track.value(x)
    if np.any(fx == 0):
        raise ValueError("f(x) = 0: MT co-located with the BS")
    out = np.arctan(np.asarray(x, dtype=float) / fx)
    return float(out) if np.ndim(out) == 0 else out


def psi_of_xv(track: Track, x, v_sign):
    """Motion-direction angle with the two-branch rule on the sign of v f'(x).

    ``arctan(1/f')`` when ``v f' <= 0``, ``arctan(1/f') + pi`` otherwise,
    and ``pi/2`` on a flat stretch.  This angle pairs with the BS-frame AoD
    shifted by pi; see :func:`beamcast.channel_model.true_delay_doppler`.
    """
    fp = np.asarray(track.slope(x), dtype=float)
    s = np.sign(v_sign)
    with np.errstate(divide="ignore"):
        base = np.arctan(np.where(fp == 0, np.inf, 1.0 / np.where(fp == 0, 1.0, fp)))
    out = np.where(fp == 0, np.pi / 2, np.where(s * fp <= 0, base, base + np.pi))
    return float(out) if np.ndim(out) == 0 else out


def arc_length(track: Track, x_from: float, x_to: float) -> float:
    """Signed arc length F(x_from, x_to) = integral of sqrt(1 + f'(u)^2) du."""
    if x_from == x_to:
        return 0.0
    lo, hi = (x_from, x_to) if x_from < x_to else (x_to, x_from)
    if isinstance(track, LinearTrack):
        total = hi - lo
    else:
        kinks = [p for p in track.breakpoints() if lo < p < hi]
        edges = [lo, *kinks, hi]
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            val, _ = integrate.quad(
                lambda u: math.sqrt(1.0 + float(track.slope(u)) ** 2), a, b,
                epsabs=TOL_QUADRATURE * 1e-2, epsrel=1e-12, limit=200,
            )
            total += val
    return total if x_from < x_to else -total


def solve_location(track: Track, x_anchor: float, s: float, tol: float = TOL_ARC) -> float:
    """Find ``x_l`` with ``arc_length(x_l, x_anchor) == s`` by bisection.

    Raises NoBracket when the displacement would take the MT off the support.
    """
    if s == 0:
        return float(x_anchor)
    lo, hi = -track.r_max, track.r_max
    g_lo = arc_length(track, lo, x_anchor) - s
    g_hi = arc_length(track, hi, x_anchor) - s
    if g_lo < -tol or g_hi > tol:
        raise NoBracket(f"arc displacement {s:g} m from x={x_anchor:g} leaves the support")
    if abs(g_lo) < tol:
        return lo
    if abs(g_hi) < tol:
        return hi
    # F(x_l, x_anchor) decreases in x_l
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        g = arc_length(track, mid, x_anchor) - s
        if abs(g) < tol / 4 or hi - lo < 1e-12:
            return mid
        if g > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def locate(track: Track, x_anchor, s):
    """Vectorised inverse of the arc length via a lookup table.

    Returns ``x`` with ``arc_length(x, x_anchor) == s`` (so ``s > 0`` moves
    backwards).  Beyond the table the track is flat and the map extends with
    unit slope, so this never raises.
    """
    x_anchor = np.asarray(x_anchor, dtype=float)
    s = np.asarray(s, dtype=float)
    if isinstance(track, LinearTrack):
        out = x_anchor - s
    else:
        grid, prim = track._arc_table
        target = track._arc_primitive(x_anchor) - s
        out = np.interp(target, prim, grid)
        out = out + np.where(target < prim[0], target - prim[0], 0.0)
        out = out + np.where(target > prim[-1], target - prim[-1], 0.0)
    return float(out) if np.ndim(out) == 0 else out


def fitting_error_bound(a: float, delta_x: float, sigma_n: float) -> float:
    """Upper bound on the expected MAE of a piecewise fit to a quadratic."""
    if delta_x <= 0:
        raise ValueError("delta_x must be positive")
    return abs(a) * delta_x ** 2 / 6.0 + sigma_n * math.sqrt(2.0 / math.pi)


@dataclass
class FitHistory:
    epoch_loss: list = field(default_factory=list)
    converged: bool = False


def _init_breakpoints(idx, f, n_pieces):
    sums = np.bincount(idx, weights=f, minlength=n_pieces)
    counts = np.bincount(idx, minlength=n_pieces)
    means = sums / counts
    if n_pieces == 1:
        return np.array([means[0], means[0]])
    y = np.empty(n_pieces + 1)
    y[1:-1] = 0.5 * (means[:-1] + means[1:])
    y[0] = 1.5 * means[0] - 0.5 * means[1]
    y[-1] = 1.5 * means[-1] - 0.5 * means[-2]
    return y


def fit_track(
    x: Sequence[float],
    f: Sequence[float],
    n_pieces: int,
    r_max: float,
    lr: float = 1e-2,
    batch_size: int = 64,
    max_epochs: int = 2000,
    tol: float = 1e-6,
    loss: str = "mae",
    rng: np.random.Generator | None = None,
    history: FitHistory | None = None,
) -> PiecewiseTrack:
    """Learn breakpoint values by mini-batch gradient descent.

    Parameters
    ----------
    x, f : sample abscissae and (possibly noisy) track distances.
    n_pieces : number of equal pieces N_x covering ``[-r_max, r_max]``.
    loss : ``"mae"`` (default) or ``"mse"``; the latter exists to check the
        optimiser against closed-form least squares.

    Training stops when the epoch-average loss improves by less than ``tol``
    or after ``max_epochs``.  Raises EmptyBin if a piece has no samples.
    """
    if n_pieces < 1:
        raise ValueError("n_pieces must be >= 1")
    if loss not in ("mae", "mse"):
        raise ValueError(f"unknown loss {loss!r}")
    rng = np.random.default_rng() if rng is None else rng
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    template = PiecewiseTrack(r_max=r_max, y=np.zeros(n_pieces + 1))
    idx, t = template._locate(np.clip(x, -r_max, r_max))
    counts = np.bincount(idx, minlength=n_pieces)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise EmptyBin(f"piece {empty + 1} of {n_pieces} has no samples")

    y = _init_breakpoints(idx, f, n_pieces)
    n = x.size
    nb = n_pieces + 1
    batch_size = min(batch_size, n)
    prev = math.inf
    history = FitHistory() if history is None else history
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            b = order[start:start + batch_size]
            ib, tb = idx[b], t[b]
            resid = y[ib] * (1.0 - tb) + y[ib + 1] * tb - f[b]
            if loss == "mae":
                total += np.abs(resid).sum()
                g = np.sign(resid)
            else:
                total += (resid ** 2).sum()
                g = 2.0 * resid
            grad = (np.bincount(ib, weights=g * (1.0 - tb), minlength=nb)
                    + np.bincount(ib + 1, weights=g * tb, minlength=nb))
            y -= lr * grad / b.size
        epoch_loss = total / n
        history.epoch_loss.append(epoch_loss)
        if prev - epoch_loss < tol:
            history.converged = True
            logger.debug("fit_track stopped at epoch %d, loss %.3e", epoch, epoch_loss)
            break
        prev = epoch_loss
    return PiecewiseTrack(r_max=r_max, y=y)


def mean_absolute_error(track: Track, x, f) -> float:
    return float(np.mean(np.abs(track.value(x) - np.asarray(f, dtype=float))))


def read_track_samples(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``x_m,f_m`` sample corpus."""
    xs, fs = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["x_m", "f_m"]:
            raise ValueError(f"{path}: expected header x_m,f_m, got {reader.fieldnames}")
        for row in reader:
            xs.append(float(row["x_m"]))
            fs.append(float(row["f_m"]))
    return np.array(xs), np.array(fs)


def write_track_samples(path, x, f) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_m", "f_m"])
        for xi, fi in zip(x, f):
            w.writerow([repr(float(xi)), repr(float(fi))])


def write_piecewise(path, track: PiecewiseTrack) -> None:
    """Serialise breakpoints as ``i,x_i_m,y_i_m`` (1-based ``i``)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "x_i_m", "y_i_m"])
        for i, (xi, yi) in enumerate(zip(track.knots, track.y), start=1):
            w.writerow([i, repr(float(xi)), repr(float(yi))])


def read_piecewise(path) -> PiecewiseTrack:
    rows = []
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["i", "x_i_m", "y_i_m"]:
            raise ValueError(f"{path}: expected header i,x_i_m,y_i_m")
        for row in reader:
            rows.append((int(row["i"]), float(row["x_i_m"]), float(row["y_i_m"])))
    rows.sort()
    knots = np.array([r[1] for r in rows])
    return PiecewiseTrack(r_max=float(-knots[0]), y=np.array([r[2] for r in rows]))
