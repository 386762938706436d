"""Maximum-likelihood location/speed estimation by coordinate ascent.

Two independent estimators are provided: one from the pilot beam sweep
(:func:`estimate_from_pilots`) and one from delay/Doppler measurements
(:func:`estimate_from_measurements`).  Both alternate one-dimensional
searches over the projected location ``x`` (at the last observation
instant) and the signed speed ``v``; each search is a coarse grid sweep
followed by golden-section refinement.

Updates are applied Gauss-Seidel style (each block sees the freshest values
of the others) so the likelihood never decreases between iterations.

The work is batched: every search runs on ``K`` independent instances at
once, and the scalar entry points are the ``K = 1`` case.
"""

from __future__ import annotations

import math
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .channel_model import (
    SPEED_OF_LIGHT, ArrayConfig, MeasurementVariances, array_response, dft_codebook, pilot_basis,
    radial_factor,
)
from .errors import (
    DegenerateBasis, NoBracket, NoGeometricSolution, NotConverged, SignAmbiguity,
)
from .track_geometry import LinearTrack, Track, locate, phi_of_x

logger = logging.getLogger(__name__)

SOURCES = ("pilot", "measurement", "fused", "truth")
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_CHUNK = 32


@dataclass(frozen=True)
class ParamEstimate:
    """Projected location (m, at the last observation instant) and signed speed (m/s)."""

    x: float
    v: float
    source: str
    status: str = "ok"
    iterations: int = 0
    objective: tuple = ()

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown estimate source {self.source!r}")

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class EstimatorSettings:
    theta_th_x: float = 0.1
    theta_th_v: float = 0.1
    k_max: int = 20
    grid_x: float = 0.05
    grid_v: float = 0.05
    v_max: float = 200.0
    coarse_x: float = 1.0
    coarse_v: float = 1.0
    fd_eps: float = 1.0
    v_prior: float = 256.0 / 3.6
    clamp_delay: bool = True
    init_unit_gain: bool = False

    def __post_init__(self):
        for name in ("theta_th_x", "theta_th_v", "grid_x", "grid_v", "v_max",
                     "coarse_x", "coarse_v"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.grid_x > self.theta_th_x or self.grid_v > self.theta_th_v:
            raise ValueError("search resolution must not exceed the stopping thresholds")


# -- trajectories ------------------------------------------------------------

def _trajectory(track: Track, x, v, n_obs: int, delta_t: float):
    """Locations at instants 1..L for final location ``x`` and arc speed ``v``.

    Broadcasts ``x`` and ``v``; the instant axis is appended last.
    """
    x = np.asarray(x, dtype=float)[..., None]
    v = np.asarray(v, dtype=float)[..., None]
    back = (n_obs - np.arange(1, n_obs + 1)) * delta_t  # (L - l) dt
    if isinstance(track, LinearTrack):
        return x - v * back
    return locate(track, x, v * back)


def trajectory_locations(track: Track, x: float, v: float, n_obs: int, delta_t: float,
                         strict: bool = False) -> np.ndarray:
    """Projected locations x_1..x_L under constant speed.

    The arc length from ``x_l`` to ``x`` equals ``(L - l) v dt``; on a
    straight track this is ``x_l = x + (l - L) v dt``.  With ``strict`` a
    trajectory leaving the support raises NoBracket.
    """
    out = _trajectory(track, x, v, n_obs, delta_t)
    if strict and np.any(np.abs(out) > track.r_max + 1e-9):
        raise NoBracket("observation trajectory leaves the track support")
    return out


# -- one-dimensional search --------------------------------------------------

def _grid(lo, hi, step):
    n = int(math.floor((hi - lo) / step + 1e-9))
    pts = lo + step * np.arange(n + 1)
    if hi - pts[-1] > 1e-9:
        pts = np.append(pts, hi)
    return pts


def _pick(vals, args):
    """Row-wise argmax of ``vals``; ties go to the smaller ``|args|``, then the first."""
    top = vals == vals.max(axis=1, keepdims=True)
    score = np.where(top, -np.abs(args), -np.inf)
    k = np.argmax(score, axis=1)
    rows = np.arange(vals.shape[0])
    return args[rows, k], vals[rows, k]


def line_search(fun: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                coarse: float, tol: float, n: int = 1, current=None):
    """Maximise ``n`` one-dimensional functions on ``[lo, hi]`` at once.

    ``fun`` maps candidates of shape ``(n, G)`` to values of the same shape.
    A coarse sweep with step ``coarse`` is refined by golden section on the
    bracket around the best grid point until it is narrower than ``tol``.
    Grid ties break toward the smaller magnitude.  With ``current`` (shape
    ``(n,)``) the result is never worse than the current point.
    Returns ``(argmax, max)`` arrays of shape ``(n,)``.
    """
    pts = _grid(lo, hi, coarse)
    args = np.broadcast_to(pts, (n, pts.size))
    best_x, best_v = _pick(fun(args), args)

    a = np.maximum(lo, best_x - coarse)
    b = np.minimum(hi, best_x + coarse)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fcd = fun(np.column_stack([c, d]))
    fc, fd = fcd[:, 0].copy(), fcd[:, 1].copy()
    steps = max(0, math.ceil(math.log(tol / (2.0 * coarse)) / math.log(_GOLDEN)))
    for _ in range(steps):
        left = fc >= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - _GOLDEN * (b - a)
        d_new = a + _GOLDEN * (b - a)
        probe = np.where(left, c_new, d_new)
        fp = fun(probe[:, None])[:, 0]
        c, d, fc, fd = (np.where(left, c_new, d), np.where(left, c, d_new),
                        np.where(left, fp, fd), np.where(left, fc, fp))
    mid = 0.5 * (a + b)
    cand_x = [best_x, mid]
    cand_v = [best_v, fun(mid[:, None])[:, 0]]
    if current is not None:
        cur = np.broadcast_to(np.asarray(current, dtype=float), (n,))
        cand_x.append(cur)
        cand_v.append(fun(cur[:, None])[:, 0])
    return _pick(np.column_stack(cand_v), np.column_stack(cand_x))


# -- pilot estimator ---------------------------------------------------------

def alpha_closed_form(y_l: np.ndarray, x_l, track: Track, cfg: ArrayConfig):
    """Least-squares complex gain for the snapshots of one instant.

    ``y_l`` has shape ``(n_r, n_t)`` (column i is the snapshot of beam i);
    leading batch axes of ``y_l`` and ``x_l`` broadcast.
    """
    Z = pilot_basis(phi_of_x(track, np.asarray(x_l, dtype=float)), cfg)
    den = np.sum(np.abs(Z) ** 2, axis=(-2, -1))
    if np.any(den < 1e-300):
        raise DegenerateBasis("pilot basis has zero energy")
    out = np.sum(Z.conj() * y_l, axis=(-2, -1)) / den
    return complex(out) if np.ndim(out) == 0 else out


def _pilot_residual(Y, track, cfg, xs, vs, alphas, delta_t, codebook):
    """Residual energy; ``Y`` (..., L, n_r, n_t), ``alphas`` (..., L), candidates broadcast."""
    n_obs = Y.shape[-3]
    pos = _trajectory(track, xs, vs, n_obs, delta_t)
    Z = pilot_basis(phi_of_x(track, pos), cfg, codebook)
    R = Y - np.asarray(alphas)[..., None, None] * Z
    return np.sum(R.real ** 2 + R.imag ** 2, axis=(-3, -2, -1))


def _pilot_corr(Y, track, cfg, pos, codebook):
    """<z(x_l), y_l> and ||z(x_l)||^2 using the rank-one structure of z.

    ``pos`` (..., L) broadcasts against ``Y`` (..., L, n_r, n_t).
    """
    phi = phi_of_x(track, pos)
    a_r = array_response(np.pi - phi, cfg.n_r)
    b = array_response(phi, cfg.n_t).conj() @ codebook  # a_t^H F
    gain = math.sqrt(cfg.n_t * cfg.n_r)
    yb = (Y @ b.conj()[..., None])[..., 0]  # (..., L, n_r)
    corr = gain * np.sum(a_r.conj() * yb, axis=-1)
    energy = gain * gain * np.sum(np.abs(a_r) ** 2, axis=-1) * np.sum(np.abs(b) ** 2, axis=-1)
    return corr, energy


def _pilot_residual_fast(Y, y_energy, track, cfg, xs, vs, alphas, delta_t, codebook):
    """Same value as :func:`_pilot_residual`, expanded as ||y||^2 - 2 Re(a* <z,y>) + |a|^2 ||z||^2."""
    pos = _trajectory(track, xs, vs, Y.shape[-3], delta_t)
    corr, energy = _pilot_corr(Y, track, cfg, pos, codebook)
    alphas = np.asarray(alphas)
    per = y_energy - 2.0 * np.real(alphas.conj() * corr) + np.abs(alphas) ** 2 * energy
    return np.sum(per, axis=-1)


def loglik_pilot(Y, track: Track, x: float, v: float, alphas, sigma_n: float,
                 delta_t: float, cfg: ArrayConfig) -> float:
    """Log-likelihood of the pilot sweep, additive constants dropped."""
    r = _pilot_residual(np.asarray(Y), track, cfg, x, v, alphas, delta_t, None)
    return float(-r / (2.0 * sigma_n ** 2))


def _pilot_chunk(Y, track, cfg, s, delta_t, sigma_n):
    K, L = Y.shape[:2]
    F = dft_codebook(cfg.n_t)
    r = track.r_max
    scale = -1.0 / (2.0 * sigma_n ** 2)

    y_energy = np.sum(np.abs(Y) ** 2, axis=(-2, -1))  # (K, L)

    def objective(sel, xs, vs, al):
        # candidates (n, G) against instances ``sel`` (n,)
        return scale * _pilot_residual_fast(Y[sel][:, None], y_energy[sel][:, None], track,
                                            cfg, xs, vs, al[:, None], delta_t, F)

    # per-instant location with the gain profiled out (or unit gain)
    Yi = Y.reshape(K * L, 1, cfg.n_r, cfg.n_t)

    def inst(xs):
        corr, energy = _pilot_corr(Yi, track, cfg, xs, F)
        if s.init_unit_gain:
            return 2.0 * corr.real - energy
        return np.abs(corr) ** 2 / energy

    x_inst, _ = line_search(inst, -r, r, s.coarse_x, s.grid_x, n=K * L)
    x_inst = x_inst.reshape(K, L)
    alphas = alpha_closed_form(Y, x_inst, track, cfg)
    x = x_inst[:, -1].copy()
    every = np.arange(K)
    v, val = line_search(lambda vs: objective(every, x[:, None], vs, alphas),
                         -s.v_max, s.v_max, s.coarse_v, s.grid_v, n=K)
    traces = [[float(t)] for t in val]
    iters = np.zeros(K, dtype=int)
    done = np.zeros(K, dtype=bool)
    for k in range(1, s.k_max + 1):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        xs, vs = x[idx], v[idx]
        al = alpha_closed_form(Y[idx], _trajectory(track, xs, vs, L, delta_t), track, cfg)
        val0 = objective(idx, xs[:, None], vs[:, None], al)[:, 0]
        x_new, _ = line_search(lambda c: objective(idx, c, vs[:, None], al), -r, r,
                               s.coarse_x, s.grid_x, n=idx.size, current=xs)
        v_new, val = line_search(lambda c: objective(idx, x_new[:, None], c, al),
                                 -s.v_max, s.v_max, s.coarse_v, s.grid_v, n=idx.size,
                                 current=vs)
        for j, i in enumerate(idx):
            traces[i] += [float(val0[j]), float(val[j])]
        conv = (np.abs(x_new - xs) < s.theta_th_x) & (np.abs(v_new - vs) < s.theta_th_v)
        x[idx], v[idx], iters[idx] = x_new, v_new, k
        done[idx[conv]] = True
    return x, v, iters, done, traces


def estimate_pilots_batch(Y, track: Track, cfg: ArrayConfig, settings: EstimatorSettings,
                          delta_t: float, sigma_n: float = 1.0) -> list[ParamEstimate]:
    """Pilot estimates for a stack of instances ``Y`` of shape (K, L, n_r, n_t)."""
    Y = np.asarray(Y, dtype=complex)
    if Y.ndim != 4 or Y.shape[1] < 2:
        raise ValueError("expected (K, L, n_r, n_t) snapshots with L >= 2")
    out = []
    for start in range(0, Y.shape[0], _CHUNK):
        x, v, it, done, tr = _pilot_chunk(Y[start:start + _CHUNK], track, cfg, settings,
                                          delta_t, sigma_n)
        out += [ParamEstimate(x=float(x[j]), v=float(v[j]), source="pilot",
                              status="ok" if done[j] else "not_converged",
                              iterations=int(it[j]), objective=tuple(tr[j]))
                for j in range(x.size)]
    return out


def estimate_from_pilots(Y, track: Track, cfg: ArrayConfig, settings: EstimatorSettings,
                         delta_t: float, sigma_n: float = 1.0,
                         strict: bool = False) -> ParamEstimate:
    """Coordinate-ascent ML estimate of (x, v) from pilot snapshots ``Y`` (L, n_r, n_t).

    Each instant is first located on its own (gain profiled out), the gains
    follow in closed form and the speed is searched with the trajectory
    anchored at the final instant.  Iterations then cycle gain, location and
    speed updates until both moves fall below the thresholds.
    """
    Y = np.asarray(Y, dtype=complex)
    if Y.ndim != 3 or Y.shape[0] < 2:
        raise ValueError("expected (L, n_r, n_t) snapshots with L >= 2")
    est = estimate_pilots_batch(Y[None], track, cfg, settings, delta_t, sigma_n)[0]
    if strict and not est.ok:
        raise NotConverged("pilot estimator hit k_max", est)
    return est


# -- measurement estimator ---------------------------------------------------

def _min_range_point(track: Track):
    if isinstance(track, LinearTrack):
        return 0.0
    grid = np.linspace(-track.r_max, track.r_max, 20001)
    return float(grid[np.argmin(np.hypot(grid, track.value(grid)))])


def init_from_measurements(tau_m_last: float, fd_m_last: float, track: Track, fc: float,
                           settings: EstimatorSettings | None = None,
                           clamp: bool = False) -> tuple[float, float]:
    """Starting point from the last delay and Doppler.

    The side of the BS follows from the Doppler sign (forward motion
    assumed); the range equation ``x^2 + f(x)^2 = (c tau)^2`` is solved on
    that side (closed form on a straight track, bisection otherwise) and the
    Doppler is inverted for the signed speed.

    Raises SignAmbiguity when ``|fd|`` is below ``settings.fd_eps`` and
    NoGeometricSolution when the delay is below the minimum BS-track delay
    (unless ``clamp``, which then starts at the closest track point).
    """
    s = EstimatorSettings() if settings is None else settings
    if abs(fd_m_last) < s.fd_eps:
        raise SignAmbiguity(f"|f_d| = {abs(fd_m_last):.3g} Hz below {s.fd_eps} Hz")
    rng_sq = (SPEED_OF_LIGHT * tau_m_last) ** 2
    side = -np.sign(fd_m_last)
    x_min = _min_range_point(track)

    def h(x):
        return x * x + float(track.value(x)) ** 2 - rng_sq

    if h(x_min) > 0:
        if not clamp:
            raise NoGeometricSolution("measured delay below the minimum BS-track delay")
        x0 = x_min
    elif isinstance(track, LinearTrack):
        x0 = side * math.sqrt(rng_sq - track.d ** 2)
    else:
        edge = track.r_max if side > 0 else -track.r_max
        if h(edge) <= 0:
            x0 = edge
        else:
            lo, hi = x_min, edge
            while abs(hi - lo) > 1e-10:
                mid = 0.5 * (lo + hi)
                if h(mid) > 0:
                    hi = mid
                else:
                    lo = mid
            x0 = 0.5 * (lo + hi)
    g = float(radial_factor(track, x0))
    if abs(g) < 1e-12:
        v0 = s.v_prior
    else:
        v0 = -SPEED_OF_LIGHT * fd_m_last / (2.0 * fc * g)
    return float(x0), float(np.clip(v0, -s.v_max, s.v_max))


def _measurement_objective(tau_m, fd_m, track, xs, vs, fc, var, delta_t):
    n_obs = tau_m.shape[-1]
    pos = _trajectory(track, xs, vs, n_obs, delta_t)
    tau = np.hypot(pos, track.value(pos)) / SPEED_OF_LIGHT
    fd = (-2.0 * fc / SPEED_OF_LIGHT) * np.asarray(vs, dtype=float)[..., None] \
        * radial_factor(track, pos)
    return -(np.sum((tau_m - tau) ** 2, axis=-1) / (2.0 * var.tau)
             + np.sum((fd_m - fd) ** 2, axis=-1) / (2.0 * var.fd))


def loglik_measurements(tau_m, fd_m, track: Track, x: float, v: float, fc: float,
                        variances: MeasurementVariances, delta_t: float) -> float:
    """Gaussian log-likelihood of delay/Doppler measurements, constants dropped."""
    return float(_measurement_objective(np.asarray(tau_m, dtype=float),
                                        np.asarray(fd_m, dtype=float), track, x, v, fc,
                                        variances, delta_t))


def estimate_measurements_batch(tau_m, fd_m, track: Track, fc: float,
                                variances: MeasurementVariances,
                                settings: EstimatorSettings,
                                delta_t: float) -> list[ParamEstimate]:
    """Measurement estimates for stacked instances, ``tau_m``/``fd_m`` of shape (K, L)."""
    tau_m = np.atleast_2d(np.asarray(tau_m, dtype=float))
    fd_m = np.atleast_2d(np.asarray(fd_m, dtype=float))
    if tau_m.shape != fd_m.shape or tau_m.shape[1] < 2:
        raise ValueError("expected matching (K, L) measurements with L >= 2")
    s = settings
    r = track.r_max
    K = tau_m.shape[0]
    x = np.empty(K)
    v = np.empty(K)
    flags = [[] for _ in range(K)]
    for j in range(K):
        try:
            x[j], v[j] = init_from_measurements(tau_m[j, -1], fd_m[j, -1], track, fc, s,
                                                clamp=s.clamp_delay)
        except SignAmbiguity:
            x[j], v[j] = 0.0, s.v_prior
            flags[j].append("sign_ambiguity")
        except NoGeometricSolution:
            x[j], v[j] = _min_range_point(track), s.v_prior
            flags[j].append("no_geometric_solution")
    x = np.clip(x, -r, r)

    def objective(sel, xs, vs):
        return _measurement_objective(tau_m[sel][:, None], fd_m[sel][:, None], track, xs, vs,
                                      fc, variances, delta_t)

    all_idx = np.arange(K)
    traces = [[float(t)] for t in objective(all_idx, x[:, None], v[:, None])[:, 0]]
    iters = np.zeros(K, dtype=int)
    done = np.zeros(K, dtype=bool)
    for k in range(1, s.k_max + 1):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        xs, vs = x[idx], v[idx]
        x_new, _ = line_search(lambda c: objective(idx, c, vs[:, None]), -r, r,
                               s.coarse_x, s.grid_x, n=idx.size, current=xs)
        v_new, val = line_search(lambda c: objective(idx, x_new[:, None], c),
                                 -s.v_max, s.v_max, s.coarse_v, s.grid_v, n=idx.size,
                                 current=vs)
        for j, i in enumerate(idx):
            traces[i].append(float(val[j]))
        conv = (np.abs(x_new - xs) < s.theta_th_x) & (np.abs(v_new - vs) < s.theta_th_v)
        x[idx], v[idx], iters[idx] = x_new, v_new, k
        done[idx[conv]] = True
    out = []
    for j in range(K):
        f = flags[j] + ([] if done[j] else ["not_converged"])
        out.append(ParamEstimate(x=float(x[j]), v=float(v[j]), source="measurement",
                                 status=",".join(f) if f else "ok", iterations=int(iters[j]),
                                 objective=tuple(traces[j])))
    return out


def estimate_from_measurements(tau_m, fd_m, track: Track, fc: float,
                               variances: MeasurementVariances,
                               settings: EstimatorSettings, delta_t: float,
                               strict: bool = False) -> ParamEstimate:
    """Coordinate-ascent ML estimate of (x, v) from delay/Doppler measurements (length L)."""
    tau_m = np.asarray(tau_m, dtype=float)
    if tau_m.ndim != 1:
        raise ValueError("expected one measurement per observation instant")
    est = estimate_measurements_batch(tau_m[None], np.asarray(fd_m, dtype=float)[None],
                                      track, fc, variances, settings, delta_t)[0]
    if strict and "not_converged" in est.status:
        raise NotConverged("measurement estimator hit k_max", est)
    return est
