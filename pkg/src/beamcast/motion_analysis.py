"""Least-squares speed/acceleration from a short run of noisy positions.

Displacements are taken relative to the first instant,
``dx_i = v (i dt) + a (i dt)^2 / 2 + n_{i+1} - n_1`` for ``i = 1..L-1``,
so the displacement noise is correlated through the shared ``n_1``.  The
helpers here give the closed-form estimator, its variances, and a
Monte-Carlo check of how those variances scale with ``dt``, ``L`` and the
noise power.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSystem

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MotionObservation:
    delta_x_n: np.ndarray  # (..., L-1) displacements relative to instant 1
    delta_t: float
    sigma_n: float = 0.0

    @property
    def n_obs(self) -> int:
        return np.shape(self.delta_x_n)[-1] + 1


def power_sums(L: int) -> tuple[int, int, int, int]:
    """Sums of i, i^2, i^3 and i^4 for i = 1..L."""
    if L < 0:
        raise ValueError("L must be non-negative")
    s1 = (L + 1) * L // 2
    s2 = (2 * L + 1) * (L + 1) * L // 6
    s3 = (L + 1) ** 2 * L ** 2 // 4
    s4 = (3 * L * L + 3 * L - 1) * (2 * L + 1) * (L + 1) * L // 30
    return s1, s2, s3, s4


def _denominator(L: int):
    _, s2, s3, s4 = power_sums(L - 1)
    den = s4 * s2 - s3 * s3
    if den == 0:
        raise DegenerateSystem(f"speed/acceleration system is singular for L={L}")
    return den


def ls_speed_accel(obs: MotionObservation):
    """Closed-form least-squares (v, a); batched over leading axes of ``delta_x_n``."""
    dx = np.asarray(obs.delta_x_n, dtype=float)
    L = dx.shape[-1] + 1
    den = _denominator(L)
    _, s2, s3, s4 = power_sums(L - 1)
    i = np.arange(1, L, dtype=float)
    w_v = (s4 * i - s3 * i * i) / den
    w_a = (s2 * i * i - s3 * i) / den
    v = dx @ w_v / obs.delta_t
    a = 2.0 * (dx @ w_a) / obs.delta_t ** 2
    if np.ndim(v) == 0:
        return float(v), float(a)
    return v, a


def va_variances(L: int, delta_t: float, sigma_n: float) -> tuple[float, float]:
    """Closed-form variances of the LS speed and acceleration estimates."""
    if L < 3:
        raise DegenerateSystem("need L >= 3 for joint speed/acceleration")
    den = _denominator(L)
    s1, s2, s3, s4 = power_sums(L - 1)
    var_v = sigma_n ** 2 / delta_t ** 2 * (s4 / den + ((s4 * s1 - s3 * s2) / den) ** 2)
    var_a = 4.0 * sigma_n ** 2 / delta_t ** 4 * (s2 / den + ((s2 * s2 - s3 * s1) / den) ** 2)
    return float(var_v), float(var_a)


def simulate_displacements(L: int, delta_t: float, sigma_n: float, v: float, a: float,
                           trials: int, rng: np.random.Generator) -> np.ndarray:
    """Noisy displacements, shape (trials, L-1), from differenced location noise."""
    t = delta_t * np.arange(1, L)
    clean = v * t + 0.5 * a * t * t
    n = sigma_n * rng.standard_normal((trials, L))
    return clean + (n[:, 1:] - n[:, :1])


def _empirical(L, dt, sigma, trials, rng, v=71.1, a=0.0):
    dx = simulate_displacements(L, dt, sigma, v, a, trials, rng)
    v_hat, a_hat = ls_speed_accel(MotionObservation(dx, dt, sigma))
    return float(np.var(v_hat, ddof=1)), float(np.var(a_hat, ddof=1))


@dataclass(frozen=True)
class ScalingRow:
    param: str
    value: float
    var_v_emp: float
    var_v_theory: float
    var_a_emp: float
    var_a_theory: float


@dataclass
class ScalingResult:
    rows: list
    slopes: dict  # "delta_t"/"sigma_sq"/"L" -> (slope_v, slope_a) in log-log

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "value", "var_v_emp", "var_v_theory", "var_a_emp",
                        "var_a_theory"])
            for r in self.rows:
                w.writerow([r.param, repr(r.value), repr(r.var_v_emp), repr(r.var_v_theory),
                            repr(r.var_a_emp), repr(r.var_a_theory)])


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def scaling_study(L_list, delta_t_list, sigma_list, trials: int, rng: np.random.Generator,
                  L_base: int = 3, delta_t_base: float = 0.1,
                  sigma_base: float = 0.1) -> ScalingResult:
    """Empirical vs closed-form variances along three one-parameter sweeps.

    Each sweep varies one of ``delta_t``, ``sigma_n`` or ``L`` around the
    base point; every grid point gets its own child RNG stream.  Slopes are
    fitted to the empirical variances (sigma sweep against sigma^2).
    """
    if trials < 1000:
        raise ValueError("trials must be >= 1000")
    sweeps = [("delta_t", list(delta_t_list)), ("sigma_n", list(sigma_list)),
              ("L", list(L_list))]
    n_points = sum(len(v) for _, v in sweeps)
    streams = iter(rng.spawn(n_points))
    rows, slopes = [], {}
    for name, values in sweeps:
        ev, ea = [], []
        for val in values:
            L, dt, sig = L_base, delta_t_base, sigma_base
            if name == "delta_t":
                dt = float(val)
            elif name == "sigma_n":
                sig = float(val)
            else:
                L = int(val)
            var_v, var_a = _empirical(L, dt, sig, trials, next(streams))
            th_v, th_a = va_variances(L, dt, sig)
            rows.append(ScalingRow(name, float(val), var_v, th_v, var_a, th_a))
            ev.append(var_v)
            ea.append(var_a)
        if len(values) >= 2:
            xs = np.asarray(values, dtype=float)
            if name == "sigma_n":
                name, xs = "sigma_sq", xs ** 2
            slopes[name] = (loglog_slope(xs, ev), loglog_slope(xs, ea))
    return ScalingResult(rows=rows, slopes=slopes)
