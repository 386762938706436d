"""Fitting baselines, the fitting-bound sweep and the air-time overhead model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..track_geometry import PiecewiseTrack, Track, fit_track, fitting_error_bound
from .config import ScenarioConfig


# -- track fitting -----------------------------------------------------------

@dataclass(frozen=True)
class FitRow:
    method: str
    mae: float
    n_params: int


def bin_average_fit(x, f, n_pieces: int, r_max: float):
    """Piecewise-constant baseline: the mean sample of each piece."""
    edges = np.linspace(-r_max, r_max, n_pieces + 1)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_pieces - 1)
    counts = np.bincount(idx, minlength=n_pieces)
    means = np.bincount(idx, weights=f, minlength=n_pieces) / np.maximum(counts, 1)

    def predict(q):
        j = np.clip(np.searchsorted(edges, q, side="right") - 1, 0, n_pieces - 1)
        return means[j]

    return predict


def baseline_comparison_fit(x, f, cfg: ScenarioConfig, rng: np.random.Generator,
                            x_eval=None, f_eval=None) -> tuple[list[FitRow], PiecewiseTrack]:
    """MAE of the piecewise-linear fitter, a degree-2 polynomial and a bin average.

    Errors are measured on ``(x_eval, f_eval)`` when given, otherwise on the
    training samples themselves.
    """
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    xe = x if x_eval is None else np.asarray(x_eval, dtype=float)
    fe = f if f_eval is None else np.asarray(f_eval, dtype=float)
    track = fit_track(x, f, cfg.fit_pieces, cfg.r_max, lr=cfg.fit_lr, batch_size=cfg.fit_batch,
                      max_epochs=cfg.fit_epochs, rng=rng)
    poly = np.polynomial.Polynomial.fit(x, f, 2)
    avg = bin_average_fit(x, f, cfg.fit_pieces, cfg.r_max)
    rows = [FitRow("piecewise", float(np.mean(np.abs(track.value(xe) - fe))),
                   cfg.fit_pieces + 1),
            FitRow("poly2", float(np.mean(np.abs(poly(xe) - fe))), 3),
            FitRow("bin_average", float(np.mean(np.abs(avg(xe) - fe))), cfg.fit_pieces)]
    return rows, track


@dataclass(frozen=True)
class BoundRow:
    delta_x_nominal: float
    n_pieces: int
    delta_x: float
    sigma_n: float
    mae: float
    bound: float
    gap_db: float

    @property
    def within(self) -> bool:
        return self.mae <= self.bound


def bound_check(track: Track, curvature: float, deltas, sigmas, cfg: ScenarioConfig,
                rng_for) -> list[BoundRow]:
    """Fitting MAE against the piece-width bound for a grid of widths and noise levels.

    The piece count is the nearest integer to ``2 r_max / delta``; the bound
    uses the realised width.  ``rng_for(k)`` gives the stream of cell ``k``.
    """
    rows = []
    k = 0
    for dx in deltas:
        n_pieces = max(1, int(round(2.0 * cfg.r_max / dx)))
        width = 2.0 * cfg.r_max / n_pieces
        for sig in sigmas:
            rng = rng_for(k)
            k += 1
            x = rng.uniform(-cfg.r_max, cfg.r_max, cfg.fit_samples)
            f = track.value(x) + (sig * rng.standard_normal(x.size) if sig > 0 else 0.0)
            fitted = fit_track(x, f, n_pieces, cfg.r_max, lr=cfg.fit_lr,
                               batch_size=cfg.fit_batch, max_epochs=cfg.fit_epochs, rng=rng)
            mae = float(np.mean(np.abs(fitted.value(x) - f)))
            bound = fitting_error_bound(curvature, width, sig)
            gap = 10.0 * math.log10(bound / mae) if mae > 0 else math.inf
            rows.append(BoundRow(float(dx), n_pieces, width, float(sig), mae, bound, gap))
    return rows


# -- overhead ----------------------------------------------------------------

@dataclass(frozen=True)
class OverheadRow:
    n_mts: int
    pred_ratio: float
    bat_ratio: float
    pred_throughput_mbps: float  # mean effective throughput of one MT's stream
    bat_throughput_mbps: float
    pred_saturated: bool
    bat_saturated: bool


def beam_change_rate(cfg: ScenarioConfig) -> float:
    """Mean codeword changes per second for an MT crossing the section at mean speed."""
    return cfg.speed_mean * (cfg.n_t - 1) / (2.0 * cfg.r_max)


def overhead_throughput(cfg: ScenarioConfig, n_mts_list, se: float | None = None,
                        slot_scale: float = 1.0) -> list[OverheadRow]:
    """Air-time share spent on beam training/feedback and the resulting throughput.

    Prediction: per MT and prediction period, L pilot sweeps of N_t beams plus
    feedback of L (N_t N_r complex pilots + 2 measurements) at 32 bits per
    real value.  Beam alignment/tracking: per MT and 10 ms period, 3 beam-pair
    trainings plus one 32-bit index report, and a 20 ms outage at every beam
    change.  Feedback is sent at the link rate SE * B.  Ratios of 1 or more
    saturate the resource and are clamped.
    """
    se = cfg.se_bpshz if se is None else se
    rate = se * cfg.bandwidth
    slot = cfg.slot_s * slot_scale
    pred_air = (cfg.n_obs * cfg.n_t * slot
                + cfg.n_obs * (2 * cfg.n_t * cfg.n_r + 2) * cfg.bits_per_real / rate)
    bat_air = cfg.bat_beams * slot + cfg.bits_per_real / rate
    bat_delay = min(1.0, cfg.bat_delay * beam_change_rate(cfg))
    rows = []
    for n in n_mts_list:
        pred = n * pred_air / cfg.prediction_duration
        bat = n * bat_air / cfg.bat_period
        pred_c, bat_c = min(pred, 1.0), min(bat, 1.0)
        rows.append(OverheadRow(
            n_mts=int(n), pred_ratio=pred_c, bat_ratio=bat_c,
            pred_throughput_mbps=(1.0 - pred_c) * rate / 1e6,
            bat_throughput_mbps=(1.0 - bat_c) * rate * (1.0 - bat_delay) / 1e6,
            pred_saturated=pred >= 1.0, bat_saturated=bat >= 1.0))
    return rows


def linear_r2(x, y) -> float:
    """Coefficient of determination of a least-squares line through (x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    coef = np.polyfit(x, y, 1)
    resid = y - np.polyval(coef, x)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return 1.0 if ss_tot == 0 else float(1.0 - np.sum(resid ** 2) / ss_tot)
