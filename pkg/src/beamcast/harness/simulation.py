"""Monte-Carlo trials: MT drops, observations, estimation, fusion and beam plans.

One trial is a prediction window with ``mt.per_window`` MTs sharing the BS.
Every source (optimal, pilot, measurement, fused) is scored on the same
channel realisation so comparisons use common random numbers.
"""

from __future__ import annotations

import functools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..beam_prediction import plan_from_positions, predict_locations
from ..channel_model import gain_amplitude, gen_measurements, gen_pilot_observations, path_gain
from ..errors import EmptyBin
from ..estimation import estimate_measurements_batch, estimate_pilots_batch
from ..fusion_net import FusionNetwork, TrainResult, train_fusion
from ..track_geometry import PiecewiseTrack, Track, fit_track, locate
from .config import ScenarioConfig

logger = logging.getLogger(__name__)

SOURCES = ("optimal", "pilot", "measurement", "fused")
ESTIMATED = ("pilot", "measurement", "fused")
_PURPOSES = {"fit": 1, "bound": 2, "fusion": 3, "mse": 4, "endtoend": 5, "motion": 6,
             "train": 7}


def trial_rng(seed: int, purpose: str, trial: int = 0) -> np.random.Generator:
    """Independent stream per (seed, purpose, trial), whatever the worker layout."""
    return np.random.default_rng(np.random.SeedSequence(seed,
                                                        spawn_key=(_PURPOSES[purpose], trial)))


# -- scenario ----------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """True track plus the track the BS works with (learned for curved tracks)."""

    cfg: ScenarioConfig
    kind: str
    true_track: Track
    est_track: Track


def track_samples(cfg: ScenarioConfig, track: Track, rng: np.random.Generator,
                  n: int | None = None, noise: float | None = None):
    n = cfg.fit_samples if n is None else n
    noise = cfg.fit_noise if noise is None else noise
    x = rng.uniform(-cfg.r_max, cfg.r_max, n)
    f = track.value(x)
    if noise > 0:
        f = f + noise * rng.standard_normal(n)
    return x, f


@functools.lru_cache(maxsize=8)
def _fitted_track(cfg: ScenarioConfig, seed: int) -> PiecewiseTrack:
    true_track = cfg.replace(track_kind="quadratic").track()
    rng = trial_rng(seed, "fit")
    x, f = track_samples(cfg, true_track, rng)
    return fit_track(x, f, cfg.fit_pieces, cfg.r_max, lr=cfg.fit_lr, batch_size=cfg.fit_batch,
                     max_epochs=cfg.fit_epochs, rng=rng)


def build_scenario(cfg: ScenarioConfig, kind: str | None = None, seed: int = 0) -> Scenario:
    """Straight tracks are known analytically; curved ones are learned from survey samples."""
    kind = cfg.track_kind if kind is None else kind
    sub = cfg.replace(track_kind=kind)
    true_track = sub.track()
    est_track = true_track if kind == "linear" else _fitted_track(sub, seed)
    return Scenario(cfg=sub, kind=kind, true_track=true_track, est_track=est_track)


# -- MT states and observations ------------------------------------------------

def sample_mt_state(cfg: ScenarioConfig, rng: np.random.Generator, n: int | None = None):
    """Projected location, signed speed (m/s) and acceleration (m/s^2) of ``n`` MTs.

    All MTs of one draw share the train direction.
    """
    n = cfg.mt_per_window if n is None else n
    if cfg.mt_direction == "random":
        direction = 1.0 if rng.random() < 0.5 else -1.0
    else:
        direction = float(cfg.mt_direction)
    x = rng.uniform(-cfg.r_max, cfg.r_max, n)
    v = direction * cfg.speed_mean + rng.laplace(0.0, cfg.speed_laplace_scale, n)
    a = rng.normal(0.0, math.sqrt(cfg.accel_var), n)
    return x, v, a


def _moved(track: Track, x, v, a, t):
    """Location after time ``t`` (may be negative) under constant acceleration."""
    return locate(track, x, -(v * t + 0.5 * a * t * t))


@dataclass
class Observations:
    traj: np.ndarray  # (U, L) true locations at the observation instants
    Y: np.ndarray  # (U, L, n_r, n_t) pilot snapshots
    tau: np.ndarray  # (U, L)
    fd: np.ndarray  # (U, L)


def observe(scn: Scenario, x, v, a, rng: np.random.Generator) -> Observations:
    """Pilot sweeps and delay/Doppler measurements over the L observation instants."""
    cfg, track = scn.cfg, scn.true_track
    times = (np.arange(cfg.n_obs) - (cfg.n_obs - 1)) * cfg.delta_t
    traj = np.stack([_moved(track, x, v, a, t) for t in times], axis=-1)
    arr = cfg.array()
    var = cfg.variances()
    Ys, taus, fds = [], [], []
    for u in range(traj.shape[0]):
        alphas = path_gain(track, traj[u], cfg.fc, rng, **cfg.power_kwargs())
        Ys.append(gen_pilot_observations(track, traj[u], alphas, arr, cfg.pilot_sigma_n, rng))
        tau, fd = gen_measurements(track, traj[u], v[u] + a[u] * times, cfg.fc, var, rng)
        taus.append(tau)
        fds.append(fd)
    return Observations(traj=traj, Y=np.stack(Ys), tau=np.stack(taus), fd=np.stack(fds))


def estimate_sources(scn: Scenario, obs: Observations, net: FusionNetwork | None):
    """(x, v, status) arrays per estimated source; fused is absent without a network."""
    cfg = scn.cfg
    s = cfg.estimator_settings()
    pil = estimate_pilots_batch(obs.Y, scn.est_track, cfg.array(), s, cfg.delta_t,
                                cfg.pilot_sigma_n)
    mea = estimate_measurements_batch(obs.tau, obs.fd, scn.est_track, cfg.fc, cfg.variances(),
                                      s, cfg.delta_t)
    out = {}
    for name, ests in (("pilot", pil), ("measurement", mea)):
        out[name] = (np.array([e.x for e in ests]), np.array([e.v for e in ests]),
                     [e.status for e in ests])
    if net is not None:
        fx, fv = net(out["pilot"][0], out["pilot"][1], out["measurement"][0],
                     out["measurement"][1])
        out["fused"] = (np.atleast_1d(fx), np.atleast_1d(fv), ["ok"] * len(pil))
    return out


# -- records -----------------------------------------------------------------

@dataclass
class MetricRecord:
    """Outcome for one MT of one trial."""

    trial: int
    mt: int
    track: str
    x: float
    v: float
    a: float
    estimates: dict = field(default_factory=dict)  # source -> (x, v)
    status: dict = field(default_factory=dict)  # source -> status string
    accuracy: dict = field(default_factory=dict)  # source -> beam accuracy
    se: dict = field(default_factory=dict)  # source -> single-link SE, bps/Hz
    mu_se: dict = field(default_factory=dict)  # source -> per-MT SE in the MU group

    def sq_error(self, source: str) -> tuple[float, float]:
        ex, ev = self.estimates[source]
        return (ex - self.x) ** 2, (ev - self.v) ** 2

    HEADER = (["trial", "mt", "track", "x_true", "v_true", "a_true"]
              + [f"{q}_{s}" for s in ESTIMATED for q in ("x", "v", "sqerr_x", "sqerr_v",
                                                          "status")]
              + [f"{q}_{s}" for s in SOURCES for q in ("acc", "se", "mu_se")])

    def row(self) -> list:
        out = [self.trial, self.mt, self.track, repr(self.x), repr(self.v), repr(self.a)]
        for s in ESTIMATED:
            if s in self.estimates:
                ex, ev = self.estimates[s]
                e2x, e2v = self.sq_error(s)
                out += [repr(ex), repr(ev), repr(e2x), repr(e2v), self.status.get(s, "ok")]
            else:
                out += ["", "", "", "", "missing"]
        for s in SOURCES:
            out += [repr(d[s]) if s in d else "" for d in (self.accuracy, self.se, self.mu_se)]
        return out


def _masked_mean(values, mask):
    counts = mask.sum(axis=0)
    total = np.where(mask, values, 0.0).sum(axis=0)
    return np.where(counts > 0, total / np.maximum(counts, 1), np.nan)


def _score_plans(scn: Scenario, x, v, a, ests, rng):
    """Beam accuracy and SE of every source over the prediction horizon."""
    cfg = scn.cfg
    n_p, dt_p = cfg.n_predict, cfg.delta_t_p
    arr = cfg.array()
    steps = np.arange(1, n_p + 1)[:, None] * dt_p
    raw = _moved(scn.true_track, x[None, :], v[None, :], a[None, :], steps)
    # instants after an MT has left the served section belong to the next cell
    inside = np.abs(raw) <= cfg.r_max
    truth = np.clip(raw, -cfg.r_max, cfg.r_max)
    U = x.size
    # one gain phase per MT for the window; the amplitude follows the path loss
    phase = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, U))
    amp = gain_amplitude(np.hypot(truth, scn.true_track.value(truth)), cfg.fc,
                         **cfg.power_kwargs()) * phase
    plans = {"optimal": (x, v, scn.true_track)}
    for s in ESTIMATED:
        if s in ests:
            plans[s] = (ests[s][0], ests[s][1], scn.est_track)
    acc, se, mu_se = {}, {}, {}
    for s, (ex, ev, tr) in plans.items():
        pos, clamped = predict_locations(tr, ex, ev, n_p, dt_p)
        group = plan_from_positions(pos, truth, amp, scn.true_track, arr, dt_p, 1.0,
                                    cfg.total_power, clamped, pred_track=tr)
        acc[s] = _masked_mean(group.tx_idx == group.genie_tx_idx, inside)
        mu_se[s] = _masked_mean(group.se_per_mt, inside)
        se[s] = np.array([
            _masked_mean(plan_from_positions(pos[:, [u]], truth[:, [u]], amp[:, [u]],
                                             scn.true_track, arr, dt_p, 1.0, cfg.link_power_units,
                                             pred_track=tr).se[:, None], inside[:, [u]])[0]
            for u in range(U)])
    return acc, se, mu_se


def run_trial(scn: Scenario, net: FusionNetwork | None, rng: np.random.Generator,
              trial: int = 0, plan: bool = True) -> list[MetricRecord]:
    """One window: drop MTs, observe, estimate, fuse and (optionally) plan beams.

    Degenerate estimator outcomes are flagged in the record status, never raised.
    """
    x, v, a = sample_mt_state(scn.cfg, rng)
    obs = observe(scn, x, v, a, rng)
    ests = estimate_sources(scn, obs, net)
    if plan:
        acc, se, mu_se = _score_plans(scn, x, v, a, ests, rng)
    records = []
    for u in range(x.size):
        rec = MetricRecord(trial=trial, mt=u, track=scn.kind, x=float(x[u]), v=float(v[u]),
                           a=float(a[u]))
        for s, (ex, ev, st) in ests.items():
            rec.estimates[s] = (float(ex[u]), float(ev[u]))
            rec.status[s] = st[u]
        if plan:
            for s in acc:
                if np.isnan(acc[s][u]):
                    prev = rec.status.get(s, "ok")
                    rec.status[s] = "left_cell" if prev == "ok" else prev + ",left_cell"
                    continue
                rec.accuracy[s] = float(acc[s][u])
                rec.se[s] = float(se[s][u])
                rec.mu_se[s] = float(mu_se[s][u])
        records.append(rec)
    return records


def _trial_job(args):
    scn, net, seed, purpose, trial, plan = args
    return run_trial(scn, net, trial_rng(seed, purpose, trial), trial, plan)


def run_trials(scn: Scenario, net: FusionNetwork | None, seed: int, purpose: str,
               n_trials: int, plan: bool = True, workers: int = 1,
               first: int = 0) -> list[MetricRecord]:
    """Trials ``first .. first + n_trials - 1`` in order, serially or in a process pool."""
    jobs = [(scn, net, seed, purpose, t, plan) for t in range(first, first + n_trials)]
    if workers <= 1:
        groups = [_trial_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(_trial_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [rec for g in groups for rec in g]


# -- fusion data -------------------------------------------------------------

def fusion_dataset(records: list[MetricRecord]):
    """Inputs (x_p, v_p, x_m, v_m) and targets (x, v) from trial records."""
    X = np.array([[*r.estimates["pilot"], *r.estimates["measurement"]] for r in records])
    T = np.array([[r.x, r.v] for r in records])
    return X.reshape(-1, 4), T.reshape(-1, 2)


def bin_balanced_weights(X, T, bin_width: float, r_max: float, floor: float = 1e-12):
    """Per-sample loss weights, inverse of the best single-source MSE in the sample's bin.

    Location and speed are weighted separately and each column is scaled to
    mean 1, so every location bin contributes in relative rather than
    absolute terms.
    """
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    n_bins = int(math.ceil(2.0 * r_max / bin_width - 1e-9))
    idx = np.clip(np.floor((T[:, 0] + r_max) / bin_width).astype(int), 0, n_bins - 1)
    W = np.ones_like(T)
    for q in range(2):
        err_p = (X[:, q] - T[:, q]) ** 2
        err_m = (X[:, 2 + q] - T[:, q]) ** 2
        counts = np.bincount(idx, minlength=n_bins)
        safe = np.maximum(counts, 1)
        best = np.minimum(np.bincount(idx, err_p, n_bins) / safe,
                          np.bincount(idx, err_m, n_bins) / safe)
        w = 1.0 / np.maximum(best[idx], floor)
        W[:, q] = w / w.mean()
    return W


@dataclass
class FusionBundle:
    net: FusionNetwork
    result: TrainResult | None
    X: np.ndarray
    T: np.ndarray


_FUSION_CACHE: dict = {}


def fit_fusion(cfg: ScenarioConfig, X, T, seed: int) -> TrainResult:
    weights = bin_balanced_weights(X, T, cfg.bin_width, cfg.r_max) \
        if cfg.fusion_bin_balanced else None
    return train_fusion(X, T, cfg.train_settings(), trial_rng(seed, "train"), weights=weights)


def train_fusion_for(scn: Scenario, seed: int, n_samples: int | None = None,
                     workers: int = 1) -> FusionBundle:
    """Simulate a training set for this scenario and train the fusion network (cached)."""
    cfg = scn.cfg
    n_samples = cfg.fusion_samples if n_samples is None else n_samples
    key = (cfg, scn.kind, seed, n_samples)
    if key in _FUSION_CACHE:
        return _FUSION_CACHE[key]
    n_windows = -(-n_samples // cfg.mt_per_window)
    recs = run_trials(scn, None, seed, "fusion", n_windows, plan=False, workers=workers)
    X, T = fusion_dataset(recs)
    X, T = X[:n_samples], T[:n_samples]
    result = fit_fusion(cfg, X, T, seed)
    bundle = FusionBundle(net=result.net, result=result, X=X, T=T)
    _FUSION_CACHE[key] = bundle
    return bundle


# -- aggregation -------------------------------------------------------------

@dataclass(frozen=True)
class BinRow:
    lo: float
    hi: float
    source: str
    n: int
    mse_x: float
    mse_v: float
    flag: str = ""


def binned_mse(locations, sq_err_x, sq_err_v, source: str, bin_width: float, r_max: float,
               absolute: bool = False) -> list[BinRow]:
    """Per-bin mean squared errors; empty bins are kept with an ``empty`` flag."""
    loc = np.abs(locations) if absolute else np.asarray(locations, dtype=float)
    lo_edge = 0.0 if absolute else -r_max
    n_bins = int(math.ceil((r_max - lo_edge) / bin_width - 1e-9))
    idx = np.clip(np.floor((loc - lo_edge) / bin_width).astype(int), 0, n_bins - 1)
    rows = []
    for b in range(n_bins):
        sel = idx == b
        lo = lo_edge + b * bin_width
        hi = min(lo + bin_width, r_max)
        if not np.any(sel):
            rows.append(BinRow(lo, hi, source, 0, math.nan, math.nan, "empty"))
            continue
        rows.append(BinRow(lo, hi, source, int(sel.sum()), float(np.mean(sq_err_x[sel])),
                           float(np.mean(sq_err_v[sel]))))
    return rows


def mse_vs_location(records: list[MetricRecord], bin_width: float, r_max: float,
                    clip: float | None = 30.0, absolute: bool = False,
                    strict: bool = False) -> list[BinRow]:
    """Binned location/speed MSE per estimated source, optionally clipped for plotting.

    Empty bins are flagged (or raise EmptyBin with ``strict``).
    """
    if not records:
        raise ValueError("no records to aggregate")
    x = np.array([r.x for r in records])
    rows = []
    for s in ESTIMATED:
        if s not in records[0].estimates:
            continue
        err = np.array([r.sq_error(s) for r in records])
        for row in binned_mse(x, err[:, 0], err[:, 1], s, bin_width, r_max, absolute):
            if row.flag == "empty" and strict:
                raise EmptyBin(f"no samples in [{row.lo}, {row.hi})")
            if clip is not None and row.n:
                row = BinRow(row.lo, row.hi, s, row.n, min(row.mse_x, clip),
                             min(row.mse_v, clip), row.flag)
            rows.append(row)
    return rows


def summarize(records: list[MetricRecord]) -> dict:
    """Mean accuracy, single-link SE and MU SE per source."""
    out = {}
    for s in SOURCES:
        have = [r for r in records if s in r.accuracy]
        if have:
            out[s] = {"accuracy": float(np.mean([r.accuracy[s] for r in have])),
                      "se": float(np.mean([r.se[s] for r in have])),
                      "mu_se": float(np.mean([r.mu_se[s] for r in have])),
                      "n": len(have)}
    return out
