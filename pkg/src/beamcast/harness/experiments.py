"""Named experiments writing ``<experiment>_<seed>.csv`` plus a manifest."""

from __future__ import annotations

import csv
import logging
import os
import platform
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..fusion_net import FusionNetwork, write_dataset
from ..motion_analysis import scaling_study
from ..track_geometry import write_piecewise
from .config import ScenarioConfig
from .metrics import baseline_comparison_fit, bound_check, linear_r2, overhead_throughput
from .simulation import (
    ESTIMATED, SOURCES, MetricRecord, binned_mse, build_scenario, mse_vs_location, run_trials,
    summarize, track_samples, train_fusion_for, trial_rng,
)

logger = logging.getLogger(__name__)

EXPERIMENTS = ("fit", "fusion-train", "mse-sweep", "endtoend", "overhead", "motion-scaling",
               "bound-check")
BOUND_DELTAS = (3.0, 6.0, 12.0, 25.0)
BOUND_SIGMAS = (0.0, 0.1)
MT_COUNTS = (4, 10, 20, 50, 100)
SCALING_DT = (0.025, 0.05, 0.1, 0.2, 0.4)
SCALING_SIGMA = (0.025, 0.05, 0.1, 0.2, 0.4)
SCALING_L = (3, 5, 10, 20, 50, 100)
SCALING_TRIALS = 10000


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def write_records(path: Path, records: list[MetricRecord]) -> Path:
    return _write(path, MetricRecord.HEADER, [r.row() for r in records])


def resolve_workers(requested: int | None, cfg: ScenarioConfig) -> int:
    env = os.environ.get("BEAMCAST_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, requested if requested is not None else cfg.workers)


def _fusion_net(scn, seed: int, workers: int) -> FusionNetwork:
    if scn.cfg.fusion_model:
        return FusionNetwork.load(scn.cfg.fusion_model)
    return train_fusion_for(scn, seed, workers=workers).net


# -- experiments -------------------------------------------------------------

def _exp_fit(cfg, seed, out, workers):
    scn = build_scenario(cfg, "quadratic", seed)
    rng = trial_rng(seed, "fit")
    x, f = track_samples(scn.cfg, scn.true_track, rng)
    rows, track = baseline_comparison_fit(x, f, scn.cfg, rng)
    stem = f"fit_{seed}"
    write_piecewise(out / f"{stem}_breakpoints.csv", track)
    return [_write(out / f"{stem}.csv", ["method", "mae", "n_params"],
                   [(r.method, r.mae, r.n_params) for r in rows]),
            out / f"{stem}_breakpoints.csv"]


def _exp_bound(cfg, seed, out, workers):
    scn = build_scenario(cfg, "quadratic", seed)
    rows = bound_check(scn.true_track, scn.cfg.track_a, BOUND_DELTAS, BOUND_SIGMAS, scn.cfg,
                       lambda k: trial_rng(seed, "bound", k))
    return [_write(out / f"bound-check_{seed}.csv",
                   ["delta_x_nominal", "n_pieces", "delta_x", "sigma_n", "mae", "bound",
                    "gap_db", "within"],
                   [(r.delta_x_nominal, r.n_pieces, r.delta_x, r.sigma_n, r.mae, r.bound,
                     r.gap_db, r.within) for r in rows])]


def validation_table(bundle, cfg: ScenarioConfig):
    """Per-bin validation MSE of pilot, measurement and fused estimates."""
    va = bundle.result.val_idx
    X, T = bundle.X[va], bundle.T[va]
    out = bundle.net.forward(X)
    est = {"pilot": X[:, :2], "measurement": X[:, 2:],
           "fused": np.column_stack([out.x, out.v])}
    table = {}
    for s, e in est.items():
        table[s] = binned_mse(T[:, 0], (e[:, 0] - T[:, 0]) ** 2, (e[:, 1] - T[:, 1]) ** 2, s,
                              cfg.bin_width, cfg.r_max)
    return table


def _exp_fusion_train(cfg, seed, out, workers):
    scn = build_scenario(cfg, seed=seed)
    bundle = train_fusion_for(scn, seed, workers=workers)
    stem = f"fusion-train_{seed}"
    write_dataset(out / f"{stem}_data.csv", bundle.X, bundle.T)
    bundle.net.save(out / f"{stem}.fusn")
    table = validation_table(bundle, scn.cfg)
    rows = []
    for k, base in enumerate(table["pilot"]):
        row = [base.lo, base.hi, base.n]
        for q in ("mse_x", "mse_v"):
            row += [getattr(table[s][k], q) for s in ESTIMATED]
        rows.append(row)
    header = ["bin_lo", "bin_hi", "n"] + [f"{q}_{s}" for q in ("mse_x", "mse_v")
                                          for s in ESTIMATED]
    return [_write(out / f"{stem}.csv", header, rows), out / f"{stem}_data.csv",
            out / f"{stem}.fusn"]


def _exp_mse_sweep(cfg, seed, out, workers):
    scn = build_scenario(cfg, seed=seed)
    net = _fusion_net(scn, seed, workers)
    records = run_trials(scn, net, seed, "mse", cfg.trials, plan=False, workers=workers)
    rows = mse_vs_location(records, cfg.bin_width, cfg.r_max, clip=cfg.mse_clip)
    stem = f"mse-sweep_{seed}"
    write_records(out / f"{stem}_records.csv", records)
    return [_write(out / f"{stem}.csv", ["bin_lo", "bin_hi", "source", "n", "mse_x", "mse_v",
                                         "flag"],
                   [(r.lo, r.hi, r.source, r.n, r.mse_x, r.mse_v, r.flag) for r in rows]),
            out / f"{stem}_records.csv"]


def endtoend(cfg: ScenarioConfig, seed: int, n_windows: int, workers: int = 1,
             nets: dict | None = None):
    """Windows on both track kinds; returns (records, summary rows).

    The ``average`` rows weight the two tracks equally.
    """
    records, rows, per_kind = [], [], {}
    for kind in ("linear", "quadratic"):
        scn = build_scenario(cfg, kind, seed)
        net = nets[kind] if nets and kind in nets else _fusion_net(scn, seed, workers)
        recs = run_trials(scn, net, seed, "endtoend", n_windows, plan=True, workers=workers)
        records += recs
        per_kind[kind] = summarize(recs)
        for s, m in per_kind[kind].items():
            rows.append((kind, s, m["accuracy"], m["se"], m["mu_se"], m["n"]))
    for s in SOURCES:
        if all(s in per_kind[k] for k in per_kind):
            vals = [per_kind[k][s] for k in per_kind]
            rows.append(("average", s, np.mean([v["accuracy"] for v in vals]),
                         np.mean([v["se"] for v in vals]), np.mean([v["mu_se"] for v in vals]),
                         sum(v["n"] for v in vals)))
    return records, rows


def _exp_endtoend(cfg, seed, out, workers):
    records, rows = endtoend(cfg, seed, cfg.trials, workers)
    stem = f"endtoend_{seed}"
    write_records(out / f"{stem}_records.csv", records)
    return [_write(out / f"{stem}.csv", ["track", "source", "accuracy", "se_bpshz",
                                         "mu_se_bpshz", "n_mts"], rows),
            out / f"{stem}_records.csv"]


def _exp_overhead(cfg, seed, out, workers):
    rows = overhead_throughput(cfg, MT_COUNTS)
    n = [r.n_mts for r in rows]
    logger.info("overhead line fits: prediction R2 %.6f, BA/T R2 %.6f",
                linear_r2(n, [r.pred_ratio for r in rows]),
                linear_r2(n, [r.bat_ratio for r in rows]))
    return [_write(out / f"overhead_{seed}.csv",
                   ["n_mts", "pred_ratio", "bat_ratio", "pred_throughput_mbps",
                    "bat_throughput_mbps", "pred_saturated", "bat_saturated"],
                   [(r.n_mts, r.pred_ratio, r.bat_ratio, r.pred_throughput_mbps,
                     r.bat_throughput_mbps, r.pred_saturated, r.bat_saturated) for r in rows])]


def _exp_motion(cfg, seed, out, workers):
    res = scaling_study(SCALING_L, SCALING_DT, SCALING_SIGMA, SCALING_TRIALS,
                        trial_rng(seed, "motion"), L_base=cfg.n_obs, delta_t_base=cfg.delta_t,
                        sigma_base=0.1)
    stem = f"motion-scaling_{seed}"
    path = out / f"{stem}.csv"
    res.write_csv(path)
    _write(out / f"{stem}_slopes.csv", ["sweep", "slope_v", "slope_a"],
           [(k, v[0], v[1]) for k, v in res.slopes.items()])
    return [path, out / f"{stem}_slopes.csv"]


_RUNNERS = {"fit": _exp_fit, "fusion-train": _exp_fusion_train, "mse-sweep": _exp_mse_sweep,
            "endtoend": _exp_endtoend, "overhead": _exp_overhead,
            "motion-scaling": _exp_motion, "bound-check": _exp_bound}


def write_manifest(out: Path, cfg: ScenarioConfig, experiment: str, seed: int,
                   outputs) -> Path:
    lines = [f"experiment = {experiment}", f"seed = {seed}",
             f"beamcast = {__version__}", f"python = {platform.python_version()}",
             f"numpy = {np.__version__}", f"scipy = {scipy.__version__}"]
    lines += [f"output = {Path(p).name}" for p in outputs]
    lines += ["", "# configuration", cfg.to_text()]
    path = out / "manifest.txt"
    path.write_text("\n".join(lines))
    return path


def run_experiment(cfg: ScenarioConfig, experiment: str, seed: int | None = None,
                   out_dir=".", workers: int | None = None) -> list[Path]:
    """Run one named experiment; outputs depend only on (config, seed)."""
    if experiment not in _RUNNERS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    seed = cfg.seed if seed is None else int(seed)
    cfg = cfg.replace(seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_workers = resolve_workers(workers, cfg)
    logger.info("running %s (seed %d, %d workers)", experiment, seed, n_workers)
    outputs = _RUNNERS[experiment](cfg, seed, out, n_workers)
    write_manifest(out, cfg, experiment, seed, outputs)
    return outputs
