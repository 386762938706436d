"""Hybrid beamforming over a prediction horizon from motion-parameter estimates.

For every future instant the MT locations are extrapolated along the track,
the LoS angles give the analog codewords (Tx at the BS, Rx at each MT), the
true channel seen through those codewords gives a small N_rf x N_rf
equivalent channel, and an MMSE digital precoder is built on it.

Codeword indices are 0-based in memory; CSV exports write them 1-based.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel_model import ArrayConfig, array_response, dft_codebook
from .track_geometry import LinearTrack, Track, locate, phi_of_x

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12


# -- locations and codewords -------------------------------------------------

def predict_locations(track: Track, x, v, n_p: int, delta_t_p: float):
    """Constant-speed extrapolation for instants i = 1..n_p.

    ``x``/``v`` may be arrays (one per MT); the instant axis comes first in
    the output, shape ``(n_p,) + shape(x)``.  Locations leaving the track
    support are clamped; returns ``(locations, clamped_mask)``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    steps = (np.arange(1, n_p + 1) * delta_t_p).reshape((n_p,) + (1,) * x.ndim)
    if isinstance(track, LinearTrack):
        pos = x + v * steps
    else:
        pos = locate(track, np.broadcast_to(x, steps.shape[:1] + x.shape), -v * steps)
    clamped = np.abs(pos) > track.r_max
    return np.clip(pos, -track.r_max, track.r_max), clamped


def _nearest_codeword(vecs, codebook):
    # ||F_j - a||^2 = ||F_j||^2 + ||a||^2 - 2 Re(F_j^H a); argmin keeps the lower index on ties
    cross = vecs @ codebook.conj()
    dist = (np.sum(np.abs(codebook) ** 2, axis=0)
            + np.sum(np.abs(vecs) ** 2, axis=-1)[..., None] - 2.0 * cross.real)
    return np.argmin(dist, axis=-1)


def select_codewords(phi, cfg: ArrayConfig):
    """Nearest DFT codewords to the Tx response a_t(phi) and Rx response a_r(pi - phi)."""
    phi = np.asarray(phi, dtype=float)
    tx = _nearest_codeword(array_response(phi, cfg.n_t), dft_codebook(cfg.n_t))
    rx = _nearest_codeword(array_response(np.pi - phi, cfg.n_r), dft_codebook(cfg.n_r))
    if phi.ndim == 0:
        return int(tx), int(rx)
    return tx, rx


def channel_matrices(alpha, phi, cfg: ArrayConfig) -> np.ndarray:
    """Batched LoS channels, shape ``phi.shape + (n_r, n_t)``."""
    phi = np.asarray(phi, dtype=float)
    a_r = array_response(np.pi - phi, cfg.n_r)
    a_t = array_response(phi, cfg.n_t)
    return (math.sqrt(cfg.n_t * cfg.n_r) * np.asarray(alpha)[..., None, None]
            * a_r[..., :, None] * a_t.conj()[..., None, :])


def genie_beams(H, cfg: ArrayConfig):
    """Exhaustive codebook search on the true channel(s) ``H (..., n_r, n_t)``.

    Tx index maximises ||H F_j||; Rx index maximises |F_r,k^H H F_t,j| for that Tx beam.
    """
    Ft, Fr = dft_codebook(cfg.n_t), dft_codebook(cfg.n_r)
    HF = np.asarray(H) @ Ft
    tx = np.argmax(np.sum(np.abs(HF) ** 2, axis=-2), axis=-1)
    col = np.take_along_axis(HF, tx[..., None, None], axis=-1)[..., 0]
    rx = np.argmax(np.abs(col @ Fr.conj()), axis=-1)
    return tx, rx


def equivalent_channels(H, rx_idx, A_t, cfg: ArrayConfig) -> np.ndarray:
    """Effective rows g_u = a_r,u^H H_u A_t stacked into (..., U, N_rf).

    ``H`` is ``(..., U, n_r, n_t)``, ``rx_idx`` ``(..., U)``, ``A_t``
    ``(..., n_t, N_rf)``.  The received vector for transmit symbols ``s``
    is ``G D s`` plus noise.
    """
    Fr = dft_codebook(cfg.n_r)
    w = Fr[:, np.asarray(rx_idx)]  # (n_r, ..., U)
    w = np.moveaxis(w, 0, -1)  # (..., U, n_r)
    row = np.einsum("...ur,...urt->...ut", w.conj(), np.asarray(H))
    return row @ A_t


# -- digital stage and metrics -----------------------------------------------

@dataclass(frozen=True)
class Precoder:
    D: np.ndarray
    xi: np.ndarray
    singular: np.ndarray


def mmse_precoder(G, sigma_n_sq: float, power: float, A_t=None) -> Precoder:
    """Regularised (MMSE) precoder xi G^H (G G^H + sigma^2 I)^-1, batched over leading axes.

    ``xi`` scales total radiated power ||A_t D||_F^2 to ``power`` (A_t taken
    as identity when omitted).  Near-singular systems get a small diagonal
    floor and are flagged.
    """
    G = np.asarray(G, dtype=complex)
    U = G.shape[-2]
    gram = G @ np.conj(np.swapaxes(G, -1, -2))
    eye = np.eye(U)
    reg = gram + sigma_n_sq * eye
    cond = np.linalg.cond(reg) if U else np.zeros(G.shape[:-2])
    singular = ~np.isfinite(cond) | (cond > COND_LIMIT)
    if np.any(singular):
        scale = np.maximum(np.real(np.trace(gram, axis1=-2, axis2=-1)), 1e-300)
        floor = np.where(singular, scale / COND_LIMIT, 0.0)[..., None, None]
        reg = reg + floor * eye
    X = np.linalg.solve(reg, G)  # (G G^H + s I)^-1 G
    D0 = np.conj(np.swapaxes(X, -1, -2))
    radiated = D0 if A_t is None else np.asarray(A_t) @ D0
    norm_sq = np.sum(np.abs(radiated) ** 2, axis=(-2, -1))
    xi = np.where(norm_sq > 0, np.sqrt(power / np.where(norm_sq > 0, norm_sq, 1.0)), 0.0)
    return Precoder(D=xi[..., None, None] * D0, xi=xi, singular=singular)


def sinr(G, D, sigma_n_sq: float) -> np.ndarray:
    M = np.abs(np.asarray(G) @ np.asarray(D)) ** 2
    sig = np.diagonal(M, axis1=-2, axis2=-1)
    interf = np.sum(M, axis=-1) - sig
    return sig / (interf + sigma_n_sq)


def spectral_efficiency(G, D, sigma_n_sq: float, per_mt: bool = False):
    """Sum over MTs of log2(1 + SINR) (bps/Hz); per-MT values with ``per_mt``."""
    se = np.log2(1.0 + sinr(G, D, sigma_n_sq))
    return se if per_mt else np.sum(se, axis=-1)


def beam_accuracy(tx_idx, genie_idx) -> float:
    """Fraction of (instant, MT) pairs whose Tx codeword equals the genie choice."""
    tx_idx, genie_idx = np.asarray(tx_idx), np.asarray(genie_idx)
    if tx_idx.shape != genie_idx.shape:
        raise ValueError("plan and genie cover different instants")
    return float(np.mean(tx_idx == genie_idx)) if tx_idx.size else 1.0


# -- plans -------------------------------------------------------------------

@dataclass
class BeamPlan:
    """Per-instant beam choices for U MTs over n_p instants."""

    tx_idx: np.ndarray  # (n_p, U)
    rx_idx: np.ndarray  # (n_p, U)
    D: np.ndarray  # (n_p, U, U)
    se: np.ndarray  # (n_p,) sum SE of each instant
    genie_tx_idx: np.ndarray  # (n_p, U)
    delta_t_p: float
    se_per_mt: np.ndarray | None = None  # (n_p, U)
    clamped: np.ndarray | None = None
    singular: np.ndarray | None = None

    @property
    def n_instants(self) -> int:
        return self.tx_idx.shape[0]

    def accuracy(self) -> float:
        return beam_accuracy(self.tx_idx, self.genie_tx_idx)

    def write_csv(self, path) -> Path:
        """Write the plan table and a ``<stem>_D.csv`` sidecar with the precoders."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["instant", "mt", "tx_idx", "rx_idx", "se_bpshz", "genie_tx_idx",
                        "match"])
            for i in range(self.n_instants):
                for u in range(self.tx_idx.shape[1]):
                    se = self.se_per_mt[i, u] if self.se_per_mt is not None else self.se[i]
                    w.writerow([i + 1, u + 1, int(self.tx_idx[i, u]) + 1,
                                int(self.rx_idx[i, u]) + 1, f"{se:.6f}",
                                int(self.genie_tx_idx[i, u]) + 1,
                                int(self.tx_idx[i, u] == self.genie_tx_idx[i, u])])
        side = path.with_name(path.stem + "_D.csv")
        U = self.D.shape[-1]
        with open(side, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["instant"] + [f"{p}_{r + 1}{c + 1}" for r in range(U)
                                      for c in range(U) for p in ("re", "im")])
            for i in range(self.n_instants):
                flat = self.D[i].reshape(-1)
                vals = [f"{z:.9e}" for c in flat for z in (c.real, c.imag)]
                w.writerow([i + 1] + vals)
        return side


def plan_from_positions(pred_pos, true_pos, true_alpha, track: Track, cfg: ArrayConfig,
                        delta_t_p: float, sigma_n_sq: float, power: float,
                        clamped=None, pred_track: Track | None = None) -> BeamPlan:
    """Plan and score beams for predicted vs true locations, both ``(n_p, U)``.

    Codewords follow the predicted angles (on ``pred_track`` when given, e.g.
    a learned track); the equivalent channel, precoder and SE use the true
    channel on ``track`` (CSI-RS on the chosen beams).
    """
    pred_pos = np.atleast_2d(np.asarray(pred_pos, dtype=float))
    true_pos = np.atleast_2d(np.asarray(true_pos, dtype=float))
    tx, rx = select_codewords(phi_of_x(track if pred_track is None else pred_track, pred_pos),
                              cfg)
    H = channel_matrices(true_alpha, phi_of_x(track, true_pos), cfg)
    A_t = np.moveaxis(dft_codebook(cfg.n_t)[:, tx], 0, -2)  # (n_p, n_t, U)
    G = equivalent_channels(H, rx, A_t, cfg)
    pre = mmse_precoder(G, sigma_n_sq, power, A_t)
    se_mt = spectral_efficiency(G, pre.D, sigma_n_sq, per_mt=True)
    genie_tx, _ = genie_beams(H, cfg)
    return BeamPlan(tx_idx=tx, rx_idx=rx, D=pre.D, se=se_mt.sum(axis=-1),
                    genie_tx_idx=genie_tx, delta_t_p=delta_t_p, se_per_mt=se_mt,
                    clamped=clamped, singular=pre.singular)


def hybrid_beamform_instant(est_x, est_v, H_true, track: Track, cfg: ArrayConfig, i: int,
                            delta_t_p: float, sigma_n_sq: float, power: float) -> dict:
    """One prediction instant for all MTs: locations, codewords, equivalent channel, MMSE.

    ``H_true`` holds the true channels ``(U, n_r, n_t)`` at instant ``i``.
    """
    est_x = np.atleast_1d(np.asarray(est_x, dtype=float))
    est_v = np.atleast_1d(np.asarray(est_v, dtype=float))
    pos, clamped = predict_locations(track, est_x, est_v, i, delta_t_p)
    pos, clamped = pos[-1], clamped[-1]
    tx, rx = select_codewords(phi_of_x(track, pos), cfg)
    tx, rx = np.atleast_1d(tx), np.atleast_1d(rx)
    A_t = dft_codebook(cfg.n_t)[:, tx]
    G = equivalent_channels(H_true, rx, A_t, cfg)
    pre = mmse_precoder(G, sigma_n_sq, power, A_t)
    return {"location": pos, "tx_idx": tx, "rx_idx": rx, "G": G, "D": pre.D,
            "se": float(spectral_efficiency(G, pre.D, sigma_n_sq)),
            "clamped": clamped, "singular": bool(pre.singular)}
