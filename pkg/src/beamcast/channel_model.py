"""LoS mmWave channel, DFT codebooks and the observation generators.

Everything is expressed in a unit-noise frame: the pilot noise variance is
1 and transmit power, path loss and thermal noise are folded into the
complex gain ``alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import TooClose
from .track_geometry import Track, phi_of_x

SPEED_OF_LIGHT = 3e8


@dataclass(frozen=True)
class ArrayConfig:
    n_t: int = 8
    n_r: int = 4
    n_rf: int = 4

    def __post_init__(self):
        if not (self.n_t >= self.n_rf >= 1 and self.n_r >= 1):
            raise ValueError(f"invalid array sizes {self}")


@dataclass(frozen=True)
class ChannelRealization:
    alpha: complex
    phi: float
    H: np.ndarray


@dataclass(frozen=True)
class MeasurementVariances:
    """Noise variances of the delay (s^2) and Doppler (Hz^2) measurements."""

    tau: float
    fd: float


def array_response(phi, n: int) -> np.ndarray:
    """Half-wavelength ULA steering vector(s), unit norm.

    ``phi`` may be an array; the antenna index is appended as the last axis.
    """
    if n < 1:
        raise ValueError("antenna count must be >= 1")
    phi = np.asarray(phi, dtype=float)
    # successive powers of the per-element phase step (cheaper than n complex exps)
    out = np.empty(phi.shape + (n,), dtype=complex)
    out[..., 0] = 1.0 / math.sqrt(n)
    out[..., 1:] = np.exp(1j * np.pi * np.sin(phi))[..., None]
    return np.cumprod(out, axis=-1)


def dft_codebook(n: int) -> np.ndarray:
    """Orthonormal DFT codebook; column ``j`` points at sin(phi) = -1 + (2j+1)/n."""
    if n < 1:
        raise ValueError("antenna count must be >= 1")
    s = -1.0 + (2.0 * np.arange(n) + 1.0) / n
    return array_response(np.arcsin(s), n).T


def codebook_sines(n: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def los_channel(alpha: complex, phi: float, cfg: ArrayConfig) -> ChannelRealization:
    """Rank-one LoS channel sqrt(Nt Nr) alpha a_r(pi - phi) a_t(phi)^H."""
    a_r = array_response(np.pi - phi, cfg.n_r)
    a_t = array_response(phi, cfg.n_t)
    H = math.sqrt(cfg.n_t * cfg.n_r) * alpha * np.outer(a_r, a_t.conj())
    return ChannelRealization(alpha=complex(alpha), phi=float(phi), H=H)


def noise_power_dbm(bandwidth_hz: float, psd_dbm_hz: float = -174.0) -> float:
    return psd_dbm_hz + 10.0 * math.log10(bandwidth_hz)


def uma_los_path_loss_db(distance_m, fc_hz: float):
    """3GPP TR 38.901 UMa-LoS, first branch (below the breakpoint distance)."""
    distance_m = np.asarray(distance_m, dtype=float)
    return 28.0 + 22.0 * np.log10(distance_m) + 20.0 * math.log10(fc_hz / 1e9)


def gain_amplitude(distance_m, fc_hz: float, tx_power_dbm: float = 30.0, n_rf: int = 4,
                   bandwidth_hz: float = 80e6, noise_psd_dbm_hz: float = -174.0):
    """|alpha| in the unit-noise frame for per-stream power P_t,max / N_rf."""
    distance_m = np.asarray(distance_m, dtype=float)
    if np.any(distance_m <= 1.0):
        raise TooClose("BS-MT distance must exceed 1 m")
    p_stream_dbm = tx_power_dbm - 10.0 * math.log10(n_rf)
    snr_db = (p_stream_dbm - uma_los_path_loss_db(distance_m, fc_hz)
              - noise_power_dbm(bandwidth_hz, noise_psd_dbm_hz))
    return 10.0 ** (snr_db / 20.0)


def path_gain(track: Track, x, fc: float, rng: np.random.Generator, **power) -> complex:
    """Complex LoS gain at projected location ``x`` with a uniform random phase.

    Keyword arguments (``tx_power_dbm``, ``n_rf``, ``bandwidth_hz``,
    ``noise_psd_dbm_hz``) default to the standard scenario.
    """
    x = np.asarray(x, dtype=float)
    dist = np.hypot(x, track.value(x))
    amp = gain_amplitude(dist, fc, **power)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=np.shape(amp))
    out = amp * np.exp(1j * phase)
    return complex(out) if np.ndim(out) == 0 else out


def pilot_basis(phi, cfg: ArrayConfig, codebook: np.ndarray | None = None) -> np.ndarray:
    """Noise-free pilot response per unit gain: columns z_i for each Tx beam i.

    Returns shape ``phi.shape + (n_r, n_t)``; includes the sqrt(Nt Nr) array
    gain, pilot symbol 1 and an identity digital precoder.
    """
    F = dft_codebook(cfg.n_t) if codebook is None else codebook
    phi = np.asarray(phi, dtype=float)
    a_r = array_response(np.pi - phi, cfg.n_r)
    b = array_response(phi, cfg.n_t).conj() @ F  # a_t^H F
    return math.sqrt(cfg.n_t * cfg.n_r) * a_r[..., :, None] * b[..., None, :]


def gen_pilot_observations(track: Track, x_traj, alphas, cfg: ArrayConfig, sigma_n: float,
                           rng: np.random.Generator) -> np.ndarray:
    """Pilot sweep snapshots, shape ``(L, n_r, n_t)``; column i is y_{l,i}."""
    x_traj = np.asarray(x_traj, dtype=float)
    alphas = np.asarray(alphas, dtype=complex)
    Z = pilot_basis(phi_of_x(track, x_traj), cfg)
    Y = alphas[:, None, None] * Z
    if sigma_n > 0:
        noise = rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape)
        Y = Y + sigma_n / math.sqrt(2.0) * noise
    return Y


def measurement_variances(bandwidth: float, fc: float, t_c: float, k_fc: float,
                          delay_as_range: bool = False) -> MeasurementVariances:
    """Radar-resolution noise model for the delay and Doppler measurements.

    With ``delay_as_range=False`` the delay variance is c / (2B) taken
    literally.  With ``delay_as_range=True`` that quantity is read as a range
    variance in m^2 and converted to s^2 (divided by c^2).
    """
    if bandwidth <= 0 or fc <= 0 or t_c <= 0:
        raise ValueError("bandwidth, carrier and integration time must be positive")
    var_tau = SPEED_OF_LIGHT / (2.0 * bandwidth)
    if delay_as_range:
        var_tau /= SPEED_OF_LIGHT ** 2
    var_fd = SPEED_OF_LIGHT / (2.0 * fc * t_c) + k_fc * fc
    return MeasurementVariances(tau=var_tau, fd=var_fd)


def radial_factor(track: Track, x):
    """cos of the angle between the BS-to-MT direction and the forward track tangent.

    Equals (x + f f') / (r sqrt(1 + f'^2)); on a straight track it is sin(phi).
    """
    x = np.asarray(x, dtype=float)
    fx = track.value(x)
    fp = track.slope(x)
    return (x + fx * fp) / (np.hypot(x, fx) * np.sqrt(1.0 + fp * fp))


def true_delay_doppler(track: Track, x, v, fc: float):
    """Propagation delay and Doppler shift at location ``x`` for signed speed ``v``.

    f_d = -(2 fc / c) v cos(angle between position and heading), which is the
    two-branch angle form evaluated consistently; on a straight track it is
    -(2 fc / c) v sin(phi).
    """
    x = np.asarray(x, dtype=float)
    tau = np.hypot(x, track.value(x)) / SPEED_OF_LIGHT
    fd = -2.0 * fc / SPEED_OF_LIGHT * np.asarray(v, dtype=float) * radial_factor(track, x)
    if np.ndim(tau) == 0 and np.ndim(fd) == 0:
        return float(tau), float(fd)
    return tau, fd


def gen_measurements(track: Track, x_traj, v, fc: float, variances: MeasurementVariances,
                     rng: np.random.Generator):
    """Noisy delay and Doppler along a trajectory (``v`` scalar or per instant)."""
    tau, fd = true_delay_doppler(track, np.asarray(x_traj, dtype=float), v, fc)
    tau = np.atleast_1d(tau)
    fd = np.atleast_1d(fd)
    tau_m = tau + math.sqrt(variances.tau) * rng.standard_normal(tau.shape)
    fd_m = fd + math.sqrt(variances.fd) * rng.standard_normal(fd.shape)
    return tau_m, fd_m
