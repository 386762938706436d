"""Scenario configuration: defaults, the ``key = value`` file format and derived objects.

Every line is ``key = value``; ``#`` starts a comment and blank lines are
ignored.  Unknown keys and malformed lines raise ParseError with the line
number, invariant violations raise RangeError.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..channel_model import ArrayConfig, MeasurementVariances, measurement_variances
from ..errors import ParseError, RangeError
from ..estimation import EstimatorSettings
from ..fusion_net import TrainSettings
from ..track_geometry import LinearTrack, QuadraticTrack, Track


def _key(name, default, doc=""):
    return field(default=default, metadata={"key": name, "doc": doc})


@dataclass(frozen=True)
class ScenarioConfig:
    # system (simulation table defaults)
    fc: float = _key("fc", 30e9, "carrier frequency, Hz")
    bandwidth: float = _key("bandwidth", 80e6, "Hz")
    n_t: int = _key("n_t", 8, "BS antennas")
    n_r: int = _key("n_r", 4, "MT antennas")
    n_rf: int = _key("n_rf", 4, "BS RF chains = MTs served at once")
    tx_power_dbm: float = _key("tx_power_dbm", 30.0, "maximum BS transmit power")
    noise_psd_dbm_hz: float = _key("noise_psd_dbm_hz", -174.0)
    r_max: float = _key("r_max", 100.0, "half-length of the served track section, m")
    d: float = _key("d", 11.0, "minimum BS-track distance, m")
    speed_kmh: float = _key("speed_kmh", 256.0)
    speed_var_kmh2: float = _key("speed_var_kmh2", 18.0)
    accel_var: float = _key("accel_var", 0.1, "(m/s^2)^2")
    delta_t: float = _key("delta_t", 0.1, "observation period, s")
    n_obs: int = _key("n_obs", 3, "observation instants L")
    t_c: float = _key("t_c", 12.5e-3, "measurement integration time, s")
    k_fc: float = _key("k_fc", 1e-6, "oscillator offset, fraction of fc")
    prediction_duration: float = _key("prediction_duration", 1.25, "s")
    delta_t_p: float = _key("delta_t_p", 1.25e-3, "prediction granularity, s")
    pilot_sigma_n: float = _key("pilot.sigma_n", 1.0, "pilot noise std in the unit-noise frame")
    delay_as_range: bool = _key("meas.delay_as_range", True,
                                "read c/(2B) as a range variance in m^2")
    # track
    track_kind: str = _key("track.kind", "linear", "linear | quadratic")
    track_a: float = _key("track.a", (6.0 / 200.0) ** 2)
    track_b: float = _key("track.b", -2.0 * (6.0 / 200.0) ** 2 * 5.0)
    track_c: float = _key("track.c", (6.0 / 200.0) ** 2 * 25.0 + 11.0)
    fit_pieces: int = _key("fit.pieces", 67, "pieces of the learned track")
    fit_samples: int = _key("fit.samples", 20000)
    fit_noise: float = _key("fit.noise", 0.0, "std of the track survey noise, m")
    fit_lr: float = _key("fit.lr", 1e-2)
    fit_batch: int = _key("fit.batch_size", 64)
    fit_epochs: int = _key("fit.max_epochs", 2000)
    # MT population
    mt_per_window: int = _key("mt.per_window", 4)
    mt_direction: str = _key("mt.direction", "+1", "+1 | -1 | random")
    # estimators
    est_theta_th_x: float = _key("est.theta_th_x", 0.1)
    est_theta_th_v: float = _key("est.theta_th_v", 0.1)
    est_k_max: int = _key("est.k_max", 20)
    est_grid_x: float = _key("est.grid_x", 0.05)
    est_grid_v: float = _key("est.grid_v", 0.05)
    est_v_max: float = _key("est.v_max", 200.0)
    est_coarse_x: float = _key("est.coarse_x", 1.0)
    est_coarse_v: float = _key("est.coarse_v", 1.0)
    est_fd_eps: float = _key("est.fd_eps", 1.0)
    est_init_unit_gain: bool = _key("est.init_unit_gain", False)
    # fusion training
    fusion_samples: int = _key("fusion.samples", 20000)
    fusion_lr: float = _key("fusion.lr", 1e-3)
    fusion_batch: int = _key("fusion.batch_size", 128)
    fusion_epochs: int = _key("fusion.max_epochs", 500)
    fusion_patience: int = _key("fusion.patience", 20)
    fusion_val_fraction: float = _key("fusion.val_fraction", 0.2)
    fusion_optimizer: str = _key("fusion.optimizer", "adam", "adam | sgd")
    fusion_bias_x_scale: float = _key("fusion.bias_x_scale", 1.0, "m per bias-subnet unit")
    fusion_bias_v_scale: float = _key("fusion.bias_v_scale", 1.0, "m/s per bias-subnet unit")
    fusion_bin_balanced: bool = _key("fusion.bin_balanced", True,
                                     "weight errors by the inverse best-source MSE of their bin")
    fusion_model: str = _key("fusion.model", "", "pre-trained network file (optional)")
    # metrics and sweeps
    link_power: str = _key("metrics.link_power", "full",
                           "power of the single-link SE: full (P_t,max) or stream (P_t,max/N_rf)")
    bin_width: float = _key("metrics.bin_width", 10.0, "location bin width, m")
    mse_clip: float = _key("metrics.mse_clip", 30.0)
    trials: int = _key("trials", 500)
    seed: int = _key("seed", 0)
    workers: int = _key("workers", 1)
    # overhead model
    bits_per_real: int = _key("overhead.bits_per_real", 32)
    slot_s: float = _key("overhead.slot_s", 26.8e-6, "air time of one beam measurement")
    bat_period: float = _key("overhead.bat_period", 10e-3)
    bat_beams: int = _key("overhead.bat_beams", 3)
    bat_delay: float = _key("overhead.bat_delay", 20e-3)
    se_bpshz: float = _key("overhead.se_bpshz", 13.39, "per-MT SE used for throughput")

    def __post_init__(self):
        self.validate()

    # -- invariants -----------------------------------------------------------
    def validate(self):
        positive = ["fc", "bandwidth", "n_t", "n_r", "n_rf", "r_max", "d", "speed_kmh",
                    "delta_t", "t_c", "prediction_duration", "delta_t_p", "fit_pieces",
                    "fit_samples", "fit_lr", "fit_batch", "fit_epochs", "mt_per_window",
                    "fusion_samples", "fusion_lr", "fusion_batch", "fusion_epochs",
                    "fusion_patience", "bin_width", "mse_clip", "trials", "workers",
                    "bits_per_real", "slot_s", "bat_period", "bat_beams",
                    "fusion_bias_x_scale", "fusion_bias_v_scale", "se_bpshz",
                    "pilot_sigma_n"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise RangeError(f"{_KEY_OF[name]} must be positive")
        for name in ("speed_var_kmh2", "accel_var", "k_fc", "fit_noise", "bat_delay", "seed"):
            if getattr(self, name) < 0:
                raise RangeError(f"{_KEY_OF[name]} must be non-negative")
        if self.n_obs < 2:
            raise RangeError("n_obs must be >= 2")
        if self.n_rf > self.n_t:
            raise RangeError("n_rf must not exceed n_t")
        ratio = self.prediction_duration / self.delta_t_p
        if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
            raise RangeError("delta_t_p must divide prediction_duration")
        if self.track_kind not in ("linear", "quadratic"):
            raise RangeError("track.kind must be linear or quadratic")
        if self.mt_direction not in ("+1", "-1", "random"):
            raise RangeError("mt.direction must be +1, -1 or random")
        if self.link_power not in ("full", "stream"):
            raise RangeError("metrics.link_power must be full or stream")
        if self.fusion_optimizer not in ("adam", "sgd"):
            raise RangeError("fusion.optimizer must be adam or sgd")
        if not 0.0 < self.fusion_val_fraction < 1.0:
            raise RangeError("fusion.val_fraction must lie in (0, 1)")
        try:
            self.estimator_settings()
        except ValueError as exc:
            raise RangeError(str(exc)) from None
        if self.track_kind == "quadratic":
            f_min = self.track_c - self.track_b ** 2 / (4.0 * self.track_a) \
                if self.track_a > 0 else min(self.track().value(-self.r_max),
                                             self.track().value(self.r_max))
            if f_min <= 0:
                raise RangeError("quadratic track must stay away from the BS (f > 0)")

    # -- derived objects ------------------------------------------------------
    @property
    def n_predict(self) -> int:
        return int(round(self.prediction_duration / self.delta_t_p))

    @property
    def speed_mean(self) -> float:
        return self.speed_kmh / 3.6

    @property
    def speed_laplace_scale(self) -> float:
        # variance of a Laplace law is 2 b^2
        return math.sqrt(self.speed_var_kmh2 / 2.0) / 3.6

    @property
    def stream_power(self) -> float:
        """Per-stream power in the unit-noise frame (P / N_rf is folded into alpha)."""
        return 1.0

    @property
    def link_power_units(self) -> float:
        return self.total_power if self.link_power == "full" else self.stream_power

    @property
    def total_power(self) -> float:
        return float(self.n_rf)

    def array(self) -> ArrayConfig:
        return ArrayConfig(n_t=self.n_t, n_r=self.n_r, n_rf=self.n_rf)

    def track(self) -> Track:
        if self.track_kind == "linear":
            return LinearTrack(d=self.d, r_max=self.r_max)
        return QuadraticTrack(a=self.track_a, b=self.track_b, c=self.track_c,
                              r_max=self.r_max)

    def estimator_settings(self) -> EstimatorSettings:
        return EstimatorSettings(theta_th_x=self.est_theta_th_x, theta_th_v=self.est_theta_th_v,
                                 k_max=self.est_k_max, grid_x=self.est_grid_x,
                                 grid_v=self.est_grid_v, v_max=self.est_v_max,
                                 coarse_x=self.est_coarse_x, coarse_v=self.est_coarse_v,
                                 fd_eps=self.est_fd_eps, v_prior=self.speed_mean,
                                 init_unit_gain=self.est_init_unit_gain)

    def variances(self) -> MeasurementVariances:
        return measurement_variances(self.bandwidth, self.fc, self.t_c, self.k_fc,
                                     delay_as_range=self.delay_as_range)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(lr=self.fusion_lr, batch_size=self.fusion_batch,
                             max_epochs=self.fusion_epochs, patience=self.fusion_patience,
                             val_fraction=self.fusion_val_fraction,
                             optimizer=self.fusion_optimizer,
                             bias_x_scale=self.fusion_bias_x_scale,
                             bias_v_scale=self.fusion_bias_v_scale,
                             x_scale=self.r_max, v_scale=self.est_v_max)

    def power_kwargs(self) -> dict:
        return dict(tx_power_dbm=self.tx_power_dbm, n_rf=self.n_rf,
                    bandwidth_hz=self.bandwidth, noise_psd_dbm_hz=self.noise_psd_dbm_hz)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Config echo in the input format (round-trips through :func:`parse_config`)."""
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{f.metadata['key']} = {val}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.metadata["key"]: f for f in dataclasses.fields(ScenarioConfig)}
_KEY_OF = {f.name: f.metadata["key"] for f in dataclasses.fields(ScenarioConfig)}


def _convert(raw: str, default, key: str, lineno: int):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            as_float = float(raw)
            if not as_float.is_integer():
                raise ValueError(raw)
            return int(as_float)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ParseError(f"bad value {raw!r} for {key}", lineno=lineno) from None


def parse_config_text(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"expected 'key = value', got {body!r}", lineno=lineno)
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _FIELDS:
            raise ParseError(f"unknown key {key!r}", lineno=lineno)
        if not raw and key != "fusion.model":
            raise ParseError(f"missing value for {key}", lineno=lineno)
        f = _FIELDS[key]
        values[f.name] = _convert(raw, f.default, key, lineno)
    base = ScenarioConfig() if base is None else base
    return dataclasses.replace(base, **values)


def parse_config(path) -> ScenarioConfig:
    """Read a ``key = value`` config file; an empty file gives the defaults."""
    return parse_config_text(Path(path).read_text())
