import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beamcast.channel_model import (
    ArrayConfig, MeasurementVariances, gain_amplitude, gen_measurements, gen_pilot_observations,
    measurement_variances, pilot_basis, true_delay_doppler,
)
from beamcast.errors import NoBracket, NoGeometricSolution, NotConverged, SignAmbiguity
from beamcast.estimation import (
    EstimatorSettings, ParamEstimate, alpha_closed_form, estimate_from_measurements,
    estimate_from_pilots, estimate_measurements_batch, estimate_pilots_batch,
    init_from_measurements, line_search, loglik_measurements, loglik_pilot,
    trajectory_locations,
)
from beamcast.track_geometry import LinearTrack, QuadraticTrack, arc_length, phi_of_x

LIN = LinearTrack(d=11.0)
QUAD = QuadraticTrack.hsr_default()
CFG = ArrayConfig()
SET = EstimatorSettings()
DT = 0.1
FC = 30e9
VAR = measurement_variances(80e6, FC, 12.5e-3, 1e-6, delay_as_range=True)


def pilot_instance(track, x, v, rng, sigma_n=0.0, n_obs=3, scale=1.0):
    xs = trajectory_locations(track, x, v, n_obs, DT)
    amp = scale * gain_amplitude(np.hypot(xs, track.value(xs)), FC)
    alphas = amp * np.exp(1j * rng.uniform(0, 2 * np.pi, n_obs))
    return gen_pilot_observations(track, xs, alphas, CFG, sigma_n, rng), alphas


def profiled_grid_oracle(Y, track, x_grid, v_grid):
    """Exhaustive (x, v) search with every instant's gain profiled out."""
    n_obs = Y.shape[0]
    best, arg = -np.inf, None
    y_energy = np.sum(np.abs(Y) ** 2)
    for v in v_grid:
        pos = x_grid[:, None] - v * (n_obs - 1 - np.arange(n_obs)) * DT
        Z = pilot_basis(phi_of_x(track, np.clip(pos, -100, 100)), CFG)
        corr = np.sum(Z.conj() * Y[None], axis=(-2, -1))
        energy = np.sum(np.abs(Z) ** 2, axis=(-2, -1))
        val = -(y_energy - np.sum(np.abs(corr) ** 2 / energy, axis=1))
        k = int(np.argmax(val))
        if val[k] > best:
            best, arg = val[k], (x_grid[k], v)
    return arg


class TestSettings:
    def test_defaults_valid(self):
        assert SET.grid_x <= SET.theta_th_x

    @pytest.mark.parametrize("kw", [{"k_max": 0}, {"grid_x": 0.2}, {"v_max": -1.0},
                                    {"theta_th_v": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EstimatorSettings(**kw)

    def test_unknown_source(self):
        with pytest.raises(ValueError):
            ParamEstimate(x=0.0, v=0.0, source="radar")


class TestTrajectory:
    def test_linear_example(self):
        assert np.allclose(trajectory_locations(LIN, 50.0, 10.0, 3, 0.1), [48, 49, 50])

    def test_zero_speed(self):
        assert np.allclose(trajectory_locations(QUAD, -12.0, 0.0, 5, 0.1), -12.0)

    def test_quadratic_arc_round_trip(self):
        xs = trajectory_locations(QUAD, 40.0, 71.1, 3, 0.1)
        for l, xl in enumerate(xs, start=1):
            assert arc_length(QUAD, xl, 40.0) == pytest.approx((3 - l) * 71.1 * 0.1, abs=1e-5)

    def test_strict_leaving_support(self):
        with pytest.raises(NoBracket):
            trajectory_locations(LIN, -99.0, 71.1, 3, 0.1, strict=True)


class TestLineSearch:
    def test_finds_parabola_peak(self):
        pk = np.array([3.14159, -42.5])
        x, val = line_search(lambda c: -(c - pk[:, None]) ** 2, -100, 100, 1.0, 1e-4, n=2)
        assert np.allclose(x, pk, atol=1e-4)

    def test_keeps_current_when_better(self):
        # multi-modal: coarse grid cannot see the needle at 0.37
        def fun(c):
            return np.where(np.abs(c - 0.37) < 1e-3, 10.0, -np.abs(c - 50))
        x, val = line_search(fun, -100, 100, 1.0, 1e-3, n=1, current=np.array([0.37]))
        assert x[0] == pytest.approx(0.37) and val[0] == 10.0


class TestAlpha:
    def test_unit(self):
        Z = pilot_basis(phi_of_x(LIN, 20.0), CFG)
        assert alpha_closed_form(Z, 20.0, LIN, CFG) == pytest.approx(1.0)

    def test_linear_in_gain(self):
        Z = pilot_basis(phi_of_x(LIN, -7.0), CFG)
        assert alpha_closed_form((2 + 3j) * Z, -7.0, LIN, CFG) == pytest.approx(2 + 3j)

    def test_matches_generic_least_squares(self, rng):
        Z = pilot_basis(phi_of_x(QUAD, 33.0), CFG)
        y = 0.4j * Z + rng.standard_normal(Z.shape) + 1j * rng.standard_normal(Z.shape)
        ref, *_ = np.linalg.lstsq(Z.reshape(-1, 1), y.reshape(-1), rcond=None)
        assert abs(alpha_closed_form(y, 33.0, QUAD, CFG) - ref[0]) < 1e-10


class TestPilotLikelihood:
    def test_zero_at_truth_negative_elsewhere(self, rng):
        Y, alphas = pilot_instance(LIN, 30.0, 71.1, rng)
        assert loglik_pilot(Y, LIN, 30.0, 71.1, alphas, 1.0, DT, CFG) == pytest.approx(0.0,
                                                                                      abs=1e-9)
        assert loglik_pilot(Y, LIN, 31.0, 71.1, alphas, 1.0, DT, CFG) < 0
        assert loglik_pilot(Y, LIN, 30.0, 60.0, alphas, 1.0, DT, CFG) < 0

    def test_noise_scaling(self, rng):
        Y, alphas = pilot_instance(LIN, 30.0, 71.1, rng, sigma_n=1.0)
        a = loglik_pilot(Y, LIN, 25.0, 71.1, alphas, 1.0, DT, CFG)
        b = loglik_pilot(Y, LIN, 25.0, 71.1, alphas, 2.0, DT, CFG)
        assert b == pytest.approx(a / 4.0)

    def test_grid_oracle_recovers_truth(self, rng):
        Y, _ = pilot_instance(LIN, 30.0, 71.1, rng)
        x, v = profiled_grid_oracle(Y, LIN, np.arange(-100, 100.01, 0.1),
                                    np.arange(-150, 150.01, 0.1))
        assert abs(x - 30.0) <= 0.1 + 1e-9 and abs(v - 71.1) <= 0.1 + 1e-9


class TestPilotEstimator:
    @pytest.mark.parametrize("track", [LIN, QUAD])
    def test_noiseless(self, track, rng):
        Y, _ = pilot_instance(track, 30.0, 71.1, rng)
        est = estimate_from_pilots(Y, track, CFG, SET, DT, sigma_n=1.0)
        assert abs(est.x - 30.0) <= SET.grid_x and abs(est.v - 71.1) <= SET.grid_v
        assert est.source == "pilot"

    def test_zero_speed(self, rng):
        Y, _ = pilot_instance(LIN, -20.0, 0.0, rng)
        est = estimate_from_pilots(Y, LIN, CFG, SET, DT)
        assert abs(est.v) <= SET.grid_v and abs(est.x + 20.0) <= SET.grid_x

    def test_objective_monotone(self, rng):
        ests = []
        for _ in range(20):
            x = rng.uniform(-90, 90)
            ests.append(pilot_instance(LIN, x, 71.1, rng, sigma_n=1.0)[0])
        for est in estimate_pilots_batch(np.stack(ests), LIN, CFG, SET, DT, 1.0):
            assert np.all(np.diff(est.objective) >= -1e-9 * max(1.0, abs(est.objective[0])))

    def test_mirror_symmetry(self, rng):
        Y, _ = pilot_instance(LIN, 35.0, 71.1, rng, sigma_n=0.5)
        mirrored = np.conj(Y[:, :, ::-1])
        a = estimate_from_pilots(Y, LIN, CFG, SET, DT, 0.5)
        b = estimate_from_pilots(mirrored, LIN, CFG, SET, DT, 0.5)
        assert b.x == pytest.approx(-a.x, abs=2 * SET.grid_x)
        assert b.v == pytest.approx(-a.v, abs=2 * SET.grid_v)

    def test_consistency_over_40_db(self):
        rng = np.random.default_rng(7)
        xs = rng.uniform(-90, 90, 30)
        mse = []
        for sigma in (1.0, 0.1, 0.01):
            Y = np.stack([pilot_instance(LIN, x, 71.1, rng, sigma_n=sigma)[0] for x in xs])
            est = estimate_pilots_batch(Y, LIN, CFG, SET, DT, sigma)
            mse.append(np.mean([(e.x - x) ** 2 for e, x in zip(est, xs)]))
        assert mse[0] > 10 * mse[1] > 100 * mse[2]
        # floor: golden-section refinement stops at the search resolution
        assert mse[2] <= (2 * SET.grid_x) ** 2

    def test_rejects_short_sweep(self, rng):
        with pytest.raises(ValueError):
            estimate_from_pilots(np.zeros((1, 4, 8), complex), LIN, CFG, SET, DT)

    def test_strict_not_converged(self, rng):
        Y, _ = pilot_instance(LIN, 30.0, 71.1, rng, sigma_n=3.0, scale=0.01)
        s = EstimatorSettings(k_max=1, theta_th_x=0.05, theta_th_v=0.05)
        est = estimate_from_pilots(Y, LIN, CFG, s, DT, 3.0)
        if not est.ok:
            with pytest.raises(NotConverged) as info:
                estimate_from_pilots(Y, LIN, CFG, s, DT, 3.0, strict=True)
            assert info.value.estimate is not None


class TestMeasurementInit:
    def test_round_trip(self):
        tau, fd = true_delay_doppler(LIN, -40.0, 71.1, FC)
        x0, v0 = init_from_measurements(tau, fd, LIN, FC)
        assert x0 == pytest.approx(-40.0, abs=1e-6) and v0 == pytest.approx(71.1, abs=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-95, -2), st.floats(20, 150))
    def test_quadratic_round_trip(self, x, v):
        # forward motion: the side of the BS follows from the Doppler sign
        tau, fd = true_delay_doppler(QUAD, x, v, FC)
        x0, v0 = init_from_measurements(tau, fd, QUAD, FC)
        assert x0 == pytest.approx(x, abs=1e-6)
        assert v0 == pytest.approx(v, rel=1e-6)

    def test_broadside_sign_ambiguity(self):
        tau, fd = true_delay_doppler(LIN, 0.0, 71.1, FC)
        with pytest.raises(SignAmbiguity):
            init_from_measurements(tau, fd, LIN, FC)

    def test_delay_below_minimum(self):
        with pytest.raises(NoGeometricSolution):
            init_from_measurements(10.0 / 3e8, -500.0, LIN, FC)
        x0, _ = init_from_measurements(10.0 / 3e8, -500.0, LIN, FC, clamp=True)
        assert x0 == 0.0


class TestMeasurementLikelihood:
    def test_zero_at_truth(self):
        xs = trajectory_locations(QUAD, 20.0, 70.0, 3, DT)
        tau, fd = true_delay_doppler(QUAD, xs, 70.0, FC)
        assert loglik_measurements(tau, fd, QUAD, 20.0, 70.0, FC, VAR, DT) == pytest.approx(0.0)

    def test_single_corruption(self):
        xs = trajectory_locations(LIN, 20.0, 70.0, 3, DT)
        tau, fd = true_delay_doppler(LIN, xs, 70.0, FC)
        delta = 3e-9
        tau2 = tau.copy()
        tau2[1] += delta
        got = loglik_measurements(tau2, fd, LIN, 20.0, 70.0, FC, VAR, DT)
        assert got == pytest.approx(-delta ** 2 / (2 * VAR.tau), rel=1e-9)

    def test_grid_oracle(self):
        xs = trajectory_locations(LIN, -55.0, 71.1, 3, DT)
        tau, fd = true_delay_doppler(LIN, xs, 71.1, FC)
        xg, vg = np.meshgrid(np.arange(-100, 100.01, 0.5), np.arange(-150, 150.01, 0.5))
        vals = np.vectorize(lambda a, b: loglik_measurements(tau, fd, LIN, a, b, FC, VAR, DT))(
            xg, vg)
        k = np.unravel_index(np.argmax(vals), vals.shape)
        # a straight track cannot tell (x, v) from its mirror (-x, -v)
        side = np.sign(vg[k])
        assert abs(side * xg[k] + 55.0) <= 0.5 and abs(side * vg[k] - 71.1) <= 0.5


class TestMeasurementEstimator:
    @pytest.mark.parametrize("track", [LIN, QUAD])
    def test_noiseless(self, track):
        xs = trajectory_locations(track, -30.0, 71.1, 3, DT)
        tau, fd = true_delay_doppler(track, xs, 71.1, FC)
        est = estimate_from_measurements(tau, fd, track, FC, VAR, SET, DT)
        assert abs(est.x + 30.0) <= SET.grid_x and abs(est.v - 71.1) <= SET.grid_v

    def test_objective_monotone(self, rng):
        xs = rng.uniform(-90, 90, 50)
        tau_m, fd_m = [], []
        for x in xs:
            traj = trajectory_locations(LIN, x, 71.1, 3, DT)
            t, f = gen_measurements(LIN, traj, 71.1, FC, VAR, rng)
            tau_m.append(t)
            fd_m.append(f)
        for est in estimate_measurements_batch(np.array(tau_m), np.array(fd_m), LIN, FC, VAR,
                                               SET, DT):
            assert np.all(np.diff(est.objective) >= -1e-9 * max(1.0, abs(est.objective[0])))

    def test_broadside_less_accurate(self):
        # ensemble ordering: instances near x = 0 are located worse than far ones
        rng = np.random.default_rng(11)
        errs = {}
        for name, lo, hi in (("near", -5.0, 5.0), ("far", 60.0, 90.0)):
            xs = rng.uniform(lo, hi, 250) * rng.choice([-1, 1], 250)
            tau_m, fd_m = [], []
            for x in xs:
                traj = trajectory_locations(LIN, x, 71.1, 3, DT)
                t, f = gen_measurements(LIN, traj, 71.1, FC, VAR, rng)
                tau_m.append(t)
                fd_m.append(f)
            est = estimate_measurements_batch(np.array(tau_m), np.array(fd_m), LIN, FC, VAR,
                                              SET, DT)
            errs[name] = np.mean([(e.x - x) ** 2 for e, x in zip(est, xs)])
        assert errs["near"] > errs["far"]

    def test_consistency_over_40_db(self):
        rng = np.random.default_rng(5)
        xs = rng.uniform(-90, 90, 40)
        mse = []
        for scale in (1.0, 1e-2, 1e-4):
            var = MeasurementVariances(VAR.tau * scale, VAR.fd * scale)
            tau_m, fd_m = [], []
            for x in xs:
                traj = trajectory_locations(LIN, x, 71.1, 3, DT)
                t, f = gen_measurements(LIN, traj, 71.1, FC, var, rng)
                tau_m.append(t)
                fd_m.append(f)
            est = estimate_measurements_batch(np.array(tau_m), np.array(fd_m), LIN, FC, var,
                                              SET, DT)
            mse.append(np.mean([(e.x - x) ** 2 for e, x in zip(est, xs)]))
        assert mse[0] > mse[1] > mse[2]
        assert mse[2] <= SET.grid_x ** 2

    def test_rejects_ragged(self):
        with pytest.raises(ValueError):
            estimate_measurements_batch(np.zeros((2, 3)), np.zeros((2, 2)), LIN, FC, VAR, SET, DT)

    def test_broadside_fallback_status(self):
        xs = trajectory_locations(LIN, 0.0, 0.0, 3, DT)
        tau, fd = true_delay_doppler(LIN, xs, 0.0, FC)
        est = estimate_from_measurements(tau, fd, LIN, FC, VAR, SET, DT)
        assert "sign_ambiguity" in est.status
        assert math.isfinite(est.x) and math.isfinite(est.v)
