import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beamcast.errors import DegenerateSystem
from beamcast.motion_analysis import (
    MotionObservation, loglog_slope, ls_speed_accel, power_sums, scaling_study,
    simulate_displacements, va_variances,
)


def generic_least_squares(dx, dt):
    i = np.arange(1, dx.size + 1) * dt
    A = np.column_stack([i, 0.5 * i * i])
    sol, *_ = np.linalg.lstsq(A, dx, rcond=None)
    return sol


class TestPowerSums:
    def test_one(self):
        assert power_sums(1) == (1, 1, 1, 1)

    def test_three(self):
        assert power_sums(3) == (6, 14, 36, 98)

    def test_loop_oracle(self):
        for L in range(1, 101):
            i = np.arange(1, L + 1)
            assert power_sums(L) == tuple(int(np.sum(i ** k)) for k in (1, 2, 3, 4))


class TestLeastSquares:
    def test_constant_speed(self):
        t = 0.1 * np.arange(1, 3)
        v, a = ls_speed_accel(MotionObservation(71.1 * t, 0.1))
        assert v == pytest.approx(71.1, abs=1e-9) and a == pytest.approx(0.0, abs=1e-9)

    def test_pure_acceleration(self):
        t = 0.1 * np.arange(1, 3)
        v, a = ls_speed_accel(MotionObservation(0.5 * 0.3 * t * t, 0.1))
        assert v == pytest.approx(0.0, abs=1e-9) and a == pytest.approx(0.3, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(3, 40), st.floats(0.01, 0.5), st.integers(0, 2 ** 31))
    def test_matches_generic_solve(self, L, dt, seed):
        rng = np.random.default_rng(seed)
        dx = simulate_displacements(L, dt, 0.2, 70.0, 1.0, 1, rng)[0]
        v, a = ls_speed_accel(MotionObservation(dx, dt))
        ref = generic_least_squares(dx, dt)
        assert v == pytest.approx(ref[0], abs=1e-9 * max(1.0, abs(ref[0])))
        assert a == pytest.approx(ref[1], abs=1e-9 * max(1.0, abs(ref[1])))

    def test_degenerate(self):
        with pytest.raises(DegenerateSystem):
            ls_speed_accel(MotionObservation(np.array([1.0]), 0.1))
        with pytest.raises(DegenerateSystem):
            va_variances(2, 0.1, 0.1)

    def test_unbiased(self, rng):
        dx = simulate_displacements(3, 0.1, 0.1, 71.1, 0.4, 20_000, rng)
        v, a = ls_speed_accel(MotionObservation(dx, 0.1))
        assert abs(v.mean() - 71.1) < 3 * v.std() / math.sqrt(v.size)
        assert abs(a.mean() - 0.4) < 3 * a.std() / math.sqrt(a.size)


class TestVariances:
    def test_noiseless(self):
        assert va_variances(3, 0.1, 0.0) == (0.0, 0.0)

    def test_interval_scaling(self):
        v1, a1 = va_variances(5, 0.1, 0.2)
        v2, a2 = va_variances(5, 0.2, 0.2)
        assert v2 / v1 == pytest.approx(0.25) and a2 / a1 == pytest.approx(1 / 16)

    def test_monte_carlo(self, rng):
        dx = simulate_displacements(3, 0.1, 0.1, 71.1, 0.0, 100_000, rng)
        v, a = ls_speed_accel(MotionObservation(dx, 0.1))
        th_v, th_a = va_variances(3, 0.1, 0.1)
        assert np.var(v) == pytest.approx(th_v, rel=0.05)
        assert np.var(a) == pytest.approx(th_a, rel=0.05)

    def test_accel_ten_times_speed_error(self):
        sv, sa = (math.sqrt(s) for s in va_variances(3, 0.1, 0.1))
        assert sa / sv == pytest.approx(10.0, rel=0.2)


class TestScalingStudy:
    def test_slopes_and_csv(self, rng, tmp_path):
        res = scaling_study([10, 20, 50, 100], [0.05, 0.1, 0.2, 0.4], [0.05, 0.1, 0.2, 0.4],
                            5000, rng)
        assert res.slopes["delta_t"][0] == pytest.approx(-2.0, abs=0.1)
        assert res.slopes["delta_t"][1] == pytest.approx(-4.0, abs=0.2)
        assert res.slopes["sigma_sq"][1] == pytest.approx(1.0, abs=0.05)
        res.write_csv(tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "param,value,var_v_emp,var_v_theory,var_a_emp,var_a_theory"
        assert len(lines) == 1 + 12

    def test_empirical_tracks_theory(self, rng):
        res = scaling_study([3, 5], [0.1], [0.1], 20_000, rng)
        for r in res.rows:
            assert r.var_v_emp == pytest.approx(r.var_v_theory, rel=0.05)
            assert r.var_a_emp == pytest.approx(r.var_a_theory, rel=0.05)

    def test_needs_trials(self, rng):
        with pytest.raises(ValueError):
            scaling_study([3], [0.1], [0.1], 999, rng)

    def test_loglog_slope(self):
        x = np.array([1.0, 2.0, 4.0])
        assert loglog_slope(x, 3 * x ** -2) == pytest.approx(-2.0)
