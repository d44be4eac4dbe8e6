import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iclgd import closed_form as cf
from iclgd.closed_form import Validity
from iclgd.errors import RegimeError, UnsupportedError

dims = st.integers(1, 60)
reals = st.floats(0, 5, allow_nan=False)


class TestGdExpectedLoss:
    def test_zero_step(self):
        assert cf.gd_expected_loss(5, 3, 1, 0.0, 2.0, 0.5).mean == 2.5

    def test_unit_step_value(self):
        # 41/20 + 1 + 40/20
        assert cf.gd_expected_loss(40, 20, 1, 1.0, 1.0, 1.0).mean == pytest.approx(5.05, rel=1e-15)

    def test_optimal_step_value(self):
        loss = cf.gd_expected_loss(40, 20, 1, 20 / 61, 1.0, 0.0).mean
        assert loss == pytest.approx(41 / 61, rel=1e-14)

    def test_always_valid(self):
        assert cf.gd_expected_loss(3, 1, 2, 5.0, 1.0, 1.0).validity is Validity.VALID

    def test_large_prompt_limit(self):
        assert abs(cf.gd_expected_loss(40, 10**6, 3, 1.0, 1.0, 0.7).mean - 0.7 * 3) < 1e-3

    def test_several_outputs(self):
        # noise enters through Z X^T, whose expected squared norm is m n N
        n, N, m, eta, s, v = 8, 12, 3, 0.6, 2.0, 0.4
        expected = s * ((1 - eta) ** 2 + eta**2 * (n + 1) / N) + v * (m + m * n * N * (eta / N) ** 2)
        assert cf.gd_expected_loss(n, N, m, eta, s, v).mean == pytest.approx(expected, rel=1e-14)
        assert cf.gd_expected_loss(n, N, 1, eta, s, v).mean == pytest.approx(
            s * ((1 - eta) ** 2 + eta**2 * (n + 1) / N) + v * (1 + eta**2 * n / N), rel=1e-14)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            cf.gd_expected_loss(0, 3, 1, 1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            cf.gd_expected_loss(3, 3, 1, -1.0, 1.0, 1.0)


class TestOptimalEta:
    def _grid_argmin(self, n, N, inv):
        grid = np.linspace(0, 1, 1_000_001)
        losses = 1.0 * ((1 - grid) ** 2 + grid**2 * (n + 1) / N) + inv * (1 + grid**2 * n / N)
        return grid[np.argmin(losses)]

    def test_noise_agnostic(self):
        assert cf.gd_optimal_eta(40, 20) == pytest.approx(20 / 61, rel=1e-15)
        assert abs(self._grid_argmin(40, 20, 0.0) - 20 / 61) < 1e-6

    def test_noisy(self):
        assert cf.gd_optimal_eta(40, 20, 1.0) == pytest.approx(20 / 101, rel=1e-15)
        assert abs(self._grid_argmin(40, 20, 1.0) - 20 / 101) < 1e-6

    def test_huge_noise(self):
        assert cf.gd_optimal_eta(40, 20, 1e9) < 1e-6

    @pytest.mark.parametrize("inv", [0.0, 0.5, 1.0, 2.0])
    def test_beats_every_grid_step(self, inv):
        grid = np.linspace(0, 2, 1000)
        for n in (1, 5, 40):
            for N in (1, 7, 20, 100):
                eta = cf.gd_optimal_eta(n, N, inv)
                assert 0 < eta < 1
                best = cf.gd_expected_loss(n, N, 1, eta, 1.0, inv).mean
                others = [cf.gd_expected_loss(n, N, 1, e, 1.0, inv).mean for e in grid]
                assert best <= min(others) + 1e-12


def _exact_variance_eta1(n, N, s, v):
    """Rational evaluation of the unit-step variance via mean^2 subtraction."""
    n, N, s, v = (Fraction(x) for x in (n, N, s, v))
    a = 1 / N
    cube = N * (4 + n**2 + 3 * n * (1 + N) + N * (3 + N))
    poly = 1 + a * N * (-4 + a * (2 * (5 + n + 3 * N) + a * (2 + N) * (3 + n + N) * (-4 + a * (5 + n + N))))
    second = (
        poly * 3 * s * s
        + 12 * a**2 * v * s * (N - 2 * a * N * (N + n + 1) + a**2 * cube)
        + 6 * a**2 * v * s * (N * n - 2 * a * N * (2 + N * n) + a**2 * N * (1 + n + N) * (4 + n * N))
        + 6 * v * s * (1 - 2 * a * N + a**2 * N * (N + n + 1))
        + v * v * (6 * a**4 * N * n * (N + n + 1) + 3 * a**4 * N * (2 * n + N * n**2) + 6 * a**2 * n * N + 3)
    )
    mean = s * (n + 1) / N + v * (1 + n / N)
    return second - mean * mean


class TestGdSecondMoment:
    def test_sys_zero_step(self):
        assert cf.gd_sys_second_moment(7, 3, 0.0, 2.0, 1.5) == 2 * 1.5 + 4.0

    def test_sys_zero_signal(self):
        assert cf.gd_sys_second_moment(7, 3, 0.6, 0.0, 0.0) == 0.0

    def test_sys_value(self):
        value = cf.gd_sys_second_moment(40, 20, 1.0, 1.0, 1.0)
        expected = (41 / 20) ** 2 + (90 + 48 * 40 + 6 * 1600) / 8000 + (20 + 400 + 3200) / 400
        assert value == pytest.approx(14.70375, rel=1e-12)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_zero_everything(self):
        r = cf.gd_second_moment_m1(5, 5, 0.7, 0.0, 0.0)
        assert (r.mean, r.second_moment, r.variance) == (0.0, 0.0, 0.0)

    def test_pure_test_noise(self):
        assert cf.gd_second_moment_m1(5, 5, 0.0, 0.0, 1.0).second_moment == 3.0

    def test_reference_values(self):
        r = cf.gd_second_moment_m1(40, 20, 1.0, 1.0, 1.0)
        assert r.second_moment == pytest.approx(84.40275, rel=1e-12)
        assert r.variance == pytest.approx(58.90025, rel=1e-12)

    def test_variance_formula_against_rationals(self):
        for n, N, s, v in [(40, 20, 1, 1), (3, 1, 2, 0), (1, 7, 0, 3), (50, 100, 3, Fraction(1, 2))]:
            exact = _exact_variance_eta1(n, N, s, v)
            assert cf.gd_variance_eta1(n, N, float(s), float(v)) == pytest.approx(float(exact), rel=1e-13)

    @settings(max_examples=200, deadline=None)
    @given(n=dims, N=st.integers(1, 200), eta=st.floats(0, 2), s=reals, v=reals,
           c=st.floats(0.01, 100))
    def test_homogeneity(self, n, N, eta, s, v, c):
        base = cf.gd_second_moment_m1(n, N, eta, s, v)
        scaled = cf.gd_second_moment_m1(n, N, eta, c * s, c * v)
        assert scaled.mean == pytest.approx(c * base.mean, rel=1e-12, abs=1e-300)
        assert scaled.second_moment == pytest.approx(c * c * base.second_moment, rel=1e-12, abs=1e-300)
        assert cf.gd_variance_eta1(n, N, c * s, c * v) == pytest.approx(
            c * c * cf.gd_variance_eta1(n, N, s, v), rel=1e-12, abs=1e-300)

    @settings(max_examples=200, deadline=None)
    @given(n=dims, N=st.integers(1, 200), eta=st.floats(0, 2), s=reals, v=reals)
    def test_second_moment_dominates_mean_square(self, n, N, eta, s, v):
        r = cf.gd_second_moment_m1(n, N, eta, s, v)
        assert r.second_moment >= r.mean**2 - 1e-9 * max(1.0, r.mean**2)
        assert r.variance == pytest.approx(r.second_moment - r.mean**2, rel=1e-9, abs=1e-12)


class TestGdBound:
    def test_zero_loss(self):
        for d in (0.01, 0.5, 1.0):
            assert cf.gd_chebyshev_bound(10, 5, d, 0.0, 0.0).bound == 0.0

    def test_reference_noisy(self):
        b = cf.gd_chebyshev_bound(40, 20, 0.1, 1.0, 1.0)
        assert b.mean_term == pytest.approx(5.05, rel=1e-15)
        assert b.bound == pytest.approx(5.05 + math.sqrt(58.90025 / 0.1), rel=1e-12)
        assert b.bound == pytest.approx(29.319, abs=5e-4)

    def test_reference_noiseless(self):
        b = cf.gd_chebyshev_bound(40, 60, 0.1, 1.0, 0.0)
        assert b.mean_term == pytest.approx(41 / 60, rel=1e-15)
        assert b.deviation_term**2 == pytest.approx(10.59306, rel=1e-6)
        assert b.bound == pytest.approx(3.938, abs=5e-4)

    def test_large_n(self):
        b = cf.gd_chebyshev_bound(40, 20, 0.2, 1.5, 0.0, large_n=True)
        assert b.bound == pytest.approx(2 * (1 + math.sqrt(10)) * 1.5, rel=1e-14)
        with pytest.raises(UnsupportedError):
            cf.gd_chebyshev_bound(40, 20, 0.2, 1.0, 0.1, large_n=True)

    def test_delta_range(self):
        for d in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                cf.gd_chebyshev_bound(4, 5, d, 1.0, 1.0)

    def test_structure_and_monotone(self):
        deltas = np.linspace(0.01, 1, 50)
        bounds = [cf.gd_chebyshev_bound(12, 30, d, 1.0, 0.5) for d in deltas]
        for b in bounds:
            assert b.bound == b.mean_term + b.deviation_term
            assert b.deviation_term == pytest.approx(math.sqrt(b.variance / b.delta), rel=1e-15)
        assert all(x.bound > y.bound for x, y in zip(bounds, bounds[1:]))


class TestLeastSquaresMoments:
    def test_under_noiseless(self):
        assert cf.ls_expected_loss(40, 20, 1.0, 0.0).mean == 0.5

    def test_under_noisy(self):
        assert cf.ls_expected_loss(40, 20, 1.0, 1.0).mean == pytest.approx(0.5 + 39 / 19, rel=1e-15)

    def test_over(self):
        assert cf.ls_expected_loss(40, 60, 1.0, 1.0).mean == pytest.approx(1 + 40 / 19, rel=1e-15)

    def test_large_prompt_limit(self):
        assert abs(cf.ls_expected_loss(40, 10**6, 1.0, 1.0).mean - 1.0) < 1e-3

    @pytest.mark.parametrize("N", [39, 41])
    def test_divergent_next_to_threshold(self, N):
        r = cf.ls_expected_loss(40, N, 1.0, 1.0)
        assert r.validity is Validity.DIVERGENT and r.mean == math.inf
        assert cf.ls_expected_loss(40, N, 1.0, 0.0).validity is Validity.VALID

    def test_threshold_undefined(self):
        with pytest.raises(RegimeError):
            cf.ls_expected_loss(40, 40, 1.0, 1.0)

    def test_second_moment_over(self):
        r = cf.ls_second_moment(40, 60, 0.3, 1.0)
        assert r.second_moment == pytest.approx(3 * 59 * 57 / (19 * 17), rel=1e-14)
        assert r.second_moment == pytest.approx(31.23529, abs=1e-5)

    def test_second_moment_under(self):
        r = cf.ls_second_moment(40, 20, 1.0, 1.0)
        parts = (3 * 39 * 37 / (19 * 17), 6 * 39 * 20 / (40 * 19), 3 * 20 * 22 / (40 * 42))
        assert r.second_moment == pytest.approx(sum(parts), rel=1e-14)
        assert r.second_moment == pytest.approx(20.34608, abs=1e-5)
        assert cf.ls_second_moment(40, 20, 1.0, 0.0).second_moment == pytest.approx(0.785714, abs=1e-6)

    @pytest.mark.parametrize("N", [38, 39, 40, 41, 42, 43])
    def test_second_moment_window(self, N):
        r = cf.ls_second_moment(40, N, 1.0, 1.0)
        assert r.validity is Validity.UNDEFINED and r.second_moment is None

    def test_second_moment_window_edges(self):
        assert cf.ls_second_moment(40, 44, 1.0, 1.0).validity is Validity.VALID
        assert cf.ls_second_moment(40, 36, 1.0, 1.0).validity is Validity.VALID
        assert cf.ls_second_moment(40, 37, 1.0, 1.0).validity is Validity.DIVERGENT
        assert cf.ls_second_moment(40, 37, 1.0, 0.0).validity is Validity.VALID

    def test_variance_nonnegative(self):
        for n in range(1, 51):
            for N in range(1, 101):
                for s in (0.0, 0.5, 1.0, 3.0):
                    for v in (0.0, 0.5, 1.0, 3.0):
                        r = cf.ls_second_moment(n, N, s, v)
                        if r.validity is Validity.VALID:
                            assert r.variance >= -1e-9 * max(1.0, r.mean**2)

    def test_bound(self):
        b = cf.ls_chebyshev_bound(40, 60, 0.1, 1.0, 1.0)
        var = 3 * 59 * 57 / (19 * 17) - (1 + 40 / 19) ** 2
        assert b.bound == pytest.approx(1 + 40 / 19 + math.sqrt(var / 0.1), rel=1e-13)
        with pytest.raises(RegimeError):
            cf.ls_chebyshev_bound(40, 42, 0.1, 1.0, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(n=dims, N=st.integers(1, 200), s=reals, v=reals, c=st.floats(0.01, 100))
    def test_homogeneity(self, n, N, s, v, c):
        if N == n:
            return
        base, scaled = cf.ls_second_moment(n, N, s, v), cf.ls_second_moment(n, N, c * s, c * v)
        assert scaled.validity == base.validity
        if base.validity is Validity.VALID:
            assert scaled.mean == pytest.approx(c * base.mean, rel=1e-12, abs=1e-300)
            assert scaled.second_moment == pytest.approx(c * c * base.second_moment, rel=1e-12,
                                                         abs=1e-300)


class TestBreakdown:
    def test_gd_first(self):
        b = cf.breakdown("gd", "first", 40, 20, 1.0, 2.0, 0.5)
        assert b.systematic == pytest.approx(2.0 * 41 / 20)
        assert b.noise == pytest.approx(0.5 * (1 + 40 / 20))
        assert b.interaction == 0.0

    def test_gd_second_reference(self):
        b = cf.breakdown("gd", "second", 40, 20, 1.0, 1.0, 1.0)
        assert b.noise == pytest.approx(28.86, rel=1e-12)
        assert b.interaction == pytest.approx(40.839, rel=1e-12)
        assert b.systematic == pytest.approx(14.70375, rel=1e-12)
        assert b.total == pytest.approx(84.40275, rel=1e-12)

    def test_ls_noiseless(self):
        b = cf.breakdown("ls", "second", 40, 20, 1.0, 1.0, 0.0)
        assert b.interaction == 0.0 and b.noise == 0.0

    def test_sums_match_totals(self):
        for n, N in [(40, 20), (40, 60), (5, 1), (1, 9)]:
            for eta in (0.3, 1.0):
                b = cf.breakdown("gd", "second", n, N, eta, 1.3, 0.7)
                total = cf.gd_second_moment_m1(n, N, eta, 1.3, 0.7).second_moment
                assert b.total == pytest.approx(total, rel=1e-12)
                b = cf.breakdown("gd", "first", n, N, eta, 1.3, 0.7)
                assert b.total == pytest.approx(cf.gd_expected_loss(n, N, 1, eta, 1.3, 0.7).mean, rel=1e-12)
            if cf.ls_second_moment(n, N, 1.3, 0.7).validity is Validity.VALID:
                b = cf.breakdown("ls", "second", n, N, sigma2=0.7, signal2=1.3)
                assert b.total == pytest.approx(cf.ls_second_moment(n, N, 1.3, 0.7).second_moment, rel=1e-12)
                b = cf.breakdown("ls", "first", n, N, sigma2=0.7, signal2=1.3)
                assert b.total == pytest.approx(cf.ls_expected_loss(n, N, 1.3, 0.7).mean, rel=1e-12)

    def test_errors(self):
        with pytest.raises(RegimeError):
            cf.breakdown("ls", "second", 40, 41)
        with pytest.raises(RegimeError):
            cf.breakdown("ls", "first", 40, 40)
        with pytest.raises(UnsupportedError):
            cf.breakdown("gd", "second", 4, 4, m=2)
        with pytest.raises(ValueError):
            cf.breakdown("ridge", "first", 4, 4)
        with pytest.raises(ValueError):
            cf.breakdown("gd", "third", 4, 4)
