import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egl.gradnet import ls_mean_gradient
from egl.mappings import (InputMap, OutputMap, TrustRegion, fit_output_map, input_forward, input_inverse,
                          output_forward, recover_gradient, shrink_trust_region, squash, squash_derivative, unsquash)


def _squash_ref(v):
    if v < -1:
        return -math.log(-v) - 1
    if v >= 1:
        return math.log(v) + 1
    return v


def _region(lo, hi):
    return TrustRegion(np.atleast_1d(np.asarray(lo, dtype=float)), np.atleast_1d(np.asarray(hi, dtype=float)))


class TestSquash:
    def test_examples(self):
        assert squash(0.5) == 0.5
        assert squash(math.e) == pytest.approx(2.0, abs=1e-15)
        assert squash(-math.e) == pytest.approx(-2.0, abs=1e-15)

    def test_branches_match_scalar_reference(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.uniform(-50, 50, 5000), rng.uniform(-2, 2, 5000)])
        ref = np.array([_squash_ref(v) for v in x])
        np.testing.assert_array_max_ulp(squash(x), ref, maxulp=2)

    def test_continuity_at_plus_minus_one(self):
        for s in (1.0, -1.0):
            assert abs(squash(s * (1 - 1e-12)) - squash(s * (1 + 1e-12))) <= 1e-9

    @given(a=st.floats(-1e6, 1e6), b=st.floats(-1e6, 1e6))
    def test_strictly_increasing(self, a, b):
        if a < b:
            assert squash(a) < squash(b)

    @given(st.floats(-1e6, 1e6))
    def test_unsquash_inverts(self, v):
        assert unsquash(squash(v)) == pytest.approx(v, rel=1e-12, abs=1e-12)

    def test_derivative_fd(self):
        x = np.array([-7.0, -1.5, -0.3, 0.4, 1.2, 30.0])
        h = 1e-6
        fd = (squash(x + h) - squash(x - h)) / (2 * h)
        np.testing.assert_allclose(squash_derivative(x), fd, rtol=1e-7)


class TestInputMap:
    def test_center_to_zero(self):
        h = InputMap(_region([-5, -5], [5, 5]))
        assert np.array_equal(input_forward(h, np.zeros(2)), np.zeros(2))
        lopsided = InputMap(_region([-3, 1], [2, 4]))
        assert np.abs(lopsided.forward(lopsided.region.center)).max() <= 1e-15

    def test_known_value(self):
        h = InputMap(_region(0.0, 2.0))
        assert h.forward(np.array([1.5]))[0] == pytest.approx(math.atanh(0.5), abs=1e-15)
        assert math.atanh(0.5) == pytest.approx(0.549306, abs=1e-6)

    def test_upper_bound_clamped(self):
        h = InputMap(_region(-1.0, 3.0))
        v = h.forward(np.array([3.0]))[0]
        assert v == pytest.approx(math.atanh(1 - 1e-6), rel=1e-9)
        assert v == pytest.approx(7.254, abs=1e-3)
        assert h.clamped(np.array([3.0]))[0]

    def test_inverse_examples(self):
        h = InputMap(_region([-5, 0], [5, 2]))
        assert np.allclose(input_inverse(h, np.zeros(2)), [0.0, 1.0])
        assert np.allclose(input_inverse(h, np.array([50.0, 50.0])), [5.0, 2.0], atol=1e-9)

    def test_formula_matches_scalar_reference(self):
        lo, hi = np.array([-3.0, -5.0]), np.array([2.0, 5.0])
        h = InputMap(TrustRegion(lo, hi))
        xs = np.random.default_rng(1).uniform(lo, hi, size=(5000, 2))

        def ref(v, a, b):
            a_, b_ = 2 / (b - a), -(b + a) / (b - a)
            return math.atanh(min(max(a_ * v + b_, -(1 - 1e-6)), 1 - 1e-6))

        expected = np.array([[ref(x[0], lo[0], hi[0]), ref(x[1], lo[1], hi[1])] for x in xs])
        np.testing.assert_array_max_ulp(h.forward(xs), expected, maxulp=4)

    @given(u=st.lists(st.floats(-0.999, 0.999), min_size=3, max_size=3), seed=st.integers(0, 100))
    @settings(max_examples=60, deadline=None)
    def test_round_trip(self, u, seed):
        rng = np.random.default_rng(seed)
        lo = rng.uniform(-5, 0, 3)
        hi = lo + rng.uniform(0.1, 5, 3)
        h = InputMap(TrustRegion(lo, hi))
        x = h.region.center + 0.5 * h.region.width * np.array(u)
        np.testing.assert_allclose(h.inverse(h.forward(x)), x, atol=1e-9)

    def test_monotone(self):
        h = InputMap(_region(-2.0, 7.0))
        x = np.linspace(-2, 7, 1001)[1:-1, None]
        assert np.all(np.diff(h.forward(x)[:, 0]) > 0)

    def test_derivative_fd(self):
        h = InputMap(_region([-5, -1], [5, 3]))
        x = np.array([1.3, 2.1])
        e = 1e-6
        fd = (h.forward(x + e) - h.forward(x - e)) / (2 * e)
        np.testing.assert_allclose(h.derivative(x), fd, rtol=1e-6)

    def test_bad_region(self):
        with pytest.raises(ValueError):
            _region([0, 1], [1, 1])


class TestOutputMap:
    def test_first_fit_quantiles(self):
        om = fit_output_map(OutputMap(), np.linspace(0, 100, 101))
        assert (om.q_low, om.q_high) == (pytest.approx(10.0), pytest.approx(90.0))

    def test_blend(self):
        om = OutputMap(q_low=10.0, q_high=90.0, om_lr=0.1, fitted=True)
        om = om.fit(np.linspace(10, 110, 101))  # sample quantiles 20 and 100
        assert om.q_low == pytest.approx(11.0)
        assert om.q_high == pytest.approx(91.0)

    def test_degenerate(self):
        om = OutputMap().fit(np.full(7, 3.0))
        assert om.q_low == 2.5 and om.q_high == 3.5
        assert om.forward(3.0) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            OutputMap().fit([])

    def test_examples(self):
        om = OutputMap(q_low=2.0, q_high=6.0, fitted=True)
        assert output_forward(om, 2.0) == -1.0
        assert output_forward(om, 4.0) == 0.0
        assert output_forward(om, 6.0 + 4.0 * (math.e - 1) / 2) == pytest.approx(2.0, abs=1e-14)

    @given(lo=st.floats(-100, 100), span=st.floats(1e-3, 100), t=st.floats(-10, 10))
    def test_round_trip_and_monotone(self, lo, span, t):
        om = OutputMap(q_low=lo, q_high=lo + span, fitted=True)
        y = lo + t * span
        assert om.inverse(om.forward(y)) == pytest.approx(y, abs=1e-9 * max(1.0, abs(y)))
        assert om.forward(y) < om.forward(y + 1e-3 * span)


class TestRecoverGradient:
    def test_linear_maps(self):
        h = InputMap(_region(-0.5, 0.5))  # h(x) = 2x near the center
        om = OutputMap(q_low=-4.0, q_high=4.0, fitted=True)  # r(y) = y / 4 in its linear branch
        g = recover_gradient(np.array([1.5]), h, om, np.array([0.0]), y=0.0)
        assert g[0] == pytest.approx(8 * 1.5, rel=1e-12)

    def test_identity(self):
        g = np.array([0.3, -2.0])
        assert np.array_equal(recover_gradient(g, None, None, np.zeros(2)), g)

    def test_needs_reference_value(self):
        with pytest.raises(ValueError):
            recover_gradient(np.ones(1), None, OutputMap(), np.zeros(1))

    @pytest.mark.parametrize("offset", [0.0, 0.6])
    def test_affine_pipeline(self, offset):
        rng = np.random.default_rng(3)
        c = np.array([2.0, -0.7, 0.4])
        h = InputMap(_region([-5, -2, 0], [5, 4, 1]))
        xt0 = np.full(3, offset)
        x0 = h.inverse(xt0)
        v = rng.uniform(-1e-5, 1e-5, size=(6, 3))
        xt = np.vstack([xt0 + v, xt0 - v])
        y = h.inverse(xt) @ c + 1.0
        # fit on a wide sample so the batch stays in the linear branch
        om = OutputMap().fit(h.region.lower @ c + 1.0 + np.linspace(0, 2 * np.abs(c) @ h.region.width, 50))
        assert np.all(np.abs(om.linear(y)) < 1)
        gt = ls_mean_gradient((xt, om.forward(y))).g_mse
        g = recover_gradient(gt, h, om, x0, y=float(x0 @ c + 1.0))
        np.testing.assert_allclose(g, c, atol=1e-8)


class TestShrink:
    def test_centered(self):
        tr = shrink_trust_region(_region([-5, -5], [5, 5]), np.zeros(2), 0.9, [-5, -5], [5, 5])
        np.testing.assert_allclose(tr.lower, [-4.5, -4.5])
        np.testing.assert_allclose(tr.upper, [4.5, 4.5])
        assert tr.generation == 1

    def test_shifted_inward(self):
        tr = shrink_trust_region(_region(-5.0, 5.0), np.array([4.9]), 0.9, [-5.0], [5.0])
        assert tr.width[0] == pytest.approx(9.0)
        assert tr.lower[0] >= -5 and tr.upper[0] <= 5
        assert tr.contains(np.array([4.9]))

    def test_gamma_one_recenters(self):
        tr0 = _region([-2, -2], [2, 2])
        tr = shrink_trust_region(tr0, np.array([0.5, -1.0]), 1.0, [-5, -5], [5, 5])
        np.testing.assert_allclose(tr.width, tr0.width)
        np.testing.assert_allclose(tr.center, [0.5, -1.0])

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            shrink_trust_region(_region(0.0, 1.0), np.array([0.5]), 0.0, [0.0], [1.0])

    @given(seed=st.integers(0, 10_000), gamma=st.floats(0.05, 1.0), steps=st.integers(1, 8))
    @settings(max_examples=60, deadline=None)
    def test_containment_and_scale(self, seed, gamma, steps):
        rng = np.random.default_rng(seed)
        lo, hi = np.full(3, -5.0), np.full(3, 5.0)
        tr = TrustRegion(lo, hi)
        for _ in range(steps):
            x_best = rng.uniform(tr.lower, tr.upper)
            new = shrink_trust_region(tr, x_best, gamma, lo, hi)
            # absolute slack: a few ulps of coordinates of size 5
            np.testing.assert_allclose(new.width, gamma * tr.width, rtol=1e-12, atol=1e-14)
            assert np.all(new.lower >= lo) and np.all(new.upper <= hi)
            assert np.all(new.contains(x_best))
            tr = new
