import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zsdistill.errors import ConfigError, OptimizerError, ScheduleError
from zsdistill.optim import CosineSchedule, SgdState, lr_at, sgd_step


class TestSchedule:
    def test_start_is_base_lr(self):
        assert lr_at(CosineSchedule(3e-3, 100), 0) == 3e-3

    def test_endpoint(self):
        assert lr_at(CosineSchedule(3e-3, 100), 100) == pytest.approx(0.0, abs=1e-18)

    def test_midpoint(self):
        assert lr_at(CosineSchedule(3e-3, 100), 50) == pytest.approx(1.5e-3, abs=1e-15)

    def test_eta_min(self):
        s = CosineSchedule(3e-3, 10, 1e-4)
        assert lr_at(s, 10) == pytest.approx(1e-4, abs=1e-15)
        assert lr_at(s, 5) == pytest.approx((3e-3 + 1e-4) / 2, abs=1e-15)

    @pytest.mark.parametrize("step", [-1, 11])
    def test_out_of_range(self, step):
        with pytest.raises(ScheduleError):
            lr_at(CosineSchedule(1.0, 10), step)

    @pytest.mark.parametrize("kw", [dict(base_lr=0), dict(total_steps=0), dict(eta_min=2.0, base_lr=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            CosineSchedule(**kw)

    @given(st.integers(1, 500), st.floats(1e-5, 1.0), st.floats(0, 1))
    def test_non_increasing(self, total, base, frac):
        s = CosineSchedule(base, total, base * frac)
        lrs = [lr_at(s, k) for k in range(total + 1)]
        assert all(a >= b - 1e-15 for a, b in zip(lrs, lrs[1:]))


class TestSgd:
    def test_vanilla(self):
        p, _ = sgd_step({"w": np.array([1.0])}, {"w": np.array([0.5])}, SgdState(0.0), 0.1)
        assert p["w"][0] == pytest.approx(0.95, abs=1e-15)

    def test_momentum_two_steps(self):
        g, lr = np.array([0.3]), 0.1
        state = SgdState(0.9)
        p0 = {"w": np.array([2.0])}
        p1, state = sgd_step(p0, {"w": g}, state, lr)
        p2, state = sgd_step(p1, {"w": g}, state, lr)
        # buffer after step 2 is 0.9 g + g
        assert p1["w"][0] - p2["w"][0] == pytest.approx(lr * 1.9 * 0.3, abs=1e-15)

    def test_zero_gradient_fixed_point(self):
        p = {"w": np.array([[1.0, -2.0]])}
        out, _ = sgd_step(p, {"w": np.zeros((1, 2))}, SgdState(0.9), 0.5)
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_weight_decay(self):
        out, st_ = sgd_step({"w": np.array([2.0])}, {"w": np.array([0.5])}, SgdState(0.0, 0.1), 1.0)
        assert out["w"][0] == pytest.approx(2.0 - (0.5 + 0.2), abs=1e-15)

    def test_defaults_match_recipe(self):
        s = SgdState()
        assert s.momentum == 0.9 and s.weight_decay == 0.0
        assert CosineSchedule().base_lr == 3e-3

    def test_shape_mismatch(self):
        with pytest.raises(OptimizerError):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, SgdState(), 0.1)
        with pytest.raises(OptimizerError):
            sgd_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, SgdState(), 0.1)

    def test_inputs_untouched_and_deterministic(self):
        p, g = {"w": np.array([1.0, 2.0])}, {"w": np.array([0.1, -0.1])}
        s = SgdState(0.9, 0.0, {"w": np.array([0.5, 0.5])})
        a = sgd_step(p, g, s, 0.1)
        b = sgd_step(p, g, s, 0.1)
        np.testing.assert_array_equal(a[0]["w"], b[0]["w"])
        np.testing.assert_array_equal(s.buffers["w"], [0.5, 0.5])
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    @pytest.mark.parametrize("lam,lr", [(1.0, 0.5), (4.0, 0.3), (2.0, 0.99)])
    def test_quadratic_monotone_convergence(self, lam, lr):
        # loss 0.5 * lam * p^2, plain SGD, lr < 2 / lam
        p, state = {"w": np.array([3.0])}, SgdState(0.0)
        losses = []
        for _ in range(1000):
            losses.append(0.5 * lam * p["w"][0] ** 2)
            p, state = sgd_step(p, {"w": lam * p["w"]}, state, lr)
        assert all(a > b for a, b in zip(losses, losses[1:]) if a > 1e-300)
        assert losses[-1] < 1e-6 * losses[0]

    def test_invalid_state(self):
        with pytest.raises(ConfigError):
            SgdState(1.0)
        with pytest.raises(ConfigError):
            SgdState(0.5, -1.0)
