import math

import numpy as np
import pytest

from zsdistill.errors import ConfigError, DegenerateRowError, ModelError, ShapeError
from zsdistill.model import (
    EmaTeacher,
    TowerParams,
    ema_init,
    ema_update,
    forward,
    init_model,
    named_params,
    with_params,
)


def params_equal(a, b):
    pa, pb = named_params(a), named_params(b)
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) for k in pa)


class TestInit:
    def test_deterministic(self):
        assert params_equal(init_model(7, (5, 6), [8], 4), init_model(7, (5, 6), [8], 4))

    def test_seed_sensitivity(self):
        assert not params_equal(init_model(1, (5, 6), [8], 4), init_model(2, (5, 6), [8], 4))

    def test_no_hidden_layers(self):
        m = init_model(0, (5, 6), [], 4)
        assert m.image_tower.depth == 1
        assert m.image_tower.weights[0].shape == (5, 4)
        assert m.text_tower.weights[0].shape == (6, 4)

    def test_scaled_uniform_bound_and_zero_bias(self):
        m = init_model(3, (10, 20), [30], 8)
        for tower in (m.image_tower, m.text_tower):
            for w, b in zip(tower.weights, tower.biases):
                bound = math.sqrt(6 / (w.shape[0] + w.shape[1]))
                assert np.abs(w).max() <= bound
                assert np.abs(w).max() > 0.5 * bound
                assert not b.any()

    def test_defaults(self):
        m = init_model(0, (3, 3), [], 2)
        assert m.tau == 0.07 and not m.learn_tau

    @pytest.mark.parametrize("dims,hidden,embed", [((0, 3), [], 2), ((3, 3), [-1], 2), ((3, 3), [], 0)])
    def test_bad_dims(self, dims, hidden, embed):
        with pytest.raises(ConfigError):
            init_model(0, dims, hidden, embed)

    def test_bad_tau_and_activation(self):
        with pytest.raises(ConfigError):
            init_model(0, (3, 3), [], 2, tau=0.0)
        with pytest.raises(ConfigError):
            init_model(0, (3, 3), [4], 2, activation="gelu")

    def test_layer_chain_checked(self):
        with pytest.raises(ModelError):
            TowerParams((np.ones((3, 4)), np.ones((5, 2))), (np.zeros(4), np.zeros(2)))


class TestForward:
    def test_identity_passthrough(self):
        tower = TowerParams((np.eye(2),), (np.zeros(2),))
        z, _ = forward(tower, np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(z, [[0.6, 0.8]], atol=1e-15)

    def test_shapes_and_unit_rows(self, gen):
        m = init_model(0, (6, 5), [7, 9], 4)
        z, cache = forward(m.image_tower, gen.standard_normal((11, 6)))
        assert z.shape == (11, 4)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)
        assert len(cache.pre) == 3 and len(cache.post) == 2

    def test_pure(self, gen):
        m = init_model(0, (6, 5), [7], 4)
        x = gen.standard_normal((5, 6))
        x0 = x.copy()
        z1, _ = forward(m.image_tower, x)
        z2, _ = forward(m.image_tower, x)
        np.testing.assert_array_equal(z1, z2)
        np.testing.assert_array_equal(x, x0)

    def test_wrong_width(self):
        m = init_model(0, (6, 5), [], 4)
        with pytest.raises(ShapeError):
            forward(m.image_tower, np.ones((2, 5)))

    def test_degenerate_output(self):
        tower = TowerParams((np.zeros((2, 2)),), (np.zeros(2),))
        with pytest.raises(DegenerateRowError):
            forward(tower, np.ones((1, 2)))


class TestEma:
    def test_init_copies(self):
        s = init_model(0, (4, 4), [5], 3)
        t = ema_init(s, 0.5)
        assert params_equal(t.params, s) and t.params.tau == s.tau
        # a copy, not an alias
        assert t.params.image_tower.weights[0] is not s.image_tower.weights[0]

    @pytest.mark.parametrize("decay", [1.0, -0.1, 1.5])
    def test_decay_range(self, decay):
        with pytest.raises(ConfigError):
            ema_init(init_model(0, (2, 2), [], 2), decay)

    def test_decay_zero_tracks_student(self):
        s0 = init_model(0, (4, 4), [5], 3)
        s1 = init_model(1, (4, 4), [5], 3)
        t = ema_update(ema_init(s0, 0.0), s1)
        assert params_equal(t.params, s1)

    def test_arithmetic(self):
        one = TowerParams((np.ones((1, 1)),), (np.ones(1),))
        zero = TowerParams((np.zeros((1, 1)),), (np.zeros(1),))
        from zsdistill.model import TwoTowerModel
        teacher = EmaTeacher(TwoTowerModel(one, one, 1.0), 0.9)
        student = TwoTowerModel(zero, zero, 1.0)
        out = ema_update(teacher, student)
        assert out.params.image_tower.weights[0][0, 0] == pytest.approx(0.9, abs=1e-15)
        assert out.params.text_tower.biases[0][0] == pytest.approx(0.9, abs=1e-15)

    def test_fixed_point(self):
        s = init_model(0, (4, 4), [5], 3)
        assert params_equal(ema_update(ema_init(s, 0.7), s).params, s)

    def test_tau_follows_rule(self):
        s = init_model(0, (2, 2), [], 2, tau=0.5)
        t = EmaTeacher(with_params(s, {}), 0.9)
        from dataclasses import replace
        t = EmaTeacher(replace(t.params, tau=1.0), 0.9)
        assert ema_update(t, s).params.tau == pytest.approx(0.9 * 1.0 + 0.1 * 0.5, abs=1e-15)

    def test_geometric_closed_form(self):
        s = init_model(0, (4, 4), [5], 3)
        t0 = init_model(9, (4, 4), [5], 3)
        decay = 0.8
        t = EmaTeacher(t0, decay)
        for _ in range(7):
            t = ema_update(t, s)
        got, p0, ps = named_params(t.params), named_params(t0), named_params(s)
        for k in got:
            np.testing.assert_allclose(got[k], decay**7 * p0[k] + (1 - decay**7) * ps[k], atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ModelError):
            ema_update(ema_init(init_model(0, (4, 4), [5], 3)), init_model(0, (4, 4), [6], 3))
