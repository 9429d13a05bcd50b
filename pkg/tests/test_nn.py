import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from extractlab import nn
from extractlab.nn import Network, NetworkSpec, StaleTraceError

from oracles import fd_input_grad, fd_param_grad, rel_err


def affine_net(w, b):
    w = np.asarray(w, dtype=np.float64)
    spec = NetworkSpec(w.shape[0], (), w.shape[1])
    return Network(spec, [w], [np.asarray(b, dtype=np.float64)])


@pytest.fixture
def small_spec():
    return NetworkSpec(3, (5, 4), 3)


class TestInit:
    def test_deterministic(self, small_spec):
        a, b = nn.init_network(small_spec, 7), nn.init_network(small_spec, 7)
        for p, q in zip(a.params(), b.params()):
            assert np.array_equal(p, q)

    def test_seed_sensitive(self, small_spec):
        a, b = nn.init_network(small_spec, 7), nn.init_network(small_spec, 8)
        assert any(not np.array_equal(p, q) for p, q in zip(a.params(), b.params()))

    def test_lc_shapes(self):
        net = nn.init_network(NetworkSpec.preset("LC", 2, 2), 0)
        assert [w.shape for w in net.weights] == [(2, 64), (64, 64), (64, 2)]
        assert all(np.all(b == 0) for b in net.biases)

    @pytest.mark.parametrize("tag,widths", [("LC", (64, 64)), ("BC", (128,) * 3), ("HC", (256,) * 4)])
    def test_presets(self, tag, widths):
        assert NetworkSpec.preset(tag, 10, 4).hidden_widths == widths

    def test_glorot_bounds(self):
        net = nn.init_network(NetworkSpec(30, (20,), 5), 1)
        for w in net.weights:
            limit = math.sqrt(6 / sum(w.shape))
            assert np.all(np.abs(w) <= limit)

    @pytest.mark.parametrize("kwargs", [
        dict(input_dim=2, hidden_widths=(), num_classes=1),
        dict(input_dim=2, hidden_widths=(), num_classes=2, preset_tag="LC"),
        dict(input_dim=2, hidden_widths=(0,), num_classes=2),
        dict(input_dim=2, hidden_widths=(3,), num_classes=2, dropout_rate=1.0),
    ])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            NetworkSpec(**kwargs)


class TestForward:
    def test_zero_net_is_uniform(self):
        probs, _ = nn.forward(affine_net(np.zeros((3, 2)), np.zeros(2)), np.ones((1, 3)))
        assert np.allclose(probs, [[0.5, 0.5]])

    def test_closed_form_softmax(self):
        # logits (ln 3, 0) -> (3/4, 1/4)
        probs, _ = nn.forward(affine_net(np.eye(2), np.zeros(2)), [[math.log(3), 0.0]])
        assert np.allclose(probs, [[0.75, 0.25]], atol=1e-12)

    def test_dimension_mismatch(self, small_spec):
        with pytest.raises(ValueError):
            nn.forward(nn.init_network(small_spec, 0), np.zeros((2, 4)))

    def test_dropout_needs_rng(self):
        net = nn.init_network(NetworkSpec(3, (5,), 2, dropout_rate=0.5), 0)
        with pytest.raises(ValueError):
            nn.forward(net, np.ones((1, 3)), train_mode=True)

    def test_dropout_only_in_train_mode(self):
        net = nn.init_network(NetworkSpec(3, (50,), 2, dropout_rate=0.5), 0)
        x = np.ones((4, 3))
        a, _ = nn.forward(net, x)
        b, _ = nn.forward(net, x)
        c, _ = nn.forward(net, x, train_mode=True, rng=np.random.default_rng(0))
        assert np.array_equal(a, b)
        assert not np.allclose(a, c)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), x=arrays(np.float64, (6, 4), elements=st.floats(-50, 50)))
    def test_probabilities_normalized(self, seed, x):
        net = nn.init_network(NetworkSpec(4, (8, 8), 5), seed)
        probs, _ = nn.forward(net, x)
        assert np.all(probs >= 0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_top1_ignores_dropout_setting(self, seed):
        x = np.random.default_rng(seed).normal(size=(10, 4))
        plain = nn.init_network(NetworkSpec(4, (16,), 3), seed)
        dropped = nn.init_network(NetworkSpec(4, (16,), 3, dropout_rate=0.5), seed)
        assert np.array_equal(nn.predict_top1(plain, x), nn.predict_top1(dropped, x))


class TestLosses:
    def test_ce_perfect(self):
        assert nn.loss_ce([[1.0, 0.0]], [[1.0, 0.0]]) == pytest.approx(0.0, abs=1e-11)

    def test_ce_uniform(self):
        assert nn.loss_ce(np.full((1, 4), 0.25), [[0, 0, 1, 0]]) == pytest.approx(math.log(4), rel=1e-10)

    def test_ce_soft_target(self):
        expected = 0.75 * math.log(1 / 0.75) + 0.25 * math.log(1 / 0.25)
        assert nn.loss_ce([[0.75, 0.25]], [[0.75, 0.25]]) == pytest.approx(expected, rel=1e-10)
        assert expected == pytest.approx(0.5623, abs=1e-4)

    def test_ce_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.loss_ce([[0.5, 0.5]], [[1, 0, 0]])

    def test_mse(self):
        assert nn.loss_mse([[0.3, 0.7]], [[0.3, 0.7]]) == 0
        assert nn.loss_mse([[1, 0]], [[0, 1]]) == 2
        assert nn.loss_mse([[1, 0], [0, 1]], [[0, 1], [0, 1]]) == 1

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.loss_mse([[1, 0]], [[1, 0], [0, 1]])


class TestBackward:
    def test_stationary_point(self):
        # all-zero affine net on a symmetric 2-sample batch: CE gradient cancels
        net = affine_net(np.zeros((2, 2)), np.zeros(2))
        x = np.array([[1.0, 0.0], [1.0, 0.0]])
        t = np.array([[1.0, 0.0], [0.0, 1.0]])
        _, trace = nn.forward(net, x, train_mode=True)
        for g in nn.backward(net, trace, t, l2_lambda=0.0):
            assert np.all(np.abs(g) < 1e-8)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        net = nn.init_network(NetworkSpec(4, (6, 5), 3, l2_lambda=0.01), 3)
        for p in net.params():
            p += 0.1 * rng.standard_normal(p.shape)
        x = rng.normal(size=(7, 4))
        t = nn.one_hot(rng.integers(0, 3, size=7), 3)
        _, trace = nn.forward(net, x, train_mode=True)
        grads = nn.backward(net, trace, t)
        checked = 0
        for p_idx, g in enumerate(grads):
            for flat in range(g.size):
                fd = fd_param_grad(net, x, t, None, (p_idx, flat))
                if fd is None:
                    continue
                assert rel_err(g.flat[flat], fd) < 1e-4
                checked += 1
        assert checked > 0.9 * net.n_params

    def test_l2_component_is_linear_in_lambda(self, small_spec):
        net = nn.init_network(small_spec, 2)
        x = np.ones((2, 3))
        t = nn.one_hot([0, 1], 3)
        _, trace = nn.forward(net, x, train_mode=True)
        g0 = nn.backward(net, trace, t, l2_lambda=0.0)
        g1 = nn.backward(net, trace, t, l2_lambda=0.1)
        g2 = nn.backward(net, trace, t, l2_lambda=0.2)
        for a, b, c in zip(g0, g1, g2):
            assert np.allclose(c - a, 2 * (b - a), atol=1e-14)

    def test_missing_trace(self, small_spec):
        with pytest.raises(StaleTraceError):
            nn.backward(nn.init_network(small_spec, 0), None, np.zeros((1, 3)))

    def test_stale_trace(self, small_spec):
        net = nn.init_network(small_spec, 0)
        _, trace = nn.forward(net, np.ones((1, 3)), train_mode=True)
        net.set_params(net.params())
        with pytest.raises(StaleTraceError):
            nn.backward(net, trace, nn.one_hot([0], 3))

    def test_eval_trace_rejected(self, small_spec):
        net = nn.init_network(small_spec, 0)
        _, trace = nn.forward(net, np.ones((1, 3)))
        with pytest.raises(StaleTraceError):
            nn.backward(net, trace, nn.one_hot([0], 3))

    def test_dropout_masks_reused(self):
        net = nn.init_network(NetworkSpec(3, (8,), 2, dropout_rate=0.5), 0)
        x = np.ones((3, 3))
        _, trace = nn.forward(net, x, train_mode=True, rng=np.random.default_rng(1))
        grads = nn.backward(net, trace, nn.one_hot([0, 1, 0], 2), l2_lambda=0.0)
        dead = np.all(trace.drop[0] == 0, axis=0)
        # hidden units dropped for the whole batch get no weight gradient on the way out
        assert np.all(grads[2][dead] == 0)


class TestInputGradient:
    def test_linear_model(self):
        w = np.array([[1.0, -2.0], [0.5, 3.0], [2.0, 0.0]])
        net = affine_net(w, [0.3, -0.1])
        for k in range(2):
            assert np.array_equal(nn.input_gradient(net, [0.2, -1.0, 4.0], k), w[:, k])

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        net = nn.init_network(NetworkSpec(5, (7, 6), 4), 1)
        x = rng.normal(size=5)
        for k in range(4):
            fd = fd_input_grad(net, x, k)
            g = nn.input_gradient(net, x, k)
            assert fd is not None
            assert all(rel_err(a, b) < 1e-4 for a, b in zip(g, fd))

    def test_pure(self, small_spec):
        net = nn.init_network(small_spec, 0)
        x = np.array([0.1, 0.2, 0.3])
        assert np.array_equal(nn.input_gradient(net, x, 1), nn.input_gradient(net, x, 1))

    def test_jacobian_rows_match_single(self, small_spec):
        net = nn.init_network(small_spec, 4)
        xs = np.random.default_rng(0).normal(size=(6, 3))
        jac = nn.input_jacobian(net, xs)
        assert jac.shape == (6, 3, 3)
        for i, x in enumerate(xs):
            for k in range(3):
                assert np.allclose(jac[i, k], nn.input_gradient(net, x, k), rtol=1e-12, atol=1e-15)

    def test_index_out_of_range(self, small_spec):
        with pytest.raises(IndexError):
            nn.input_gradient(nn.init_network(small_spec, 0), np.zeros(3), 3)


class TestPredictTop1:
    def test_argmax(self):
        net = affine_net(np.eye(3), np.zeros(3))
        probs = np.array([[0.1, 0.7, 0.2]])
        out = nn.predict_top1(net, np.log(probs))
        assert np.array_equal(out, [[0, 1, 0]])

    def test_tie_goes_to_lowest(self):
        out = nn.predict_top1(affine_net(np.zeros((2, 2)), np.zeros(2)), np.ones((1, 2)))
        assert np.array_equal(out, [[1, 0]])

    def test_rows_are_one_hot(self, small_spec):
        out = nn.predict_top1(nn.init_network(small_spec, 0), np.random.default_rng(0).normal(size=(9, 3)))
        assert out.shape == (9, 3)
        assert np.all(out.sum(axis=1) == 1)
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_dimension_mismatch(self, small_spec):
        with pytest.raises(ValueError):
            nn.predict_top1(nn.init_network(small_spec, 0), np.zeros((1, 2)))


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        net = nn.init_network(NetworkSpec.preset("LC", 3, 4), 11)
        path = tmp_path / "net.json"
        net.save(path)
        back = Network.load(path)
        assert back.spec == net.spec and back.init_seed == 11
        for p, q in zip(net.params(), back.params()):
            assert np.array_equal(p, q)

    def test_schema(self):
        doc = json.loads(nn.init_network(NetworkSpec(2, (3,), 2), 0).to_json())
        assert set(doc) == {"spec", "seed", "layers"}
        assert set(doc["layers"][0]) == {"w", "b"}
        assert np.shape(doc["layers"][0]["w"]) == (2, 3)

    def test_shape_mismatch_rejected(self):
        doc = nn.init_network(NetworkSpec(2, (3,), 2), 0).to_dict()
        doc["layers"][0]["w"] = [[0.0] * 3]
        with pytest.raises(ValueError):
            Network.from_dict(doc)
