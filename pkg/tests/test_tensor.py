import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from malign import tensor as T
from malign.errors import ConfigError, ShapeError

from oracles import ce_value, dense_hessian, fd_input_grad, fd_param_grads, kink_margin, random_model


def dense_model(weights, biases=None):
    """Dense stack ending in softmax, with hand-set weights."""
    layers, params = [], {}
    for i, w in enumerate(weights):
        w = np.asarray(w, dtype=float)
        spec = T.dense(w.shape[1], w.shape[0])
        layers.append(spec)
        idx = len(layers)
        params[f"{idx}.weight"] = w
        params[f"{idx}.bias"] = np.zeros(w.shape[0]) if biases is None else np.asarray(biases[i], dtype=float)
        if i < len(weights) - 1:
            layers.append(T.relu())
    layers.append(T.softmax())
    return T.Model(tuple(layers), params, (np.asarray(weights[0]).shape[1],))


# -- forward ----------------------------------------------------------------------


def test_identity_dense_logits():
    m = dense_model([np.eye(2)])
    np.testing.assert_array_equal(T.forward(m, [1.0, 2.0], upto_layer=1), [1.0, 2.0])


def test_layer_zero_is_input(rng):
    m = random_model(rng)
    x = rng.random(m.input_shape)
    np.testing.assert_array_equal(T.forward(m, x, upto_layer=0), x)


def test_two_layer_hand_computed():
    w1 = np.array([[1.0, -1.0], [2.0, 0.5], [-1.0, 1.0]])
    w2 = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
    m = dense_model([w1, w2])
    # relu(W1 (1,0)) = (1, 2, 0); W2 of that = (1, 2)
    e = np.exp([1.0, 2.0])
    np.testing.assert_allclose(T.forward(m, [1.0, 0.0]), e / e.sum(), rtol=0, atol=1e-15)


def test_forward_shape_error_names_layer():
    m = dense_model([np.eye(3)])
    with pytest.raises(ShapeError, match="layer 1"):
        T.forward(m, np.zeros(4))


def test_model_rejects_bad_layouts():
    with pytest.raises(ShapeError, match="softmax"):
        T.Model((T.dense(2, 2),), {"1.weight": np.eye(2), "1.bias": np.zeros(2)}, (2,))
    with pytest.raises(ShapeError, match="layer 2"):
        T.Model((T.dense(2, 3), T.dense(2, 2), T.softmax()),
                {"1.weight": np.zeros((3, 2)), "1.bias": np.zeros(3), "2.weight": np.zeros((2, 2)),
                 "2.bias": np.zeros(2)}, (2,))
    with pytest.raises(ShapeError, match="shape"):
        T.Model((T.dense(2, 2), T.softmax()), {"1.weight": np.zeros((3, 2)), "1.bias": np.zeros(2)}, (2,))


def test_params_are_read_only(rng):
    m = random_model(rng)
    with pytest.raises(ValueError):
        next(iter(m.params.values()))[...] = 0.0


@given(st.integers(0, 2**32 - 1))
def test_forward_is_a_distribution(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    p = T.forward(m, rng.random((3,) + m.input_shape))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_maxpool_tie_goes_to_first_element():
    m = T.Model((T.maxpool2d(2), T.flatten(), T.softmax()), {}, (1, 2, 2))
    x = np.ones((1, 1, 2, 2))
    g = T.backward(m, x, lambda z: (z.sum(), np.ones_like(z)), upto_layer=1, need_params=False).input_grad
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


# -- losses -------------------------------------------------------------------------


def test_cross_entropy_examples():
    assert T.cross_entropy([[1.0, 0.0]], [0]) == 0.0
    assert math.isclose(T.cross_entropy([[0.5, 0.5]], [1]), math.log(2), rel_tol=1e-15)
    # smoothing 1 - 1/m with m = 2 gives a uniform target: CE = ln 2 for either label
    for label in (0, 1):
        assert math.isclose(T.cross_entropy([[0.5, 0.5]], [label], label_smoothing=0.5), math.log(2), rel_tol=1e-15)


def test_cross_entropy_log_floor():
    assert math.isclose(T.cross_entropy([[1.0, 0.0]], [1]), -math.log(1e-12), rel_tol=1e-12)


def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax_t([0.0, 0.0], 3.0), [0.5, 0.5])
    np.testing.assert_allclose(T.softmax_t([1.0, 0.0]), [0.7310585786, 0.2689414214], atol=1e-10)
    np.testing.assert_allclose(T.softmax_t([1.0, 0.0], 1000.0), [0.5, 0.5], atol=1e-3)
    with pytest.raises(ConfigError):
        T.softmax_t([1.0, 0.0], 0.0)


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50), st.floats(0.1, 10))
def test_softmax_shift_invariance(z, c, tau):
    np.testing.assert_allclose(T.softmax_t(z + c, tau), T.softmax_t(z, tau), rtol=0, atol=1e-12)


# -- backward -------------------------------------------------------------------


def test_quadratic_loss_on_input():
    m = dense_model([np.eye(3)])
    x = np.array([0.3, -1.0, 2.0])
    g = T.backward(m, x, lambda z: (0.5 * np.sum(z * z), z), upto_layer=0).input_grad
    np.testing.assert_array_equal(g, x)


def test_bilinear_gradients():
    w = np.array([[0.5, -2.0, 1.5]])
    m = dense_model([w])
    x = np.array([1.0, 2.0, 3.0])
    b = T.backward(m, x, lambda z: (float(z[0]), np.ones(1)), upto_layer=1)
    np.testing.assert_array_equal(b.param_grads["1.weight"], x[None])
    np.testing.assert_array_equal(b.input_grad, w[0])


def test_non_scalar_loss_rejected():
    m = dense_model([np.eye(2)])
    with pytest.raises(ShapeError):
        T.backward(m, np.ones(2), lambda z: (z, np.ones_like(z)), upto_layer=1)


def test_ce_gradients_match_finite_differences(rng):
    checked = 0
    while checked < 25:
        m = random_model(rng)
        x = rng.random((2,) + m.input_shape)
        if kink_margin(m, x) < 1e-3:
            continue
        y = rng.integers(0, m.num_classes, size=2)
        b = T.backward(m, x, T.ce_loss(y, reduction="sum"))
        np.testing.assert_allclose(b.input_grad, fd_input_grad(lambda z: ce_value(m, z, y), x), rtol=1e-5, atol=1e-8)
        fd = fd_param_grads(m, lambda p: ce_value(m, x, y, p))
        for name in m.params:
            np.testing.assert_allclose(b.param_grads[name], fd[name], rtol=1e-5, atol=1e-8)
        checked += 1


def test_logit_and_probability_losses_agree(rng):
    m = random_model(rng)
    x = rng.random((4,) + m.input_shape)
    y = rng.integers(0, m.num_classes, size=4)
    a = T.backward(m, x, T.ce_loss(y, 0.1))
    b = T.backward(m, x, T.logits_ce_loss(y, 0.1), upto_layer=m.depth - 1)
    assert math.isclose(a.loss_value, b.loss_value, rel_tol=1e-12)
    np.testing.assert_allclose(a.input_grad, b.input_grad, rtol=1e-9, atol=1e-12)


# -- Hessian-vector products ------------------------------------------------------


def test_hvp_quadratic():
    m = dense_model([np.eye(2)])
    d = np.array([1.0, 3.0])
    loss = lambda z: (0.5 * float(np.sum(d * z * z)), d * z)  # noqa: E731
    hv = T.hvp_input(m, np.array([0.2, 0.4]), None, np.ones(2), loss_fn=loss, upto_layer=0)
    np.testing.assert_allclose(hv, [1.0, 3.0], rtol=1e-9)


def test_hvp_zero_direction(rng):
    m = random_model(rng)
    x = rng.random(m.input_shape)
    np.testing.assert_array_equal(T.hvp_input(m, x, [0], np.zeros_like(x)), np.zeros_like(x))


def _smooth_case(rng):
    while True:
        m = random_model(rng)
        if m.input_shape[0] * int(np.prod(m.input_shape[1:])) > 16:
            continue
        x = rng.random((1,) + m.input_shape)
        if kink_margin(m, x) > 0.05:
            return m, x, rng.integers(0, m.num_classes, size=1)


def test_hvp_matches_dense_hessian(rng):
    for _ in range(5):
        m, x, y = _smooth_case(rng)
        H = dense_hessian(lambda z: ce_value(m, z, y), x)
        v = rng.standard_normal(x.shape)
        hv = T.hvp_input(m, x, y, v).reshape(-1)
        expect = H @ v.reshape(-1)
        assert np.linalg.norm(hv - expect) <= 1e-3 * np.linalg.norm(expect) + 1e-9


def test_hvp_linear_in_direction(rng):
    m, x, y = _smooth_case(rng)
    v, w = rng.standard_normal(x.shape), rng.standard_normal(x.shape)
    lhs = T.hvp_input(m, x, y, 2.0 * v - 0.5 * w)
    rhs = 2.0 * T.hvp_input(m, x, y, v) - 0.5 * T.hvp_input(m, x, y, w)
    assert np.linalg.norm(lhs - rhs) <= 1e-3 * np.linalg.norm(rhs) + 1e-9


# -- optimiser --------------------------------------------------------------------


def state_for(params, lr, momentum, clip=None):
    return T.OptimizerState.create(params, T.LRSchedule(lr), momentum, clip)


def test_plain_sgd_step():
    p, s = T.sgd_step({"w": np.array(1.0)}, {"w": np.array(2.0)}, state_for({"w": np.array(1.0)}, 0.1, 0.0))
    assert math.isclose(float(p["w"]), 0.8, rel_tol=1e-15)
    assert s.step_index == 1


def test_momentum_recursion():
    params = {"w": np.array(0.0)}
    state = state_for(params, 1.0, 0.9)
    params, state = T.sgd_step(params, {"w": np.array(1.0)}, state)
    assert float(state.momentum_buffers["w"]) == 1.0 and float(params["w"]) == -1.0
    params, state = T.sgd_step(params, {"w": np.array(1.0)}, state)
    assert math.isclose(float(state.momentum_buffers["w"]), 1.9, rel_tol=1e-15)
    assert math.isclose(float(params["w"]), -2.9, rel_tol=1e-15)


def test_global_norm_clipping():
    g = {"a": np.array([1.2]), "b": np.array([1.6])}  # global norm 2
    params = {"a": np.zeros(1), "b": np.zeros(1)}
    new, _ = T.sgd_step(params, g, state_for(params, 1.0, 0.0, clip=1.0))
    np.testing.assert_allclose(new["a"], [-0.6], rtol=1e-15)
    np.testing.assert_allclose(new["b"], [-0.8], rtol=1e-15)


def test_sgd_step_is_pure():
    params = {"w": np.ones(3)}
    state = state_for(params, 0.5, 0.9)
    T.sgd_step(params, {"w": np.ones(3)}, state)
    np.testing.assert_array_equal(params["w"], np.ones(3))
    assert state.step_index == 0


@given(st.floats(1e-4, 10), st.integers(0, 50), st.integers(1, 500))
def test_schedule_endpoints(base, warmup, extra):
    total = warmup + extra
    s = T.LRSchedule(base, warmup, total)
    if warmup:
        assert s.lr_at(warmup) == base
        assert math.isclose(s.lr_at(1), base / warmup, rel_tol=1e-12)
    assert s.lr_at(total) <= 1e-9 * base
    assert all(s.lr_at(t) >= 0 for t in range(1, total + 1))


def test_constant_schedule_without_total():
    s = T.LRSchedule(0.3)
    assert s.lr_at(1) == s.lr_at(10**6) == 0.3
