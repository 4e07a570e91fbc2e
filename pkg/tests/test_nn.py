import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ragdp.nn import (
    AdamState,
    DenseNet,
    DimensionError,
    Layer,
    NonFiniteLossError,
    adam_step,
    forward,
    half_squared_error,
    per_example_gradient,
    per_example_gradients,
    squared_error,
    timestep_embedding,
)


def _scalar_forward(net, x):
    # Independent per-neuron evaluator: plain Python loops, no matmuls.
    act = {"relu": lambda z: max(z, 0.0), "tanh": np.tanh, "identity": lambda z: z}
    h = [float(v) for v in x]
    for layer in net.layers:
        out = []
        for i in range(layer.out_dim):
            z = layer.bias[i]
            for j in range(layer.in_dim):
                z += layer.weight[i, j] * h[j]
            out.append(act[layer.activation](z))
        h = out
    return np.array(h)


def _loss_fn(net, x, target, loss):
    return float(loss(net.forward(x[None, :]), target[None, :])[0][0])


def _finite_difference(net, x, target, loss, step=1e-5):
    theta = net.get_params()
    grad = np.empty_like(theta)
    for i in range(len(theta)):
        p = theta.copy()
        p[i] += step
        net.set_params(p)
        up = _loss_fn(net, x, target, loss)
        p[i] -= 2 * step
        net.set_params(p)
        down = _loss_fn(net, x, target, loss)
        grad[i] = (up - down) / (2 * step)
    net.set_params(theta)
    return grad


def test_identity_layer_passes_input_through():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "identity")])
    np.testing.assert_array_equal(forward(net, np.array([1.0, 2.0])), [1.0, 2.0])


def test_relu_layer_clamps_negatives():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "relu")])
    np.testing.assert_array_equal(forward(net, np.array([-1.0, 3.0])), [0.0, 3.0])


def test_zero_input_matches_scalar_evaluator():
    net = DenseNet.init([3, 5, 2], "tanh", rng=np.random.default_rng(1))
    for l in net.layers:
        l.bias = np.random.default_rng(2).normal(size=l.out_dim)
    x = np.zeros(3)
    np.testing.assert_allclose(forward(net, x), _scalar_forward(net, x), rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_random_input_matches_scalar_evaluator(seed):
    rng = np.random.default_rng(seed)
    net = DenseNet.init([4, 6, 6, 3], "relu", rng=rng)
    x = rng.normal(size=4)
    np.testing.assert_allclose(forward(net, x), _scalar_forward(net, x), atol=1e-12)


def test_dimension_mismatch_names_layer():
    net = DenseNet.init([3, 4, 2], rng=np.random.default_rng(0))
    with pytest.raises(DimensionError, match="layer 0"):
        net.forward(np.zeros(5))
    with pytest.raises(DimensionError, match="layer 1"):
        DenseNet([Layer(np.zeros((4, 3)), np.zeros(4), "tanh"),
                  Layer(np.zeros((2, 5)), np.zeros(2), "identity")])


def test_parameter_count_and_flattening_order():
    w0, b0 = np.arange(6.0).reshape(2, 3), np.array([10.0, 11.0])
    w1, b1 = np.array([[20.0, 21.0]]), np.array([30.0])
    net = DenseNet([Layer(w0, b0, "tanh"), Layer(w1, b1, "identity")])
    assert net.parameter_count == 6 + 2 + 2 + 1
    np.testing.assert_array_equal(
        net.get_params(), [0, 1, 2, 3, 4, 5, 10, 11, 20, 21, 30]
    )


def test_identity_layer_gradient_on_basis_input():
    rng = np.random.default_rng(0)
    net = DenseNet([Layer(rng.normal(size=(3, 2)), rng.normal(size=3), "identity")])
    x, target = np.array([1.0, 0.0]), np.zeros(3)
    _, g = per_example_gradient(net, half_squared_error, x, target)
    out = net.forward(x)
    w_grad = g[:6].reshape(3, 2)
    np.testing.assert_allclose(w_grad[:, 0], out, atol=1e-14)
    np.testing.assert_allclose(w_grad[:, 1], 0.0, atol=1e-14)
    np.testing.assert_allclose(g, _finite_difference(net, x, target, half_squared_error), atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("act", ["relu", "tanh", "identity"])
def test_gradients_match_finite_differences(seed, act):
    rng = np.random.default_rng(seed)
    net = DenseNet.init([3, 5, 4, 2], act, "identity", rng=rng)
    for l in net.layers:
        l.bias = rng.normal(scale=0.3, size=l.out_dim)
    x, target = rng.normal(size=3), rng.normal(size=2)
    _, g = per_example_gradient(net, squared_error, x, target)
    fd = _finite_difference(net, x, target, squared_error)
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)
    assert rel.max() < 1e-4


def test_zero_loss_gives_zero_gradient():
    net = DenseNet.init([2, 4, 2], rng=np.random.default_rng(3))
    x = np.array([0.3, -0.7])
    _, g = per_example_gradient(net, squared_error, x, net.forward(x))
    np.testing.assert_array_equal(g, 0.0)


def test_mean_of_per_example_gradients_is_batch_gradient():
    rng = np.random.default_rng(4)
    net = DenseNet.init([3, 8, 2], "tanh", rng=rng)
    X, Y = rng.normal(size=(16, 3)), rng.normal(size=(16, 2))
    _, per = per_example_gradients(net, squared_error, X, Y)
    out, cache = net.forward_cached(X)
    _, grad_out = squared_error(out, Y)
    batch, _ = net.backward(cache, grad_out / len(X), per_example=False)
    np.testing.assert_allclose(per.mean(axis=0), batch, atol=1e-10)


def test_gradient_is_linear_in_loss_scale():
    rng = np.random.default_rng(5)
    net = DenseNet.init([2, 3, 2], rng=rng)
    X, Y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))

    def scaled(out, target):
        v, g = squared_error(out, target)
        return 3.5 * v, 3.5 * g

    _, g1 = per_example_gradients(net, squared_error, X, Y)
    _, g2 = per_example_gradients(net, scaled, X, Y)
    np.testing.assert_allclose(g2, 3.5 * g1, rtol=1e-14)


def test_gradient_serialization_is_deterministic():
    rng = np.random.default_rng(6)
    net = DenseNet.init([2, 3, 2], rng=rng)
    X, Y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    a = per_example_gradients(net, squared_error, X, Y)[1].tobytes()
    b = per_example_gradients(net.copy(), squared_error, X, Y)[1].tobytes()
    assert a == b


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_example_index():
    net = DenseNet([Layer(np.array([[1e200]]), np.zeros(1), "identity")])
    X = np.array([[0.0], [1e200], [0.0]])
    with pytest.raises(NonFiniteLossError) as info:
        per_example_gradients(net, squared_error, X, np.zeros((3, 1)))
    assert info.value.index == 1


def test_adam_zero_gradient_leaves_parameters():
    net = DenseNet.init([2, 3, 1], rng=np.random.default_rng(0))
    before = net.get_params()
    state = AdamState.fresh(net.parameter_count)
    adam_step(net, state, np.zeros(net.parameter_count))
    np.testing.assert_array_equal(net.get_params(), before)
    assert state.step_count == 1


def _scalar_adam(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(theta)
    return out


def test_adam_first_step_closed_form():
    net = DenseNet.init([2, 2], "identity", rng=np.random.default_rng(1))
    theta = net.get_params()
    g = np.array([0.5, -2.0, 1e-3, 3.0, -0.25, 7.0])
    state = AdamState.fresh(6, learning_rate=0.01)
    adam_step(net, state, g)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(net.get_params() - theta, expected, rtol=1e-12)
    oracle = [_scalar_adam(th, [gi], lr=0.01)[0] for th, gi in zip(theta, g)]
    np.testing.assert_allclose(net.get_params(), oracle, rtol=1e-14)


def test_adam_second_identical_step_not_larger():
    net = DenseNet.init([2, 2], "identity", rng=np.random.default_rng(2))
    g = np.random.default_rng(3).normal(size=net.parameter_count)
    state = AdamState.fresh(net.parameter_count)
    p0 = net.get_params()
    adam_step(net, state, g)
    p1 = net.get_params()
    adam_step(net, state, g)
    p2 = net.get_params()
    assert np.all(np.abs(p2 - p1) <= np.abs(p1 - p0) + 1e-8)
    for i in range(len(g)):
        np.testing.assert_allclose(p2[i], _scalar_adam(p0[i], [g[i], g[i]])[1], rtol=1e-13)


def test_adam_rejects_nan_without_mutation():
    net = DenseNet.init([2, 2], rng=np.random.default_rng(0))
    state = AdamState.fresh(net.parameter_count)
    before = net.get_params()
    g = np.zeros(net.parameter_count)
    g[2] = np.nan
    with pytest.raises(ValueError):
        adam_step(net, state, g)
    np.testing.assert_array_equal(net.get_params(), before)
    assert state.step_count == 0
    assert not state.first_moment.any()


def test_adam_rejects_bad_betas():
    with pytest.raises(ValueError):
        AdamState(np.zeros(2), np.zeros(2), beta1=1.0)


def test_timestep_embedding_at_zero():
    e = timestep_embedding(0, 8, 100)
    np.testing.assert_array_equal(e[:4], 0.0)
    np.testing.assert_array_equal(e[4:], 1.0)


def test_timestep_embedding_shape_and_odd_dim():
    assert timestep_embedding(37, 16, 100).shape == (16,)
    with pytest.raises(ValueError):
        timestep_embedding(3, 7, 100)


def test_timestep_embedding_injective_over_horizon():
    e = timestep_embedding(np.arange(101), 8, 100)
    gaps = np.linalg.norm(np.diff(e, axis=0), axis=1)
    assert gaps.min() > 0
    d = np.linalg.norm(e[:, None] - e[None], axis=-1)
    assert np.all(d[~np.eye(101, dtype=bool)] > 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([2, 4, 8, 16]), st.integers(2, 1000))
def test_timestep_embedding_bounded(t, dim, T):
    e = timestep_embedding(min(t, T), dim, T)
    assert e.shape == (dim,)
    assert np.all(np.abs(e) <= 1.0)
