import numpy as np
import pytest

from fleetopt.nn import DenseNet, MomentumSgd, sigmoid, softplus


def rng(seed=0):
    return np.random.default_rng(seed)


def test_softplus_matches_reference():
    z = np.array([-800.0, -2.0, 0.0, 2.0, 800.0])
    expected = np.array([0.0, np.log1p(np.exp(-2.0)), np.log(2.0), 2.0 + np.log1p(np.exp(-2.0)), 800.0])
    np.testing.assert_allclose(softplus(z), expected, rtol=1e-12)


def test_sigmoid_matches_reference_and_is_bounded():
    z = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
    out = sigmoid(z)
    np.testing.assert_allclose(out[1:4], 1.0 / (1.0 + np.exp(-z[1:4])), rtol=1e-12)
    assert out[0] == 0.0 and out[4] == 1.0


def test_constructor_validation():
    with pytest.raises(ValueError):
        DenseNet([3], rng())
    with pytest.raises(ValueError):
        DenseNet([3, 0, 1], rng())
    with pytest.raises(ValueError):
        DenseNet([3, 1], rng(), output_activation="relu")


def test_single_layer_linear_net_is_affine_map():
    net = DenseNet([2, 1], rng())
    net.weights[0] = np.array([[2.0], [-3.0]])
    net.biases[0] = np.array([0.5])
    X = np.array([[1.0, 1.0], [0.0, 2.0]])
    np.testing.assert_allclose(net.forward(X), [[-0.5], [-5.5]], rtol=1e-12)


def test_logistic_head_squashes_affine_map():
    net = DenseNet([2, 1], rng(), output_activation="logistic")
    net.weights[0] = np.array([[1.0], [1.0]])
    net.biases[0] = np.array([0.0])
    X = np.array([[0.0, 0.0], [3.0, 4.0]])
    np.testing.assert_allclose(net.forward(X), sigmoid(np.array([[0.0], [7.0]])), rtol=1e-12)


def test_forward_shape_validation():
    net = DenseNet([3, 4, 1], rng())
    with pytest.raises(ValueError):
        net.forward(np.zeros((5, 2)))
    with pytest.raises(ValueError):
        net.forward(np.zeros(3))


def test_output_shape():
    net = DenseNet([3, 8, 2], rng())
    assert net.forward(np.zeros((5, 3))).shape == (5, 2)
    assert net.input_dim == 3
    assert net.output_dim == 2


def test_same_seed_same_weights():
    a = DenseNet([4, 8, 1], rng(7))
    b = DenseNet([4, 8, 1], rng(7))
    np.testing.assert_array_equal(a.parameter_vector(), b.parameter_vector())


def central_difference(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        dn = x.copy()
        up[i] += eps
        dn[i] -= eps
        g[i] = (f(up) - f(dn)) / (2 * eps)
    return g


@pytest.mark.parametrize("activation", ["linear", "logistic"])
def test_weight_and_bias_gradients_match_finite_differences(activation):
    net = DenseNet([3, 5, 4, 1], rng(1), output_activation=activation)
    X = rng(2).normal(size=(6, 3))
    target = rng(3).normal(size=(6, 1))

    def loss_at(theta):
        probe = net.copy()
        probe.set_parameter_vector(theta)
        return 0.5 * float(np.sum((probe.forward(X) - target) ** 2))

    out, cache = net.forward_cached(X)
    wg, bg, _ = net.backward(cache, out - target)
    analytic = np.concatenate(
        [np.concatenate([W.ravel(), b.ravel()]) for W, b in zip(wg, bg)]
    )
    numeric = central_difference(loss_at, net.parameter_vector())
    np.testing.assert_allclose(analytic, numeric, atol=1e-6)


@pytest.mark.parametrize("activation", ["linear", "logistic"])
def test_input_gradient_matches_finite_differences(activation):
    net = DenseNet([4, 6, 1], rng(4), output_activation=activation)
    x = rng(5).normal(size=4)
    analytic = net.input_gradient(x)
    numeric = central_difference(lambda v: float(net.forward(v[None, :])[0, 0]), x)
    np.testing.assert_allclose(analytic, numeric, atol=1e-7)


def test_input_gradient_requires_scalar_output():
    net = DenseNet([3, 4, 2], rng())
    with pytest.raises(ValueError):
        net.input_gradient(np.zeros(3))


def test_batch_input_gradient_via_backward():
    # dLoss/dInput from backward agrees with per-row input_gradient
    net = DenseNet([3, 5, 1], rng(6))
    X = rng(7).normal(size=(4, 3))
    _, cache = net.forward_cached(X)
    _, _, grad_in = net.backward(cache, np.ones((4, 1)))
    for row in range(4):
        np.testing.assert_allclose(grad_in[row], net.input_gradient(X[row]), rtol=1e-10)


def test_parameter_vector_roundtrip():
    net = DenseNet([3, 7, 2], rng(8))
    theta = net.parameter_vector()
    clone = DenseNet([3, 7, 2], rng(9))
    clone.set_parameter_vector(theta)
    np.testing.assert_array_equal(clone.parameter_vector(), theta)
    with pytest.raises(ValueError):
        clone.set_parameter_vector(theta[:-1])


def test_copy_is_independent():
    net = DenseNet([2, 3, 1], rng(10))
    clone = net.copy()
    clone.weights[0][0, 0] += 1.0
    assert net.weights[0][0, 0] != clone.weights[0][0, 0]
    assert clone.layer_sizes == net.layer_sizes


def test_momentum_sgd_validation_and_step():
    net = DenseNet([2, 1], rng(11))
    with pytest.raises(ValueError):
        MomentumSgd(net, 0.0, 0.5)
    with pytest.raises(ValueError):
        MomentumSgd(net, 0.1, 1.0)
    net.weights[0] = np.array([[1.0], [1.0]])
    net.biases[0] = np.array([0.0])
    opt = MomentumSgd(net, learning_rate=0.1, momentum=0.5)
    g = [np.array([[1.0], [2.0]])]
    gb = [np.array([3.0])]
    opt.step(net, g, gb)
    np.testing.assert_allclose(net.weights[0], [[0.9], [0.8]])
    np.testing.assert_allclose(net.biases[0], [-0.3])
    opt.step(net, g, gb)
    # velocity folds in half the previous gradient
    np.testing.assert_allclose(net.weights[0], [[0.9 - 0.15], [0.8 - 0.3]])
    np.testing.assert_allclose(net.biases[0], [-0.3 - 0.45])


def test_training_shrinks_loss_on_tiny_regression():
    net = DenseNet([1, 8, 1], rng(12))
    X = np.linspace(-1, 1, 32)[:, None]
    Y = X**2
    opt = MomentumSgd(net, learning_rate=0.05, momentum=0.9)
    out, cache = net.forward_cached(X)
    first = float(np.mean((out - Y) ** 2))
    for _ in range(500):
        out, cache = net.forward_cached(X)
        wg, bg, _ = net.backward(cache, (out - Y) / len(X))
        opt.step(net, wg, bg)
    last = float(np.mean((net.forward(X) - Y) ** 2))
    assert last < first / 10
