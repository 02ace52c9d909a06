import numpy as np
import pytest
from scipy import ndimage

from api.errors import CheckpointError, ShapeError
from api.models import BatchNormLayer
from api.network_layers import (
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    gradient_check,
    mse_loss,
    relu_backward,
    relu_forward,
)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def _state(channels):
    return BatchNormLayer(gamma=np.ones(channels), beta=np.zeros(channels),
                          running_mean=np.zeros(channels), running_var=np.ones(channels))


def test_identity_kernel_passes_input_through(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    b = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(conv2d_forward(x, w, b), x + b[None, :, None, None])


def test_conv_matches_zero_padded_correlation(rng):
    x = rng.standard_normal((1, 1, 9, 7))
    w = rng.standard_normal((1, 1, 3, 3))
    expected = ndimage.correlate(x[0, 0], w[0, 0], mode="constant", cval=0.0)
    np.testing.assert_allclose(conv2d_forward(x, w, np.zeros(1))[0, 0], expected, atol=1e-12)


def test_conv_rejects_mismatched_channels(rng):
    with pytest.raises(ShapeError):
        conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((4, 3, 3, 3)), np.zeros(4))
    with pytest.raises(ShapeError):
        conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((4, 2, 2, 2)), np.zeros(4))


@pytest.mark.parametrize("kernel", [1, 3, 5])
def test_conv_gradients(rng, kernel):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, kernel, kernel))
    b = rng.standard_normal(4)
    r = rng.standard_normal((2, 4, 6, 6))

    def loss():
        return float(np.sum(conv2d_forward(x, w, b) * r))

    dx, dw, db = conv2d_backward(r, x, w)
    assert gradient_check(loss, x, dx) < 1e-6
    assert gradient_check(loss, w, dw) < 1e-6
    assert gradient_check(loss, b, db) < 1e-6


def test_batchnorm_normalises_each_channel(rng):
    x = 3.0 + 2.0 * rng.standard_normal((4, 2, 8, 8))
    gamma, beta = np.array([1.5, 0.5]), np.array([0.2, -0.3])
    y, _ = batchnorm_forward(x, gamma, beta)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), beta, atol=1e-10)
    np.testing.assert_allclose(y.std(axis=(0, 2, 3)), gamma, rtol=1e-4)


def test_batchnorm_gradients_in_training_mode(rng):
    x = rng.standard_normal((3, 2, 5, 5))
    gamma, beta = rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)
    r = rng.standard_normal(x.shape)

    def loss():
        return float(np.sum(batchnorm_forward(x, gamma, beta)[0] * r))

    _, cache = batchnorm_forward(x, gamma, beta)
    dx, dgamma, dbeta = batchnorm_backward(r, cache)
    assert gradient_check(loss, x, dx) < 1e-5
    assert gradient_check(loss, gamma, dgamma) < 1e-6
    assert gradient_check(loss, beta, dbeta) < 1e-6


def test_batchnorm_gradients_in_inference_mode(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    state = _state(2)
    state.running_mean[:] = [0.1, -0.2]
    state.running_var[:] = [0.8, 1.3]
    state.initialized = True
    gamma, beta = np.array([1.2, 0.7]), np.array([0.0, 0.4])
    r = rng.standard_normal(x.shape)

    def loss():
        return float(np.sum(batchnorm_forward(x, gamma, beta, mode="inference", state=state)[0] * r))

    _, cache = batchnorm_forward(x, gamma, beta, mode="inference", state=state)
    dx, _, _ = batchnorm_backward(r, cache)
    assert gradient_check(loss, x, dx) < 1e-6


def test_batchnorm_running_statistics(rng):
    x = 2.0 + rng.standard_normal((2, 1, 4, 4))
    state = _state(1)
    batchnorm_forward(x, np.ones(1), np.zeros(1), mode="train", state=state)
    n = x.size
    assert state.initialized
    assert state.running_mean[0] == pytest.approx(0.1 * x.mean())
    assert state.running_var[0] == pytest.approx(0.9 + 0.1 * x.var() * n / (n - 1))


def test_batchnorm_unit_momentum_replaces_statistics(rng):
    x = 5.0 + 3.0 * rng.standard_normal((3, 2, 4, 4))
    state = _state(2)
    batchnorm_forward(x, np.ones(2), np.zeros(2), mode="train", state=state, momentum=1.0)
    np.testing.assert_allclose(state.running_mean, x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, x.var(axis=(0, 2, 3), ddof=1))
    y, _ = batchnorm_forward(x, np.ones(2), np.zeros(2), mode="inference", state=state)
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-9


def test_batchnorm_inference_needs_statistics(rng):
    with pytest.raises(CheckpointError):
        batchnorm_forward(rng.standard_normal((1, 2, 3, 3)), np.ones(2), np.zeros(2), mode="inference",
                          state=_state(2))


def test_relu_backward_masks_negative_inputs():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    assert relu_forward(x).ravel().tolist() == [0.0, 0.0, 2.0]
    assert relu_backward(np.ones_like(x), x).ravel().tolist() == [0.0, 0.0, 1.0]


def test_mse_loss_averages_over_batch():
    pred = np.ones((2, 1, 2, 2))
    target = np.zeros((2, 1, 2, 2))
    value, grad = mse_loss(pred, target)
    assert value == pytest.approx(4.0)
    np.testing.assert_allclose(grad, 1.0)
    with pytest.raises(ShapeError):
        mse_loss(pred, target[:1])


def test_gradient_check_restores_input(rng):
    x = rng.standard_normal((2, 3))
    before = x.copy()
    error = gradient_check(lambda: float(np.sum(x ** 2)), x, 2 * x)
    assert error < 1e-8
    np.testing.assert_array_equal(x, before)


def test_gradient_check_flags_wrong_gradient(rng):
    x = rng.standard_normal(5)
    assert gradient_check(lambda: float(np.sum(x ** 2)), x, 3 * x) > 0.1


def test_gradient_check_needs_contiguous_input(rng):
    x = rng.standard_normal((4, 4)).T
    with pytest.raises(ShapeError):
        gradient_check(lambda: float(np.sum(x)), x, np.ones_like(x))


def test_gradient_check_with_external_scale(rng):
    x = rng.standard_normal(4)
    analytic = 2 * x + 0.01
    error = gradient_check(lambda: float(np.sum(x ** 2)), x, analytic, scale=100.0)
    assert error == pytest.approx(0.02 / 100.0, rel=1e-4)
