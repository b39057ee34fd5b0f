import numpy as np
import pytest

from app.core import (
    AdamState,
    DenseLayer,
    OneToOneLayer,
    adam_proximal_l1,
    adam_step,
    add_bundles,
    as_tensor2,
    dropout_mask,
    elastic_net,
    finite_diff_gradients,
    relative_errors,
)
from app.errors import ConfigError, NumericError, ShapeError


@pytest.mark.parametrize("activation", ["relu", "linear", "sigmoid"])
def test_dense_backward_matches_finite_differences(rng, activation):
    layer = DenseLayer.initialize(4, 3, activation, rng)
    x = rng.normal(size=(5, 4))
    upstream = rng.normal(size=(5, 3))

    def loss():
        out, _ = layer.forward(x)
        return float(np.sum(out * upstream))

    out, cache = layer.forward(x)
    _, grad_w, grad_b = layer.backward(cache, upstream)
    numeric = finite_diff_gradients(loss, {"weights": layer.weights, "bias": layer.bias})
    errors = relative_errors({"weights": grad_w, "bias": grad_b}, numeric)
    assert max(errors.values()) < 1e-4


def test_dense_input_gradient(rng):
    layer = DenseLayer.initialize(3, 2, "sigmoid", rng)
    x = rng.normal(size=(4, 3))
    upstream = rng.normal(size=(4, 2))

    def loss():
        out, _ = layer.forward(x)
        return float(np.sum(out * upstream))

    _, cache = layer.forward(x)
    grad_in, _, _ = layer.backward(cache, upstream)
    numeric = finite_diff_gradients(loss, {"x": x})
    assert relative_errors({"x": grad_in}, numeric)["x"] < 1e-4


def test_dense_forward_hand_examples():
    identity = DenseLayer(np.eye(2), np.zeros(2), "linear")
    np.testing.assert_array_equal(identity.forward(np.array([[1.0, 2.0]]))[0], [[1.0, 2.0]])

    clamped = DenseLayer(np.array([[1.0], [1.0]]), np.array([-3.0]), "relu")
    np.testing.assert_array_equal(clamped.forward(np.array([[1.0, 1.0]]))[0], [[0.0]])

    affine = DenseLayer(np.array([[0.5], [0.25]]), np.array([0.1]), "linear")
    out, _ = affine.forward(np.array([[2.0, 4.0]]))
    np.testing.assert_allclose(out, [[2.1]], rtol=1e-15)
    np.testing.assert_array_equal(out, affine.forward(np.array([[2.0, 4.0]]))[0])


def test_dense_rejects_wrong_width(rng):
    layer = DenseLayer.initialize(3, 2, "relu", rng)
    with pytest.raises(ShapeError):
        layer.forward(np.ones((2, 4)))
    with pytest.raises(ConfigError):
        DenseLayer.initialize(3, 2, "tanh", rng)


def test_one_to_one_layer_starts_as_identity_and_backprops(rng):
    layer = OneToOneLayer.initialize(3)
    x = rng.normal(size=(6, 3))
    np.testing.assert_array_equal(layer.forward(x), x)

    layer.diag_weights[...] = rng.normal(size=3)
    upstream = rng.normal(size=(6, 3))
    grad_in, grad_w = layer.backward(x, upstream)
    np.testing.assert_allclose(grad_in, upstream * layer.diag_weights)
    numeric = finite_diff_gradients(
        lambda: float(np.sum(layer.forward(x) * upstream)), {"w": layer.diag_weights}
    )
    assert relative_errors({"w": grad_w}, numeric)["w"] < 1e-4


def test_dropout_mask_scales_kept_units(rng):
    mask = dropout_mask(10_000, 0.25, rng)
    kept = mask[mask > 0]
    np.testing.assert_allclose(kept, 1.0 / 0.75)
    assert abs(kept.size / mask.size - 0.75) < 0.02
    np.testing.assert_array_equal(dropout_mask(4, 0.0, None), np.ones(4))
    with pytest.raises(ConfigError):
        dropout_mask(4, 1.0, rng)


def test_elastic_net_value_and_subgradient():
    w = np.array([[1.0, -2.0], [0.0, 0.5]])
    penalty, grads = elastic_net({"w": w}, lam=0.1, alpha=0.01)
    assert penalty == pytest.approx(0.1 * 5.25 + 0.01 * 3.5)
    np.testing.assert_allclose(grads["w"], 0.2 * w + 0.01 * np.sign(w))
    assert grads["w"][1, 0] == 0.0


def test_elastic_net_rejects_negative_coefficients():
    with pytest.raises(ConfigError):
        elastic_net([np.ones(2)], lam=-1.0, alpha=0.0)


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -1.0, 0.5])}
    grads = {"w": np.array([0.3, -2.0, 1e-3])}
    state = AdamState(learning_rate=0.01)
    adam_step(params, grads, state)
    assert state.step == 1
    np.testing.assert_allclose(params["w"], [0.99, -0.99, 0.49], atol=1e-6)


def test_adam_rejects_non_finite_gradient():
    params = {"w": np.zeros(2)}
    with pytest.raises(NumericError, match="w"):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, AdamState())
    np.testing.assert_array_equal(params["w"], np.zeros(2))


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_proximal_l1_zeroes_weights_with_small_gradients():
    params = {"w": np.array([0.5, 0.5, -0.5])}
    grads = {"w": np.array([1.0, 1e-3, -1.0])}
    state = AdamState(learning_rate=0.01)
    adam_step(params, grads, state)
    adam_proximal_l1(params, ["w"], state, alpha=0.1)
    # 阈值 η·α/√v̂：|g|=1 时为 1e-3，|g|=1e-3 时约为 1
    np.testing.assert_allclose(params["w"], [0.489, 0.0, -0.489], atol=1e-6)


def test_proximal_l1_is_a_no_op_without_alpha():
    params = {"w": np.array([0.2, -0.3])}
    state = AdamState()
    adam_step(params, {"w": np.array([0.1, 0.1])}, state)
    before = params["w"].copy()
    adam_proximal_l1(params, ["w"], state, alpha=0.0)
    np.testing.assert_array_equal(params["w"], before)
    with pytest.raises(ConfigError):
        adam_proximal_l1(params, ["w"], state, alpha=-1.0)


def test_add_bundles_accumulates_in_place():
    target = {"a": np.ones(2)}
    add_bundles(target, {"a": np.ones(2), "b": np.full(2, 2.0)}, scale=0.5)
    np.testing.assert_allclose(target["a"], [1.5, 1.5])
    np.testing.assert_allclose(target["b"], [1.0, 1.0])


def test_as_tensor2_checks_rank_and_finiteness():
    assert as_tensor2([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ShapeError):
        as_tensor2(np.zeros((2, 2, 2)))
    with pytest.raises(NumericError):
        as_tensor2([[np.inf]])
