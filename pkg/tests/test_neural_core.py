import numpy as np
import pytest
from pydantic import ValidationError

from app.core.exceptions import NumericalError, ShapeError, UsageError
from app.models import LayerSpec, NetworkSpec, TrainingConfig, dense_stack
from app.services.neural_core import (
    adam_step,
    backward,
    backward_all,
    bce_with_logits,
    check_gradient,
    forward,
    grad_check,
    init_params,
    input_gradient,
    input_gradient_penalty,
    load_models,
    mse_loss,
    softmax,
)

TOLERANCE = 1e-4


def lstm_spec(input_dim=3, hidden=4, output_dim=2, seed=1):
    return NetworkSpec(
        layers=[
            LayerSpec(kind="lstm", input_dim=input_dim, output_dim=hidden),
            LayerSpec(kind="dense", input_dim=hidden, output_dim=output_dim),
        ],
        init_seed=seed,
    )


def test_dense_gradients_match_finite_differences(rng):
    spec = dense_stack([5, 6, 4, 2], "tanh", "sigmoid", seed=2)
    params = init_params(spec)
    sample = (rng.normal(size=(7, 5)), rng.random((7, 2)))
    assert grad_check(spec, params, sample) < TOLERANCE


def test_relu_gradients_match_finite_differences(rng):
    spec = dense_stack([4, 8, 1], "relu", seed=3)
    params = init_params(spec)
    assert grad_check(spec, params, (rng.normal(size=(6, 4)), rng.normal(size=(6, 1)))) < TOLERANCE


def test_lstm_gradients_match_finite_differences_with_mask(rng):
    spec = lstm_spec()
    params = init_params(spec)
    inputs = rng.normal(size=(3, 3, 3))
    targets = rng.normal(size=(3, 3, 2))
    mask = np.array([[1, 1, 1], [1, 1, 0], [1, 0, 0]], dtype=float)
    assert grad_check(spec, params, (inputs, targets, mask)) < TOLERANCE


def test_initial_state_gradient(rng):
    spec = lstm_spec(hidden=3)
    params = init_params(spec)
    inputs = rng.normal(size=(2, 3, 3))
    h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    seed = rng.normal(size=(2, 3, 2))

    outputs, cache = forward(params, inputs, initial_state=(h0, c0))
    analytic_h, analytic_c = backward_all(params, cache, seed).initial_state

    def objective_h(flat):
        return float(np.sum(forward(params, inputs, initial_state=(flat.reshape(2, 3), c0))[0] * seed))

    def objective_c(flat):
        return float(np.sum(forward(params, inputs, initial_state=(h0, flat.reshape(2, 3)))[0] * seed))

    assert check_gradient(objective_h, h0.ravel(), analytic_h.ravel()) < TOLERANCE
    assert check_gradient(objective_c, c0.ravel(), analytic_c.ravel()) < TOLERANCE


def test_masked_steps_carry_state_forward(rng):
    params = init_params(lstm_spec())
    sequence = rng.normal(size=(1, 2, 3))
    padded = np.concatenate([sequence, rng.normal(size=(1, 3, 3))], axis=1)
    mask = np.array([[1, 1, 0, 0, 0]], dtype=float)

    short, _ = forward(params, sequence)
    long, _ = forward(params, padded, mask)
    np.testing.assert_allclose(long[:, -1], short[:, -1], atol=1e-14)


def test_relative_error_floor_is_tiny():
    # a missing slope of 1e-7 is a full-size error, not one hidden by the floor
    assert check_gradient(lambda theta: 1e-7 * theta[0], np.array([0.3]), np.array([0.0])) == pytest.approx(1.0, rel=1e-6)
    assert check_gradient(lambda theta: 1e-7 * theta[0], np.array([0.3]), np.array([1e-7])) < TOLERANCE
    # both zero is no error
    assert check_gradient(lambda theta: 2.0, np.array([0.3]), np.array([0.0])) == 0.0


def test_input_gradient_matches_finite_differences(rng):
    params = init_params(dense_stack([4, 5, 1], "sigmoid", seed=4))
    x = rng.normal(size=(1, 4))
    analytic = input_gradient(params, x)[0]

    def objective(row):
        return float(forward(params, row[None, :])[0][0, 0])

    assert check_gradient(objective, x[0], analytic) < TOLERANCE


@pytest.mark.parametrize("activation", ["tanh", "sigmoid"])
def test_input_gradient_penalty_gradient(rng, activation):
    spec = dense_stack([4, 6, 5, 1], activation, seed=5)
    params = init_params(spec)
    perturbed = params.copy()
    x = rng.normal(size=(8, 4))

    penalty, analytic = input_gradient_penalty(params, x, 0.3)
    assert penalty > 0

    def objective(theta):
        perturbed.assign(theta)
        return input_gradient_penalty(perturbed, x, 0.3)[0]

    assert check_gradient(objective, params.vector, analytic) < TOLERANCE


def test_input_gradient_penalty_needs_linear_scalar_output():
    with pytest.raises(UsageError):
        input_gradient_penalty(init_params(dense_stack([3, 4, 2], "tanh")), np.zeros((1, 3)), 1.0)
    with pytest.raises(UsageError):
        input_gradient_penalty(init_params(dense_stack([3, 1], "tanh", "sigmoid")), np.zeros((1, 3)), 1.0)
    penalty, grads = input_gradient_penalty(init_params(dense_stack([3, 1], "tanh")), np.zeros((1, 3)), 0.0)
    assert penalty == 0.0 and not grads.any()


def test_loss_gradients(rng):
    logits = rng.normal(size=(6, 1))
    labels = rng.integers(0, 2, size=(6, 1)).astype(float)
    _, analytic = bce_with_logits(logits, labels)
    assert check_gradient(lambda z: bce_with_logits(z.reshape(6, 1), labels)[0], logits.ravel(), analytic.ravel()) < TOLERANCE

    predictions, targets = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 2))
    mask = np.array([[1, 1, 0], [1, 0, 0]], dtype=float)
    loss, grad = mse_loss(predictions, targets, mask)
    assert loss == pytest.approx(np.sum(((predictions - targets) ** 2)[mask.astype(bool)]) / 6)
    assert not grad[0, 2].any()
    with pytest.raises(UsageError):
        mse_loss(predictions, targets, np.zeros((2, 3)))


def test_softmax_is_stable():
    probs = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(probs, [[0.5, 0.5, 0.0]])
    assert softmax(np.array([1.0, 2.0]), temperature=0.01)[1] == pytest.approx(1.0)


def test_glorot_initialisation_is_seeded():
    spec = dense_stack([10, 20, 1], "tanh", seed=7)
    first, second = init_params(spec), init_params(spec)
    np.testing.assert_array_equal(first.vector, second.vector)
    weights, bias = first.layers[0]
    assert np.all(np.abs(weights) <= np.sqrt(6.0 / 30.0))
    assert not bias.any()
    assert first.size == spec.parameter_count == 10 * 20 + 20 + 20 + 1


def test_adam_descends_a_quadratic():
    params = init_params(dense_stack([2, 1], "tanh"))
    params.assign(np.array([3.0, -2.0, 1.0]))
    config = TrainingConfig(learning_rate=0.1)

    before = params.vector.copy()
    adam_step(params, 2.0 * params.vector, config)
    # the first bias-corrected step moves each coordinate by about the learning rate
    np.testing.assert_allclose(before - params.vector, 0.1 * np.sign(before), rtol=1e-6)

    for _ in range(300):
        adam_step(params, 2.0 * params.vector, config)
    assert np.linalg.norm(params.vector) < 0.5
    assert params.step == 301


def test_adam_rejects_non_finite_gradients():
    params = init_params(dense_stack([2, 1], "tanh"))
    with pytest.raises(NumericalError):
        adam_step(params, np.array([np.nan, 0.0, 0.0]), TrainingConfig())
    with pytest.raises(ShapeError):
        adam_step(params, np.zeros(2), TrainingConfig())


def test_stale_cache_is_rejected(rng):
    params = init_params(dense_stack([3, 2], "tanh"))
    outputs, cache = forward(params, rng.normal(size=(4, 3)))
    adam_step(params, np.ones(params.size), TrainingConfig())
    with pytest.raises(UsageError):
        backward(params, cache, np.ones_like(outputs))


def test_shape_errors_name_the_layer(rng):
    params = init_params(lstm_spec())
    with pytest.raises(ShapeError) as excinfo:
        forward(params, rng.normal(size=(2, 3, 5)))
    assert excinfo.value.layer_index == 0
    with pytest.raises(ShapeError):
        forward(params, rng.normal(size=(2, 3)))
    with pytest.raises(ShapeError):
        forward(params, rng.normal(size=(2, 3, 3)), mask=np.ones((2, 4)))


def test_adjacent_layer_widths_must_agree():
    with pytest.raises(ValidationError):
        NetworkSpec(layers=[
            LayerSpec(kind="dense", input_dim=3, output_dim=4),
            LayerSpec(kind="dense", input_dim=5, output_dim=1),
        ])


def test_models_survive_a_checkpoint(tmp_path):
    from app.services.neural_core import save_models
    params = init_params(lstm_spec())
    adam_step(params, np.linspace(-1, 1, params.size), TrainingConfig())
    path = save_models(tmp_path / "model.ckpt", {"encoder": params}, {"kind": "recurrent"})

    models, header = load_models(path)
    assert header == {"kind": "recurrent"}
    restored = models["encoder"]
    assert restored.spec == params.spec
    np.testing.assert_array_equal(restored.vector, params.vector)
    np.testing.assert_array_equal(restored.adam_v, params.adam_v)
    assert restored.step == 1
