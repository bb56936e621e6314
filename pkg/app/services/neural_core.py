"""
Small double-precision neural engine: dense and LSTM layers, losses, Adam and
finite-difference gradient checks. Shared by the encoders, the mortality
predictor and the Q-network.

Dense layers act on the last axis, so a dense layer stacked on an LSTM layer is
applied at every timestep. LSTM layers take [N, T, D] input plus an optional
[N, T] mask; masked steps carry the previous state forward, so the hidden state
at the last index equals the state after each sequence's final real step.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from app.core.exceptions import NumericalError, ShapeError, UsageError
from app.core.logging_config import get_logger
from app.models.schemas import NetworkSpec, TrainingConfig
from app.utils.artifacts import load_checkpoint, save_checkpoint

logger = get_logger(__name__)


class ModelParams:
    """Flat parameter vector with per-layer views and Adam moment buffers"""

    def __init__(self, spec: NetworkSpec, vector: Optional[np.ndarray] = None):
        self.spec = spec
        count = spec.parameter_count
        if vector is None:
            vector = np.zeros(count)
        vector = np.array(vector, dtype=np.float64)
        if vector.shape != (count,):
            raise ShapeError(f"parameter vector has {vector.size} entries, spec implies {count}")
        self.vector = vector
        self.adam_m = np.zeros(count)
        self.adam_v = np.zeros(count)
        self.step = 0
        self.version = 0
        self.layers = self._build_views()

    def _build_views(self) -> List[List[np.ndarray]]:
        layers, offset = [], 0
        for layer in self.spec.layers:
            views = []
            for shape in layer.parameter_shapes():
                size = int(np.prod(shape))
                views.append(self.vector[offset:offset + size].reshape(shape))
                offset += size
            layers.append(views)
        return layers

    @property
    def size(self) -> int:
        return self.vector.size

    def assign(self, vector: np.ndarray) -> None:
        """Overwrite the parameters in place (views stay valid)"""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != self.vector.shape:
            raise ShapeError(f"cannot assign {vector.shape} to parameters of shape {self.vector.shape}")
        self.vector[:] = vector
        self.version += 1

    def copy(self) -> "ModelParams":
        clone = ModelParams(self.spec, self.vector.copy())
        clone.adam_m[:] = self.adam_m
        clone.adam_v[:] = self.adam_v
        clone.step = self.step
        return clone


@dataclass
class ForwardCache:
    """Activations kept by forward for backward"""
    params_id: int
    version: int
    inputs: np.ndarray
    mask: Optional[np.ndarray]
    layers: List[Dict[str, np.ndarray]] = field(default_factory=list)
    output: Optional[np.ndarray] = None


@dataclass
class Gradients:
    params: np.ndarray
    inputs: np.ndarray
    initial_state: Optional[Tuple[np.ndarray, np.ndarray]] = None


def init_params(spec: NetworkSpec) -> ModelParams:
    """Glorot-uniform weights, zero biases"""
    rng = np.random.default_rng(spec.init_seed)
    params = ModelParams(spec)
    for layer, views in zip(spec.layers, params.layers):
        weights = views[0]
        fan_in, fan_out = weights.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights[:] = rng.uniform(-limit, limit, size=weights.shape)
    return params


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return expit(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_slope(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(float)
    return np.ones_like(z)


def _activation_curvature(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return a * (1.0 - a) * (1.0 - 2.0 * a)
    if name == "tanh":
        return -2.0 * a * (1.0 - a * a)
    return np.zeros_like(z)


def _check_input(spec: NetworkSpec, inputs: np.ndarray, mask: Optional[np.ndarray]) -> None:
    expected_ndim = 3 if spec.is_recurrent else None
    if inputs.shape[-1] != spec.input_dim:
        raise ShapeError(f"expected input width {spec.input_dim}, got {inputs.shape[-1]}", layer_index=0)
    if expected_ndim is not None and inputs.ndim != expected_ndim:
        raise ShapeError(f"recurrent input must be [N, T, D], got shape {inputs.shape}", layer_index=0)
    if mask is not None and mask.shape != inputs.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match input {inputs.shape[:2]}", layer_index=0)


def _lstm_forward(weights, bias, x, mask, initial_state):
    n, steps, input_dim = x.shape
    hidden = bias.size // 4
    h_prev, c_prev = initial_state if initial_state is not None else (np.zeros((n, hidden)), np.zeros((n, hidden)))
    if h_prev.shape != (n, hidden) or c_prev.shape != (n, hidden):
        raise ShapeError(f"initial state must be [{n}, {hidden}]")

    hs = np.zeros((n, steps + 1, hidden))
    cs = np.zeros((n, steps + 1, hidden))
    gates = np.zeros((n, steps, 4 * hidden))
    tanh_c = np.zeros((n, steps, hidden))
    hs[:, 0], cs[:, 0] = h_prev, c_prev

    for t in range(steps):
        z = np.concatenate([x[:, t], hs[:, t]], axis=1) @ weights + bias
        i = expit(z[:, :hidden])
        f = expit(z[:, hidden:2 * hidden])
        o = expit(z[:, 2 * hidden:3 * hidden])
        g = np.tanh(z[:, 3 * hidden:])
        c_new = f * cs[:, t] + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        if mask is not None:
            m = mask[:, t:t + 1]
            c_new = m * c_new + (1.0 - m) * cs[:, t]
            h_new = m * h_new + (1.0 - m) * hs[:, t]
        gates[:, t] = np.concatenate([i, f, o, g], axis=1)
        tanh_c[:, t] = tc
        hs[:, t + 1], cs[:, t + 1] = h_new, c_new

    cache = {"x": x, "hs": hs, "cs": cs, "gates": gates, "tanh_c": tanh_c}
    return hs[:, 1:], cache


def _lstm_backward(weights, cache, mask, grad_output):
    x, hs, cs, gates, tanh_c = cache["x"], cache["hs"], cache["cs"], cache["gates"], cache["tanh_c"]
    n, steps, input_dim = x.shape
    hidden = hs.shape[2]

    d_weights = np.zeros_like(weights)
    d_bias = np.zeros(4 * hidden)
    d_x = np.zeros_like(x)
    dh = np.zeros((n, hidden))
    dc = np.zeros((n, hidden))

    for t in reversed(range(steps)):
        dh = dh + grad_output[:, t]
        m = mask[:, t:t + 1] if mask is not None else 1.0
        i, f, o, g = np.split(gates[:, t], 4, axis=1)
        tc = tanh_c[:, t]

        dh_new = m * dh
        dc_new = m * dc + dh_new * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc_new * g * i * (1.0 - i),
            dc_new * cs[:, t] * f * (1.0 - f),
            dh_new * tc * o * (1.0 - o),
            dc_new * i * (1.0 - g * g),
        ], axis=1)

        stacked = np.concatenate([x[:, t], hs[:, t]], axis=1)
        d_weights += stacked.T @ dz
        d_bias += dz.sum(axis=0)
        d_stacked = dz @ weights.T
        d_x[:, t] = d_stacked[:, :input_dim]
        dh = d_stacked[:, input_dim:] + (1.0 - m) * dh
        dc = dc_new * f + (1.0 - m) * dc

    return d_weights, d_bias, d_x, (dh, dc)


def forward(
    params: ModelParams,
    inputs: np.ndarray,
    mask: Optional[np.ndarray] = None,
    initial_state: Optional[Tuple[np.ndarray, np.ndarray]] = None
) -> Tuple[np.ndarray, ForwardCache]:
    """
    Pure forward pass. initial_state seeds the first LSTM layer with (h0, c0).
    Returns the output batch and the activations backward needs.
    """
    spec = params.spec
    inputs = np.asarray(inputs, dtype=np.float64)
    mask = None if mask is None else np.asarray(mask, dtype=np.float64)
    _check_input(spec, inputs, mask)

    cache = ForwardCache(params_id=id(params), version=params.version, inputs=inputs, mask=mask)
    activations = inputs
    seeded = False
    for index, (layer, views) in enumerate(zip(spec.layers, params.layers)):
        if activations.shape[-1] != layer.input_dim:
            raise ShapeError(f"expected width {layer.input_dim}, got {activations.shape[-1]}", layer_index=index)
        weights, bias = views
        if layer.kind == "lstm":
            if activations.ndim != 3:
                raise ShapeError("an LSTM layer needs [N, T, D] input", layer_index=index)
            state = initial_state if not seeded else None
            seeded = True
            hidden, lstm_cache = _lstm_forward(weights, bias, activations, mask, state)
            cache.layers.append(lstm_cache)
            activations = hidden
        else:
            z = activations @ weights + bias
            a = _activate(layer.activation, z)
            cache.layers.append({"inputs": activations, "z": z, "a": a})
            activations = a

    cache.output = activations
    return activations, cache


def backward_all(params: ModelParams, cache: ForwardCache, grad_output: np.ndarray) -> Gradients:
    """Gradients with respect to parameters, inputs and the LSTM initial state"""
    if cache.params_id != id(params) or cache.version != params.version:
        raise UsageError("stale forward cache: parameters changed since the forward pass")
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != cache.output.shape:
        raise ShapeError(f"loss gradient shape {grad_output.shape} does not match output {cache.output.shape}")

    spec = params.spec
    grad_layers: List[List[np.ndarray]] = [None] * len(spec.layers)
    initial_grad = None
    upstream = grad_output
    for index in reversed(range(len(spec.layers))):
        layer = spec.layers[index]
        weights = params.layers[index][0]
        layer_cache = cache.layers[index]
        if layer.kind == "lstm":
            d_weights, d_bias, upstream, state_grad = _lstm_backward(weights, layer_cache, cache.mask, upstream)
            initial_grad = state_grad
        else:
            dz = upstream * _activation_slope(layer.activation, layer_cache["z"], layer_cache["a"])
            inputs = layer_cache["inputs"]
            d_weights = inputs.reshape(-1, inputs.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            d_bias = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
            upstream = dz @ weights.T
        grad_layers[index] = [d_weights, d_bias]

    flat = np.concatenate([g.ravel() for pair in grad_layers for g in pair])
    return Gradients(params=flat, inputs=upstream, initial_state=initial_grad)


def backward(params: ModelParams, cache: ForwardCache, grad_output: np.ndarray) -> np.ndarray:
    """Parameter gradient vector for dL/d(output) = grad_output"""
    return backward_all(params, cache, grad_output).params


def input_gradient(params: ModelParams, inputs: np.ndarray, output_index: int = 0) -> np.ndarray:
    """d output[:, output_index] / d inputs for a dense network, one row per sample"""
    outputs, cache = forward(params, inputs)
    seed = np.zeros_like(outputs)
    seed[..., output_index] = 1.0
    return backward_all(params, cache, seed).inputs


def input_gradient_penalty(params: ModelParams, inputs: np.ndarray, weight: float) -> Tuple[float, np.ndarray]:
    """
    weight * mean over samples of ||d y / d x||_1 for a dense network with a single
    linear output y, and its parameter gradient by differentiating the backward pass
    """
    spec = params.spec
    if spec.is_recurrent or spec.output_dim != 1 or spec.layers[-1].activation != "linear":
        raise UsageError("the input-gradient penalty needs a dense network with one linear output")
    if weight == 0.0:
        return 0.0, np.zeros(params.size)

    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    n = inputs.shape[0]
    n_layers = len(spec.layers)
    _, cache = forward(params, inputs)
    zs = [layer_cache["z"] for layer_cache in cache.layers]
    acts = [layer_cache["a"] for layer_cache in cache.layers]
    layer_inputs = [layer_cache["inputs"] for layer_cache in cache.layers]
    weights = [views[0] for views in params.layers]
    activations = [layer.activation for layer in spec.layers]

    # seeded backward pass: deltas[l] = dy/dz_l, grads[l] = dy/d(input of layer l)
    deltas = [None] * n_layers
    grads = [None] * n_layers
    deltas[-1] = np.ones((n, 1))
    for index in reversed(range(n_layers)):
        grads[index] = deltas[index] @ weights[index].T
        if index > 0:
            deltas[index - 1] = grads[index] * _activation_slope(activations[index - 1], zs[index - 1], acts[index - 1])

    input_grads = grads[0]
    penalty = weight * float(np.abs(input_grads).sum()) / n

    d_weights = [np.zeros_like(w) for w in weights]
    d_biases = [np.zeros(w.shape[1]) for w in weights]
    injected = [None] * n_layers

    # reverse through the seeded backward pass
    upstream = weight * np.sign(input_grads) / n
    for index in range(n_layers):
        d_weights[index] += upstream.T @ deltas[index]
        d_delta = upstream @ weights[index]
        if index < n_layers - 1:
            slope = _activation_slope(activations[index], zs[index], acts[index])
            curvature = _activation_curvature(activations[index], zs[index], acts[index])
            injected[index] = d_delta * grads[index + 1] * curvature
            upstream = d_delta * slope

    # then through the forward pass, with the curvature terms entering at each z
    dz = np.zeros((n, 1))
    for index in reversed(range(n_layers)):
        d_weights[index] += layer_inputs[index].T @ dz
        d_biases[index] += dz.sum(axis=0)
        if index > 0:
            slope = _activation_slope(activations[index - 1], zs[index - 1], acts[index - 1])
            dz = injected[index - 1] + (dz @ weights[index].T) * slope

    flat = np.concatenate([g.ravel() for pair in zip(d_weights, d_biases) for g in pair])
    return penalty, flat


def mse_loss(predictions: np.ndarray, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Mean squared error over unmasked elements and its gradient"""
    diff = predictions - targets
    if mask is None:
        count = diff.size
        weights = 1.0
    else:
        weights = np.broadcast_to(np.asarray(mask, dtype=float)[..., None], diff.shape)
        count = float(weights.sum())
        if count == 0:
            raise UsageError("mask selects no elements")
    loss = float(np.sum(weights * diff * diff) / count)
    return loss, 2.0 * weights * diff / count


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy computed from logits"""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    loss = np.logaddexp(0.0, logits) - labels * logits
    return float(loss.mean()), (expit(logits) - labels) / logits.size


def softmax(values: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    scaled = np.asarray(values, dtype=np.float64) / temperature
    scaled = scaled - scaled.max(axis=axis, keepdims=True)
    exp = np.exp(scaled)
    return exp / exp.sum(axis=axis, keepdims=True)


def adam_step(params: ModelParams, grads: np.ndarray, config: TrainingConfig, ascent: bool = False) -> ModelParams:
    """One bias-corrected Adam update, applied in place"""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.vector.shape:
        raise ShapeError(f"gradient has shape {grads.shape}, parameters {params.vector.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericalError(f"non-finite gradient at Adam step {params.step + 1}")
    if ascent:
        grads = -grads

    params.step += 1
    params.adam_m[:] = config.beta1 * params.adam_m + (1.0 - config.beta1) * grads
    params.adam_v[:] = config.beta2 * params.adam_v + (1.0 - config.beta2) * grads * grads
    m_hat = params.adam_m / (1.0 - config.beta1 ** params.step)
    v_hat = params.adam_v / (1.0 - config.beta2 ** params.step)
    params.vector -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    params.version += 1
    return params


def check_gradient(
    objective: Callable[[np.ndarray], float],
    theta: np.ndarray,
    analytic: np.ndarray,
    epsilon: float = 1e-5,
    floor: float = 1e-8
) -> float:
    """Max of |analytic - numeric| / max(|analytic|, |numeric|, floor) over central differences"""
    theta = np.array(theta, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    for index in range(theta.size):
        original = theta[index]
        theta[index] = original + epsilon
        plus = objective(theta)
        theta[index] = original - epsilon
        minus = objective(theta)
        theta[index] = original
        numeric = (plus - minus) / (2.0 * epsilon)
        error = abs(analytic[index] - numeric) / max(abs(analytic[index]), abs(numeric), floor)
        worst = max(worst, error)
    return worst


def grad_check(
    spec: NetworkSpec,
    params: ModelParams,
    sample: Sequence[np.ndarray],
    epsilon: float = 1e-5
) -> float:
    """
    Check backward against central differences of the mean-squared loss.
    sample is (inputs, targets) or (inputs, targets, mask).
    """
    if params.spec != spec:
        raise UsageError("parameters were built for a different network spec")
    inputs, targets = sample[0], sample[1]
    mask = sample[2] if len(sample) > 2 else None
    perturbed = params.copy()

    def objective(theta: np.ndarray) -> float:
        perturbed.assign(theta)
        outputs, _ = forward(perturbed, inputs, mask)
        return mse_loss(outputs, targets, mask)[0]

    outputs, cache = forward(params, inputs, mask)
    _, grad_output = mse_loss(outputs, targets, mask)
    analytic = backward(params, cache, grad_output)
    return check_gradient(objective, params.vector, analytic, epsilon)


def save_models(path: Path, models: Dict[str, ModelParams], header: Optional[Dict] = None) -> Path:
    """Several named networks (with Adam state) in one checkpoint"""
    full_header = dict(header or {})
    full_header["models"] = {
        name: {"spec": params.spec.model_dump(), "adam_step": params.step} for name, params in models.items()
    }
    blocks = {}
    for name, params in models.items():
        blocks[f"{name}.params"] = params.vector
        blocks[f"{name}.adam_m"] = params.adam_m
        blocks[f"{name}.adam_v"] = params.adam_v
    return save_checkpoint(path, full_header, blocks)


def load_models(path: Path) -> Tuple[Dict[str, ModelParams], Dict]:
    header, blocks = load_checkpoint(path)
    models = {}
    for name, entry in header.pop("models").items():
        params = ModelParams(NetworkSpec.model_validate(entry["spec"]), blocks[f"{name}.params"])
        params.adam_m[:] = blocks[f"{name}.adam_m"]
        params.adam_v[:] = blocks[f"{name}.adam_v"]
        params.step = int(entry["adam_step"])
        models[name] = params
    header.pop("blocks", None)
    return models, header
