"""Dense multilayer perceptron with exact backpropagation and Adam.

This is the shared numeric substrate for the structural, regression, and
generative learners.  Everything is plain float64 numpy: evaluation is
deterministic bit-for-bit given identical parameters and inputs, and the
backward pass returns the exact gradient of the composed network (checked
against central finite differences in the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolationError, TrainingDivergenceError

ACTIVATIONS = ("relu", "sigmoid")


@dataclass
class MlpParams:
    """Weights/biases of one MLP: ``weights[l]`` has shape (m_{l+1}, m_l).

    The hidden activation is applied between layers, never after the final
    affine map, so a one-layer network is purely linear.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def validate(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        dims = self.layer_dims
        if len(self.weights) != len(self.biases) or len(self.weights) != len(dims) - 1:
            raise ContractViolationError(
                f"expected {len(dims) - 1} weight/bias pairs, got "
                f"{len(self.weights)}/{len(self.biases)}"
            )
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]):
                raise ContractViolationError(
                    f"layer {l}: weight shape {w.shape} != {(dims[l + 1], dims[l])}"
                )
            if b.shape != (dims[l + 1],):
                raise ContractViolationError(
                    f"layer {l}: bias shape {b.shape} != {(dims[l + 1],)}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ContractViolationError(f"layer {l}: non-finite parameters")

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


@dataclass
class MlpGrads:
    """Parameter gradients, shaped exactly like the MlpParams they refer to."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def scale(self, c: float) -> "MlpGrads":
        return MlpGrads([c * w for w in self.weights], [c * b for b in self.biases])

    def add(self, other: "MlpGrads") -> "MlpGrads":
        return MlpGrads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


def zero_grads(params: MlpParams) -> MlpGrads:
    return MlpGrads(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def init_params(
    layer_dims, seed, activation: str = "relu", rng: np.random.Generator | None = None
) -> MlpParams:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases.

    Deterministic given ``seed``; pass ``rng`` instead to draw from an
    existing stream.
    """
    dims = tuple(int(m) for m in layer_dims)
    if len(dims) < 2 or any(m < 1 for m in dims):
        raise ConfigurationError(f"invalid layer dims {dims}")
    if rng is None:
        rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(len(dims) - 1):
        bound = np.sqrt(6.0 / dims[l])
        weights.append(rng.uniform(-bound, bound, size=(dims[l + 1], dims[l])))
        biases.append(np.zeros(dims[l + 1]))
    params = MlpParams(dims, weights, biases, activation)
    params.validate()
    return params


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    # sigmoid, numerically stable on both tails
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activation_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0.0).astype(z.dtype)
    s = _activate(z, "sigmoid")
    return s * (1.0 - s)


def _forward_cached(params: MlpParams, x: np.ndarray):
    """Returns (layer inputs, pre-activations); x is (n, m_0)."""
    inputs = [x]
    pre = []
    h = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if l == last else _activate(z, params.activation)
        if l != last:
            inputs.append(h)
    return inputs, pre


def mlp_forward_batch(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a batch of rows: (n, m_0) -> (n, m_L)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ContractViolationError(
            f"batch shape {x.shape} incompatible with input dim {params.in_dim} "
            f"at layer 0"
        )
    _, pre = _forward_cached(params, x)
    return pre[-1]


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on a single input vector of length m_0."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ContractViolationError(f"expected a vector, got shape {x.shape}")
    if x.shape[0] != params.in_dim:
        raise ContractViolationError(
            f"input length {x.shape[0]} != layer-0 width {params.in_dim}"
        )
    return mlp_forward_batch(params, x[None, :])[0]


def mlp_backward(params: MlpParams, inputs: np.ndarray, loss_grads: np.ndarray):
    """Exact gradients under the given upstream gradients, summed over the batch.

    Parameters
    ----------
    inputs : (n, m_0) batch
    loss_grads : (n, m_L) upstream gradients d loss / d output

    Returns
    -------
    (MlpGrads, input_grads) where input_grads has shape (n, m_0).
    """
    x = np.asarray(inputs, dtype=float)
    g = np.asarray(loss_grads, dtype=float)
    if x.ndim != 2 or g.ndim != 2:
        raise ContractViolationError("inputs and loss_grads must be 2-d batches")
    if x.shape[0] == 0:
        raise ContractViolationError("empty batch")
    if x.shape[0] != g.shape[0]:
        raise ContractViolationError(
            f"batch sizes differ: {x.shape[0]} inputs vs {g.shape[0]} gradients"
        )
    if x.shape[1] != params.in_dim or g.shape[1] != params.out_dim:
        raise ContractViolationError(
            f"shapes {x.shape}/{g.shape} incompatible with dims {params.layer_dims}"
        )

    layer_inputs, pre = _forward_cached(params, x)
    n_layers = params.n_layers
    d_w = [None] * n_layers
    d_b = [None] * n_layers
    delta = g
    for l in range(n_layers - 1, -1, -1):
        d_w[l] = delta.T @ layer_inputs[l]
        d_b[l] = delta.sum(axis=0)
        delta = delta @ params.weights[l]
        if l > 0:
            delta = delta * _activation_grad(pre[l - 1], params.activation)
    return MlpGrads(d_w, d_b), delta


@dataclass
class AdamState:
    """Adam accumulators mirroring one MlpParams, plus hyperparameters."""

    m_weights: list[np.ndarray]
    v_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_biases: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        [np.zeros_like(b) for b in params.biases],
        0, lr, beta1, beta2, eps,
    )


def adam_step(state: AdamState, params: MlpParams, grads: MlpGrads):
    """One in-place Adam update with bias correction; returns (state, params)."""
    for g in grads.weights + grads.biases:
        if not np.isfinite(g).all():
            raise TrainingDivergenceError("non-finite gradient in Adam step")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for group in (
        zip(state.m_weights, state.v_weights, params.weights, grads.weights),
        zip(state.m_biases, state.v_biases, params.biases, grads.biases),
    ):
        for m, v, p, g in group:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state, params


def finite_difference_grads(loss_fn, params: MlpParams, step: float = 1e-5) -> MlpGrads:
    """Central finite differences of ``loss_fn(params)`` over every coordinate.

    The independent check for mlp_backward; O(#params) evaluations, so only
    for small networks.
    """
    grads = zero_grads(params)
    for arrays, outs in ((params.weights, grads.weights), (params.biases, grads.biases)):
        for arr, out in zip(arrays, outs):
            flat = arr.ravel()
            gflat = out.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_fn(params)
                flat[i] = orig - step
                down = loss_fn(params)
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * step)
    return grads
