"""Hand-written forward/backward kernels for dense MLPs.

Matrices are float64 numpy arrays of shape (rows, cols). Every kernel is a
plain function; layers keep the last forward input so ``dense_backward`` can
run without the caller threading activations around.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dropda.errors import DimensionError, StateError, ValidationError


def make_rng(seed: int) -> np.random.Generator:
    # PCG64 streams are specified bit-for-bit, so seeds reproduce across platforms.
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLayer":
        """Glorot-uniform weights, zero bias."""
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim))

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != layer.in_dim:
        raise DimensionError(
            f"input shape {x.shape} does not match layer weights {layer.weights.shape}"
        )
    layer.cache = x
    return x @ layer.weights.T + layer.bias


def dense_backward(grad_out: np.ndarray, layer: DenseLayer, cached_x: np.ndarray | None = None):
    """Return ``(grad_in, grad_w, grad_b)``.

    ``cached_x`` overrides the layer cache; the MC discriminator uses this to
    replay the input of a specific sampled pass.
    """
    x = layer.cache if cached_x is None else cached_x
    if x is None:
        raise StateError("dense_backward called before dense_forward")
    grad_out = as_matrix(grad_out)
    if grad_out.shape != (x.shape[0], layer.out_dim):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(x.shape[0], layer.out_dim)}"
        )
    grad_in = grad_out @ layer.weights
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_in, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, cached_x: np.ndarray) -> np.ndarray:
    return np.where(cached_x > 0, grad_out, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. logits."""
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{n} logit rows but labels have shape {labels.shape}")
    if n == 0:
        raise ValidationError("cross-entropy of an empty batch is undefined")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError(f"labels must lie in [0, {n_classes}), got {labels.min()}..{labels.max()}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Two-branch form keeps exp() from overflowing.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bce(logit: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy with logits; ``logit`` is (n, 1)."""
    logit = as_matrix(logit)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if logit.shape != (target.shape[0], 1):
        raise DimensionError(f"logit shape {logit.shape} vs {target.shape[0]} targets")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValidationError("BCE targets must be 0 or 1")
    n = target.shape[0]
    if n == 0:
        raise ValidationError("BCE of an empty batch is undefined")
    z = logit[:, 0]
    # log(1 + e^z) - t*z, written as max(z,0) - t*z + log1p(e^-|z|)
    losses = np.maximum(z, 0.0) - target * z + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - target) / n
    return float(losses.mean()), grad[:, None]


@dataclass
class DropoutMask:
    keep: np.ndarray  # 0/1 floats, one per unit
    rate: float

    @property
    def scale(self) -> float:
        return 1.0 / (1.0 - self.rate)


def _check_rate(d: float) -> None:
    if not 0.0 <= d < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {d}")


def sample_dropout_mask(n_units: int, d: float, rng: np.random.Generator) -> DropoutMask:
    _check_rate(d)
    if d == 0.0:
        return DropoutMask(np.ones(n_units), 0.0)
    keep = (rng.random(n_units) >= d).astype(np.float64)
    return DropoutMask(keep, d)


def apply_dropout(x: np.ndarray, mask: DropoutMask) -> np.ndarray:
    """Inverted dropout. The backward pass is the same function applied to the gradient."""
    x = as_matrix(x)
    if mask.keep.shape[0] != x.shape[1]:
        raise DimensionError(f"mask of length {mask.keep.shape[0]} for input with {x.shape[1]} columns")
    if mask.rate == 0.0:
        return x.copy()
    return x * (mask.keep * mask.scale)


dropout_backward = apply_dropout


def grad_reverse(grad: np.ndarray, lam: float) -> np.ndarray:
    """Backward of the gradient reversal layer; its forward is the identity."""
    if lam == 1.0:
        return -grad
    return -lam * grad


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    velocity: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must be in [0, 1)")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: SgdState):
    """Momentum SGD, in place: v <- mu*v - lr*g; p <- p + v."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(state.velocity) != len(params):
        raise DimensionError(f"{len(state.velocity)} velocity buffers for {len(params)} parameters")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionError(f"parameter {p.shape}, gradient {g.shape}, velocity {v.shape}")
    for p, g, v in zip(params, grads, state.velocity):
        v *= state.momentum
        v -= state.learning_rate * g
        p += v
    return params


def finite_difference_check(
    loss_and_grads: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_and_grads`` closes over ``params`` (mutated in place here) and the
    input, and returns the scalar loss plus one gradient per parameter.
    Relative error is ``|a - n| / max(|a| + |n|, 1e-6)`` per element; the floor keeps
    rounding noise on near-zero gradients from dominating.
    """
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    if len(params) == 0:
        return 0.0
    _, analytic = loss_and_grads()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_and_grads()[0]
            flat[i] = orig - epsilon
            down = loss_and_grads()[0]
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            denom = max(abs(gflat[i]) + abs(numeric), 1e-6)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
