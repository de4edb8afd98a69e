"""Feed-forward classifier with analytic gradients for CE and FLR losses.

Everything here is a pure function of its inputs. Parameters are held in
float64 numpy arrays; weights are stored as ``(fan_in, fan_out)`` so that a
batch ``X`` of shape ``(B, d)`` is propagated with ``X @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, NumericError

PROB_EPS = 1e-12  # floor applied to probabilities before log
DOT_CEIL = 1.0 - 1e-12  # ceiling applied to <p, t> before log(1 - <p, t>)


@dataclass
class ModelParams:
    """Weights and biases of an MLP. Also used to hold gradients."""

    layer_sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self) -> None:
        self.validate()

    @classmethod
    def _trusted(cls, layer_sizes, weights, biases) -> "ModelParams":
        # internal fast path: shapes already known to match
        obj = cls.__new__(cls)
        obj.layer_sizes, obj.weights, obj.biases = layer_sizes, weights, biases
        return obj

    def validate(self) -> None:
        sizes = [int(s) for s in self.layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigurationError(f"invalid layer sizes {self.layer_sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ConfigurationError("one weight matrix and bias vector per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ConfigurationError(
                    f"layer {i}: expected W{(sizes[i], sizes[i + 1])} b{(sizes[i + 1],)}, "
                    f"got W{w.shape} b{b.shape}"
                )
        self.layer_sizes = sizes

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "ModelParams":
        return ModelParams._trusted(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, layer_sizes: Sequence[int], vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        weights, biases, pos = [], [], 0
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(vec[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            pos += fan_in * fan_out
            biases.append(vec[pos : pos + fan_out].copy())
            pos += fan_out
        if pos != vec.size:
            raise ConfigurationError(f"flat vector has {vec.size} entries, expected {pos}")
        return cls(list(layer_sizes), weights, biases)

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls(
            list(other.layer_sizes),
            [np.zeros_like(w) for w in other.weights],
            [np.zeros_like(b) for b in other.biases],
        )

    def arrays(self) -> List[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def is_finite(self) -> bool:
        # a sum is non-finite whenever any addend is
        return all(np.isfinite(a.sum()) for a in self.arrays())

    def same_shape(self, other: "ModelParams") -> bool:
        return self.layer_sizes == other.layer_sizes


GradientVector = ModelParams


def init_params(layer_sizes: Sequence[int], rng: np.random.Generator) -> ModelParams:
    """He-normal weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return ModelParams(list(layer_sizes), weights, biases)


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.layer_sizes[0]:
        raise ConfigurationError(
            f"input has dimension {x.shape[-1]}, model expects {params.layer_sizes[0]}"
        )
    return x


def _forward_cached(params: ModelParams, X: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    # acts[i] is the input to layer i (post-ReLU for i > 0)
    acts = [X]
    h = X
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h, acts


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Logits for a single example ``(d,)`` or a batch ``(B, d)``.

    Hidden layers use ReLU; the output layer is linear.
    """
    x = _check_input(params, x)
    logits, _ = _forward_cached(params, np.atleast_2d(x))
    return logits[0] if x.ndim == 1 else logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise NumericError("softmax received NaN logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest index."""
    return np.argmax(forward(params, np.atleast_2d(X)), axis=1)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[np.asarray(labels, dtype=np.int64)]


def ce_loss(p: np.ndarray, y) -> np.ndarray:
    """Per-example ``-log p[y]`` with p floored at ``PROB_EPS``.

    ``y`` is a class index (or array of indices, one per row of ``p``).
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    p2 = np.atleast_2d(p)
    picked = p2[np.arange(p2.shape[0]), np.atleast_1d(y)]
    out = -np.log(np.maximum(picked, PROB_EPS))
    return out[0] if p.ndim == 1 else out


def ce_clamp_count(p: np.ndarray, y) -> int:
    """Number of examples whose true-class probability hit the log floor."""
    picked = np.take_along_axis(np.atleast_2d(p), np.atleast_1d(y)[:, None], axis=1)
    return int(np.sum(picked < PROB_EPS))


def _pt_dot(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.minimum(np.sum(p * t, axis=-1), DOT_CEIL)


def flr_regularizer(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``log(1 - <p, t>)`` per example, the inner product capped just below 1."""
    return np.log(1.0 - _pt_dot(np.asarray(p, float), np.asarray(t, float)))


def flr_g_term(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Logit-space gradient of ``log(1 - <p, t>)`` with ``t`` held fixed.

    ``g_c = p_c / (1 - <p,t>) * sum_r (t_r - t_c) p_r``. Because ``sum_r p_r = 1``
    the sum collapses to ``<p,t> - t_c``.
    """
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    dot = _pt_dot(p, t)[..., None]
    return p * (np.sum(p * t, axis=-1, keepdims=True) - t) / (1.0 - dot)


def flr_g_term_alt(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Same quantity as :func:`flr_g_term`, written as ``-(p*t - <p,t> p) / (1 - <p,t>)``."""
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    dot = np.sum(p * t, axis=-1, keepdims=True)
    return -(p * t - dot * p) / (1.0 - np.minimum(dot, DOT_CEIL))


def logit_error(p: np.ndarray, y: np.ndarray, t: Optional[np.ndarray], lam: float) -> np.ndarray:
    """Per-example error signal ``p - y + lam * g`` at the logits."""
    err = p - one_hot(y, p.shape[-1])
    if lam != 0.0:
        err = err + lam * flr_g_term(p, t)
    return err


def batch_loss(p: np.ndarray, y: np.ndarray, t: Optional[np.ndarray], lam: float) -> float:
    loss = float(np.mean(ce_loss(p, y)))
    if lam != 0.0:
        loss = loss + lam * float(np.mean(flr_regularizer(p, t)))
    return loss


def backward(params: ModelParams, acts: List[np.ndarray], dlogits: np.ndarray) -> ModelParams:
    """Backpropagate a batch-mean logit error through the cached activations."""
    n = dlogits.shape[0]
    delta = dlogits / n
    weights: List[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    biases: List[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    for i in range(params.n_layers - 1, -1, -1):
        weights[i] = acts[i].T @ delta
        biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0.0)
    return ModelParams._trusted(list(params.layer_sizes), weights, biases)


def flr_loss_and_grad(
    params: ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    t: Optional[np.ndarray],
    lam: float,
) -> Tuple[float, ModelParams]:
    """Batch-mean FLR loss and its gradient.

    ``t`` rows are pseudo-label targets (treated as constants). With
    ``lam == 0`` this is exactly cross-entropy training and ``t`` may be None.
    """
    X = _check_input(params, X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ConfigurationError("batch must be a nonempty 2-D array")
    logits, acts = _forward_cached(params, X)
    p = softmax(logits)
    loss = batch_loss(p, y, t, lam)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    return loss, backward(params, acts, logit_error(p, y, t, lam))


def ce_loss_and_grad(params: ModelParams, X: np.ndarray, y: np.ndarray) -> Tuple[float, ModelParams]:
    return flr_loss_and_grad(params, X, y, None, 0.0)


def add_scaled(a: ModelParams, b: ModelParams, scale: float) -> ModelParams:
    """``a + scale * b`` parameterwise."""
    return ModelParams._trusted(
        list(a.layer_sizes),
        [wa + scale * wb for wa, wb in zip(a.weights, b.weights)],
        [ba + scale * bb for ba, bb in zip(a.biases, b.biases)],
    )


def sgd_step(params: ModelParams, grad: ModelParams, lr: float) -> ModelParams:
    """Plain SGD update ``params - lr * grad``."""
    if not params.same_shape(grad):
        raise ConfigurationError("gradient shape does not match parameters")
    if not grad.is_finite():
        raise NumericError("non-finite gradient")
    return ModelParams._trusted(
        list(params.layer_sizes),
        [w - lr * g for w, g in zip(params.weights, grad.weights)],
        [b - lr * g for b, g in zip(params.biases, grad.biases)],
    )


def numerical_gradient(f: Callable[[np.ndarray], float], theta: np.ndarray, step: float) -> np.ndarray:
    """Central differences of scalar ``f`` at ``theta``."""
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        fp = f(theta)
        theta[i] = orig - step
        fm = f(theta)
        theta[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def _loss_extended(params: ModelParams, X: np.ndarray, y: np.ndarray, t: Optional[np.ndarray],
                   lam: float) -> np.longdouble:
    """FLR batch loss evaluated (and returned) in ``np.longdouble``.

    Central differences at step 1e-5 lose about five digits to cancellation;
    the wider type keeps that noise below the tolerance for small gradient
    entries. Clamps match :func:`batch_loss`.
    """
    ld = np.longdouble
    h = np.asarray(X, dtype=ld)
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.astype(ld) + b.astype(ld)
        if i < last:
            h = np.maximum(h, ld(0))
    h = h - h.max(axis=1, keepdims=True)
    e = np.exp(h)
    p = e / e.sum(axis=1, keepdims=True)
    picked = p[np.arange(p.shape[0]), np.asarray(y, dtype=np.int64)]
    loss = np.mean(-np.log(np.maximum(picked, ld(PROB_EPS))))
    if lam != 0.0:
        dot = np.minimum(np.sum(p * np.asarray(t, dtype=ld), axis=1), ld(DOT_CEIL))
        loss = loss + ld(lam) * np.mean(np.log(ld(1) - dot))
    return loss


def fd_check(
    params: ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    t: Optional[np.ndarray],
    lam: float,
    step: float = 1e-5,
) -> float:
    """Max relative error between the analytic and central-difference gradient."""
    if params.size > 1000:
        raise ConfigurationError(f"fd_check limited to 1000 parameters, got {params.size}")
    sizes = params.layer_sizes

    def loss_at(vec: np.ndarray) -> np.longdouble:
        return _loss_extended(ModelParams.from_flat(sizes, vec), X, y, t, lam)

    _, grad = flr_loss_and_grad(params, X, y, t, lam)
    numeric = numerical_gradient(loss_at, params.flat(), step)
    return max_relative_error(grad.flat(), numeric)
