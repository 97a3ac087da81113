"""Minimal dense-network engine: layers, losses, Adam, gradient checking.

Everything is plain numpy with explicit forward/backward passes. Layers are
stateless with respect to activations: forward returns a cache object that
backward consumes, so a single model instance can serve concurrent eval
calls. Training precision is configurable (float32 default); gradient
checks require float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class ConfigError(ValueError):
    """Invalid architecture or hyperparameter configuration."""


class TrainingError(RuntimeError):
    """Numerical failure (non-finite loss or gradient) during training."""


@dataclass
class DropoutSpec:
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time.

    placement selects where masks apply: "hidden_only" masks hidden-layer
    activations, "input_and_hidden" additionally corrupts the raw input
    (the denoising variants use 20% input dropout).
    """

    rate: float = 0.5
    placement: str = "hidden_only"
    input_rate: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0,1), got {self.rate}")
        if self.placement not in ("hidden_only", "input_and_hidden"):
            raise ConfigError(f"unknown dropout placement {self.placement!r}")


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Sampled keep-mask pre-scaled by 1/(1-rate) so eval needs no rescale."""
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / np.dtype(dtype).type(1.0 - rate)


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def leaky_relu_grad(x: np.ndarray) -> np.ndarray:
    # subgradient 1 at exactly 0; checks sample inputs away from the kink
    return np.where(x > 0, x.dtype.type(1.0), x.dtype.type(LEAKY_SLOPE))


_ACTIVATIONS = ("leaky_relu", "linear")


class Dense:
    """One fully-connected layer: activation(x @ w + b)."""

    def __init__(self, w: np.ndarray, b: np.ndarray, activation: str = "linear"):
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ShapeError(f"weights {w.shape} incompatible with bias {b.shape}")
        self.w = w
        self.b = b
        self.activation = activation

    @classmethod
    def create(cls, fan_in: int, fan_out: int, activation: str,
               rng: np.random.Generator, dtype=np.float32) -> "Dense":
        # uniform(-s, s), s = sqrt(6/(fan_in+fan_out)); biases zero
        s = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-s, s, size=(fan_in, fan_out)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        return cls(w, b, activation)

    @property
    def fan_in(self) -> int:
        return self.w.shape[0]

    @property
    def fan_out(self) -> int:
        return self.w.shape[1]

    def forward(self, x: np.ndarray, *, train: bool = False,
                dropout_rate: float = 0.0,
                rng: np.random.Generator | None = None):
        """Returns (output, cache). Dropout masks the activation output."""
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ShapeError(
                f"input shape {x.shape} does not match layer fan_in "
                f"({self.fan_in}, weights {self.w.shape})")
        pre = x @ self.w + self.b
        out = leaky_relu(pre) if self.activation == "leaky_relu" else pre
        mask = None
        if train and dropout_rate > 0.0:
            if rng is None:
                raise ConfigError("dropout in train mode requires an rng")
            mask = dropout_mask(out.shape, dropout_rate, rng, dtype=out.dtype)
            out = out * mask
        return out, _DenseCache(x=x, pre=pre, mask=mask)

    def backward(self, cache: "_DenseCache", grad_out: np.ndarray):
        """Returns (grad_input, grad_w, grad_b) for the cached forward call."""
        g = grad_out if cache.mask is None else grad_out * cache.mask
        if self.activation == "leaky_relu":
            g = g * leaky_relu_grad(cache.pre)
        grad_w = cache.x.T @ g
        grad_b = g.sum(axis=0)
        grad_in = g @ self.w.T
        return grad_in, grad_w, grad_b


@dataclass
class _DenseCache:
    x: np.ndarray
    pre: np.ndarray
    mask: np.ndarray | None


def dense_forward(x: np.ndarray, layer: Dense, dropout: DropoutSpec | None = None,
                  mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
    """Pure forward pass; eval mode is deterministic, train mode masks."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    rate = dropout.rate if (dropout is not None and mode == "train") else 0.0
    out, _ = layer.forward(x, train=(mode == "train"), dropout_rate=rate, rng=rng)
    return out


def adaptive_weights(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """Per-dimension weights w_i = r_i^2 / ||r||_2 (0 for zero-residual rows)."""
    r = x - x_hat
    norms = np.sqrt((r * r).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    return (r * r) / safe[:, None]


def weighted_l1_loss(x: np.ndarray, x_hat: np.ndarray, weights: np.ndarray | None = None):
    """Residual-weighted L1 loss and its gradient w.r.t. the reconstruction.

    Per row: sum_i w_i * |r_i| with r = x - x_hat and w_i = r_i^2 / ||r||_2,
    i.e. sum_i |r_i|^3 / ||r||_2. The weights are recomputed each call and
    treated as constants in the gradient, which is -w_i * sign(r_i) averaged
    over rows; pass `weights` to evaluate the loss at frozen weights (that is
    the function the detached gradient differentiates, and what a finite
    difference check must perturb). A row with zero residual contributes zero
    loss and gradient.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"target shape {x.shape} != reconstruction shape {x_hat.shape}")
    r = x - x_hat
    absr = np.abs(r)
    n = x.shape[0]
    if weights is None:
        norms = np.sqrt((r * r).sum(axis=1))
        safe = np.where(norms > 0, norms, 1.0)
        row_loss = (absr ** 3).sum(axis=1) / safe
        w = (r * r) / safe[:, None]
    else:
        w = weights
        row_loss = (w * absr).sum(axis=1)
    loss = float(row_loss.sum() / n)
    grad = -np.sign(r) * w / x.dtype.type(n)
    return loss, grad


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows and its gradient w.r.t. logits."""
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows vs {labels.shape[0]} labels")
    n = logits.shape[0]
    p = softmax(logits)
    eps = np.finfo(logits.dtype).tiny
    loss = float(-np.log(p[np.arange(n), labels] + eps).sum() / n)
    grad = p
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


@dataclass
class AdamState:
    """Adam accumulators for a named parameter set."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, np.ndarray], lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def finite_difference_check(loss_fn: Callable[[], float],
                            params: dict[str, np.ndarray],
                            analytic: dict[str, np.ndarray],
                            step: float = 1e-5) -> float:
    """Max relative error between analytic grads and central differences.

    loss_fn must read the arrays in params (which are perturbed in place and
    restored) and be deterministic; run in float64 with dropout disabled.
    Entries where both gradients are ~0 count as zero error.
    """
    worst = 0.0
    for name, p in params.items():
        a = analytic[name]
        flat = p.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            denom = max(abs(aflat[i]), abs(num))
            if denom < 1e-10:
                continue
            worst = max(worst, abs(aflat[i] - num) / denom)
    return worst
