"""Dense numeric primitives with explicit forward/backward passes.

Everything is float64. Functions accept a single vector or a batch of row
vectors where that is natural (leading axes are treated as batch axes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class GradcheckFailure(RuntimeError):
    def __init__(self, message: str, coordinate: int):
        super().__init__(message)
        self.coordinate = coordinate


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def affine_forward(x, weight, bias) -> np.ndarray:
    x, weight, bias = _as_f64(x), _as_f64(weight), _as_f64(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias {bias.shape} incompatible with weight {weight.shape}")
    return x @ weight.T + bias


def affine_backward(upstream, x, weight):
    """Return (grad_weight, grad_bias, grad_input).

    For batched input the weight and bias gradients are summed over the batch.
    """
    upstream, x, weight = _as_f64(upstream), _as_f64(x), _as_f64(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input {x.shape} incompatible with weight {weight.shape}")
    if upstream.shape[-1] != weight.shape[0] or upstream.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"upstream {upstream.shape} incompatible with weight {weight.shape} / input {x.shape}")
    up2 = upstream.reshape(-1, weight.shape[0])
    x2 = x.reshape(-1, weight.shape[1])
    grad_weight = up2.T @ x2
    grad_bias = up2.sum(axis=0)
    grad_input = upstream @ weight
    return grad_weight, grad_bias, grad_input


def masked_softmax(logits, mask) -> np.ndarray:
    """Softmax over the entries where ``mask`` is true, along the last axis.

    Masked-out entries are exactly 0. A row with no true entries is all zero.
    """
    logits = _as_f64(logits)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape:
        raise ShapeError(f"logits {logits.shape} and mask {mask.shape} differ")
    shifted = np.where(mask, logits, -np.inf)
    m = shifted.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(np.where(mask, logits - m, -np.inf))
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def masked_softmax_backward(upstream, weights) -> np.ndarray:
    # masked entries have weight 0, so they get exactly 0 gradient
    upstream, weights = _as_f64(upstream), _as_f64(weights)
    inner = (upstream * weights).sum(axis=-1, keepdims=True)
    return weights * (upstream - inner)


def softmax(logits) -> np.ndarray:
    logits = _as_f64(logits)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, target):
    """Cross-entropy of softmax(logits) against class ``target``.

    Returns (loss, grad_logits). Batched logits take an integer array of
    targets and return per-row losses.
    """
    logits = _as_f64(logits)
    target = np.asarray(target)
    k = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {target.shape} do not match logits {logits.shape}")
    if np.any(target < 0) or np.any(target >= k):
        raise IndexError(f"target out of range for {k} classes: {target}")
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    idx = target[..., None].astype(np.intp)
    loss = log_z - np.take_along_axis(shifted, idx, axis=-1)[..., 0]
    p = np.exp(shifted - log_z[..., None])
    grad = p.copy()
    np.put_along_axis(grad, idx, np.take_along_axis(p, idx, axis=-1) - 1.0, axis=-1)
    if loss.ndim == 0:
        return float(loss), grad
    return loss, grad


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, _as_f64(getattr(self, name)))
        n = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == n):
            raise ShapeError("batch-norm vectors must share one length")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if self.mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def create(cls, features: int, epsilon: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.ones(features), np.zeros(features), np.zeros(features), np.ones(features),
                   epsilon=epsilon, momentum=momentum)

    @property
    def features(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray = field(repr=False)


def batchnorm_forward(batch, state: BatchNormState, mode: str | None = None, update_stats: bool = True):
    """Normalize ``batch`` (samples x features). Returns (output, cache).

    ``mode`` defaults to ``state.mode``. The cache is None in infer mode.
    """
    x = _as_f64(batch)
    mode = mode or state.mode
    if x.ndim != 2 or x.shape[1] != state.features:
        raise ShapeError(f"batch {x.shape} incompatible with {state.features} features")
    if mode == "infer":
        x_hat = (x - state.running_mean) / np.sqrt(state.running_var + state.epsilon)
        return state.gamma * x_hat + state.beta, None
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[0] < 2:
        raise ValueError("train-mode batch norm needs at least 2 rows")
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean) * inv_std
    if update_stats:
        mom = state.momentum
        state.running_mean = (1.0 - mom) * state.running_mean + mom * mean
        state.running_var = (1.0 - mom) * state.running_var + mom * var
    return state.gamma * x_hat + state.beta, BatchNormCache(x_hat, inv_std, state.gamma.copy())


def batchnorm_backward(upstream, cache: BatchNormCache | None):
    """Return (grad_batch, grad_gamma, grad_beta) for a train-mode forward."""
    if cache is None:
        raise RuntimeError("batchnorm_backward needs the cache from a train-mode forward")
    dy = _as_f64(upstream)
    if dy.shape != cache.x_hat.shape:
        raise ShapeError(f"upstream {dy.shape} does not match forward batch {cache.x_hat.shape}")
    n = dy.shape[0]
    grad_beta = dy.sum(axis=0)
    grad_gamma = (dy * cache.x_hat).sum(axis=0)
    dx_hat = dy * cache.gamma
    grad_x = (cache.inv_std / n) * (n * dx_hat - dx_hat.sum(axis=0) - cache.x_hat * (dx_hat * cache.x_hat).sum(axis=0))
    return grad_x, grad_gamma, grad_beta


def numeric_gradient(loss_fn, params, step: float = 1e-5) -> np.ndarray:
    params = _as_f64(params).copy()
    grad = np.zeros_like(params)
    flat = params.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn(params)
        flat[i] = orig - step
        lo = loss_fn(params)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise GradcheckFailure(f"non-finite loss when perturbing coordinate {i}", i)
        g[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_errors(analytic, numeric) -> np.ndarray:
    analytic, numeric = _as_f64(analytic), _as_f64(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def gradcheck(loss_fn, params, step: float = 1e-5, analytic=None) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``loss_fn(p)`` returns either a scalar loss or ``(loss, grad)``. When it
    returns only the loss, pass the analytic gradient as ``analytic``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = _as_f64(params)

    def scalar(p):
        out = loss_fn(p)
        return float(out[0] if isinstance(out, tuple) else out)

    if analytic is None:
        out = loss_fn(params.copy())
        if not isinstance(out, tuple):
            raise TypeError("loss_fn must return (loss, grad) when no analytic gradient is given")
        loss0, analytic = out
        if not np.isfinite(loss0):
            raise GradcheckFailure("non-finite loss at the base point", -1)
    numeric = numeric_gradient(scalar, params, step)
    errs = relative_errors(analytic, numeric)
    return float(errs.max()) if errs.size else 0.0
