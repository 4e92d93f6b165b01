"""Bilinear semantic attention over word vectors.

Each word's relevance to the image is ``f_v^T U f_t_i``; a softmax over the
valid words turns those into pooling weights. Array functions take either a
single sample (``fv``: v, ``T``: t x N, ``mask``: N) or a batch with a leading
axis (B x v, B x t x N, B x N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ShapeError, masked_softmax, masked_softmax_backward
from .textrep import TextFeature


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class AttentionParams:
    U: np.ndarray  # v_dim x t_dim

    @classmethod
    def init(cls, v_dim: int, t_dim: int, rng: np.random.Generator) -> "AttentionParams":
        return cls(glorot_uniform(rng, v_dim, t_dim))


@dataclass
class AttentionCache:
    fv: np.ndarray
    U: np.ndarray
    T: np.ndarray
    query: np.ndarray
    weights: np.ndarray


@dataclass
class AttentionOutput:
    weights: np.ndarray
    attended: np.ndarray
    cache: AttentionCache | None


def _check(fv, U, T):
    fv, U, T = (np.asarray(a, dtype=np.float64) for a in (fv, U, T))
    if U.ndim != 2 or fv.shape[-1] != U.shape[0] or T.shape[-2] != U.shape[1]:
        raise ShapeError(f"f_v {fv.shape}, U {U.shape} and text {T.shape} are inconsistent")
    if fv.shape[:-1] != T.shape[:-2]:
        raise ShapeError(f"batch shapes of f_v {fv.shape} and text {T.shape} differ")
    return fv, U, T


def bilinear_logits(fv, U, T) -> np.ndarray:
    fv, U, T = _check(fv, U, T)
    query = fv @ U  # f_v^T U once, then one dot per word
    return np.einsum("...t,...tn->...n", query, T)


def attend(fv, U, T, mask) -> AttentionOutput:
    fv, U, T = _check(fv, U, T)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != T.shape[:-2] + T.shape[-1:]:
        raise ShapeError(f"mask {mask.shape} does not match text {T.shape}")
    query = fv @ U
    logits = np.einsum("...t,...tn->...n", query, T)
    weights = masked_softmax(logits, mask)
    attended = np.einsum("...tn,...n->...t", T, weights)
    return AttentionOutput(weights, attended, AttentionCache(fv, U, T, query, weights))


def attend_backward(upstream, cache: AttentionCache | None):
    """Gradients (dU, dfv, dT) given the gradient of the attended vector.

    Batched caches sum dU over the batch.
    """
    if cache is None:
        raise RuntimeError("attention backward needs the forward cache")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.query.shape:
        raise ShapeError(f"upstream {g.shape} does not match attended {cache.query.shape}")
    w = cache.weights
    # pooling path
    dT = np.einsum("...t,...n->...tn", g, w)
    dw = np.einsum("...tn,...t->...n", cache.T, g)
    # softmax and bilinear path
    dz = masked_softmax_backward(dw, w)
    dT += np.einsum("...t,...n->...tn", cache.query, dz)
    dq = np.einsum("...tn,...n->...t", cache.T, dz)
    fv2 = cache.fv.reshape(-1, cache.fv.shape[-1])
    dU = fv2.T @ dq.reshape(-1, dq.shape[-1])
    dfv = dq @ cache.U.T
    return dU, dfv, dT


def attention_logits(fv, params: AttentionParams, text: TextFeature) -> np.ndarray:
    return bilinear_logits(fv, params.U, text.matrix)


def attention_forward(fv, params: AttentionParams, text: TextFeature) -> AttentionOutput:
    return attend(fv, params.U, text.matrix, text.mask)


def attention_backward(upstream, output: AttentionOutput):
    return attend_backward(upstream, output.cache)


def average_pool_arrays(T, mask) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    count = mask.sum(axis=-1)
    weights = np.divide(mask.astype(np.float64), count[..., None],
                        out=np.zeros(mask.shape), where=count[..., None] > 0)
    return np.einsum("...tn,...n->...t", T, weights), weights


def average_pool(text: TextFeature) -> np.ndarray:
    return average_pool_arrays(text.matrix, text.mask)[0]
