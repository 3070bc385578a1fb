"""Differentiable building blocks on top of :class:`Tensor`.

Every op here has a hand-written backward; the test suite checks each one
against central finite differences.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from cpseg.autodiff.tensor import Tensor, as_tensor
from cpseg.exceptions import DegenerateVectorError, DimensionError, LabelError, NumericError

LOG_FLOOR = 1e-12
_GELU_C = np.sqrt(2.0 / np.pi)


def add(a, b) -> Tensor:
    return as_tensor(a) + as_tensor(b)


def sub(a, b) -> Tensor:
    return as_tensor(a) - as_tensor(b)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    return as_tensor(x) * float(c)


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    a = x.data
    inner = _GELU_C * (a + 0.044715 * a ** 3)
    th = np.tanh(inner)
    out = 0.5 * a * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * a * (1.0 - th ** 2) * dinner),)

    return Tensor._make(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("log_softmax input contains NaN")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise LabelError(f"labels must be integers, got dtype {labels.dtype}")
    bad = np.flatnonzero((labels < 0) | (labels >= n_classes))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels.flat[i])} at index {i} outside [0, {n_classes})")
    return labels


def cross_entropy(p: Tensor, y: Sequence[int]) -> Tensor:
    """Mean of ``-log p[n, y_n]`` over rows of a probability matrix.

    The log argument is clamped at ``LOG_FLOOR``.
    """
    p = as_tensor(p)
    if p.ndim != 2:
        raise DimensionError(f"cross_entropy expects an N x K matrix, got {p.shape}")
    n, k = p.shape
    y = _check_labels(np.asarray(y).reshape(-1), k)
    if y.shape[0] != n:
        raise DimensionError(f"{n} probability rows but {y.shape[0]} labels")
    rows = np.arange(n)
    picked = p.data[rows, y]
    clamped = np.maximum(picked, LOG_FLOOR)
    loss = -np.log(clamped).mean()

    def bw(g):
        grad = np.zeros_like(p.data)
        live = picked > LOG_FLOOR
        grad[rows, y] = np.where(live, -1.0 / clamped, 0.0) * (g / n)
        return (grad,)

    return Tensor._make(np.asarray(loss), (p,), bw)


def softmax_cross_entropy(logits: Tensor, y: Sequence[int]) -> Tensor:
    """``cross_entropy(softmax(logits), y)`` computed in log space.

    Identical to the composed form wherever the true-class probability
    exceeds ``LOG_FLOOR``; beyond that the composed form stops passing
    gradient while this one keeps it.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"expected an N x K logit matrix, got {logits.shape}")
    n, k = logits.shape
    y = _check_labels(np.asarray(y).reshape(-1), k)
    if y.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {y.shape[0]} labels")
    if np.isnan(logits.data).any():
        raise NumericError("logits contain NaN")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        return (grad * (g / n),)

    return Tensor._make(np.asarray(loss), (logits,), bw)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit length; zero slices are an error."""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateVectorError("cannot normalise a zero-norm vector")
    u = x.data / norm

    def bw(g):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._make(u, (x,), bw)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"cosine_similarity needs two equal 1-d vectors, got {u.shape} and {v.shape}")
    return (l2_normalize(u) * l2_normalize(v)).sum()


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity between rows: ``[..., n, d] x [..., m, d] -> [..., n, m]``."""
    return l2_normalize(a) @ l2_normalize(b).swapaxes(-1, -2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(out, (x, gamma, beta), bw)


def im2col3x3(x: Tensor) -> Tensor:
    """Zero-padded 3x3 neighbourhoods: ``[B, H, W, C] -> [B, H, W, 9*C]``.

    Column order is (dy, dx, channel) with dy, dx in {-1, 0, 1}.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col3x3 expects [B, H, W, C], got {x.shape}")
    b, h, w, c = x.shape
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 9, c))
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = padded[:, i:i + h, j:j + w, :]

    def bw(g):
        g = g.reshape(b, h, w, 9, c)
        gp = np.zeros((b, h + 2, w + 2, c))
        for i in range(3):
            for j in range(3):
                gp[:, i:i + h, j:j + w, :] += g[:, :, :, 3 * i + j, :]
        return (gp[:, 1:-1, 1:-1, :],)

    return Tensor._make(cols.reshape(b, h, w, 9 * c), (x,), bw)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Interpolation weights for half-pixel-centred bilinear resizing.

    Row ``i`` holds the weights that output index ``i`` places on the input
    samples; rows sum to one and edges clamp.
    """
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x: Tensor, out_hw: tuple) -> Tensor:
    """Bilinear resize of ``[B, h, w, K]`` to ``[B, H, W, K]``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"resize_bilinear expects [B, h, w, K], got {x.shape}")
    _, h, w, _ = x.shape
    ah = bilinear_matrix(out_hw[0], h)
    aw = bilinear_matrix(out_hw[1], w)
    out = np.einsum("ip,jq,bpqk->bijk", ah, aw, x.data, optimize=True)

    def bw(g):
        return (np.einsum("ip,jq,bijk->bpqk", ah, aw, g, optimize=True),)

    return Tensor._make(out, (x,), bw)
