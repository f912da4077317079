"""
Differentiable activations, normalization, probabilities and losses.

softmax / cross_entropy are the classification core shared by every head:
P_i = exp(C_i) / sum_j exp(C_j) over the trailing axis, and
L = -sum_i t_i log(P_i) with a clamped log.
"""
import math
from typing import Optional

import numpy as np
from scipy.special import erf

from clinical_lm.constants import IGNORE_INDEX, LAYER_NORM_EPS, LOG_EPSILON
from clinical_lm.errors import ShapeError
from clinical_lm.tensor.autodiff import Tensor, _result, as_tensor

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the erf-based normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def _backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _result((xd * cdf).astype(x.dtype), (x,), _backward, "gelu")


def layer_norm(
    x: Tensor,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: float = LAYER_NORM_EPS,
) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    if gamma is not None and gamma.shape != (n,):
        raise ShapeError("layer_norm gamma shape", gamma.shape, (n,))
    if beta is not None and beta.shape != (n,):
        raise ShapeError("layer_norm beta shape", beta.shape, (n,))
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data

    def _backward(g):
        dxhat = g * gd if gd is not None else g
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [dx]
        if gamma is not None:
            grads.append(g * xhat)
        if beta is not None:
            grads.append(g)
        return tuple(grads)

    inputs = [x] + [t for t in (gamma, beta) if t is not None]
    return _result(out.astype(x.dtype), inputs, _backward, "layer_norm")


def _check_axis(x: Tensor, axis: int, op: str) -> None:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"{op} over an empty axis", x.shape)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), _backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def _backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), _backward, "log_softmax")


def _check_one_hot(t: np.ndarray) -> None:
    ok = np.all((t == 0.0) | (t == 1.0)) and np.all(t.sum(axis=-1) == 1.0)
    if not ok:
        raise ShapeError("cross_entropy target is not one-hot", t.shape)


def cross_entropy(p: Tensor, target, eps: float = LOG_EPSILON) -> Tensor:
    """
    -sum t log(max(P, eps)) for probability rows P and one-hot rows t,
    averaged over leading rows when P is batched.
    """
    target = np.asarray(
        target.data if isinstance(target, Tensor) else target, dtype=p.dtype
    )
    if target.shape != p.shape:
        raise ShapeError("cross_entropy shape mismatch", p.shape, target.shape)
    _check_one_hot(target)
    clamped = np.maximum(p.data, eps)
    rows = max(int(np.prod(p.shape[:-1])), 1)
    loss = -(target * np.log(clamped)).sum() / rows

    def _backward(g):
        grad = -target / clamped
        grad = np.where(p.data >= eps, grad, 0.0)
        return ((g * grad / rows).astype(p.dtype),)

    return _result(np.asarray(loss, dtype=p.dtype), (p,), _backward, "cross_entropy")


def softmax_cross_entropy(
    logits: Tensor,
    targets,
    ignore_index: int = IGNORE_INDEX,
    reduction: str = "mean",
) -> Tensor:
    """
    Fused softmax + cross-entropy over the last axis of ``logits``.

    ``targets`` holds class indices with the shape of ``logits`` minus its
    last axis; rows equal to ``ignore_index`` contribute neither loss nor
    gradient. ``reduction`` is "mean" (over counted rows) or "sum". The
    gradient of the summed loss for one row is P - t.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            "softmax_cross_entropy targets shape", logits.shape, targets.shape
        )
    _check_axis(logits, -1, "softmax_cross_entropy")
    n_classes = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, n_classes)
    flat_targets = targets.reshape(-1)
    valid = flat_targets != ignore_index
    if np.any(valid & ((flat_targets < 0) | (flat_targets >= n_classes))):
        raise ShapeError(
            f"target class out of range [0, {n_classes})", targets.shape
        )
    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - lse
    rows = np.nonzero(valid)[0]
    picked = log_p[rows, flat_targets[rows]]
    count = len(rows)
    if reduction == "mean":
        scale = 1.0 / count if count else 0.0
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    loss = -picked.sum() * scale

    def _backward(g):
        grad = np.exp(log_p)
        grad[rows, flat_targets[rows]] -= 1.0
        grad[~valid] = 0.0
        return ((g * scale * grad).reshape(logits.shape).astype(logits.dtype),)

    return _result(
        np.asarray(loss, dtype=logits.dtype), (logits,), _backward,
        "softmax_cross_entropy",
    )


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared element differences."""
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError("mse shape mismatch", pred.shape, target.shape)
    diff = pred.data - target.data
    n = max(diff.size, 1)

    def _backward(g):
        grad = 2.0 * g * diff / n
        return grad, -grad

    return _result(
        np.asarray((diff * diff).sum() / n, dtype=pred.dtype),
        (pred, target),
        _backward,
        "mse",
    )
