"""
Central finite-difference checks against tape gradients.

Run in float64: the error measure is normwise,
max|a - n| / max(max|a|, max|n|, floor), over sampled coordinates.
"""
import logging
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from clinical_lm.tensor.autodiff import Tape, Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_FD_EPS = 1e-6
DEFAULT_POINTS = 5
_ERROR_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), _ERROR_FLOOR)
    return float(np.abs(analytic - numeric).max() / scale)


def _loss_value(fn: Callable[[], Tensor]) -> float:
    with no_grad():
        return float(fn().data.sum())


def numerical_grad(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    index,
    eps: float = DEFAULT_FD_EPS,
) -> float:
    """d fn / d tensor[index] by central difference; ``tensor`` is restored."""
    original = tensor.data[index]
    tensor.data[index] = original + eps
    plus = _loss_value(fn)
    tensor.data[index] = original - eps
    minus = _loss_value(fn)
    tensor.data[index] = original
    return (plus - minus) / (2.0 * eps)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    n_points: int = DEFAULT_POINTS,
    eps: float = DEFAULT_FD_EPS,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, float]:
    """
    Compare tape gradients of the scalar ``fn()`` with central differences
    at ``n_points`` random coordinates of every tensor in ``params``.
    Returns the relative error per parameter name. When a parameter's
    sampled gradients are all zero the floor keeps the error at 0.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    errors: Dict[str, float] = {}
    for name in sorted(params):
        p = params[name]
        analytic_full = p.grad if p.grad is not None else np.zeros_like(p.data)
        count = min(n_points, p.size)
        flat = rng.choice(p.size, size=count, replace=False)
        analytic = []
        numeric = []
        for k in flat:
            index = np.unravel_index(int(k), p.shape)
            analytic.append(analytic_full[index])
            numeric.append(numerical_grad(fn, p, index, eps=eps))
        errors[name] = relative_error(np.array(analytic), np.array(numeric))
        logger.debug(f"gradcheck name={name} rel_err={errors[name]:.3e}")
    return errors
