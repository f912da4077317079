"""Adam with bias correction and a linear-warmup-then-constant schedule."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from clinical_lm.constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    DEFAULT_LR,
    DEFAULT_WARMUP_STEPS,
)
from clinical_lm.errors import NumericalError
from clinical_lm.tensor.autodiff import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def init_adam_state(params: Mapping[str, Tensor]) -> AdamState:
    state = AdamState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> AdamState:
    """
    One Adam update, in place on ``params`` and ``state``.

    Parameters are visited in sorted name order. A missing gradient is
    treated as zero. Any non-finite gradient aborts before anything is
    modified.
    """
    names = sorted(params)
    for name in names:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(
                f"non-finite gradient for {name}", step=state.step + 1
            )
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in names:
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= update.astype(p.dtype, copy=False)
    return state


class WarmupConstantSchedule:
    """Linear warmup from lr/warmup to lr over ``warmup_steps``, then flat."""

    def __init__(self, lr: float = DEFAULT_LR, warmup_steps: int = DEFAULT_WARMUP_STEPS):
        self.lr = float(lr)
        self.warmup_steps = max(int(warmup_steps), 0)

    def __call__(self, step: int) -> float:
        if self.warmup_steps == 0:
            return self.lr
        return self.lr * min(1.0, (step + 1) / self.warmup_steps)


class Adam:
    """Stateful wrapper: holds params, moments and schedule."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        schedule: Optional[WarmupConstantSchedule] = None,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ):
        self.params = params
        self.schedule = schedule or WarmupConstantSchedule()
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = init_adam_state(params)

    @property
    def current_lr(self) -> float:
        return self.schedule(self.state.step)

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        if grads is None:
            grads = {name: p.grad for name, p in self.params.items()}
        adam_step(
            self.params,
            grads,
            self.state,
            self.current_lr,
            self.beta1,
            self.beta2,
            self.eps,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
