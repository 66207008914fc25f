"""Adam optimizer with a piecewise-linear learning-rate schedule.

The schedule holds the initial rate flat until a decay-start epoch,
then decays linearly so the final epoch lands exactly on the final
rate.  By default decay occupies the last 200 epochs of a full-length
run; shorter runs decay over their final 40%.
"""

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS_ADAM = 1e-8


def default_decay_start(total_epochs):
    if total_epochs >= 500:
        return total_epochs - 200
    return total_epochs - int(round(0.4 * total_epochs))


@dataclass
class LrSchedule:
    """Constant rate through ``decay_start``, then linear to ``final``.

    Epochs are 1-based: at_epoch(total_epochs) == final exactly.
    """

    initial: float = 1e-4
    final: float = 1e-6
    total_epochs: int = 500
    decay_start: int = None

    def __post_init__(self):
        if self.decay_start is None:
            self.decay_start = default_decay_start(self.total_epochs)
        if not 1 <= self.decay_start < self.total_epochs:
            raise ValueError("decay_start must lie in [1, total_epochs)")
        if self.final > self.initial:
            raise ValueError("schedule must be non-increasing")

    def at_epoch(self, epoch):
        if epoch < 1:
            raise ValueError("epochs are 1-based")
        if epoch <= self.decay_start:
            return self.initial
        t = (epoch - self.decay_start) / (self.total_epochs - self.decay_start)
        t = min(t, 1.0)
        return self.initial + t * (self.final - self.initial)


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus the shared step counter."""

    schedule: LrSchedule
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS_ADAM
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, schedule):
        state = cls(schedule=schedule)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, state, epoch):
    """One bias-corrected Adam update over ``params`` at the given epoch.

    Every parameter must carry a gradient; gradients are consumed
    (zeroed) by the update.
    """
    lr = state.schedule.at_epoch(epoch)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} has no gradient")
        g = p.grad
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.data.dtype)
        p.grad = None
    return lr
