"""Adam with bias correction and the warmup / inverse-sqrt learning-rate
schedule used for all training runs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class MissingGradientError(RuntimeError):
    """A registered parameter reached the optimizer without a gradient."""


@dataclass
class LrSchedule:
    """lr(step) = d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).

    Linear increase over the warmup steps, then inverse-sqrt decay; the two
    branches meet at step == warmup_steps.
    """

    d_model: int
    warmup_steps: int

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")

    def at(self, step: int) -> float:
        if step < 1:
            raise ValueError(f"lr is defined for step >= 1, got {step}")
        return self.d_model ** -0.5 * min(step ** -0.5, step * self.warmup_steps ** -1.5)


def lr_at(step: int, sched: LrSchedule) -> float:
    return sched.at(step)


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus the step count."""

    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9


class Adam:
    """Standard Adam over a fixed list of parameter tensors.

    Defaults follow the training setup: beta1=0.9, beta2=0.98, eps=1e-9.
    The learning rate is supplied per step so a schedule can drive it.
    """

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.98,
                 epsilon: float = 1e-9):
        self.params: list[Tensor] = list(params)
        self.state = AdamState(
            step=0,
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )

    def step(self, lr: float):
        st = self.state
        st.step += 1
        t = st.step
        bc1 = 1.0 - st.beta1 ** t
        bc2 = 1.0 - st.beta2 ** t
        for p, m, v in zip(self.params, st.first_moment, st.second_moment):
            if p.grad is None:
                raise MissingGradientError(
                    f"parameter {p.name or p.shape} has no gradient"
                )
            g = p.grad
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + st.epsilon)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
