"""Adam optimizer and the warmup-plus-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Bias-corrected Adam over a list of parameter tensors (updated in place)."""

    params: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
            self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def lr_schedule(step: int, lr_start: float, lr_peak: float,
                warmup_steps: int, total_steps: int) -> float:
    """Linear ramp from ``lr_start`` to ``lr_peak`` over the warmup steps,
    then half-cosine decay back toward ``lr_start``.

    The peak is reached exactly at the last warmup step; the decay phase
    evaluates ``lr_start + (lr_peak - lr_start) * 0.5 * (1 + cos(pi * frac))``
    with ``frac`` the progress through the remaining steps.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if warmup_steps > 0 and step < warmup_steps:
        if warmup_steps == 1:
            return lr_peak
        return lr_start + (lr_peak - lr_start) * step / (warmup_steps - 1)
    decay_steps = max(total_steps - warmup_steps, 1)
    frac = min((step - warmup_steps) / decay_steps, 1.0)
    return lr_start + (lr_peak - lr_start) * 0.5 * (1.0 + math.cos(math.pi * frac))
