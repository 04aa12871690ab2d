"""SGD and Adam updates under a piecewise-constant learning-rate schedule."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.001
    schedule: list = field(default_factory=list)  # [(step, new_rate), ...]
    batch_norm_enabled_from_step: int | None = None  # None means never

    def __post_init__(self):
        self.schedule = [(int(s), float(r)) for s, r in self.schedule]
        if self.learning_rate <= 0 or any(r <= 0 for _, r in self.schedule):
            raise ValueError("learning rates must be strictly positive")
        steps = [s for s, _ in self.schedule]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"schedule steps must be strictly increasing, got {steps}")
        if self.batch_norm_enabled_from_step is not None and self.batch_norm_enabled_from_step < 0:
            raise ValueError("batch_norm_enabled_from_step must be nonnegative")

    def lr_at(self, step):
        lr = self.learning_rate
        for s, r in self.schedule:
            if step >= s:
                lr = r
        return lr

    def batch_norm_active(self, step):
        return self.batch_norm_enabled_from_step is not None and step >= self.batch_norm_enabled_from_step


def sgd_update(params, grads, step, config):
    if params.shape != grads.shape:
        raise ValueError(f"params {params.shape} and grads {grads.shape} differ in shape")
    return params - config.lr_at(step) * grads


class Adam:
    """Adam with bias correction; the step size follows ``config.lr_at``."""

    def __init__(self, config, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.config = config
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.m, self.v, self.t = {}, {}, {}

    def update(self, name, params, grads, step):
        if params.shape != grads.shape:
            raise ValueError(f"params {params.shape} and grads {grads.shape} differ in shape")
        m = self.m.setdefault(name, np.zeros_like(grads))
        v = self.v.setdefault(name, np.zeros_like(grads))
        t = self.t[name] = self.t.get(name, 0) + 1
        m *= self.beta1
        m += (1 - self.beta1) * grads
        v *= self.beta2
        v += (1 - self.beta2) * grads * grads
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        return params - self.config.lr_at(step) * mhat / (np.sqrt(vhat) + self.epsilon)


class Sgd:
    def __init__(self, config):
        self.config = config

    def update(self, name, params, grads, step):
        return sgd_update(params, grads, step, self.config)
