"""AdamW with decoupled weight decay, plus the warmup/cosine lr schedule."""

import math

import numpy as np


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    State (first/second moments, step counter) is keyed by parameter name
    so it serializes into checkpoints alongside the parameters.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.95), eps=1e-8,
                 weight_decay=0.05):
        self.params = params  # dict name -> Tensor, insertion order fixed
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None):
        """One update. `lr` overrides the stored learning rate (schedules)."""
        if lr is None:
            lr = self.lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter '{name}' has no gradient")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            # decoupled decay, then the Adam step with bias correction
            p.data -= np.float32(lr * self.weight_decay) * p.data
            p.data -= np.float32(lr) * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def lr_at(step, total_steps, warmup_steps, peak_lr):
    """Linear warmup from 0 to `peak_lr`, then cosine decay to 0."""
    if step < warmup_steps:
        return peak_lr * step / max(1, warmup_steps)
    if total_steps <= warmup_steps:
        return peak_lr
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    t = min(max(t, 0.0), 1.0)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * t))
