"""SGD with momentum and weight decay, plus the learning-rate and ramp schedules."""
import math

import numpy as np


def poly_lr(iteration, max_iter, base_lr, power=0.9):
    if max_iter <= 0:
        raise ValueError("poly_lr: max_iter must be positive")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"poly_lr: iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


def ramp_up(iteration, ramp_len, target):
    """Gaussian ramp ``target * exp(-5 (1 - t)^2)`` with ``t = min(iter, len) / len``."""
    if ramp_len <= 0:
        raise ValueError("ramp_up: ramp_len must be positive")
    t = min(max(iteration, 0), ramp_len) / ramp_len
    return target * math.exp(-5.0 * (1.0 - t) ** 2)


class SGD:
    """Momentum SGD: ``v = m v + (g + wd p)``; ``p -= lr v``."""

    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p, buf in zip(self.params, self.buffers):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= lr * buf

    def state_arrays(self):
        return list(self.buffers)

    def load_state_arrays(self, arrays):
        if len(arrays) != len(self.buffers):
            raise ValueError(f"optimizer state has {len(arrays)} buffers, expected {len(self.buffers)}")
        for buf, arr in zip(self.buffers, arrays):
            if buf.shape != arr.shape:
                raise ValueError(f"momentum buffer shape {arr.shape} != {buf.shape}")
            buf[...] = arr
