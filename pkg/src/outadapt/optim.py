"""Nesterov SGD, Adam and the polynomial learning-rate schedule."""
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from numba import njit

from .exceptions import ConfigurationError

G_BASE_LR = 2.5e-4
D_BASE_LR = 1e-4


@dataclass(frozen=True)
class PolySchedule:
    base_lr: float
    total_steps: int
    power: float = 0.9

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigurationError(f"total_steps must be positive, got {self.total_steps}")

    def __call__(self, t):
        return poly_lr(self, t)


def poly_lr(schedule, t):
    if not 0 <= t <= schedule.total_steps:
        raise ConfigurationError(f"step {t} outside [0, {schedule.total_steps}]")
    return schedule.base_lr * (1.0 - t / schedule.total_steps) ** schedule.power


def _is_weight(name):
    return not name.endswith("bias")


class SGD:
    """SGD with Nesterov momentum; weight decay applies to weights, not biases.

    Per parameter p with gradient g::

        g' = g + weight_decay * p
        v  = momentum * v + g'
        p  = p - lr * (g' + momentum * v)
    """

    def __init__(self, params, momentum=0.9, weight_decay=1e-4, nesterov=True):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.velocity = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())

    def step(self, lr):
        mom = np.float32(self.momentum)
        lr = np.float32(lr)
        for name, p in self.params.items():
            if p.grad is None:
                raise ConfigurationError(f"parameter {name!r} has no gradient")
            g = p.grad
            if self.weight_decay and _is_weight(name):
                g = g + np.float32(self.weight_decay) * p.data
            v = self.velocity[name]
            v *= mom
            v += g
            update = g + mom * v if self.nesterov else v
            p.data = p.data - lr * update

    def state(self):
        return OrderedDict((f"v.{k}", v) for k, v in self.velocity.items())

    def load_state(self, arrays):
        for k in self.velocity:
            self.velocity[k] = np.array(arrays[f"v.{k}"], dtype=np.float32)


_FLT_MIN = np.float32(np.finfo(np.float32).tiny)


@njit(cache=True)
def _adam_update(p, g, m, v, b1, b2, step_size, eps, tiny):
    one = np.float32(1.0)
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (one - b1) * gi
        vi = b2 * v[i] + (one - b2) * gi * gi
        # subnormal moments slow float32 arithmetic by an order of magnitude
        if abs(mi) < tiny:
            mi = np.float32(0.0)
        if vi < tiny:
            vi = np.float32(0.0)
        m[i] = mi
        v[i] = vi
        p[i] -= step_size * mi / (np.sqrt(vi) + eps)


class Adam:
    """Bias-corrected Adam."""

    def __init__(self, params, betas=(0.9, 0.99), eps=1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())
        self.v = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is None:
                raise ConfigurationError(f"parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        step_size = np.float32(lr * np.sqrt(c2) / c1)
        eps = np.float32(self.eps * np.sqrt(c2))
        for name, p in self.params.items():
            data = p.data.copy()
            _adam_update(data.reshape(-1), p.grad.reshape(-1), self.m[name].reshape(-1),
                         self.v[name].reshape(-1), b1, b2, step_size, eps, _FLT_MIN)
            p.data = data

    def state(self):
        out = OrderedDict()
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        out["t"] = np.array([self.t], np.float32)
        return out

    def load_state(self, arrays):
        for k in self.m:
            self.m[k] = np.array(arrays[f"m.{k}"], dtype=np.float32)
            self.v[k] = np.array(arrays[f"v.{k}"], dtype=np.float32)
        self.t = int(arrays["t"][0])
