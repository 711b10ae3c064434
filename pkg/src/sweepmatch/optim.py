"""Adam with bias correction and a step-decay learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import GradientError, Tensor


class Adam:
    """Standard Adam over a named parameter dict.

    The effective learning rate is ``base_lr * gamma ** (epochs // step_size)``
    when driven through :class:`StepLR`.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.params = params
        self.base_lr = float(lr)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter {name!r}")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**t)
            v_hat = self.v[name] / (1 - b2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {
            "step_count": self.step_count,
            "base_lr": self.base_lr,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": self.m,
            "v": self.v,
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        self.base_lr = float(state["base_lr"])
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


class StepLR:
    """Multiply the learning rate by gamma every `step_size` epochs."""

    def __init__(self, optimizer: Adam, step_size=100, gamma=0.95):
        self.optimizer = optimizer
        self.step_size = int(step_size)
        self.gamma = float(gamma)
        self.epoch = 0

    def step(self):
        self.epoch += 1
        decays = self.epoch // self.step_size
        self.optimizer.lr = self.optimizer.base_lr * self.gamma**decays
