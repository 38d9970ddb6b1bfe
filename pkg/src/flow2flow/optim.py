"""Adam optimizer over lists of leaf tensors."""

import numpy as np

from .autodiff import Tensor
from .errors import NumericError

__all__ = ["Adam"]


class Adam:
    """Adam with bias correction; p -= lr * m_hat / (sqrt(v_hat) + eps).

    step() consumes the gradients accumulated by backward() and zeroes them
    afterwards, so each optimizer step sees exactly one objective.
    """

    def __init__(self, params, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0.0:
            raise NumericError(f"Adam: lr must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise NumericError(f"Adam: betas must lie in [0, 1), got {beta1}, {beta2}")
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise NumericError(
                    f"Adam: parameter {i} (shape {p.data.shape}) has no gradient; "
                    "call backward() before step()"
                )
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.isfinite(p.data).all():
                raise NumericError("Adam: parameter became non-finite after update")
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict):
        if len(state["m"]) != len(self.params) or len(state["v"]) != len(self.params):
            raise NumericError("Adam: state does not match parameter list")
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]
