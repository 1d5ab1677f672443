"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


class AdamW:
    """Adam moments plus weight decay applied directly to the parameters:

        theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta

    where the decay term uses the pre-step parameter value.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        if lr < 0 or eps < 0 or weight_decay < 0:
            raise ValueError("lr, eps, weight_decay must be non-negative")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * self.weight_decay * p.data + self.lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers under ``m:<name>`` / ``v:<name>`` keys (for checkpoints)."""
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"m:{name}"] = self.m[name]
            out[f"v:{name}"] = self.v[name]
        return out

    def hyperparams(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": self.step_count,
        }

    @classmethod
    def restore(cls, params: dict[str, Tensor], hyper: dict, state: dict[str, np.ndarray]) -> "AdamW":
        opt = cls(
            params,
            lr=hyper["lr"],
            betas=(hyper["beta1"], hyper["beta2"]),
            eps=hyper["eps"],
            weight_decay=hyper["weight_decay"],
        )
        opt.step_count = int(hyper["step_count"])
        for name in opt.params:
            opt.m[name] = state[f"m:{name}"].copy()
            opt.v[name] = state[f"v:{name}"].copy()
        return opt
