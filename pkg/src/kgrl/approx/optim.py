from __future__ import annotations

import numpy as np

from kgrl.approx.params import ParameterStore


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str, grad: np.ndarray):
        bad = int(np.sum(~np.isfinite(grad)))
        super().__init__(f"non-finite gradient in {name!r}: {bad}/{grad.size} entries")
        self.name = name


class Adam:
    """Adaptive-moment optimizer; moments are kept on the ParameterStore."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, max_grad_norm: float | None = None):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm

    def step(self, params: ParameterStore, grads: dict[str, np.ndarray] | None = None,
             names: list[str] | None = None) -> float:
        """Apply one update; returns the (pre-clip) global gradient norm."""
        grads = params.grads() if grads is None else grads
        names = list(grads) if names is None else names
        for n in names:
            if not np.all(np.isfinite(grads[n])):
                raise NonFiniteGradient(n, grads[n])
        norm = float(np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names)))
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-6)
        adam_step(params, {n: grads[n] * scale for n in names}, self.lr, self.betas, self.eps)
        return norm


def adam_step(params: ParameterStore, grads: dict[str, np.ndarray], lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    b1, b2 = betas
    params.step_count += 1
    t = params.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name, g)
        p = params[name]
        m, v = params.moments.get(name) or (np.zeros_like(p.data), np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        params.moments[name] = (m, v)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
