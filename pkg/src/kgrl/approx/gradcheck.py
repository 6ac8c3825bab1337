"""Central finite-difference gradient checking (64-bit only)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from kgrl.approx.params import ParameterStore
from kgrl.approx.tensor import Tensor, kink_monitor


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    flagged_kink: bool
    retries: int

    def __float__(self) -> float:
        return self.max_rel_error


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _masks_differ(a: list, b: list) -> bool:
    return len(a) != len(b) or any(x.shape != y.shape or np.any(x != y) for x, y in zip(a, b))


def _eval(loss_fn, params, x):
    with kink_monitor() as masks:
        value = loss_fn(params, x)
    return value, masks


def _check_once(loss_fn, params, x, names, step, max_entries, rng):
    """Returns (worst error, worst name, crossed) where ``crossed`` means some
    finite-difference probe switched a relu on or off."""
    params.zero_grad()
    loss, base = _eval(loss_fn, params, x)
    loss.backward()
    analytic = params.grads()
    worst_err, worst = 0.0, ""
    crossed = False
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up, up_masks = _eval(loss_fn, params, x)
            flat[i] = orig - step
            down, down_masks = _eval(loss_fn, params, x)
            flat[i] = orig
            numeric[k] = (up.item() - down.item()) / (2 * step)
            crossed = crossed or _masks_differ(base, up_masks) or _masks_differ(base, down_masks)
        err = rel_error(analytic[name].reshape(-1)[idx], numeric)
        if err.size and err.max() > worst_err:
            worst_err, worst = float(err.max()), name
    return worst_err, worst, crossed


def gradient_check(
    loss_fn: Callable[[ParameterStore, object], Tensor],
    params: ParameterStore,
    x=None,
    names: list[str] | None = None,
    step: float = 1e-5,
    max_entries: int | None = None,
    perturb: Callable[[object, np.random.Generator], object] | None = None,
    max_retries: int = 5,
    seed: int = 0,
) -> GradCheckResult:
    """Max over parameters of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    If a probe flips any relu on or off, the point straddles a kink and is
    flagged; the input is then perturbed (default: small gaussian jitter for
    array inputs) and the check repeated.
    """
    rng = np.random.default_rng(seed)
    names = list(params) if names is None else names
    if perturb is None:
        def perturb(v, r):
            return v + 1e-3 * r.standard_normal(np.shape(v))
    flagged = False
    retries = 0
    while True:
        err, worst, crossed = _check_once(loss_fn, params, x, names, step, max_entries, rng)
        if not crossed or x is None or retries >= max_retries:
            return GradCheckResult(err, worst, flagged, retries)
        flagged = True
        retries += 1
        x = perturb(x, rng)
