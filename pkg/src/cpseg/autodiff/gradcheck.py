"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from cpseg.autodiff.tensor import Tensor
from cpseg.exceptions import ConfigError, NumericError


def numerical_gradient(f: Callable[[], Tensor], theta: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` with respect to each entry of ``theta``.

    ``theta.data`` is perturbed in place and restored afterwards.
    """
    flat = theta.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(theta.shape)


def gradient_check(f: Callable[[], Tensor], theta, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``theta`` is one leaf tensor or an iterable of them. The error per
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ConfigError(f"step h={h} outside [1e-6, 1e-4]")
    params = [theta] if isinstance(theta, Tensor) else list(theta)
    value = f()
    if not np.all(np.isfinite(value.data)):
        raise NumericError(f"f(theta) is not finite: {value.data}")
    for p in params:
        p.zero_grad()
    value.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = numerical_gradient(f, p, h)
        err = np.abs(ga - gn) / np.maximum(1.0, np.abs(gn))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
