"""Diffusion algebra: noise schedule, forward noising, DDIM reverse step.

Diffusion time ``t`` is continuous on ``[0, 1]`` with ``t = 0`` the clean end.
All functions accept python floats, numpy arrays or torch tensors. When ``t``
(or ``alpha``) is a 1-D batch of values it is broadcast against the leading
axis of the field arrays, so a ``[B, H, W, C]`` batch can carry one diffusion
time per item.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError, OrderingError, ShapeError

__all__ = [
    "NoiseSchedule",
    "signal_rates",
    "forward_diffuse",
    "estimate_x0",
    "ddim_step",
    "noise_loss",
    "diffuse_at",
    "x0_from_noise",
    "ddim_update",
    "sampling_times",
]


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def _sqrt(x):
    if _is_torch(x):
        return torch.sqrt(x)
    if isinstance(x, np.ndarray):
        return np.sqrt(x)
    return math.sqrt(x)


def _broadcast(rate, like):
    """Reshape a per-item rate so it broadcasts over a batched field."""
    if _is_torch(rate) or isinstance(rate, np.ndarray):
        if rate.ndim == 1 and getattr(like, "ndim", 0) > 1:
            if rate.shape[0] != like.shape[0]:
                raise ShapeError(
                    f"{rate.shape[0]} diffusion times for a batch of {like.shape[0]}"
                )
            rate = rate.reshape((-1,) + (1,) * (like.ndim - 1))
        if _is_torch(rate) and _is_torch(like):
            rate = rate.to(dtype=like.dtype)
        elif isinstance(rate, np.ndarray) and isinstance(like, np.ndarray):
            rate = rate.astype(like.dtype, copy=False)
    return rate


def _check_same_shape(a, b, what: str) -> None:
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise ShapeError(f"{what}: shape {tuple(np.shape(a))} != {tuple(np.shape(b))}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Continuous map from diffusion time to (signal rate, noise rate).

    ``form="cosine"`` interpolates the angle ``phi`` linearly between
    ``acos(max_signal_rate)`` at ``t=0`` and ``acos(min_signal_rate)`` at
    ``t=1`` and returns ``(cos phi, sin phi)``. ``form="linear"`` is linear
    in ``alpha = signal_rate**2`` between the same endpoints.
    """

    min_signal_rate: float = 0.02
    max_signal_rate: float = 0.95
    form: str = "cosine"

    def __post_init__(self):
        if not 0.0 < self.min_signal_rate < self.max_signal_rate < 1.0:
            raise DomainError(
                "need 0 < min_signal_rate < max_signal_rate < 1, got "
                f"{self.min_signal_rate}, {self.max_signal_rate}"
            )
        if self.form not in ("cosine", "linear"):
            raise DomainError(f"unknown schedule form {self.form!r}")

    def rates(self, t):
        return signal_rates(self, t)

    def alpha(self, t):
        """Signal variance ``alpha_t`` at time ``t``."""
        signal, _ = signal_rates(self, t)
        return signal * signal


def _check_time(t) -> None:
    if _is_torch(t):
        bad = bool(((t < 0) | (t > 1) | torch.isnan(t)).any())
    else:
        arr = np.asarray(t, dtype=float)
        bad = bool(((arr < 0) | (arr > 1) | np.isnan(arr)).any())
    if bad:
        raise DomainError(f"diffusion time must lie in [0, 1], got {t}")


def signal_rates(schedule: NoiseSchedule, t):
    """Return ``(sqrt(alpha_t), sqrt(1 - alpha_t))`` for diffusion time ``t``."""
    _check_time(t)
    if schedule.form == "cosine":
        start = math.acos(schedule.max_signal_rate)
        end = math.acos(schedule.min_signal_rate)
        angle = start + t * (end - start)
        if _is_torch(angle):
            return torch.cos(angle), torch.sin(angle)
        if isinstance(angle, np.ndarray):
            return np.cos(angle), np.sin(angle)
        return math.cos(angle), math.sin(angle)
    a0 = schedule.max_signal_rate**2
    a1 = schedule.min_signal_rate**2
    alpha = (1 - t) * a0 + t * a1  # exact at both endpoints
    return _sqrt(alpha), _sqrt(1.0 - alpha)


# alpha-parameterised primitives ---------------------------------------------


def diffuse_at(x0, eps, alpha):
    """``sqrt(alpha) * x0 + sqrt(1 - alpha) * eps``."""
    _check_same_shape(x0, eps, "forward_diffuse")
    alpha = _broadcast(alpha, x0)
    return _sqrt(alpha) * x0 + _sqrt(1.0 - alpha) * eps


def x0_from_noise(x_t, eps_hat, alpha):
    """Invert :func:`diffuse_at` given a noise estimate."""
    _check_same_shape(x_t, eps_hat, "estimate_x0")
    if _is_torch(alpha):
        singular = bool((alpha <= 0).any())
    else:
        singular = bool((np.asarray(alpha) <= 0).any())
    if singular:
        raise DomainError("signal rate is zero; x0 cannot be reconstructed")
    alpha = _broadcast(alpha, x_t)
    return (x_t - _sqrt(1.0 - alpha) * eps_hat) / _sqrt(alpha)


def ddim_update(x_t, eps_hat, alpha, alpha_prev):
    """Deterministic (sigma = 0) DDIM move from ``alpha`` to ``alpha_prev``."""
    x0_hat = x0_from_noise(x_t, eps_hat, alpha)
    alpha_prev = _broadcast(alpha_prev, x_t)
    return _sqrt(alpha_prev) * x0_hat + _sqrt(1.0 - alpha_prev) * eps_hat


# time-parameterised operations ----------------------------------------------


def forward_diffuse(x0, eps, t, schedule: NoiseSchedule):
    """Noise a clean field to diffusion time ``t``."""
    _check_same_shape(x0, eps, "forward_diffuse")
    signal, noise = signal_rates(schedule, t)
    signal = _broadcast(signal, x0)
    noise = _broadcast(noise, x0)
    return signal * x0 + noise * eps


def estimate_x0(x_t, eps_hat, t, schedule: NoiseSchedule):
    """Reconstruct the clean field from ``x_t`` and predicted noise."""
    _check_same_shape(x_t, eps_hat, "estimate_x0")
    signal, noise = signal_rates(schedule, t)
    signal = _broadcast(signal, x_t)
    noise = _broadcast(noise, x_t)
    return (x_t - noise * eps_hat) / signal


def ddim_step(x_t, eps_hat, t, t_prev, schedule: NoiseSchedule):
    """One deterministic reverse step from ``t`` down to ``t_prev``."""
    _check_time(t_prev)
    if _is_torch(t) or _is_torch(t_prev):
        ordered = bool(torch.all(torch.as_tensor(t_prev) < torch.as_tensor(t)))
    else:
        ordered = bool(np.all(np.asarray(t_prev) < np.asarray(t)))
    if not ordered:
        raise OrderingError(f"t_prev={t_prev} must be earlier than t={t}")
    x0_hat = estimate_x0(x_t, eps_hat, t, schedule)
    signal, noise = signal_rates(schedule, t_prev)
    signal = _broadcast(signal, x_t)
    noise = _broadcast(noise, x_t)
    return signal * x0_hat + noise * eps_hat


def noise_loss(eps, eps_hat):
    """Mean absolute error between true and predicted noise."""
    _check_same_shape(eps, eps_hat, "noise_loss")
    if _is_torch(eps) or _is_torch(eps_hat):
        return torch.mean(torch.abs(torch.as_tensor(eps) - torch.as_tensor(eps_hat)))
    return float(np.mean(np.abs(np.asarray(eps, dtype=float) - np.asarray(eps_hat, dtype=float))))


def sampling_times(n_steps: int) -> np.ndarray:
    """Denoiser evaluation times ``1, 1 - 1/n, ..., 1/n`` (``n_steps`` points)."""
    if n_steps < 1:
        raise DomainError(f"n_steps must be >= 1, got {n_steps}")
    return 1.0 - np.arange(n_steps) / n_steps
