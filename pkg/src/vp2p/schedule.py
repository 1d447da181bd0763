"""Linear-beta noise schedule and deterministic DDIM step arithmetic.

``alpha_bar[t]`` is the cumulative signal coefficient at step ``t``; index 0
is the clean latent (``alpha_bar[0] == 1``) and index ``num_steps`` is the
noisiest state.  All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.num_steps + 1,):
            raise ScheduleError(
                f"alpha_bar must have {self.num_steps + 1} entries, got {ab.shape}")
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be exactly 1")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ScheduleError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.num_steps

    def noise_level(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def check_step(self, t: int, lo: int, hi: int, what: str) -> int:
        t = int(t)
        if not lo <= t <= hi:
            raise ScheduleError(f"{what}: step {t} outside [{lo}, {hi}]")
        return t


def build_schedule(num_steps: int = 50, beta_start: float = 1e-4,
                   beta_end: float = 0.3) -> NoiseSchedule:
    """Cumulative products of ``1 - beta`` for betas spaced linearly."""
    if int(num_steps) != num_steps or num_steps < 1:
        raise ScheduleError(f"num_steps must be a positive integer, got {num_steps!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            "need 0 < beta_start <= beta_end < 1, got "
            f"beta_start={beta_start!r}, beta_end={beta_end!r}")
    num_steps = int(num_steps)
    if num_steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alpha_bar = np.empty(num_steps + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - betas)
    return NoiseSchedule(num_steps, alpha_bar)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ScheduleError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def add_noise(z0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Forward-noise ``z0`` to step ``t``: sqrt(ab) z0 + sqrt(1 - ab) eps."""
    _same_shape(z0, eps, "add_noise")
    t = sched.check_step(t, 0, sched.T, "add_noise")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * np.asarray(z0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def _transfer(z, eps, ab_from: float, ab_to: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    z0_hat = (z - np.sqrt(1.0 - ab_from) * eps) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * z0_hat + np.sqrt(1.0 - ab_to) * eps


def ddim_step(z_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from step ``t`` to ``t - 1``."""
    _same_shape(z_t, eps_hat, "ddim_step")
    t = sched.check_step(t, 1, sched.T, "ddim_step")
    return _transfer(z_t, eps_hat, sched.alpha_bar[t], sched.alpha_bar[t - 1])


def ddim_inverse_step(z_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    """DDIM inversion from step ``t`` to ``t + 1``; exact inverse of :func:`ddim_step`."""
    _same_shape(z_t, eps_hat, "ddim_inverse_step")
    t = sched.check_step(t, 0, sched.T - 1, "ddim_inverse_step")
    return _transfer(z_t, eps_hat, sched.alpha_bar[t], sched.alpha_bar[t + 1])


def ddim_coefficients(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    """``(a, b)`` with ``ddim_step(z, e, t) == a * z + b * e`` (up to rounding)."""
    t = sched.check_step(t, 1, sched.T, "ddim_coefficients")
    ab_t, ab_p = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    a = np.sqrt(ab_p / ab_t)
    b = np.sqrt(1.0 - ab_p) - np.sqrt(ab_p) * np.sqrt(1.0 - ab_t) / np.sqrt(ab_t)
    return float(a), float(b)
