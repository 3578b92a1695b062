"""Noise schedules, forward noising, clean-latent prediction and DDIM steps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _as_tensor
from .errors import ContractError, ShapeError

X0_MODES = ("ddim-standard", "paper-eq2")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    alpha_bar: tuple  # alpha_bar[t - 1] for t = 1..T

    def abar(self, t: int) -> float:
        """Cumulative signal coefficient; ``abar(0) == 1`` closes the DDIM loop."""
        if t == 0:
            return 1.0
        self.check_t(t)
        return self.alpha_bar[t - 1]

    def check_t(self, t: int, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        if not (lo <= t <= self.T):
            raise ContractError(f"timestep {t} outside [{lo}, {self.T}]")

    def to_json(self) -> str:
        return json.dumps(list(self.alpha_bar))


def make_schedule(kind: str = "cosine", T: int = 8) -> NoiseSchedule:
    if T < 1:
        raise ContractError("schedule needs T >= 1")
    t = np.arange(1, T + 1, dtype=np.float64)
    if kind == "cosine":
        offset = 0.0025 * math.pi / 2
        ab = np.cos((t / T * math.pi / 2) * 0.995 + offset) ** 2 / math.cos(offset) ** 2
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.2, T)
        ab = np.cumprod(1.0 - betas)
    else:
        raise ContractError(f"unknown schedule kind {kind!r}")
    if not (np.all(ab > 0) and np.all(ab < 1) and np.all(np.diff(ab) < 0)):
        raise ContractError("schedule is not strictly decreasing inside (0, 1)")
    return NoiseSchedule(kind, T, tuple(float(a) for a in ab))


def _same_shape(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def add_noise(x0, eps, t: int, sched: NoiseSchedule) -> Tensor:
    x0, eps = _as_tensor(x0), _as_tensor(eps)
    _same_shape(x0, eps)
    ab = sched.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_hat, t: int, sched: NoiseSchedule, mode: str = "ddim-standard") -> Tensor:
    """Clean-latent estimate from a noisy latent and a noise prediction.

    ``paper-eq2`` is the literal printed form ``x_t / abar + (1 - sqrt(abar)) / sqrt(abar) * eps``;
    it does not invert :func:`add_noise` and exists for comparison runs only.
    """
    x_t, eps_hat = _as_tensor(x_t), _as_tensor(eps_hat)
    _same_shape(x_t, eps_hat)
    ab = sched.abar(t)
    if mode == "ddim-standard":
        return (x_t - math.sqrt(1.0 - ab) * eps_hat) * (1.0 / math.sqrt(ab))
    if mode == "paper-eq2":
        return x_t * (1.0 / ab) + ((1.0 - math.sqrt(ab)) / math.sqrt(ab)) * eps_hat
    raise ContractError(f"unknown x0 mode {mode!r}")


def ddim_step(x0_hat, x_t, t: int, sched: NoiseSchedule) -> Tensor:
    """Deterministic DDIM move from ``x_t`` to ``x_{t-1}`` given a clean estimate."""
    x0_hat, x_t = _as_tensor(x0_hat), _as_tensor(x_t)
    _same_shape(x0_hat, x_t)
    ab = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    eps = (x_t - math.sqrt(ab) * x0_hat) * (1.0 / math.sqrt(1.0 - ab))
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps
