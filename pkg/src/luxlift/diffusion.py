"""Noise schedules, forward corruption, and deterministic reverse updates
shared by the backbone diffusion and the lightweight prior diffusion.

Schedules are float64 and immutable. The reverse update is the deterministic
form x_{t-1} = (x_t - eps * (1 - a_t) / sqrt(1 - abar_t)) / sqrt(a_t); a
stochastic ancestral variant exists behind a separate function for the
backbone only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

TERMINAL_ALPHA_BAR = 1e-4
# Absolute slack so schedules whose terminal value lands exactly on the
# decimal boundary (e.g. beta = 0.9999, T = 1) are still constructible.
_TERMINAL_SLACK = 1e-12


class ScheduleError(ValueError):
    pass


def cumulative_alphas(beta: np.ndarray) -> np.ndarray:
    """Brute cumulative product of (1 - beta_t) in float64."""
    return np.cumprod(1.0 - np.asarray(beta, dtype=np.float64))


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha/alpha_bar arrays; timesteps are 1-based (1..steps)."""

    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ScheduleError("beta must be a non-empty 1-D array")
        if not ((beta > 0) & (beta < 1)).all():
            raise ScheduleError("all beta entries must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", cumulative_alphas(beta))
        if not np.isfinite(self.alpha_bar).all():
            raise ScheduleError("alpha_bar contains non-finite values")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] >= TERMINAL_ALPHA_BAR + _TERMINAL_SLACK:
            raise ScheduleError(
                f"terminal alpha_bar {self.alpha_bar[-1]:.3e} >= {TERMINAL_ALPHA_BAR:.0e}; "
                "increase steps or beta_max"
            )

    @property
    def steps(self) -> int:
        return int(self.beta.size)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for timestep t in [0, steps]; t = 0 means no corruption."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "NoiseSchedule":
        return NoiseSchedule(beta=np.asarray(d["beta"], dtype=np.float64))


def make_schedule(steps: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear beta schedule; errors if the terminal signal fraction is not near zero."""
    if steps < 1:
        raise ScheduleError(f"steps must be >= 1, got {steps}")
    if not (0 < beta_min <= beta_max < 1):
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, steps, dtype=np.float64)
    return NoiseSchedule(beta=beta)


def respace_schedule(sched: NoiseSchedule, num_steps: int) -> tuple[NoiseSchedule, list[int]]:
    """Derive a short schedule over evenly spaced original timesteps.

    Returns the new schedule plus a map from its 1-based local steps to the
    original timesteps (used for the denoiser's timestep embedding). The
    terminal alpha_bar is preserved exactly.
    """
    if not 1 <= num_steps <= sched.steps:
        raise ScheduleError(f"num_steps must be in [1, {sched.steps}], got {num_steps}")
    picks = np.unique(np.round(np.linspace(1, sched.steps, num_steps)).astype(int))
    abar = np.array([sched.alpha_bar_at(int(t)) for t in picks])
    prev = np.concatenate([[1.0], abar[:-1]])
    beta = 1.0 - abar / prev
    return NoiseSchedule(beta=beta), [int(t) for t in picks]


def _gather_scalar(sched: NoiseSchedule, t, arr: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    ts = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if (ts < 1).any() or (ts > sched.steps).any():
        raise ValueError(f"timestep(s) {t} outside [1, {sched.steps}]")
    vals = torch.from_numpy(arr[ts - 1]).to(dtype=like.dtype)
    if np.ndim(t) == 0:
        return vals[0]
    return vals.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(
    h: torch.Tensor, sched: NoiseSchedule, t: int | Sequence[int] | np.ndarray, noise: torch.Tensor
) -> torch.Tensor:
    """Forward corruption: sqrt(abar_t) * h + sqrt(1 - abar_t) * noise."""
    if h.shape != noise.shape:
        raise ValueError(f"shape mismatch: {tuple(h.shape)} vs {tuple(noise.shape)}")
    abar = _gather_scalar(sched, t, sched.alpha_bar, h)
    return torch.sqrt(abar) * h + torch.sqrt(1.0 - abar) * noise


def reverse_step(
    h_t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule, t: int | Sequence[int] | np.ndarray
) -> torch.Tensor:
    """Deterministic reverse update from t to t-1 given a noise estimate."""
    if h_t.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(h_t.shape)} vs {tuple(eps.shape)}")
    if np.ndim(t) == 0 and int(t) < 1:
        raise ValueError("reverse_step requires t >= 1")
    alpha = _gather_scalar(sched, t, sched.alpha, h_t)
    abar = _gather_scalar(sched, t, sched.alpha_bar, h_t)
    return (h_t - eps * (1.0 - alpha) / torch.sqrt(1.0 - abar)) / torch.sqrt(alpha)


def sample_loop(
    init: torch.Tensor,
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Run all reverse steps t = T..1; calls eps_fn exactly ``sched.steps`` times.

    There is deliberately no train/inference branch here: both modes share
    this single reverse path and differ only in the initial state.
    """
    x = init
    for t in range(sched.steps, 0, -1):
        x = reverse_step(x, eps_fn(x, t), sched, t)
    return x


def sample_loop_stochastic(
    init: torch.Tensor,
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Ancestral DDPM variant: adds posterior-variance noise for t > 1."""
    x = init
    for t in range(sched.steps, 0, -1):
        x = reverse_step(x, eps_fn(x, t), sched, t)
        if t > 1:
            abar_t = sched.alpha_bar_at(t)
            abar_prev = sched.alpha_bar_at(t - 1)
            var = float(sched.beta[t - 1]) * (1.0 - abar_prev) / (1.0 - abar_t)
            noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
            x = x + np.sqrt(var) * noise
    return x
