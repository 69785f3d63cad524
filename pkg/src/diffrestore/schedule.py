"""Noise schedules and the forward (noising) diffusion process.

A schedule is the sequence beta_1..beta_T of per-step noise variances
together with the derived quantities

    alpha_t     = 1 - beta_t
    alpha_bar_t = prod_{s<=t} alpha_s

which let the t-step noisy image be sampled directly from the clean image
instead of iterating all t steps:

    y_t = sqrt(alpha_bar_t) * y_0 + sqrt(1 - alpha_bar_t) * eps .

Coefficients are computed and stored in double precision and cast to the
image dtype at use sites. Step indices are 1-based (t in 1..T); index 0 of
the stored arrays corresponds to t = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha/alpha_bar sequences plus derived coefficients.

    Freely shareable across workers; the sampling helpers below take an
    explicit generator and are pure given it.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    sqrt_alpha_bars: np.ndarray = field(init=False)
    sqrt_one_minus_alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        # Proper schedules keep beta in (0,1); the closed endpoints are
        # allowed so the degenerate identity / pure-noise steps exist.
        if np.any(betas < 0.0) or np.any(betas > 1.0):
            raise ValueError("every beta must lie in [0, 1]")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(self.alphas))
        object.__setattr__(self, "sqrt_alpha_bars", np.sqrt(self.alpha_bars))
        object.__setattr__(
            self, "sqrt_one_minus_alpha_bars", np.sqrt(1.0 - self.alpha_bars)
        )
        for arr in (self.betas, self.alphas, self.alpha_bars,
                    self.sqrt_alpha_bars, self.sqrt_one_minus_alpha_bars):
            arr.setflags(write=False)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar_{t-1} with the clean-image boundary alpha_bar_0 = 1."""
        self._check_t(t)
        return 1.0 if t == 1 else float(self.alpha_bars[t - 2])

    def _check_t(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise IndexError(f"step index t={t} outside 1..{self.T}")


def make_linear_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Schedule with beta linearly interpolated from beta_start to beta_end.

    The defaults leave a terminal alpha_bar_T below 1e-4, i.e. the final
    noisy image is indistinguishable from Gaussian noise.
    """
    if int(T) < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _gather(arr: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Coefficients for 1-based step index t (int or batch of ints), shaped
    for broadcasting against `like`."""
    t_idx = np.asarray(t, dtype=np.int64) - 1
    if np.any(t_idx < 0) or np.any(t_idx >= arr.size):
        raise IndexError(f"step index t={t} outside 1..{arr.size}")
    coef = torch.as_tensor(arr[t_idx], dtype=like.dtype)
    if coef.ndim == 0:
        return coef
    # batched t: one coefficient per leading (batch) element
    return coef.reshape(-1, *([1] * (like.ndim - 1)))


def forward_step(
    y_prev: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """One step of the noising chain:

        y_t = sqrt(1 - beta_t) * y_{t-1} + sqrt(beta_t) * z,  z ~ N(0, I).
    """
    beta = _gather(sched.betas, t, y_prev)
    z = torch.randn(y_prev.shape, generator=rng, dtype=y_prev.dtype)
    return torch.sqrt(1.0 - beta) * y_prev + torch.sqrt(beta) * z


def forward_marginal(
    y0: torch.Tensor,
    t,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample y_t directly from the clean image, returning (y_t, eps).

    eps is returned so a trainer can regress it. `t` may be a scalar step
    index or a batch of per-example indices (first axis of y0).
    """
    sab = _gather(sched.sqrt_alpha_bars, t, y0)
    somab = _gather(sched.sqrt_one_minus_alpha_bars, t, y0)
    eps = torch.randn(y0.shape, generator=rng, dtype=y0.dtype)
    return sab * y0 + somab * eps, eps


def schedule_rows(sched: NoiseSchedule):
    """Per-step rows (t, beta, alpha, alpha_bar, sqrt_alpha_bar,
    sqrt_one_minus_alpha_bar) for CSV export."""
    for i in range(sched.T):
        yield (
            i + 1,
            float(sched.betas[i]),
            float(sched.alphas[i]),
            float(sched.alpha_bars[i]),
            float(sched.sqrt_alpha_bars[i]),
            float(sched.sqrt_one_minus_alpha_bars[i]),
        )
