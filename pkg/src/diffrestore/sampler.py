"""Conditional backward denoising: from Gaussian noise to a restored image.

The reverse transition is the standard ancestral update

    y_{t-1} = (y_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
              + sigma_t * z,
    sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t,

with no noise injected at the final step (t = 1). Large images are restored
as overlapping tiles blended with a linear ramp; per-tile noise streams are
derived from the seed and the tile index, so tiles may be processed in any
order or in parallel without changing the result.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch

from .denoiser import PromptDenoiser
from .rng import torch_generator
from .schedule import NoiseSchedule
from .trainer import NumericError, from_signed_unit, to_signed_unit


def posterior_sigma(t: int, sched: NoiseSchedule) -> float:
    """Reverse-step noise scale sigma_t (0 at t = 1)."""
    sched._check_t(t)
    beta = float(sched.betas[t - 1])
    ab = float(sched.alpha_bars[t - 1])
    ab_prev = sched.alpha_bar_prev(t)
    if 1.0 - ab == 0.0:
        return 0.0
    return math.sqrt((1.0 - ab_prev) / (1.0 - ab) * beta)


def reverse_step(
    y_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    rng: torch.Generator | None,
) -> torch.Tensor:
    """One ancestral denoising step y_t -> y_{t-1}.

    `rng=None` forces sigma_t = 0 (deterministic posterior mean); the final
    step t = 1 is deterministic either way.
    """
    sched._check_t(t)
    if y_t.shape != eps_hat.shape:
        raise ValueError(
            f"shape mismatch: {tuple(y_t.shape)} vs {tuple(eps_hat.shape)}"
        )
    beta = float(sched.betas[t - 1])
    alpha = float(sched.alphas[t - 1])
    somab = float(sched.sqrt_one_minus_alpha_bars[t - 1])
    coef = beta / somab if somab > 0.0 else 0.0
    mean = (y_t - coef * eps_hat) / math.sqrt(alpha)
    if t == 1 or rng is None:
        return mean
    sigma = posterior_sigma(t, sched)
    if sigma == 0.0:
        return mean
    z = torch.randn(y_t.shape, generator=rng, dtype=y_t.dtype)
    return mean + sigma * z


def _tile_positions(extent: int, tile: int, stride: int) -> list[int]:
    if extent <= tile:
        return [0]
    positions = list(range(0, extent - tile, stride))
    positions.append(extent - tile)
    return positions


def _ramp_weights(tile: int, overlap: int, at_start: bool, at_end: bool) -> np.ndarray:
    """Per-axis blend profile: 1 in the interior, linear ramp over the
    overlap region on sides that touch a neighbouring tile."""
    w = np.ones(tile, dtype=np.float64)
    if overlap > 0:
        ramp = np.arange(1, overlap + 1, dtype=np.float64) / (overlap + 1)
        if not at_start:
            w[:overlap] = ramp
        if not at_end:
            w[-overlap:] = ramp[::-1]
    return w


def _denoise_tile(
    cond_tile: torch.Tensor,
    model: PromptDenoiser,
    sched: NoiseSchedule,
    seed: int,
    tile_index: int,
    stride: int,
) -> torch.Tensor:
    rng = torch_generator(seed, tile_index)
    y = torch.randn(cond_tile.shape, generator=rng, dtype=cond_tile.dtype)
    steps = list(range(sched.T, 0, -stride))
    if steps[-1] != 1:
        steps.append(1)
    with torch.no_grad():
        for t in steps:
            eps_hat = model(y, cond_tile, t)
            if not torch.isfinite(eps_hat).all():
                raise NumericError(
                    f"non-finite denoiser output at tile {tile_index}, t={t}"
                )
            y = reverse_step(y, eps_hat, t, sched, rng)
    return y


def restore(
    x_degraded: torch.Tensor,
    model: PromptDenoiser,
    sched: NoiseSchedule,
    seed: int,
    tile: int = 128,
    overlap: int = 16,
    timestep_stride: int = 1,
    threads: int = 1,
) -> torch.Tensor:
    """Restore a degraded image (3, H, W) in [0, 1]; returns same in [0, 1].

    Images smaller than the tile are reflect-padded and cropped back. The
    per-pixel blend weights over overlapping tiles sum to 1, and a fixed
    seed gives a bit-identical result regardless of `threads`.
    """
    d = model.cfg.downsample_factor
    if tile % d:
        raise ValueError(f"tile must be divisible by {d}, got {tile}")
    if not 0 <= overlap < tile / 2:
        raise ValueError(f"overlap must be in [0, tile/2), got {overlap}")
    if timestep_stride < 1:
        raise ValueError("timestep_stride must be >= 1")
    if x_degraded.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got {tuple(x_degraded.shape)}")

    h, w = x_degraded.shape[-2:]
    cond = to_signed_unit(x_degraded.to(torch.float32))
    pad_h, pad_w = max(0, tile - h), max(0, tile - w)
    if pad_h or pad_w:
        padded = np.pad(
            cond.numpy(), ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect"
        )
        cond = torch.from_numpy(padded)
    ph, pw = cond.shape[-2:]

    stride = tile - overlap
    ys = _tile_positions(ph, tile, stride)
    xs = _tile_positions(pw, tile, stride)
    tiles = [(iy, ix) for iy in ys for ix in xs]

    def job(index: int) -> np.ndarray:
        iy, ix = tiles[index]
        cond_tile = cond[:, iy: iy + tile, ix: ix + tile]
        out = _denoise_tile(cond_tile, model, sched, seed, index, timestep_stride)
        return out.numpy().astype(np.float64)

    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(len(tiles))))
    else:
        results = [job(i) for i in range(len(tiles))]

    acc = np.zeros((cond.shape[0], ph, pw), dtype=np.float64)
    wsum = np.zeros((ph, pw), dtype=np.float64)
    for (iy, ix), out in zip(tiles, results):
        wy = _ramp_weights(tile, overlap, iy == 0, iy + tile == ph)
        wx = _ramp_weights(tile, overlap, ix == 0, ix + tile == pw)
        weight = np.outer(wy, wx)
        acc[:, iy: iy + tile, ix: ix + tile] += weight * out
        wsum[iy: iy + tile, ix: ix + tile] += weight
    blended = acc / wsum
    blended = blended[:, :h, :w]
    signed = np.clip(blended, -1.0, 1.0)
    return from_signed_unit(torch.from_numpy(signed))
