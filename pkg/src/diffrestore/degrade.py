"""Synthetic degradations for building paired clean/degraded training data.

All generators work in the 8-bit [0, 255] value domain (so noise sigmas
match the usual convention), preserve shape, and are deterministic given
their inputs and seed.
"""

from __future__ import annotations

import numpy as np


def add_gaussian_noise(
    img: np.ndarray, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """clamp(img + sigma * z, 0, 255) with z standard normal per element."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    img = np.asarray(img, np.float64)
    noisy = img + sigma * rng.standard_normal(img.shape)
    return np.clip(noisy, 0.0, 255.0)


def _trace_line(
    y0: float, x0: float, dy: float, dx: float, length: float
) -> list[tuple[int, int]]:
    """4-connected grid cells crossed by a segment of the given length.

    A 4-connected walk visits |Dy| + |Dx| + 1 >= length cells, so a streak
    of nominal length L always lights at least L pixels whatever its angle.
    """
    cells = [(int(np.floor(y0)), int(np.floor(x0)))]
    y1, x1 = y0 + dy * length, x0 + dx * length
    iy, ix = cells[0]
    step_y = 1 if dy > 0 else -1
    step_x = 1 if dx > 0 else -1
    ny = abs(int(np.floor(y1)) - iy)
    nx = abs(int(np.floor(x1)) - ix)
    # crossing parameters of the next horizontal / vertical grid line
    t_y = ((iy + (step_y > 0)) - y0) / dy if dy != 0 else np.inf
    t_x = ((ix + (step_x > 0)) - x0) / dx if dx != 0 else np.inf
    dt_y = abs(1.0 / dy) if dy != 0 else np.inf
    dt_x = abs(1.0 / dx) if dx != 0 else np.inf
    for _ in range(ny + nx):
        if t_y <= t_x:
            iy += step_y
            t_y += dt_y
        else:
            ix += step_x
            t_x += dt_x
        cells.append((iy, ix))
    return cells


def synth_rain(
    img: np.ndarray,
    streak_count: int,
    angle_deg: float,
    length_px: int,
    intensity: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Screen-blend oriented, motion-blurred white rain streaks onto img.

    Streak origins are uniform over the image; each streak is a line of
    `length_px` at `angle_deg` from vertical, stamped at 255*intensity and
    softened with a short blur along its own direction.
    """
    if streak_count < 0:
        raise ValueError("streak_count must be >= 0")
    if length_px < 1:
        raise ValueError(f"length_px must be >= 1, got {length_px}")
    if not (0.0 < intensity <= 1.0):
        raise ValueError(f"intensity must be in (0, 1], got {intensity}")
    img = np.asarray(img, np.float64)
    if streak_count == 0:
        return img.copy()

    h, w = img.shape[-2:]
    theta = np.deg2rad(angle_deg)
    dy, dx = float(np.cos(theta)), float(np.sin(theta))
    layer = np.zeros((h, w), dtype=np.float64)
    for _ in range(streak_count):
        y0 = float(rng.uniform(0, h))
        x0 = float(rng.uniform(0, w))
        for iy, ix in _trace_line(y0, x0, dy, dx, float(length_px)):
            if 0 <= iy < h and 0 <= ix < w:
                layer[iy, ix] = 255.0 * intensity

    # motion blur: average along the streak direction, keeping the centre tap
    blurred = layer.copy()
    taps = 1
    for k in (-2, -1, 1, 2):
        oy, ox = round(k * dy), round(k * dx)
        shifted = np.zeros_like(layer)
        ys = slice(max(0, oy), h + min(0, oy))
        yd = slice(max(0, -oy), h + min(0, -oy))
        xs = slice(max(0, ox), w + min(0, ox))
        xd = slice(max(0, -ox), w + min(0, -ox))
        shifted[yd, xd] = layer[ys, xs]
        blurred += shifted
        taps += 1
    layer = np.clip(blurred / taps * 1.5, 0.0, 255.0 * intensity)

    out = 255.0 - (255.0 - img) * (255.0 - layer) / 255.0
    return np.clip(out, 0.0, 255.0)


def synth_underwater(
    img: np.ndarray,
    attenuation: tuple[float, float, float],
    veil_color: tuple[float, float, float],
    veil_strength: float,
) -> np.ndarray:
    """Per-channel light attenuation plus an additive veiling colour cast:

        out_c = attenuation_c * img_c + veil_strength * veil_color_c

    clamped to [0, 255]. attenuation_c in (0, 1], veil_strength in [0, 1),
    veil_color in the 8-bit domain.
    """
    att = np.asarray(attenuation, np.float64)
    veil = np.asarray(veil_color, np.float64)
    if att.shape != (3,) or np.any(att <= 0.0) or np.any(att > 1.0):
        raise ValueError(f"attenuation must be 3 values in (0, 1], got {attenuation}")
    if veil.shape != (3,) or np.any(veil < 0.0) or np.any(veil > 255.0):
        raise ValueError(f"veil_color must be 3 values in [0, 255], got {veil_color}")
    if not (0.0 <= veil_strength < 1.0):
        raise ValueError(f"veil_strength must be in [0, 1), got {veil_strength}")
    img = np.asarray(img, np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {img.shape}")
    out = att[:, None, None] * img + veil_strength * veil[:, None, None]
    return np.clip(out, 0.0, 255.0)
