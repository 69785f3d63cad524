"""Image quality metrics.

Full-reference: PSNR and single-scale SSIM (computed on BT.601 luma), both
in the 8-bit [0, 255] value domain. No-reference underwater metrics: UIQM
(colorfulness + sharpness + contrast, 8-bit domain) and UCIQE (CIELab chroma
dispersion, luminance contrast and saturation, [0, 1] sRGB domain).

All functions are pure and deterministic. Images are channel-first
(C, H, W) or single-channel (H, W) numpy arrays.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601

UIQM_COEFFS = (0.0282, 0.2953, 3.5753)        # (uicm, uism, uiconm)
UICM_COEFFS = (-0.0268, 0.1586)
UIQM_TRIM_ALPHA = 0.1                          # trimmed fraction per tail
UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)        # (sigma_c, con_l, mu_s)
EME_BLOCK = 8

# sRGB -> XYZ (D65); whitepoint taken as the row sums so that achromatic
# inputs land exactly on the white axis.
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITEPOINT = _SRGB_TO_XYZ.sum(axis=1)


@dataclass
class MetricReport:
    """Per-image metric values, with the UIQM/UCIQE subscores broken out."""

    psnr: float
    ssim: float
    uiqm: float
    uicm: float
    uism: float
    uiconm: float
    uciqe: float
    sigma_chroma: float
    contrast_l: float
    mean_saturation: float


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for 8-bit-domain images.

    Identical inputs yield the +inf sentinel.
    """
    _check_pair(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(255.0**2 / mse)


def _to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    if img.ndim == 3 and img.shape[0] == 3:
        r, g, b = img
        wr, wg, wb = LUMA_WEIGHTS
        return wr * r + wg * g + wb * b
    raise ValueError(f"expected (H,W), (1,H,W) or (3,H,W) image, got {img.shape}")


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean single-scale SSIM over an 11x11 Gaussian window (sigma 1.5).

    Color inputs are converted to BT.601 luma first; stabilizing constants
    are C1=(0.01*255)^2, C2=(0.03*255)^2. Result is in [-1, 1].
    """
    _check_pair(a, b)
    x = _to_luma(a)
    y = _to_luma(b)
    if min(x.shape) < 11:
        raise ValueError(f"image {x.shape} smaller than the 11x11 SSIM window")
    win = _gaussian_window()
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2

    mu_x = convolve2d(x, win, mode="valid")
    mu_y = convolve2d(y, win, mode="valid")
    sig_xx = convolve2d(x * x, win, mode="valid") - mu_x * mu_x
    sig_yy = convolve2d(y * y, win, mode="valid") - mu_y * mu_y
    sig_xy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sig_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sig_xx + sig_yy + c2)
    return float(np.mean(num / den))


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] (3,H,W) -> CIELab (3,H,W): L in [0,100], a/b signed.

    Standard sRGB decoding, D65 XYZ, CIELab. Out-of-range inputs are clamped
    (with a warning reporting how many values were affected). Achromatic
    inputs map to a = b = 0 exactly: the matrix path leaves ~1e-14 float
    dust on the chroma axes, which is snapped to zero (real chroma from
    8-bit inputs is > 1e-3).
    """
    img = np.asarray(img, np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) sRGB image, got {img.shape}")
    n_clamped = int(np.count_nonzero((img < 0.0) | (img > 1.0)))
    if n_clamped:
        warnings.warn(
            f"rgb_to_lab: {n_clamped} values outside [0,1] were clamped",
            stacklevel=2,
        )
        img = np.clip(img, 0.0, 1.0)

    srgb = img.reshape(3, -1)
    linear = np.where(
        srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4
    )
    xyz = (_SRGB_TO_XYZ @ linear) / _WHITEPOINT[:, None]

    delta = 6.0 / 29.0
    f = np.where(
        xyz > delta**3, np.cbrt(xyz), xyz / (3.0 * delta**2) + 4.0 / 29.0
    )
    fx, fy, fz = f
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    a = np.where(np.abs(a) < 1e-8, 0.0, a)
    b = np.where(np.abs(b) < 1e-8, 0.0, b)
    h, w = img.shape[1:]
    return np.stack([L, a, b]).reshape(3, h, w)


def uciqe(img: np.ndarray) -> tuple[float, float, float, float]:
    """UCIQE and its subscores for an sRGB image in [0,1].

    With Lab scaled by 1/100:
        sigma_c = population std of chroma sqrt(a^2 + b^2)
        con_l   = Q99(L) - Q01(L)   (linear-interpolated quantiles)
        mu_s    = mean of chroma / (L + 1e-6)
        UCIQE   = 0.4680*sigma_c + 0.2745*con_l + 0.2576*mu_s

    Returns (uciqe, sigma_chroma, contrast_l, mean_saturation).
    """
    img = np.asarray(img, np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"UCIQE needs a 3-channel image, got {img.shape}")
    L, a, b = rgb_to_lab(img) / 100.0
    chroma = np.sqrt(a**2 + b**2)
    sigma_c = float(np.std(chroma))
    q01, q99 = np.quantile(L, [0.01, 0.99], method="linear")
    con_l = float(q99 - q01)
    mu_s = float(np.mean(chroma / (L + 1e-6)))
    c1, c2, c3 = UCIQE_COEFFS
    return c1 * sigma_c + c2 * con_l + c3 * mu_s, sigma_c, con_l, mu_s


def _trimmed_mean(x: np.ndarray, alpha: float = UIQM_TRIM_ALPHA) -> float:
    """Mean after discarding the floor(alpha*n) smallest and largest values."""
    x = np.sort(x, kind="stable")
    k = int(alpha * x.size)
    return float(np.mean(x[k: x.size - k]))


def _sobel_magnitude(c: np.ndarray) -> np.ndarray:
    """3x3 Sobel gradient magnitude with edge-replicated borders."""
    p = np.pad(c, 1, mode="edge")
    gx = (
        (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    return np.sqrt(gx**2 + gy**2)


def _blocks(x: np.ndarray, size: int = EME_BLOCK) -> np.ndarray:
    """(n_blocks, size, size) view of complete blocks; partial edges dropped."""
    h, w = x.shape
    if h < size or w < size:
        raise ValueError(f"image {x.shape} smaller than one {size}x{size} block")
    hb, wb = h // size, w // size
    return (
        x[: hb * size, : wb * size]
        .reshape(hb, size, wb, size)
        .swapaxes(1, 2)
        .reshape(hb * wb, size, size)
    )


def _eme(x: np.ndarray) -> float:
    """(2/K) * sum over blocks of ln(blockmax/blockmin); blocks where the
    minimum is 0 or max == min contribute 0.

    The zero-minimum rule carries a 1e-9 relative guard: gradient responses
    over flat regions cancel only up to summation-order float dust, and
    ln(max/dust) would otherwise blow up on dust that isn't exactly 0.
    """
    blocks = _blocks(x)
    bmax = blocks.max(axis=(1, 2))
    bmin = blocks.min(axis=(1, 2))
    ok = (bmin > 1e-9 * bmax) & (bmax > bmin)
    total = float(np.sum(np.log(bmax[ok] / bmin[ok])))
    return 2.0 / blocks.shape[0] * total


def uiqm(img: np.ndarray) -> tuple[float, float, float, float]:
    """UIQM and its subscores for an 8-bit-domain image (3,H,W), H,W >= 8.

        UICM   = -0.0268*sqrt(mu_RG^2 + mu_YB^2) + 0.1586*sqrt(s_RG^2 + s_YB^2)
                 with RG = R-G, YB = (R+G)/2 - B, mu the 0.1-per-tail
                 alpha-trimmed mean and s^2 the second moment about it
        UISM   = sum_c lambda_c * EME(sobel_magnitude(c) * c), BT.601 weights
        UIConM = (1/K) * sum over 8x8 blocks of the channel-mean intensity
                 image of w*ln(w), w = (max-min)/(max+min); w = 0 contributes 0
        UIQM   = 0.0282*UICM + 0.2953*UISM + 3.5753*UIConM

    Returns (uiqm, uicm, uism, uiconm).
    """
    img = np.asarray(img, np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"UIQM needs a 3-channel image, got {img.shape}")
    if min(img.shape[1:]) < EME_BLOCK:
        raise ValueError(f"image {img.shape} smaller than one 8x8 block")
    r, g, b = img

    rg = (r - g).ravel()
    yb = ((r + g) / 2.0 - b).ravel()
    mu_rg = _trimmed_mean(rg)
    mu_yb = _trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    k1, k2 = UICM_COEFFS
    uicm = k1 * np.sqrt(mu_rg**2 + mu_yb**2) + k2 * np.sqrt(var_rg + var_yb)

    uism = sum(
        lam * _eme(_sobel_magnitude(c) * c)
        for lam, c in zip(LUMA_WEIGHTS, (r, g, b))
    )

    intensity = (r + g + b) / 3.0
    blocks = _blocks(intensity)
    bmax = blocks.max(axis=(1, 2))
    bmin = blocks.min(axis=(1, 2))
    spread = bmax - bmin
    total = bmax + bmin
    w = np.divide(spread, total, out=np.zeros_like(spread), where=total > 0.0)
    ok = w > 0.0
    uiconm = float(np.sum(w[ok] * np.log(w[ok]))) / blocks.shape[0]

    c1, c2, c3 = UIQM_COEFFS
    return c1 * uicm + c2 * uism + c3 * uiconm, float(uicm), float(uism), float(uiconm)


def evaluate_pair(reference: np.ndarray, test: np.ndarray) -> MetricReport:
    """Full metric report: PSNR/SSIM of `test` against `reference` plus the
    no-reference scores of `test`. Both images in [0,1], channel-first."""
    ref8 = np.asarray(reference, np.float64) * 255.0
    test8 = np.asarray(test, np.float64) * 255.0
    test_rgb = test if test.shape[0] == 3 else np.repeat(test, 3, axis=0)
    test_rgb8 = test8 if test8.shape[0] == 3 else np.repeat(test8, 3, axis=0)
    u, uicm, uism, uiconm = uiqm(test_rgb8)
    q, sig_c, con_l, mu_s = uciqe(test_rgb)
    return MetricReport(
        psnr=psnr(ref8, test8),
        ssim=ssim(ref8, test8),
        uiqm=u,
        uicm=uicm,
        uism=uism,
        uiconm=uiconm,
        uciqe=q,
        sigma_chroma=sig_c,
        contrast_l=con_l,
        mean_saturation=mu_s,
    )
