"""Spatiotemporal difference targets: SSIM dissimilarity, absolute, raw."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import correlate1d

from .video_io import Frame, FramePair

SSIM_DISSIMILARITY = "ssim_dissimilarity"
ABSOLUTE = "absolute"
RAW = "raw"
TARGET_KINDS = (SSIM_DISSIMILARITY, ABSOLUTE, RAW)

# Standard stabilizers for dynamic range L=1.
DEFAULT_C1 = 0.01**2
DEFAULT_C2 = 0.03**2


@dataclass
class DifferenceImage:
    """Single-channel reconstruction target for one frame pair."""

    values: np.ndarray  # (H, W) float32
    kind: str


def to_gray(pixels: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an (H, W, 3) RGB array; passthrough if already 2D."""
    if pixels.ndim == 2:
        return pixels.astype(np.float64)
    return (
        0.299 * pixels[..., 0] + 0.587 * pixels[..., 1] + 0.114 * pixels[..., 2]
    ).astype(np.float64)


def gaussian_window(window: int, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1D Gaussian taps of odd length `window`."""
    half = window // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _local_mean(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable windowed average with reflect padding
    out = correlate1d(img, taps, axis=0, mode="reflect")
    return correlate1d(out, taps, axis=1, mode="reflect")


def ssim_map(
    a,
    b,
    window: int = 11,
    c1: float = DEFAULT_C1,
    c2: float = DEFAULT_C2,
    sigma: float = 1.5,
) -> np.ndarray:
    """Per-pixel structural similarity of two frames, computed on grayscale.

    Each output pixel is the similarity of the Gaussian-weighted patches of
    size `window` centered there (reflect padding at borders). Values lie in
    [-1, 1]; identical inputs give 1 everywhere.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    ga = to_gray(a.pixels if isinstance(a, Frame) else np.asarray(a))
    gb = to_gray(b.pixels if isinstance(b, Frame) else np.asarray(b))
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch: {ga.shape} vs {gb.shape}")

    taps = gaussian_window(window, sigma)
    mu_a = _local_mean(ga, taps)
    mu_b = _local_mean(gb, taps)
    var_a = _local_mean(ga * ga, taps) - mu_a**2
    var_b = _local_mean(gb * gb, taps) - mu_b**2
    cov = _local_mean(ga * gb, taps) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    out = num / den
    # guard against float jitter just over the analytic bounds
    return np.clip(out, -1.0, 1.0)


def difference_target(pair: FramePair, kind: str = SSIM_DISSIMILARITY, **ssim_kwargs) -> DifferenceImage:
    """Compute the reconstruction target for a frame pair.

    ssim_dissimilarity: 1 - ssim_map  (range [0, 2])
    absolute:           |future - reference| on grayscale  (range [0, 1])
    raw:                future - reference on grayscale    (range [-1, 1])
    """
    if kind == SSIM_DISSIMILARITY:
        values = 1.0 - ssim_map(pair.reference, pair.future, **ssim_kwargs)
    elif kind == ABSOLUTE:
        values = np.abs(to_gray(pair.future.pixels) - to_gray(pair.reference.pixels))
    elif kind == RAW:
        values = to_gray(pair.future.pixels) - to_gray(pair.reference.pixels)
    else:
        raise ValueError(f"unknown target kind: {kind!r} (expected one of {TARGET_KINDS})")
    return DifferenceImage(values=values.astype(np.float32), kind=kind)


def save_target_png(diff: DifferenceImage, path: str) -> None:
    """Dump a target map as an 8-bit PNG for inspection."""
    if diff.kind == RAW:
        img = diff.values * 127.5 + 127.5
    elif diff.kind == SSIM_DISSIMILARITY:
        img = diff.values * 127.5
    else:
        img = diff.values * 255.0
    cv2.imwrite(path, np.clip(img, 0, 255).astype(np.uint8))
