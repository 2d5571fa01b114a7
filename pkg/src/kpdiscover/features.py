"""Heatmap-derived keypoint features and generic trajectory features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class HeatmapFeatures:
    confidence: float
    cov: np.ndarray  # (2, 2) symmetric [[var_x, cov_xy], [cov_xy, var_y]]


def _grid(n: int) -> np.ndarray:
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def heatmap_moments(
    prob_map: np.ndarray,
    keypoint,
    raw_map: np.ndarray | None = None,
    confidence_mode: str = "sigmoid",
) -> HeatmapFeatures:
    """Confidence and second moments of a heatmap about a keypoint.

    prob_map must be non-negative with positive sum; it is renormalized and
    treated as a probability distribution over cells. Moments are taken on
    the normalized coordinate grid about (u, v) = keypoint.

    Confidence is the sigmoid of the raw masked heatmap's maximum when
    raw_map is given (confidence_mode="raw" keeps the unsquashed maximum);
    without raw_map it is the maximum of prob_map before renormalization.
    """
    m = np.asarray(prob_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {m.shape}")
    if (m < 0).any():
        raise ValueError("map has negative values; not normalizable")
    total = m.sum()
    if total <= 0:
        raise ValueError("all-zero map; moments undefined")
    p = m / total

    u, v = float(keypoint[0]), float(keypoint[1])
    gx = _grid(m.shape[1])[None, :]
    gy = _grid(m.shape[0])[:, None]
    var_x = float((p * (gx - u) ** 2).sum())
    var_y = float((p * (gy - v) ** 2).sum())
    cov_xy = float((p * (gx - u) * (gy - v)).sum())

    if raw_map is not None:
        peak = float(np.asarray(raw_map).max())
        if confidence_mode == "sigmoid":
            confidence = float(1.0 / (1.0 + np.exp(-peak)))
        elif confidence_mode == "raw":
            confidence = peak
        else:
            raise ValueError(f"unknown confidence_mode: {confidence_mode!r}")
    else:
        confidence = float(m.max())

    return HeatmapFeatures(
        confidence=confidence,
        cov=np.array([[var_x, cov_xy], [cov_xy, var_y]]),
    )


@dataclass
class TrajectoryFeatures:
    speed: np.ndarray  # (F, N, K) units per frame
    acceleration: np.ndarray  # (F, N, K) units per frame^2
    distances: np.ndarray  # (F, NK, NK) pairwise, within and across agents
    angles: np.ndarray  # (F, NK, NK) atan2(dy, dx), y-axis down, in (-pi, pi]


def trajectory_features(keypoints, fps_gap: int = 1) -> TrajectoryFeatures:
    """Speed, acceleration, and pairwise distance/angle over a track.

    keypoints: (F, N, K, 2) array, or a list of KeypointSet-like objects
    with a .points attribute. fps_gap rescales differences to per-frame
    units when the series was sampled every fps_gap frames. Boundary frames
    are padded by repetition.
    """
    if hasattr(keypoints, "__len__") and len(keypoints) and hasattr(keypoints[0], "points"):
        pts = np.stack([ks.points for ks in keypoints])
    else:
        pts = np.asarray(keypoints, dtype=np.float64)
    if pts.ndim != 4 or pts.shape[-1] != 2:
        raise ValueError(f"expected (F, N, K, 2) keypoints, got shape {pts.shape}")
    f = pts.shape[0]
    if f < 2:
        raise ValueError("need at least 2 frames for trajectory features")
    if fps_gap < 1:
        raise ValueError("fps_gap must be >= 1")

    vel = np.diff(pts, axis=0) / fps_gap  # (F-1, N, K, 2)
    speed = np.linalg.norm(vel, axis=-1)
    speed = np.concatenate([speed[:1], speed], axis=0)  # repeat first

    if f >= 3:
        acc = (pts[2:] - 2 * pts[1:-1] + pts[:-2]) / fps_gap**2
        accel = np.linalg.norm(acc, axis=-1)
        accel = np.concatenate([accel[:1], accel, accel[-1:]], axis=0)
    else:
        accel = np.zeros_like(speed)

    flat = pts.reshape(f, -1, 2)  # (F, NK, 2)
    delta = flat[:, None, :, :] - flat[:, :, None, :]  # [t, i, j] = p_j - p_i
    distances = np.linalg.norm(delta, axis=-1)
    angles = np.arctan2(delta[..., 1], delta[..., 0])
    # keep angles in (-pi, pi]: atan2 returns -pi for some collinear pairs
    angles[angles <= -np.pi] = np.pi

    return TrajectoryFeatures(
        speed=speed, acceleration=accel, distances=distances, angles=angles
    )


def feature_table(
    traj: TrajectoryFeatures,
    confidence: np.ndarray | None = None,
    covariance: np.ndarray | None = None,
) -> tuple[np.ndarray, list[str]]:
    """Flatten trajectory (and optional heatmap) features per frame.

    Returns (F, D) values plus one header name per column, for the behavior
    classifier's input file.
    """
    f, n, k = traj.speed.shape
    nk = n * k
    cols = []
    names = []

    def tag(flat_idx: int) -> str:
        return f"a{flat_idx // k}k{flat_idx % k}"

    for a in range(n):
        for j in range(k):
            cols.append(traj.speed[:, a, j])
            names.append(f"speed_a{a}k{j}")
    for a in range(n):
        for j in range(k):
            cols.append(traj.acceleration[:, a, j])
            names.append(f"accel_a{a}k{j}")
    for i in range(nk):
        for j in range(i + 1, nk):
            cols.append(traj.distances[:, i, j])
            names.append(f"dist_{tag(i)}_{tag(j)}")
    for i in range(nk):
        for j in range(i + 1, nk):
            cols.append(traj.angles[:, i, j])
            names.append(f"angle_{tag(i)}_{tag(j)}")

    if confidence is not None:
        conf = np.asarray(confidence).reshape(f, -1)
        for c in range(conf.shape[1]):
            cols.append(conf[:, c])
            names.append(f"conf_{tag(c)}")
    if covariance is not None:
        cov = np.asarray(covariance).reshape(f, -1, 2, 2)
        for c in range(cov.shape[1]):
            for label, (r, s) in (("xx", (0, 0)), ("xy", (0, 1)), ("yy", (1, 1))):
                cols.append(cov[:, c, r, s])
                names.append(f"cov{label}_{tag(c)}")

    return np.stack(cols, axis=1), names
