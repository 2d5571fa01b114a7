import numpy as np
import pytest

from kpdiscover.video_io import SceneConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_scene():
    """20-frame 2-agent scene at 128px shared by read-only tests."""
    config = SceneConfig(
        num_agents=2, num_frames=20, resolution=128, seed=7,
        major_axis=(14.0, 17.0), minor_axis=(8.0, 10.0), speed=2.0,
    )
    frames, scene = generate_synthetic(config)
    return frames, scene


def disc_mask(h, w, cx, cy, r):
    ys, xs = np.mgrid[0:h, 0:w]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2


def rect_mask(h, w, x0, y0, x1, y1):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m
