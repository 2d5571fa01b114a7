import numpy as np
import pytest

from kpdiscover.target import (
    DEFAULT_C1,
    DEFAULT_C2,
    difference_target,
    ssim_map,
    to_gray,
)
from kpdiscover.video_io import Frame, FramePair, SceneConfig, generate_synthetic


def oracle_ssim(a, b, window=11, sigma=1.5, c1=DEFAULT_C1, c2=DEFAULT_C2):
    """Brute-force windowed SSIM: explicit patch loops, symmetric padding."""
    half = window // 2
    kernel = np.zeros((window, window))
    for i in range(window):
        for j in range(window):
            kernel[i, j] = np.exp(-((i - half) ** 2) / (2 * sigma**2)) * np.exp(
                -((j - half) ** 2) / (2 * sigma**2)
            )
    kernel /= kernel.sum()

    pa = np.pad(a, half, mode="symmetric")
    pb = np.pad(b, half, mode="symmetric")
    out = np.zeros_like(a, dtype=np.float64)
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            wa = pa[y : y + window, x : x + window]
            wb = pb[y : y + window, x : x + window]
            mu_a = (kernel * wa).sum()
            mu_b = (kernel * wb).sum()
            var_a = (kernel * wa * wa).sum() - mu_a**2
            var_b = (kernel * wb * wb).sum() - mu_b**2
            cov = (kernel * wa * wb).sum() - mu_a * mu_b
            out[y, x] = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
                (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            )
    return out


def _rand_frame(rng, size=32, index=0):
    return Frame(
        pixels=rng.random((size, size, 3)).astype(np.float32),
        index=index,
        sequence_id="t",
    )


class TestSsimMap:
    def test_identical_frames_give_one(self):
        rng = np.random.default_rng(0)
        f = _rand_frame(rng)
        np.testing.assert_allclose(ssim_map(f, f), 1.0, atol=1e-6)

    def test_identical_constants_give_one(self):
        a = Frame(np.full((16, 16, 3), 0.5, np.float32), 0)
        b = Frame(np.full((16, 16, 3), 0.5, np.float32), 1)
        np.testing.assert_allclose(ssim_map(a, b), 1.0, atol=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = _rand_frame(rng), _rand_frame(rng, index=1)
        np.testing.assert_allclose(ssim_map(a, b), ssim_map(b, a), atol=1e-6)

    def test_range(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            s = ssim_map(_rand_frame(rng), _rand_frame(rng, index=1))
            assert s.min() >= -1.0 and s.max() <= 1.0

    def test_shape_mismatch(self):
        a = Frame(np.zeros((16, 16, 3), np.float32), 0)
        b = Frame(np.zeros((17, 17, 3), np.float32), 1)
        with pytest.raises(ValueError, match="shape"):
            ssim_map(a, b)

    @pytest.mark.parametrize("window", [2, 4, 1])
    def test_bad_window(self, window):
        a = Frame(np.zeros((16, 16, 3), np.float32), 0)
        with pytest.raises(ValueError):
            ssim_map(a, a, window=window)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_bruteforce_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((32, 32))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        np.testing.assert_allclose(ssim_map(a, b), oracle_ssim(a, b), atol=1e-6)

    def test_moved_blob_localized(self):
        # one blob moved; similarity drops inside the moved region only
        base = np.full((64, 64), 0.6)
        a, b = base.copy(), base.copy()
        a[20:30, 10:20] = 0.1
        b[20:30, 20:30] = 0.1
        s = ssim_map(a, b)
        moved = np.zeros_like(a, dtype=bool)
        moved[20:30, 10:30] = True
        assert s[moved].min() < 0.5
        # outside the moved region plus the window's halo the maps agree
        halo = np.zeros_like(moved)
        halo[20 - 6 : 30 + 6, 10 - 6 : 30 + 6] = True
        assert s[~halo].mean() > 0.99


class TestDifferenceTarget:
    def _pair(self, a, b):
        fa = Frame(a.astype(np.float32), 0, "t")
        fb = Frame(b.astype(np.float32), 1, "t")
        return FramePair(reference=fa, future=fb, gap=1)

    def test_identical_ssim_zero(self):
        x = np.random.default_rng(0).random((16, 16, 3))
        d = difference_target(self._pair(x, x), "ssim_dissimilarity")
        np.testing.assert_allclose(d.values, 0.0, atol=1e-6)

    def test_identical_absolute_zero(self):
        x = np.random.default_rng(1).random((16, 16, 3))
        d = difference_target(self._pair(x, x), "absolute")
        assert np.all(d.values == 0)

    def test_black_to_white_raw(self):
        d = difference_target(
            self._pair(np.zeros((8, 8, 3)), np.ones((8, 8, 3))), "raw"
        )
        np.testing.assert_allclose(d.values, 1.0, atol=1e-6)

    def test_ranges(self):
        rng = np.random.default_rng(3)
        pair = self._pair(rng.random((16, 16, 3)), rng.random((16, 16, 3)))
        s = difference_target(pair, "ssim_dissimilarity").values
        assert s.min() >= 0.0 and s.max() <= 2.0
        a = difference_target(pair, "absolute").values
        assert a.min() >= 0.0 and a.max() <= 1.0
        r = difference_target(pair, "raw").values
        assert r.min() >= -1.0 and r.max() <= 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            difference_target(self._pair(np.zeros((8, 8, 3)), np.zeros((8, 8, 3))), "nope")

    def test_static_background_property(self, small_scene):
        frames, scene = small_scene
        pair = FramePair(reference=frames[0], future=frames[6], gap=6)
        d = difference_target(pair, "ssim_dissimilarity").values
        moved = (scene.label_map(0) > 0) | (scene.label_map(6) > 0)
        bg_mean = d[~moved].mean()
        agent_mean = d[moved].mean()
        assert bg_mean < 0.05
        assert agent_mean > 5 * bg_mean
