import numpy as np
import pytest

from kpdiscover.features import (
    feature_table,
    heatmap_moments,
    trajectory_features,
)


def _grid(n):
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def _gaussian_map(n, cx, cy, sx, sy, rho=0.0):
    gx = _grid(n)[None, :]
    gy = _grid(n)[:, None]
    zx = (gx - cx) / sx
    zy = (gy - cy) / sy
    return np.exp(-(zx**2 - 2 * rho * zx * zy + zy**2) / (2 * (1 - rho**2)))


class TestHeatmapMoments:
    def test_symmetric_gaussian_zero_cross_term(self):
        m = _gaussian_map(64, 0.0, 0.0, 0.2, 0.2)
        feats = heatmap_moments(m, (0.0, 0.0))
        assert abs(feats.cov[0, 1]) < 1e-9
        assert feats.cov[0, 0] == pytest.approx(feats.cov[1, 1], rel=1e-6)

    def test_one_hot_zero_spread(self):
        m = np.zeros((32, 32))
        m[10, 20] = 1.0
        g = _grid(32)
        feats = heatmap_moments(m, (g[20], g[10]))
        assert np.allclose(feats.cov, 0.0)

    def test_anisotropic_matches_double_sum_oracle(self):
        sx, sy, cx, cy = 0.2, 0.1, 0.15, -0.1
        m = _gaussian_map(64, cx, cy, sx, sy)
        feats = heatmap_moments(m, (cx, cy))

        g = _grid(64)
        p = m / m.sum()
        var_x = var_y = cov_xy = 0.0
        for iy in range(64):
            for ix in range(64):
                var_x += (g[ix] - cx) ** 2 * p[iy, ix]
                var_y += (g[iy] - cy) ** 2 * p[iy, ix]
                cov_xy += (g[ix] - cx) * (g[iy] - cy) * p[iy, ix]
        assert feats.cov[0, 0] == pytest.approx(var_x, abs=1e-6)
        assert feats.cov[1, 1] == pytest.approx(var_y, abs=1e-6)
        assert feats.cov[0, 1] == pytest.approx(cov_xy, abs=1e-6)
        # the discretized spread tracks the analytic parameters
        assert feats.cov[0, 0] == pytest.approx(sx**2, rel=0.05)
        assert feats.cov[1, 1] == pytest.approx(sy**2, rel=0.05)

    @pytest.mark.parametrize("seed", range(100))
    def test_covariance_psd(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.random((16, 16)) ** 3
        kp = rng.uniform(-1, 1, 2)
        feats = heatmap_moments(m, kp)
        eigvals = np.linalg.eigvalsh(feats.cov)
        assert eigvals.min() >= -1e-10
        assert feats.cov[0, 1] == feats.cov[1, 0]
        # Cauchy-Schwarz bound on the cross term
        assert abs(feats.cov[0, 1]) <= np.sqrt(
            feats.cov[0, 0] * feats.cov[1, 1]
        ) + 1e-12

    def test_all_zero_errors(self):
        with pytest.raises(ValueError, match="zero"):
            heatmap_moments(np.zeros((8, 8)), (0.0, 0.0))

    def test_negative_errors(self):
        m = np.zeros((8, 8))
        m[2, 2] = -1.0
        with pytest.raises(ValueError, match="negative"):
            heatmap_moments(m, (0.0, 0.0))

    def test_confidence_modes(self):
        m = _gaussian_map(16, 0, 0, 0.3, 0.3)
        raw = np.full((16, 16), -3.0)
        raw[8, 8] = 2.0
        sig = heatmap_moments(m, (0, 0), raw_map=raw)
        assert sig.confidence == pytest.approx(1 / (1 + np.exp(-2.0)))
        plain = heatmap_moments(m, (0, 0), raw_map=raw, confidence_mode="raw")
        assert plain.confidence == pytest.approx(2.0)
        no_raw = heatmap_moments(0.5 * m, (0, 0))
        assert no_raw.confidence == pytest.approx(0.5 * m.max())

    def test_confidence_monotone_in_peak(self):
        m = _gaussian_map(16, 0, 0, 0.3, 0.3)
        lo = heatmap_moments(m, (0, 0), raw_map=np.full((4, 4), 1.0))
        hi = heatmap_moments(m, (0, 0), raw_map=np.full((4, 4), 3.0))
        assert hi.confidence >= lo.confidence


class TestTrajectoryFeatures:
    def test_stationary(self):
        pts = np.tile(np.array([[[0.1, 0.2], [0.3, 0.4]]]), (5, 1, 1, 1))
        traj = trajectory_features(pts)
        assert np.allclose(traj.speed, 0.0)
        assert np.allclose(traj.acceleration, 0.0)

    def test_constant_velocity(self):
        f = 6
        pts = np.zeros((f, 1, 1, 2))
        pts[:, 0, 0, 0] = 2.0 * np.arange(f)
        traj = trajectory_features(pts)
        assert np.allclose(traj.speed, 2.0)
        assert np.allclose(traj.acceleration[1:-1], 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(0, 1, (5, 2, 3, 2))
        traj = trajectory_features(pts)

        for t in range(1, 5):
            for n in range(2):
                for k in range(3):
                    d = np.sqrt(((pts[t, n, k] - pts[t - 1, n, k]) ** 2).sum())
                    assert traj.speed[t, n, k] == pytest.approx(d)
        assert np.allclose(traj.speed[0], traj.speed[1])
        for t in range(1, 4):
            for n in range(2):
                for k in range(3):
                    a = pts[t + 1, n, k] - 2 * pts[t, n, k] + pts[t - 1, n, k]
                    assert traj.acceleration[t, n, k] == pytest.approx(
                        np.sqrt((a**2).sum())
                    )
        flat = pts.reshape(5, 6, 2)
        for i in range(6):
            for j in range(6):
                d = np.sqrt(((flat[2, j] - flat[2, i]) ** 2).sum())
                assert traj.distances[2, i, j] == pytest.approx(d)

    def test_distance_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(0, 1, (4, 2, 2, 2))
        traj = trajectory_features(pts)
        assert np.allclose(traj.distances, traj.distances.transpose(0, 2, 1))
        assert np.allclose(np.diagonal(traj.distances, axis1=1, axis2=2), 0.0)

    def test_angle_antisymmetry(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(0, 1, (3, 1, 4, 2))
        traj = trajectory_features(pts)
        a = traj.angles
        for t in range(3):
            for i in range(4):
                for j in range(4):
                    if i == j:
                        continue
                    diff = (a[t, i, j] - a[t, j, i]) % (2 * np.pi)
                    assert diff == pytest.approx(np.pi, abs=1e-9)
        assert (a > -np.pi).all() and (a <= np.pi).all()

    def test_fps_gap_scaling(self):
        pts = np.zeros((4, 1, 1, 2))
        pts[:, 0, 0, 0] = 6.0 * np.arange(4)
        traj = trajectory_features(pts, fps_gap=3)
        assert np.allclose(traj.speed, 2.0)

    def test_too_few_frames(self):
        with pytest.raises(ValueError, match="2 frames"):
            trajectory_features(np.zeros((1, 1, 1, 2)))

    def test_two_frames_zero_accel(self):
        pts = np.zeros((2, 1, 1, 2))
        pts[1, 0, 0, 0] = 1.0
        traj = trajectory_features(pts)
        assert np.allclose(traj.acceleration, 0.0)
        assert np.allclose(traj.speed, 1.0)


class TestFeatureTable:
    def test_shapes_and_names(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(0, 1, (6, 2, 2, 2))
        traj = trajectory_features(pts)
        conf = rng.random((6, 2, 2))
        cov = rng.random((6, 2, 2, 2, 2))
        table, names = feature_table(traj, confidence=conf, covariance=cov)
        nk = 4
        expected = 2 * nk + 2 * (nk * (nk - 1) // 2) + nk + 3 * nk
        assert table.shape == (6, expected)
        assert len(names) == expected
        assert len(set(names)) == expected
        assert names[0] == "speed_a0k0"
