import numpy as np
import pytest

from handlab import geometry as G
from handlab import volumes as V


def small_grid(center=(0.0, 0.0, 0.0), n=16, extent=0.16):
    return V.VolumeGrid(resolution=n, extent=extent, center=np.asarray(center))


class TestVolumeGrid:
    def test_voxel_size(self):
        grid = V.VolumeGrid(resolution=64, extent=0.4)
        assert grid.voxel_size == pytest.approx(0.4 / 64)

    def test_rejects_tiny_resolution(self):
        with pytest.raises(ValueError):
            V.VolumeGrid(resolution=4)

    def test_voxel_centers_order_is_z_major(self):
        grid = small_grid(n=8, extent=0.08)
        centers = grid.voxel_centers()
        # x varies fastest, then y, then z
        assert centers[1, 0] - centers[0, 0] == pytest.approx(grid.voxel_size)
        assert centers[8, 1] - centers[0, 1] == pytest.approx(grid.voxel_size)
        assert centers[64, 2] - centers[0, 2] == pytest.approx(grid.voxel_size)

    def test_index_to_world_matches_centers(self):
        grid = small_grid(center=(0.1, -0.2, 0.3))
        centers = grid.voxel_centers().reshape(16, 16, 16, 3)
        assert np.allclose(grid.index_to_world(3, 7, 11), centers[3, 7, 11])


class TestCenterGrid:
    def test_exact_centering(self, rig):
        target = np.array([0.01, -0.02, 0.005])
        uv = [G.project(cam, target) for cam in rig]
        grid = V.center_grid(rig, uv)
        assert np.linalg.norm(grid.center - target) < 1e-9
        assert grid.resolution == 64
        assert grid.extent == pytest.approx(0.4)

    def test_needs_two_views(self, rig):
        with pytest.raises(G.DegenerateGeometryError):
            V.center_grid([rig[0]], [(10.0, 10.0)])

    def test_noisy_centers_under_5mm(self, rig):
        # Monte-Carlo oracle: mean center error under +-2 px uniform noise
        target = np.array([0.0, 0.01, -0.02])
        uv = np.array([G.project(cam, target) for cam in rig])
        errors = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            noisy = uv + rng.uniform(-2.0, 2.0, uv.shape)
            grid = V.center_grid(rig, noisy)
            errors.append(np.linalg.norm(grid.center - target))
        assert np.mean(errors) < 0.005


class TestMakeTargets:
    def test_peak_at_voxel_center_is_one(self):
        grid = small_grid()
        p = grid.index_to_world(4, 9, 2)
        svs = V.make_targets(p[None, :], grid)
        assert svs.volumes[0, 4, 9, 2] == pytest.approx(1.0)

    def test_two_voxel_offset_value(self):
        grid = small_grid()
        p = grid.index_to_world(8, 8, 8)
        svs = V.make_targets(p[None, :], grid)
        # two voxels along x with sigma = 2 voxels: exp(-4/(2*4)) = exp(-1/2)
        assert svs.volumes[0, 8, 8, 10] == pytest.approx(np.exp(-0.5), rel=1e-6)

    def test_outside_grid_flagged_zero(self):
        grid = small_grid()
        points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        svs = V.make_targets(points, grid)
        assert not svs.out_of_grid[0]
        assert svs.out_of_grid[1]
        assert svs.volumes[1].max() == 0.0

    def test_rejects_nonfinite(self):
        grid = small_grid()
        with pytest.raises(ValueError, match="finite"):
            V.make_targets(np.array([[np.nan, 0, 0]]), grid)


class TestScoreLoss:
    def test_identical_is_zero(self):
        grid = small_grid()
        svs = V.make_targets(np.zeros((3, 3)), grid)
        assert V.score_loss(svs, svs) == 0.0

    def test_single_voxel_difference(self):
        grid = small_grid(n=8, extent=0.08)
        a = V.ScoreVolumeSet(grid=grid, volumes=np.zeros((21, 8, 8, 8)))
        vol = np.zeros((21, 8, 8, 8))
        vol[4, 1, 2, 3] = 0.5
        b = V.ScoreVolumeSet(grid=grid, volumes=vol)
        assert V.score_loss(a, b) == pytest.approx(0.5 / 21)

    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(0)
        grid = small_grid(n=8, extent=0.08)
        a = V.ScoreVolumeSet(grid=grid, volumes=rng.random((5, 8, 8, 8)).astype(np.float32))
        b = V.ScoreVolumeSet(grid=grid, volumes=rng.random((5, 8, 8, 8)).astype(np.float32))
        expected = np.mean(
            [
                np.sqrt(
                    (
                        (a.volumes[k].astype(np.float64) - b.volumes[k].astype(np.float64)) ** 2
                    ).sum()
                )
                for k in range(5)
            ]
        )
        assert V.score_loss(a, b) == pytest.approx(expected, rel=1e-12)


class TestExtractKeypoints:
    def test_recovers_targets_within_half_voxel(self):
        grid = V.VolumeGrid(resolution=32, extent=0.3, center=np.zeros(3))
        rng = np.random.default_rng(7)
        points = rng.uniform(-0.12, 0.12, (21, 3))
        svs = V.make_targets(points, grid)
        peaks = V.extract_keypoints(svs)
        half_diag = np.sqrt(3) * grid.voxel_size / 2
        err = np.linalg.norm(peaks.points - points, axis=1)
        assert np.all(err <= half_diag + 1e-12)
        assert peaks.mean_confidence > 0.9

    def test_confidence_arithmetic_two_volumes(self):
        grid = small_grid(n=8, extent=0.08)
        vols = np.zeros((2, 8, 8, 8))
        vols[0, 1, 1, 1] = 1.0
        vols[1, 2, 2, 2] = 0.6
        svs = V.ScoreVolumeSet(grid=grid, volumes=vols)
        peaks = V.extract_keypoints(svs)
        assert peaks.confidences[0] == pytest.approx(1.0)
        assert peaks.confidences[1] == pytest.approx(0.6)
        assert peaks.mean_confidence == pytest.approx(0.8)

    def test_all_zero_volume_flagged_at_origin_voxel(self):
        grid = small_grid(n=8, extent=0.08)
        svs = V.ScoreVolumeSet(grid=grid, volumes=np.zeros((1, 8, 8, 8)))
        peaks = V.extract_keypoints(svs)
        assert peaks.degenerate[0]
        assert peaks.confidences[0] == 0.0
        assert np.allclose(peaks.points[0], grid.index_to_world(0, 0, 0))

    def test_tie_broken_by_lowest_linear_index(self):
        grid = small_grid(n=8, extent=0.08)
        vols = np.zeros((1, 8, 8, 8))
        vols[0, 2, 0, 0] = 0.7
        vols[0, 5, 5, 5] = 0.7
        svs = V.ScoreVolumeSet(grid=grid, volumes=vols)
        peaks = V.extract_keypoints(svs)
        assert np.allclose(peaks.points[0], grid.index_to_world(2, 0, 0))


class TestSimulatePredictor:
    def test_high_skill_is_exact_peak(self):
        grid = V.VolumeGrid(resolution=32, extent=0.3, center=np.zeros(3))
        points = grid.index_to_world(10, 12, 14)[None, :]
        svs = V.simulate_predictor(points, grid, skill=1e12, seed=0)
        peaks = V.extract_keypoints(svs)
        assert np.allclose(peaks.points[0], points[0], atol=grid.voxel_size)
        assert peaks.confidences[0] == pytest.approx(1.0, abs=1e-5)

    def test_deterministic_in_seed(self):
        grid = small_grid()
        points = np.zeros((21, 3))
        a = V.simulate_predictor(points, grid, skill=1.0, seed=5)
        b = V.simulate_predictor(points, grid, skill=1.0, seed=5)
        assert np.array_equal(a.volumes, b.volumes)

    def test_error_std_matches_sigma0(self):
        # Monte-Carlo oracle: at skill 0 the keypoint displacement std per
        # axis should be sigma0 voxels within 15%
        grid = V.VolumeGrid(resolution=64, extent=0.4, center=np.zeros(3))
        errors = []
        for seed in range(500 // 21 + 1):
            points = np.zeros((21, 3))
            svs = V.simulate_predictor(points, grid, skill=0.0, seed=seed)
            peaks = V.extract_keypoints(svs)
            errors.append(peaks.points - points)
        per_axis = np.concatenate(errors).ravel()
        measured = per_axis.std()
        expected = V.PREDICTOR_SIGMA0_VOX * grid.voxel_size
        assert abs(measured - expected) / expected < 0.15

    def test_confidence_tracks_error(self):
        grid = V.VolumeGrid(resolution=64, extent=0.4, center=np.zeros(3))
        rng = np.random.default_rng(0)
        confs, errs = [], []
        for seed in range(200):
            points = rng.uniform(-0.1, 0.1, (21, 3))
            svs = V.simulate_predictor(points, grid, skill=0.5, seed=seed)
            peaks = V.extract_keypoints(svs)
            confs.append(peaks.mean_confidence)
            errs.append(np.linalg.norm(peaks.points - points, axis=1).mean())
        r = np.corrcoef(confs, errs)[0, 1]
        assert r < -0.5

    def test_rejects_negative_skill(self):
        with pytest.raises(ValueError):
            V.simulate_predictor(np.zeros((1, 3)), small_grid(), skill=-1.0, seed=0)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        grid = V.VolumeGrid(resolution=16, extent=0.25, center=np.array([0.1, 0.2, 0.3]))
        rng = np.random.default_rng(3)
        svs = V.ScoreVolumeSet(grid=grid, volumes=rng.random((21, 16, 16, 16)).astype(np.float32))
        path = tmp_path / "vol.svol"
        V.save_volumes(svs, path)
        loaded = V.load_volumes(path)
        assert loaded.grid.resolution == 16
        assert loaded.grid.extent == pytest.approx(0.25)
        assert np.allclose(loaded.grid.center, [0.1, 0.2, 0.3])
        assert np.array_equal(loaded.volumes, svs.volumes)

    def test_header_layout(self, tmp_path):
        grid = V.VolumeGrid(resolution=8, extent=0.1, center=np.zeros(3))
        svs = V.ScoreVolumeSet(grid=grid, volumes=np.zeros((2, 8, 8, 8), dtype=np.float32))
        path = tmp_path / "v.svol"
        V.save_volumes(svs, path)
        blob = path.read_bytes()
        assert blob[:4] == b"SVOL"
        assert len(blob) == V._HEADER.size + 2 * 8 * 8 * 8 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.svol"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            V.load_volumes(path)

    def test_truncated_rejected(self, tmp_path):
        grid = V.VolumeGrid(resolution=8, extent=0.1, center=np.zeros(3))
        svs = V.ScoreVolumeSet(grid=grid, volumes=np.zeros((2, 8, 8, 8), dtype=np.float32))
        path = tmp_path / "t.svol"
        V.save_volumes(svs, path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(ValueError, match="size mismatch"):
            V.load_volumes(path)


class TestConfidenceMonotonicity:
    def test_raising_a_peak_never_lowers_mean_confidence(self):
        grid = small_grid(n=8, extent=0.08)
        rng = np.random.default_rng(1)
        vols = rng.random((5, 8, 8, 8)).astype(np.float32) * 0.5
        base = V.extract_keypoints(V.ScoreVolumeSet(grid=grid, volumes=vols))
        for k in range(5):
            boosted = vols.copy()
            iz, iy, ix = np.unravel_index(np.argmax(boosted[k]), (8, 8, 8))
            boosted[k, iz, iy, ix] = min(1.0, boosted[k, iz, iy, ix] + 0.3)
            peaks = V.extract_keypoints(V.ScoreVolumeSet(grid=grid, volumes=boosted))
            assert peaks.mean_confidence >= base.mean_confidence
