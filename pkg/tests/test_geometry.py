import numpy as np
import pytest

from handlab import geometry as G
from handlab.model import KEYPOINT_COUNT
from handlab.volumes import VolumeGrid


def identity_camera(f=100.0, c=64.0, size=128):
    return G.Camera(
        fx=f, fy=f, cx=c, cy=c,
        rotation=np.eye(3), translation=np.zeros(3),
        width=size, height=size,
    )


class TestCamera:
    def test_rejects_non_orthonormal_rotation(self):
        r = np.eye(3)
        r[0, 1] = 0.01
        with pytest.raises(ValueError, match="orthonormal"):
            G.Camera(fx=1, fy=1, cx=0, cy=0, rotation=r, translation=np.zeros(3), width=4, height=4)

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError, match="determinant"):
            G.Camera(fx=1, fy=1, cx=0, cy=0, rotation=r, translation=np.zeros(3), width=4, height=4)

    def test_file_round_trip(self, tmp_path, rig):
        path = tmp_path / "cameras.json"
        G.save_cameras(rig, path)
        loaded = G.load_cameras(path)
        assert len(loaded) == 8
        for a, b in zip(rig, loaded):
            assert np.allclose(a.projection_matrix(), b.projection_matrix())


class TestProject:
    def test_principal_axis(self):
        cam = identity_camera()
        assert G.project(cam, np.array([0.0, 0.0, 1.0])) == (64.0, 64.0)

    def test_offset_point(self):
        cam = identity_camera()
        u, v = G.project(cam, np.array([0.1, 0.0, 1.0]))
        assert (u, v) == (74.0, 64.0)

    def test_behind_camera_errors(self):
        cam = identity_camera()
        with pytest.raises(G.BehindCameraError):
            G.project(cam, np.array([0.0, 0.0, 0.0]))

    def test_rigid_invariance(self):
        # applying one rigid transform to both camera and point preserves uv
        rng = np.random.default_rng(0)
        base = identity_camera()
        x = np.array([0.03, -0.05, 0.8])
        uv0 = G.project(base, x)
        for _ in range(10):
            omega = rng.standard_normal(3)
            t = rng.standard_normal(3) * 0.2
            from scipy.spatial.transform import Rotation

            q = Rotation.from_rotvec(omega).as_matrix()
            cam = G.Camera(
                fx=base.fx, fy=base.fy, cx=base.cx, cy=base.cy,
                rotation=base.rotation @ q.T,
                translation=base.translation - base.rotation @ q.T @ t,
                width=base.width, height=base.height,
            )
            uv = G.project(cam, q @ x + t)
            assert np.allclose(uv, uv0, atol=1e-9)


class TestTriangulate:
    def test_exact_recovery_on_rig(self, rig):
        x = np.array([0.01, -0.02, 0.005])
        uv = [G.project(cam, x) for cam in rig]
        rec = G.triangulate(rig, uv)
        assert np.linalg.norm(rec - x) < 1e-9

    def test_needs_two_views(self, rig):
        with pytest.raises(G.DegenerateGeometryError):
            G.triangulate([rig[0]], [(1.0, 2.0)])

    def test_identical_cameras_degenerate(self, rig):
        with pytest.raises(G.DegenerateGeometryError):
            G.triangulate([rig[0], rig[0]], [(10.0, 12.0), (10.0, 12.0)])

    def test_noise_below_2mm(self, rig):
        # Monte-Carlo oracle: +-0.5 px uniform noise over 100 seeds
        x = np.array([0.02, 0.01, -0.015])
        uv = np.array([G.project(cam, x) for cam in rig])
        errors = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            noisy = uv + rng.uniform(-0.5, 0.5, uv.shape)
            rec = G.triangulate(rig, noisy)
            errors.append(np.linalg.norm(rec - x))
        assert max(errors) < 0.002

    def test_many_points_exact(self, rig):
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = rng.uniform(-0.08, 0.08, 3)
            uv = [G.project(cam, x) for cam in rig]
            assert np.linalg.norm(G.triangulate(rig, uv) - x) < 1e-9


class TestUnprojectToGrid:
    def test_constant_map_gives_ones(self):
        cam = identity_camera(f=400.0)
        grid = VolumeGrid(resolution=16, extent=0.1, center=np.array([0.0, 0.0, 1.0]))
        vol = G.unproject_to_grid(cam, np.ones((128, 128)), grid)
        assert vol.shape == (16, 16, 16)
        assert np.max(np.abs(vol - 1.0)) < 1e-12

    def test_grid_behind_camera_is_zero(self):
        cam = identity_camera()
        grid = VolumeGrid(resolution=8, extent=0.1, center=np.array([0.0, 0.0, -1.0]))
        vol = G.unproject_to_grid(cam, np.ones((128, 128)), grid)
        assert np.all(vol == 0.0)

    def test_bright_pixel_lights_ray(self):
        cam = identity_camera(f=400.0)
        grid = VolumeGrid(resolution=24, extent=0.12, center=np.array([0.0, 0.0, 1.0]))
        view = np.zeros((128, 128))
        view[70, 80] = 1.0  # u=80.5, v=70.5 pixel center
        vol = G.unproject_to_grid(cam, view, grid)
        # oracle: re-project every voxel center, value > 0 iff it lands within
        # one pixel of the bright pixel's support
        centers = grid.voxel_centers()
        pc = cam.world_to_cam(centers)
        u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
        v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
        near = (np.abs(u - 80.5) < 1.0) & (np.abs(v - 70.5) < 1.0)
        values = vol.reshape(-1)
        assert np.all(values[~near] == 0.0)
        assert values[near].max() > 0.0
        # nonzero support forms a ray: spans many z slices
        nz = np.nonzero(vol.reshape(24, 24, 24).sum(axis=(1, 2)))[0]
        assert len(nz) >= 20


def camera_frame_pose(seed):
    """Random 21-keypoint hand-like cloud fully in front of the camera."""
    rng = np.random.default_rng(seed)
    base = np.array([0.0, 0.0, 0.6]) + rng.uniform(-0.05, 0.05, 3)
    pts = base + rng.uniform(-0.08, 0.08, (KEYPOINT_COUNT, 3))
    return pts


class TestPose2p5D:
    def test_reference_bone_is_unit_after_normalization(self):
        cam = identity_camera()
        p = camera_frame_pose(0)
        p25 = G.to_2p5d(p, cam)
        a, b = G.DEFAULT_REF_BONE
        s = p25.scale
        norm_pts = p / s
        assert abs(np.linalg.norm(norm_pts[a] - norm_pts[b]) - 1.0) < 1e-9

    def test_root_relative_depth_zero(self):
        cam = identity_camera()
        p25 = G.to_2p5d(camera_frame_pose(1), cam)
        assert p25.z_rel[0] == 0.0

    def test_zero_length_bone_rejected(self):
        cam = identity_camera()
        p = camera_frame_pose(2)
        p[9] = p[0]
        with pytest.raises(ValueError, match="zero length"):
            G.to_2p5d(p, cam)

    @pytest.mark.parametrize("seed", [3, 4, 5])
    def test_round_trip(self, seed):
        cam = identity_camera()
        p = camera_frame_pose(seed)
        rec = G.recover_3d(G.to_2p5d(p, cam), cam)
        assert np.max(np.linalg.norm(rec - p, axis=1)) < 1e-6

    def test_round_trip_1000_poses(self):
        cam = identity_camera()
        worst = 0.0
        for seed in range(1000):
            p = camera_frame_pose(seed)
            rec = G.recover_3d(G.to_2p5d(p, cam), cam)
            worst = max(worst, float(np.max(np.linalg.norm(rec - p, axis=1))))
        assert worst < 1e-6

    def test_homogeneity(self):
        cam = identity_camera()
        p = camera_frame_pose(7)
        p25 = G.to_2p5d(p, cam)
        doubled = G.Pose2p5D(
            uv=p25.uv.copy(), z_rel=p25.z_rel.copy(), scale=2 * p25.scale,
            root_depth=p25.root_depth,
        )
        rec = G.recover_3d(doubled, cam)
        assert np.max(np.abs(rec - 2 * G.recover_3d(p25, cam))) < 1e-9

    def test_infeasible_input_rejected(self):
        cam = identity_camera()
        # all keypoints on one ray with zero relative depth: the bone between
        # any two of them can never reach unit normalized length
        p25 = G.Pose2p5D(
            uv=np.tile([[64.0, 64.0]], (KEYPOINT_COUNT, 1)),
            z_rel=np.zeros(KEYPOINT_COUNT),
            scale=0.1,
            root_depth=1.0,
        )
        with pytest.raises(G.Recover3DError):
            G.recover_3d(p25, cam)
