import numpy as np
import pytest

from handlab import datasetio as D
from handlab import fitting as F
from handlab import model as M
from handlab.geometry import project_points
from handlab.silhouette import Mask


def make_obs(cams, **kw):
    return F.Observation(cameras=cams, **kw)


def exact_2d_observation(model, params, cams, visible=None):
    mesh = M.forward(model, params)
    kp2d = np.stack([project_points(cam, mesh.keypoints) for cam in cams])
    vis = np.ones((len(cams), 21), dtype=bool) if visible is None else visible
    return make_obs(cams, keypoints2d=kp2d, visibility=vis)


@pytest.fixture(scope="module")
def scene(hand_model, rig):
    rng = np.random.default_rng(99)
    gt = D.random_hand_params(hand_model, rng)
    spec = D.SceneSpec(gt=gt, cameras=rig, mask_resolution=(128, 128), noise_std_px=1.0, seed=99)
    return gt, D.generate_scene(hand_model, spec)


class TestLoss2D:
    def test_perfect_fit_is_zero(self, hand_model, rig):
        p = M.HandParams.mean(hand_model)
        obs = exact_2d_observation(hand_model, p, rig)
        assert F.loss_2d(p, hand_model, obs, w2d=1.0) < 1e-9

    def test_three_four_five(self, hand_model, rig):
        p = M.HandParams.mean(hand_model)
        obs = exact_2d_observation(hand_model, p, rig[:1])
        vis = np.zeros((1, 21), dtype=bool)
        vis[0, 7] = True
        obs.visibility = vis
        obs.keypoints2d[0, 7] += np.array([3.0, 4.0])
        assert F.loss_2d(p, hand_model, obs, w2d=1.0) == pytest.approx(5.0, abs=1e-9)

    def test_matches_recomputation(self, hand_model, scene):
        gt, sample = scene
        p = M.HandParams.mean(hand_model)
        value = F.loss_2d(p, hand_model, sample.observation, w2d=3.5)
        mesh = M.forward(hand_model, p)
        expected = 0.0
        for i, cam in enumerate(sample.observation.cameras):
            uv = project_points(cam, mesh.keypoints)
            for k in range(21):
                if sample.observation.visibility[i, k]:
                    expected += np.linalg.norm(sample.observation.keypoints2d[i, k] - uv[k])
        assert value == pytest.approx(3.5 * expected, rel=1e-9)

    def test_no_visible_warns_and_zero(self, hand_model, rig):
        obs = make_obs(
            rig,
            keypoints2d=np.zeros((8, 21, 2)),
            visibility=np.zeros((8, 21), dtype=bool),
        )
        p = M.HandParams.mean(hand_model)
        with pytest.warns(UserWarning, match="no visible"):
            assert F.loss_2d(p, hand_model, obs, w2d=1.0) == 0.0


class TestLoss3D:
    def test_perfect_fit_is_zero(self, hand_model, rig):
        p = M.HandParams.mean(hand_model)
        mesh = M.forward(hand_model, p)
        obs = make_obs(rig, keypoints3d=mesh.keypoints.copy())
        assert F.loss_3d(p, hand_model, obs, w3d=1.0) < 1e-9

    def test_one_cm_offset(self, hand_model, rig):
        p = M.HandParams.mean(hand_model)
        mesh = M.forward(hand_model, p)
        kp3d = mesh.keypoints.copy()
        kp3d[5, 0] += 0.01
        mask = np.zeros(21, dtype=bool)
        mask[5] = True
        obs = make_obs(rig, keypoints3d=kp3d, keypoints3d_mask=mask)
        assert F.loss_3d(p, hand_model, obs, w3d=1000.0) == pytest.approx(10.0, abs=1e-9)

    def test_matches_recomputation(self, hand_model, rig):
        rng = np.random.default_rng(1)
        p = M.HandParams.mean(hand_model)
        mesh = M.forward(hand_model, p)
        kp3d = mesh.keypoints + rng.standard_normal((21, 3)) * 0.01
        obs = make_obs(rig, keypoints3d=kp3d)
        expected = np.linalg.norm(kp3d - mesh.keypoints, axis=1).sum()
        assert F.loss_3d(p, hand_model, obs, w3d=7.0) == pytest.approx(7.0 * expected, rel=1e-9)


class TestLossSeg:
    def test_empty_observed_mask_msd_only(self, hand_model, rig):
        # all-zero observed mask: the loss reduces to the mean squared
        # difference, i.e. wseg * mean(soft^2)
        p = M.HandParams.mean(hand_model)
        cams = rig[:1]
        masks = [Mask(np.zeros((128, 128)))]
        obs = make_obs(cams, masks=masks)
        from handlab.silhouette import rasterize_soft

        soft = rasterize_soft(M.forward(hand_model, p), cams[0], (128, 128), 2.0)
        expected = (soft.values**2).mean()
        with pytest.warns(UserWarning, match="no foreground"):
            value = F.loss_seg(p, hand_model, obs, wseg=4.0, sharpness=2.0)
        assert value == pytest.approx(4.0 * expected, rel=1e-9)

    def test_rendered_self_mask_small(self, hand_model, scene):
        gt, sample = scene
        value = F.loss_seg(gt, hand_model, sample.observation, wseg=1.0, sharpness=2.0, band=4.0)
        # observed masks come from the ground-truth render; the residual is
        # only the sigmoid smoothing along the boundary band
        assert value < 0.1 * len(sample.observation.cameras)

    def test_no_masks_warns_zero(self, hand_model, rig):
        obs = make_obs(rig, keypoints3d=np.zeros((21, 3)))
        with pytest.warns(UserWarning, match="no observation masks"):
            assert F.loss_seg(M.HandParams.mean(hand_model), hand_model, obs, wseg=1.0) == 0.0


class TestPriors:
    def test_zero_shape(self, hand_model):
        assert F.prior_shape(M.HandParams.mean(hand_model), 100.0) == 0.0

    def test_three_four_shape(self, hand_model):
        p = M.HandParams.mean(hand_model)
        p.shape[0], p.shape[1] = 3.0, 4.0
        assert F.prior_shape(p, 1.0) == pytest.approx(5.0)

    def test_small_shape_scaled(self, hand_model):
        p = M.HandParams.mean(hand_model)
        p.shape[3] = 0.01
        assert F.prior_shape(p, 100.0) == pytest.approx(1.0)

    def test_pose_prior_member_of_library(self, hand_model):
        p = M.HandParams.mean(hand_model)
        beta = p.articulation(hand_model)
        lib = F.PoseLibrary(np.stack([beta, beta + 1.0]))
        value = F.prior_pose(p, hand_model, lib, wpose=1.0, wnn=10.0, nn_count=1)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_pose_prior_single_neighbor(self, hand_model):
        rng = np.random.default_rng(2)
        p = M.HandParams.mean(hand_model)
        p.pose_coeffs = rng.standard_normal(45) * 0.1
        beta = p.articulation(hand_model)
        delta = rng.standard_normal(45)
        delta *= 0.2 / np.linalg.norm(delta)
        lib = F.PoseLibrary((beta + delta)[None, :])
        value = F.prior_pose(p, hand_model, lib, wpose=0.0, wnn=10.0, nn_count=1)
        assert value == pytest.approx(2.0, rel=1e-9)

    def test_pose_prior_matches_exhaustive_scan(self, hand_model, pose_library):
        rng = np.random.default_rng(3)
        p = M.HandParams.mean(hand_model)
        p.pose_coeffs = rng.standard_normal(45) * 0.3
        beta = p.articulation(hand_model)
        dists = np.sort(np.linalg.norm(pose_library.poses - beta, axis=1))
        expected = 0.1 * np.abs(p.pose_coeffs).sum() + 10.0 * dists[:5].sum()
        value = F.prior_pose(p, hand_model, pose_library, wpose=0.1, wnn=10.0, nn_count=5)
        assert value == pytest.approx(expected, rel=1e-9)

    def test_empty_library_with_wnn_raises(self, hand_model):
        p = M.HandParams.mean(hand_model)
        with pytest.raises(ValueError, match="pose library"):
            F.prior_pose(p, hand_model, None, wpose=0.1, wnn=1.0)


class TestTotalLoss:
    def test_breakdown_sums_to_total(self, hand_model, scene, pose_library):
        gt, sample = scene
        cfg = F.FitConfig(pose_library=pose_library, raster_band=4.0)
        p = M.HandParams.mean(hand_model)
        total, terms = F.total_loss(p, hand_model, sample.observation, cfg)
        assert total == pytest.approx(sum(terms.values()), rel=1e-12)
        assert set(terms) == set(F.LOSS_TERMS)
        assert all(v >= 0 for v in terms.values())

    def test_all_weights_zero(self, hand_model, scene):
        gt, sample = scene
        cfg = F.FitConfig(w2d=0, w3d=0, wseg=0, wshape=0, wpose=0, wnn=0)
        total, terms = F.total_loss(M.HandParams.mean(hand_model), hand_model, sample.observation, cfg)
        assert total == 0.0

    def test_weight_linearity(self, hand_model, scene, pose_library):
        gt, sample = scene
        p = M.HandParams.mean(hand_model)
        base = F.FitConfig(pose_library=pose_library)
        doubled = F.FitConfig(pose_library=pose_library, w2d=200.0)
        _, t1 = F.total_loss(p, hand_model, sample.observation, base)
        _, t2 = F.total_loss(p, hand_model, sample.observation, doubled)
        assert t2["kp2d"] == pytest.approx(2.0 * t1["kp2d"], rel=1e-12)
        for k in ("seg", "shape", "pose"):
            assert t2[k] == pytest.approx(t1[k], rel=1e-12)


def objective_gradient(model, obs, cfg, params):
    pack = F._ObservationPack(obs, cfg)
    tensors = F._params_to_tensors(params, requires_grad=True)
    terms = F._loss_terms(model, *tensors, pack, cfg)
    total = sum(terms.values())
    total.backward()
    return np.concatenate([t.grad.numpy() for t in tensors]), float(total)


def objective_value(model, obs, cfg, params):
    total, _ = F.total_loss(params, model, obs, cfg)
    return total


class TestGradients:
    def check_fd(self, model, obs, cfg, params, indices, h, tol):
        grad, _ = objective_gradient(model, obs, cfg, params)
        theta = params.as_vector()
        for idx in indices:
            tp, tm = theta.copy(), theta.copy()
            tp[idx] += h
            tm[idx] -= h
            fp = objective_value(model, obs, cfg, M.HandParams.from_vector(tp, model.pose_dim))
            fm = objective_value(model, obs, cfg, M.HandParams.from_vector(tm, model.pose_dim))
            fd = (fp - fm) / (2 * h)
            denom = max(abs(fd), abs(grad[idx]), 1e-8)
            if abs(fd) > 1e-8 or abs(grad[idx]) > 1e-8:
                assert abs(grad[idx] - fd) / denom < tol, f"param {idx}: {grad[idx]} vs {fd}"

    def test_keypoint_terms_match_fd(self, hand_model, scene, pose_library):
        gt, sample = scene
        rng = np.random.default_rng(4)
        p = M.HandParams.mean(hand_model)
        p.pose_coeffs = M.sample_articulation(rng) * 0.5
        p.global_trans = rng.standard_normal(3) * 0.02
        sample.observation.keypoints3d = M.forward(hand_model, gt).keypoints
        cfg = F.FitConfig(
            w2d=100.0, w3d=1000.0, wseg=0.0, wshape=100.0, wpose=0.1, wnn=10.0,
            pose_library=pose_library,
        )
        indices = rng.choice(61, 16, replace=False)
        self.check_fd(hand_model, sample.observation, cfg, p, indices, h=1e-6, tol=1e-4)

    def test_full_objective_matches_fd_small_scene(self, hand_model, pose_library):
        # 32x32 masks, 2 views, exact-mode soft raster
        rng = np.random.default_rng(5)
        gt = D.random_hand_params(hand_model, rng)
        cams = D.build_cube_rig(edge=1.0, image_size=32)[:2]
        spec = D.SceneSpec(gt=gt, cameras=cams, mask_resolution=(32, 32), noise_std_px=0.5, seed=5)
        sample = D.generate_scene(hand_model, spec)
        sample.observation.keypoints3d = M.forward(hand_model, gt).keypoints
        p = gt.copy()
        p.global_trans = p.global_trans + 0.003
        p.shape = p.shape * 0.9
        cfg = F.FitConfig(
            w2d=100.0, w3d=1000.0, wseg=10.0, wshape=100.0, wpose=0.1, wnn=10.0,
            pose_library=pose_library, soft_sharpness=2.0, raster_band=None,
        )
        indices = rng.choice(61, 10, replace=False)
        self.check_fd(hand_model, sample.observation, cfg, p, indices, h=1e-6, tol=1e-2)


class TestFit:
    def test_fixed_point_at_ground_truth(self, hand_model, rig):
        rng = np.random.default_rng(6)
        gt = D.random_hand_params(hand_model, rng)
        obs = exact_2d_observation(hand_model, gt, rig)
        cfg = F.FitConfig(
            w2d=100.0, w3d=0.0, wseg=0.0, wshape=0.0, wpose=0.0, wnn=0.0, iterations=20
        )
        result = F.fit(hand_model, obs, cfg, gt)
        assert result.total_loss <= result.initial_loss
        assert result.initial_loss < 1e-6  # epsilon-guarded norms, not exactly 0
        assert np.max(np.abs(result.params.as_vector() - gt.as_vector())) < 1e-4

    def test_single_keypoint_translation_convergence(self, hand_model, rig):
        # w3d-only supervision of the wrist: translation must place it
        gt = M.HandParams.mean(hand_model)
        mesh = M.forward(hand_model, gt)
        target = mesh.keypoints.copy()
        target[0] += np.array([0.03, -0.02, 0.04])
        mask = np.zeros(21, dtype=bool)
        mask[0] = True
        obs = make_obs(rig, keypoints3d=target, keypoints3d_mask=mask)
        cfg = F.FitConfig(
            w2d=0.0, w3d=1000.0, wseg=0.0, wshape=0.0, wpose=0.0, wnn=0.0,
            iterations=200, learning_rate=0.05,
        )
        result = F.fit(hand_model, obs, cfg, M.HandParams.mean(hand_model))
        fitted = M.forward(hand_model, result.params).keypoints[0]
        assert np.linalg.norm(fitted - target[0]) < 1e-3

    def test_noise_free_scene_recovery(self, hand_model, rig, pose_library):
        rng = np.random.default_rng(7)
        gt = D.random_hand_params(hand_model, rng)
        spec = D.SceneSpec(gt=gt, cameras=rig, mask_resolution=(128, 128), noise_std_px=0.0, seed=7)
        sample = D.generate_scene(hand_model, spec)
        cfg = F.FitConfig(
            pose_library=pose_library, iterations=300, learning_rate=0.12,
            lr_decay_every=50, aux_articulation_starts=(0.5,),
        )
        result = F.fit(hand_model, sample.observation, cfg, M.HandParams.mean(hand_model))
        gt_mesh = M.forward(hand_model, gt)
        fit_mesh = M.forward(hand_model, result.params)
        err = np.linalg.norm(gt_mesh.keypoints - fit_mesh.keypoints, axis=1).mean()
        assert err < 0.002
        assert result.total_loss <= result.initial_loss
        assert all(v is None or v > 0.7 for v in result.per_view_iou)

    def test_deterministic(self, hand_model, rig, pose_library):
        rng = np.random.default_rng(8)
        gt = D.random_hand_params(hand_model, rng)
        obs = exact_2d_observation(hand_model, gt, rig)
        cfg = F.FitConfig(w2d=100.0, wseg=0.0, wshape=1.0, wpose=0.1, wnn=0.0, iterations=40)
        a = F.fit(hand_model, obs, cfg, M.HandParams.mean(hand_model))
        b = F.fit(hand_model, obs, cfg, M.HandParams.mean(hand_model))
        assert np.array_equal(a.params.as_vector(), b.params.as_vector())
        assert a.total_loss == b.total_loss

    def test_nan_guard_names_term(self, hand_model, rig):
        obs = make_obs(rig, keypoints3d=np.full((21, 3), 1e300))
        cfg = F.FitConfig(w2d=0.0, w3d=1e300, wseg=0.0, wshape=0.0, wpose=0.0, wnn=0.0, iterations=5)
        with pytest.raises(F.FitDivergedError, match="kp3d"):
            F.fit(hand_model, obs, cfg, M.HandParams.mean(hand_model))

    def test_result_round_trip(self, hand_model, rig, tmp_path):
        gt = M.HandParams.mean(hand_model)
        obs = exact_2d_observation(hand_model, gt, rig)
        cfg = F.FitConfig(w2d=1.0, wseg=0.0, wshape=0.0, wpose=0.0, wnn=0.0, iterations=2)
        result = F.fit(hand_model, obs, cfg, gt)
        path = tmp_path / "fit.json"
        result.save(path)
        loaded = F.FitResult.load(path)
        assert np.allclose(loaded.params.as_vector(), result.params.as_vector())
        assert loaded.total_loss == pytest.approx(result.total_loss)


class TestFitConfigFile:
    def test_load_from_json(self, tmp_path):
        import json

        lib = F.PoseLibrary.generate(5, 16)
        lib.save(tmp_path / "lib.json")
        cfg_doc = {
            "w2d": 50.0, "w3d": 1000.0, "wseg": 10.0, "wshape": 100.0,
            "wpose": 0.1, "wnn": 10.0, "nn_count": 3, "iterations": 42,
            "learning_rate": 0.07, "aux_articulation_starts": [0.5],
            "pose_library": "lib.json",
        }
        (tmp_path / "cfg.json").write_text(json.dumps(cfg_doc))
        cfg = F.FitConfig.load(tmp_path / "cfg.json")
        assert cfg.iterations == 42
        assert cfg.nn_count == 3
        assert tuple(cfg.aux_articulation_starts) == (0.5,)
        assert cfg.pose_library.poses.shape == (16, 45)

    def test_iteration_schedule(self):
        it0 = F.FitConfig.for_iteration(0)
        later = F.FitConfig.for_iteration(2)
        assert (it0.w2d, it0.w3d) == (100.0, 0.0)
        assert (later.w2d, later.w3d) == (50.0, 1000.0)
        for cfg in (it0, later):
            assert (cfg.wseg, cfg.wshape, cfg.wnn, cfg.wpose) == (10.0, 100.0, 10.0, 0.1)


class TestShapeSupervision:
    def test_identical_zero(self, hand_model, rig):
        p = M.HandParams.mean(hand_model)
        mesh = M.forward(hand_model, p)
        assert F.shape_supervision_loss((p, mesh), (p, mesh), rig[0]) == 0.0

    def test_single_parameter_offset(self, hand_model, rig):
        p = M.HandParams.mean(hand_model)
        mesh = M.forward(hand_model, p)
        q = p.copy()
        q.shape = q.shape.copy()
        q.shape[2] += 0.1
        # keypoints kept identical: only the parameter term fires
        value = F.shape_supervision_loss((q, mesh), (p, mesh), rig[0], w3d=1000.0, w2d=10.0, wp=1.0)
        assert value == pytest.approx(0.01, rel=1e-12)

    def test_matches_recomputation(self, hand_model, rig):
        rng = np.random.default_rng(9)
        p = M.HandParams.mean(hand_model)
        q = D.random_hand_params(hand_model, rng)
        mp, mq = M.forward(hand_model, p), M.forward(hand_model, q)
        cam = rig[0]
        value = F.shape_supervision_loss((q, mq), (p, mp), cam)
        d3 = ((mp.keypoints - mq.keypoints) ** 2).sum()
        d2 = ((project_points(cam, mp.keypoints) - project_points(cam, mq.keypoints)) ** 2).sum()
        dp = ((p.as_vector() - q.as_vector()) ** 2).sum()
        assert value == pytest.approx(1000 * d3 + 10 * d2 + dp, rel=1e-9)
