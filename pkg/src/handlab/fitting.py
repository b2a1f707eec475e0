"""Multi-view model fitting: five-term objective and ADAM minimization.

Loss terms: 2D keypoint reprojection, 3D keypoint agreement, segmentation
(mask difference + EDT silhouette term), shape prior and pose prior (PCA
coefficient regularization plus nearest-neighbor pose-library pull).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import silhouette
from .geometry import Camera, MIN_DEPTH
from .model import (
    ARTICULATION_DIM,
    HandMesh,
    HandModelDef,
    HandParams,
    KEYPOINT_COUNT,
    forward,
    forward_torch,
    keypoints_torch,
    sample_articulation,
)
from .silhouette import Mask, edt, iou, rasterize_hard

LOSS_TERMS = ("kp2d", "kp3d", "seg", "shape", "pose")

# sqrt guard so Euclidean norms have zero (not NaN) gradient at zero residual
_NORM_EPS = 1e-24


class FitDivergedError(RuntimeError):
    """Objective became non-finite; carries the offending term name."""

    def __init__(self, term: str, step: int):
        super().__init__(f"non-finite loss in term '{term}' at step {step}")
        self.term = term
        self.step = step


@dataclass
class Observation:
    """Multi-view evidence for one sample.

    masks/keypoints2d are per view; keypoints3d is a single world-frame set
    (e.g. lifted from score volumes). At least one evidence channel must be
    present.
    """

    cameras: list[Camera]
    masks: list[Mask | None] | None = None
    keypoints2d: np.ndarray | None = None  # (views, 21, 2)
    visibility: np.ndarray | None = None  # (views, 21) bool
    keypoints3d: np.ndarray | None = None  # (21, 3) world
    keypoints3d_mask: np.ndarray | None = None  # (21,) bool

    def __post_init__(self):
        n = len(self.cameras)
        if self.keypoints2d is not None:
            self.keypoints2d = np.asarray(self.keypoints2d, dtype=np.float64)
            if self.keypoints2d.shape != (n, KEYPOINT_COUNT, 2):
                raise ValueError("keypoints2d must be (views, 21, 2)")
            if self.visibility is None:
                self.visibility = np.ones((n, KEYPOINT_COUNT), dtype=bool)
            self.visibility = np.asarray(self.visibility, dtype=bool)
            if self.visibility.shape != (n, KEYPOINT_COUNT):
                raise ValueError("visibility must be (views, 21)")
        if self.masks is not None and len(self.masks) != n:
            raise ValueError("need one mask slot per view")
        if self.keypoints3d is not None:
            self.keypoints3d = np.asarray(self.keypoints3d, dtype=np.float64)
            if self.keypoints3d.shape != (KEYPOINT_COUNT, 3):
                raise ValueError("keypoints3d must be (21, 3)")
            if self.keypoints3d_mask is None:
                self.keypoints3d_mask = np.ones(KEYPOINT_COUNT, dtype=bool)
        has_mask = self.masks is not None and any(m is not None for m in self.masks)
        if not has_mask and self.keypoints2d is None and self.keypoints3d is None:
            raise ValueError("observation needs masks, 2D keypoints or 3D keypoints")


@dataclass
class PoseLibrary:
    """Reference articulations used by the nearest-neighbor pose prior."""

    poses: np.ndarray  # (M, 45)

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 2 or self.poses.shape[1] != ARTICULATION_DIM:
            raise ValueError("pose library must be (M, 45)")
        if self.poses.shape[0] == 0:
            raise ValueError("pose library must be nonempty")
        if not np.all(np.isfinite(self.poses)):
            raise ValueError("pose library contains non-finite values")

    @classmethod
    def generate(cls, seed: int, count: int = 256) -> "PoseLibrary":
        rng = np.random.default_rng(seed)
        return cls(np.stack([sample_articulation(rng) for _ in range(count)]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"poses": self.poses.tolist()}))

    @classmethod
    def load(cls, path: str | Path) -> "PoseLibrary":
        return cls(np.asarray(json.loads(Path(path).read_text())["poses"]))


@dataclass
class FitConfig:
    w2d: float = 100.0
    w3d: float = 0.0
    wseg: float = 10.0
    wshape: float = 100.0
    wpose: float = 0.1
    wnn: float = 10.0
    nn_count: int = 5
    iterations: int = 200
    learning_rate: float = 0.05
    lr_decay: float = 0.5
    lr_decay_every: int = 50
    global_stage_fraction: float = 0.25
    soft_sharpness: float = 2.0
    raster_band: float | None = 4.0
    # extra deterministic starts: per entry, one run whose articulation is
    # initialized with all fingers flexed by that many radians
    aux_articulation_starts: tuple = ()
    pose_library: PoseLibrary | None = None

    def __post_init__(self):
        for name in ("w2d", "w3d", "wseg", "wshape", "wpose", "wnn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.wnn > 0 and self.nn_count < 1:
            raise ValueError("nn_count must be >= 1 when wnn > 0")

    @classmethod
    def for_iteration(cls, iteration: int, **overrides) -> "FitConfig":
        """Weight schedule of the labeling loop.

        Iteration 0 has no 3D predictions yet, so w2d=100, w3d=0; later
        iterations use w2d=50, w3d=1000. The remaining weights stay at
        wseg=10, wshape=100, wnn=10, wpose=0.1.
        """
        base = cls(w2d=100.0, w3d=0.0) if iteration == 0 else cls(w2d=50.0, w3d=1000.0)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        out = {
            k: getattr(self, k)
            for k in (
                "w2d", "w3d", "wseg", "wshape", "wpose", "wnn", "nn_count",
                "iterations", "learning_rate", "lr_decay", "lr_decay_every",
                "global_stage_fraction", "soft_sharpness", "raster_band",
            )
        }
        return out

    @classmethod
    def load(cls, path: str | Path) -> "FitConfig":
        data = json.loads(Path(path).read_text())
        lib = data.pop("pose_library", None)
        cfg = cls(**data)
        if lib is not None:
            cfg.pose_library = PoseLibrary.load(Path(path).parent / lib)
        return cfg


@dataclass
class FitResult:
    params: HandParams
    losses: dict[str, float]
    total_loss: float
    initial_loss: float
    per_view_iou: list[float | None]
    keypoint_distances: np.ndarray | None  # (21,) meters vs observed 3D
    iterations: int
    converged: bool
    fitted_keypoints: np.ndarray = field(default_factory=lambda: np.zeros((KEYPOINT_COUNT, 3)))

    def to_dict(self) -> dict:
        return {
            "theta": self.params.as_vector().tolist(),
            "losses": self.losses,
            "total_loss": self.total_loss,
            "initial_loss": self.initial_loss,
            "per_view_iou": self.per_view_iou,
            "keypoint_distances": None
            if self.keypoint_distances is None
            else self.keypoint_distances.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "fitted_keypoints": self.fitted_keypoints.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, pose_dim: int = ARTICULATION_DIM) -> "FitResult":
        kd = data.get("keypoint_distances")
        return cls(
            params=HandParams.from_vector(np.asarray(data["theta"]), pose_dim),
            losses=dict(data["losses"]),
            total_loss=float(data["total_loss"]),
            initial_loss=float(data["initial_loss"]),
            per_view_iou=list(data["per_view_iou"]),
            keypoint_distances=None if kd is None else np.asarray(kd),
            iterations=int(data["iterations"]),
            converged=bool(data["converged"]),
            fitted_keypoints=np.asarray(data.get("fitted_keypoints", np.zeros((KEYPOINT_COUNT, 3)))),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path, pose_dim: int = ARTICULATION_DIM) -> "FitResult":
        return cls.from_dict(json.loads(Path(path).read_text()), pose_dim)


def _norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.sqrt((x * x).sum(dim=dim) + _NORM_EPS)


def _project_torch(
    cam: Camera, points: torch.Tensor, with_depth: bool = False
):
    r = torch.as_tensor(cam.rotation, dtype=points.dtype)
    t = torch.as_tensor(cam.translation, dtype=points.dtype)
    pc = points @ r.T + t
    z = pc[:, 2].clamp_min(MIN_DEPTH)
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    uv = torch.stack([u, v], dim=1)
    return (uv, pc[:, 2]) if with_depth else uv


class _ObservationPack:
    """Per-fit constant tensors derived from an Observation."""

    def __init__(self, obs: Observation, cfg: FitConfig):
        self.obs = obs
        self.cfg = cfg
        self.kp2d = None
        if obs.keypoints2d is not None and obs.visibility.any():
            # all views batched: rotations (V,3,3), translations (V,3)
            rs = np.stack([c.rotation for c in obs.cameras])
            ts = np.stack([c.translation for c in obs.cameras])
            intr = np.array([[c.fx, c.fy, c.cx, c.cy] for c in obs.cameras])
            self.kp2d = {
                "R": torch.tensor(rs, dtype=torch.float64),
                "t": torch.tensor(ts, dtype=torch.float64),
                "intr": torch.tensor(intr, dtype=torch.float64),
                "vis": torch.tensor(obs.visibility),
                "target": torch.tensor(obs.keypoints2d, dtype=torch.float64),
            }
        self.seg_views = []  # (view, mask tensor, edt tensor, res)
        if obs.masks is not None:
            for i, m in enumerate(obs.masks):
                if m is None:
                    continue
                values = torch.tensor(m.values, dtype=torch.float64)
                if m.hard().any():
                    dist = torch.tensor(edt(m), dtype=torch.float64)
                else:
                    warnings.warn(
                        f"view {i}: observed mask has no foreground, EDT term skipped",
                        stacklevel=3,
                    )
                    dist = None
                self.seg_views.append((i, values, dist, (m.width, m.height)))
        self.kp3d = None
        if obs.keypoints3d is not None:
            mask = obs.keypoints3d_mask
            if mask is None:
                mask = np.ones(KEYPOINT_COUNT, dtype=bool)
            sel = np.nonzero(mask)[0]
            if sel.size:
                self.kp3d = (torch.tensor(sel), torch.tensor(obs.keypoints3d[sel], dtype=torch.float64))
        self.library = None
        if cfg.pose_library is not None:
            self.library = torch.tensor(cfg.pose_library.poses, dtype=torch.float64)


def _loss_terms(
    model: HandModelDef,
    shape_t: torch.Tensor,
    pose_t: torch.Tensor,
    rot_t: torch.Tensor,
    trans_t: torch.Tensor,
    pack: _ObservationPack,
    cfg: FitConfig,
    need_mesh: bool = True,
) -> dict[str, torch.Tensor]:
    zero = torch.zeros((), dtype=torch.float64)
    terms = {k: zero for k in LOSS_TERMS}
    verts = kps = None
    if need_mesh:
        if cfg.wseg > 0 and pack.seg_views:
            verts, kps = forward_torch(model, shape_t, pose_t, rot_t, trans_t)
        else:
            # no silhouette term: keypoints alone are enough and much cheaper
            kps = keypoints_torch(model, shape_t, pose_t, rot_t, trans_t)

    if cfg.w2d > 0 and pack.kp2d is not None:
        k2 = pack.kp2d
        pc = torch.einsum("vab,kb->vka", k2["R"], kps) + k2["t"][:, None, :]
        z = pc[..., 2].clamp_min(MIN_DEPTH)
        intr = k2["intr"]
        u = intr[:, 0:1] * pc[..., 0] / z + intr[:, 2:3]
        v = intr[:, 1:2] * pc[..., 1] / z + intr[:, 3:4]
        uv = torch.stack([u, v], dim=-1)  # (views, 21, 2)
        dists = _norm(k2["target"] - uv)
        terms["kp2d"] = cfg.w2d * (dists * k2["vis"]).sum()
    if cfg.w3d > 0 and pack.kp3d is not None:
        sel, target = pack.kp3d
        terms["kp3d"] = cfg.w3d * _norm(target - kps[sel]).sum()
    if cfg.wseg > 0 and pack.seg_views:
        acc = zero
        for view, mask_t, dist_t, res in pack.seg_views:
            uv, depth = _project_torch(pack.obs.cameras[view], verts, with_depth=True)
            faces = silhouette.visible_faces(model.faces, depth.detach().numpy())
            if faces.size == 0:
                soft = torch.zeros((res[1], res[0]), dtype=uv.dtype)
            else:
                soft = silhouette.soft_mask_torch(
                    uv, faces, res, cfg.soft_sharpness, cfg.raster_band
                )
            acc = acc + ((mask_t - soft) ** 2).mean()
            if dist_t is not None:
                acc = acc + (dist_t * soft).mean()
        terms["seg"] = cfg.wseg * acc
    if cfg.wshape > 0:
        terms["shape"] = cfg.wshape * _norm(shape_t)
    if cfg.wpose > 0 or cfg.wnn > 0:
        beta = torch.as_tensor(model.pose_mean, dtype=torch.float64) + (
            torch.as_tensor(model.pose_pca_basis, dtype=torch.float64) @ pose_t
        )
        pose_term = zero
        if cfg.wpose > 0:
            pose_term = pose_term + cfg.wpose * pose_t.abs().sum()
        if cfg.wnn > 0:
            if pack.library is None:
                raise ValueError("wnn > 0 requires a pose library")
            with torch.no_grad():
                dists = torch.linalg.norm(pack.library - beta, dim=1)
                nn = torch.topk(dists, k=min(cfg.nn_count, len(dists)), largest=False).indices
            pose_term = pose_term + cfg.wnn * _norm(pack.library[nn] - beta).sum()
        terms["pose"] = pose_term
    return terms


def _params_to_tensors(params: HandParams, requires_grad: bool = False):
    mk = lambda a: torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)
    return mk(params.shape), mk(params.pose_coeffs), mk(params.global_rot), mk(params.global_trans)


def _terms_numpy(model, params, obs, cfg) -> dict[str, float]:
    pack = _ObservationPack(obs, cfg)
    with torch.no_grad():
        terms = _loss_terms(model, *_params_to_tensors(params), pack, cfg)
    return {k: float(v) for k, v in terms.items()}


# --- public per-term operations ---------------------------------------------


def loss_2d(params: HandParams, model: HandModelDef, obs: Observation, w2d: float) -> float:
    """Sum over views and visible keypoints of 2D reprojection distance (px)."""
    if obs.keypoints2d is None or not obs.visibility.any():
        warnings.warn("no visible 2D keypoints; 2D loss is 0", stacklevel=2)
        return 0.0
    cfg = FitConfig(w2d=w2d, w3d=0, wseg=0, wshape=0, wpose=0, wnn=0)
    return _terms_numpy(model, params, obs, cfg)["kp2d"]


def loss_3d(params: HandParams, model: HandModelDef, obs: Observation, w3d: float) -> float:
    """Sum over annotated keypoints of 3D distance (meters)."""
    if obs.keypoints3d is None or not obs.keypoints3d_mask.any():
        warnings.warn("no 3D keypoints; 3D loss is 0", stacklevel=2)
        return 0.0
    cfg = FitConfig(w2d=0, w3d=w3d, wseg=0, wshape=0, wpose=0, wnn=0)
    return _terms_numpy(model, params, obs, cfg)["kp3d"]


def loss_seg(
    params: HandParams,
    model: HandModelDef,
    obs: Observation,
    wseg: float,
    sharpness: float = 2.0,
    band: float | None = None,
) -> float:
    """Per-view mean squared mask difference plus mean(EDT(observed) * soft)."""
    if obs.masks is None or all(m is None for m in obs.masks):
        warnings.warn("no observation masks; segmentation loss is 0", stacklevel=2)
        return 0.0
    cfg = FitConfig(
        w2d=0, w3d=0, wseg=wseg, wshape=0, wpose=0, wnn=0,
        soft_sharpness=sharpness, raster_band=band,
    )
    return _terms_numpy(model, params, obs, cfg)["seg"]


def prior_shape(params: HandParams, wshape: float) -> float:
    """Euclidean norm of the shape coefficients, keeping shapes near the mean."""
    return float(wshape * np.linalg.norm(params.shape))


def prior_pose(
    params: HandParams,
    model: HandModelDef,
    lib: PoseLibrary | None,
    wpose: float,
    wnn: float,
    nn_count: int = 5,
) -> float:
    """Sum of absolute PCA coefficients plus pull to N nearest library poses."""
    value = wpose * float(np.abs(params.pose_coeffs).sum())
    if wnn > 0:
        if lib is None:
            raise ValueError("wnn > 0 requires a pose library")
        beta = params.articulation(model)
        dists = np.linalg.norm(lib.poses - beta, axis=1)
        nearest = np.sort(dists)[: min(nn_count, len(dists))]
        value += wnn * float(nearest.sum())
    return value


def total_loss(
    params: HandParams, model: HandModelDef, obs: Observation, cfg: FitConfig
) -> tuple[float, dict[str, float]]:
    """Five-term objective; the breakdown sums exactly to the total."""
    terms = _terms_numpy(model, params, obs, cfg)
    return sum(terms.values()), terms


def shape_supervision_loss(
    pred: tuple[HandParams, HandMesh],
    gt: tuple[HandParams, HandMesh],
    cam: Camera,
    w3d: float = 1000.0,
    w2d: float = 10.0,
    wp: float = 1.0,
) -> float:
    """Squared-l2 supervision loss over keypoints, projections and parameters."""
    pred_params, pred_mesh = pred
    gt_params, gt_mesh = gt
    d3 = float(((gt_mesh.keypoints - pred_mesh.keypoints) ** 2).sum())
    pc_gt = cam.world_to_cam(gt_mesh.keypoints)
    pc_pred = cam.world_to_cam(pred_mesh.keypoints)
    uv_gt = np.stack(
        [cam.fx * pc_gt[:, 0] / pc_gt[:, 2] + cam.cx, cam.fy * pc_gt[:, 1] / pc_gt[:, 2] + cam.cy],
        axis=1,
    )
    uv_pred = np.stack(
        [
            cam.fx * pc_pred[:, 0] / pc_pred[:, 2] + cam.cx,
            cam.fy * pc_pred[:, 1] / pc_pred[:, 2] + cam.cy,
        ],
        axis=1,
    )
    d2 = float(((uv_gt - uv_pred) ** 2).sum())
    dp = float(((gt_params.as_vector() - pred_params.as_vector()) ** 2).sum())
    return w3d * d3 + w2d * d2 + wp * dp


# --- optimization ------------------------------------------------------------


def _curled_start(model: HandModelDef, init: HandParams, flexion: float) -> HandParams:
    """Copy of init with the articulation preset to a uniform finger curl."""
    beta = np.tile([flexion, 0.0, 0.0], ARTICULATION_DIM // 3)
    coeffs, *_ = np.linalg.lstsq(model.pose_pca_basis, beta - model.pose_mean, rcond=None)
    out = init.copy()
    out.pose_coeffs = coeffs
    return out


def _check_finite(terms, step):
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise FitDivergedError(name, step)


def _fit_single(
    model: HandModelDef, pack: _ObservationPack, cfg: FitConfig, init: HandParams
) -> tuple[float, np.ndarray, float]:
    """One ADAM trajectory; returns (best total, best theta, initial total)."""
    tensors = _params_to_tensors(init, requires_grad=True)
    shape_t, pose_t, rot_t, trans_t = tensors

    def snapshot():
        return np.concatenate([t.detach().numpy().copy() for t in tensors])

    with torch.no_grad():
        initial_terms = _loss_terms(model, shape_t, pose_t, rot_t, trans_t, pack, cfg)
    _check_finite(initial_terms, 0)
    initial_total = float(sum(initial_terms.values()))
    best_total = initial_total
    best_vec = init.as_vector().copy()

    n_global = int(round(cfg.iterations * cfg.global_stage_fraction))
    stage_params = [[rot_t, trans_t], [shape_t, pose_t, rot_t, trans_t]]
    step = 0
    for stage, params_group in enumerate(stage_params):
        steps = n_global if stage == 0 else cfg.iterations - n_global
        if steps <= 0:
            continue
        opt = torch.optim.Adam(params_group, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        for _ in range(steps):
            for g in opt.param_groups:
                g["lr"] = cfg.learning_rate * cfg.lr_decay ** (step // cfg.lr_decay_every)
            opt.zero_grad()
            terms = _loss_terms(model, shape_t, pose_t, rot_t, trans_t, pack, cfg)
            _check_finite(terms, step)
            total = sum(terms.values())
            value = float(total.detach())
            if value < best_total:
                best_total = value
                best_vec = snapshot()
            total.backward()
            opt.step()
            step += 1
    # the loop evaluates before stepping, so the final iterate needs a look
    if cfg.iterations > 0:
        with torch.no_grad():
            terms = _loss_terms(model, shape_t, pose_t, rot_t, trans_t, pack, cfg)
        _check_finite(terms, step)
        if float(sum(terms.values())) < best_total:
            best_total = float(sum(terms.values()))
            best_vec = snapshot()
    return best_total, best_vec, initial_total


def fit(
    model: HandModelDef, obs: Observation, cfg: FitConfig, init: HandParams
) -> FitResult:
    """Minimize the objective with ADAM (beta1=0.9, beta2=0.999, eps=1e-8).

    Each run updates the global pose only for the first quarter of the
    schedule, then all parameters. ``aux_articulation_starts`` adds
    deterministic restarts from pre-curled articulations; the best run by
    final total wins, and the user's init is always among the runs, so the
    returned total never exceeds the initial one.
    """
    pack = _ObservationPack(obs, cfg)
    best_total, best_vec, initial_total = _fit_single(model, pack, cfg, init)
    for flexion in cfg.aux_articulation_starts:
        aux_total, aux_vec, _ = _fit_single(
            model, pack, cfg, _curled_start(model, init, flexion)
        )
        if aux_total < best_total:
            best_total, best_vec = aux_total, aux_vec

    best_params = HandParams.from_vector(best_vec, model.pose_dim)
    with torch.no_grad():
        final_terms = _loss_terms(model, *_params_to_tensors(best_params), pack, cfg)
    final_total = float(sum(final_terms.values()))

    mesh = forward(model, best_params)
    per_view_iou: list[float | None] = []
    if obs.masks is not None:
        for cam, m in zip(obs.cameras, obs.masks):
            if m is None:
                per_view_iou.append(None)
            else:
                rendered = rasterize_hard(mesh, cam, (m.width, m.height))
                per_view_iou.append(iou(rendered, m))
    distances = None
    if obs.keypoints3d is not None:
        distances = np.linalg.norm(obs.keypoints3d - mesh.keypoints, axis=1)
        if obs.keypoints3d_mask is not None:
            distances[~obs.keypoints3d_mask] = np.nan

    return FitResult(
        params=best_params,
        losses={k: float(v) for k, v in final_terms.items()},
        total_loss=final_total,
        initial_loss=initial_total,
        per_view_iou=per_view_iou,
        keypoint_distances=distances,
        iterations=cfg.iterations,
        converged=final_total <= initial_total,
        fitted_keypoints=mesh.keypoints,
    )
