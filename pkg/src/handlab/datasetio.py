"""Scene synthesis, sample/dataset persistence, label export, compositing."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fitting import FitResult, Observation
from .geometry import Camera, load_cameras, save_cameras
from .loop import DatasetState, Prediction, Sample, SampleState
from .model import HandModelDef, HandParams, KEYPOINT_COUNT, forward, sample_articulation
from .silhouette import Mask, rasterize_depth, rasterize_hard

# a keypoint counts as self-occluded when the surface in front of it is
# closer than its skeleton depth by more than this margin
VISIBILITY_MARGIN_M = 0.03


def build_cube_rig(
    edge: float = 1.0,
    image_size: int = 128,
    focal: float | None = None,
    center=(0.0, 0.0, 0.0),
) -> list[Camera]:
    """Eight cameras at the corners of a cube, all aimed at its center."""
    center = np.asarray(center, dtype=np.float64)
    if focal is None:
        focal = 1.8 * image_size
    half = edge / 2.0
    cams = []
    for corner in itertools.product((-half, half), repeat=3):
        eye = center + np.asarray(corner)
        fwd = center - eye
        fwd = fwd / np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        if abs(np.dot(fwd, up)) > 0.95:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rotation = np.stack([right, down, fwd])
        cams.append(
            Camera(
                fx=focal,
                fy=focal,
                cx=image_size / 2.0,
                cy=image_size / 2.0,
                rotation=rotation,
                translation=-rotation @ eye,
                width=image_size,
                height=image_size,
            )
        )
    return cams


@dataclass
class SceneSpec:
    """Recipe for one synthetic multi-view sample."""

    gt: HandParams
    cameras: list[Camera]
    mask_resolution: tuple[int, int] = (128, 128)
    noise_std_px: float = 1.0
    visibility: str = "zbuffer"  # or "all"
    seed: int = 0

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise ValueError("a scene needs at least 2 cameras")
        if self.noise_std_px < 0:
            raise ValueError("noise std must be >= 0")
        if self.visibility not in ("zbuffer", "all"):
            raise ValueError("visibility policy must be 'zbuffer' or 'all'")


def random_hand_params(
    model: HandModelDef,
    rng: np.random.Generator,
    shape_std: float = 0.5,
    articulation_scale: float = 1.0,
    trans_range: float = 0.05,
) -> HandParams:
    """Random plausible ground-truth parameters for scene synthesis."""
    beta = sample_articulation(rng, scale=articulation_scale)
    # identity pose basis means coefficients are the articulation itself
    coeffs = np.linalg.lstsq(model.pose_pca_basis, beta - model.pose_mean, rcond=None)[0]
    return HandParams(
        shape=np.clip(rng.standard_normal(10) * shape_std, -1.2, 1.2),
        pose_coeffs=coeffs,
        global_rot=rng.uniform(-np.pi, np.pi, 3) * np.array([1.0, 1.0, 1.0]) * 0.6,
        global_trans=rng.uniform(-trans_range, trans_range, 3),
    )


def generate_scene(
    model: HandModelDef,
    spec: SceneSpec,
    sample_id: str = "sample_0",
    sequence_id: str = "seq_0",
    frame_index: int = 0,
) -> Sample:
    """Render ground truth into masks and noisy 2D keypoint annotations.

    Per-view keypoint visibility comes from a z-buffer self-occlusion test;
    deterministic in the scene seed.
    """
    rng = np.random.default_rng(spec.seed)
    mesh = forward(model, spec.gt)
    w, h = spec.mask_resolution
    masks: list[Mask | None] = []
    kp2d = np.zeros((len(spec.cameras), KEYPOINT_COUNT, 2))
    vis = np.zeros((len(spec.cameras), KEYPOINT_COUNT), dtype=bool)
    for i, cam in enumerate(spec.cameras):
        masks.append(rasterize_hard(mesh, cam, (w, h)))
        pc = cam.world_to_cam(mesh.keypoints)
        uv = np.stack(
            [cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy],
            axis=1,
        )
        kp2d[i] = uv + rng.normal(0.0, spec.noise_std_px, uv.shape)
        if spec.visibility == "all":
            vis[i] = True
        else:
            zbuf = rasterize_depth(mesh, cam, (w, h))
            px = np.clip(np.floor(uv[:, 0]).astype(int), 0, w - 1)
            py = np.clip(np.floor(uv[:, 1]).astype(int), 0, h - 1)
            in_frame = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
            depth_gap = pc[:, 2] - zbuf[py, px]
            vis[i] = in_frame & (depth_gap < VISIBILITY_MARGIN_M)
    obs = Observation(cameras=list(spec.cameras), masks=masks, keypoints2d=kp2d, visibility=vis)
    return Sample(
        id=sample_id,
        sequence_id=sequence_id,
        frame_index=frame_index,
        observation=obs,
        gt_params=spec.gt.copy(),
    )


def composite_cut_paste(fg_image: np.ndarray, alpha: Mask, bg_image: np.ndarray) -> np.ndarray:
    """Blend foreground over a new background using the mask as alpha."""
    fg = np.asarray(fg_image, dtype=np.float64)
    bg = np.asarray(bg_image, dtype=np.float64)
    if fg.shape != bg.shape:
        raise ValueError("foreground and background shapes differ")
    a = alpha.values
    if fg.ndim == 3:
        a = a[:, :, None]
    if a.shape[:2] != fg.shape[:2]:
        raise ValueError("alpha dimensions do not match the images")
    return a * fg + (1.0 - a) * bg


# ---------------------------------------------------------------------------
# sample directory layout


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def save_sample(sample: Sample, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    obs = sample.observation
    save_cameras(obs.cameras, directory / "cameras.json")
    if obs.masks is not None:
        for i, m in enumerate(obs.masks):
            if m is not None:
                m.save_png(directory / f"view_{i}_mask.png")
    ann = {
        "sample_id": sample.id,
        "sequence_id": sample.sequence_id,
        "frame_index": sample.frame_index,
        "state": sample.state.value,
        "annotation_rounds": sample.annotation_rounds,
        "keypoints2d": None if obs.keypoints2d is None else obs.keypoints2d.tolist(),
        "visibility": None if obs.visibility is None else obs.visibility.tolist(),
        "keypoints3d": None if obs.keypoints3d is None else obs.keypoints3d.tolist(),
        "predicted": None
        if sample.predicted is None
        else {
            "points": sample.predicted.points.tolist(),
            "confidences": sample.predicted.confidences.tolist(),
            "mean_confidence": sample.predicted.mean_confidence,
        },
    }
    _atomic_write(directory / "annotations.json", json.dumps(ann))
    if sample.fit is not None:
        _atomic_write(directory / "fit.json", json.dumps(sample.fit.to_dict()))
    if sample.gt_params is not None:
        _atomic_write(
            directory / "gt.json", json.dumps({"theta": sample.gt_params.as_vector().tolist()})
        )


def load_sample(directory: str | Path, pose_dim: int = 45) -> Sample:
    directory = Path(directory)
    cams = load_cameras(directory / "cameras.json")
    ann = json.loads((directory / "annotations.json").read_text())
    masks: list[Mask | None] = []
    any_mask = False
    for i in range(len(cams)):
        p = directory / f"view_{i}_mask.png"
        if p.exists():
            masks.append(Mask.load_png(p))
            any_mask = True
        else:
            masks.append(None)
    obs = Observation(
        cameras=cams,
        masks=masks if any_mask else None,
        keypoints2d=None if ann["keypoints2d"] is None else np.asarray(ann["keypoints2d"]),
        visibility=None if ann["visibility"] is None else np.asarray(ann["visibility"], dtype=bool),
        keypoints3d=None if ann["keypoints3d"] is None else np.asarray(ann["keypoints3d"]),
    )
    sample = Sample(
        id=ann["sample_id"],
        sequence_id=ann["sequence_id"],
        frame_index=int(ann["frame_index"]),
        observation=obs,
        state=SampleState(ann["state"]),
        annotation_rounds=int(ann.get("annotation_rounds", 0)),
    )
    if ann.get("predicted") is not None:
        sample.predicted = Prediction(
            points=np.asarray(ann["predicted"]["points"]),
            confidences=np.asarray(ann["predicted"]["confidences"]),
            mean_confidence=float(ann["predicted"]["mean_confidence"]),
        )
    fit_path = directory / "fit.json"
    if fit_path.exists():
        sample.fit = FitResult.load(fit_path, pose_dim)
    gt_path = directory / "gt.json"
    if gt_path.exists():
        theta = np.asarray(json.loads(gt_path.read_text())["theta"])
        sample.gt_params = HandParams.from_vector(theta, pose_dim)
    return sample


def save_dataset(
    state: DatasetState, samples: dict[str, Sample], directory: str | Path
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _atomic_write(directory / "manifest.json", json.dumps(state.to_canonical_dict(), indent=2))
    for sid, sample in sorted(samples.items()):
        save_sample(sample, directory / f"sample_{sid}")


def load_dataset(directory: str | Path, pose_dim: int = 45) -> tuple[DatasetState, dict[str, Sample]]:
    directory = Path(directory)
    state = DatasetState.from_dict(json.loads((directory / "manifest.json").read_text()))
    samples = {}
    for sub in sorted(directory.glob("sample_*")):
        sample = load_sample(sub, pose_dim)
        samples[sample.id] = sample
    return state, samples


def export_labels(
    state: DatasetState,
    samples: dict[str, Sample],
    model: HandModelDef,
    out_dir: str | Path,
) -> list[str]:
    """Write index-aligned K.json / xyz.json / mano.json for accepted samples."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = sorted(state.accepted_ids)
    ks, xyzs, manos = [], [], []
    for sid in ids:
        sample = samples[sid]
        if sample.fit is None:
            raise ValueError(f"accepted sample {sid} has no fit")
        theta = sample.fit.params
        mesh = forward(model, theta)
        ks.append(sample.observation.cameras[0].intrinsics.tolist())
        xyzs.append(mesh.keypoints.tolist())
        manos.append(theta.as_vector().tolist())
    _atomic_write(out_dir / "K.json", json.dumps(ks))
    _atomic_write(out_dir / "xyz.json", json.dumps(xyzs))
    _atomic_write(out_dir / "mano.json", json.dumps(manos))
    return ids
