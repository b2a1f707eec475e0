"""Bootstrapped labeling loop: verify, select, annotate, accumulate.

Each iteration predicts keypoints for the unlabeled pool, fits the model,
auto-accepts via hard thresholds, queues the rest for (simulated or human)
verification and grows the labeled set.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .fitting import FitResult, Observation, fit
from .model import (
    HandModelDef,
    HandParams,
    KEYPOINT_COUNT,
    SPARSE_KEYPOINTS,
    forward,
)
from .volumes import VolumeGrid, extract_keypoints, simulate_predictor

# hard acceptance thresholds for the automatic verifier
MEAN_CONFIDENCE_MIN = 0.8  # strict: mean confidence must exceed this
KEYPOINT_CONFIDENCE_MIN = 0.6
MEAN_IOU_MIN = 0.7
LOW_IOU_THRESHOLD = 0.5
LOW_IOU_MAX_VIEWS = 2
MEAN_DISTANCE_MAX_M = 0.005
MAX_DISTANCE_MAX_M = 0.01

DEFAULT_TEMPORAL_GAP = 5
DEFAULT_FLAT_POSE_EPS = 0.5


class SampleState(str, Enum):
    UNLABELED = "unlabeled"
    SPARSE2D = "sparse2d"
    FITTED = "fitted"
    ACCEPTED_HEURISTIC = "accepted_heuristic"
    ACCEPTED_MANUAL = "accepted_manual"
    REJECTED = "rejected"


_TRANSITIONS = {
    SampleState.UNLABELED: {SampleState.SPARSE2D, SampleState.FITTED},
    SampleState.SPARSE2D: {SampleState.FITTED},
    SampleState.FITTED: {
        SampleState.FITTED,
        SampleState.ACCEPTED_HEURISTIC,
        SampleState.ACCEPTED_MANUAL,
        SampleState.REJECTED,
        SampleState.SPARSE2D,
    },
    SampleState.ACCEPTED_HEURISTIC: set(),
    SampleState.ACCEPTED_MANUAL: set(),
    SampleState.REJECTED: set(),
}


class IllegalTransitionError(ValueError):
    pass


@dataclass
class Prediction:
    """Keypoints lifted from score volumes with their confidences."""

    points: np.ndarray  # (21,3) world
    confidences: np.ndarray  # (21,)
    mean_confidence: float


@dataclass
class Sample:
    id: str
    sequence_id: str
    frame_index: int
    observation: Observation
    state: SampleState = SampleState.UNLABELED
    fit: FitResult | None = None
    predicted: Prediction | None = None
    gt_params: HandParams | None = None
    annotation_rounds: int = 0

    def transition(self, new_state: SampleState) -> None:
        if new_state == self.state and self.state == SampleState.FITTED:
            return
        if new_state not in _TRANSITIONS[self.state]:
            raise IllegalTransitionError(
                f"sample {self.id}: cannot go {self.state.value} -> {new_state.value}"
            )
        self.state = new_state

    @property
    def accepted(self) -> bool:
        return self.state in (SampleState.ACCEPTED_HEURISTIC, SampleState.ACCEPTED_MANUAL)


@dataclass
class DatasetState:
    """Accumulating labeled set with per-iteration provenance streams."""

    iteration: int = 0
    accepted_ids: set[str] = field(default_factory=set)
    pool_ids: set[str] = field(default_factory=set)
    streams: list[dict[str, list[str]]] = field(default_factory=list)

    def to_canonical_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "accepted_ids": sorted(self.accepted_ids),
            "pool_ids": sorted(self.pool_ids),
            "streams": [
                {k: sorted(v) for k, v in stream.items()} for stream in self.streams
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetState":
        return cls(
            iteration=int(data["iteration"]),
            accepted_ids=set(data["accepted_ids"]),
            pool_ids=set(data["pool_ids"]),
            streams=[{k: list(v) for k, v in s.items()} for s in data["streams"]],
        )


@dataclass
class HeuristicCriterion:
    name: str
    value: float
    threshold: float
    passed: bool
    margin: float  # positive = how far on the passing side

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "threshold": self.threshold,
            "passed": self.passed,
            "margin": self.margin,
        }


@dataclass
class HeuristicReport:
    accept: bool
    criteria: list[HeuristicCriterion]

    def to_dict(self) -> dict:
        return {"accept": self.accept, "criteria": [c.to_dict() for c in self.criteria]}

    def failed_names(self) -> list[str]:
        return [c.name for c in self.criteria if not c.passed]


def heuristic_verify_stats(
    mean_confidence: float,
    min_confidence: float,
    ious: list[float],
    mean_distance_m: float,
    max_distance_m: float,
) -> HeuristicReport:
    """Apply the hard acceptance thresholds to fit/prediction statistics.

    Boundary semantics: mean confidence must be strictly above 0.8; the
    0.6 keypoint confidence and 0.7 mean IoU bounds are inclusive, as are
    the 0.5 cm mean and 1 cm max distance bounds.
    """
    ious = list(ious)
    mean_iou = float(np.mean(ious)) if ious else 0.0
    low_views = int(sum(1 for v in ious if v < LOW_IOU_THRESHOLD))
    criteria = [
        HeuristicCriterion(
            "mean_confidence", mean_confidence, MEAN_CONFIDENCE_MIN,
            mean_confidence > MEAN_CONFIDENCE_MIN, mean_confidence - MEAN_CONFIDENCE_MIN,
        ),
        HeuristicCriterion(
            "min_keypoint_confidence", min_confidence, KEYPOINT_CONFIDENCE_MIN,
            min_confidence >= KEYPOINT_CONFIDENCE_MIN, min_confidence - KEYPOINT_CONFIDENCE_MIN,
        ),
        HeuristicCriterion(
            "mean_iou", mean_iou, MEAN_IOU_MIN, mean_iou >= MEAN_IOU_MIN, mean_iou - MEAN_IOU_MIN
        ),
        HeuristicCriterion(
            "low_iou_views", float(low_views), float(LOW_IOU_MAX_VIEWS),
            low_views <= LOW_IOU_MAX_VIEWS, float(LOW_IOU_MAX_VIEWS - low_views),
        ),
        HeuristicCriterion(
            "mean_keypoint_distance", mean_distance_m, MEAN_DISTANCE_MAX_M,
            mean_distance_m <= MEAN_DISTANCE_MAX_M, MEAN_DISTANCE_MAX_M - mean_distance_m,
        ),
        HeuristicCriterion(
            "max_keypoint_distance", max_distance_m, MAX_DISTANCE_MAX_M,
            max_distance_m <= MAX_DISTANCE_MAX_M, MAX_DISTANCE_MAX_M - max_distance_m,
        ),
    ]
    return HeuristicReport(accept=all(c.passed for c in criteria), criteria=criteria)


def heuristic_verify(sample: Sample) -> HeuristicReport:
    """Verify a fitted sample against its predictions and mask IoU."""
    if sample.fit is None:
        raise ValueError(f"sample {sample.id} has no fit")
    if sample.predicted is None:
        raise ValueError(f"sample {sample.id} has no predictions")
    ious = [v for v in sample.fit.per_view_iou if v is not None]
    distances = np.linalg.norm(
        sample.predicted.points - sample.fit.fitted_keypoints, axis=1
    )
    return heuristic_verify_stats(
        mean_confidence=float(sample.predicted.mean_confidence),
        min_confidence=float(sample.predicted.confidences.min()),
        ious=ious,
        mean_distance_m=float(distances.mean()),
        max_distance_m=float(distances.max()),
    )


def select_for_manual(
    samples: list[Sample],
    count: int,
    min_temporal_gap: int = DEFAULT_TEMPORAL_GAP,
    flat_pose_eps: float = DEFAULT_FLAT_POSE_EPS,
) -> list[str]:
    """Pick verification candidates: confident, temporally spread, non-flat.

    Samples below the pool's median confidence are dropped, then candidates
    are taken by descending confidence, skipping ones within
    ``min_temporal_gap`` frames of an already-selected sample of the same
    sequence and ones whose fitted articulation is nearly flat.
    """
    pool = [s for s in samples if s.predicted is not None and s.fit is not None]
    if not pool:
        return []
    confidences = np.array([s.predicted.mean_confidence for s in pool])
    median = float(np.median(confidences))
    eligible = [s for s, c in zip(pool, confidences) if c >= median]
    eligible.sort(key=lambda s: (-s.predicted.mean_confidence, s.id))
    selected: list[Sample] = []
    for s in eligible:
        if len(selected) >= count:
            break
        model_beta = s.fit.params.pose_coeffs
        articulation_norm = float(np.linalg.norm(model_beta))
        if articulation_norm < flat_pose_eps:
            continue
        clash = any(
            t.sequence_id == s.sequence_id
            and abs(t.frame_index - s.frame_index) < min_temporal_gap
            for t in selected
        )
        if clash:
            continue
        selected.append(s)
    return [s.id for s in selected]


def accumulate(
    state: DatasetState, dh: list[str], dm: list[str], dl: list[str]
) -> DatasetState:
    """D_{i+1} = D_i + D^h + D^m + D^l; streams must be pairwise disjoint."""
    sets = {"h": set(dh), "m": set(dm), "l": set(dl)}
    seen = set(state.accepted_ids)
    for name, ids in sets.items():
        overlap = ids & seen
        if overlap:
            raise ValueError(f"stream {name} overlaps accepted set: {sorted(overlap)}")
        seen |= ids
    if len(sets["h"]) + len(sets["m"]) + len(sets["l"]) != len(
        sets["h"] | sets["m"] | sets["l"]
    ):
        dupes = (sets["h"] & sets["m"]) | (sets["h"] & sets["l"]) | (sets["m"] & sets["l"])
        raise ValueError(f"streams overlap each other: {sorted(dupes)}")
    new_accepted = state.accepted_ids | sets["h"] | sets["m"] | sets["l"]
    return DatasetState(
        iteration=state.iteration + 1,
        accepted_ids=new_accepted,
        pool_ids=state.pool_ids - new_accepted,
        streams=state.streams + [{k: sorted(v) for k, v in sets.items()}],
    )


@dataclass
class Annotation:
    """Outcome of one verification: accept, reject, or sparse 2D keypoints."""

    kind: str  # "accept" | "reject" | "keypoints"
    keypoints: list[tuple[int, int, float, float]] = field(default_factory=list)
    # entries are (view, keypoint_id, u, v)


def oracle_annotate(sample: Sample, model: HandModelDef, accept_tol: float = 0.003) -> Annotation:
    """Simulated annotator with access to ground truth.

    Accepts fits whose true mean vertex error is below ``accept_tol``;
    otherwise provides exact sparse keypoint annotations (wrist and five
    fingertips in every view) once, and rejects on a second bad pass.
    """
    if sample.gt_params is None or sample.fit is None:
        raise ValueError("oracle annotator needs ground truth and a fit")
    gt_mesh = forward(model, sample.gt_params)
    fit_mesh = forward(model, sample.fit.params)
    err = float(np.linalg.norm(gt_mesh.vertices - fit_mesh.vertices, axis=1).mean())
    if err < accept_tol:
        return Annotation(kind="accept")
    if sample.annotation_rounds >= 1:
        return Annotation(kind="reject")
    entries = []
    for view, cam in enumerate(sample.observation.cameras):
        pc = cam.world_to_cam(gt_mesh.keypoints)
        for k in SPARSE_KEYPOINTS:
            u = cam.fx * pc[k, 0] / pc[k, 2] + cam.cx
            v = cam.fy * pc[k, 1] / pc[k, 2] + cam.cy
            entries.append((view, k, float(u), float(v)))
    return Annotation(kind="keypoints", keypoints=entries)


def apply_sparse_annotations(sample: Sample, entries) -> None:
    """Merge sparse 2D annotations into the observation and mark for refit."""
    obs = sample.observation
    n = len(obs.cameras)
    if obs.keypoints2d is None:
        obs.keypoints2d = np.zeros((n, KEYPOINT_COUNT, 2))
        obs.visibility = np.zeros((n, KEYPOINT_COUNT), dtype=bool)
    for view, k, u, v in entries:
        if k not in SPARSE_KEYPOINTS:
            raise ValueError(f"keypoint {k} is not in the sparse annotation set")
        obs.keypoints2d[view, k] = (u, v)
        obs.visibility[view, k] = True
    sample.annotation_rounds += 1
    sample.transition(SampleState.SPARSE2D)


@dataclass
class IterationReport:
    iteration: int
    pool_size_before: int
    heuristic_ids: list[str]
    manual_ids: list[str]
    annotated_ids: list[str]
    rejected_ids: list[str]
    accepted_total: int
    mean_true_keypoint_error_m: float | None = None
    new_accept_true_error_m: float | None = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "pool_size_before": self.pool_size_before,
            "num_heuristic": len(self.heuristic_ids),
            "num_manual": len(self.manual_ids),
            "num_annotated": len(self.annotated_ids),
            "num_rejected": len(self.rejected_ids),
            "heuristic_ids": self.heuristic_ids,
            "manual_ids": self.manual_ids,
            "annotated_ids": self.annotated_ids,
            "rejected_ids": self.rejected_ids,
            "accepted_total": self.accepted_total,
            "mean_true_keypoint_error_m": self.mean_true_keypoint_error_m,
            "new_accept_true_error_m": self.new_accept_true_error_m,
        }


def _sample_seed(seed: int, iteration: int, sample_id: str) -> int:
    digest = hashlib.blake2s(
        f"{seed}:{iteration}:{sample_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def _align_rotation(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Shortest rotation taking unit vector u onto unit vector v."""
    axis = np.cross(u, v)
    s = np.linalg.norm(axis)
    c = float(np.dot(u, v))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: rotate pi about any perpendicular axis
        perp = np.cross(u, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(u, [0.0, 1.0, 0.0])
        perp /= np.linalg.norm(perp)
        k = np.array(
            [[0, -perp[2], perp[1]], [perp[2], 0, -perp[0]], [-perp[1], perp[0], 0]]
        )
        return np.eye(3) + 2.0 * k @ k
    angle = np.arctan2(s, c)
    k = axis / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def _rotvec(r: np.ndarray) -> np.ndarray:
    c = (np.trace(r) - 1.0) / 2.0
    angle = np.arccos(np.clip(c, -1.0, 1.0))
    if angle < 1e-12:
        return np.zeros(3)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return np.zeros(3)
    return axis / n * angle


def _rotmat(vec: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(vec)
    if angle < 1e-12:
        return np.eye(3)
    k = vec / angle
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def init_from_keypoints(
    model: HandModelDef, points: np.ndarray, with_articulation: bool = True
) -> HandParams:
    """Closed-form initialization from 21 keypoint estimates.

    Global pose comes from a rigid Kabsch fit of the palm keypoints;
    articulation from chaining shortest-arc alignments of each finger bone
    to its predicted direction. Meant as an ADAM starting point, not a fit.
    """
    rest = forward(model, HandParams.mean(model)).keypoints
    palm = [0, 1, 5, 9, 13, 17]
    src = rest[palm] - rest[palm].mean(axis=0)
    dst = points[palm] - points[palm].mean(axis=0)
    u, _, vt = np.linalg.svd(dst.T @ src)
    d = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2, 2] = -1.0
    r_global = u @ d @ vt
    params = HandParams.mean(model)
    params.global_rot = _rotvec(r_global)
    params.global_trans = points[palm].mean(axis=0) - r_global @ rest[palm].mean(axis=0)
    if not with_articulation:
        return params

    beta = np.zeros(45)
    for f in range(5):
        chain = [1 + 4 * f, 2 + 4 * f, 3 + 4 * f, 4 + 4 * f]  # keypoints MCP..TIP
        acc = r_global
        for s in range(3):
            a, b = chain[s], chain[s + 1]
            rest_dir = rest[b] - rest[a]
            rest_dir /= np.linalg.norm(rest_dir)
            target = points[b] - points[a]
            n = np.linalg.norm(target)
            joint = 3 * f + s  # articulated joint index - 1
            if n < 1e-6:
                continue
            local_target = acc.T @ (target / n)
            vec = _rotvec(_align_rotation(rest_dir, local_target))
            norm = np.linalg.norm(vec)
            if norm > 1.5:  # clamp unreachable bends from noisy estimates
                vec *= 1.5 / norm
            beta[3 * joint : 3 * joint + 3] = vec
            acc = acc @ _rotmat(vec)
    coeffs, *_ = np.linalg.lstsq(model.pose_pca_basis, beta - model.pose_mean, rcond=None)
    params.pose_coeffs = coeffs
    return params


def make_simulated_predictor(model: HandModelDef, grid_resolution: int = 64, extent: float = 0.4):
    """Predictor that perturbs ground truth through simulated score volumes."""

    def predictor(sample: Sample, skill: float, seed: int) -> Prediction:
        if sample.gt_params is None:
            raise ValueError("simulated predictor needs ground-truth parameters")
        gt_mesh = forward(model, sample.gt_params)
        grid = VolumeGrid(
            resolution=grid_resolution,
            extent=extent,
            center=gt_mesh.keypoints.mean(axis=0),
        )
        svs = simulate_predictor(gt_mesh.keypoints, grid, skill=skill, seed=seed)
        peaks = extract_keypoints(svs)
        return Prediction(
            points=peaks.points,
            confidences=peaks.confidences,
            mean_confidence=peaks.mean_confidence,
        )

    return predictor


def run_iteration(
    state: DatasetState,
    samples: dict[str, Sample],
    model: HandModelDef,
    fit_config_fn,
    predictor,
    annotator,
    seed: int = 0,
    manual_budget: int = 50,
    min_temporal_gap: int = DEFAULT_TEMPORAL_GAP,
    flat_pose_eps: float = DEFAULT_FLAT_POSE_EPS,
    skill_per_sample: float = 0.01,
    extra_manual_ids: list[str] | None = None,
    workers: int = 1,
) -> tuple[DatasetState, IterationReport]:
    """One bootstrapping pass: predict, fit, verify, annotate, accumulate.

    ``fit_config_fn(iteration)`` supplies the weight schedule;
    ``predictor(sample, skill, seed)`` yields Prediction;
    ``annotator(sample)`` yields Annotation or None to skip. Simulation
    derives predictor skill from the accepted-set size. Fits start from a
    closed-form initialization off the predicted keypoints.
    """
    pool = sorted(state.pool_ids)
    skill = len(state.accepted_ids) * skill_per_sample
    cfg = fit_config_fn(state.iteration)

    def process(sample_id: str):
        sample = samples[sample_id]
        pred = predictor(sample, skill, _sample_seed(seed, state.iteration, sample_id))
        sample.predicted = pred
        sample.observation.keypoints3d = pred.points.copy()
        sample.observation.keypoints3d_mask = np.ones(KEYPOINT_COUNT, dtype=bool)
        # articulation init only once the predictions are trustworthy
        init = init_from_keypoints(
            model, pred.points, with_articulation=pred.mean_confidence >= 0.6
        )
        sample.fit = fit(model, sample.observation, cfg, init)
        sample.transition(SampleState.FITTED)
        return sample_id, heuristic_verify(sample)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            results = dict(pool_exec.map(process, pool))
    else:
        results = dict(process(sid) for sid in pool)

    dh = [sid for sid in pool if results[sid].accept]
    for sid in dh:
        samples[sid].transition(SampleState.ACCEPTED_HEURISTIC)

    remainder = [samples[sid] for sid in pool if sid not in set(dh)]
    queue = select_for_manual(remainder, manual_budget, min_temporal_gap, flat_pose_eps)
    if extra_manual_ids:
        queue += [i for i in extra_manual_ids if i not in queue and i in state.pool_ids]

    dm: list[str] = []
    dl: list[str] = []
    rejected: list[str] = []
    for sid in queue:
        sample = samples[sid]
        annotation = annotator(sample)
        if annotation is None:
            continue
        if annotation.kind == "accept":
            sample.transition(SampleState.ACCEPTED_MANUAL)
            dm.append(sid)
        elif annotation.kind == "reject":
            sample.transition(SampleState.REJECTED)
            rejected.append(sid)
        elif annotation.kind == "keypoints":
            apply_sparse_annotations(sample, annotation.keypoints)
            refit_init = init_from_keypoints(
                model,
                sample.predicted.points,
                with_articulation=sample.predicted.mean_confidence >= 0.6,
            )
            sample.fit = fit(model, sample.observation, cfg, refit_init)
            sample.transition(SampleState.FITTED)
            dl.append(sid)
        else:
            raise ValueError(f"unknown annotation kind {annotation.kind!r}")

    report_pool_size = len(pool)
    new_state = accumulate(state, dh, dm, dl)
    new_state.pool_ids -= set(rejected)

    new_ids = dh + dm + dl
    new_err = _mean_true_error(samples, new_ids, model)
    all_err = _mean_true_error(samples, sorted(new_state.accepted_ids), model)
    report = IterationReport(
        iteration=state.iteration,
        pool_size_before=report_pool_size,
        heuristic_ids=dh,
        manual_ids=dm,
        annotated_ids=dl,
        rejected_ids=rejected,
        accepted_total=len(new_state.accepted_ids),
        mean_true_keypoint_error_m=all_err,
        new_accept_true_error_m=new_err,
    )
    return new_state, report


def _mean_true_error(samples: dict[str, Sample], ids: list[str], model: HandModelDef):
    errors = []
    for sid in ids:
        s = samples[sid]
        if s.gt_params is None or s.fit is None:
            continue
        gt_kps = forward(model, s.gt_params).keypoints
        errors.append(np.linalg.norm(gt_kps - s.fit.fitted_keypoints, axis=1).mean())
    if not errors:
        return None
    return float(np.mean(errors))
