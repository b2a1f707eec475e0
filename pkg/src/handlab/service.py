"""HTTP session service for manual verification of candidate fits.

Serves multi-view bundles with silhouette-contour overlays, records
accept/reject/sparse-keypoint decisions under optimistic concurrency and
advances labeling iterations. All state mutations append to a decision
log, so replaying the log reproduces the dataset state exactly.
"""

from __future__ import annotations

import io
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .fitting import FitConfig, PoseLibrary
from .loop import (
    Annotation,
    DatasetState,
    Sample,
    SampleState,
    heuristic_verify,
    make_simulated_predictor,
    run_iteration,
    select_for_manual,
)
from .model import SPARSE_KEYPOINTS
from .model import HandModelDef, forward
from .silhouette import mask_boundary_polylines, rasterize_hard


@dataclass
class SessionState:
    """Mutable service state: dataset, queue, revision, decision log."""

    dataset: DatasetState
    samples: dict[str, Sample]
    model: HandModelDef
    manual_budget: int = 50
    revision: int = 0
    decisions: list[dict] = field(default_factory=list)
    queue: list[str] = field(default_factory=list)
    pending: dict[str, dict] = field(default_factory=dict)  # sample id -> decision
    reports: list[dict] = field(default_factory=list)

    def rebuild_queue(self) -> None:
        candidates = [
            self.samples[sid]
            for sid in sorted(self.dataset.pool_ids)
            if self.samples[sid].predicted is not None and self.samples[sid].fit is not None
        ]
        self.queue = select_for_manual(candidates, self.manual_budget)


def _decision_annotator(pending: dict[str, dict]):
    """Annotator that replays recorded human decisions and skips the rest."""

    def annotator(sample: Sample) -> Annotation | None:
        decision = pending.get(sample.id)
        if decision is None:
            return None
        if decision["action"] == "accept":
            return Annotation(kind="accept")
        if decision["action"] == "reject":
            return Annotation(kind="reject")
        if decision["action"] == "keypoints":
            return Annotation(
                kind="keypoints",
                keypoints=[tuple(e) for e in decision["entries"]],
            )
        raise ValueError(f"unknown action {decision['action']!r}")

    return annotator


def apply_decision_log(
    dataset: DatasetState,
    samples: dict[str, Sample],
    model: HandModelDef,
    decisions: list[dict],
    seed: int = 0,
    manual_budget: int = 50,
) -> DatasetState:
    """Replay a recorded decision log against a fresh dataset state.

    Decisions are grouped by the iteration they were made in; each
    "iterate" entry triggers one loop pass consuming the decisions
    recorded before it. Deterministic given the same inputs.
    """
    pending: dict[str, dict] = {}
    state = dataset
    for entry in decisions:
        if entry["action"] == "iterate":
            state = _run_service_iteration(
                state, samples, model, pending, seed=seed, manual_budget=manual_budget
            )[0]
            pending = {}
        else:
            pending[entry["sample_id"]] = entry
    return state


def _run_service_iteration(state, samples, model, pending, seed, manual_budget):
    predictor = make_simulated_predictor(model)
    lib = PoseLibrary.generate(seed, 128)
    # the 3D keypoint weight only makes sense once the simulated predictor
    # has a labeled set to draw skill from
    schedule_iteration = state.iteration if len(state.accepted_ids) >= 20 else 0

    def cfg_fn(iteration: int) -> FitConfig:
        return FitConfig.for_iteration(
            schedule_iteration, wseg=0.0, iterations=60, pose_library=lib, wnn=1.0,
            learning_rate=0.1, lr_decay_every=20,
        )

    annotator = _decision_annotator(pending)
    return run_iteration(
        state,
        samples,
        model,
        cfg_fn,
        predictor,
        annotator,
        seed=seed,
        manual_budget=manual_budget,
        extra_manual_ids=sorted(pending.keys()),
    )


class DecisionBody(BaseModel):
    decision: str
    revision: int


class KeypointBody(BaseModel):
    view: int
    keypoint_id: int
    u: float
    v: float
    revision: int


def build_app(
    session: SessionState,
    state_dir: str | Path | None = None,
    seed: int = 0,
    frontend_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="hand annotation service")
    lock = threading.Lock()
    iterate_guard = threading.Lock()
    state_dir = Path(state_dir) if state_dir is not None else None

    def check_revision(revision: int) -> None:
        if revision != session.revision:
            raise HTTPException(
                status_code=409,
                detail=f"stale revision {revision}, current is {session.revision}",
            )

    def get_sample_or_404(sample_id: str) -> Sample:
        sample = session.samples.get(sample_id)
        if sample is None:
            raise HTTPException(status_code=404, detail=f"unknown sample {sample_id!r}")
        return sample

    @app.get("/api/session")
    def get_session():
        return {
            "revision": session.revision,
            "iteration": session.dataset.iteration,
            "accepted": len(session.dataset.accepted_ids),
            "pool": len(session.dataset.pool_ids),
            "queue_length": len(session.queue),
            "budget": session.manual_budget,
            "streams": session.dataset.to_canonical_dict()["streams"],
            "reports": session.reports,
        }

    @app.get("/api/queue")
    def get_queue():
        items = []
        for sid in session.queue:
            if sid in session.pending:
                continue
            sample = session.samples[sid]
            report = None
            try:
                report = heuristic_verify(sample).to_dict()
            except ValueError:
                pass
            items.append(
                {
                    "id": sid,
                    "confidence": sample.predicted.mean_confidence,
                    "state": sample.state.value,
                    "revision": session.revision,
                    "heuristic": report,
                    "thumbnails": [
                        f"/assets/{sid}/view_{i}_mask.png"
                        for i in range(len(sample.observation.cameras))
                    ],
                }
            )
        return {"revision": session.revision, "items": items}

    @app.get("/api/sample/{sample_id}")
    def get_sample_bundle(sample_id: str):
        sample = get_sample_or_404(sample_id)
        obs = sample.observation
        views = []
        fit_mesh = None
        if sample.fit is not None:
            fit_mesh = forward(session.model, sample.fit.params)
        for i, cam in enumerate(obs.cameras):
            mask = obs.masks[i] if obs.masks is not None else None
            res = (mask.width, mask.height) if mask is not None else (cam.width, cam.height)
            contours = []
            fitted_kp2d = None
            if fit_mesh is not None:
                rendered = rasterize_hard(fit_mesh, cam, res)
                contours = [c.tolist() for c in mask_boundary_polylines(rendered)]
                pc = cam.world_to_cam(fit_mesh.keypoints)
                fitted_kp2d = np.stack(
                    [
                        cam.fx * pc[:, 0] / pc[:, 2] + cam.cx,
                        cam.fy * pc[:, 1] / pc[:, 2] + cam.cy,
                    ],
                    axis=1,
                ).tolist()
            predicted_kp2d = None
            if sample.predicted is not None:
                pc = cam.world_to_cam(sample.predicted.points)
                predicted_kp2d = np.stack(
                    [
                        cam.fx * pc[:, 0] / pc[:, 2] + cam.cx,
                        cam.fy * pc[:, 1] / pc[:, 2] + cam.cy,
                    ],
                    axis=1,
                ).tolist()
            views.append(
                {
                    "view": i,
                    "width": res[0],
                    "height": res[1],
                    "mask_url": f"/assets/{sample_id}/view_{i}_mask.png" if mask is not None else None,
                    "contours": contours,
                    "fitted_keypoints": fitted_kp2d,
                    "predicted_keypoints": predicted_kp2d,
                    "iou": sample.fit.per_view_iou[i] if sample.fit is not None else None,
                }
            )
        heuristic = None
        if sample.fit is not None and sample.predicted is not None:
            heuristic = heuristic_verify(sample).to_dict()
        return {
            "id": sample_id,
            "revision": session.revision,
            "state": sample.state.value,
            "fit_missing": sample.fit is None,
            "confidence": None if sample.predicted is None else sample.predicted.mean_confidence,
            "sparse_keypoint_ids": list(SPARSE_KEYPOINTS),
            "views": views,
            "heuristic": heuristic,
        }

    @app.post("/api/sample/{sample_id}/decision")
    def post_decision(sample_id: str, body: DecisionBody):
        with lock:
            check_revision(body.revision)
            sample = get_sample_or_404(sample_id)
            if body.decision not in ("accept", "reject"):
                raise HTTPException(status_code=422, detail="decision must be accept or reject")
            if sample.accepted or sample.state == SampleState.REJECTED:
                raise HTTPException(
                    status_code=409,
                    detail=f"sample already decided ({sample.state.value})",
                )
            if sample_id in session.pending:
                raise HTTPException(status_code=409, detail="sample already has a pending decision")
            entry = {
                "action": body.decision,
                "sample_id": sample_id,
                "revision": session.revision,
            }
            session.pending[sample_id] = entry
            session.decisions.append(entry)
            session.revision += 1
            _persist()
            return {"revision": session.revision}

    @app.post("/api/sample/{sample_id}/keypoints")
    def post_keypoints(sample_id: str, body: KeypointBody):
        with lock:
            check_revision(body.revision)
            sample = get_sample_or_404(sample_id)
            if body.keypoint_id not in SPARSE_KEYPOINTS:
                raise HTTPException(
                    status_code=422,
                    detail=f"keypoint {body.keypoint_id} is not in the sparse set {list(SPARSE_KEYPOINTS)}",
                )
            if not 0 <= body.view < len(sample.observation.cameras):
                raise HTTPException(status_code=422, detail="view index out of range")
            cam = sample.observation.cameras[body.view]
            if not (0 <= body.u < cam.width and 0 <= body.v < cam.height):
                raise HTTPException(status_code=422, detail="pixel out of bounds")
            entry = session.pending.get(sample_id)
            if entry is not None and entry["action"] != "keypoints":
                raise HTTPException(status_code=409, detail="sample already has a pending decision")
            if entry is None:
                entry = {
                    "action": "keypoints",
                    "sample_id": sample_id,
                    "revision": session.revision,
                    "entries": [],
                }
                session.pending[sample_id] = entry
                session.decisions.append(entry)
            entry["entries"].append([body.view, body.keypoint_id, body.u, body.v])
            session.revision += 1
            _persist()
            return {"revision": session.revision}

    @app.post("/api/iterate")
    def trigger_iteration():
        if not iterate_guard.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="iteration already running")
        try:
            with lock:
                pending = dict(session.pending)
                session.decisions.append({"action": "iterate", "revision": session.revision})
            new_state, report = _run_service_iteration(
                session.dataset,
                session.samples,
                session.model,
                pending,
                seed=seed,
                manual_budget=session.manual_budget,
            )
            with lock:
                session.dataset = new_state
                session.pending = {}
                session.reports.append(report.to_dict())
                session.rebuild_queue()
                session.revision += 1
                _persist()
                return {"revision": session.revision, "report": report.to_dict()}
        finally:
            iterate_guard.release()

    @app.get("/assets/{sample_id}/view_{view}_mask.png")
    def get_mask(sample_id: str, view: int):
        sample = get_sample_or_404(sample_id)
        obs = sample.observation
        if obs.masks is None or view >= len(obs.masks) or obs.masks[view] is None:
            raise HTTPException(status_code=404, detail="no mask for this view")
        from PIL import Image

        arr = np.round(obs.masks[view].values * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    def _persist():
        if state_dir is None:
            return
        state_dir.mkdir(parents=True, exist_ok=True)
        log_path = state_dir / "decisions.json"
        tmp = log_path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"revision": session.revision, "decisions": session.decisions}))
        tmp.replace(log_path)

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="ui")

    session.rebuild_queue()
    return app
