"""Command-line entry points: synth, gen-scenes, fit, iterate, eval, serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datasetio, fitting, loop, metrics, model as handmodel
from .loop import DatasetState


def _cmd_synth(args) -> int:
    m = handmodel.synth_model(args.seed, args.vertices)
    handmodel.save_model(m, args.out)
    print(f"wrote model with V={m.num_vertices} J=16 K={m.pose_dim} to {args.out}")
    return 0


def _cmd_gen_scenes(args) -> int:
    m = handmodel.load_model(args.model)
    rig = datasetio.build_cube_rig(edge=args.rig_edge, image_size=args.resolution)
    rng = np.random.default_rng(args.seed)
    state = DatasetState()
    samples = {}
    per_seq = max(1, args.per_sequence)
    for i in range(args.count):
        gt = datasetio.random_hand_params(m, rng)
        spec = datasetio.SceneSpec(
            gt=gt,
            cameras=rig,
            mask_resolution=(args.resolution, args.resolution),
            noise_std_px=args.noise,
            seed=args.seed + i,
        )
        sid = f"{i:04d}"
        sample = datasetio.generate_scene(
            m, spec, sample_id=sid, sequence_id=f"seq_{i // per_seq}", frame_index=i % per_seq
        )
        samples[sid] = sample
        state.pool_ids.add(sid)
    datasetio.save_dataset(state, samples, args.out)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def _cmd_fit(args) -> int:
    m = handmodel.load_model(args.model)
    sample = datasetio.load_sample(args.sample)
    if args.config:
        cfg = fitting.FitConfig.load(args.config)
    else:
        cfg = fitting.FitConfig()
    if cfg.wnn > 0 and cfg.pose_library is None:
        cfg.pose_library = fitting.PoseLibrary.generate(0, 256)
    result = fitting.fit(m, sample.observation, cfg, handmodel.HandParams.mean(m))
    result.save(args.out)
    print(
        f"fit {args.sample}: loss {result.initial_loss:.3f} -> {result.total_loss:.3f}, "
        f"mean IoU {np.mean([v for v in result.per_view_iou if v is not None]):.3f}"
    )
    return 0


def _cmd_iterate(args) -> int:
    m = handmodel.load_model(args.model)
    state, samples = datasetio.load_dataset(args.state)
    lib = fitting.PoseLibrary.generate(args.seed, 256)

    def cfg_fn(iteration: int) -> fitting.FitConfig:
        return fitting.FitConfig.for_iteration(
            iteration, wseg=args.wseg, iterations=args.fit_iterations, pose_library=lib, wnn=1.0
        )

    predictor = loop.make_simulated_predictor(m)
    if args.annotator == "oracle":
        annotator = lambda s: loop.oracle_annotate(s, m)
    else:
        raise SystemExit("service annotator runs inside `handlab serve`; use --annotator oracle")
    for _ in range(args.iters):
        state, report = loop.run_iteration(
            state,
            samples,
            m,
            cfg_fn,
            predictor,
            annotator,
            seed=args.seed,
            manual_budget=args.budget,
        )
        print(json.dumps(report.to_dict()))
    datasetio.save_dataset(state, samples, args.state)
    return 0


def _cmd_eval(args) -> int:
    pred = json.loads(Path(args.pred).read_text())
    gt = json.loads(Path(args.gt).read_text())
    report = metrics.evaluate(
        np.asarray(pred["keypoints"]),
        np.asarray(gt["keypoints"]),
        pred_verts=np.asarray(pred["vertices"]) if "vertices" in pred else None,
        gt_verts=np.asarray(gt["vertices"]) if "vertices" in gt else None,
        scores=np.asarray(pred["scores"]) if "scores" in pred else None,
    )
    report.save(args.report)
    if args.curves:
        out = Path(args.curves)
        rows = ["threshold_mm,pck"] + [
            f"{t},{v}" for t, v in zip(report.pck_thresholds_mm, report.pck)
        ]
        out.write_text("\n".join(rows))
    print(f"AUC {report.auc:.4f}  mesh {report.mesh_error_cm:.3f} cm  F@5 {report.fscore_5mm:.3f}")
    return 0


def _cmd_export(args) -> int:
    m = handmodel.load_model(args.model)
    state, samples = datasetio.load_dataset(args.state)
    ids = datasetio.export_labels(state, samples, m, args.out)
    print(f"exported {len(ids)} accepted samples to {args.out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import SessionState, build_app

    m = handmodel.load_model(args.model)
    state, samples = datasetio.load_dataset(args.state_dir)
    session = SessionState(
        dataset=state, samples=samples, model=m, manual_budget=args.budget
    )
    app = build_app(
        session,
        state_dir=args.state_dir,
        seed=args.seed,
        frontend_dir=args.frontend,
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="handlab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic hand model file")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--vertices", type=int, default=778)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("gen-scenes", help="generate a synthetic multi-view dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--per-sequence", type=int, default=10)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--rig-edge", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_scenes)

    p = sub.add_parser("fit", help="fit the model to one sample directory")
    p.add_argument("--sample", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("iterate", help="run labeling-loop iterations")
    p.add_argument("--state", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--iters", type=int, default=1)
    p.add_argument("--annotator", choices=("oracle", "service"), default="oracle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=50)
    p.add_argument("--wseg", type=float, default=0.0)
    p.add_argument("--fit-iterations", type=int, default=60)
    p.set_defaults(func=_cmd_iterate)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--curves", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export", help="export accepted labels (K/xyz/mano)")
    p.add_argument("--state", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("serve", help="run the annotation service")
    p.add_argument("--state-dir", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--budget", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frontend", default=None)
    p.set_defaults(func=_cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
