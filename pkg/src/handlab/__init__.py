"""Multi-view hand model fitting and human-in-the-loop annotation toolkit."""

from .fitting import (
    FitConfig,
    FitResult,
    Observation,
    PoseLibrary,
    fit,
    loss_2d,
    loss_3d,
    loss_seg,
    prior_pose,
    prior_shape,
    shape_supervision_loss,
    total_loss,
)
from .geometry import Camera, Pose2p5D, project, recover_3d, to_2p5d, triangulate, unproject_to_grid
from .loop import (
    DatasetState,
    HeuristicReport,
    Prediction,
    Sample,
    SampleState,
    accumulate,
    heuristic_verify,
    heuristic_verify_stats,
    oracle_annotate,
    run_iteration,
    select_for_manual,
)
from .metrics import EvalReport, fscore, mesh_error, pck_auc, procrustes_align, sparsification
from .model import (
    HandMesh,
    HandModelDef,
    HandParams,
    forward,
    forward_with_gradients,
    load_model,
    save_model,
    synth_model,
)
from .silhouette import Mask, edt, iou, rasterize_hard, rasterize_soft
from .volumes import (
    ScoreVolumeSet,
    VolumeGrid,
    center_grid,
    extract_keypoints,
    load_volumes,
    make_targets,
    save_volumes,
    score_loss,
    simulate_predictor,
)

__version__ = "0.1.0"
