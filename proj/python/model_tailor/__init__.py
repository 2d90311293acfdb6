"""Sparse, Hessian-compensated fusion of fine-tuned weights into a pre-trained checkpoint."""

from ._core import (
    Checkpoint,
    ModelTailorError,
    TaskPatch,
    apply_patch,
    avg,
    build_hessian,
    capture_activations,
    cholesky,
    decorate,
    eval_report,
    evaluate,
    forward,
    fuse_layer,
    fuse_scores,
    gen_task,
    hscore,
    init_mlp,
    obs_downdate,
    retained_budget,
    run_pipeline,
    salience,
    select_mask,
    sensitivity,
    stitch,
    sym_inverse,
    tailor,
    train,
)

__all__ = [
    "Checkpoint",
    "ModelTailorError",
    "TaskPatch",
    "apply_patch",
    "avg",
    "build_hessian",
    "capture_activations",
    "cholesky",
    "decorate",
    "eval_report",
    "evaluate",
    "forward",
    "fuse_layer",
    "fuse_scores",
    "gen_task",
    "hscore",
    "init_mlp",
    "obs_downdate",
    "retained_budget",
    "run_pipeline",
    "salience",
    "select_mask",
    "sensitivity",
    "stitch",
    "sym_inverse",
    "tailor",
    "train",
]


def error_code(exc: ModelTailorError) -> str:
    """Symbolic error code carried by a ModelTailorError."""
    return exc.args[0] if exc.args else ""
