"""Arbitrary bit-width quantization-aware training lab (C++ core)."""

from ._multiquant import (
    accumulated_msqe,
    build_branch_plan,
    build_selection_map,
    compute_cost,
    evaluate_checkpoint,
    fake_quantize,
    init_clip_params,
    make_synthetic,
    msqe_analytic,
    msqe_monte_carlo,
    noise_transplant_residual,
    quantize_codes,
    run_experiment,
    set_threads,
    train_and_evaluate,
)

__all__ = [
    "accumulated_msqe",
    "build_branch_plan",
    "build_selection_map",
    "compute_cost",
    "evaluate_checkpoint",
    "fake_quantize",
    "init_clip_params",
    "make_synthetic",
    "msqe_analytic",
    "msqe_monte_carlo",
    "noise_transplant_residual",
    "quantize_codes",
    "run_experiment",
    "set_threads",
    "train_and_evaluate",
]

__version__ = "0.1.0"
