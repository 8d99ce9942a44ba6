from .config import ConfigError, ExperimentConfig, apply_overrides, build_oracle
from .runner import (
    AblationReport,
    MatrixResult,
    TraceError,
    ablation_report,
    checkpoint_mse,
    curve_export,
    read_trace,
    run_cell,
    run_matrix,
    step_curve,
    summarize,
)

__all__ = [
    "AblationReport",
    "ConfigError",
    "ExperimentConfig",
    "MatrixResult",
    "TraceError",
    "ablation_report",
    "apply_overrides",
    "build_oracle",
    "checkpoint_mse",
    "curve_export",
    "read_trace",
    "run_cell",
    "run_matrix",
    "step_curve",
    "summarize",
]
