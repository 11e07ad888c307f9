"""Toy mechanism lab: a small MLP, synthetic hierarchical tasks, few-shot probes
and norm / margin diagnostics."""
from .model import ToyModel, ToyModelSpec, TrainingDivergedError, TrainOptions, build_model, train_upstream
from .probe import (ProbeDataError, ProbeResult, best_layer, distance_to_init, few_shot_probe, fit_linear_probe,
                    head_margin, layer_norms, layer_probe_sweep, normalized_layer_margin,
                    normalized_layer_margins)
from .sweep import (DiagnosticsSnapshot, gradient_check, head_hyperparam_sweep, optimal_head_wd,
                    reference_model_spec, reference_task_spec, reference_train_options, snapshot,
                    sweep_csv)
from .tasks import DS_KINDS, DownstreamTask, LabeledSet, SyntheticTask, SyntheticTaskSpec, make_task

__all__ = [
    "DS_KINDS", "DiagnosticsSnapshot", "DownstreamTask", "LabeledSet", "ProbeDataError", "ProbeResult",
    "SyntheticTask", "SyntheticTaskSpec", "ToyModel", "ToyModelSpec", "TrainOptions", "TrainingDivergedError",
    "best_layer", "build_model", "distance_to_init", "few_shot_probe", "fit_linear_probe", "gradient_check",
    "head_hyperparam_sweep", "head_margin", "layer_norms", "layer_probe_sweep", "make_task", "normalized_layer_margin",
    "normalized_layer_margins", "optimal_head_wd", "reference_model_spec", "reference_task_spec",
    "reference_train_options", "snapshot", "sweep_csv", "train_upstream",
]
