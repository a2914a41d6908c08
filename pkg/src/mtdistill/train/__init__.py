from mtdistill.train.batches import EpochSampler, TaskBatch, TaskLoader
from mtdistill.train.evaluate import evaluate_on_dataset
from mtdistill.train.runner import (
    TrainState,
    clip_gradients,
    compute_pass_loss,
    partial_mtl_iteration,
    run_experiment,
    single_task_iteration,
    train_teacher,
    validate_experiment,
)

__all__ = [
    "EpochSampler",
    "TaskBatch",
    "TaskLoader",
    "TrainState",
    "clip_gradients",
    "compute_pass_loss",
    "evaluate_on_dataset",
    "partial_mtl_iteration",
    "run_experiment",
    "single_task_iteration",
    "train_teacher",
    "validate_experiment",
]
