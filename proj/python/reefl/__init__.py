"""ReeFL: federated learning with recurrent early exits."""

from ._core import (
    ReeflError,
    attention,
    checkpoint_tensor,
    config_keys,
    cosine_lr,
    eta_schedule,
    gen_data,
    inspect_checkpoint,
    kd_loss,
    lda_partition,
    load_dataset,
    resolve_config,
    run_experiment,
    select_teacher,
    synth_dataset,
)

__all__ = [
    "ReeflError",
    "attention",
    "checkpoint_tensor",
    "config_keys",
    "cosine_lr",
    "eta_schedule",
    "gen_data",
    "inspect_checkpoint",
    "kd_loss",
    "lda_partition",
    "load_dataset",
    "resolve_config",
    "run_experiment",
    "select_teacher",
    "synth_dataset",
]
