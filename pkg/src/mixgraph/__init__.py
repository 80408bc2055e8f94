"""Reverse engineering of music mixes with differentiable processors and
iterative graph pruning."""

from .console import SessionManifest, TrackEntry, build_console, init_params
from .graph import MixGraph, ParamStore, bypass_remove, deserialize, serialize, validate
from .losses import LossConfig, mrstft, sparsity_loss
from .metrics import consistency_score, mir_distance, si_sdr
from .optimizer import Session, TrainConfig, train
from .pruning import PruneConfig, eval_loss, prune_song, weight_vs_delta
from .scheduler import (
    Schedule,
    execute_batched,
    execute_reference,
    plan_indices,
    schedule_console,
    schedule_greedy,
)
from .synth import SynthSpec, synth_session

__version__ = "0.1.0"

__all__ = [
    "MixGraph", "ParamStore", "validate", "bypass_remove", "serialize", "deserialize",
    "SessionManifest", "TrackEntry", "build_console", "init_params",
    "Schedule", "schedule_greedy", "schedule_console", "plan_indices",
    "execute_batched", "execute_reference",
    "LossConfig", "mrstft", "sparsity_loss",
    "Session", "TrainConfig", "train",
    "PruneConfig", "prune_song", "eval_loss", "weight_vs_delta",
    "mir_distance", "si_sdr", "consistency_score",
    "SynthSpec", "synth_session",
    "__version__",
]
