"""Desk-scale lab for auditing and defending approximate machine unlearning."""

__version__ = "0.1.0"

from .nn import (LabeledSet, NetworkSpec, ParamVector, TrainConfig, gen_blobs, split_forget,
                 train_from_scratch)
from .teleport import WarpConfig, cob_apply, cob_sample
from .unlearn import LangevinConfig, UnlearnConfig, langevin_run, retrain_oracle, unlearn_run
from .mia import ggd_attack, ulira_attack, ulira_shadow_suite
from .recon import ReconConfig, adaptive_invert, filter_target, invert
from .theory import GMMSpec, LogNormalCOB, bound_ratio, psi, delta_psi

__all__ = [
    "LabeledSet", "NetworkSpec", "ParamVector", "TrainConfig", "gen_blobs", "split_forget",
    "train_from_scratch", "WarpConfig", "cob_apply", "cob_sample", "LangevinConfig",
    "UnlearnConfig", "langevin_run", "retrain_oracle", "unlearn_run", "ggd_attack",
    "ulira_attack", "ulira_shadow_suite", "ReconConfig", "adaptive_invert", "filter_target",
    "invert", "GMMSpec", "LogNormalCOB", "bound_ratio", "psi", "delta_psi",
]
