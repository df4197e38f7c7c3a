"""Synthetic scenarios, evaluation metrics and ablation runs."""

from .ablation import SUITES, AblationResult, run_ablation, run_one, samples_to_reach
from .metrics import (
    MetricReport,
    e_smooth,
    evaluate,
    mpjpe,
    non_penetration_pct,
    pck,
    pve,
    sliding_error,
    translation_and_bone_errors,
)
from .scenarios import KINDS, Scenario, depth_offset, make_scenario, shared_manifold

__all__ = [
    "SUITES",
    "AblationResult",
    "run_ablation",
    "run_one",
    "samples_to_reach",
    "MetricReport",
    "e_smooth",
    "evaluate",
    "mpjpe",
    "non_penetration_pct",
    "pck",
    "pve",
    "sliding_error",
    "translation_and_bone_errors",
    "KINDS",
    "Scenario",
    "depth_offset",
    "make_scenario",
    "shared_manifold",
]
