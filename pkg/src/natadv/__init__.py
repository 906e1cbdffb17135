"""Adversarial synthetic humans constrained to stay natural, for stress-testing assistive robots."""

from .adversary import AdversaryConfig, AdversaryResult, train_adversary
from .env import ConfigError, CursorAssistConfig, Trajectory, rollout
from .frontier import Frontier, FrontierPoint, auc, build_frontier, pareto_extract
from .naturalness import CanonicalDataset, Discriminator, GanConfig, MmdConfig, MmdMetric
from .nn import ContractError, GaussianPolicy, Mlp, OptimizerError
from .rigid import ScanConfig, ScanState, largest_jump, log_space_grid, rigid_scan
from .rl import CoopPair, PpoConfig, TrainingError, cooptimize, evaluate, train_personalized
from .robustgt import PopulationSpec, robust_finetune, select_failure_cases
from .runstore import RunRecord, RunStore

__version__ = "0.1.0"

__all__ = [
    "AdversaryConfig", "AdversaryResult", "train_adversary", "ConfigError", "CursorAssistConfig", "Trajectory",
    "rollout", "Frontier", "FrontierPoint", "auc", "build_frontier", "pareto_extract", "CanonicalDataset",
    "Discriminator", "GanConfig", "MmdConfig", "MmdMetric", "ContractError", "GaussianPolicy", "Mlp",
    "OptimizerError", "ScanConfig", "ScanState", "largest_jump", "log_space_grid", "rigid_scan", "CoopPair",
    "PpoConfig", "TrainingError", "cooptimize", "evaluate", "train_personalized", "PopulationSpec",
    "robust_finetune", "select_failure_cases", "RunRecord", "RunStore",
]
