"""Desk-scale lab for black-box model extraction with pool-based active learning."""

from .data import LabeledDataset, SyntheticTaskSpec, UnlabeledPool, gen_synthetic, gen_thief_pool, load_idx, split
from .extraction import (
    BudgetPlan, ExtractionConfig, ExtractionReport, InfeasiblePlan, IterationRecord, agreement, plan_budget,
    run_extraction,
)
from .nn import Network, NetworkSpec, backward, forward, init_network, input_gradient, predict_proba, predict_top1
from .oracle import BudgetExhausted, OracleMode, SecretOracle, remaining
from .strategies import SelectionContext, StrategyKind, deepfool, kcenter_select, select
from .training import TrainConfig, TrainReport, adam_step, macro_f1, train_network

__version__ = "0.1.0"

__all__ = [
    "BudgetExhausted", "BudgetPlan", "ExtractionConfig", "ExtractionReport", "InfeasiblePlan", "IterationRecord",
    "LabeledDataset", "Network", "NetworkSpec", "OracleMode", "SecretOracle", "SelectionContext", "StrategyKind",
    "SyntheticTaskSpec", "TrainConfig", "TrainReport", "UnlabeledPool", "adam_step", "agreement", "backward",
    "deepfool", "forward", "gen_synthetic", "gen_thief_pool", "init_network", "input_gradient", "kcenter_select",
    "load_idx", "macro_f1", "plan_budget", "predict_proba", "predict_top1", "remaining", "run_extraction",
    "select", "split", "train_network",
]
