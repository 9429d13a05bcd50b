"""The budgeted extraction loop and the agreement metric."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .data import LabeledDataset, UnlabeledPool
from .nn import Network, NetworkSpec, predict_proba, predict_top1
from .oracle import OracleMode
from .strategies import DEEPFOOL_MAX_ITER, DEEPFOOL_OVERSHOOT, SelectionContext, StrategyKind, select
from .training import TrainConfig, TrainReport, train_network

CSV_HEADER = ("iteration", "labeled", "valid_f1", "agreement")


class InfeasiblePlan(ValueError):
    pass


@dataclass(frozen=True)
class BudgetPlan:
    budget: int
    iterations: int
    n_valid: int
    k0: int
    k: int
    leftover: int

    @property
    def total_queries(self) -> int:
        return self.n_valid + self.k0 + self.iterations * self.k

    @property
    def train_pool_needed(self) -> int:
        return self.k0 + self.iterations * self.k

    def to_dict(self) -> dict:
        return {"budget": self.budget, "iterations": self.iterations, "n_valid": self.n_valid,
                "k0": self.k0, "k": self.k, "leftover": self.leftover}


def _frac(x) -> Fraction:
    # decimal string keeps 0.29 * 100 == 29 exact
    return Fraction(str(x))


def plan_budget(budget: int, iterations: int, seed_fraction: float = 0.1,
                validation_fraction: float = 0.2) -> BudgetPlan:
    """Integer budget split: validation labels, seed set, then ``N`` equal batches of ``k``.

    Floors are exact (rational arithmetic); whatever the floors leave over is
    reported and never spent.
    """
    if budget < 1 or iterations < 1:
        raise InfeasiblePlan("budget and iteration count must be positive")
    eta, sf = _frac(validation_fraction), _frac(seed_fraction)
    if not 0 < eta < 1:
        raise InfeasiblePlan(f"validation fraction must lie in (0, 1), got {validation_fraction}")
    if not 0 < sf < 1 - eta:
        raise InfeasiblePlan(f"seed fraction must lie in (0, 1 - eta), got {seed_fraction}")
    n_valid = int(eta * budget)
    k0 = int(sf * budget)
    k = int(((1 - eta) * budget - k0) / iterations)
    if k < 1:
        raise InfeasiblePlan(f"budget {budget} with {iterations} iterations leaves k={k} < 1")
    if n_valid < 1 or k0 < 1:
        raise InfeasiblePlan(f"budget {budget} is too small for a validation set and a seed set")
    leftover = budget - n_valid - k0 - iterations * k
    return BudgetPlan(budget, iterations, n_valid, k0, k, leftover)


@dataclass
class ExtractionConfig:
    budget: int
    iterations: int
    substitute_spec: NetworkSpec
    strategy: StrategyKind | str = StrategyKind.RANDOM
    seed_fraction: float = 0.1
    validation_fraction: float = 0.2
    rho: Optional[int] = None  # ensemble pre-filter size, defaults to the budget
    oracle_mode: OracleMode | str = OracleMode.TOP1
    train_config: TrainConfig = field(default_factory=TrainConfig.desk)
    master_seed: int = 0
    deepfool_max_iter: int = DEEPFOOL_MAX_ITER
    deepfool_overshoot: float = DEEPFOOL_OVERSHOOT

    def __post_init__(self):
        self.strategy = StrategyKind(self.strategy)
        self.oracle_mode = OracleMode(self.oracle_mode)

    @property
    def effective_rho(self) -> int:
        return self.budget if self.rho is None else int(self.rho)

    def plan(self) -> BudgetPlan:
        return plan_budget(self.budget, self.iterations, self.seed_fraction, self.validation_fraction)

    def validate(self) -> BudgetPlan:
        plan = self.plan()
        if self.strategy is StrategyKind.ENSEMBLE and self.effective_rho < plan.k:
            raise InfeasiblePlan(f"ensemble needs rho >= k, got rho={self.effective_rho} and k={plan.k}")
        return plan

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "iterations": self.iterations,
            "strategy": self.strategy.value,
            "seed_fraction": self.seed_fraction,
            "validation_fraction": self.validation_fraction,
            "rho": self.effective_rho,
            "oracle_mode": self.oracle_mode.value,
            "substitute_spec": self.substitute_spec.to_dict(),
            "train_config": self.train_config.to_dict(),
            "master_seed": self.master_seed,
            "deepfool_max_iter": self.deepfool_max_iter,
            "deepfool_overshoot": self.deepfool_overshoot,
        }


@dataclass
class IterationRecord:
    iteration: int
    labeled_count: int
    train_report: TrainReport
    agreement_on_test: float

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "labeled": self.labeled_count,
                "train": self.train_report.to_dict(), "agreement": self.agreement_on_test}


@dataclass
class ExtractionReport:
    config: dict
    plan: BudgetPlan
    records: list[IterationRecord]
    queries_consumed: int
    valid_indices: list[int]
    labeled_indices: list[int]
    label_counts: list[int] = field(default_factory=list)  # oracle top classes over the labeled train set
    substitute: Optional[Network] = field(default=None, repr=False)

    @property
    def final_agreement(self) -> float:
        return self.records[-1].agreement_on_test

    @property
    def agreement_curve(self) -> list[float]:
        return [r.agreement_on_test for r in self.records]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "plan": self.plan.to_dict(),
            "iterations": [r.to_dict() for r in self.records],
            "final_agreement": self.final_agreement,
            "queries_consumed": self.queries_consumed,
            "valid_indices": self.valid_indices,
            "labeled_indices": self.labeled_indices,
            "label_counts": self.label_counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.iteration, r.labeled_count, repr(r.train_report.best_valid_f1),
                        repr(r.agreement_on_test)])
        return buf.getvalue()


def _classes(labels) -> np.ndarray:
    a = np.asarray(labels)
    return a.argmax(axis=1) if a.ndim == 2 else a.astype(np.int64)


def agreement(f_labels, g_labels) -> float:
    """Fraction of samples on which two label lists name the same top class."""
    f, g = _classes(f_labels), _classes(g_labels)
    if f.size == 0:
        raise ValueError("agreement over an empty set")
    if f.shape != g.shape:
        raise ValueError(f"label lists differ in length: {f.shape} vs {g.shape}")
    return float(np.mean(f == g))


def label_entropy(labels, num_classes: int) -> float:
    """Entropy (nats) of the empirical class histogram of a label list."""
    counts = np.bincount(_classes(labels), minlength=num_classes).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def _draw_order(master_seed: int, n_train: int) -> np.ndarray:
    return np.random.default_rng([master_seed, 1]).permutation(n_train)


def _draw_valid(master_seed: int, n_pool: int, n_valid: int) -> np.ndarray:
    return np.sort(np.random.default_rng([master_seed, 0]).choice(n_pool, size=n_valid, replace=False))


def random_labeled_indices(config: ExtractionConfig, n_train: int) -> np.ndarray:
    """Indices a random-strategy run labels, drawn in one batch without any training."""
    plan = config.plan()
    return _draw_order(config.master_seed, n_train)[:plan.train_pool_needed]


def run_extraction(config: ExtractionConfig, oracle, thief: UnlabeledPool, testset: LabeledDataset,
                   progress=None) -> ExtractionReport:
    """Run the seed / train / select / query loop and measure agreement after every training.

    ``testset.labels`` must hold the secret model's own predictions on
    ``testset.samples``; agreement is computed against them. ``oracle`` is
    anything with a ``query(batch)`` method. ``progress`` is an optional
    callable receiving each :class:`IterationRecord`.
    """
    plan = config.validate()
    x_train, x_valid = thief.train, thief.valid
    if len(x_train) < plan.train_pool_needed:
        raise InfeasiblePlan(f"thief train partition has {len(x_train)} samples, run needs {plan.train_pool_needed}")
    if len(x_valid) < plan.n_valid:
        raise InfeasiblePlan(f"thief valid partition has {len(x_valid)} samples, run needs {plan.n_valid}")
    left = oracle.remaining() if hasattr(oracle, "remaining") else None
    if left is not None and left < plan.total_queries:
        raise InfeasiblePlan(f"oracle has {left} queries left, run needs {plan.total_queries}")
    mode = getattr(oracle, "mode", None)
    if mode is not None and OracleMode(mode) is not config.oracle_mode:
        raise ValueError(f"oracle answers in {OracleMode(mode).value} mode but the config says {config.oracle_mode.value}")
    spec = config.substitute_spec
    start_consumed = getattr(oracle, "consumed", None)

    valid_idx = _draw_valid(config.master_seed, len(x_valid), plan.n_valid)
    d_valid = LabeledDataset(x_valid[valid_idx], oracle.query(x_valid[valid_idx]), "valid")

    order = _draw_order(config.master_seed, len(x_train))
    labeled = list(order[:plan.k0])
    labels = [oracle.query(x_train[labeled])]
    is_labeled = np.zeros(len(x_train), dtype=bool)
    is_labeled[labeled] = True
    consumed = plan.n_valid + plan.k0

    test_top1 = testset.labels
    records: list[IterationRecord] = []

    def train_and_record(i: int) -> Network:
        d_train = LabeledDataset(x_train[labeled], np.concatenate(labels), "train")
        sub, rep = train_network(d_train, d_valid, spec, config.train_config)
        rec = IterationRecord(i, len(labeled), rep, agreement(test_top1, predict_top1(sub, testset.samples)))
        records.append(rec)
        if progress is not None:
            progress(rec)
        return sub

    for i in range(1, config.iterations + 1):
        sub = train_and_record(i - 1)
        if config.strategy is StrategyKind.RANDOM:
            # the random stream is fixed up front, so skipping training would label the same points
            lo = plan.k0 + (i - 1) * plan.k
            picks = order[lo:lo + plan.k]
        else:
            pool = np.flatnonzero(~is_labeled)
            ctx = SelectionContext(
                substitute=sub,
                pool_indices=pool,
                pool_probs=predict_proba(sub, x_train[pool]),
                center_probs=predict_proba(sub, x_train[labeled]),
                k=plan.k,
                rng_seed=int(np.random.default_rng([config.master_seed, 2, i]).integers(2**63)),
            )
            needs_x = config.strategy in (StrategyKind.ADVERSARIAL, StrategyKind.ENSEMBLE)
            picks = select(config.strategy, ctx, x_train[pool] if needs_x else None, rho=config.effective_rho,
                           max_iter=config.deepfool_max_iter, overshoot=config.deepfool_overshoot)
        picks = np.asarray(picks, dtype=np.int64)
        if is_labeled[picks].any() or len(np.unique(picks)) != plan.k:
            raise RuntimeError("selection returned an already-labeled or repeated index")
        labels.append(oracle.query(x_train[picks]))
        is_labeled[picks] = True
        labeled.extend(picks.tolist())
        consumed += plan.k

    sub = train_and_record(config.iterations)
    if start_consumed is not None:
        consumed = oracle.consumed - start_consumed
    return ExtractionReport(
        config=config.to_dict(),
        plan=plan,
        records=records,
        queries_consumed=int(consumed),
        valid_indices=[int(v) for v in valid_idx],
        labeled_indices=[int(v) for v in labeled],
        label_counts=np.bincount(_classes(np.concatenate(labels)), minlength=spec.num_classes).tolist(),
        substitute=sub,
    )
