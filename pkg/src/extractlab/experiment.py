"""Experiment configuration and the task/thief/secret plumbing shared by the CLI and the tests."""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data
from .extraction import ExtractionConfig, ExtractionReport, InfeasiblePlan, plan_budget, run_extraction
from .nn import Network, NetworkSpec, PRESETS, predict_top1
from .oracle import OracleMode, SecretOracle
from .strategies import StrategyKind
from .training import TrainConfig, macro_f1, train_network

TASKS = ("blobs", "rings", "checkerboard", "digits", "idx")
THIEF_MODES = ("natural", "noise", "idx")


class ConfigError(ValueError):
    """Invalid experiment configuration, detected before any work is done."""


@dataclass
class ExperimentConfig:
    task: str = "rings"
    # idx task: directories holding train-/t10k- IDX pairs (MNIST layout), and the thief images
    idx_dir: Optional[str] = None
    thief_idx_dir: Optional[str] = None
    secret_arch: str = "BC"
    substitute_arch: str = "LC"
    thief: str = "natural"
    budget: int = 2000
    budgets: list[int] = field(default_factory=list)
    iterations: int = 10
    strategy: str = "random"
    strategies: list[str] = field(default_factory=list)
    seed_fraction: float = 0.1
    validation_fraction: float = 0.2
    rho: Optional[int] = None
    mode: str = "top1"
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    paper_faithful: bool = False
    train_overrides: dict = field(default_factory=dict)
    secret_seed: int = 0
    task_seed: int = 0
    thief_seed: int = 0
    num_classes: int = 2
    task_noise: float = 0.0
    task_sizes: tuple[int, int, int] = (4000, 1000, 2000)
    thief_sizes: tuple[int, int] = (10000, 2000)
    secret_max_epochs: Optional[int] = None
    jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("task_sizes", "thief_sizes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["task_sizes"] = list(self.task_sizes)
        d["thief_sizes"] = list(self.thief_sizes)
        return d

    def train_config(self, seed: int) -> TrainConfig:
        base = TrainConfig.paper_faithful if self.paper_faithful else TrainConfig.desk
        return base(**{**self.train_overrides, "seed": seed})

    def secret_train_config(self) -> TrainConfig:
        cfg = self.train_config(self.secret_seed)
        if self.secret_max_epochs is not None:
            cfg = cfg.replace(max_epochs=self.secret_max_epochs, patience=min(cfg.patience, self.secret_max_epochs))
        return cfg

    @property
    def budget_list(self) -> list[int]:
        return list(self.budgets) or [self.budget]

    @property
    def strategy_list(self) -> list[str]:
        return list(self.strategies) or [self.strategy]

    def validate(self, need_thief: bool = True) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        for name in ("secret_arch", "substitute_arch"):
            if getattr(self, name) not in PRESETS:
                raise ConfigError(f"{name} must be one of {sorted(PRESETS)}")
        if self.task == "idx" and not self.idx_dir:
            raise ConfigError("task 'idx' needs idx_dir (a directory with MNIST-layout IDX files)")
        if self.task == "idx" and not Path(self.idx_dir).is_dir():
            raise ConfigError(f"idx_dir {self.idx_dir!r} is not a directory")
        if not self.seeds:
            raise ConfigError("at least one replicate seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("replicate seeds must be distinct")
        if self.jobs < 1:
            raise ConfigError("jobs must be positive")
        try:
            self.train_config(0)
            OracleMode(self.mode)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not need_thief:
            return
        if self.thief not in THIEF_MODES:
            raise ConfigError(f"unknown thief mode {self.thief!r}; choose from {THIEF_MODES}")
        if self.thief == "idx" and not self.thief_idx_dir:
            raise ConfigError("thief 'idx' needs thief_idx_dir")
        if self.task == "idx" and self.thief == "natural" and not self.thief_idx_dir:
            raise ConfigError("natural thief for the idx task means thief_idx_dir images; set thief_idx_dir")
        for strategy in self.strategy_list:
            try:
                StrategyKind(strategy)
            except ValueError:
                raise ConfigError(f"unknown strategy {strategy!r}") from None
        for budget in self.budget_list:
            for strategy in self.strategy_list:
                try:
                    self.extraction_config(budget, strategy, self.seeds[0]).validate()
                except InfeasiblePlan as e:
                    raise ConfigError(f"budget {budget}, strategy {strategy}: {e}") from e
                need = plan_budget(budget, self.iterations, self.seed_fraction, self.validation_fraction)
                if self.thief != "idx" and not (self.task == "idx" and self.thief == "natural"):
                    n_tr, n_va = self.thief_sizes
                    if n_tr < need.train_pool_needed or n_va < need.n_valid:
                        raise ConfigError(
                            f"thief pool {self.thief_sizes} too small for budget {budget} "
                            f"(needs {need.train_pool_needed} train / {need.n_valid} valid)")

    def extraction_config(self, budget: int, strategy: str, seed: int, input_dim: int = 2,
                          num_classes: Optional[int] = None) -> ExtractionConfig:
        return ExtractionConfig(
            budget=budget,
            iterations=self.iterations,
            substitute_spec=NetworkSpec.preset(self.substitute_arch, input_dim, num_classes or self.num_classes),
            strategy=strategy,
            seed_fraction=self.seed_fraction,
            validation_fraction=self.validation_fraction,
            rho=self.rho,
            oracle_mode=self.mode,
            train_config=self.train_config(seed),
            master_seed=seed,
        )


@dataclass
class Task:
    folds: dict
    input_dim: int
    num_classes: int
    bounds: Optional[tuple] = None


def build_task(cfg: ExperimentConfig) -> Task:
    if cfg.task in ("blobs", "rings", "checkerboard"):
        n_tr, n_va, n_te = cfg.task_sizes
        spec = data.SyntheticTaskSpec(cfg.task, cfg.num_classes, n_tr, n_va, n_te, cfg.task_noise, cfg.task_seed)
        return Task(data.gen_synthetic(spec), 2, cfg.num_classes, data.task_bounds(spec))
    if cfg.task == "digits":
        folds = data.load_digits_task(cfg.task_seed)
        return Task(folds, folds["train"].samples.shape[1], 10)
    train_files = data.find_idx_pair(cfg.idx_dir, "train")
    test_files = data.find_idx_pair(cfg.idx_dir, "test")
    full = data.load_idx(*train_files, num_classes=10)
    train, valid = data.split(full, (0.8, 0.2), seed=cfg.task_seed, folds=("train", "valid"))
    test = data.load_idx(*test_files, num_classes=10, fold="test")
    return Task({"train": train, "valid": valid, "test": test}, full.samples.shape[1], 10)


def build_thief(cfg: ExperimentConfig, task: Task) -> data.UnlabeledPool:
    n_tr, n_va = cfg.thief_sizes
    image_task = cfg.task in ("digits", "idx")
    if cfg.thief == "idx" or (cfg.task == "idx" and cfg.thief == "natural"):
        path, _ = data.find_idx_pair(cfg.thief_idx_dir, "train")
        images = data.load_idx_unlabeled(path)
        tr_idx, va_idx = data.split_indices(len(images), (0.8, 0.2), seed=cfg.thief_seed)
        return data.UnlabeledPool(images[tr_idx], images[va_idx], "idx-file")
    if cfg.thief == "noise":
        if image_task:
            return data.uniform_noise_pool(task.input_dim, n_tr, n_va, cfg.thief_seed)
        return data.gen_thief_pool(task.bounds, n_tr, n_va, "noise", cfg.thief_seed)
    if cfg.task == "digits":
        return data.natural_patch_pool(n_tr, n_va, 28, cfg.thief_seed)
    return data.gen_thief_pool(task.bounds, n_tr, n_va, "natural", cfg.thief_seed)


def train_secret(cfg: ExperimentConfig, task: Optional[Task] = None) -> tuple[Network, dict]:
    task = task or build_task(cfg)
    spec = NetworkSpec.preset(cfg.secret_arch, task.input_dim, task.num_classes)
    net, rep = train_network(task.folds["train"], task.folds["valid"], spec, cfg.secret_train_config())
    test = task.folds["test"]
    pred = predict_top1(net, test.samples)
    metrics = {
        "task": cfg.task,
        "secret_arch": cfg.secret_arch,
        "test_accuracy": float(np.mean(pred.argmax(axis=1) == test.classes)),
        "test_macro_f1": macro_f1(pred, test.labels, task.num_classes),
        "train": rep.to_dict(),
        "n_params": net.n_params,
    }
    return net, metrics


def secret_testset(secret: Network, task: Task) -> data.LabeledDataset:
    """Secret-test inputs labeled with the secret model's own Top-1 predictions."""
    x = task.folds["test"].samples
    return data.LabeledDataset(x, predict_top1(secret, x), "test")


def run_cell(cfg: ExperimentConfig, secret: Network, task: Task, thief: data.UnlabeledPool,
             budget: int, strategy: str, seed: int, progress=None) -> ExtractionReport:
    """One extraction run with its own oracle, labeled against the secret's test predictions."""
    ecfg = cfg.extraction_config(budget, strategy, seed, task.input_dim, task.num_classes)
    oracle = SecretOracle(secret, cfg.mode, budget)
    return run_extraction(ecfg, oracle, thief, secret_testset(secret, task), progress=progress)


def cell_name(strategy: str, budget: int, seed: int, mode: str = "top1") -> str:
    return f"extract_{strategy}_{mode}_B{budget}_seed{seed}"


def atomic_write(path, text: str) -> None:
    """Write UTF-8 text with LF endings via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
