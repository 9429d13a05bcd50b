"""Command-line harness: train a secret model, run extractions and sweeps, inspect reports.

Exit status is 0 on success, 2 for configuration problems (detected before
any oracle query is made) and 3 when a run fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import experiment as ex
from .extraction import InfeasiblePlan
from .nn import Network

log = logging.getLogger("extractlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class RunFailure(RuntimeError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its fields")
    p.add_argument("--task", choices=ex.TASKS)
    p.add_argument("--idx-dir", help="directory with MNIST-layout IDX files (idx task)")
    p.add_argument("--secret-arch", choices=("LC", "BC", "HC"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--paper-faithful", action="store_true", default=None,
                   help="use the full training schedule instead of the desk profile")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_extraction(p: argparse.ArgumentParser, lists: bool) -> None:
    p.add_argument("--secret", help="secret model file (default: OUT/secret.json)")
    p.add_argument("--seed", type=_int_list, help="replicate seed(s), comma separated")
    p.add_argument("--budget", type=_int_list if lists else int,
                   help="query budget" + (" list, comma separated" if lists else ""))
    p.add_argument("--iterations", type=int)
    p.add_argument("--strategy", type=_str_list if lists else str,
                   help="selection strategy" + (" list, comma separated" if lists else ""))
    p.add_argument("--mode", choices=("top1", "softmax"))
    p.add_argument("--substitute-arch", choices=("LC", "BC", "HC"))
    p.add_argument("--thief", choices=ex.THIEF_MODES)
    p.add_argument("--thief-idx-dir", help="directory with IDX images used as the thief pool")
    p.add_argument("--rho", type=int, help="ensemble pre-filter size (default: the budget)")
    p.add_argument("--jobs", type=int, help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="extractlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-secret", help="train the secret model and write it with test metrics")
    _add_common(p)

    p = sub.add_parser("extract", help="run one extraction per replicate seed")
    _add_common(p)
    _add_extraction(p, lists=False)

    p = sub.add_parser("sweep", help="run every (strategy, budget, seed) cell and aggregate")
    _add_common(p)
    _add_extraction(p, lists=True)

    p = sub.add_parser("report", help="pretty-print a stored JSON report")
    p.add_argument("path")
    p.add_argument("--figures", help="also render PNG figures into this directory (needs matplotlib)")

    p = sub.add_parser("serve-oracle", help="answer line-delimited JSON queries on stdin with a budget")
    p.add_argument("--secret", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--mode", choices=("top1", "softmax"), default="top1")
    return parser


def config_from_args(args: argparse.Namespace) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if getattr(args, "config", None) else ex.ExperimentConfig()
    changes = {}
    simple = {"task": "task", "idx_dir": "idx_dir", "secret_arch": "secret_arch", "out": "out",
              "paper_faithful": "paper_faithful", "iterations": "iterations", "mode": "mode",
              "substitute_arch": "substitute_arch", "thief": "thief", "thief_idx_dir": "thief_idx_dir",
              "rho": "rho", "jobs": "jobs"}
    for attr, field_name in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            changes[field_name] = value
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = args.seed
    budget = getattr(args, "budget", None)
    if budget is not None:
        if isinstance(budget, list):
            changes["budgets"] = budget
        else:
            changes["budget"], changes["budgets"] = budget, []
    strategy = getattr(args, "strategy", None)
    if strategy is not None:
        if isinstance(strategy, list):
            changes["strategies"] = strategy
        else:
            changes["strategy"], changes["strategies"] = strategy, []
    return cfg.replace(**changes)


def _secret_path(args, cfg) -> Path:
    return Path(args.secret) if getattr(args, "secret", None) else Path(cfg.out) / "secret.json"


def _load_secret(path: Path, task: ex.Task) -> Network:
    if not path.exists():
        raise ex.ConfigError(f"secret model {path} not found; run train-secret first")
    try:
        net = Network.load(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise ex.ConfigError(f"cannot read secret model {path}: {e}") from e
    if net.spec.input_dim != task.input_dim or net.spec.num_classes != task.num_classes:
        raise ex.ConfigError(f"secret model {path} does not fit task {task.input_dim}-d / {task.num_classes} classes")
    return net


def _report_files(out: Path, name: str, report) -> list[Path]:
    paths = [out / f"{name}.json", out / f"{name}.csv"]
    ex.atomic_write(paths[0], report.to_json())
    ex.atomic_write(paths[1], report.to_csv())
    return paths


def _progress(label: str):
    def emit(rec):
        log.info("%s iteration %d: %d labeled, agreement %.4f", label, rec.iteration, rec.labeled_count,
                 rec.agreement_on_test)
    return emit


def cmd_train_secret(cfg: ex.ExperimentConfig) -> int:
    cfg.validate(need_thief=False)
    task = ex.build_task(cfg)
    net, metrics = ex.train_secret(cfg, task)
    out = Path(cfg.out)
    ex.atomic_write(out / "secret.json", net.to_json())
    metrics["config"] = cfg.to_dict()
    ex.atomic_write(out / "secret_metrics.json", ex.dump_json(metrics))
    print(f"secret {cfg.secret_arch} on {cfg.task}: test accuracy {metrics['test_accuracy']:.4f}, "
          f"macro-F1 {metrics['test_macro_f1']:.4f} -> {out / 'secret.json'}")
    return EXIT_OK


def _prepare(cfg: ex.ExperimentConfig, secret_path: Path):
    cfg.validate()
    task = ex.build_task(cfg)
    secret = _load_secret(secret_path, task)
    thief = ex.build_thief(cfg, task)
    for budget in cfg.budget_list:
        plan = cfg.extraction_config(budget, cfg.strategy_list[0], cfg.seeds[0], task.input_dim,
                                     task.num_classes).plan()
        if len(thief.train) < plan.train_pool_needed or len(thief.valid) < plan.n_valid:
            raise ex.ConfigError(f"thief pool ({len(thief.train)} train / {len(thief.valid)} valid) too small "
                                 f"for budget {budget}")
    return task, secret, thief


def cmd_extract(cfg: ex.ExperimentConfig, secret_path: Path) -> int:
    task, secret, thief = _prepare(cfg, secret_path)
    out = Path(cfg.out)
    failures = 0
    for seed in cfg.seeds:
        name = ex.cell_name(cfg.strategy, cfg.budget, seed, cfg.mode)
        try:
            report = ex.run_cell(cfg, secret, task, thief, cfg.budget, cfg.strategy, seed, _progress(name))
        except Exception:
            log.exception("run %s failed", name)
            failures += 1
            continue
        _report_files(out, name, report)
        print(f"{name}: final agreement {report.final_agreement:.4f}, "
              f"{report.queries_consumed} queries (leftover {report.plan.leftover})")
    if failures:
        raise RunFailure(f"{failures} of {len(cfg.seeds)} runs failed")
    return EXIT_OK


# worker processes rebuild task, thief and secret once and keep them
_WORKER_STATE: dict = {}


def _worker_init(cfg_dict: dict, secret_doc: dict) -> None:
    cfg = ex.ExperimentConfig.from_dict(cfg_dict)
    task = ex.build_task(cfg)
    _WORKER_STATE.update(cfg=cfg, task=task, thief=ex.build_thief(cfg, task),
                         secret=Network.from_dict(secret_doc))


def _worker_cell(cell: tuple[str, int, int]) -> dict:
    s = _WORKER_STATE
    strategy, budget, seed = cell
    return ex.run_cell(s["cfg"], s["secret"], s["task"], s["thief"], budget, strategy, seed).to_dict()


def sweep_means(cells: list[dict]) -> dict[str, dict[int, float]]:
    """Arithmetic mean of final agreement per (strategy, budget) over seeds."""
    groups: dict[tuple[str, int], list[float]] = {}
    for c in cells:
        groups.setdefault((c["strategy"], c["budget"]), []).append(c["final_agreement"])
    means: dict[str, dict[int, float]] = {}
    for (strategy, budget), values in groups.items():
        means.setdefault(strategy, {})[budget] = float(np.mean(values))
    return means


def sweep_csv(means: dict[str, dict[int, float]], strategies: Sequence[str], budgets: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", *budgets])
    for s in strategies:
        w.writerow([s, *(repr(means[s][b]) for b in budgets)])
    return buf.getvalue()


def cmd_sweep(cfg: ex.ExperimentConfig, secret_path: Path) -> int:
    task, secret, thief = _prepare(cfg, secret_path)
    grid = [(s, b, seed) for s in cfg.strategy_list for b in cfg.budget_list for seed in cfg.seeds]
    log.info("sweep of %d cells with %d worker(s)", len(grid), cfg.jobs)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs, initializer=_worker_init,
                                 initargs=(cfg.to_dict(), secret.to_dict())) as pool:
            reports = list(pool.map(_worker_cell, grid))
    else:
        reports = [ex.run_cell(cfg, secret, task, thief, b, s, seed, _progress(ex.cell_name(s, b, seed, cfg.mode)))
                   .to_dict() for s, b, seed in grid]

    cells = [{"strategy": s, "budget": b, "seed": seed, "final_agreement": r["final_agreement"], "report": r}
             for (s, b, seed), r in zip(grid, reports)]
    means = sweep_means(cells)
    doc = {
        "config": cfg.to_dict(),
        "strategies": cfg.strategy_list,
        "budgets": cfg.budget_list,
        "seeds": cfg.seeds,
        "means": {s: {str(b): v for b, v in row.items()} for s, row in means.items()},
        "cells": cells,
    }
    out = Path(cfg.out)
    ex.atomic_write(out / "sweep.json", ex.dump_json(doc))
    ex.atomic_write(out / "sweep.csv", sweep_csv(means, cfg.strategy_list, cfg.budget_list))
    print(sweep_csv(means, cfg.strategy_list, cfg.budget_list), end="")
    return EXIT_OK


def _table(rows: list[list], header: list[str]) -> str:
    cells = [header] + [[str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells)


def cmd_report(path: str, figures: Optional[str]) -> int:
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ex.ConfigError(f"cannot read report {path}: {e}") from e
    made = []
    if "cells" in doc:
        means = {s: {int(b): v for b, v in row.items()} for s, row in doc["means"].items()}
        rows = [[s, *(f"{100 * means[s][b]:.2f}" for b in doc["budgets"])] for s in doc["strategies"]]
        print(f"mean final agreement (%) over seeds {doc['seeds']}")
        print(_table(rows, ["strategy", *map(str, doc["budgets"])]))
        if figures:
            from . import plots

            made.append(plots.sweep_table(means, Path(figures) / f"{p.stem}_budgets.png"))
            curves = {f"{c['strategy']} B={c['budget']} seed={c['seed']}": [r["agreement"] for r in
                      c["report"]["iterations"]] for c in doc["cells"]}
            made.append(plots.agreement_curves(curves, Path(figures) / f"{p.stem}_curves.png"))
    elif "iterations" in doc:
        c = doc["config"]
        print(f"strategy {c['strategy']}, mode {c['oracle_mode']}, budget {c['budget']}, seed {c['master_seed']}")
        print(f"plan {doc['plan']}; queries consumed {doc['queries_consumed']}")
        rows = [[r["iteration"], r["labeled"], f"{r['train']['best_valid_f1']:.4f}", f"{r['agreement']:.4f}"]
                for r in doc["iterations"]]
        print(_table(rows, ["iteration", "labeled", "valid_f1", "agreement"]))
        print(f"final agreement {doc['final_agreement']:.4f}")
        if figures:
            from . import plots

            curve = {c["strategy"]: [r["agreement"] for r in doc["iterations"]]}
            made.append(plots.agreement_curves(curve, Path(figures) / f"{p.stem}_curve.png"))
            if doc.get("label_counts"):
                made.append(plots.label_histogram(doc["label_counts"], Path(figures) / f"{p.stem}_labels.png"))
    else:
        print(ex.dump_json(doc), end="")
    for f in made:
        print(f"wrote {f}")
    return EXIT_OK


def cmd_serve_oracle(secret: str, budget: int, mode: str) -> int:
    from .oracle import SecretOracle, serve

    try:
        net = Network.load(secret)
    except (OSError, ValueError, KeyError) as e:
        raise ex.ConfigError(f"cannot read secret model {secret}: {e}") from e
    serve(SecretOracle(net, mode, budget), sys.stdin, sys.stdout)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            return cmd_report(args.path, args.figures)
        if args.command == "serve-oracle":
            return cmd_serve_oracle(args.secret, args.budget, args.mode)
        cfg = config_from_args(args)
        if args.command == "train-secret":
            return cmd_train_secret(cfg)
        if args.command == "extract":
            return cmd_extract(cfg, _secret_path(args, cfg))
        return cmd_sweep(cfg, _secret_path(args, cfg))
    except (ex.ConfigError, InfeasiblePlan, FileNotFoundError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
