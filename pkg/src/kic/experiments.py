"""Drivers for the scaled-down mechanism experiments on the synthetic suite.

Every comparison runs in two stages. Stage one trains a copy-competent
backbone with routing pinned to each task's home category, the small-scale
stand-in for starting from a pretrained text-to-text model. The pinning
matters: the suite is built so that a flat lookup cannot reach every answer,
and any answer the backbone cannot copy out of context it slowly memorizes
instead. A backbone that answers from its weights makes training loss
indifferent to routing, which starves the selector of signal in stage two.
With the home category pinned, every answer is copyable, copying stays the
cheapest strategy, and the memorization circuit never forms. Stage two
restarts the optimizer from those weights once per selector mode, so the
modes differ only in how knowledge reaches the model.

The balancing coefficient for stage two is larger than the full-scale
default. The training loss sums cross-entropy over target positions, so at
fourteen-token targets the scale-path gradient into the selector is roughly
an order of magnitude stronger than at the scale the default was tuned for;
alpha restores enough balancing pressure that a captured expert gets ground
down before the run ends.
"""

from __future__ import annotations

import math
from pathlib import Path

from .evaluation import evaluate_task, routing_report
from .store import category_ordinal
from .synth import SynthSuite, build_collapse_suite, build_synthetic_suite, \
    synthetic_model_config, synthetic_train_config
from .training import ModelState, init_state, load_checkpoint, run_training

PRETRAIN_STEPS = 2400
STAGE2_EPOCHS = 5
STAGE2_ALPHA = 1.0


def pretrain_backbone(suite: SynthSuite, seed: int, out_dir: str | Path,
                      max_steps: int = PRETRAIN_STEPS,
                      dtype: str = "f32") -> ModelState:
    """Stage one: train until the backbone can copy answers out of retrieved
    context, with each task routed to its home category so that every answer
    is actually in that context. Reuses an existing checkpoint in out_dir if
    the run already finished."""
    out_dir = Path(out_dir)
    checkpoint = out_dir / "checkpoint.kicw"
    config = synthetic_model_config(seed=seed, dtype=dtype)
    train_config = synthetic_train_config("task", seed=seed, epochs=100,
                                          max_steps=max_steps)
    if checkpoint.exists():
        state = load_checkpoint(checkpoint)
        if state.step >= max_steps and state.config.to_dict() == config.to_dict():
            return state
    state = init_state(config, train_config)
    # pin the per-task expert map up front; warmup never runs, and stage two
    # discards the (untrained) selector anyway
    state.task_expert = {name: category_ordinal(category)
                         for name, category in suite.planted_category.items()}
    run_training(state, suite.train_tasks, suite.ctx, out_dir)
    return state


def train_mode(suite: SynthSuite, mode: str, seed: int, out_dir: str | Path,
               alpha: float = STAGE2_ALPHA, epochs: int = STAGE2_EPOCHS,
               max_steps: int | None = None, dtype: str = "f32",
               init_from: ModelState | None = None):
    """Stage two: train one selector mode on the suite; returns (state, metrics).

    With init_from, backbone weights start from that state's (config-identical)
    parameters while the selector and optimizer moments start fresh."""
    config = synthetic_model_config(seed=seed, dtype=dtype)
    train_config = synthetic_train_config(mode, seed=seed, alpha=alpha,
                                          epochs=epochs, max_steps=max_steps)
    state = init_state(config, train_config)
    if init_from is not None:
        if init_from.config.to_dict() != config.to_dict():
            raise ValueError("init_from was trained under a different model config")
        for name in state.params:
            state.params[name] = init_from.params[name].copy()
    metrics = run_training(state, suite.train_tasks, suite.ctx, out_dir)
    return state, metrics


def evaluate_suite(suite: SynthSuite, state: ModelState,
                   routing_log_path: str | Path | None = None) -> dict[str, float]:
    """Held-out accuracy per task; optionally logs the routing decisions."""
    accuracies: dict[str, float] = {}
    sink = None
    try:
        if routing_log_path is not None:
            sink = Path(routing_log_path).open("w", encoding="utf-8")
        for task in suite.eval_tasks:
            result = evaluate_task(task, state, suite.ctx, log_sink=sink)
            accuracies[task.name] = result.mean
    finally:
        if sink is not None:
            sink.close()
    return accuracies


def planted_fractions(routing_log_path: str | Path,
                      suite: SynthSuite) -> dict[str, float]:
    """Fraction of each task's eval decisions routed to its planted category."""
    fractions: dict[str, float] = {}
    for task_name, category in suite.planted_category.items():
        report = routing_report(routing_log_path, task=task_name)
        fractions[task_name] = report.fractions[category_ordinal(category)]
    return fractions


def dispatch_entropy(metrics: list[dict], last_n: int = 100) -> float:
    """Mean entropy (nats) of the per-step dispatch distributions over the
    last `last_n` steps."""
    rows = metrics[-last_n:]
    if not rows:
        raise ValueError("no metrics rows")
    total = 0.0
    for row in rows:
        counts = row["dispatch"]
        n = sum(counts)
        if n == 0:
            raise ValueError("dispatch counts empty; was a selector mode used?")
        entropy = 0.0
        for count in counts:
            if count > 0:
                p = count / n
                entropy -= p * math.log(p)
        total += entropy
    return total / len(rows)


ENTROPY_STEPS = 300
ENTROPY_WINDOW = 100
ENTROPY_ALPHAS = (0.0, 0.05)
COLLAPSE_PRETRAIN_STEPS = 2400


def entropy_contrast(out_root: str | Path, seeds=(0, 1, 2, 3, 4),
                     alphas: tuple[float, ...] = ENTROPY_ALPHAS,
                     max_steps: int = ENTROPY_STEPS,
                     last_n: int = ENTROPY_WINDOW) -> list[dict]:
    """Collapse experiment: pairs of instance runs from the same pretrained
    start that differ only in the balancing coefficient, scored by dispatch
    entropy over the closing window of steps.

    Runs on the short-answer collapse suite, where the cross-entropy gradient
    into the logit scale is weak enough that the small balancing coefficient
    is a comparable force. Without the balancing term nothing counteracts the
    rich-get-richer loop on whichever expert each input first lands on, so
    dispatch concentrates; with it, overloaded experts are ground back down
    and routing keeps more support. Returns one row per (seed, alpha)."""
    out_root = Path(out_root)
    rows = []
    for seed in seeds:
        suite = build_collapse_suite(seed=seed)
        pretrained = pretrain_backbone(suite, seed,
                                       out_root / f"pretrain-collapse-s{seed}",
                                       max_steps=COLLAPSE_PRETRAIN_STEPS)
        for alpha in alphas:
            _, metrics = train_mode(suite, "instance", seed,
                                    out_root / f"alpha{alpha:g}-s{seed}",
                                    alpha=alpha, epochs=STAGE2_EPOCHS,
                                    max_steps=max_steps, init_from=pretrained)
            rows.append({"seed": seed, "alpha": alpha,
                         "entropy": dispatch_entropy(metrics, last_n)})
    return rows


def mode_run(suite: SynthSuite, mode: str, seed: int, out_dir: str | Path,
             pretrained: ModelState, alpha: float = STAGE2_ALPHA,
             epochs: int = STAGE2_EPOCHS) -> dict:
    """One stage-two run plus evaluation; returns the comparison bundle."""
    out_dir = Path(out_dir)
    state, metrics = train_mode(suite, mode, seed, out_dir, alpha=alpha,
                                epochs=epochs, init_from=pretrained)
    selector_routed = mode in ("instance", "no-generalist", "task", "none")
    log_path = out_dir / "routing_eval.jsonl" if selector_routed else None
    accuracies = evaluate_suite(suite, state, log_path)
    fractions = None
    if mode in ("instance", "no-generalist"):
        fractions = planted_fractions(log_path, suite)
    return {"mode": mode, "seed": seed, "accuracies": accuracies,
            "fractions": fractions, "metrics": metrics, "state": state}


def usefulness_matrix(out_root: str | Path, seeds=(0, 1, 2),
                      modes=("instance", "task", "none", "mixed")) -> list[dict]:
    """The full mode-by-seed comparison behind the usefulness and
    specialization claims. Pretrains once per seed, then branches."""
    out_root = Path(out_root)
    rows: list[dict] = []
    for seed in seeds:
        suite = build_synthetic_suite(seed=seed)
        pretrained = pretrain_backbone(suite, seed, out_root / f"pretrain-s{seed}")
        for mode in modes:
            run = mode_run(suite, mode, seed, out_root / f"{mode}-s{seed}",
                           pretrained)
            run["suite_seed"] = seed
            rows.append(run)
    return rows


def mean_task_accuracy(rows: list[dict], mode: str) -> dict[str, float]:
    """Per-task accuracy averaged over seeds for one mode."""
    by_task: dict[str, list[float]] = {}
    for row in rows:
        if row["mode"] != mode:
            continue
        for task, acc in row["accuracies"].items():
            by_task.setdefault(task, []).append(acc)
    if not by_task:
        raise ValueError(f"no rows for mode {mode!r}")
    return {task: sum(vals) / len(vals) for task, vals in by_task.items()}


def mean_planted_fraction(rows: list[dict]) -> dict[str, float]:
    """Per-task planted-category routing fraction averaged over instance runs."""
    by_task: dict[str, list[float]] = {}
    for row in rows:
        if row["mode"] != "instance":
            continue
        for task, frac in row["fractions"].items():
            by_task.setdefault(task, []).append(frac)
    if not by_task:
        raise ValueError("no instance rows")
    return {task: sum(vals) / len(vals) for task, vals in by_task.items()}
