"""Zero-shot evaluation by candidate scoring, template-level aggregation, and
routing-distribution reports.

Each example is scored by teacher-forced sequence log-probability of every
answer choice under the routed, knowledge-augmented input; the argmax choice
wins, ties to the lowest index. Accuracies aggregate per prompt template, and
the task-level numbers are the mean/median/std over template accuracies.
Evaluation never mutates model state.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model, router
from .retrieval import augment_input, retrieve_plaintext, retrieve_union
from .store import N_EXPERTS, category_name
from .tasks import TaskSpec, render_pair
from .training import (
    ModelState,
    assign_task_expert,
    encode_target,
    pieces_for_plan,
    prepare_input_ids,
)


@dataclass(frozen=True)
class EvalResult:
    task: str
    per_template_accuracy: dict[str, float]
    mean: float
    median: float
    std: float
    n_scored: int
    n_skipped: int
    excluded_templates: tuple[str, ...]  # templates with zero scorable examples


@dataclass(frozen=True)
class RoutingReport:
    task: str
    counts: tuple[int, ...]
    fractions: tuple[float, ...]


def _route_for_eval(state: ModelState, task_name: str, x_ids, ctx):
    """Returns (loggable selection | None, plan | None, scale)."""
    mode = state.train_config.selector_mode
    available = set(ctx.indexes) if ctx is not None else None
    if mode in ("instance", "no-generalist"):
        h_enc, pad_mask = model.encode(x_ids, state.params, state.config)
        selection = router.select(h_enc, pad_mask, state.selector,
                                  exclude_generalist=(mode == "no-generalist"))
        plan = router.route_expert(selection.chosen, available)
        scale = selection.chosen_prob if state.train_config.scale_at_eval else 1.0
        return selection, plan, scale
    if mode == "task":
        if state.task_expert is not None:
            chosen = state.task_expert.get(task_name, 0)
        else:
            chosen = assign_task_expert(task_name, state.warmup_counts)
        plan = router.route_expert(chosen, available)
        probs = np.zeros(N_EXPERTS)
        probs[chosen] = 1.0
        return router.Selection(probs=probs, chosen=chosen), plan, 1.0
    if mode == "none":
        probs = np.zeros(N_EXPERTS)
        probs[0] = 1.0
        return (router.Selection(probs=probs, chosen=0),
                router.ExpertPlan(ordinal=0, category=None), 1.0)
    # mixed / plain-text retrieval has no expert semantics, so no decision log
    return None, None, 1.0


def score_choices(x_text: str, choices, state: ModelState, ctx=None,
                  task_name: str = "", log_sink=None, example_id=None) -> int:
    """Index of the highest-scoring answer choice; ties to the lowest index."""
    choices = list(choices)
    if len(choices) < 2:
        raise ValueError("scoring needs at least 2 choices")
    for i, choice in enumerate(choices):
        if not choice:
            raise ValueError(f"choice {i} is empty")
    cfg = state.train_config
    mode = cfg.selector_mode
    x_ids = prepare_input_ids(x_text, cfg.max_input_len)

    selection, plan, scale = _route_for_eval(state, task_name, x_ids, ctx)
    if mode == "mixed":
        pieces = retrieve_union(x_text, ctx, cfg.top_m, cfg.max_pieces).pieces
    elif mode == "plain-text":
        pieces = retrieve_plaintext(x_text, ctx, cfg.top_m, cfg.max_pieces).pieces
    else:
        pieces = pieces_for_plan(plan, x_text, ctx, cfg)
    if selection is not None and log_sink is not None:
        record = router.format_decision_log(example_id, task_name, selection)
        log_sink.write(json.dumps(record) + "\n")

    augmented = augment_input(x_ids, pieces, cfg.max_input_len)
    h_enc, pad_mask = model.encode(augmented.ids, state.params, state.config)
    scores = np.empty(len(choices), dtype=np.float64)
    for i, choice in enumerate(choices):
        y_ids = encode_target(choice, cfg.max_output_len)
        log_prob = model.sequence_log_prob_from_enc(
            h_enc, pad_mask, y_ids, scale, state.params, state.config)
        scores[i] = log_prob / len(y_ids) if cfg.length_norm else log_prob
    return int(np.argmax(scores))


def evaluate_task(task: TaskSpec, state: ModelState, ctx=None,
                  log_sink=None) -> EvalResult:
    """Accuracy per template over examples that carry answer choices; examples
    without choices are skipped and counted."""
    per_template: dict[str, float] = {}
    excluded: list[str] = []
    n_scored = 0
    n_skipped = 0
    for template in task.templates:
        correct = 0
        n = 0
        for idx, example in enumerate(task.examples):
            if example.answer_choices is None:
                n_skipped += 1
                continue
            x_text, y_text = render_pair(task, template, example, idx)
            if y_text not in example.answer_choices:
                raise ValueError(
                    f"task '{task.name}' template '{template.template_id}' "
                    f"example {idx}: target not among answer choices"
                )
            gold = example.answer_choices.index(y_text)
            picked = score_choices(
                x_text, example.answer_choices, state, ctx, task_name=task.name,
                log_sink=log_sink,
                example_id=f"{task.name}/{template.template_id}/{idx}")
            correct += int(picked == gold)
            n += 1
        if n == 0:
            excluded.append(template.template_id)
            continue
        per_template[template.template_id] = correct / n
        n_scored += n
    if per_template:
        values = np.array(list(per_template.values()), dtype=np.float64)
        mean = float(values.mean())
        median = float(np.median(values))
        std = float(values.std(ddof=0))
    else:
        mean = median = std = float("nan")
    return EvalResult(task=task.name, per_template_accuracy=per_template,
                      mean=mean, median=median, std=std, n_scored=n_scored,
                      n_skipped=n_skipped, excluded_templates=tuple(excluded))


# -- routing reports --------------------------------------------------------------

def routing_report(records, task: str | None = None) -> RoutingReport:
    """Aggregate decision-log records (dicts or a JSONL path) into per-expert
    counts and fractions; errors when nothing matches."""
    if isinstance(records, (str, Path)):
        with Path(records).open("r", encoding="utf-8") as handle:
            records = [json.loads(line) for line in handle if line.strip()]
    counts = [0] * N_EXPERTS
    matched = 0
    for record in records:
        if task is not None and record.get("task") != task:
            continue
        counts[int(record["chosen"])] += 1
        matched += 1
    if matched == 0:
        scope = f" for task '{task}'" if task else ""
        raise ValueError(f"no routing decisions logged{scope}")
    fractions = tuple(c / matched for c in counts)
    return RoutingReport(task=task if task is not None else "all",
                         counts=tuple(counts), fractions=fractions)


# -- ablation sweep ----------------------------------------------------------------

def ablation_sweep(states_by_mode: dict[str, tuple[ModelState, object]],
                   tasks, out_path: str | Path | None = None):
    """Evaluate each trained state on each task.

    Returns (rows, results): rows are flat {mode, task, template_id, accuracy,
    n} records (also written to out_path as JSONL when given); results pair
    each mode with its EvalResult per task.
    """
    rows: list[dict] = []
    results: list[tuple[str, EvalResult]] = []
    for mode, (state, ctx) in states_by_mode.items():
        if state.train_config.selector_mode != mode:
            raise ValueError(
                f"state for mode {mode!r} was trained with "
                f"{state.train_config.selector_mode!r}")
        for task in tasks:
            result = evaluate_task(task, state, ctx)
            results.append((mode, result))
            for template_id, accuracy in result.per_template_accuracy.items():
                n = sum(1 for ex in task.examples if ex.answer_choices is not None)
                rows.append({"mode": mode, "task": task.name,
                             "template_id": template_id,
                             "accuracy": accuracy, "n": n})
    if out_path is not None:
        with Path(out_path).open("w", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(row) + "\n")
    return rows, results


# -- rendering ---------------------------------------------------------------------

def render_results_table(rows) -> str:
    """Fixed-width text table of flat result rows."""
    header = ("mode", "task", "template", "accuracy", "n")
    widths = [len(h) for h in header]
    printable = []
    for row in rows:
        cells = (str(row.get("mode", "-")), row["task"], row["template_id"],
                 f"{row['accuracy']:.4f}", str(row["n"]))
        printable.append(cells)
        widths = [max(w, len(c)) for w, c in zip(widths, cells)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for cells in printable:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


def render_results_csv(rows) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["mode", "task", "template_id", "accuracy", "n"])
    for row in rows:
        writer.writerow([row.get("mode", "-"), row["task"], row["template_id"],
                         row["accuracy"], row["n"]])
    return buffer.getvalue()


def render_routing_table(report: RoutingReport) -> str:
    lines = [f"routing for {report.task}:"]
    for ordinal, (count, fraction) in enumerate(zip(report.counts, report.fractions)):
        lines.append(f"  {ordinal}  {category_name(ordinal):<12} "
                     f"{count:>6}  {fraction:.4f}")
    return "\n".join(lines) + "\n"
