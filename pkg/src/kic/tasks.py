"""Task definitions: prompt templates, examples, task files, and the shuffled
multitask mixture used for training.

A task file holds one JSON header line {name, templates: [{id, input_pattern,
target_pattern}]} followed by one JSON example per line {fields: {...},
target, answer_choices?}. Patterns are str.format templates whose
placeholders resolve against the example's fields plus the reserved name
"target" bound to the example's target string.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    input_pattern: str
    target_pattern: str


@dataclass(frozen=True)
class Example:
    fields: dict
    target: str
    answer_choices: tuple[str, ...] | None = None


@dataclass(frozen=True)
class TaskSpec:
    name: str
    templates: tuple[PromptTemplate, ...]
    examples: tuple[Example, ...] = ()
    category_hint: str | None = None  # metadata only, never used for routing

    def __post_init__(self):
        if not self.name:
            raise ValueError("task name must be non-empty")
        if not self.templates:
            raise ValueError(f"task '{self.name}' has no templates")
        ids = [t.template_id for t in self.templates]
        if len(set(ids)) != len(ids):
            raise ValueError(f"task '{self.name}' has duplicate template ids")


def _render(pattern: str, namespace: dict, task: str, template_id: str,
            example_index: int, what: str) -> str:
    try:
        rendered = pattern.format(**namespace)
    except (KeyError, IndexError) as exc:
        raise ValueError(
            f"task '{task}' template '{template_id}' example {example_index}: "
            f"cannot render {what}, missing field {exc}"
        ) from None
    if not rendered:
        raise ValueError(
            f"task '{task}' template '{template_id}' example {example_index}: "
            f"{what} rendered empty"
        )
    return rendered


def render_pair(task: TaskSpec, template: PromptTemplate, example: Example,
                example_index: int = -1) -> tuple[str, str]:
    """(input_text, target_text) for one example under one template."""
    namespace = dict(example.fields)
    namespace.setdefault("target", example.target)
    x = _render(template.input_pattern, namespace, task.name,
                template.template_id, example_index, "input")
    y = _render(template.target_pattern, namespace, task.name,
                template.template_id, example_index, "target")
    return x, y


@dataclass(frozen=True)
class MixtureItem:
    task: TaskSpec
    template: PromptTemplate
    example: Example
    example_index: int


def build_mixture(tasks, seed: int) -> list[MixtureItem]:
    """One epoch: every (template, example) pair of every task exactly once,
    in a seeded permutation. Render failures surface here, before training."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("mixture needs at least one task")
    items: list[MixtureItem] = []
    for task in tasks:
        for template in task.templates:
            for idx, example in enumerate(task.examples):
                render_pair(task, template, example, idx)  # validate early
                items.append(MixtureItem(task, template, example, idx))
    order = np.random.default_rng(seed).permutation(len(items))
    return [items[i] for i in order]


# -- task file io ----------------------------------------------------------------

def load_task_file(path: str | Path) -> TaskSpec:
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        lines = [line for line in handle]
    stripped = [(i + 1, line.strip()) for i, line in enumerate(lines) if line.strip()]
    if not stripped:
        raise ValueError(f"{path}: empty task file")
    header_no, header_line = stripped[0]
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{header_no}: bad JSON header: {exc}") from None
    for key in ("name", "templates"):
        if key not in header:
            raise ValueError(f"{path}: header missing '{key}'")
    templates = []
    for spec in header["templates"]:
        for key in ("id", "input_pattern", "target_pattern"):
            if key not in spec:
                raise ValueError(f"{path}: template missing '{key}'")
        templates.append(PromptTemplate(template_id=str(spec["id"]),
                                        input_pattern=spec["input_pattern"],
                                        target_pattern=spec["target_pattern"]))
    examples = []
    for line_no, line in stripped[1:]:
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{line_no}: bad JSON example: {exc}") from None
        if "fields" not in record or "target" not in record:
            raise ValueError(f"{path}:{line_no}: example needs 'fields' and 'target'")
        choices = record.get("answer_choices")
        examples.append(Example(
            fields=dict(record["fields"]),
            target=str(record["target"]),
            answer_choices=tuple(str(c) for c in choices) if choices is not None else None,
        ))
    return TaskSpec(name=str(header["name"]), templates=tuple(templates),
                    examples=tuple(examples),
                    category_hint=header.get("category_hint"))


def save_task_file(task: TaskSpec, path: str | Path) -> None:
    path = Path(path)
    header = {
        "name": task.name,
        "templates": [
            {"id": t.template_id, "input_pattern": t.input_pattern,
             "target_pattern": t.target_pattern}
            for t in task.templates
        ],
    }
    if task.category_hint is not None:
        header["category_hint"] = task.category_hint
    with path.open("w", encoding="utf-8") as handle:
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for example in task.examples:
            record = {"fields": example.fields, "target": example.target}
            if example.answer_choices is not None:
                record["answer_choices"] = list(example.answer_choices)
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def load_task_dir(path: str | Path) -> list[TaskSpec]:
    """All *.task files in a directory, sorted by filename."""
    path = Path(path)
    files = sorted(path.glob("*.task"))
    if not files:
        raise ValueError(f"{path}: no .task files found")
    return [load_task_file(f) for f in files]
