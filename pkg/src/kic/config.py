"""Run configuration: one JSON file, dotted overrides, environment fallbacks.

A config file is a JSON object with up to five sections: "paths" (where the
store, indexes, task files, and checkpoints live), "embedder", "backbone",
"train", and "router". Every key has a default, so the empty object {} is a
valid config and any subset of keys may be given. Overrides of the form
"section.key=value" (the CLI's --set flag) are applied after the file, so
flags win. Relative paths resolve against KIC_DATA_DIR when that is set,
else against the current directory.

The "router" section holds flags that belong to routing policy rather than
optimization; they are merged into the TrainConfig that training and
evaluation actually consume, so downstream code sees a single object.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

from .embedding import EmbedderSpec
from .model import T2TConfig
from .training import TrainConfig

SECTIONS = ("paths", "embedder", "backbone", "train", "router")

DEFAULT_PATHS = {
    "store_dir": "store",
    "index_dir": "indexes",
    "task_dir": "tasks",
    "checkpoint_dir": "checkpoints",
}

DEFAULT_ROUTER = {
    "scale_at_eval": True,
}


@dataclass(frozen=True)
class CliConfig:
    store_dir: Path
    index_dir: Path
    task_dir: Path
    checkpoint_dir: Path
    embedder: EmbedderSpec
    backbone: T2TConfig
    train: TrainConfig

    def index_path(self, category: str) -> Path:
        return self.index_dir / f"{category}.kidx"


class ConfigError(ValueError):
    """Raised for unparseable files, unknown keys, or bad values."""


def parse_override(text: str) -> tuple[str, str, object]:
    """Split "section.key=value" and JSON-decode the value when possible.

    Plain words stay strings, so --set train.selector_mode=none works without
    quoting; numbers and booleans decode to their typed forms.
    """
    head, sep, raw = text.partition("=")
    if not sep or "." not in head:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    section, _, key = head.partition(".")
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}; expected one of {SECTIONS}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def _merge_section(target: dict, updates: dict, section: str) -> None:
    for key, value in updates.items():
        if key not in target:
            raise ConfigError(f"unknown key {section}.{key!r}")
        target[key] = value


def load_config(path: str | Path | None = None,
                overrides: tuple[str, ...] = (),
                env: dict[str, str] | None = None) -> CliConfig:
    """File (optional) -> --set overrides -> dataclasses, with validation.

    KIC_DATA_DIR anchors relative paths; KIC_SEED seeds both the train config
    and the backbone init unless an explicit seed is set later by the caller
    (the CLI's --seed flag, which wins over the environment).
    """
    env = os.environ if env is None else env

    sections: dict[str, dict] = {
        "paths": dict(DEFAULT_PATHS),
        "embedder": {k: getattr(EmbedderSpec(), k) for k in EmbedderSpec.__dataclass_fields__},
        "backbone": T2TConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "router": dict(DEFAULT_ROUTER),
    }

    if path is not None:
        try:
            raw = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for section, updates in data.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r} in {path}")
            if not isinstance(updates, dict):
                raise ConfigError(f"section {section!r} must be a JSON object")
            _merge_section(sections[section], updates, section)

    for text in overrides:
        section, key, value = parse_override(text)
        if key not in sections[section]:
            raise ConfigError(f"unknown key {section}.{key!r}")
        sections[section][key] = value

    if "KIC_SEED" in env:
        try:
            seed = int(env["KIC_SEED"])
        except ValueError as exc:
            raise ConfigError(f"KIC_SEED must be an integer, got {env['KIC_SEED']!r}") from exc
        sections["train"]["seed"] = seed
        sections["backbone"]["seed"] = seed

    base = Path(env.get("KIC_DATA_DIR", "."))

    try:
        embedder = EmbedderSpec(**sections["embedder"])
        backbone = T2TConfig(**sections["backbone"])
        train = TrainConfig(**sections["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    train = replace(train, scale_at_eval=bool(sections["router"]["scale_at_eval"]))

    paths = {name: base / Path(value) for name, value in sections["paths"].items()}
    return CliConfig(
        store_dir=paths["store_dir"],
        index_dir=paths["index_dir"],
        task_dir=paths["task_dir"],
        checkpoint_dir=paths["checkpoint_dir"],
        embedder=embedder,
        backbone=backbone,
        train=train,
    )


def with_seed(config: CliConfig, seed: int) -> CliConfig:
    """Explicit seed (the --seed flag) pinned on both RNG consumers."""
    return replace(
        config,
        backbone=replace(config.backbone, seed=seed),
        train=replace(config.train, seed=seed),
    )
