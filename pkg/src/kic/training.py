"""Multitask training: route, retrieve, augment, forward, two losses, Adam.

The training step handles one batch of mixture items. Instance-adaptive mode
runs the selector on the raw input's encoder states, retrieves from the chosen
category (ordinal 0 skips retrieval), scales the backbone logits by the chosen
probability, and adds the batch balancing loss. Ablation modes reuse the same
step with routing replaced: a fixed per-task expert after a warmup (task), no
retrieval at all (none), retrieval from the union of all categories (mixed),
argmax restricted to real categories (no-generalist), or retrieval from a
plain-text passage partition (plain-text).

The selector-coupled loss lives in `selector_batch`, shared verbatim between
train_step and the finite-difference gradient checker, so the gradients under
test are the gradients used for learning.

Determinism contract: given the same state, batch, and config, a step is
bit-reproducible; nothing here consumes global RNG. Gradients accumulate in
example-index order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model, router, tokenizer
from .retrieval import (
    KnowledgeContext,
    RetrievalRequest,
    augment_input,
    retrieve,
    retrieve_plaintext,
    retrieve_union,
)
from .store import N_EXPERTS
from .tasks import MixtureItem, build_mixture, render_pair

SELECTOR_MODES = ("instance", "task", "none", "mixed", "no-generalist", "plain-text")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    alpha: float = 0.05
    batch_size: int = 16
    epochs: int = 5
    max_input_len: int = 512
    max_output_len: int = 64
    max_pieces: int = 10
    top_m: int = 50
    seed: int = 0
    selector_mode: str = "instance"
    warmup_steps: int = 200
    scale_at_eval: bool = True
    length_norm: bool = False
    max_steps: int | None = None  # optional hard cap across epochs

    def __post_init__(self):
        if self.selector_mode not in SELECTOR_MODES:
            raise ValueError(
                f"selector_mode must be one of {SELECTOR_MODES}, got {self.selector_mode!r}"
            )
        for name in ("lr", "batch_size", "epochs", "max_input_len",
                     "max_output_len", "top_m", "warmup_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.max_pieces < 0:
            raise ValueError("max_pieces must be >= 0")
        if self.top_m < self.max_pieces:
            raise ValueError("top_m must be >= max_pieces")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ValueError("max_steps must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class ModelState:
    config: model.T2TConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    selector: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int = 0
    task_expert: dict[str, int] | None = None  # None until task mode freezes
    warmup_counts: dict[str, list[int]] = field(default_factory=dict)


def init_state(config: model.T2TConfig, train_config: TrainConfig) -> ModelState:
    if config.max_positions < train_config.max_input_len:
        raise ValueError("max_positions must cover max_input_len")
    if config.max_positions < train_config.max_output_len:
        raise ValueError("max_positions must cover max_output_len")
    params = model.init_params(config)
    selector = router.init_selector(config.d_model, dtype=config.np_dtype,
                                    seed=config.seed)
    trainables = {**params, **selector}
    opt_m = {k: np.zeros_like(v) for k, v in trainables.items()}
    opt_v = {k: np.zeros_like(v) for k, v in trainables.items()}
    return ModelState(config=config, train_config=train_config, params=params,
                      selector=selector, opt_m=opt_m, opt_v=opt_v)


def state_digest(state: ModelState) -> str:
    """sha256 over every tensor; used to prove evaluation mutates nothing."""
    import hashlib

    digest = hashlib.sha256()
    for name in sorted(list(state.params) + list(state.selector)):
        tensor = state.params.get(name)
        if tensor is None:
            tensor = state.selector[name]
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(tensor).tobytes())
    return digest.hexdigest()


# -- per-example preparation -----------------------------------------------------

def encode_target(y_text: str, max_output_len: int) -> list[int]:
    """Byte ids truncated to leave room for the trailing EOS."""
    ids = tokenizer.encode(y_text)[: max_output_len - 1]
    return ids + [tokenizer.EOS_ID]


def prepare_input_ids(x_text: str, max_input_len: int) -> list[int]:
    return tokenizer.encode(x_text)[:max_input_len]


def pieces_for_plan(plan: router.ExpertPlan, x_text: str, ctx: KnowledgeContext | None,
                    cfg: TrainConfig):
    """Knowledge pieces for one routed example; generalist retrieves nothing."""
    if not plan.retrieves:
        return []
    if ctx is None:
        raise ValueError("retrieval requested but no knowledge context given")
    request = RetrievalRequest(query_text=x_text, category=plan.category,
                               top_m=cfg.top_m, max_pieces=cfg.max_pieces)
    return retrieve(request, ctx).pieces


@dataclass
class PreparedExample:
    """One example ready for the selector-coupled loss.

    pieces_for maps a chosen expert ordinal to its knowledge pieces and must
    be deterministic: the gradient checker re-evaluates the whole composition.
    """

    x_ids: list[int]
    y_ids: list[int]
    pieces_for: object  # callable ordinal -> list[(value_text, score)]
    max_input_len: int
    task_name: str = ""


@dataclass
class SelectorBatchResult:
    total: float
    ce_mean: float
    balance: float
    selections: list
    dispatch: list[int]
    grads: dict | None = None
    sel_grads: dict | None = None


def selector_batch(params, selector, config: model.T2TConfig,
                   prepared: list[PreparedExample], alpha: float,
                   exclude_generalist: bool = False,
                   want_grads: bool = True) -> SelectorBatchResult:
    """Loss (and gradients) of the routed batch: two encoder passes per
    example (raw for the selector, augmented for the backbone), logit scale =
    chosen probability, plus the batch balancing term."""
    if not prepared:
        raise ValueError("empty batch")
    batch_size = len(prepared)
    selections = []
    raw_caches = []
    loss_caches = []
    dispatch = [0] * N_EXPERTS
    ce_sum = 0.0
    for ex in prepared:
        enc_cache = model.encode_with_cache(ex.x_ids, params, config)
        selection = router.select(enc_cache["H"], enc_cache["pad_mask"], selector,
                                  exclude_generalist=exclude_generalist)
        pieces = ex.pieces_for(selection.chosen)
        augmented = augment_input(ex.x_ids, pieces, ex.max_input_len)
        ce, cache = model.forward_loss(augmented.ids, ex.y_ids,
                                       selection.chosen_prob, params, config)
        ce_sum += ce
        selections.append(selection)
        raw_caches.append(enc_cache)
        loss_caches.append(cache)
        dispatch[selection.chosen] += 1
    ce_mean = ce_sum / batch_size
    balance, stats = router.balancing_loss(selections)
    total = router.total_loss(ce_mean, balance, alpha)
    result = SelectorBatchResult(total=total, ce_mean=ce_mean, balance=balance,
                                 selections=selections, dispatch=dispatch)
    if not want_grads:
        return result
    grads = model.zeros_like_params(params)
    sel_grads = {k: np.zeros_like(v) for k, v in selector.items()}
    for i, cache in enumerate(loss_caches):
        example_grads, dscale = model.backward(cache, upstream=1.0 / batch_size)
        for name in grads:
            grads[name] += example_grads[name]
        selection = selections[i]
        dprobs = np.zeros(N_EXPERTS, dtype=np.float64)
        dprobs[selection.chosen] += dscale
        dprobs += alpha * N_EXPERTS * stats.fractions / batch_size
        dw, db, d_pooled = router.selector_backward(selection, dprobs, selector)
        sel_grads["sel_w"] += dw
        sel_grads["sel_b"] += db
        d_h = router.pooled_backward(d_pooled, selection.pad_mask)
        model.encode_backward(d_h, raw_caches[i], grads)
    result.grads = grads
    result.sel_grads = sel_grads
    return result


def plain_batch(params, config: model.T2TConfig, examples, want_grads: bool = True):
    """Selector-free loss: (x_ids, y_ids) pairs at scale 1; returns
    (ce_mean, grads | None)."""
    if not examples:
        raise ValueError("empty batch")
    batch_size = len(examples)
    ce_sum = 0.0
    caches = []
    for x_ids, y_ids in examples:
        ce, cache = model.forward_loss(x_ids, y_ids, 1.0, params, config)
        ce_sum += ce
        caches.append(cache)
    ce_mean = ce_sum / batch_size
    if not want_grads:
        return ce_mean, None
    grads = model.zeros_like_params(params)
    for cache in caches:
        example_grads, _dscale = model.backward(cache, upstream=1.0 / batch_size)
        for name in grads:
            grads[name] += example_grads[name]
    return ce_mean, grads


# -- Adam -------------------------------------------------------------------------

def adam_update(tensors, grads, opt_m, opt_v, step: int, lr: float) -> None:
    """In-place Adam with bias correction; `step` is 1-based."""
    bc1 = 1.0 - ADAM_BETA1 ** step
    bc2 = 1.0 - ADAM_BETA2 ** step
    for name, tensor in tensors.items():
        grad = grads[name].astype(tensor.dtype, copy=False)
        m = opt_m[name]
        v = opt_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m / bc1
        v_hat = v / bc2
        tensor -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# -- the training step -----------------------------------------------------------

def maybe_freeze_task_experts(state: ModelState) -> None:
    cfg = state.train_config
    if (cfg.selector_mode == "task" and state.task_expert is None
            and state.step >= cfg.warmup_steps):
        state.task_expert = {
            name: assign_task_expert(name, state.warmup_counts)
            for name in sorted(state.warmup_counts)
        }


def assign_task_expert(task_name: str, warmup_counts: dict[str, list[int]]) -> int:
    """Modal expert chosen for the task during warmup; ties and unseen tasks
    fall to the lowest ordinal (the generalist for unseen)."""
    counts = warmup_counts.get(task_name)
    if counts is None or sum(counts) == 0:
        return 0
    return int(np.argmax(counts))


def _prepare_selector_item(state: ModelState, item: MixtureItem,
                           ctx: KnowledgeContext | None) -> PreparedExample:
    cfg = state.train_config
    x_text, y_text = render_pair(item.task, item.template, item.example,
                                 item.example_index)
    x_ids = prepare_input_ids(x_text, cfg.max_input_len)
    y_ids = encode_target(y_text, cfg.max_output_len)
    available = set(ctx.indexes) if ctx is not None else None

    def pieces_for(chosen: int):
        plan = router.route_expert(chosen, available)
        return pieces_for_plan(plan, x_text, ctx, cfg)

    return PreparedExample(x_ids=x_ids, y_ids=y_ids, pieces_for=pieces_for,
                           max_input_len=cfg.max_input_len,
                           task_name=item.task.name)


def train_step(state: ModelState, batch: list[MixtureItem],
               ctx: KnowledgeContext | None = None, log_sink=None) -> dict:
    """One optimizer update over the batch; returns the step's metrics."""
    if not batch:
        raise ValueError("empty batch")
    cfg = state.train_config
    mode = cfg.selector_mode
    if mode in ("mixed", "plain-text") and ctx is None:
        raise ValueError(f"selector_mode {mode!r} needs a knowledge context")
    maybe_freeze_task_experts(state)
    batch_size = len(batch)
    selector_live = mode in ("instance", "no-generalist") or (
        mode == "task" and state.task_expert is None)

    if selector_live:
        prepared = [_prepare_selector_item(state, item, ctx) for item in batch]
        result = selector_batch(state.params, state.selector, state.config,
                                prepared, cfg.alpha,
                                exclude_generalist=(mode == "no-generalist"))
        if mode == "task":
            for ex, selection in zip(prepared, result.selections):
                counts = state.warmup_counts.setdefault(ex.task_name, [0] * N_EXPERTS)
                counts[selection.chosen] += 1
        if log_sink is not None:
            for i, (ex, selection) in enumerate(zip(prepared, result.selections)):
                record = router.format_decision_log(
                    f"{state.step}:{i}", ex.task_name, selection)
                log_sink.write(json.dumps(record) + "\n")
        ce_mean, balance, total = result.ce_mean, result.balance, result.total
        dispatch = result.dispatch
        grads, sel_grads = result.grads, result.sel_grads
    else:
        examples = []
        dispatch = [0] * N_EXPERTS
        available = set(ctx.indexes) if ctx is not None else None
        for item in batch:
            x_text, y_text = render_pair(item.task, item.template, item.example,
                                         item.example_index)
            x_ids = prepare_input_ids(x_text, cfg.max_input_len)
            y_ids = encode_target(y_text, cfg.max_output_len)
            if mode == "mixed":
                pieces = retrieve_union(x_text, ctx, cfg.top_m, cfg.max_pieces).pieces
            elif mode == "plain-text":
                pieces = retrieve_plaintext(x_text, ctx, cfg.top_m,
                                            cfg.max_pieces).pieces
            elif mode == "task":
                chosen = (state.task_expert or {}).get(item.task.name, 0)
                plan = router.route_expert(chosen, available)
                pieces = pieces_for_plan(plan, x_text, ctx, cfg)
                dispatch[chosen] += 1
            else:  # none
                pieces = []
            augmented = augment_input(x_ids, pieces, cfg.max_input_len)
            examples.append((augmented.ids, y_ids))
        ce_mean, grads = plain_batch(state.params, state.config, examples)
        balance = 0.0
        total = ce_mean
        sel_grads = None

    state.step += 1
    adam_update(state.params, grads, state.opt_m, state.opt_v, state.step, cfg.lr)
    if sel_grads is not None:
        adam_update(state.selector, sel_grads, state.opt_m, state.opt_v,
                    state.step, cfg.lr)

    return {
        "step": state.step,
        "ce": float(ce_mean),
        "balance": float(balance),
        "total": float(total),
        "dispatch": dispatch,
    }


# -- training loop ----------------------------------------------------------------

CALIBRATION_PROBE = 64
CALIBRATION_ATTEMPTS = 32
GENERALIST_PROBE_CAP = 0.25


def _probe_dispatch(pooled: np.ndarray, sel_w: np.ndarray,
                    task_names: list[str]) -> tuple[np.ndarray, dict[str, int], float]:
    """Centered-logit routing of the probe: (sel_b, per-task modal, generalist share)."""
    logits = pooled @ sel_w.T
    sel_b = -logits.mean(axis=0)
    sel_b[0] += router.GENERALIST_INIT_BIAS
    chosen = np.argmax(logits + sel_b, axis=1)
    modals: dict[str, int] = {}
    for name in sorted(set(task_names)):
        counts = np.bincount([c for c, t in zip(chosen, task_names) if t == name],
                             minlength=N_EXPERTS)
        modals[name] = int(np.argmax(counts))
    return sel_b, modals, float(np.mean(chosen == 0))


def calibrate_selector_bias(state: ModelState, mixture: list[MixtureItem],
                            n_probe: int = CALIBRATION_PROBE) -> None:
    """Data-dependent start for the selector head: center it, and reject
    weight draws whose routing still herds.

    Pooled encoder states of fresh inputs share a large common component, and
    a random head projects that component into arbitrary per-expert offsets:
    whichever expert draws the largest offset captures the whole stream on
    step one, and because the routing gradient only flows through the chosen
    expert, the selector never hears about the others. Subtracting each
    expert's mean logit over a small probe of rendered inputs leaves the
    input-dependent part of the score in charge from the first step.

    Centering fixes the offsets but not the weights: a draw whose rows are
    dominated by one direction of input variation still sends every probe
    input, or every task, to the same expert. Such draws are rejected and
    redrawn, up to a fixed attempt budget, until each task's modal probe
    choice is a distinct non-generalist expert and the generalist holds at
    most a small share. The attempt order is fixed by the run seed, so the
    whole procedure is deterministic, and attempt zero is the head the state
    already carries. If no draw passes, the best-spread attempt wins.
    """
    if not mixture:
        raise ValueError("cannot calibrate on an empty mixture")
    cfg = state.train_config
    probe = mixture[:n_probe]
    pooled_rows = []
    task_names = []
    for item in probe:
        x_text, _ = render_pair(item.task, item.template, item.example,
                                item.example_index)
        ids = prepare_input_ids(x_text, cfg.max_input_len)
        h_enc, pad_mask = model.encode(np.asarray(ids), state.params, state.config)
        pooled_rows.append(router.masked_mean(h_enc, pad_mask))
        task_names.append(item.task.name)
    pooled = np.stack(pooled_rows).astype(np.float64)
    n_tasks = len(set(task_names))

    draw_rng = np.random.default_rng([cfg.seed, 0xD1CE])
    best: tuple[tuple[int, float], np.ndarray, np.ndarray] | None = None
    for attempt in range(CALIBRATION_ATTEMPTS):
        if attempt == 0:
            sel_w = state.selector["sel_w"].astype(np.float64)
        else:
            sel_w = draw_rng.normal(0.0, router.SELECTOR_INIT_STD,
                                    size=state.selector["sel_w"].shape)
        sel_b, modals, generalist_share = _probe_dispatch(pooled, sel_w, task_names)
        spread = len(set(modals.values()) - {0})
        rank = (spread, -generalist_share)
        if best is None or rank > best[0]:
            best = (rank, sel_w, sel_b)
        if (spread == n_tasks and 0 not in modals.values()
                and generalist_share <= GENERALIST_PROBE_CAP):
            best = (rank, sel_w, sel_b)
            break
    _, sel_w, sel_b = best
    state.selector["sel_w"][...] = sel_w.astype(state.selector["sel_w"].dtype)
    state.selector["sel_b"][...] = sel_b.astype(state.selector["sel_b"].dtype)


def _epoch_seed(base_seed: int, epoch: int) -> int:
    return (base_seed * 1_000_003 + epoch) % (2 ** 31)


def run_training(state: ModelState, tasks, ctx: KnowledgeContext | None,
                 out_dir: str | Path) -> list[dict]:
    """Full run: epochs of seeded mixtures, metrics and routing logs as JSONL,
    final checkpoint. Resuming a loaded checkpoint replays the same stream and
    fast-forwards past the steps already taken. A non-finite loss aborts after
    saving an emergency checkpoint plus the offending batch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = state.train_config
    metrics_path = out_dir / "metrics.jsonl"
    routing_path = out_dir / "routing_train.jsonl"
    all_metrics: list[dict] = []
    batch_index = 0
    done = False
    # a resumed run keeps its trained head; only a virgin selector is centered
    needs_calibration = (state.step == 0 and
                         cfg.selector_mode in ("instance", "no-generalist", "task"))
    with metrics_path.open("w", encoding="utf-8") as metrics_file, \
            routing_path.open("w", encoding="utf-8") as routing_file:
        for epoch in range(cfg.epochs):
            if done:
                break
            mixture = build_mixture(tasks, _epoch_seed(cfg.seed, epoch))
            if needs_calibration:
                calibrate_selector_bias(state, mixture)
                needs_calibration = False
            for start in range(0, len(mixture), cfg.batch_size):
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    done = True
                    break
                if batch_index < state.step:  # already taken before a resume
                    batch_index += 1
                    continue
                batch = mixture[start: start + cfg.batch_size]
                try:
                    metrics = train_step(state, batch, ctx, log_sink=routing_file)
                except FloatingPointError as exc:
                    emergency = out_dir / "emergency.kicw"
                    save_checkpoint(state, emergency)
                    batch_dump = out_dir / "emergency_batch.jsonl"
                    with batch_dump.open("w", encoding="utf-8") as handle:
                        for item in batch:
                            handle.write(json.dumps({
                                "task": item.task.name,
                                "template": item.template.template_id,
                                "example_index": item.example_index,
                            }) + "\n")
                    raise RuntimeError(
                        f"aborted on non-finite loss at step {state.step}; "
                        f"state saved to {emergency}, batch to {batch_dump}"
                    ) from exc
                batch_index += 1
                metrics["epoch"] = epoch
                all_metrics.append(metrics)
                metrics_file.write(json.dumps(metrics) + "\n")
    save_checkpoint(state, out_dir / "checkpoint.kicw")
    return all_metrics


# -- checkpointing ----------------------------------------------------------------

def save_checkpoint(state: ModelState, path: str | Path) -> None:
    tensors: dict[str, np.ndarray] = {}
    tensors.update(state.params)
    tensors.update(state.selector)
    for name in {**state.params, **state.selector}:
        tensors["adam_m." + name] = state.opt_m[name]
        tensors["adam_v." + name] = state.opt_v[name]
    meta = {
        "step": state.step,
        "train_config": state.train_config.to_dict(),
        "task_expert": state.task_expert,
        "warmup_counts": state.warmup_counts,
    }
    model.save_tensors(path, state.config, tensors, meta)


def load_checkpoint(path: str | Path,
                    expect_config: model.T2TConfig | None = None) -> ModelState:
    config, tensors, meta = model.load_tensors(path, expect_config)
    train_config = TrainConfig.from_dict(meta["train_config"])
    params = {name: tensors[name] for name in model.param_names(config)}
    selector = {"sel_w": tensors["sel_w"], "sel_b": tensors["sel_b"]}
    opt_m = {}
    opt_v = {}
    for name in list(params) + ["sel_w", "sel_b"]:
        opt_m[name] = tensors["adam_m." + name]
        opt_v[name] = tensors["adam_v." + name]
    task_expert = meta.get("task_expert")
    if task_expert is not None:
        task_expert = {str(k): int(v) for k, v in task_expert.items()}
    warmup_counts = {str(k): [int(c) for c in v]
                     for k, v in (meta.get("warmup_counts") or {}).items()}
    return ModelState(config=config, train_config=train_config, params=params,
                      selector=selector, opt_m=opt_m, opt_v=opt_v,
                      step=int(meta["step"]), task_expert=task_expert,
                      warmup_counts=warmup_counts)
