"""Central finite-difference verification of the hand-written gradients.

Checks run against the exact batch compositions used for learning: the
selector-coupled total loss (cross-entropy at the chosen probability's logit
scale plus the balancing term) and the plain selector-free loss. Analytic
gradients come from the same `selector_batch` / `plain_batch` code paths the
optimizer consumes, so a pass here certifies the training gradients
themselves. Intended for 64-bit configs; 32-bit rounding drowns the h^2 term.

The total loss is piecewise smooth: it jumps where an argmax flips. The
harness therefore refuses to run when any example's top-2 selector
probabilities are closer than a safety margin, instead of silently producing
garbage differences.
"""

from __future__ import annotations

import numpy as np

from . import model, tokenizer
from .store import N_EXPERTS
from .training import PreparedExample, plain_batch, selector_batch

DEFAULT_STEP = 1e-5
GAP_SAFETY = 100.0  # required top-2 prob gap, in units of the FD step


def make_prepared(x_ids, y_ids, pieces_by_ordinal: dict, max_input_len: int,
                  task_name: str = "") -> PreparedExample:
    """PreparedExample whose retrieval is a fixed table lookup (deterministic,
    index-free), suitable for gradient checking."""
    table = {int(k): list(v) for k, v in pieces_by_ordinal.items()}

    def pieces_for(chosen: int):
        return table.get(chosen, [])

    return PreparedExample(x_ids=list(x_ids), y_ids=list(y_ids),
                           pieces_for=pieces_for, max_input_len=max_input_len,
                           task_name=task_name)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.linalg.norm(analytic.astype(np.float64).ravel() - numeric.ravel())
    b = max(np.linalg.norm(analytic.astype(np.float64).ravel()),
            np.linalg.norm(numeric.ravel()), 1e-12)
    return float(a / b)


def _fd_tensor(tensor: np.ndarray, loss_fn, h: float) -> np.ndarray:
    numeric = np.zeros(tensor.shape, dtype=np.float64)
    for idx in np.ndindex(tensor.shape):
        original = tensor[idx]
        tensor[idx] = original + h
        up = loss_fn()
        tensor[idx] = original - h
        down = loss_fn()
        tensor[idx] = original
        numeric[idx] = (up - down) / (2.0 * h)
    return numeric


def routing_gap(params, selector, config, prepared, exclude_generalist=False) -> float:
    """Smallest top-2 selector probability gap across the batch."""
    result = selector_batch(params, selector, config, prepared, alpha=0.0,
                            exclude_generalist=exclude_generalist,
                            want_grads=False)
    gaps = []
    for selection in result.selections:
        top2 = np.sort(selection.probs)[-2:]
        gaps.append(float(top2[1] - top2[0]))
    return min(gaps)


def check_selector_composition(params, selector, config: model.T2TConfig,
                               prepared, alpha: float,
                               exclude_generalist: bool = False,
                               h: float = DEFAULT_STEP) -> list[dict]:
    """FD-vs-analytic comparison of the full routed total loss, one row per
    parameter block: {name, rel_err, n}."""
    if config.dtype != "f64":
        raise ValueError("gradient checking requires a 64-bit config")
    gap = routing_gap(params, selector, config, prepared, exclude_generalist)
    if gap < GAP_SAFETY * h:
        raise ValueError(
            f"routing too close to an argmax tie for finite differences "
            f"(top-2 gap {gap:.2e} < {GAP_SAFETY * h:.2e}); perturb the fixture"
        )
    analytic_result = selector_batch(params, selector, config, prepared, alpha,
                                     exclude_generalist=exclude_generalist,
                                     want_grads=True)
    analytic = dict(analytic_result.grads)
    analytic["sel_w"] = analytic_result.sel_grads["sel_w"]
    analytic["sel_b"] = analytic_result.sel_grads["sel_b"]

    def loss_fn():
        return selector_batch(params, selector, config, prepared, alpha,
                              exclude_generalist=exclude_generalist,
                              want_grads=False).total

    rows = []
    blocks = [(name, params[name]) for name in params]
    blocks += [("sel_w", selector["sel_w"]), ("sel_b", selector["sel_b"])]
    for name, tensor in blocks:
        numeric = _fd_tensor(tensor, loss_fn, h)
        rows.append({"name": name, "rel_err": _relative_error(analytic[name], numeric),
                     "n": int(tensor.size)})
    return rows


def check_backbone(params, config: model.T2TConfig, examples,
                   h: float = DEFAULT_STEP) -> list[dict]:
    """FD-vs-analytic comparison of the selector-free loss over (x, y) pairs."""
    if config.dtype != "f64":
        raise ValueError("gradient checking requires a 64-bit config")
    _, analytic = plain_batch(params, config, examples, want_grads=True)

    def loss_fn():
        ce, _ = plain_batch(params, config, examples, want_grads=False)
        return ce

    rows = []
    for name, tensor in params.items():
        numeric = _fd_tensor(tensor, loss_fn, h)
        rows.append({"name": name, "rel_err": _relative_error(analytic[name], numeric),
                     "n": int(tensor.size)})
    return rows


def worst_row(rows: list[dict]) -> dict:
    return max(rows, key=lambda row: row["rel_err"])


# -- the standard tiny suite -------------------------------------------------------

def tiny_fixture(seed: int = 0, n_examples: int = 3):
    """64-bit toy model plus a routed batch whose argmax margins are FD-safe.

    All token ids stay below the 11-word vocabulary, so knowledge piece texts
    are strings of low control bytes (byte b encodes to id 5+b). The selector
    is drawn at a scale that produces clear winners; draws that land too close
    to a routing tie are rejected and redrawn, because the loss is only
    piecewise smooth.
    """
    config = model.T2TConfig(vocab_size=11, d_model=8, n_heads=2,
                             n_enc_layers=1, n_dec_layers=1, d_ff=16,
                             max_positions=16, seed=seed, dtype="f64")
    params = model.init_params(config)
    rng = np.random.default_rng([seed, 0x71])
    n_bytes = config.vocab_size - tokenizer.BYTE_OFFSET
    prepared = []
    for _ in range(n_examples):
        x_ids = rng.integers(tokenizer.BYTE_OFFSET, config.vocab_size,
                             size=int(rng.integers(3, 7))).tolist()
        y_ids = rng.integers(tokenizer.BYTE_OFFSET, config.vocab_size,
                             size=int(rng.integers(2, 5))).tolist()
        y_ids.append(tokenizer.EOS_ID)
        pieces = {}
        for ordinal in range(1, N_EXPERTS):
            if rng.random() < 0.7:
                raw = rng.integers(0, n_bytes, size=int(rng.integers(1, 4)))
                pieces[ordinal] = [("".join(chr(int(b)) for b in raw), 1.0)]
        prepared.append(make_prepared(x_ids, y_ids, pieces, max_input_len=14))
    for attempt in range(32):
        draw = np.random.default_rng([seed, attempt, 0x5E1])
        selector = {
            "sel_w": draw.normal(0.0, 0.6, size=(N_EXPERTS, config.d_model)),
            "sel_b": draw.normal(0.0, 0.1, size=N_EXPERTS),
        }
        if routing_gap(params, selector, config, prepared) >= 2 * GAP_SAFETY * DEFAULT_STEP:
            break
    else:
        raise RuntimeError("no FD-safe selector draw in 32 attempts; widen the scale")
    return config, params, selector, prepared


def run_full_check(seed: int = 0, alpha: float = 0.05) -> list[dict]:
    """Both FD suites on the tiny fixture; rows carry a 'suite' label."""
    config, params, selector, prepared = tiny_fixture(seed)
    rows = [dict(row, suite="selector") for row in
            check_selector_composition(params, selector, config, prepared, alpha)]
    pairs = [(ex.x_ids, ex.y_ids) for ex in prepared]
    rows += [dict(row, suite="backbone") for row in
             check_backbone(params, config, pairs)]
    return rows
