"""Sequence-level expert selection over knowledge categories.

One linear head turns the mean-pooled encoder state of the raw input into a
distribution over K + 1 experts: ordinal 0 answers from parameters alone, and
ordinals 1..K retrieve from the matching knowledge partition. Selection is a
hard argmax; the chosen expert's probability multiplies the backbone logits,
so the selector receives gradient through that scaling, and a switch-style
balancing term keeps early routing from collapsing onto one expert.

The selector starts at zeros on purpose: every expert then gets probability
1/(K+1), argmax ties resolve to the generalist, and the balancing gradient is
what first differentiates the experts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import N_EXPERTS, category_name


GENERALIST_INIT_BIAS = -0.01
SELECTOR_INIT_STD = 0.02


def init_selector(d_model: int, dtype=np.float32,
                  seed: int = 0) -> dict[str, np.ndarray]:
    """Random small head: sel_w row i scores expert i, sel_b is its bias.

    sel_w starts from small random values, not zeros. A zero start routes
    every input to the same ordinal, and because the routing gradient only
    flows through the chosen expert, the selector then learns nothing about
    the other six; small random weights spread the initial argmax across
    experts, so each expert sees real traffic from the first step. The
    generalist additionally gets a small negative bias: an untrained router
    should reach for knowledge before it learns to abstain, and skipping
    retrieval never produces the confidently-wrong predictions that would
    push the router off a bad expert later.
    """
    rng = np.random.default_rng([seed, 0x5E1EC7])
    sel_b = np.zeros(N_EXPERTS, dtype=dtype)
    sel_b[0] = GENERALIST_INIT_BIAS
    return {
        "sel_w": rng.normal(0.0, SELECTOR_INIT_STD,
                            size=(N_EXPERTS, d_model)).astype(dtype),
        "sel_b": sel_b,
    }


def masked_mean(h_enc: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
    keep = ~pad_mask
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("cannot pool a sequence whose positions are all PAD")
    return h_enc[keep].sum(axis=0) / n_keep


@dataclass
class Selection:
    """One routing decision plus what its backward pass needs."""

    probs: np.ndarray
    chosen: int
    logits: np.ndarray | None = None
    pooled: np.ndarray | None = None
    pad_mask: np.ndarray | None = None

    @property
    def chosen_prob(self) -> float:
        return float(self.probs[self.chosen])


def select(h_enc: np.ndarray, pad_mask: np.ndarray, sel: dict[str, np.ndarray],
           exclude_generalist: bool = False) -> Selection:
    """Pool, project, softmax, argmax. Ties go to the lowest ordinal.

    With exclude_generalist the argmax runs over ordinals 1..K only while the
    probabilities stay normalized over all K + 1 entries.
    """
    pooled = masked_mean(h_enc, pad_mask)
    logits = sel["sel_w"] @ pooled + sel["sel_b"]
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    if exclude_generalist:
        chosen = 1 + int(np.argmax(probs[1:]))
    else:
        chosen = int(np.argmax(probs))
    return Selection(probs=probs, chosen=chosen, logits=logits,
                     pooled=pooled, pad_mask=pad_mask)


@dataclass(frozen=True)
class ExpertPlan:
    ordinal: int
    category: str | None  # None for the generalist

    @property
    def retrieves(self) -> bool:
        return self.category is not None


def route_expert(chosen: int, available_categories=None) -> ExpertPlan:
    """Maps an expert ordinal to its retrieval plan.

    When `available_categories` is given, a nonzero ordinal whose category has
    no index raises KeyError naming the category.
    """
    if not 0 <= chosen < N_EXPERTS:
        raise ValueError(f"expert ordinal must be in 0..{N_EXPERTS - 1}, got {chosen}")
    if chosen == 0:
        return ExpertPlan(ordinal=chosen, category=None)
    name = category_name(chosen)
    if available_categories is not None and name not in available_categories:
        raise KeyError(f"no index available for category '{name}'")
    return ExpertPlan(ordinal=chosen, category=name)


@dataclass(frozen=True)
class BalanceStats:
    fractions: np.ndarray   # dispatch fraction per expert (no gradient role)
    mean_probs: np.ndarray  # mean selector probability per expert (carries gradient)
    batch_size: int


def balancing_loss(decisions, n_experts: int = N_EXPERTS):
    """Switch-style load balance: n_experts * sum_i fraction_i * mean_prob_i.

    `decisions` is a sequence of objects with .chosen and .probs. The value is
    1.0 for a perfectly uniform batch and n_experts at total collapse; the
    caller applies its own coefficient.
    """
    batch = len(decisions)
    if batch == 0:
        raise ValueError("balancing loss needs a non-empty batch")
    fractions = np.zeros(n_experts, dtype=np.float64)
    mean_probs = np.zeros(n_experts, dtype=np.float64)
    for decision in decisions:
        if not 0 <= decision.chosen < n_experts:
            raise ValueError(
                f"expert ordinal must be in 0..{n_experts - 1}, got {decision.chosen}"
            )
        probs = np.asarray(decision.probs, dtype=np.float64)
        if probs.shape != (n_experts,):
            raise ValueError(f"probs must have shape ({n_experts},), got {probs.shape}")
        fractions[decision.chosen] += 1.0
        mean_probs += probs
    fractions /= batch
    mean_probs /= batch
    value = float(n_experts * (fractions * mean_probs).sum())
    return value, BalanceStats(fractions=fractions, mean_probs=mean_probs,
                               batch_size=batch)


def total_loss(ce_mean: float, balance: float, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return ce_mean + alpha * balance


def selector_backward(selection: Selection, dprobs: np.ndarray,
                      sel: dict[str, np.ndarray]):
    """Backprop one example's dLoss/dprobs through softmax and the linear head.

    Returns (dw, db, d_pooled); the caller accumulates dw/db and pushes
    d_pooled back into that example's encoder pass via pooled_backward.
    """
    p = selection.probs.astype(np.float64)
    dprobs = np.asarray(dprobs, dtype=np.float64)
    dlogits = p * (dprobs - float(dprobs @ p))
    dw = np.outer(dlogits, selection.pooled.astype(np.float64))
    db = dlogits
    d_pooled = sel["sel_w"].astype(np.float64).T @ dlogits
    return dw, db, d_pooled


def pooled_backward(d_pooled: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
    """Distribute the pooled-vector gradient evenly over non-PAD positions."""
    keep = ~pad_mask
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("cannot pool a sequence whose positions are all PAD")
    d_h = np.zeros((pad_mask.size, d_pooled.size), dtype=np.float64)
    d_h[keep] = d_pooled / n_keep
    return d_h


def format_decision_log(example_id, task: str, decision: Selection) -> dict:
    """One routing-log record; written as a JSON line by the training loop."""
    return {
        "example_id": example_id,
        "task": task,
        "chosen": int(decision.chosen),
        "probs": [float(p) for p in decision.probs],
    }
