"""Synthetic knowledge-dependent tasks built from nonce words.

Three tasks are generated whose answers are unpredictable from the input
alone: every answer is a pair of nonce words that can only be copied out of a
planted fact in one knowledge category (dictionary, commonsense, or
causality). Held-out facts live in the store but never appear in training
examples, so eval accuracy above chance requires the retrieve-and-copy
pathway to work.

One subject pool is shared by all six categories: each subject carries a
different fact of every type (a definition, an ability, a location, a
schedule, a first step, a consequence). That is what makes the category
structure load-bearing. A per-category lookup only ever sees facts of the
right type, but a flat lookup over everything keeps pulling in same-subject
facts from the wrong categories, which crowd out or impersonate the fact
that actually answers the question.

The fact count and answer length are chosen so that memorizing the training
answers is a much worse deal than learning to copy them out of retrieved
context: with a few hundred distinct 13-character random answers seen a
handful of times each, a small backbone routed away from its knowledge
sources cannot drive the training loss down, while a correctly routed one
can. That pressure is what lets the selector discover the planted
task-to-category assignment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .embedding import HASHED_NGRAM, EmbedderSpec
from .index import build_exact
from .model import T2TConfig
from .retrieval import KnowledgeContext
from .store import CATEGORY_NAMES, KnowledgeStore
from .tasks import Example, PromptTemplate, TaskSpec
from .training import TrainConfig

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"

# several surface forms per task: varied phrasings spread the untrained
# router's first guesses over several experts, so every task starts with
# scouts on more than one of them
TASK_RECIPES = (
    ("nonce-dictionary", "dictionary", "is defined as",
     ("define {word}", "{word} is defined as", "the definition of {word} is",
      "state the meaning of {word}")),
    ("nonce-commonsense", "commonsense", "can",
     ("what can a {word} do", "a {word} is able to",
      "one ability of a {word} is", "list a skill of a {word}")),
    ("nonce-causality", "causality", "causes",
     ("after {word} comes", "{word} leads to", "the result of {word} is",
      "name a consequence of {word}")),
)


def nonce_words(rng: np.random.Generator, count: int, n_syllables: int = 3) -> list[str]:
    """Distinct pronounceable nonsense words, deterministic given the rng."""
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        syllables = [
            CONSONANTS[rng.integers(len(CONSONANTS))] + VOWELS[rng.integers(len(VOWELS))]
            for _ in range(n_syllables)
        ]
        word = "".join(syllables)
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


@dataclass(frozen=True)
class SynthSuite:
    store: KnowledgeStore
    ctx: KnowledgeContext
    train_tasks: tuple[TaskSpec, ...]
    eval_tasks: tuple[TaskSpec, ...]
    planted_category: dict[str, str]  # task name -> category the answers live in


def _make_examples(facts, rng: np.random.Generator) -> tuple[Example, ...]:
    """One example per fact; choices = [answer, another fact's answer], order
    shuffled so position carries no signal."""
    objects = [obj for _subj, obj in facts]
    examples = []
    for i, (subject, obj) in enumerate(facts):
        distractor_at = int(rng.integers(len(facts) - 1))
        if distractor_at >= i:
            distractor_at += 1
        choices = [obj, objects[distractor_at]]
        if rng.integers(2) == 1:
            choices.reverse()
        examples.append(Example(fields={"word": subject}, target=obj,
                                answer_choices=tuple(choices)))
    return tuple(examples)


# off-task fact types for the same subjects; these partitions exist so that
# every subject is ambiguous under a flat lookup, not to back any task
FILLER_RECIPES = (("entity", "lives in"), ("event", "happens in"),
                  ("script", "starts by"))


def build_synthetic_suite(seed: int = 0, n_train: int = 360,
                          n_heldout: int = 12,
                          embed_dim: int = 256,
                          answer_words: int = 2,
                          answer_syllables: int = 3) -> SynthSuite:
    if answer_words < 1:
        raise ValueError("answers need at least one word")
    rng = np.random.default_rng(seed)
    n_facts = n_train + n_heldout

    # subjects get an extra syllable: they drive retrieval, and longer
    # words collide less in the hashed n-gram space
    subjects = nonce_words(rng, n_facts, n_syllables=4)

    store = KnowledgeStore()
    train_tasks = []
    eval_tasks = []
    planted = {}
    facts_by_category: dict[str, tuple[str, list[tuple[str, str]]]] = {}
    for task_name, category, relation, input_patterns in TASK_RECIPES:
        # two-word answers by default: long enough that memorizing hundreds
        # of them is hopeless while copying one out of context stays easy
        word_pool = nonce_words(rng, answer_words * n_facts,
                                n_syllables=answer_syllables)
        objects = [" ".join(word_pool[w * n_facts + i] for w in range(answer_words))
                   for i in range(n_facts)]
        facts = list(zip(subjects, objects))
        facts_by_category[category] = (relation, facts)
        templates = tuple(
            PromptTemplate(template_id=f"t{i}", input_pattern=pattern,
                           target_pattern="{target}")
            for i, pattern in enumerate(input_patterns))
        train_tasks.append(TaskSpec(
            name=task_name, templates=templates,
            examples=_make_examples(facts[:n_train], rng),
            category_hint=category))
        eval_tasks.append(TaskSpec(
            name=task_name, templates=templates,
            examples=_make_examples(facts[n_train:], rng),
            category_hint=category))
        planted[task_name] = category

    for category, relation in FILLER_RECIPES:
        objects = nonce_words(rng, n_facts)
        facts_by_category[category] = (relation, list(zip(subjects, objects)))

    # ingest in canonical category order: identical subject keys from
    # different categories tie exactly under the hashed embedder, and a fixed
    # order keeps the id tiebreak reproducible across builds
    for category in CATEGORY_NAMES:
        relation, facts = facts_by_category[category]
        lines = [json.dumps({"subject": s, "relation": relation, "object": o})
                 for s, o in facts]
        summary = store.ingest_triples(lines, category)
        if summary.errors:
            raise RuntimeError(f"synthetic ingest failed: {summary.errors}")

    embedder = EmbedderSpec(kind=HASHED_NGRAM, d=embed_dim, seed=seed)
    indexes = {name: build_exact(store.get_partition(name).kvs, embedder)
               for name in CATEGORY_NAMES}
    union_index = build_exact(store.all_kvs(), embedder)
    ctx = KnowledgeContext.build(store, embedder, indexes, union_index)
    return SynthSuite(store=store, ctx=ctx, train_tasks=tuple(train_tasks),
                      eval_tasks=tuple(eval_tasks), planted_category=planted)


def build_collapse_suite(seed: int = 0, n_train: int = 360) -> SynthSuite:
    """Symmetric three-task mixture with one-word four-letter answers.

    Made for routing-dynamics experiments rather than accuracy ones: short
    targets keep the cross-entropy gradient into the logit scale small, so
    the balancing term is a comparable force and its presence or absence is
    what decides whether dispatch keeps its spread. The fact pool stays at
    the full non-memorizable size; a smaller pool lets the backbone memorize
    the answers outright, after which nothing opposes dispatch herding and
    both balanced and unbalanced runs saturate onto a single expert."""
    return build_synthetic_suite(seed=seed, n_train=n_train,
                                 answer_words=1, answer_syllables=2)


def synthetic_model_config(seed: int = 0, dtype: str = "f32") -> T2TConfig:
    return T2TConfig(vocab_size=261, d_model=48, n_heads=4, n_enc_layers=2,
                     n_dec_layers=2, d_ff=96, max_positions=192, seed=seed,
                     dtype=dtype)


def synthetic_train_config(mode: str, seed: int = 0, alpha: float = 0.05,
                           epochs: int = 20, max_steps: int | None = None) -> TrainConfig:
    # lr far above the real-data default: byte-level nonce tasks at this scale
    # plateau for thousands of steps at 5e-5
    return TrainConfig(lr=1e-3, alpha=alpha, batch_size=8, epochs=epochs,
                       max_input_len=160, max_output_len=16, max_pieces=3,
                       top_m=25, seed=seed, selector_mode=mode,
                       warmup_steps=300, max_steps=max_steps)
