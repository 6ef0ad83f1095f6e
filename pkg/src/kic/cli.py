"""Operator commands: ingest, index, retrieve, train, eval, report, and the
two verification tools (grad-check, bench-index), all driven by one JSON
config file with --set overrides.

Exit codes: 0 on success, 1 on runtime failure (missing artifacts, rejected
input files, failed checks), 2 on usage errors (bad flags, bad config keys,
unknown categories). Every command takes --seed, which wins over KIC_SEED,
which wins over the config file.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck, kernels
from .config import CliConfig, ConfigError, load_config, with_seed
from .evaluation import (
    evaluate_task,
    render_results_csv,
    render_results_table,
    render_routing_table,
    routing_report,
)
from .index import ExactIndex, build_exact, build_ivf, benchmark_vectors, load_index, recall_at, save_index, search
from .retrieval import KnowledgeContext, RetrievalRequest, retrieve
from .store import CATEGORY_NAMES, KnowledgeStore, build_plaintext_partition
from .tasks import load_task_dir
from .training import init_state, load_checkpoint, run_training

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

UNION_INDEX_NAME = "union"


def _fail(message: str, code: int = EXIT_RUNTIME) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _load(args) -> CliConfig:
    cfg = load_config(args.config, tuple(args.overrides))
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


# -- ingest -------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    if args.category not in CATEGORY_NAMES:
        return _fail(f"unknown category {args.category!r}; valid categories: "
                     + ", ".join(CATEGORY_NAMES), EXIT_USAGE)
    cfg = _load(args)
    if cfg.store_dir.exists():
        store = KnowledgeStore.load(cfg.store_dir)
    else:
        store = KnowledgeStore()
    rejected = False
    for name in args.files:
        try:
            summary = store.ingest_file(name, args.category)
        except OSError as exc:
            _warn(f"{name}: {exc}")
            rejected = True
            continue
        print(f"{name}: {summary.new_triples} triples, {summary.new_kvs} kvs, "
              f"{summary.duplicates} duplicates, {len(summary.errors)} errors")
        for line_no, message in summary.errors:
            _warn(f"{name}:{line_no}: {message}")
        if summary.errors:
            rejected = True
    store.save(cfg.store_dir)
    return EXIT_RUNTIME if rejected else EXIT_OK


# -- index --------------------------------------------------------------------------

def _build_one_index(kvs, cfg: CliConfig, ivf_clusters: int | None,
                     nprobe: int | None, seed: int):
    index = build_exact(kvs, cfg.embedder)
    if ivf_clusters is not None:
        index = build_ivf(index, ivf_clusters, seed=seed, nprobe=nprobe)
    return index


def cmd_index(args) -> int:
    if args.category is not None and args.category not in CATEGORY_NAMES:
        return _fail(f"unknown category {args.category!r}; valid categories: "
                     + ", ".join(CATEGORY_NAMES), EXIT_USAGE)
    cfg = _load(args)
    store = KnowledgeStore.load(cfg.store_dir)
    cfg.index_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.train.seed
    categories = CATEGORY_NAMES if args.all else (args.category,)
    written = 0
    for category in categories:
        kvs = store.get_partition(category).kvs
        if not kvs:
            _warn(f"partition {category!r} is empty; skipped")
            continue
        index = _build_one_index(kvs, cfg, args.ivf, args.nprobe, seed)
        path = cfg.index_path(category)
        save_index(index, path)
        print(f"{category}: {index.n} keys -> {path}")
        written += 1
    if args.all:
        kvs = store.all_kvs()
        if kvs:
            index = _build_one_index(kvs, cfg, args.ivf, args.nprobe, seed)
            path = cfg.index_path(UNION_INDEX_NAME)
            save_index(index, path)
            print(f"{UNION_INDEX_NAME}: {index.n} keys -> {path}")
            written += 1
        else:
            _warn("store is empty; no union index")
    if written == 0:
        return _fail("nothing indexed")
    return EXIT_OK


# -- retrieve -----------------------------------------------------------------------

def cmd_retrieve(args) -> int:
    if args.category not in CATEGORY_NAMES:
        return _fail(f"unknown category {args.category!r}; valid categories: "
                     + ", ".join(CATEGORY_NAMES), EXIT_USAGE)
    if args.top < 0:
        return _fail("--top must be >= 0", EXIT_USAGE)
    if args.top == 0:
        return EXIT_OK
    cfg = _load(args)
    store = KnowledgeStore.load(cfg.store_dir)
    path = cfg.index_path(args.category)
    if not path.exists():
        return _fail(f"no index at {path}; run: kic index --category {args.category}")
    index = load_index(path, expect_d=cfg.embedder.d)
    ctx = KnowledgeContext.build(store, cfg.embedder, {args.category: index})
    request = RetrievalRequest(query_text=args.query, category=args.category,
                               top_m=args.top, max_pieces=args.top)
    for value_text, score in retrieve(request, ctx).pieces:
        print(f"{score:.6f}\t{value_text}")
    return EXIT_OK


# -- shared artifact loading ---------------------------------------------------------

def _load_context(cfg: CliConfig, mode: str,
                  plaintext_file: str | None = None) -> KnowledgeContext | None:
    """Retrieval bundle for the given selector mode; None when it needs none."""
    if mode == "none":
        return None
    store = KnowledgeStore.load(cfg.store_dir)
    indexes = {}
    for category in CATEGORY_NAMES:
        path = cfg.index_path(category)
        if path.exists():
            indexes[category] = load_index(path, expect_d=cfg.embedder.d)
    union = None
    union_path = cfg.index_path(UNION_INDEX_NAME)
    if union_path.exists():
        union = load_index(union_path, expect_d=cfg.embedder.d)
    if mode == "mixed" and union is None:
        raise FileNotFoundError(f"no union index at {union_path}; run: kic index --all")
    if mode not in ("mixed", "plain-text") and not indexes:
        raise FileNotFoundError(f"no category indexes in {cfg.index_dir}; run: kic index --all")
    ctx = KnowledgeContext.build(store, cfg.embedder, indexes, union)
    if mode == "plain-text":
        if plaintext_file is None:
            raise FileNotFoundError("plain-text mode needs --plaintext FILE")
        partition = build_plaintext_partition(plaintext_file)
        ctx.plaintext_index = build_exact(partition.kvs, cfg.embedder)
        ctx.plaintext_values = {kv.kv_id: kv.value_text for kv in partition.kvs}
    return ctx


# -- train --------------------------------------------------------------------------

def cmd_train(args) -> int:
    from dataclasses import replace

    cfg = _load(args)
    train_cfg = cfg.train
    if args.mode is not None:
        train_cfg = replace(train_cfg, selector_mode=args.mode)
    if args.steps is not None:
        train_cfg = replace(train_cfg, max_steps=args.steps)
    tasks = load_task_dir(cfg.task_dir)
    ctx = _load_context(cfg, train_cfg.selector_mode, args.plaintext)
    if args.resume is not None:
        state = load_checkpoint(args.resume, expect_config=cfg.backbone)
        state.train_config = train_cfg
        print(f"resumed from {args.resume} at step {state.step}")
    else:
        state = init_state(cfg.backbone, train_cfg)
    out_dir = Path(args.out) if args.out is not None else cfg.checkpoint_dir
    metrics = run_training(state, tasks, ctx, out_dir)
    last = metrics[-1] if metrics else {"step": state.step, "total": float("nan")}
    print(f"trained to step {last['step']}; final loss {last['total']:.6f}; "
          f"checkpoint at {out_dir / 'checkpoint.kicw'}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = _load(args)
    checkpoint = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_dir / "checkpoint.kicw"
    if not checkpoint.exists():
        return _fail(f"no checkpoint at {checkpoint}")
    state = load_checkpoint(checkpoint)
    mode = state.train_config.selector_mode
    tasks = load_task_dir(cfg.task_dir)
    ctx = _load_context(cfg, mode, args.plaintext)
    # results and the routing log land next to the checkpoint unless redirected
    out_path = Path(args.out) if args.out else checkpoint.parent / "eval_results.jsonl"
    routing_path = Path(args.routing_log) if args.routing_log else checkpoint.parent / "routing_eval.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    routing_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    with routing_path.open("w", encoding="utf-8") as log_sink:
        for task in tasks:
            result = evaluate_task(task, state, ctx, log_sink=log_sink)
            n = sum(1 for ex in task.examples if ex.answer_choices is not None)
            for template_id, accuracy in result.per_template_accuracy.items():
                rows.append({"mode": mode, "task": task.name,
                             "template_id": template_id,
                             "accuracy": accuracy, "n": n})
            print(f"{task.name}: mean {result.mean:.4f} median {result.median:.4f} "
                  f"std {result.std:.4f} ({result.n_scored} scored, "
                  f"{result.n_skipped} skipped)")
            for template_id in result.excluded_templates:
                _warn(f"{task.name}: template {template_id} had no scorable examples")
    with out_path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")
    print(f"results -> {out_path}")
    print(f"routing log -> {routing_path}")
    return EXIT_OK


# -- report -------------------------------------------------------------------------

def _aggregate_rows(rows) -> list[dict]:
    """One row per (mode, task): mean accuracy over that pair's templates."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        groups.setdefault((str(row.get("mode", "-")), row["task"]), []).append(row)
    out = []
    for (mode, task), members in sorted(groups.items()):
        accuracy = sum(m["accuracy"] for m in members) / len(members)
        out.append({"mode": mode, "task": task, "templates": len(members),
                    "accuracy": accuracy, "n": members[0].get("n", 0)})
    return out


def cmd_report(args) -> int:
    path = Path(args.results)
    if not path.exists():
        return _fail(f"no results file at {path}")
    with path.open("r", encoding="utf-8") as handle:
        rows = [json.loads(line) for line in handle if line.strip()]
    if not rows:
        return _fail(f"{path} holds no result rows")
    if args.per_template:
        print(render_results_csv(rows) if args.csv else render_results_table(rows), end="")
    else:
        summary = _aggregate_rows(rows)
        if args.csv:
            buffer = io.StringIO()
            writer = csv.writer(buffer)
            writer.writerow(["mode", "task", "templates", "accuracy", "n"])
            for row in summary:
                writer.writerow([row["mode"], row["task"], row["templates"],
                                 f"{row['accuracy']:.6f}", row["n"]])
            print(buffer.getvalue(), end="")
        else:
            widths = [max(len(str(r["mode"])) for r in summary + [{"mode": "mode"}]),
                      max(len(str(r["task"])) for r in summary + [{"task": "task"}])]
            print(f"{'mode':<{widths[0]}}  {'task':<{widths[1]}}  templates  accuracy")
            for row in summary:
                print(f"{row['mode']:<{widths[0]}}  {row['task']:<{widths[1]}}  "
                      f"{row['templates']:>9d}  {row['accuracy']:.4f}")
    if args.routing:
        routing_path = Path(args.routing)
        if not routing_path.exists():
            return _fail(f"no routing log at {routing_path}")
        with routing_path.open("r", encoding="utf-8") as handle:
            records = [json.loads(line) for line in handle if line.strip()]
        if not records:
            return _fail(f"{routing_path} holds no routing decisions")
        print()
        for task in sorted({r["task"] for r in records}):
            print(render_routing_table(routing_report(records, task)), end="")
        print(render_routing_table(routing_report(records)), end="")
    return EXIT_OK


# -- grad-check ---------------------------------------------------------------------

def cmd_grad_check(args) -> int:
    started = time.perf_counter()
    seed = args.seed if args.seed is not None else 0
    rows = gradcheck.run_full_check(seed=seed, alpha=args.alpha)
    failed = 0
    for row in rows:
        ok = row["rel_err"] <= args.tolerance
        failed += not ok
        print(f"{row['suite']:>9s}  {row['name']:<16s} n={row['n']:<5d} "
              f"rel_err={row['rel_err']:.3e}  {'ok' if ok else 'FAIL'}")
    worst = gradcheck.worst_row(rows)
    elapsed = time.perf_counter() - started
    print(f"worst block {worst['name']} at {worst['rel_err']:.3e} "
          f"(tolerance {args.tolerance:g}); {len(rows)} blocks in {elapsed:.1f}s")
    return EXIT_RUNTIME if failed else EXIT_OK


# -- bench-index --------------------------------------------------------------------

def _time_searches(index, queries, top_m: int, nprobe: int | None = None) -> tuple[float, list]:
    hits = []
    started = time.perf_counter()
    for query in queries:
        hits.append(search(index, query, top_m, nprobe=nprobe))
    elapsed = time.perf_counter() - started
    return 1000.0 * elapsed / len(queries), hits


def cmd_bench_index(args) -> int:
    seed = args.seed if args.seed is not None else 0
    nprobes = [int(x) for x in args.nprobes.split(",") if x.strip()]
    if not nprobes:
        return _fail("--nprobes must name at least one probe count", EXIT_USAGE)
    vectors = benchmark_vectors(args.n, args.d, seed)
    queries = benchmark_vectors(args.queries, args.d, seed + 1)
    exact = ExactIndex(d=args.d, n=args.n, keys=vectors,
                       ids=np.arange(args.n, dtype=np.uint64))
    started = time.perf_counter()
    ivf = build_ivf(exact, args.clusters, seed=seed)
    build_ms = 1000.0 * (time.perf_counter() - started)

    backends = ["numpy"]
    try:
        kernels.set_backend("numba")
        backends.append("numba")
    except RuntimeError as exc:
        _warn(f"numba backend unavailable ({exc}); benchmarking numpy only")
    previous = kernels.backend()

    rows = []
    reference: list | None = None
    try:
        for name in backends:
            kernels.set_backend(name)
            search(exact, queries[0], args.top)  # warm up any jit compilation
            mean_ms, hits = _time_searches(exact, queries, args.top)
            if reference is None:
                reference = hits
            recall = sum(recall_at(h, r) for h, r in zip(hits, reference)) / len(hits)
            rows.append((name, "exact", "", f"{recall:.4f}", f"{mean_ms:.4f}"))
            for nprobe in nprobes:
                mean_ms, hits = _time_searches(ivf, queries, args.top, nprobe=nprobe)
                recall = sum(recall_at(h, r) for h, r in zip(hits, reference)) / len(hits)
                rows.append((name, "ivf", str(nprobe), f"{recall:.4f}", f"{mean_ms:.4f}"))
    finally:
        kernels.set_backend(previous)

    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["backend", "method", "nprobe", f"recall_at_{args.top}", "mean_query_ms"])
    writer.writerows(rows)
    if args.out:
        Path(args.out).write_text(buffer.getvalue(), encoding="utf-8")
        print(f"{len(rows)} rows -> {args.out} (ivf build {build_ms:.1f} ms, "
              f"n={args.n}, d={args.d}, c={args.clusters})")
    else:
        print(buffer.getvalue(), end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kic",
        description="typed knowledge memory, routed retrieval, and the training harness")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", default=None,
                        help="JSON config file (defaults apply without one)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable, wins over the file")
    common.add_argument("--seed", type=int, default=None,
                        help="seed override; wins over KIC_SEED and the config")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common],
                       help="add triple files to the knowledge store")
    p.add_argument("files", nargs="+", metavar="FILE")
    p.add_argument("--category", required=True,
                   help="knowledge category for every ingested file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", parents=[common],
                       help="build vector indexes from the store")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--all", action="store_true",
                       help="index every category plus the union index")
    group.add_argument("--category", default=None, help="index one category")
    p.add_argument("--ivf", type=int, default=None, metavar="CLUSTERS",
                   help="build an IVF index with this many clusters")
    p.add_argument("--nprobe", type=int, default=None,
                   help="default probe count stored with an IVF index")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", parents=[common],
                       help="query one category index")
    p.add_argument("--query", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--top", type=int, default=10, help="hits to print")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", parents=[common], help="run multitask training")
    p.add_argument("--steps", type=int, default=None,
                   help="stop after this many optimizer steps")
    p.add_argument("--mode", default=None,
                   choices=("instance", "task", "none", "mixed", "no-generalist",
                            "plain-text"),
                   help="selector mode override")
    p.add_argument("--out", default=None, metavar="DIR",
                   help="run directory (default: the checkpoint dir)")
    p.add_argument("--resume", default=None, metavar="CHECKPOINT",
                   help="continue from a saved checkpoint")
    p.add_argument("--plaintext", default=None, metavar="FILE",
                   help="sentence file for plain-text mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on the task directory")
    p.add_argument("--checkpoint", default=None, metavar="FILE")
    p.add_argument("--out", default=None, metavar="FILE",
                   help="results JSONL (default: eval_results.jsonl)")
    p.add_argument("--routing-log", default=None, metavar="FILE")
    p.add_argument("--plaintext", default=None, metavar="FILE",
                   help="sentence file for plain-text mode")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common],
                       help="render tables from results and routing logs")
    p.add_argument("--results", required=True, metavar="FILE")
    p.add_argument("--routing", default=None, metavar="FILE")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    p.add_argument("--per-template", action="store_true",
                   help="one row per template instead of per (mode, task)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("grad-check", parents=[common],
                       help="finite-difference check of every gradient block")
    p.add_argument("--alpha", type=float, default=0.05,
                   help="balance weight in the checked loss")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="maximum allowed relative error")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench-index", parents=[common],
                       help="recall/latency sweep over both kernel backends")
    p.add_argument("--n", type=int, default=10_000, help="indexed vectors")
    p.add_argument("--d", type=int, default=256, help="vector dimension")
    p.add_argument("--clusters", type=int, default=100, help="IVF cluster count")
    p.add_argument("--queries", type=int, default=50)
    p.add_argument("--top", type=int, default=10, help="hits per query")
    p.add_argument("--nprobes", default="1,2,5,10,20",
                   help="comma-separated probe counts for the IVF sweep")
    p.add_argument("--out", default=None, metavar="FILE", help="write CSV here")
    p.set_defaults(func=cmd_bench_index)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USAGE)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
