"""Command-line surface: ingest, query, serve, store maintenance, eval.

Exit codes: 0 success, 2 usage, 3 store error, 4 provider error. `query`
streams stage events to stderr and the answer to stdout; `--json` switches
stdout to machine-readable output.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import EngineConfig, default_config, load_config
from .errors import (
    BudgetExceeded,
    CorruptManifest,
    DecompositionFailed,
    FixtureMiss,
    KgragError,
    MalformedResponse,
    MissingEndpoint,
    StoreNotLoaded,
    StoreWriteError,
    TransportError,
    VersionMismatch,
)
from .evaluation import load_dataset, run_eval
from .pipeline import build_orchestrator
from .store import load as load_store

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STORE = 3
EXIT_PROVIDER = 4

_STORE_ERRORS = (StoreWriteError, MissingEndpoint, VersionMismatch, CorruptManifest, StoreNotLoaded)
_PROVIDER_ERRORS = (TransportError, MalformedResponse, FixtureMiss, BudgetExceeded)


def _build_config(args) -> EngineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    if getattr(args, "store", None):
        cfg.store_path = args.store
    for flag, field in (
        ("mode", "mode"),
        ("matching", "matching_mode"),
        ("checking", "checking_mode"),
        ("ner", "ner_strategy"),
        ("node_edge_budget", "node_edge_token_budget"),
        ("chunk_budget", "chunk_token_budget"),
        ("chunk_size", "chunk_size"),
        ("chunk_overlap", "chunk_overlap"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, field, value)
    return cfg


def cmd_ingest(args) -> int:
    cfg = _build_config(args)
    orchestrator = build_orchestrator(cfg)
    report = orchestrator.ingest([args.path])
    if args.json:
        print(json.dumps(report.to_json(), ensure_ascii=False))
    else:
        merge = report.merge
        print(
            f"ingested {report.documents} document(s), {report.chunks} chunk(s); "
            f"nodes +{merge.nodes_created}/~{merge.nodes_merged}, "
            f"edges +{merge.edges_created}/~{merge.edges_merged}"
        )
        if report.failed_chunks:
            print(f"failed chunks: {', '.join(report.failed_chunks)}", file=sys.stderr)
    return EXIT_OK


def cmd_query(args) -> int:
    cfg = _build_config(args)
    orchestrator = build_orchestrator(cfg)

    def sink(event: dict) -> None:
        kind = event.get("event")
        if kind == "stage":
            print(f"[stage] {event['name']}: {event['status']} {event.get('detail', '')}".rstrip(),
                  file=sys.stderr)
        elif kind == "verdict":
            print(f"[verdict] {event['mode']}: {event['verdict']}", file=sys.stderr)

    answer, trace = orchestrator.answer(args.question, mode=args.mode, sink=sink)
    if args.json:
        print(json.dumps({"answer": answer, "trace": trace.to_json()}, ensure_ascii=False))
    else:
        print(answer)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = _build_config(args)
    orchestrator = build_orchestrator(cfg)
    orchestrator.load_store()
    app = create_app(orchestrator)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def cmd_store(args) -> int:
    store = load_store(args.store)
    if args.action == "stats":
        stats = store.stats()
        print(json.dumps(stats, ensure_ascii=False) if args.json
              else f"nodes: {stats['nodes']}, edges: {stats['edges']}, chunks: {stats['chunks']}")
        return EXIT_OK
    problems = store.verify()
    if args.json:
        print(json.dumps({"ok": not problems, "problems": problems}, ensure_ascii=False))
    else:
        for problem in problems:
            print(problem, file=sys.stderr)
        print("store ok" if not problems else f"{len(problems)} problem(s) found")
    return EXIT_OK if not problems else EXIT_STORE


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    orchestrator = build_orchestrator(cfg)
    records = load_dataset(args.dataset)
    report = run_eval(orchestrator, records, mode=args.mode, parallel=args.parallel)
    Path(args.report).write_text(
        json.dumps(report.to_json(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8"
    )
    summary = {"records": len(report.records), **report.aggregates}
    print(json.dumps(summary, ensure_ascii=False) if args.json
          else ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in summary.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgrag", description=__doc__)
    parser.add_argument("--config", help="engine config JSON file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build or extend a store from a corpus")
    p.add_argument("path", help="corpus file or directory")
    p.add_argument("--store", required=True, help="store directory")
    p.add_argument("--ner", choices=["trial", "base"], default=None)
    p.add_argument("--chunk-size", dest="chunk_size", type=int, default=None)
    p.add_argument("--chunk-overlap", dest="chunk_overlap", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="answer a question against the store")
    p.add_argument("question")
    p.add_argument("--store", default=None)
    p.add_argument("--mode", choices=["auto", "dual", "logic"], default=None)
    p.add_argument("--matching", choices=["fuzzy", "exact"], default=None)
    p.add_argument("--checking", choices=["argument", "result"], default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8642)
    p.add_argument("--store", default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("store", help="store maintenance")
    p.add_argument("action", choices=["verify", "stats"])
    p.add_argument("--store", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_store)

    p = sub.add_parser("eval", help="run the evaluation harness")
    p.add_argument("--dataset", required=True, help="JSONL dataset")
    p.add_argument("--report", required=True, help="where to write the JSON report")
    p.add_argument("--store", default=None)
    p.add_argument("--mode", choices=["auto", "dual", "logic"], default=None)
    p.add_argument("--matching", choices=["fuzzy", "exact"], default=None)
    p.add_argument("--checking", choices=["argument", "result"], default=None)
    p.add_argument("--ner", choices=["trial", "base"], default=None)
    p.add_argument("--node-edge-budget", dest="node_edge_budget", type=int, default=None)
    p.add_argument("--chunk-budget", dest="chunk_budget", type=int, default=None)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except _STORE_ERRORS as exc:
        print(f"store error: {exc}", file=sys.stderr)
        return EXIT_STORE
    except _PROVIDER_ERRORS as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (DecompositionFailed, KgragError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
