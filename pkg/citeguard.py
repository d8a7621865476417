"""
CiteGuard - Citation-Enforced Answers over Fiscal Documents
===========================================================

Commands:
    ingest   validate DIF files, chunk them and write a fresh store
    index    embed all chunks and persist the vector index
    query    answer one question (exit 0 answered, 3 abstained)
    serve    run the read-only HTTP query service
    eval     run a query set, report metrics, sample records for labeling
    stub     run the offline provider stub server

Exit codes: 0 answered/success, 3 abstained, 1 operational error, 2 usage.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from chunking import ChunkingConfig
from core_model import CiteGuardError
from embedding_provider import ProviderKind
import evaluation
from rag_engine import is_abstained, render_payload, response_payload
import store
from store import StoreLayout

try:
    from config import CONFIG
except ImportError:
    from config_template import CONFIG

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_ABSTAINED = 3

# lowest cosine; a tau here never abstains on similarity
MIN_TAU = -1.0


def setup_logging(config: Dict):
    """Log to file and stderr; stdout carries answers and --json payloads only"""
    logging.basicConfig(
        level=logging.DEBUG if config.get('debug_mode') else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(config.get('log_file', 'citeguard.log')),
            logging.StreamHandler(sys.stderr),
        ]
    )


def _tau(value: str) -> float:
    try:
        tau = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tau must be a number, got {value!r}")
    if not -1.0 <= tau <= 1.0:
        raise argparse.ArgumentTypeError(f"tau must lie in [-1, 1], got {tau}")
    return tau


def _positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}")
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _settings(store_dir: Optional[str], flags: Optional[Dict] = None) -> Dict:
    manifest = StoreLayout(store_dir).read_manifest() if store_dir else None
    return store.resolve_settings(CONFIG, manifest=manifest, flags=flags)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    """Validate and chunk a DIF directory into a fresh store"""
    settings = store.resolve_settings(CONFIG)
    cfg = ChunkingConfig(
        target_len=settings['chunk_target_len'],
        max_len=settings['chunk_max_len'],
        overlap_len=settings['chunk_overlap_len'],
        min_len=settings['chunk_min_len'],
    )
    logger.info("=" * 80)
    logger.info("CITEGUARD INGEST")
    logger.info("=" * 80)
    logger.info(f"Input: {args.input}")
    logger.info(f"Store: {args.store}")
    logger.info(f"Mode: {'lenient' if args.lenient else 'strict'}")
    logger.info(f"Chunking: target={cfg.target_len} max={cfg.max_len} overlap={cfg.overlap_len} min={cfg.min_len}")
    logger.info("=" * 80)

    manifest, stats = store.ingest_store(args.input, args.store, cfg, lenient=args.lenient,
                                         workers=args.workers or settings['ingest_workers'])

    counts = manifest["counts"]
    print(f"Ingested {counts['docs']} docs -> {counts['chunks']} chunks "
          f"({len(stats.warnings)} warnings)")
    print(store.format_composition(manifest["composition"]))
    for warning in stats.warnings:
        print(f"warning: {warning}")
    return EXIT_OK


def cmd_index(args) -> int:
    """Embed every chunk and persist the vector index"""
    settings = _settings(args.store, {
        'embed_url': args.provider,
        'embed_model': args.model,
        'mock_dim': args.dim,
    })
    provider = store.embed_provider_from(settings)
    logger.info("=" * 80)
    logger.info("CITEGUARD INDEX")
    logger.info("=" * 80)
    logger.info(f"Store: {args.store}")
    logger.info(f"Provider: {provider.base_url if provider.kind == ProviderKind.REMOTE else 'mock'}")
    logger.info(f"Model: {provider.model_id}")
    logger.info("=" * 80)

    manifest = store.index_store(args.store, provider, force=args.force)
    embedding = manifest["embedding"]
    print(f"Indexed {manifest['counts']['rows']} chunks (dim {embedding['dim']}, model {embedding['model_id']})")
    return EXIT_OK


def _print_human(payload: Dict):
    if payload["status"] == "answered":
        print("\n\n".join(p["text"] for p in payload["paragraphs"]))
        print()
        print("Evidence:")
        for item in payload["evidence"]:
            print(f"  {item['citation']}  score={item['score']:.4f}")
    else:
        print(payload["message"])


def cmd_query(args) -> int:
    """Answer one question; exit 0 when answered, 3 when abstained"""
    settings = _settings(args.store, {
        'embed_url': args.provider,
        'llm_url': args.llm,
        'k': args.k,
        'tau': args.tau,
    })
    engine = store.open_engine(args.store, settings)
    response = engine.answer(args.question)
    payload = response_payload(response)
    if args.json:
        # identical to the HTTP body: no trailing newline
        sys.stdout.write(render_payload(payload))
        sys.stdout.flush()
    else:
        _print_human(payload)
    return EXIT_ABSTAINED if is_abstained(response) else EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from service import create_app_from_store

    settings = _settings(args.store, {'embed_url': args.provider, 'llm_url': args.llm})
    app = create_app_from_store(args.store, settings)
    logger.info("=" * 80)
    logger.info("CITEGUARD SERVICE")
    logger.info("=" * 80)
    logger.info(f"Store: {args.store}")
    logger.info(f"Listening: http://{args.host}:{args.port}")
    logger.info(f"k={settings['k']} tau={settings['tau']} max_attempts={settings['max_attempts']}")
    logger.info("=" * 80)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def cmd_eval_run(args) -> int:
    """Run a query set and write records.jsonl plus the timings sidecar"""
    settings = _settings(args.store, {
        'embed_url': args.provider,
        'llm_url': args.llm,
        'tau': MIN_TAU if args.no_abstention else None,
        'enforce_citations': False if args.no_enforcement else None,
    })
    queries = evaluation.load_queries(args.queries)
    engine = store.open_engine(args.store, settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    logger.info("=" * 80)
    logger.info("CITEGUARD EVAL RUN")
    logger.info("=" * 80)
    logger.info(f"Queries: {len(queries)} from {args.queries}")
    logger.info(f"k={settings['k']} tau={settings['tau']} parallelism={args.parallelism or settings['eval_parallelism']}")
    logger.info(f"Variant: abstention={'off' if args.no_abstention else 'on'} "
                f"citation enforcement={'on' if settings.get('enforce_citations', True) else 'off'}")
    logger.info("=" * 80)

    records = evaluation.run_queries(queries, engine, parallelism=args.parallelism or settings['eval_parallelism'])
    evaluation.write_records(out / "records.jsonl", records)
    evaluation.write_timings(out / "timings.jsonl", records)
    report = evaluation.auto_metrics(records)
    print(f"{report.n_queries} queries: {report.n_answered} answered, {report.n_abstained} abstained, "
          f"{report.n_errors} errors -> {out / 'records.jsonl'}")
    return EXIT_OK


def cmd_eval_report(args) -> int:
    """Compute metrics from records and optional labels"""
    records = evaluation.read_records(args.records)
    labels = evaluation.load_labels(args.labels) if args.labels else []
    report = evaluation.report_metrics(records, labels)
    evaluation.write_report(args.out, report)

    logger.info("=" * 80)
    logger.info("CITEGUARD EVAL REPORT")
    logger.info("=" * 80)
    for name, value in sorted(report.rendered().items()):
        logger.info(f"{name}: {value}")
    logger.info("=" * 80)
    for name, value in sorted(report.rendered().items()):
        print(f"{name:<22} {value}")
    return EXIT_OK


def cmd_eval_sample(args) -> int:
    records = evaluation.read_records(args.records)
    templates = evaluation.sample_for_labeling(records, args.per_stratum, seed=args.seed)
    evaluation.write_label_templates(args.out, templates)
    print(f"Wrote {len(templates)} label templates to {args.out}")
    return EXIT_OK


def cmd_stub(args) -> int:
    import uvicorn

    from stub_server import create_stub_app

    logger.info(f"Provider stub on http://{args.host}:{args.port} (mock dim {args.dim})")
    uvicorn.run(create_stub_app(mock_dim=args.dim), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="citeguard", description="Citation-enforced, abstention-aware RAG")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and chunk a DIF directory into a store")
    p.add_argument("--in", dest="input", required=True, help="directory of DIF *.json files")
    p.add_argument("--store", required=True)
    p.add_argument("--lenient", action="store_true", help="ignore unknown DIF fields instead of rejecting them")
    p.add_argument("--workers", type=_positive_int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="embed chunks and build the vector index")
    p.add_argument("--store", required=True)
    p.add_argument("--provider", help="embedding service URL or 'mock'")
    p.add_argument("--model", help="embedding model id")
    p.add_argument("--dim", type=_positive_int, help="mock embedding dimension")
    p.add_argument("--force", action="store_true", help="rebuild even if the embedding dimension changed")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="answer one question")
    p.add_argument("--store", required=True)
    p.add_argument("question")
    p.add_argument("--k", type=_positive_int)
    p.add_argument("--tau", type=_tau)
    p.add_argument("--json", action="store_true", help="print the HTTP response body instead of text")
    p.add_argument("--provider", help="embedding service URL or 'mock'")
    p.add_argument("--llm", help="generation service URL or 'mock'")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("serve", help="run the HTTP query service")
    p.add_argument("--store", required=True)
    p.add_argument("--port", type=_positive_int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--provider")
    p.add_argument("--llm")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("eval", help="evaluation harness")
    eval_sub = p.add_subparsers(dest="eval_command", required=True)

    e = eval_sub.add_parser("run", help="run a query set and write records.jsonl")
    e.add_argument("--store", required=True)
    e.add_argument("--queries", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--parallelism", type=_positive_int)
    e.add_argument("--provider")
    e.add_argument("--no-abstention", action="store_true",
                   help="baseline: answer whenever evidence is retrieved, ignoring tau")
    e.add_argument("--no-enforcement", action="store_true",
                   help="baseline: return the first draft without citation validation or retries")
    e.add_argument("--llm")
    e.set_defaults(func=cmd_eval_run)

    e = eval_sub.add_parser("report", help="compute metrics and write report.json")
    e.add_argument("--records", required=True)
    e.add_argument("--labels")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_report)

    e = eval_sub.add_parser("sample", help="write a stratified labels.jsonl template")
    e.add_argument("--records", required=True)
    e.add_argument("--per-stratum", type=_positive_int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_sample)

    p = sub.add_parser("stub", help="run the offline provider stub server")
    p.add_argument("--port", type=_positive_int, default=8090)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--dim", type=_positive_int, default=CONFIG.get('mock_dim', 64))
    p.set_defaults(func=cmd_stub)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments and dispatch; outcomes map to exit codes"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    setup_logging(CONFIG)
    try:
        return args.func(args)
    except CiteGuardError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR
    except ValueError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_ERROR
    except KeyboardInterrupt:
        logger.info("\n>>> Stopped by user")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
