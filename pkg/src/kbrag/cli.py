"""Single command-line entrypoint.

Subcommands: ingest, retrieve, run, build, eval, ablate, sweep,
serve-mock, make-scenario. Logs go to stderr, data to files or stdout;
``--json`` switches stdout to one machine-readable object per command.

Exit codes: 0 success, 2 validation failure, 3 backend failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import forge, harness, kb, report, scenario
from .errors import GatewayError, ValidationError
from .gateway import (
    DEFAULT_RETRIES,
    DEFAULT_TIMEOUT,
    MockOracle,
    OracleTruthTable,
    RemoteGateway,
    serve_mock,
)
from .harness import Matcher
from .pipeline import (
    PipelineConfig,
    StageFlags,
    load_trace_payloads,
    run_batch,
    write_traces,
)
from .prompts import load_prompt_pack
from .tokens import SrtSelectionMode
from .wire import canonical_json

logger = logging.getLogger(__name__)

BACKEND_URL_ENV = "KBRAG_BACKEND_URL"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BACKEND = 3
EXIT_IO = 4

_MATCHERS = {
    "relaxed": "relaxed_match",
    "vqa": "vqa_score",
    "numeric": "numeric_range",
}


def _emit(args, human: str, payload: dict) -> None:
    if getattr(args, "json", False):
        print(canonical_json(payload))
    else:
        print(human)


def _matcher(args) -> Matcher:
    return Matcher(kind=_MATCHERS[args.matcher])


def _gateway(args):
    table = getattr(args, "mock_table", None)
    if table:
        return MockOracle(OracleTruthTable.from_file(table))
    url = getattr(args, "backend_url", None) or os.environ.get(BACKEND_URL_ENV)
    if url:
        return RemoteGateway(url, timeout=args.backend_timeout, retries=args.backend_retries)
    raise ValidationError(
        f"no backend: pass --mock-table, --backend-url, or set {BACKEND_URL_ENV}"
    )


def _config(args) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    if getattr(args, "gamma", None) is not None:
        overrides["gamma"] = args.gamma
    if getattr(args, "k", None) is not None:
        overrides["k"] = args.k
    if getattr(args, "srt_mode", None) is not None:
        value = args.srt_mode
        overrides["srt_mode"] = SrtSelectionMode.parse(int(value) if value.isdigit() else value)
    if getattr(args, "mct_strategy", None) is not None:
        overrides["mct_strategy"] = args.mct_strategy
    if getattr(args, "tau", None) is not None:
        overrides["tau_percent"] = args.tau
    if getattr(args, "stage_flags", None) is not None:
        overrides["stage_flags"] = StageFlags.parse(args.stage_flags)
    return config.override(**overrides)


def _source(args, knowledge_base: kb.KnowledgeBase):
    if getattr(args, "ranked_run", None):
        return kb.ingest_ranked_run(args.ranked_run, knowledge_base)
    return knowledge_base


def _k_values(raw: str) -> list:
    values = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        values.append(int(part) if part.isdigit() else part)
    return values


def cmd_ingest(args) -> int:
    count, digest = kb.write_bundle(args.docs, args.manifest, args.vectors, args.out)
    _emit(
        args,
        f"ingested {count} docs into {args.out} (digest {digest[:12]})",
        {"documents": count, "digest": digest, "out": str(args.out)},
    )
    return EXIT_OK


def cmd_retrieve(args) -> int:
    knowledge_base = kb.open_bundle(args.kb)
    queries = {q.query_id: q for q in kb.load_queries(args.queries)}
    if args.query_id not in queries:
        raise ValidationError(f"unknown query_id {args.query_id!r}")
    hits = knowledge_base.hits_for(queries[args.query_id], args.k)
    lines = [f"{h.rank:>3}  {h.similarity:+.6f}  {h.doc_id}" for h in hits]
    _emit(
        args,
        "\n".join(lines) if lines else "(no hits)",
        {"query_id": args.query_id, "hits": [h.__dict__ for h in hits]},
    )
    return EXIT_OK


def cmd_run(args) -> int:
    knowledge_base = kb.open_bundle(args.kb)
    queries = kb.load_queries(args.queries)
    source = _source(args, knowledge_base)
    config = _config(args)
    gateway = _gateway(args)
    matcher = _matcher(args)
    traces = run_batch(queries, source, config, gateway, args.parallelism, matcher)
    write_traces(traces, args.traces_out)
    failed = [t for t in traces if t.error is not None]
    rep = harness.evaluate(traces, queries, matcher, config) if traces else None
    accuracy = rep.overall if rep else 0.0
    _emit(
        args,
        f"wrote {len(traces)} traces to {args.traces_out}; "
        f"accuracy {accuracy:.4f}; {len(failed)} failed",
        {
            "traces": str(args.traces_out),
            "count": len(traces),
            "accuracy": accuracy,
            "failed": len(failed),
        },
    )
    if any(t.error_kind == "connection" for t in traces):
        logger.error("backend unreachable for %d queries", len(failed))
        return EXIT_BACKEND
    return EXIT_OK


def cmd_build(args) -> int:
    knowledge_base = kb.open_bundle(args.kb) if args.kb else None
    queries = kb.load_queries(args.queries)
    gateway = _gateway(args)
    matcher = _matcher(args)
    source = _source(args, knowledge_base) if knowledge_base else None

    if args.kind == "ret":
        dataset = forge.build_ret_dataset(queries, gateway, matcher)
    elif args.kind == "srt":
        if source is None:
            raise ValidationError("--kb is required for srt datasets")
        dataset = forge.build_srt_dataset(queries, source, args.k, gateway, matcher)
    else:
        if source is None:
            raise ValidationError("--kb is required for mct datasets")
        if args.srt_in:
            srt_dataset = forge.load_srt_dataset(args.srt_in)
        else:
            srt_dataset = forge.build_srt_dataset(queries, source, args.k, gateway, matcher)
        dataset = forge.build_mct_dataset(
            srt_dataset, queries, source, args.tau, gateway, seed=args.seed
        )

    forge.write_dataset(dataset, args.out)
    payload = {"kind": args.kind, "count": len(dataset), "out": str(args.out)}
    if args.sft_out:
        prompts = load_prompt_pack(args.prompts)
        exported = forge.export_sft(
            dataset,
            args.kind,
            prompts,
            args.sft_out,
            queries,
            source=source,
            sample_percent=args.sample_percent,
            seed=args.seed,
        )
        payload["sft_out"] = str(args.sft_out)
        payload["sft_count"] = exported
    _emit(
        args,
        f"wrote {len(dataset)} {args.kind} examples to {args.out}"
        + (f" (+{payload.get('sft_count', 0)} SFT lines)" if args.sft_out else ""),
        payload,
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    queries = kb.load_queries(args.queries)
    payloads = load_trace_payloads(args.traces)
    traces = [harness.trace_from_payload(p) for p in payloads]
    matcher = _matcher(args)
    rep = harness.evaluate(traces, queries, matcher)
    rows = [("all", rep)]
    paths = report.write_report_bundle(
        rows, args.out_dir, "evaluation", figure_kind="bar", figures=not args.no_figures
    )
    _emit(
        args,
        report.format_report_table(rows) + f"\nreport files in {args.out_dir}",
        {"overall": rep.overall, "splits": rep.splits, "counts": rep.counts, "paths": paths},
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    knowledge_base = kb.open_bundle(args.kb)
    queries = kb.load_queries(args.queries)
    source = _source(args, knowledge_base)
    gateway = _gateway(args)
    matcher = _matcher(args)
    config = _config(args)
    rows = harness.run_ablation(queries, source, gateway, config, matcher, args.parallelism)
    paths = report.write_report_bundle(
        rows, args.out_dir, "token-stage ablation", figure_kind="bar", figures=not args.no_figures
    )
    _emit(
        args,
        report.format_report_table(rows) + f"\nreport files in {args.out_dir}",
        {"rows": report.report_payload(rows)["rows"], "paths": paths},
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    knowledge_base = kb.open_bundle(args.kb)
    queries = kb.load_queries(args.queries)
    source = _source(args, knowledge_base)
    gateway = _gateway(args)
    matcher = _matcher(args)
    config = _config(args)
    if args.kind == "srt-k":
        sweep = {"srt_k": _k_values(args.k_values)}
    else:
        sweep = {
            "mct_strategy": [s.strip() for s in args.strategies.split(",") if s.strip()],
            "k": _k_values(args.k_values),
        }
    rows = harness.run_sweep(queries, source, gateway, config, matcher, sweep, args.parallelism)
    paths = report.write_report_bundle(
        rows, args.out_dir, f"{args.kind} sweep", figure_kind="line", figures=not args.no_figures
    )
    _emit(
        args,
        report.format_report_table(rows) + f"\nreport files in {args.out_dir}",
        {"rows": report.report_payload(rows)["rows"], "paths": paths},
    )
    return EXIT_OK


def cmd_serve_mock(args) -> int:
    oracle = MockOracle(OracleTruthTable.from_file(args.table))
    server = serve_mock(oracle, args.host, args.port)
    host, port = server.server_address[:2]
    logger.info("serving mock backend on http://%s:%s", host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_make_scenario(args) -> int:
    result = scenario.build_scenario(
        args.out, n_queries=args.queries, docs_per_query=args.docs_per_query, dim=args.dim
    )
    _emit(
        args,
        f"scenario with {result['n_queries']} queries / {result['n_docs']} docs in {args.out}",
        result,
    )
    return EXIT_OK


def _add_backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mock-table", help="truth table JSON for the in-process mock backend")
    p.add_argument("--backend-url", help=f"wire-protocol backend URL (or ${BACKEND_URL_ENV})")
    p.add_argument("--backend-timeout", type=float, default=DEFAULT_TIMEOUT)
    p.add_argument("--backend-retries", type=int, default=DEFAULT_RETRIES)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON; flags override it")
    p.add_argument("--gamma", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--srt-mode", help='"auto" or a fixed top-n integer')
    p.add_argument("--mct-strategy", choices=["filter", "merge", "rerank"])
    p.add_argument("--tau", type=float, help="contamination percentage for mct")
    p.add_argument("--stage-flags", help='comma list from {ret,srt,mct}, or "none"')


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--matcher", choices=sorted(_MATCHERS), default="relaxed")
    p.add_argument("--json", action="store_true", help="machine-readable stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kbrag")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate inputs and write an index bundle")
    p.add_argument("--docs", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("retrieve", help="query the index for one record")
    p.add_argument("--kb", required=True, help="bundle directory from ingest")
    p.add_argument("--queries", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("run", help="answer a query set end to end")
    p.add_argument("--kb", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--ranked-run", help="bypass vector retrieval with this ranked run")
    p.add_argument("--traces-out", required=True)
    p.add_argument("--parallelism", type=int, default=1)
    _add_backend_args(p)
    _add_config_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("build", help="construct training datasets")
    p.add_argument("--kind", choices=["ret", "srt", "mct"], required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--kb")
    p.add_argument("--ranked-run")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--tau", type=float, default=50.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--srt-in", help="existing d_srt.jsonl for mct construction")
    p.add_argument("--sft-out", help="also export prompt/target SFT JSONL here")
    p.add_argument("--prompts", help="prompt pack directory (default: shipped pack)")
    p.add_argument("--sample-percent", type=float, default=100.0)
    _add_backend_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("eval", help="score an existing trace file")
    p.add_argument("--traces", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the six-stage-combination ablation")
    p.add_argument("--kb", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--ranked-run")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    _add_backend_args(p)
    _add_config_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep selection depth and/or MCT strategy")
    p.add_argument("--kind", choices=["srt-k", "mct"], required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--ranked-run")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k-values", default="auto,1,5,10,15,20")
    p.add_argument("--strategies", default="merge,rerank,filter")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    _add_backend_args(p)
    _add_config_args(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve-mock", help="host a truth table behind the wire protocol")
    p.add_argument("--table", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8745)
    p.set_defaults(func=cmd_serve_mock)

    p = sub.add_parser("make-scenario", help="generate the synthetic mock benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--docs-per-query", type=int, default=5)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_make_scenario)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValidationError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except GatewayError as exc:
        logger.error("backend failure: %s", exc)
        return EXIT_BACKEND
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
