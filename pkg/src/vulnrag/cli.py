"""Command-line surface for the analysis pipeline.

Subcommands: curate, analyze, evaluate, metrics, report, compare. A TOML
config file mirroring RunConfig can seed any command; individual flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import date

from .catalog import (
    CurationFilter,
    NvdClient,
    curate_dataset,
    load_snapshot,
    save_snapshot,
)
from .errors import VulnragError
from .generation import Strategy
from .pipeline import (
    RunConfig,
    attribution_csv_path,
    compare_runs,
    load_run,
    recompute_metrics,
    reevaluate,
    run,
    validate_run_file,
)

logger = logging.getLogger(__name__)

# CLI spelling for the hyperlink source category
_SOURCE_ALIASES = {"refs": "hyperlinks", "references": "hyperlinks"}


def _parse_sources(spec: str) -> tuple[str, ...]:
    parts = [p.strip().lower() for p in spec.split(",") if p.strip()]
    return tuple(_SOURCE_ALIASES.get(p, p) for p in parts)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_toml(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "strategy", None):
        config.strategy = Strategy(args.strategy)
    if getattr(args, "evidence", None):
        config.evidence_sources = _parse_sources(args.evidence)
    if getattr(args, "retrieval_sources", None):
        config.retrieval_sources = _parse_sources(args.retrieval_sources)
    if getattr(args, "aqua", False):
        config.include_aqua_in_retrieval = True
    if getattr(args, "out", None):
        config.output_path = args.out
    for flag in (
        "chat_model",
        "embed_model",
        "chat_base_url",
        "embed_base_url",
        "cache_dir",
        "transcript_path",
        "mock_mode",
    ):
        value = getattr(args, flag, None)
        if value:
            setattr(config, flag, value)
    for flag in ("top_k", "chunk_size", "workers"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, flag, value)
    if getattr(args, "temperature", None) is not None:
        config.temperature = args.temperature
    return config


def _cmd_curate(args: argparse.Namespace) -> int:
    filt = CurationFilter(
        min_cvss=args.min_cvss,
        date_from=date.fromisoformat(args.date_from),
        date_to=date.fromisoformat(args.date_to),
        require_cwe=not args.no_require_cwe,
    )
    if args.snapshot:
        candidates = load_snapshot(args.snapshot)
    else:
        client = NvdClient(base_url=args.nvd_base_url) if args.nvd_base_url else NvdClient()
        candidates = client.iter_published(filt.date_from, filt.date_to)
    curated = curate_dataset(candidates, filt)
    save_snapshot(curated, args.out)
    print(f"curated {len(curated)} records -> {args.out}")
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    records = load_snapshot(args.dataset)
    if args.limit:
        records = records[: args.limit]
    result = run(records, config)
    validate_run_file(config.output_path)
    print(f"analyzed {len(result.reports)} CVEs ({len(result.failures)} failed) -> {config.output_path}")
    _print_counts(result.counts.to_dict())
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    out = args.out or args.run.replace(".jsonl", ".reeval.jsonl")
    result = reevaluate(args.run, out)
    print(f"re-evaluated {len(result.reports)} reports -> {out}")
    _print_counts(result.counts.to_dict())
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    out = args.out or args.run.replace(".jsonl", ".metrics.jsonl")
    recompute_metrics(args.run, out, measure=args.attribution)
    print(f"metrics recomputed -> {out}")
    if args.attribution != "off":
        print(f"attribution table -> {attribution_csv_path(out)}")
    return 0


def _print_counts(counts: dict) -> None:
    header = f"{'strategy':<14} {'question':<13} {'TP':>5} {'FP':>5} {'FN':>5} {'GR':>4} {'INV':>4} {'support':>8} {'TP%':>5}"
    print(header)
    print("-" * len(header))
    for row in counts.get("rows", []):
        print(
            f"{row['strategy']:<14} {row['question']:<13} {row['tp']:>5} {row['fp']:>5} "
            f"{row['fn']:>5} {row['guardrail']:>4} {row['invalid']:>4} {row['support']:>8} {row['tp_pct']:>4}%"
        )


def _cmd_report(args: argparse.Namespace) -> int:
    record = load_run(args.run)
    counts = record.counts.to_dict()
    if args.format == "json":
        print(
            json.dumps(
                {"counts": counts, "relevancy_table": record.relevancy_table},
                indent=2,
            )
        )
    elif args.format == "csv":
        print("strategy,question,tp,fp,fn,guardrail,invalid,support,tp_pct")
        for row in counts.get("rows", []):
            print(
                f"{row['strategy']},{row['question']},{row['tp']},{row['fp']},{row['fn']},"
                f"{row['guardrail']},{row['invalid']},{row['support']},{row['tp_pct']}"
            )
    else:
        _print_counts(counts)
        if record.relevancy_table:
            print("\nrelevancy (relevant/total per source):")
            for question, cells in sorted(record.relevancy_table.items()):
                cells_s = ", ".join(
                    f"{cat}: {c['relevant']}/{c['total']}" for cat, c in sorted(cells.items())
                )
                print(f"  {question:<13} {cells_s}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    result = compare_runs(load_run(args.a), load_run(args.b))
    print(f"run A: {result['a']['path']}")
    _print_counts(result["a"]["counts"])
    print(f"\nrun B: {result['b']['path']}")
    _print_counts(result["b"]["counts"])
    print(f"\nverdict flips: {len(result['flips'])}")
    for flip in result["flips"]:
        print(f"  {flip['cve']} {flip['question']}: {flip['a']} -> {flip['b']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vulnrag",
        description="Retrieval-augmented CVE analysis with self-critique provenance",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curate", help="build the analysis dataset from the NVD feed")
    p.add_argument("--from", dest="date_from", required=True, help="start date YYYY-MM-DD")
    p.add_argument("--to", dest="date_to", required=True, help="end date YYYY-MM-DD")
    p.add_argument("--min-cvss", type=float, default=9.0)
    p.add_argument("--no-require-cwe", action="store_true")
    p.add_argument("--snapshot", help="curate from a local snapshot instead of the live feed")
    p.add_argument("--nvd-base-url", help="override the NVD endpoint (fixtures)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_curate)

    p = sub.add_parser("analyze", help="run the full pipeline over a dataset")
    p.add_argument("--dataset", required=True, help="snapshot JSON from `curate`")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=None)
    p.add_argument("--evidence", help="comma list of nvd,cwe,refs,aqua")
    p.add_argument("--retrieval-sources", help="comma list of nvd,cwe,refs,aqua")
    p.add_argument("--aqua", action="store_true", help="include the Aqua page in retrieval")
    p.add_argument("--out", default=None)
    p.add_argument("--config", help="TOML file mirroring RunConfig")
    p.add_argument("--limit", type=int, default=0, help="only the first N records")
    p.add_argument("--chat-model", dest="chat_model")
    p.add_argument("--embed-model", dest="embed_model")
    p.add_argument("--chat-base-url", dest="chat_base_url")
    p.add_argument("--embed-base-url", dest="embed_base_url")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--mock-mode", dest="mock_mode", choices=["off", "record", "replay"])
    p.add_argument("--transcript", dest="transcript_path")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("evaluate", help="re-run only the evaluation stage of a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("metrics", help="recompute provenance metrics and attribution")
    p.add_argument("--run", required=True)
    p.add_argument("--attribution", choices=["embedding", "logprob", "off"], default="embedding")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("report", help="print the counts and relevancy tables of a run")
    p.add_argument("--run", required=True)
    p.add_argument("--format", choices=["table", "csv", "json"], default="table")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("compare", help="side-by-side verdict comparison of two runs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (VulnragError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
