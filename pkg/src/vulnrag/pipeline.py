"""End-to-end orchestration: curate -> ingest -> retrieve -> generate ->
evaluate -> metrics -> tally, with a JSONL audit trail.

Each CVE is processed in an isolated stage context (no conversational memory
between CVEs); its lines are appended to the run file as soon as it finishes,
so a crash loses at most the in-flight CVE. A final summary line carries the
counts table and relevancy table, and a sorted index file maps CVE ids to
line numbers.
"""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import jsonschema

from .catalog import CveRecord, validate_cve_id
from .errors import (
    ConfigError,
    CveSetMismatch,
    NoContent,
    NvdUnreachable,
    VerdictParseError,
    VulnragError,
)
from .evaluation import CountsTable, EvalVerdict, assemble_evidence, evaluate_response, tally
from .gateway import (
    DEFAULT_REFUSAL_PATTERNS,
    HashEmbeddingBackend,
    LlmGateway,
    OpenAIChatBackend,
    OpenAIEmbeddingBackend,
)
from .generation import Strategy, VulnReport, build_generation_context, generate_answers
from .ingest import WebIngestor
from .metrics import attribution, provenance_metrics, segment_alignment
from .prompts import PromptCatalog, default_catalog
from .retrieval import Question, UrlSummary, build_index, relevancy_counts, summarize_sources

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

SOURCE_KEYS = ("nvd", "cwe", "hyperlinks", "aqua")


def _now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


@dataclass
class RunConfig:
    """Everything needed to execute (or replay) one analysis run."""

    strategy: Strategy = Strategy.SUMMARIZING
    evidence_sources: tuple[str, ...] = ("nvd", "cwe", "hyperlinks")
    retrieval_sources: tuple[str, ...] = ("nvd", "cwe", "hyperlinks")
    include_aqua_in_retrieval: bool = False
    chat_model: str = "gpt-4o-mini"
    embed_model: str = "multi-qa-mpnet-base-dot-v1"
    chat_base_url: str = "http://localhost:8000"
    embed_base_url: str = ""  # empty -> deterministic hash embeddings
    top_k: int = 10
    chunk_size: int = 15_000
    temperature: float = 0.0
    max_output_tokens: int = 2048
    context_window_tokens: int = 128_000
    embed_window_tokens: int = 512
    mock_mode: str = "off"  # off | record | replay
    transcript_path: str = ""
    refusal_patterns: tuple[str, ...] = DEFAULT_REFUSAL_PATTERNS
    cache_dir: str = "./page_cache"
    cache_ttl_days: float = 30.0
    url_rewrite: dict = field(default_factory=dict)
    min_host_interval: float = 1.0
    output_path: str = "run.jsonl"
    workers: int = 4
    attribution_measure: str = "embedding"  # embedding | logprob | off
    compute_metrics: bool = True
    repair_retry: bool = False

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = Strategy(self.strategy)
        self.evidence_sources = tuple(s.lower() for s in self.evidence_sources)
        self.retrieval_sources = tuple(s.lower() for s in self.retrieval_sources)

    def validate(self) -> None:
        if self.mock_mode not in ("off", "record", "replay"):
            raise ConfigError(f"unknown mock_mode: {self.mock_mode}")
        if self.mock_mode in ("record", "replay") and not self.transcript_path:
            raise ConfigError(f"mock_mode={self.mock_mode} needs transcript_path")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.top_k < 1 or self.chunk_size < 1 or self.workers < 1:
            raise ConfigError("top_k, chunk_size, and workers must be >= 1")
        if self.attribution_measure not in ("embedding", "logprob", "off"):
            raise ConfigError(f"unknown attribution_measure: {self.attribution_measure}")
        for name, subset in (
            ("evidence_sources", self.evidence_sources),
            ("retrieval_sources", self.retrieval_sources),
        ):
            unknown = set(subset) - set(SOURCE_KEYS)
            if unknown:
                raise ConfigError(f"{name} has unknown keys: {sorted(unknown)}")
        if not self.evidence_sources:
            raise ConfigError("evidence_sources must be nonempty")
        if self.strategy is not Strategy.PROMPT_ONLY and not self.retrieval_sources:
            raise ConfigError("retrieval_sources must be nonempty for retrieval strategies")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["evidence_sources"] = list(self.evidence_sources)
        d["retrieval_sources"] = list(self.retrieval_sources)
        d["refusal_patterns"] = list(self.refusal_patterns)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kwargs = dict(d)
        for key in ("evidence_sources", "retrieval_sources", "refusal_patterns"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    @classmethod
    def from_toml(cls, path: str) -> "RunConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data)


def build_gateway(config: RunConfig) -> LlmGateway:
    """Construct the gateway the config describes (live, record, or replay)."""
    chat_backend = None
    embed_backend = None
    if config.mock_mode != "replay":
        chat_backend = OpenAIChatBackend(config.chat_base_url)
        embed_backend = (
            OpenAIEmbeddingBackend(config.embed_base_url)
            if config.embed_base_url
            else HashEmbeddingBackend()
        )
    return LlmGateway(
        chat_backend,
        embed_backend,
        chat_model=config.chat_model,
        embed_model=config.embed_model,
        context_window_tokens=config.context_window_tokens,
        embed_window_tokens=config.embed_window_tokens,
        refusal_patterns=tuple(config.refusal_patterns),
        mode=config.mock_mode,
        transcript_path=config.transcript_path or None,
    )


@dataclass
class RunRecord:
    """In-memory view of one run; the JSONL file is the durable form."""

    config: dict
    path: str
    prompt_catalog_hash: str = ""
    reports: list[VulnReport] = field(default_factory=list)
    verdict_lines: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    counts: CountsTable = field(default_factory=CountsTable)
    relevancy_table: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    report_lines: list[dict] = field(default_factory=list)
    eval_verdicts: list[EvalVerdict] = field(default_factory=list)
    invalids: list[dict] = field(default_factory=list)

    def cve_ids(self) -> set[str]:
        ids = {r.cve for r in self.reports}
        ids.update(f["cve"] for f in self.failures)
        return ids

    def verdict_map(self) -> dict[tuple[str, str], str]:
        return {(v["cve"], v["question"]): v["value"] for v in self.verdict_lines}


class _RunWriter:
    """Serialized JSONL appends; one CVE's lines stay contiguous."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        self._fh = open(path, "w", encoding="utf-8")
        self._line_no = 0
        self.cve_lines: dict[str, list[int]] = {}

    def write(self, lines: list[dict], cve: str | None = None) -> None:
        with self._lock:
            for obj in lines:
                self._fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
                self._line_no += 1
                if cve is not None:
                    self.cve_lines.setdefault(cve, []).append(self._line_no)
            self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class _CveWorker:
    """All per-CVE stage logic; every CVE gets a fresh stage context."""

    def __init__(
        self,
        config: RunConfig,
        gateway: LlmGateway,
        ingestor: WebIngestor,
        prompts: PromptCatalog,
        clock: Callable[[], float],
    ):
        self.config = config
        self.gateway = gateway
        self.ingestor = ingestor
        self.prompts = prompts
        self.clock = clock

    def process(self, record: CveRecord) -> dict:
        """Returns {"lines": [...], "report": VulnReport|None, "verdicts": [...],
        "invalids": [...], "summaries": [...], "attribution_rows": [...]}."""
        config = self.config
        cve = record.id.value
        t0 = self.clock()
        out = {
            "lines": [],
            "report": None,
            "verdicts": [],
            "invalids": [],
            "summaries": [],
            "attribution_rows": [],
        }
        try:
            sources = self.ingestor.assemble_source_set(
                record, include_aqua=config.include_aqua_in_retrieval
            )
        except NvdUnreachable as exc:
            out["lines"].append({"type": "cve_failed", "cve": cve, "error": str(exc)})
            return out

        summaries: list[UrlSummary] = []
        try:
            if config.strategy is Strategy.PROMPT_ONLY:
                context, ctx_sources = "", []
            elif config.strategy is Strategy.CHUNKING:
                docs = sources.select(config.retrieval_sources)
                index = build_index(docs, self.gateway, config.chunk_size)
                context, ctx_sources = build_generation_context(
                    Strategy.CHUNKING,
                    cve=cve,
                    index=index,
                    k=config.top_k,
                    gateway=self.gateway,
                )
            else:
                for question in Question:
                    summaries.extend(
                        summarize_sources(
                            sources,
                            cve,
                            question,
                            gateway=self.gateway,
                            prompts=self.prompts,
                            model_id=config.chat_model,
                            categories=config.retrieval_sources
                            + (("aqua",) if config.include_aqua_in_retrieval else ()),
                        )
                    )
                out["summaries"] = summaries
                context, ctx_sources = build_generation_context(
                    Strategy.SUMMARIZING, cve=cve, summaries=summaries
                )
        except VulnragError as exc:
            out["lines"].append(
                {"type": "cve_failed", "cve": cve, "error": f"{type(exc).__name__}: {exc}"}
            )
            return out

        try:
            report = generate_answers(
                cve,
                context,
                config.strategy,
                gateway=self.gateway,
                prompts=self.prompts,
                model_id=config.chat_model,
                context_sources=ctx_sources,
                temperature=config.temperature,
                max_output_tokens=config.max_output_tokens,
                want_logprobs=(config.attribution_measure == "logprob"),
            )
        except VulnragError as exc:
            out["lines"].append(
                {"type": "cve_failed", "cve": cve, "error": f"{type(exc).__name__}: {exc}"}
            )
            return out

        out["report"] = report
        report_line = {
            "type": "report",
            "cve": cve,
            "report": report.to_dict(),
            "record": record.to_dict(),
            "summaries": [s.to_dict() for s in summaries],
            # per-URL fetch audit, including the cache timestamp
            "sources": [
                {
                    "category": category,
                    "url": page.url,
                    "status": page.status,
                    "reason": page.reason,
                    "fetched_at": page.fetched_at,
                    "content_type": page.content_type,
                }
                for category, page in sources.labeled_pages()
            ],
            "duration_s": round(self.clock() - t0, 3),
        }
        out["lines"].append(report_line)

        for question in Question:
            out["lines"].append(self._evaluate_question(record, sources, report, question, out))
        return out

    def _evaluate_question(
        self,
        record: CveRecord,
        sources,
        report: VulnReport,
        question: Question,
        out: dict,
    ) -> dict:
        config = self.config
        cve = record.id.value
        line = {
            "type": "verdict",
            "cve": cve,
            "question": question.value,
            "value": "",
            "rationale": "",
            "provenance": {"response": "", "context": ""},
            "evidence_sources": [],
            "metrics": None,
            "attribution": None,
            "aligned": None,
            "invalid_reason": None,
        }
        if report.refused:
            line["value"] = "guardrail"
            return line

        answer = report.answer(question)
        if not answer.strip():
            line["value"] = "invalid"
            line["invalid_reason"] = "empty answer for this question"
            out["invalids"].append({"cve": cve, "question": question.value})
            return line

        try:
            evidence, used_urls, truncated = assemble_evidence(
                sources,
                cve,
                question,
                k=config.top_k,
                evidence_sources=config.evidence_sources,
                gateway=self.gateway,
                chunk_size=config.chunk_size,
            )
        except NoContent as exc:
            line["value"] = "invalid"
            line["invalid_reason"] = f"no evidence content: {exc}"
            out["invalids"].append({"cve": cve, "question": question.value})
            return line
        line["evidence_sources"] = used_urls
        line["evidence_truncated"] = truncated

        try:
            verdict = evaluate_response(
                answer,
                evidence,
                cve,
                question,
                gateway=self.gateway,
                prompts=self.prompts,
                model_id=config.chat_model,
                repair_retry=config.repair_retry,
            )
        except VerdictParseError as exc:
            line["value"] = "invalid"
            line["invalid_reason"] = str(exc)
            line["raw_output"] = exc.raw_output
            out["invalids"].append({"cve": cve, "question": question.value})
            return line
        except VulnragError as exc:
            line["value"] = "invalid"
            line["invalid_reason"] = f"{type(exc).__name__}: {exc}"
            out["invalids"].append({"cve": cve, "question": question.value})
            return line

        out["verdicts"].append(verdict)
        line["value"] = verdict.value
        line["rationale"] = verdict.rationale
        line["provenance"] = {
            "response": verdict.provenance_response_segment,
            "context": verdict.provenance_context_segment,
        }

        if config.compute_metrics:
            pm = provenance_metrics(
                verdict.provenance_response_segment,
                verdict.provenance_context_segment,
                gateway=self.gateway,
            )
            line["metrics"] = pm.to_dict()
            line["aligned"] = segment_alignment(verdict.provenance_response_segment, answer)

        if (
            config.strategy is Strategy.SUMMARIZING
            and config.attribution_measure != "off"
            and out["summaries"]
        ):
            base_lps = report.token_logprobs or []
            vec = attribution(
                out["summaries"],
                question,
                answer,
                cve,
                gateway=self.gateway,
                prompts=self.prompts,
                model_id=config.chat_model,
                measure=config.attribution_measure,
                base_logprob_mean=(sum(base_lps) / len(base_lps)) if base_lps else None,
            )
            line["attribution"] = vec.to_dict()
            for url, score in vec.scores.items():
                out["attribution_rows"].append(
                    {"cve": cve, "question": question.value, "url": url, "score": score}
                )
        return line


def run(
    entries: Sequence[CveRecord | str],
    config: RunConfig,
    *,
    gateway: LlmGateway | None = None,
    ingestor: WebIngestor | None = None,
    source=None,
    prompts: PromptCatalog | None = None,
    clock: Callable[[], float] | None = None,
    now: Callable[[], str] | None = None,
) -> RunRecord:
    """Execute all stages for every CVE; per-CVE failures never abort the batch.

    entries may mix CveRecord objects and CVE-id strings (ids are resolved
    through `source`, an NvdClient or SnapshotCatalog). Injected gateway /
    ingestor / prompts override the config-built ones (tests use this).
    """
    config.validate()
    prompts = prompts or default_catalog()
    gateway = gateway or build_gateway(config)
    ingestor = ingestor or WebIngestor(
        config.cache_dir,
        ttl_days=config.cache_ttl_days,
        url_rewrite=config.url_rewrite,
        min_host_interval=config.min_host_interval,
    )
    clock = clock or time.monotonic
    now = now or _now_iso

    records: list[CveRecord] = []
    resolve_failures: list[dict] = []
    for entry in entries:
        if isinstance(entry, CveRecord):
            records.append(entry)
            continue
        if source is None:
            raise ConfigError("CVE ids were given but no catalog source to resolve them")
        try:
            records.append(source.fetch_cve(validate_cve_id(entry)))
        except VulnragError as exc:
            resolve_failures.append(
                {"type": "cve_failed", "cve": str(entry), "error": f"{type(exc).__name__}: {exc}"}
            )

    catalog_hash = prompts.catalog_hash()
    started_at = now()
    t_start = clock()
    writer = _RunWriter(config.output_path)
    writer.write(
        [
            {
                "type": "run_meta",
                "schema_version": SCHEMA_VERSION,
                "config": config.to_dict(),
                "prompt_catalog_hash": catalog_hash,
                "started_at": started_at,
            }
        ]
    )

    record_out = RunRecord(
        config=config.to_dict(), path=config.output_path, prompt_catalog_hash=catalog_hash
    )
    for failure in resolve_failures:
        writer.write([failure], cve=failure["cve"])
        record_out.failures.append(failure)
    worker = _CveWorker(config, gateway, ingestor, prompts, clock)
    all_summaries: list[UrlSummary] = []
    attribution_rows: list[dict] = []

    def handle(result: dict) -> None:
        cve = None
        for line in result["lines"]:
            cve = line.get("cve", cve)
        writer.write(result["lines"], cve=cve)
        if result["report"] is not None:
            record_out.reports.append(result["report"])
            record_out.report_lines.append(result["lines"][0])
        for line in result["lines"]:
            if line["type"] == "verdict":
                record_out.verdict_lines.append(line)
            elif line["type"] == "cve_failed":
                record_out.failures.append(line)
        record_out.eval_verdicts.extend(result["verdicts"])
        record_out.invalids.extend(result["invalids"])
        all_summaries.extend(result["summaries"])
        attribution_rows.extend(result["attribution_rows"])

    try:
        if config.workers == 1:
            for rec in records:
                handle(worker.process(rec))
        else:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                futures = {pool.submit(worker.process, rec): rec for rec in records}
                for fut in as_completed(futures):
                    handle(fut.result())

        counts = tally(record_out.eval_verdicts, record_out.reports, record_out.invalids)
        record_out.counts = counts
        record_out.relevancy_table = relevancy_counts(all_summaries)
        finished_at = now()
        record_out.timing = {
            "started_at": started_at,
            "finished_at": finished_at,
            "duration_s": round(clock() - t_start, 3),
        }
        writer.write(
            [
                {
                    "type": "run_summary",
                    "counts": counts.to_dict(),
                    "relevancy_table": record_out.relevancy_table,
                    "timing": record_out.timing,
                }
            ]
        )
    finally:
        writer.close()

    index_path = Path(config.output_path).with_suffix(".index.json")
    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(
            {cve: writer.cve_lines[cve] for cve in sorted(writer.cve_lines)},
            fh,
            indent=2,
        )
        fh.write("\n")

    if attribution_rows:
        write_attribution_csv(attribution_rows, attribution_csv_path(config.output_path))
    return record_out


def reevaluate(
    run_path: str,
    out_path: str,
    *,
    gateway: LlmGateway | None = None,
    ingestor: WebIngestor | None = None,
    prompts: PromptCatalog | None = None,
    clock: Callable[[], float] | None = None,
    now: Callable[[], str] | None = None,
) -> RunRecord:
    """Re-run only the evaluation stage over an existing run's reports.

    Sources come back through the page cache (warm on a replayable run), the
    stored answers are re-critiqued, and a fresh run file is written.
    """
    previous = load_run(run_path)
    config = RunConfig.from_dict(previous.config)
    config.output_path = out_path
    prompts = prompts or default_catalog()
    gateway = gateway or build_gateway(config)
    ingestor = ingestor or WebIngestor(
        config.cache_dir,
        ttl_days=config.cache_ttl_days,
        url_rewrite=config.url_rewrite,
        min_host_interval=config.min_host_interval,
    )
    clock = clock or time.monotonic
    now = now or _now_iso
    worker = _CveWorker(config, gateway, ingestor, prompts, clock)

    started_at = now()
    t_start = clock()
    writer = _RunWriter(out_path)
    writer.write(
        [
            {
                "type": "run_meta",
                "schema_version": SCHEMA_VERSION,
                "config": config.to_dict(),
                "prompt_catalog_hash": prompts.catalog_hash(),
                "started_at": started_at,
            }
        ]
    )
    record_out = RunRecord(
        config=config.to_dict(), path=out_path, prompt_catalog_hash=prompts.catalog_hash()
    )
    all_summaries: list[UrlSummary] = []
    try:
        for line in previous.report_lines:
            record = CveRecord.from_dict(line["record"])
            report = VulnReport.from_dict(line["report"])
            summaries = [UrlSummary.from_dict(d) for d in line.get("summaries", [])]
            out = {
                "lines": [dict(line, duration_s=0.0)],
                "report": report,
                "verdicts": [],
                "invalids": [],
                "summaries": summaries,
                "attribution_rows": [],
            }
            try:
                sources = ingestor.assemble_source_set(
                    record, include_aqua=config.include_aqua_in_retrieval
                )
            except NvdUnreachable as exc:
                writer.write(
                    [{"type": "cve_failed", "cve": record.id.value, "error": str(exc)}],
                    cve=record.id.value,
                )
                record_out.failures.append(
                    {"type": "cve_failed", "cve": record.id.value, "error": str(exc)}
                )
                continue
            for question in Question:
                out["lines"].append(
                    worker._evaluate_question(record, sources, report, question, out)
                )
            writer.write(out["lines"], cve=record.id.value)
            record_out.reports.append(report)
            record_out.report_lines.append(out["lines"][0])
            for l in out["lines"]:
                if l["type"] == "verdict":
                    record_out.verdict_lines.append(l)
            record_out.eval_verdicts.extend(out["verdicts"])
            record_out.invalids.extend(out["invalids"])
            all_summaries.extend(summaries)

        counts = tally(record_out.eval_verdicts, record_out.reports, record_out.invalids)
        record_out.counts = counts
        record_out.relevancy_table = relevancy_counts(all_summaries)
        record_out.timing = {
            "started_at": started_at,
            "finished_at": now(),
            "duration_s": round(clock() - t_start, 3),
        }
        writer.write(
            [
                {
                    "type": "run_summary",
                    "counts": counts.to_dict(),
                    "relevancy_table": record_out.relevancy_table,
                    "timing": record_out.timing,
                }
            ]
        )
    finally:
        writer.close()
    return record_out


def recompute_metrics(
    run_path: str,
    out_path: str,
    *,
    measure: str = "embedding",
    gateway: LlmGateway | None = None,
    prompts: PromptCatalog | None = None,
) -> RunRecord:
    """Recompute provenance metrics (and optionally attribution) over a run.

    Verdicts are never touched: metrics and attribution have no feedback path
    into evaluation. measure="off" clears attribution entries.
    """
    if measure not in ("embedding", "logprob", "off"):
        raise ConfigError(f"unknown attribution measure: {measure}")
    previous = load_run(run_path)
    config = RunConfig.from_dict(previous.config)
    prompts = prompts or default_catalog()
    gateway = gateway or build_gateway(config)

    reports_by_cve = {r.cve: r for r in previous.reports}
    summaries_by_cve: dict[str, list[UrlSummary]] = {
        line["cve"]: [UrlSummary.from_dict(d) for d in line.get("summaries", [])]
        for line in previous.report_lines
    }
    attribution_rows: list[dict] = []

    writer = _RunWriter(out_path)
    try:
        with open(run_path, encoding="utf-8") as fh:
            for raw in fh:
                raw = raw.strip()
                if not raw:
                    continue
                obj = json.loads(raw)
                if obj.get("type") == "verdict" and obj["value"] in ("TP", "FP", "FN"):
                    report = reports_by_cve.get(obj["cve"])
                    question = Question(obj["question"])
                    pm = provenance_metrics(
                        obj["provenance"]["response"],
                        obj["provenance"]["context"],
                        gateway=gateway,
                    )
                    obj["metrics"] = pm.to_dict()
                    if report is not None:
                        obj["aligned"] = segment_alignment(
                            obj["provenance"]["response"], report.answer(question)
                        )
                    summaries = summaries_by_cve.get(obj["cve"], [])
                    if measure == "off" or not summaries or report is None:
                        obj["attribution"] = None
                    else:
                        base_lps = report.token_logprobs or []
                        vec = attribution(
                            summaries,
                            question,
                            report.answer(question),
                            obj["cve"],
                            gateway=gateway,
                            prompts=prompts,
                            model_id=config.chat_model,
                            measure=measure,
                            base_logprob_mean=(
                                sum(base_lps) / len(base_lps) if base_lps else None
                            ),
                        )
                        obj["attribution"] = vec.to_dict()
                        for url, score in vec.scores.items():
                            attribution_rows.append(
                                {
                                    "cve": obj["cve"],
                                    "question": question.value,
                                    "url": url,
                                    "score": score,
                                }
                            )
                writer.write([obj], cve=obj.get("cve"))
    finally:
        writer.close()
    if attribution_rows:
        write_attribution_csv(attribution_rows, attribution_csv_path(out_path))
    return load_run(out_path)


def attribution_csv_path(run_path: str) -> str:
    return str(Path(run_path).with_suffix(".attribution.csv"))


def write_attribution_csv(rows: list[dict], path: str) -> None:
    """Flat (cve, question, url, score) table for external plotting."""
    rows = sorted(rows, key=lambda r: (r["cve"], r["question"], r["url"]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["cve", "question", "url", "score"])
        writer.writeheader()
        writer.writerows(rows)


def load_run(path: str) -> RunRecord:
    """Rebuild a RunRecord view from a run JSONL file."""
    config: dict = {}
    record = None
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            obj = json.loads(raw)
            kind = obj.get("type")
            if kind == "run_meta":
                config = obj.get("config", {})
                record = RunRecord(
                    config=config,
                    path=path,
                    prompt_catalog_hash=obj.get("prompt_catalog_hash", ""),
                )
            elif record is None:
                raise ValueError(f"{path} does not start with a run_meta line")
            elif kind == "report":
                record.reports.append(VulnReport.from_dict(obj["report"]))
                record.report_lines.append(obj)
            elif kind == "verdict":
                record.verdict_lines.append(obj)
            elif kind == "cve_failed":
                record.failures.append(obj)
            elif kind == "run_summary":
                record.relevancy_table = obj.get("relevancy_table", {})
                record.timing = obj.get("timing", {})
                counts = CountsTable()
                for row in obj.get("counts", {}).get("rows", []):
                    cell = counts.row(row["strategy"], row["question"])
                    cell.tp = row["tp"]
                    cell.fp = row["fp"]
                    cell.fn = row["fn"]
                    cell.guardrail = row["guardrail"]
                    cell.invalid = row["invalid"]
                    cell.support = row["support"]
                record.counts = counts
    if record is None:
        raise ValueError(f"{path} is empty")
    return record


def compare_runs(a: RunRecord, b: RunRecord) -> dict:
    """Side-by-side counts plus per-CVE verdict flips; same CVE set required."""
    if a.cve_ids() != b.cve_ids():
        only_a = sorted(a.cve_ids() - b.cve_ids())
        only_b = sorted(b.cve_ids() - a.cve_ids())
        raise CveSetMismatch(f"cve sets differ (only in a: {only_a}, only in b: {only_b})")
    va, vb = a.verdict_map(), b.verdict_map()
    flips = [
        {"cve": cve, "question": q, "a": va[(cve, q)], "b": vb[(cve, q)]}
        for (cve, q) in sorted(set(va) & set(vb))
        if va[(cve, q)] != vb[(cve, q)]
    ]
    return {
        "a": {"path": a.path, "counts": a.counts.to_dict()},
        "b": {"path": b.path, "counts": b.counts.to_dict()},
        "flips": flips,
    }


# -- published line schema ----------------------------------------------------

_PROVENANCE_SCHEMA = {
    "type": "object",
    "properties": {"response": {"type": "string"}, "context": {"type": "string"}},
    "required": ["response", "context"],
}

LINE_SCHEMAS: dict[str, dict] = {
    "run_meta": {
        "type": "object",
        "properties": {
            "type": {"const": "run_meta"},
            "schema_version": {"type": "integer"},
            "config": {"type": "object"},
            "prompt_catalog_hash": {"type": "string"},
            "started_at": {"type": "string"},
        },
        "required": ["type", "schema_version", "config", "prompt_catalog_hash"],
    },
    "report": {
        "type": "object",
        "properties": {
            "type": {"const": "report"},
            "cve": {"type": "string", "pattern": r"^CVE-\d{4}-\d{4,}$"},
            "report": {
                "type": "object",
                "required": [
                    "cve",
                    "strategy",
                    "exploitation_answer",
                    "mitigation_answer",
                    "context_chars",
                    "context_sources",
                    "refused",
                ],
            },
            "record": {"type": "object"},
            "summaries": {"type": "array"},
            "sources": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["category", "url", "status", "fetched_at"],
                },
            },
            "duration_s": {"type": "number"},
        },
        "required": ["type", "cve", "report", "record", "summaries"],
    },
    "verdict": {
        "type": "object",
        "properties": {
            "type": {"const": "verdict"},
            "cve": {"type": "string", "pattern": r"^CVE-\d{4}-\d{4,}$"},
            "question": {"enum": ["exploitation", "mitigation"]},
            "value": {"enum": ["TP", "FP", "FN", "invalid", "guardrail"]},
            "rationale": {"type": "string"},
            "provenance": _PROVENANCE_SCHEMA,
            "evidence_sources": {"type": "array", "items": {"type": "string"}},
            "metrics": {
                "type": ["object", "null"],
                "properties": {
                    "rouge_l": {"type": "number", "minimum": 0, "maximum": 1},
                    "cosine": {"type": "number", "minimum": -1, "maximum": 1},
                    "truncated": {"type": "boolean"},
                },
            },
            "attribution": {
                "type": ["object", "null"],
                "properties": {
                    "measure": {"type": "string"},
                    "normalized": {"type": "boolean"},
                    "scores": {"type": "object"},
                },
            },
            "aligned": {"type": ["boolean", "null"]},
            "invalid_reason": {"type": ["string", "null"]},
        },
        "required": [
            "type",
            "cve",
            "question",
            "value",
            "rationale",
            "provenance",
            "evidence_sources",
            "metrics",
        ],
    },
    "cve_failed": {
        "type": "object",
        "properties": {
            "type": {"const": "cve_failed"},
            "cve": {"type": "string"},
            "error": {"type": "string"},
        },
        "required": ["type", "cve", "error"],
    },
    "run_summary": {
        "type": "object",
        "properties": {
            "type": {"const": "run_summary"},
            "counts": {"type": "object"},
            "relevancy_table": {"type": "object"},
            "timing": {"type": "object"},
        },
        "required": ["type", "counts", "relevancy_table", "timing"],
    },
}


def validate_run_file(path: str) -> int:
    """Validate every line against the published schema; returns line count."""
    count = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            obj = json.loads(raw)
            kind = obj.get("type")
            if kind not in LINE_SCHEMAS:
                raise ValueError(f"{path}:{lineno}: unknown line type {kind!r}")
            jsonschema.validate(obj, LINE_SCHEMAS[kind])
            count += 1
    return count


def support_conservation(record: RunRecord) -> bool:
    """tp+fp+fn+guardrail+invalid must equal 2 x non-failed CVEs."""
    total = sum(
        row.tp + row.fp + row.fn + row.guardrail + row.invalid
        for row in record.counts.rows.values()
    )
    return total == 2 * len(record.reports)
