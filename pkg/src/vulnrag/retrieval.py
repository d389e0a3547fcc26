"""Retrieval strategies: character chunking with embedding top-k, and
per-URL relevancy-gated summarization.

Chunks are raw character slices (no overlap, no sentence alignment) so a
document always reassembles exactly from its chunks. The summarizing path
asks the model, per URL and per question, whether the page is relevant and,
only if so, for a question-conditioned summary; irrelevant pages carry the
literal summary "NONE".
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    DimensionMismatch,
    NoContent,
    PageFailed,
    ZeroVector,
)
from .gateway import ChatRequest, LlmGateway
from .ingest import PageContent, SourceSet
from .prompts import PromptCatalog

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 15_000
DEFAULT_TOP_K = 10

NO_SUMMARY = "NONE"


class Question(str, Enum):
    EXPLOITATION = "exploitation"
    MITIGATION = "mitigation"

    @property
    def relevancy_template(self) -> str:
        return f"relevancy_{self.value}"


@dataclass(frozen=True)
class Chunk:
    source_url: str
    seq: int
    text: str


@dataclass
class ChunkIndex:
    """Embedded chunks plus the first-appearance rank of each source URL."""

    entries: list[tuple[Chunk, np.ndarray]] = field(default_factory=list)
    source_order: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, chunk: Chunk, vector: np.ndarray) -> None:
        if self.entries and self.entries[0][1].shape != vector.shape:
            raise DimensionMismatch("index vectors must share one dimension")
        if chunk.source_url not in self.source_order:
            self.source_order[chunk.source_url] = len(self.source_order)
        self.entries.append((chunk, vector))


@dataclass
class UrlSummary:
    """Per-URL, per-question relevancy decision plus conditioned summary."""

    source_url: str
    cve: str
    question: Question
    relevant: bool
    summary: str
    category: str = "hyperlinks"  # nvd | cwe | aqua | hyperlinks
    parse_warning: str | None = None

    def __post_init__(self):
        if not self.relevant:
            if self.summary != NO_SUMMARY:
                raise ValueError("irrelevant summaries must carry the literal NONE")
        else:
            if not self.summary or self.summary == NO_SUMMARY:
                raise ValueError("relevant summaries must be nonempty and not NONE")

    def to_dict(self) -> dict:
        return {
            "source_url": self.source_url,
            "cve": self.cve,
            "question": self.question.value,
            "relevant": self.relevant,
            "summary": self.summary,
            "category": self.category,
            "parse_warning": self.parse_warning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UrlSummary":
        return cls(
            source_url=d["source_url"],
            cve=d["cve"],
            question=Question(d["question"]),
            relevant=bool(d["relevant"]),
            summary=d["summary"],
            category=d.get("category", "hyperlinks"),
            parse_warning=d.get("parse_warning"),
        )


def split_into_chunks(text: str, chunk_size: int = DEFAULT_CHUNK_SIZE, source_url: str = "") -> list[Chunk]:
    """Contiguous, non-overlapping character slices in order; "" -> []."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    return [
        Chunk(source_url=source_url, seq=i, text=text[start : start + chunk_size])
        for i, start in enumerate(range(0, len(text), chunk_size))
    ]


def cosine_similarity(u, v) -> float:
    """dot(u, v) / (|u| * |v|); raises on mismatched dims or zero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"{u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine similarity is undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


def build_index(
    sources: SourceSet | list[tuple[str, str]],
    gateway: LlmGateway,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> ChunkIndex:
    """Chunk and embed every Ok page; failed pages contribute nothing."""
    if isinstance(sources, SourceSet):
        docs = [(p.url, p.text) for p in sources.pages() if p.ok]
    else:
        docs = list(sources)
    docs = [(url, text) for url, text in docs if text]
    if not docs:
        raise NoContent("no page content available to index")
    index = ChunkIndex()
    for url, text in docs:
        for chunk in split_into_chunks(text, chunk_size, source_url=url):
            vec = gateway.embed(chunk.text)
            index.add(chunk, vec.values)
    if not index.entries:
        raise NoContent("no page content available to index")
    return index


def top_k(
    index: ChunkIndex,
    query: str,
    k: int = DEFAULT_TOP_K,
    *,
    gateway: LlmGateway,
) -> list[Chunk]:
    """min(k, |index|) chunks by descending cosine similarity to the query;
    ties break by (source order, seq)."""
    if not index.entries:
        raise NoContent("cannot search an empty index")
    if k < 1:
        raise ValueError("k must be >= 1")
    qvec = gateway.embed(query).values
    ranked = sorted(
        index.entries,
        key=lambda entry: (
            -cosine_similarity(qvec, entry[1]),
            index.source_order[entry[0].source_url],
            entry[0].seq,
        ),
    )
    return [chunk for chunk, _ in ranked[:k]]


_ANSWER_LINE_RE = re.compile(r"answer\s*[:\-]", re.IGNORECASE)
_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_SUMMARY_RE = re.compile(r"summary\s*:", re.IGNORECASE)


def _parse_relevancy_output(text: str) -> tuple[bool, str, str | None]:
    """Parse Step-1 Yes/No and Step-2 summary from model output.

    Returns (relevant, summary, warning). Missing or malformed markers are
    conservative: the page is treated as irrelevant.
    """
    answer = None
    answer_end = 0
    for m in _ANSWER_LINE_RE.finditer(text):
        line_end = text.find("\n", m.end())
        line_end = len(text) if line_end == -1 else line_end
        token = _YES_NO_RE.search(text[m.end() : line_end])
        if token:
            answer = token.group(1).lower()
            answer_end = line_end
            break
    if answer is None:
        return False, NO_SUMMARY, "no Answer marker in relevancy output"
    if answer == "no":
        return False, NO_SUMMARY, None

    m = _SUMMARY_RE.search(text, answer_end)
    summary = text[m.end() :] if m else text[answer_end:]
    summary = summary.strip()
    if not summary or summary.upper() == NO_SUMMARY:
        return False, NO_SUMMARY, "relevant answer but empty summary"
    return True, summary, None


def summarize_url(
    page: PageContent,
    cve: str,
    question: Question,
    *,
    gateway: LlmGateway,
    prompts: PromptCatalog,
    model_id: str | None = None,
    category: str = "hyperlinks",
) -> UrlSummary:
    """Relevancy-gate one page and summarize it for the given question.

    Pages larger than the prompt window are summarized in window-sized
    segments and the relevant segment summaries concatenated.
    """
    if not page.ok:
        raise PageFailed(f"cannot summarize failed page {page.url} ({page.reason})")
    model_id = model_id or gateway.chat_model

    template_name = question.relevancy_template
    overhead = prompts.render(template_name, {"cve_id": cve, "content": ""}, model_id)
    budget = gateway.context_budget_chars(
        overhead_tokens=gateway.estimate_tokens(overhead), output_tokens=2048
    )
    segments = [c.text for c in split_into_chunks(page.text, max(budget, 1))] or [""]

    relevant = False
    parts: list[str] = []
    warnings: list[str] = []
    if len(segments) > 1:
        warnings.append(f"page split into {len(segments)} prompt-window segments")
    for segment in segments:
        prompt = prompts.render(
            template_name, {"cve_id": cve, "content": segment}, model_id
        )
        req = ChatRequest(system="", user=prompt, model_id=model_id, role=template_name)
        resp = gateway.complete(req)
        if gateway.detect_refusal(resp.text):
            warnings.append("model refused the relevancy prompt")
            continue
        seg_relevant, seg_summary, warning = _parse_relevancy_output(resp.text)
        if warning:
            warnings.append(warning)
        if seg_relevant:
            relevant = True
            parts.append(seg_summary)

    summary = "\n".join(parts) if relevant else NO_SUMMARY
    return UrlSummary(
        source_url=page.url,
        cve=cve,
        question=question,
        relevant=relevant,
        summary=summary,
        category=category,
        parse_warning="; ".join(warnings) or None,
    )


def summarize_sources(
    sources: SourceSet,
    cve: str,
    question: Question,
    *,
    gateway: LlmGateway,
    prompts: PromptCatalog,
    model_id: str | None = None,
    categories: tuple[str, ...] | None = None,
) -> list[UrlSummary]:
    """One UrlSummary per Ok page, in NVD -> CWE -> Aqua -> hyperlinks order."""
    wanted = {c.lower() for c in categories} if categories else None
    summaries = []
    for category, page in sources.labeled_pages():
        if not page.ok or (wanted is not None and category not in wanted):
            continue
        summaries.append(
            summarize_url(
                page,
                cve,
                question,
                gateway=gateway,
                prompts=prompts,
                model_id=model_id,
                category=category,
            )
        )
    return summaries


def relevancy_counts(summaries: list[UrlSummary]) -> dict[str, dict[str, dict[str, int]]]:
    """Tally relevant/total per question and source category (run-report shape)."""
    table: dict[str, dict[str, dict[str, int]]] = {}
    for s in summaries:
        row = table.setdefault(s.question.value, {})
        cell = row.setdefault(s.category, {"relevant": 0, "total": 0})
        cell["total"] += 1
        if s.relevant:
            cell["relevant"] += 1
    return table
