"""Self-critique stage: evidence assembly, verdict generation and parsing,
and result tallies.

Each generated answer is judged against chunked evidence from the configured
sources and must come back as exactly one of TP (supported), FP (hallucinated
content), or FN (omitted evidence), with a rationale and a paired
response/context provenance citation. Parsing is deliberately forgiving about
markdown, quoting, and label case, but refuses to fabricate a verdict:
conflicting or missing values raise instead.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .errors import NoContent, VerdictParseError
from .gateway import ChatRequest, LlmGateway
from .generation import SOURCE_DELIMITER, Strategy, VulnReport
from .ingest import SourceSet
from .prompts import PromptCatalog
from .retrieval import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_TOP_K,
    ChunkIndex,
    Question,
    split_into_chunks,
    top_k,
)

logger = logging.getLogger(__name__)

VERDICT_VALUES = ("TP", "FP", "FN")

FP_CONTEXT_SENTINEL = "No corresponding information in context"


@dataclass
class EvalVerdict:
    """One self-critique outcome for a (CVE, question) pair."""

    cve: str
    question: Question
    value: str  # TP | FP | FN
    rationale: str
    provenance_response_segment: str
    provenance_context_segment: str
    raw_output: str = ""

    def __post_init__(self):
        if self.value not in VERDICT_VALUES:
            raise ValueError(f"verdict value must be one of {VERDICT_VALUES}")
        if not self.provenance_response_segment or not self.provenance_context_segment:
            raise ValueError("both provenance segments must be nonempty")


@dataclass
class CountsRow:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    guardrail: int = 0
    invalid: int = 0
    support: int = 0

    @property
    def tp_pct(self) -> int:
        """tp/support as a whole percent, for table display."""
        return round(100 * self.tp / self.support) if self.support else 0

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "guardrail": self.guardrail,
            "invalid": self.invalid,
            "support": self.support,
            "tp_pct": self.tp_pct,
        }


@dataclass
class CountsTable:
    """Verdict tallies per (strategy, question)."""

    rows: dict[tuple[str, str], CountsRow] = field(default_factory=dict)

    def row(self, strategy: str, question: str) -> CountsRow:
        return self.rows.setdefault((strategy, question), CountsRow())

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"strategy": s, "question": q, **row.to_dict()}
                for (s, q), row in sorted(self.rows.items())
            ]
        }


def evidence_query(cve: str, question: Question) -> str:
    """Retrieval query used to pick evidence chunks for a question."""
    if question is Question.EXPLOITATION:
        return f"how can an attacker exploit {cve}? step-by-step"
    return f"recommended mitigation strategies for {cve}"


def select_evidence_pages(
    sources: SourceSet, evidence_sources: tuple[str, ...]
) -> list[tuple[str, str]]:
    """(url, text) for Ok pages whose category is in the configured set."""
    return sources.select(evidence_sources)


def assemble_evidence(
    sources: SourceSet,
    cve: str,
    question: Question,
    *,
    k: int = DEFAULT_TOP_K,
    evidence_sources: tuple[str, ...] = ("nvd", "cwe", "hyperlinks"),
    gateway: LlmGateway,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    budget_chars: int | None = None,
) -> tuple[str, list[str], bool]:
    """Chunk the configured evidence sources and keep the top-k for the question.

    Evidence always uses chunking regardless of the generation strategy.
    Returns (evidence_text, used_urls, truncated); lowest-ranked chunks are
    dropped when the text would not fit the prompt budget.
    """
    docs = select_evidence_pages(sources, evidence_sources)
    if not docs:
        raise NoContent(f"no evidence pages available from {evidence_sources}")
    index = ChunkIndex()
    for url, text in docs:
        for chunk in split_into_chunks(text, chunk_size, source_url=url):
            index.add(chunk, gateway.embed(chunk.text).values)
    chunks = top_k(index, evidence_query(cve, question), k, gateway=gateway)

    if budget_chars is None:
        budget_chars = gateway.context_budget_chars(overhead_tokens=2000, output_tokens=2048)
    parts: list[str] = []
    used: list[str] = []
    total = 0
    truncated = False
    for chunk in chunks:
        label = SOURCE_DELIMITER.format(url=chunk.source_url)
        need = len(label) + len(chunk.text) + 2
        if parts and total + need > budget_chars:
            truncated = True
            logger.warning("evidence for %s/%s truncated to fit the window", cve, question.value)
            break
        parts.append(label)
        parts.append(chunk.text)
        total += need
        if chunk.source_url not in used:
            used.append(chunk.source_url)
    return "\n".join(parts), used, truncated


# -- verdict parsing ---------------------------------------------------------

_LABEL_RE = re.compile(
    r"^[^\S\n]*(?:[-*>]\s*)*[*_~`\"']*(value|rationale|provenance|response|context)"
    r"[*_~`\"']*[^\S\n]*[:=]",
    re.IGNORECASE | re.MULTILINE,
)
# lines that end a provenance segment without being labels themselves
_TERMINATOR_RE = re.compile(
    r"^[^\S\n]*(?:-{3,}[^\S\n]*|[*_~`]*(?:retrieved[^\S\n]+urls|metrics)\b.*)$",
    re.IGNORECASE | re.MULTILINE,
)
_VALUE_TOKEN_RE = re.compile(r"\b(TP|FP|FN)\b", re.IGNORECASE)

_OPEN_QUOTES = {'"': '"', "'": "'", "“": "”", "‘": "’"}


def _strip_quotes(s: str) -> str:
    """Remove one wrapping quote pair (straight or smart) plus outer punctuation."""
    s = s.strip()
    if s and s[0] in _OPEN_QUOTES:
        closing = _OPEN_QUOTES[s[0]]
        last = s.rfind(closing)
        if last > 0:
            inner = s[1:last]
            tail = s[last + 1 :].strip()
            # apostrophes inside mean the outer single quotes are not a pair:
            # 'email' and 'password' must survive untouched
            if s[0] == "'" and "'" in inner:
                return s
            if not tail or re.fullmatch(r"[.,;]*", tail):
                return inner.strip()
    return s


def _sections(raw: str) -> list[tuple[str, str]]:
    """Split model output into (label, text) sections in document order."""
    labels = list(_LABEL_RE.finditer(raw))
    out: list[tuple[str, str]] = []
    for i, m in enumerate(labels):
        start = m.end()
        end = labels[i + 1].start() if i + 1 < len(labels) else len(raw)
        t = _TERMINATOR_RE.search(raw, start, end)
        if t:
            end = t.start()
        out.append((m.group(1).lower(), raw[start:end].strip()))
    return out


def parse_verdict(raw: str) -> dict:
    """Extract value, rationale, and the provenance pair from critique output.

    Tolerates markdown emphasis, quote styles, and label case. Conflicting
    value labels raise VerdictParseError; so do a missing value or a missing
    provenance segment. Never fabricates a value.
    """
    sections = _sections(raw)

    values: list[str] = []
    for label, text in sections:
        if label != "value":
            continue
        first_line = text.split("\n", 1)[0]
        tokens = {t.upper() for t in _VALUE_TOKEN_RE.findall(first_line)}
        values.extend(sorted(tokens))
    distinct = sorted(set(values))
    if not distinct:
        raise VerdictParseError("no verdict value found", raw_output=raw)
    if len(distinct) > 1:
        raise VerdictParseError(
            f"conflicting verdict values: {distinct}", raw_output=raw
        )
    value = distinct[0]

    rationale = ""
    for label, text in sections:
        if label == "rationale":
            rationale = _strip_quotes(text)
            break

    response_segment = ""
    context_segment = ""
    saw_provenance = any(label == "provenance" for label, _ in sections)
    for label, text in sections:
        if label == "response" and not response_segment:
            response_segment = _strip_quotes(text)
        elif label == "context" and not context_segment:
            context_segment = _strip_quotes(text)
    if not response_segment or not context_segment:
        missing = "response" if not response_segment else "context"
        raise VerdictParseError(
            f"provenance {missing} segment missing or empty"
            + ("" if saw_provenance else " (no provenance block)"),
            raw_output=raw,
        )

    return {
        "value": value,
        "rationale": rationale,
        "response_segment": response_segment,
        "context_segment": context_segment,
    }


REPAIR_SUFFIX = (
    "Output in the following format:\n"
    "value: TP or FP or FN (ONLY one value for the entire response)\n"
    "rationale: [the rationale segment for the selected value]\n"
    "provenance:\n"
    "- response: [extract the relevant segment from the response segment]\n"
    "- context: [extract the relevant segment from the context segment]"
)


def evaluate_response(
    answer: str,
    evidence: str,
    cve: str,
    question: Question,
    *,
    gateway: LlmGateway,
    prompts: PromptCatalog,
    model_id: str | None = None,
    repair_retry: bool = False,
) -> EvalVerdict:
    """One self-critique call; raises VerdictParseError when output cannot be
    reduced to a single verdict (optionally after one repair re-prompt)."""
    if not answer.strip():
        raise ValueError("refused/empty answers are excluded from evaluation")
    model_id = model_id or gateway.chat_model
    prompt = prompts.render(
        "evaluation",
        {
            "question": question.value,
            "cve_id": cve,
            "response": answer,
            "evidence": evidence,
        },
        model_id,
    )
    req = ChatRequest(system="", user=prompt, model_id=model_id, role="evaluation")
    resp = gateway.complete(req)
    try:
        fields = parse_verdict(resp.text)
    except VerdictParseError:
        if not repair_retry:
            raise
        retry_req = ChatRequest(
            system="",
            user=prompt.rstrip("\n") + "\n\n" + REPAIR_SUFFIX,
            model_id=model_id,
            role="evaluation-repair",
        )
        resp = gateway.complete(retry_req)
        fields = parse_verdict(resp.text)

    return EvalVerdict(
        cve=cve,
        question=question,
        value=fields["value"],
        rationale=fields["rationale"],
        provenance_response_segment=fields["response_segment"],
        provenance_context_segment=fields["context_segment"],
        raw_output=resp.text,
    )


def tally(
    verdicts: list[EvalVerdict],
    reports: list[VulnReport],
    invalids: list[dict] | None = None,
) -> CountsTable:
    """Fold verdicts, guardrail refusals, and invalid records into one table.

    Per row: tp + fp + fn + guardrail + invalid = support, where support is
    the number of reports contributing to that (strategy, question) cell.
    """
    table = CountsTable()
    strategy_by_cve: dict[str, Strategy] = {r.cve: r.strategy for r in reports}
    for report in reports:
        for question in Question:
            row = table.row(report.strategy.value, question.value)
            row.support += 1
            if report.refused:
                row.guardrail += 1
    for v in verdicts:
        strategy = strategy_by_cve.get(v.cve)
        if strategy is None:
            continue
        row = table.row(strategy.value, v.question.value)
        if v.value == "TP":
            row.tp += 1
        elif v.value == "FP":
            row.fp += 1
        elif v.value == "FN":
            row.fn += 1
    for inv in invalids or []:
        strategy = strategy_by_cve.get(inv["cve"])
        if strategy is None:
            continue
        table.row(strategy.value, inv["question"]).invalid += 1
    return table
