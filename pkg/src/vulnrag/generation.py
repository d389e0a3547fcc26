"""Answer generation for one CVE under a chosen retrieval strategy."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum

from .errors import NoContext
from .gateway import ChatRequest, ChatResponse, LlmGateway
from .prompts import PromptCatalog
from .retrieval import (
    DEFAULT_TOP_K,
    ChunkIndex,
    Question,
    UrlSummary,
    top_k,
)

logger = logging.getLogger(__name__)

SOURCE_DELIMITER = "--- source: {url} ---"


class Strategy(str, Enum):
    PROMPT_ONLY = "prompt-only"
    CHUNKING = "chunking"
    SUMMARIZING = "summarizing"


@dataclass
class VulnReport:
    """Generated exploitation and mitigation answers for one CVE."""

    cve: str
    strategy: Strategy
    exploitation_answer: str
    mitigation_answer: str
    context_chars: int
    context_sources: list[str]
    refused: bool
    split_warning: bool = False
    model_id: str = ""
    temperature: float = 0.0
    token_logprobs: list[float] | None = None

    def answer(self, question: Question) -> str:
        if question is Question.EXPLOITATION:
            return self.exploitation_answer
        return self.mitigation_answer

    def to_dict(self) -> dict:
        return {
            "cve": self.cve,
            "strategy": self.strategy.value,
            "exploitation_answer": self.exploitation_answer,
            "mitigation_answer": self.mitigation_answer,
            "context_chars": self.context_chars,
            "context_sources": list(self.context_sources),
            "refused": self.refused,
            "split_warning": self.split_warning,
            "model_id": self.model_id,
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VulnReport":
        return cls(
            cve=d["cve"],
            strategy=Strategy(d["strategy"]),
            exploitation_answer=d["exploitation_answer"],
            mitigation_answer=d["mitigation_answer"],
            context_chars=int(d["context_chars"]),
            context_sources=list(d["context_sources"]),
            refused=bool(d["refused"]),
            split_warning=bool(d.get("split_warning", False)),
            model_id=d.get("model_id", ""),
            temperature=float(d.get("temperature", 0.0)),
        )


def generation_query(cve_id: str) -> str:
    """The two-question block, used verbatim as the chunking retrieval query."""
    return (
        f"Given the specified CVE-ID ({cve_id}), please provide detailed answers "
        "to the following questions:\n"
        "1. How can an attacker exploit this vulnerability? Provide a step-by-step description.\n"
        "2. What are the recommended mitigation strategies for this vulnerability?"
    )


def build_generation_context(
    strategy: Strategy,
    *,
    cve: str = "",
    index: ChunkIndex | None = None,
    summaries: list[UrlSummary] | None = None,
    k: int = DEFAULT_TOP_K,
    gateway: LlmGateway | None = None,
) -> tuple[str, list[str]]:
    """Build the Relevant Information block for the strategy.

    Returns (context_text, source_urls). Prompt-only yields ("", []).
    Chunking concatenates the top-k chunks with source labels; summarizing
    concatenates relevant summaries only, grouped by question, NVD first.
    """
    if strategy is Strategy.PROMPT_ONLY:
        return "", []

    if strategy is Strategy.CHUNKING:
        if index is None or not len(index):
            raise NoContext("chunking strategy needs a nonempty chunk index")
        chunks = top_k(index, generation_query(cve), k, gateway=gateway)
        parts = []
        sources: list[str] = []
        for chunk in chunks:
            parts.append(SOURCE_DELIMITER.format(url=chunk.source_url))
            parts.append(chunk.text)
            if chunk.source_url not in sources:
                sources.append(chunk.source_url)
        return "\n".join(parts), sources

    if strategy is Strategy.SUMMARIZING:
        relevant = [s for s in (summaries or []) if s.relevant]
        if not relevant:
            raise NoContext("summarizing strategy has no relevant summaries")
        return summaries_context_block(relevant)

    raise ValueError(f"unknown strategy: {strategy}")


def summaries_context_block(
    summaries: list[UrlSummary],
    text_overrides: dict[tuple[str, str], str] | None = None,
) -> tuple[str, list[str]]:
    """Lay out summaries grouped by question, NVD-first source order.

    text_overrides, keyed by (source_url, question value), replaces a slot's
    summary text in place (the ablation baseline empties a slot while keeping
    the prompt structure unchanged).
    """
    overrides = text_overrides or {}
    parts: list[str] = []
    sources: list[str] = []
    for question in (Question.EXPLOITATION, Question.MITIGATION):
        group = [s for s in summaries if s.question is question]
        if not group:
            continue
        parts.append(f"{question.value.capitalize()} summaries:")
        for s in group:
            parts.append(SOURCE_DELIMITER.format(url=s.source_url))
            parts.append(overrides.get((s.source_url, s.question.value), s.summary))
            if s.source_url not in sources:
                sources.append(s.source_url)
    return "\n".join(parts), sources


_FIRST_Q_RE = re.compile(r"^[ \t]*(?:#+\s*|\*\*\s*)?1[.)](?:\*\*)?\s", re.MULTILINE)
_SECOND_Q_RE = re.compile(r"^[ \t]*(?:#+\s*|\*\*\s*)?2[.)](?:\*\*)?\s", re.MULTILINE)
_MITIGATION_HEADING_RE = re.compile(
    r"^[ \t]*(?:#+\s*|\*\*\s*)?(?:recommended\s+)?mitigation", re.IGNORECASE | re.MULTILINE
)


def split_answers(text: str) -> tuple[str, str, bool]:
    """Split one combined completion into (exploitation, mitigation, warning).

    Scans for "1." / "2." at line starts, falls back to a mitigation-keyword
    heading; when neither works the whole text stays in the exploitation slot
    with the warning flag set. No text is ever dropped.
    """
    m1 = _FIRST_Q_RE.search(text)
    if m1:
        m2 = _SECOND_Q_RE.search(text, m1.end())
        if m2:
            # any preamble before "1." stays with the first answer
            return text[: m2.start()].strip(), text[m2.start() :].strip(), False
    m = _MITIGATION_HEADING_RE.search(text)
    if m and m.start() > 0:
        return text[: m.start()].strip(), text[m.start() :].strip(), False
    return text.strip(), "", True


def generate_answers(
    cve: str,
    context: str,
    strategy: Strategy,
    *,
    gateway: LlmGateway,
    prompts: PromptCatalog,
    model_id: str | None = None,
    context_sources: list[str] | None = None,
    temperature: float = 0.0,
    max_output_tokens: int = 2048,
    want_logprobs: bool = False,
) -> VulnReport:
    """One gateway call answering both questions; refusals empty the report."""
    model_id = model_id or gateway.chat_model
    prompt = prompts.render_generation(
        cve, context if strategy is not Strategy.PROMPT_ONLY else None, model_id
    )
    req = ChatRequest(
        system="",
        user=prompt,
        model_id=model_id,
        temperature=temperature,
        max_output_tokens=max_output_tokens,
        role="generation",
        want_logprobs=want_logprobs,
    )
    resp: ChatResponse = gateway.complete(req)

    if gateway.detect_refusal(resp.text):
        return VulnReport(
            cve=cve,
            strategy=strategy,
            exploitation_answer="",
            mitigation_answer="",
            context_chars=len(context),
            context_sources=list(context_sources or []),
            refused=True,
            model_id=model_id,
            temperature=temperature,
        )

    exploitation, mitigation, warning = split_answers(resp.text)
    if warning:
        logger.warning("could not delimit the two answers for %s", cve)
    return VulnReport(
        cve=cve,
        strategy=strategy,
        exploitation_answer=exploitation,
        mitigation_answer=mitigation,
        context_chars=len(context),
        context_sources=list(context_sources or []),
        refused=False,
        split_warning=warning,
        model_id=model_id,
        temperature=temperature,
        token_logprobs=resp.token_logprobs,
    )
