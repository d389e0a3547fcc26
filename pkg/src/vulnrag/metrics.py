"""Provenance-quality metrics and per-source ablation attribution.

- rouge_l: LCS-based F1 over lowercased alphanumeric tokens
- provenance_metrics: rouge_l plus embedding cosine between the two segments
- attribution: black-box feature ablation over URL summaries; each relevant
  summary is replaced by an empty baseline, the answer regenerated, and the
  output change scored, then the score vector is L2-normalized
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass

from .errors import EmptySegment
from .gateway import LlmGateway
from .generation import Strategy, generate_answers, summaries_context_block
from .prompts import PromptCatalog
from .retrieval import Question, UrlSummary, cosine_similarity

logger = logging.getLogger(__name__)

ATTRIBUTION_MEASURES = ("embedding", "logprob")

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercased Unicode alphanumeric runs; everything else is a separator."""
    return _TOKEN_RE.findall(text.lower())


def lcs_length(a: list[str], b: list[str]) -> int:
    """Length of the longest common subsequence, classic dynamic programming."""
    m, n = len(a), len(b)
    if m == 0 or n == 0:
        return 0
    if n > m:  # keep the inner row short
        a, b, m, n = b, a, n, m
    prev = [0] * (n + 1)
    for i in range(1, m + 1):
        cur = [0] * (n + 1)
        ai = a[i - 1]
        for j in range(1, n + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cj = cur[j - 1]
                pj = prev[j]
                cur[j] = cj if cj >= pj else pj
        prev = cur
    return prev[n]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS F1 between two texts; 0.0 when either tokenizes to nothing."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


@dataclass
class ProvenanceMetrics:
    rouge_l: float
    cosine: float
    truncated: bool = False

    def to_dict(self) -> dict:
        return {"rouge_l": self.rouge_l, "cosine": self.cosine, "truncated": self.truncated}


def provenance_metrics(
    response_segment: str,
    context_segment: str,
    *,
    gateway: LlmGateway,
) -> ProvenanceMetrics:
    """Lexical and semantic agreement between a provenance pair."""
    if not response_segment.strip() or not context_segment.strip():
        raise EmptySegment("provenance metrics need both segments nonempty")
    r_text, r_trunc = gateway.truncate_for_embedding(response_segment)
    c_text, c_trunc = gateway.truncate_for_embedding(context_segment)
    cos = cosine_similarity(gateway.embed(r_text).values, gateway.embed(c_text).values)
    return ProvenanceMetrics(
        rouge_l=rouge_l(response_segment, context_segment),
        cosine=cos,
        truncated=r_trunc or c_trunc,
    )


def segment_alignment(segment: str, answer: str, threshold: float = 0.5) -> bool:
    """Is the cited response segment actually drawn from the answer?

    Exact substring (whitespace-normalized) counts; otherwise the segment must
    reach the Rouge-L threshold against some token window of the answer.
    Recorded in reports, never enforced fatally.
    """
    norm_seg = " ".join(segment.split())
    norm_ans = " ".join(answer.split())
    if not norm_seg:
        return False
    if norm_seg.lower() in norm_ans.lower():
        return True
    seg_tokens = tokenize(segment)
    ans_tokens = tokenize(answer)
    if not seg_tokens or not ans_tokens:
        return False
    width = len(seg_tokens)
    step = max(1, width // 2)
    best = 0.0
    for start in range(0, max(1, len(ans_tokens) - width + step), step):
        window = ans_tokens[start : start + width]
        if not window:
            break
        lcs = lcs_length(seg_tokens, window)
        if lcs:
            p = lcs / len(seg_tokens)
            r = lcs / len(window)
            best = max(best, 2 * p * r / (p + r))
        if best >= threshold:
            return True
    return best >= threshold


@dataclass
class AttributionVector:
    """Per-source ablation scores; normalized flag is unset when all-zero."""

    scores: dict[str, float]
    normalized: bool
    measure: str

    def to_dict(self) -> dict:
        return {
            "measure": self.measure,
            "normalized": self.normalized,
            "scores": dict(self.scores),
        }


def normalize_scores(raw: dict[str, float]) -> tuple[dict[str, float], bool]:
    """L2-normalize; an all-zero vector is returned unchanged, flag unset."""
    # hypot is immune to the underflow of squaring tiny components
    norm = math.hypot(*raw.values()) if raw else 0.0
    if norm == 0.0:
        return dict(raw), False
    return {k: v / norm for k, v in raw.items()}, True


def attribution(
    summaries: list[UrlSummary],
    question: Question,
    base_answer: str,
    cve: str,
    *,
    gateway: LlmGateway,
    prompts: PromptCatalog,
    model_id: str | None = None,
    measure: str = "embedding",
    top_k: int = 10,
    base_logprob_mean: float | None = None,
) -> AttributionVector:
    """Feature-ablation attribution over this question's URL summaries.

    For each relevant summary the answer is regenerated with that summary's
    slot emptied (one extra gateway call per relevant summary, none for
    irrelevant ones, which score exactly 0), and the drop between the base
    and ablated output is the raw score. Scores are then L2-normalized.
    """
    if measure not in ATTRIBUTION_MEASURES:
        raise ValueError(f"unknown attribution measure: {measure}")

    targets = [s for s in summaries if s.question is question]
    relevant_all = [s for s in summaries if s.relevant]
    raw: dict[str, float] = {}
    base_vec = None
    if measure == "embedding" and any(s.relevant for s in targets) and base_answer.strip():
        base_vec = gateway.embed(base_answer).values

    for target in targets:
        if not target.relevant:
            raw[target.source_url] = 0.0
            continue
        # baseline: the target slot is emptied, prompt structure unchanged
        context, sources = summaries_context_block(
            relevant_all,
            text_overrides={(target.source_url, target.question.value): ""},
        )
        ablated_report = generate_answers(
            cve,
            context,
            Strategy.SUMMARIZING,
            gateway=gateway,
            prompts=prompts,
            model_id=model_id,
            context_sources=sources,
            want_logprobs=(measure == "logprob"),
        )
        ablated_answer = ablated_report.answer(question)
        if measure == "embedding":
            if base_vec is None or not ablated_answer.strip():
                delta = 1.0 if base_answer.strip() else 0.0
            else:
                delta = 1.0 - cosine_similarity(
                    base_vec, gateway.embed(ablated_answer).values
                )
        else:
            ablated_lps = ablated_report.token_logprobs or []
            ablated_mean = sum(ablated_lps) / len(ablated_lps) if ablated_lps else 0.0
            base_mean = base_logprob_mean if base_logprob_mean is not None else 0.0
            delta = base_mean - ablated_mean
        raw[target.source_url] = delta

    scores, normalized = normalize_scores(raw)
    return AttributionVector(scores=scores, normalized=normalized, measure=measure)
