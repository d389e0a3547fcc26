# Chunking vs. summarizing retrieval, side by side, on synthetic pages.
# Shows why the summarizing route relieves the context window: the generation
# prompt carries short question-conditioned summaries instead of top-k chunks.

from vulnrag.gateway import HashEmbeddingBackend, LlmGateway, ScriptedChatBackend
from vulnrag.generation import Strategy, build_generation_context
from vulnrag.ingest import PageContent, SourceSet
from vulnrag.prompts import default_catalog
from vulnrag.retrieval import Question, build_index, summarize_sources, top_k

CVE = "CVE-2024-0244"

# Two synthetic pages, ~40k characters each. Real runs pull these from the
# NVD/CWE/advisory pages through the caching ingestor.
nvd_text = (
    "Buffer overflow in the printer protocol. Exploit guidance: craft an "
    "oversized packet and send it to the service port. " * 350
)
cwe_text = (
    "Potential Mitigations: use a language with bounds checking, deploy "
    "vetted libraries, enable compiler overflow detection. " * 350
)
sources = SourceSet(
    cve=CVE,
    nvd_page=PageContent(url="https://nvd.example/detail", fetched_at="t", status="ok", text=nvd_text),
    cwe_pages=[PageContent(url="https://cwe.example/787", fetched_at="t", status="ok", text=cwe_text)],
)
print(f"page sizes: nvd={len(nvd_text)} chars, cwe={len(cwe_text)} chars")

# The scripted chat backend stands in for the model; the hash embedding
# backend gives deterministic vectors.
backend = ScriptedChatBackend()
backend.add_rule(
    lambda req: (
        "Answer: Yes\nSummary: Send an oversized packet to the exposed service port."
        if "can be exploited" in req.user
        else "Answer: Yes\nSummary: Enable bounds checking and compiler overflow detection."
    )
)
gateway = LlmGateway(backend, HashEmbeddingBackend(dim=64))
prompts = default_catalog()

# Strategy 1: chunking. Pages are split into 15,000-char chunks, embedded,
# and the top-k most query-similar chunks become the prompt context.
index = build_index(sources, gateway, chunk_size=15_000)
print(f"\nchunk index: {len(index)} chunks")
best = top_k(index, f"how can an attacker exploit {CVE}?", k=3, gateway=gateway)
for chunk in best:
    print(f"  rank: {chunk.source_url} seq={chunk.seq} ({len(chunk.text)} chars)")

chunk_context, chunk_sources = build_generation_context(
    Strategy.CHUNKING, cve=CVE, index=index, k=3, gateway=gateway
)
print(f"chunking context: {len(chunk_context)} chars from {chunk_sources}")

# Strategy 2: summarizing. Each URL is relevancy-gated per question and
# summarized only when relevant; irrelevant URLs carry the literal "NONE".
summaries = []
for question in Question:
    summaries.extend(
        summarize_sources(sources, CVE, question, gateway=gateway, prompts=prompts)
    )
for s in summaries:
    print(f"  {s.question.value:<12} {s.source_url}: relevant={s.relevant} summary={s.summary[:50]!r}")

summary_context, summary_sources = build_generation_context(
    Strategy.SUMMARIZING, summaries=summaries
)
print(f"summarizing context: {len(summary_context)} chars from {summary_sources}")

print(
    f"\ncontext relief: summarizing uses {len(summary_context)} chars where "
    f"chunking used {len(chunk_context)} "
    f"({len(chunk_context) // max(len(summary_context), 1)}x smaller)"
)
