"""vulnrag: retrieval-augmented CVE analysis with self-critique provenance.

The pipeline curates critical CVEs from the NVD feed, gathers the pages an
analyst would read (NVD, CWE, advisory hyperlinks, optionally Aqua),
generates exploitation and mitigation answers under a chosen retrieval
strategy, then has the model critique its own answers against chunked
evidence, emitting TP/FP/FN verdicts with provenance citations, lexical and
semantic agreement metrics, and per-source ablation attribution.
"""

from .catalog import (
    CurationFilter,
    CveId,
    CveRecord,
    NvdClient,
    SnapshotCatalog,
    curate_dataset,
    load_snapshot,
    save_snapshot,
    validate_cve_id,
)
from .evaluation import (
    CountsTable,
    EvalVerdict,
    assemble_evidence,
    evaluate_response,
    parse_verdict,
    tally,
)
from .gateway import (
    ChatRequest,
    ChatResponse,
    EmbeddingVector,
    HashEmbeddingBackend,
    LlmGateway,
    OpenAIChatBackend,
    OpenAIEmbeddingBackend,
    ScriptedChatBackend,
)
from .generation import (
    Strategy,
    VulnReport,
    build_generation_context,
    generate_answers,
    split_answers,
)
from .ingest import PageContent, SourceSet, WebIngestor, extract_text
from .metrics import (
    AttributionVector,
    ProvenanceMetrics,
    attribution,
    lcs_length,
    provenance_metrics,
    rouge_l,
    tokenize,
)
from .pipeline import RunConfig, RunRecord, compare_runs, load_run, run
from .prompts import PromptCatalog, default_catalog
from .retrieval import (
    Chunk,
    ChunkIndex,
    Question,
    UrlSummary,
    build_index,
    cosine_similarity,
    split_into_chunks,
    summarize_sources,
    summarize_url,
    top_k,
)

__version__ = "0.1.0"
