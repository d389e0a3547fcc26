# A complete offline pipeline run over two synthetic CVEs: sources are built
# in memory, the chat model is a deterministic script, embeddings are
# hash-seeded. Produces a real run JSONL with reports, verdicts, provenance
# metrics, attribution, counts, and a relevancy table.

import json
import tempfile
from pathlib import Path

from vulnrag.catalog import CveRecord, validate_cve_id
from vulnrag.gateway import HashEmbeddingBackend, LlmGateway, ScriptedChatBackend
from vulnrag.generation import Strategy
from vulnrag.ingest import PageContent, SourceSet
from vulnrag.pipeline import RunConfig, run, support_conservation, validate_run_file

workdir = Path(tempfile.mkdtemp(prefix="vulnrag_demo_"))

records = [
    CveRecord(
        id=validate_cve_id(f"CVE-2024-{n:04d}"),
        description=f"Synthetic critical vulnerability number {n}.",
        cvss_v3_score=9.8,
        cwe_ids=["CWE-787"],
        reference_urls=[f"https://vendor.example/advisory/{n}"],
        published="2024-03-01",
    )
    for n in (101, 102)
]


class InMemorySources:
    """Stands in for WebIngestor: hands back prebuilt page sets."""

    def assemble_source_set(self, record, include_aqua=False):
        cve = record.id.value

        def page(url, text):
            return PageContent(url=url, fetched_at="demo", status="ok", text=text)

        return SourceSet(
            cve=record.id,
            nvd_page=page(
                f"https://nvd.example/detail/{cve}",
                f"{record.description} EXPLOIT-PATH: send crafted packets to {cve}.",
            ),
            cwe_pages=[
                page(
                    "https://cwe.example/787",
                    "Potential Mitigations: bounds checking, vetted libraries, ASLR.",
                )
            ],
            hyperlink_pages=[
                page(
                    record.reference_urls[0],
                    f"Vendor advisory for {cve}: patch to firmware 03.08 or later.",
                )
            ],
        )


# Scripted model: relevancy says Yes for exploitation on NVD pages and for
# mitigation on CWE/advisory pages; generation emits two numbered answers;
# evaluation returns a TP verdict citing the answer.
def relevancy(req):
    if not req.user.startswith("You are a cybersecurity expert. Your task is to analyze"):
        return None
    asks_exploit = "can be exploited" in req.user
    if asks_exploit and "EXPLOIT-PATH" in req.user:
        return "Answer: Yes\nSummary: Send crafted packets to the service."
    if not asks_exploit and ("Mitigations" in req.user or "patch to firmware" in req.user):
        return "Answer: Yes\nSummary: Patch the firmware and enable bounds checking."
    return "Answer: No\nSummary: NONE"


def generation(req):
    if "Given the specified CVE-ID" not in req.user:
        return None
    return (
        "1. An attacker sends crafted packets to the vulnerable service to "
        "trigger the overflow and gain execution.\n"
        "2. Patch the firmware, enable bounds checking, and isolate the device."
    )


def evaluation(req):
    if not req.user.startswith("For the "):
        return None
    return (
        'value: "TP",\n\n'
        "rationale: The response matches the retrieved evidence.\n\n"
        "provenance:\n\n"
        'response: "An attacker sends crafted packets to the vulnerable service"\n\n'
        'context: "EXPLOIT-PATH: send crafted packets"\n'
    )


backend = ScriptedChatBackend()
for rule in (relevancy, generation, evaluation):
    backend.add_rule(rule)

config = RunConfig(
    strategy=Strategy.SUMMARIZING,
    cache_dir=str(workdir / "cache"),
    output_path=str(workdir / "run.jsonl"),
    workers=1,
    attribution_measure="embedding",
)
gateway = LlmGateway(backend, HashEmbeddingBackend(dim=64), chat_model=config.chat_model)

result = run(records, config, gateway=gateway, ingestor=InMemorySources())

print(f"run file: {config.output_path}")
print(f"reports: {len(result.reports)}, verdicts: {len(result.verdict_lines)}")
print("support conservation:", support_conservation(result))
print("lines validate against the published schema:", validate_run_file(config.output_path))

print("\ncounts table:")
for row in result.counts.to_dict()["rows"]:
    print(
        f"  {row['strategy']}/{row['question']}: TP={row['tp']} FP={row['fp']} "
        f"FN={row['fn']} GR={row['guardrail']} support={row['support']} ({row['tp_pct']}%)"
    )

print("\nrelevancy table:", json.dumps(result.relevancy_table, indent=2)[:400])

print("\nfirst verdict line:")
print(json.dumps(result.verdict_lines[0], indent=2)[:800])
