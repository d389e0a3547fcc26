"""Shared fixtures: a local fixture web server, deterministic gateways, and
a synthetic CVE corpus. No test ever touches the live web."""

from __future__ import annotations

import hashlib
import json
import re
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from vulnrag.catalog import CveRecord, validate_cve_id
from vulnrag.gateway import (
    ChatRequest,
    HashEmbeddingBackend,
    LlmGateway,
    ScriptedChatBackend,
)
from vulnrag.ingest import WebIngestor
from vulnrag.prompts import PromptCatalog

MODEL = "gpt-4o-mini"


class FixtureServer:
    """In-process HTTP server with canned routes and per-path hit counts.

    Routes are keyed by path (plus query string when one was registered).
    POST bodies for /v1/chat/completions and /v1/embeddings are answered by
    pluggable handlers so the OpenAI-compatible client can be exercised.
    """

    def __init__(self):
        self.routes: dict[str, tuple[int, str, bytes, dict]] = {}
        self.hits: Counter = Counter()
        self.chat_handler = None
        self.embed_handler = None
        self._lock = threading.Lock()

        fixture = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _serve(self, status: int, content_type: str, body: bytes, headers: dict | None = None):
                self.send_response(status)
                self.send_header("Content-Type", content_type)
                self.send_header("Content-Length", str(len(body)))
                for key, value in (headers or {}).items():
                    self.send_header(key, value)
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                with fixture._lock:
                    fixture.hits[self.path] += 1
                route = fixture.routes.get(self.path)
                if route is None:
                    route = fixture.routes.get(self.path.split("?")[0])
                if route is None:
                    self._serve(404, "text/plain", b"not found")
                    return
                status, content_type, body, headers = route
                self._serve(status, content_type, body, headers)

            def do_POST(self):
                with fixture._lock:
                    fixture.hits[self.path] += 1
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length) or b"{}")
                if self.path.endswith("/chat/completions") and fixture.chat_handler:
                    text = fixture.chat_handler(payload)
                    body = json.dumps(
                        {
                            "choices": [
                                {"message": {"role": "assistant", "content": text}}
                            ],
                            "usage": {"prompt_tokens": 1, "completion_tokens": 1},
                        }
                    ).encode()
                    self._serve(200, "application/json", body)
                elif self.path.endswith("/embeddings") and fixture.embed_handler:
                    vec = fixture.embed_handler(payload.get("input", ""))
                    body = json.dumps({"data": [{"embedding": vec}]}).encode()
                    self._serve(200, "application/json", body)
                else:
                    self._serve(404, "text/plain", b"no handler")

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        self.base_url = f"http://127.0.0.1:{self._server.server_address[1]}"

    def add(
        self,
        path: str,
        body: str | bytes,
        content_type: str = "text/html",
        status: int = 200,
        headers: dict | None = None,
    ):
        if isinstance(body, str):
            body = body.encode("utf-8")
        self.routes[path] = (status, content_type, body, headers or {})

    def hit_count(self, path: str) -> int:
        with self._lock:
            return self.hits[path]

    def close(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def fixture_server():
    server = FixtureServer()
    yield server
    server.close()


@pytest.fixture(scope="session")
def prompt_catalog() -> PromptCatalog:
    return PromptCatalog()


def make_gateway(
    scripted: ScriptedChatBackend | None = None,
    *,
    mode: str = "off",
    transcript_path: str | None = None,
    embed_dim: int = 64,
) -> LlmGateway:
    return LlmGateway(
        scripted if scripted is not None else ScriptedChatBackend(),
        HashEmbeddingBackend(dim=embed_dim),
        chat_model=MODEL,
        mode=mode,
        transcript_path=transcript_path,
    )


@pytest.fixture
def hash_gateway() -> LlmGateway:
    return make_gateway()


# -- synthetic CVE corpus ------------------------------------------------------


def html_page(title: str, paragraphs: list[str]) -> str:
    body = "\n".join(f"<p>{p}</p>" for p in paragraphs)
    return (
        "<html><head><title>{t}</title><script>track();</script>"
        "<style>p {{color: black}}</style></head><body><h1>{t}</h1>{b}</body></html>"
    ).format(t=title, b=body)


def make_record(
    suffix: int,
    *,
    year: int = 2024,
    cvss: float = 9.8,
    cwes: tuple[str, ...] = ("CWE-787",),
    refs: tuple[str, ...] = (),
    published: str = "2024-03-15",
    description: str | None = None,
) -> CveRecord:
    cve = f"CVE-{year}-{suffix:04d}"
    return CveRecord(
        id=validate_cve_id(cve),
        description=description or f"Synthetic vulnerability {cve} allowing remote code execution.",
        cvss_v3_score=cvss,
        cwe_ids=list(cwes),
        reference_urls=list(refs),
        published=published,
    )


class PipelineFixture:
    """Registers one CVE's pages on the fixture server and tracks sentinels.

    Page text embeds EXPLOITINFO-/MITIGATEINFO-tagged sentences so scripted
    relevancy rules can decide Yes/No deterministically, and per-source
    sentinel tokens let tests prove evidence scoping.
    """

    def __init__(self, server: FixtureServer, tmp_path):
        self.server = server
        self.tmp_path = tmp_path
        self.records: list[CveRecord] = []

    @property
    def url_rewrite(self) -> dict[str, str]:
        return {
            "https://nvd.nist.gov": f"{self.server.base_url}/nvdweb",
            "https://cwe.mitre.org": f"{self.server.base_url}/cweweb",
            "https://avd.aquasec.com": f"{self.server.base_url}/aqua",
            "https://services.nvd.nist.gov": f"{self.server.base_url}/nvdapi",
            "https://example.com": f"{self.server.base_url}/ref",
        }

    def ingestor(self, cache_dir=None, **kwargs) -> WebIngestor:
        kwargs.setdefault("min_host_interval", 0.0)
        kwargs.setdefault("retries", 0)
        kwargs.setdefault("backoff", 0.0)
        return WebIngestor(
            str(cache_dir or self.tmp_path / "cache"),
            url_rewrite=self.url_rewrite,
            **kwargs,
        )

    def add_cve(
        self,
        suffix: int,
        *,
        refs: int = 1,
        include_aqua: bool = False,
        nvd_status: int = 200,
        dead_ref_positions: tuple[int, ...] = (),
        exploit_sources: tuple[str, ...] = ("nvd",),
        mitigate_sources: tuple[str, ...] = ("cwe",),
    ) -> CveRecord:
        cve = f"CVE-2024-{suffix:04d}"
        cwe_number = 700 + suffix % 100
        ref_urls = tuple(f"https://example.com/advisory/{suffix}/{i}" for i in range(refs))
        record = make_record(suffix, refs=ref_urls, cwes=(f"CWE-{cwe_number}",))
        self.records.append(record)

        def sentinel(category: str) -> str:
            parts = [f"{category.upper()}TOKEN{suffix:04d} details for {cve}."]
            if category in exploit_sources:
                parts.append(f"EXPLOITINFO {category} steps to attack {cve}.")
            if category in mitigate_sources:
                parts.append(f"MITIGATEINFO {category} hardening guidance for {cve}.")
            return " ".join(parts)

        nvd_html = html_page(
            f"NVD - {cve}",
            [record.description, sentinel("nvd"), "CVSS score 9.8 critical."],
        )
        self.server.add(f"/nvdweb/vuln/detail/{cve}", nvd_html, status=nvd_status)
        self.server.add(
            f"/cweweb/data/definitions/{cwe_number}.html",
            html_page(
                f"CWE-{cwe_number}: Out-of-bounds Write",
                [sentinel("cwe"), "Potential Mitigations."],
            ),
        )
        if include_aqua:
            self.server.add(
                f"/aqua/nvd/{cve.lower()}/",
                html_page(f"Aqua - {cve}", [sentinel("aqua"), "Structured remediation."]),
            )
        for i, url in enumerate(ref_urls):
            path = f"/ref/advisory/{suffix}/{i}"
            if i in dead_ref_positions:
                self.server.add(path, "gone", status=404)
            else:
                self.server.add(
                    path,
                    html_page(f"Advisory {suffix}/{i}", [sentinel("hyperlinks")]),
                )
        return record


@pytest.fixture
def pipeline_fixture(fixture_server, tmp_path) -> PipelineFixture:
    return PipelineFixture(fixture_server, tmp_path)


# -- scripted model behaviour ---------------------------------------------------


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:8]


def relevancy_rule(req: ChatRequest):
    """Deterministic Yes/No per the sentinel tags embedded in page text."""
    if not req.user.startswith("You are a cybersecurity expert. Your task is to analyze"):
        return None
    is_exploit = "can be exploited" in req.user
    marker = "EXPLOITINFO" if is_exploit else "MITIGATEINFO"
    m = re.search(r"Content: (.*?)\n\nPlease follow the steps below:", req.user, re.DOTALL)
    content = m.group(1) if m else ""
    if marker in content:
        kind = "exploitation" if is_exploit else "mitigation"
        return (
            f"Answer: Yes\n\nSummary: Distilled {kind} guidance {_digest(content)} "
            f"covering the essential actions."
        )
    return "Answer: No\n\nSummary: NONE"


def generation_rule(req: ChatRequest):
    """Two numbered answers whose text depends on the full prompt content."""
    if "Given the specified CVE-ID" not in req.user:
        return None
    m = re.search(r"Query: (CVE-\d{4}-\d{4,})", req.user)
    cve = m.group(1) if m else "CVE-0000-0000"
    tag = _digest(req.user)
    return (
        f"1. An attacker can exploit {cve} by sending crafted input (variant {tag}): "
        "first probe the service, then deliver the payload, then escalate.\n"
        f"2. Mitigation for {cve} (variant {tag}): apply the vendor patch, "
        "restrict network exposure, and monitor for exploitation attempts."
    )


def make_evaluation_rule(values_by_cve: dict[str, str] | None = None):
    """Verdict boxes with configurable values (default TP), echoing a slice of
    the evaluated answer so provenance stays aligned with it."""

    def rule(req: ChatRequest):
        m = re.match(r"For the (exploitation|mitigation) information of (CVE-\d{4}-\d{4,}):", req.user)
        if not m:
            return None
        question, cve = m.groups()
        value = (values_by_cve or {}).get(cve, "TP")
        body = re.search(r"\nresponse: (.*?)\n\n-{3,}\n", req.user, re.DOTALL)
        answer = body.group(1) if body else "the response"
        segment = " ".join(answer.split())[:100]
        return (
            f'value: "{value}",\n\n'
            f"rationale: The response for {cve} {question} was compared against the "
            f"retrieved evidence and judged {value}.\n\n"
            "provenance:\n\n"
            f'response: "{segment}"\n\n'
            f'context: "Reference material for {cve} {question} drawn from the indexed sources."\n'
        )

    return rule


def scripted_pipeline_backend(values_by_cve: dict[str, str] | None = None) -> ScriptedChatBackend:
    backend = ScriptedChatBackend()
    backend.add_rule(relevancy_rule)
    backend.add_rule(generation_rule)
    backend.add_rule(make_evaluation_rule(values_by_cve))
    return backend


def openai_chat_handler(values_by_cve: dict[str, str] | None = None):
    """The scripted rules behind an OpenAI-compatible POST body (CLI tests)."""
    rules = [relevancy_rule, generation_rule, make_evaluation_rule(values_by_cve)]

    def handler(payload: dict) -> str:
        user = payload["messages"][-1]["content"]
        req = ChatRequest(system="", user=user, model_id=payload.get("model", MODEL))
        for rule in rules:
            out = rule(req)
            if out is not None:
                return out if isinstance(out, str) else out.text
        return "Answer: No\n\nSummary: NONE"

    return handler
