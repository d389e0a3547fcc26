"""Web ingestion: page fetching, visible-text extraction, and an on-disk cache.

A run must be reproducible, so every fetched page lands in a content cache
keyed by URL; warm-cache runs never touch the network. Failures are encoded
in the page status instead of raised, so one dead link cannot abort a CVE.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from html.parser import HTMLParser
from typing import Iterator
from urllib.parse import urlparse

import requests

from .catalog import CveRecord
from .errors import NvdUnreachable

logger = logging.getLogger(__name__)

NVD_PAGE_URL = "https://nvd.nist.gov/vuln/detail/{cve_id}"
CWE_PAGE_URL = "https://cwe.mitre.org/data/definitions/{number}.html"
AQUA_PAGE_URL = "https://avd.aquasec.com/nvd/{cve_id_lower}/"

# Tags whose boundaries start a new output line.
_BLOCK_TAGS = {
    "p", "div", "br", "li", "ul", "ol", "dl", "dt", "dd", "table", "tr",
    "h1", "h2", "h3", "h4", "h5", "h6", "section", "article", "aside",
    "header", "footer", "nav", "main", "blockquote", "pre", "form",
    "fieldset", "figure", "figcaption", "hr", "address", "caption",
}
# Table cells are joined by single spaces, not newlines.
_CELL_TAGS = {"td", "th"}
_DROP_TAGS = {"script", "style", "noscript", "template"}


class _TextExtractor(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self._parts: list[str] = []
        self._drop_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in _DROP_TAGS:
            self._drop_depth += 1
        elif tag in _BLOCK_TAGS:
            self._parts.append("\n")
        elif tag in _CELL_TAGS:
            self._parts.append(" ")

    def handle_startendtag(self, tag, attrs):
        if tag in _BLOCK_TAGS:
            self._parts.append("\n")

    def handle_endtag(self, tag):
        if tag in _DROP_TAGS:
            self._drop_depth = max(0, self._drop_depth - 1)
        elif tag in _BLOCK_TAGS:
            self._parts.append("\n")
        elif tag in _CELL_TAGS:
            self._parts.append(" ")

    def handle_data(self, data):
        if not self._drop_depth:
            self._parts.append(data)

    def text(self) -> str:
        raw = "".join(self._parts)
        lines = []
        for line in raw.split("\n"):
            line = re.sub(r"[ \t\r\f\v\xa0]+", " ", line).strip()
            if line:
                lines.append(line)
        return "\n".join(lines)


def extract_text(payload: bytes | str) -> str:
    """Extract visible text: tags stripped, script/style dropped, blocks on
    their own lines, whitespace runs collapsed to single spaces within lines.

    Non-HTML input passes through with the same whitespace normalization.
    """
    if isinstance(payload, bytes):
        payload = payload.decode("utf-8", errors="replace")
    parser = _TextExtractor()
    try:
        parser.feed(payload)
        parser.close()
    except Exception:  # pragma: no cover - html.parser is very tolerant
        logger.warning("HTML parse failed; falling back to raw text")
        sanitized = re.sub(r"<[^>]*>", " ", payload)
        parser = _TextExtractor()
        parser.feed(sanitized)
        parser.close()
    return parser.text()


@dataclass
class PageContent:
    """One fetched page: either Ok with extracted text, or Failed(reason)."""

    url: str
    fetched_at: str
    status: str  # "ok" | "failed"
    text: str = ""
    reason: str | None = None
    content_type: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {
            "url": self.url,
            "fetched_at": self.fetched_at,
            "status": self.status,
            "text": self.text,
            "reason": self.reason,
            "content_type": self.content_type,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PageContent":
        return cls(
            url=d["url"],
            fetched_at=d["fetched_at"],
            status=d["status"],
            text=d.get("text", ""),
            reason=d.get("reason"),
            content_type=d.get("content_type"),
        )


@dataclass
class SourceSet:
    """All pages retrieved for one CVE, in analyst-workflow order."""

    cve: object  # CveId; kept loose to avoid an import cycle in type checking
    nvd_page: PageContent
    cwe_pages: list[PageContent] = field(default_factory=list)
    aqua_page: PageContent | None = None
    hyperlink_pages: list[PageContent] = field(default_factory=list)

    def labeled_pages(self) -> Iterator[tuple[str, PageContent]]:
        """Yield (category, page) pairs: NVD, CWE, Aqua, then hyperlinks."""
        yield "nvd", self.nvd_page
        for p in self.cwe_pages:
            yield "cwe", p
        if self.aqua_page is not None:
            yield "aqua", self.aqua_page
        for p in self.hyperlink_pages:
            yield "hyperlinks", p

    def pages(self) -> list[PageContent]:
        return [p for _, p in self.labeled_pages()]

    @property
    def page_count(self) -> int:
        return len(self.pages())

    def select(self, categories: tuple[str, ...] | list[str]) -> list[tuple[str, str]]:
        """(url, text) for Ok pages in the given categories, source order kept."""
        wanted = {c.lower() for c in categories}
        unknown = wanted - {"nvd", "cwe", "aqua", "hyperlinks"}
        if unknown:
            raise ValueError(f"unknown source categories: {sorted(unknown)}")
        return [
            (p.url, p.text)
            for category, p in self.labeled_pages()
            if category in wanted and p.ok and p.text
        ]


def _utcnow() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class PageCache:
    """URL-addressed page store; safe for concurrent readers and writers."""

    def __init__(self, cache_dir: str, ttl_days: float = 30.0):
        self.cache_dir = cache_dir
        self.ttl_seconds = ttl_days * 86400
        os.makedirs(cache_dir, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, url: str) -> str:
        digest = hashlib.sha256(url.encode("utf-8")).hexdigest()
        return os.path.join(self.cache_dir, digest + ".json")

    def get(self, url: str) -> PageContent | None:
        path = self._path(url)
        try:
            with open(path, encoding="utf-8") as fh:
                entry = json.load(fh)
        except (OSError, ValueError):
            return None
        if time.time() - entry.get("stored_at", 0) > self.ttl_seconds:
            return None
        return PageContent.from_dict(entry["page"])

    def put(self, page: PageContent) -> None:
        entry = {"stored_at": time.time(), "page": page.to_dict()}
        path = self._path(page.url)
        with self._lock:
            fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump(entry, fh)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise


class WebIngestor:
    """Fetches and extracts pages with caching, retries, and host politeness.

    url_rewrite maps URL prefixes to replacements before the network call
    (tests point live hosts at a local fixture server); the cache key stays
    the original URL so artifacts are independent of the rewrite.
    """

    def __init__(
        self,
        cache_dir: str,
        *,
        ttl_days: float = 30.0,
        url_rewrite: dict[str, str] | None = None,
        min_host_interval: float = 1.0,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 20.0,
        max_workers: int = 8,
        user_agent: str = "vulnrag/0.1 (+research pipeline)",
    ):
        self.cache = PageCache(cache_dir, ttl_days=ttl_days)
        self.url_rewrite = dict(url_rewrite or {})
        self.min_host_interval = min_host_interval
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.max_workers = max_workers
        self.session = requests.Session()
        self.session.headers["User-Agent"] = user_agent
        self._host_locks: dict[str, threading.Lock] = {}
        self._host_last: dict[str, float] = {}
        self._registry_lock = threading.Lock()

    def _rewrite(self, url: str) -> str:
        for prefix in sorted(self.url_rewrite, key=len, reverse=True):
            if url.startswith(prefix):
                return self.url_rewrite[prefix] + url[len(prefix):]
        return url

    def _host_lock(self, host: str) -> threading.Lock:
        with self._registry_lock:
            if host not in self._host_locks:
                self._host_locks[host] = threading.Lock()
            return self._host_locks[host]

    def _polite_get(self, url: str) -> requests.Response:
        host = urlparse(url).netloc
        with self._host_lock(host):
            wait = self._host_last.get(host, 0.0) + self.min_host_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            try:
                return self.session.get(url, timeout=self.timeout)
            finally:
                self._host_last[host] = time.monotonic()

    def fetch_page(self, url: str) -> PageContent:
        """Fetch one URL through the cache. Never raises; failures are status."""
        cached = self.cache.get(url)
        if cached is not None:
            return cached

        target = self._rewrite(url)
        reason = "unknown"
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = self._polite_get(target)
            except requests.RequestException as exc:
                reason = f"request error: {exc.__class__.__name__}"
                continue
            if resp.status_code == 200:
                page = PageContent(
                    url=url,
                    fetched_at=_utcnow(),
                    status="ok",
                    text=extract_text(resp.content),
                    content_type=resp.headers.get("Content-Type"),
                )
                self.cache.put(page)
                return page
            reason = f"http {resp.status_code}"
            # 4xx is not going to improve on retry
            if 400 <= resp.status_code < 500:
                break

        page = PageContent(url=url, fetched_at=_utcnow(), status="failed", reason=reason)
        self.cache.put(page)
        return page

    def assemble_source_set(self, record: CveRecord, include_aqua: bool = False) -> SourceSet:
        """Fetch the NVD page, one CWE page per mapped weakness, every
        reference URL, and optionally the Aqua page.

        Raises NvdUnreachable only when the NVD page itself failed; all other
        failures are recorded in place.
        """
        urls = [NVD_PAGE_URL.format(cve_id=record.id.value)]
        for cwe in record.real_cwe_ids:
            urls.append(CWE_PAGE_URL.format(number=cwe.split("-")[1]))
        if include_aqua:
            urls.append(AQUA_PAGE_URL.format(cve_id_lower=record.id.value.lower()))
        urls.extend(record.reference_urls)

        # concurrent across hosts; the per-host lock serializes within a host
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            pages = list(pool.map(self.fetch_page, urls))

        n_cwe = len(record.real_cwe_ids)
        nvd_page = pages[0]
        cwe_pages = pages[1 : 1 + n_cwe]
        offset = 1 + n_cwe
        aqua_page = None
        if include_aqua:
            aqua_page = pages[offset]
            offset += 1
        hyperlink_pages = pages[offset:]

        if not nvd_page.ok:
            raise NvdUnreachable(
                f"NVD page for {record.id} failed: {nvd_page.reason}"
            )
        return SourceSet(
            cve=record.id,
            nvd_page=nvd_page,
            cwe_pages=cwe_pages,
            aqua_page=aqua_page,
            hyperlink_pages=hyperlink_pages,
        )
