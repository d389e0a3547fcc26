"""CVE catalog: NVD feed access, snapshot files, and dataset curation.

Provides:
- CveId / CveRecord / CurationFilter domain types
- validate_cve_id for canonical id normalization
- NvdClient (live REST feed, rate-limited) and SnapshotCatalog (offline JSON)
- curate_dataset, the severity/date/CWE filter that builds the analysis set
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from datetime import date
from typing import Iterable, Iterator
from urllib.parse import urlparse

import requests

from .errors import MalformedId, NotFound, RateLimited, Upstream

logger = logging.getLogger(__name__)

NVD_API_URL = "https://services.nvd.nist.gov/rest/json/cves/2.0"
NVD_API_KEY_ENV = "NVD_API_KEY"

_CVE_ID_RE = re.compile(r"CVE-(\d{4})-(\d{4,})")

# NVD placeholder CWE entries with no page behind them; treated as unmapped.
_UNMAPPED_CWE = {"NVD-CWE-NOINFO", "NVD-CWE-OTHER"}
_REAL_CWE_RE = re.compile(r"CWE-\d+")


@dataclass(frozen=True, order=True)
class CveId:
    """Canonical CVE identifier, e.g. "CVE-2024-0302"."""

    value: str

    def __post_init__(self):
        m = _CVE_ID_RE.fullmatch(self.value)
        if m is None:
            raise MalformedId(f"not a canonical CVE id: {self.value!r}")

    def __str__(self) -> str:
        return self.value

    @property
    def year(self) -> int:
        return int(self.value.split("-")[1])

    @property
    def number(self) -> int:
        return int(self.value.split("-")[2])

    @property
    def sort_key(self) -> tuple[int, int]:
        return (self.year, self.number)


def validate_cve_id(raw: str) -> CveId:
    """Normalize a raw string into a CveId; only the "CVE" prefix is case-folded."""
    if not isinstance(raw, str):
        raise MalformedId(f"expected string, got {type(raw).__name__}")
    m = re.fullmatch(r"(?i:CVE)-(\d{4})-(\d{4,})", raw)
    if m is None:
        raise MalformedId(f"not a canonical CVE id: {raw!r}")
    return CveId("CVE-" + raw[4:])


def _check_url(url: str) -> bool:
    parts = urlparse(url)
    return bool(parts.scheme in ("http", "https", "ftp") and parts.netloc)


@dataclass
class CveRecord:
    """One vulnerability record as curated from the NVD feed."""

    id: CveId
    description: str
    cvss_v3_score: float
    cwe_ids: list[str]
    reference_urls: list[str]
    published: str  # ISO-8601 date

    def __post_init__(self):
        if not 0.0 <= self.cvss_v3_score <= 10.0:
            raise ValueError(f"cvss_v3_score out of range: {self.cvss_v3_score}")
        bad = [u for u in self.reference_urls if not _check_url(u)]
        if bad:
            raise ValueError(f"invalid reference urls: {bad}")
        # normalizes both "2024-01-02" and full timestamps
        self.published = str(self.published)[:10]
        date.fromisoformat(self.published)

    @property
    def published_date(self) -> date:
        return date.fromisoformat(self.published)

    @property
    def real_cwe_ids(self) -> list[str]:
        """CWE ids with an actual weakness page (drops NVD-CWE-noinfo/Other)."""
        return [c for c in self.cwe_ids if _REAL_CWE_RE.fullmatch(c)]

    def to_dict(self) -> dict:
        return {
            "id": self.id.value,
            "description": self.description,
            "cvss_v3_score": self.cvss_v3_score,
            "cwe_ids": list(self.cwe_ids),
            "reference_urls": list(self.reference_urls),
            "published": self.published,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CveRecord":
        return cls(
            id=validate_cve_id(d["id"]),
            description=d.get("description", ""),
            cvss_v3_score=float(d["cvss_v3_score"]),
            cwe_ids=list(d.get("cwe_ids", [])),
            reference_urls=list(d.get("reference_urls", [])),
            published=d["published"],
        )


@dataclass
class CurationFilter:
    """Predicates that select the analysis dataset from a candidate feed."""

    min_cvss: float = 9.0
    date_from: date = date(2024, 1, 1)
    date_to: date = date(2024, 7, 25)
    require_cwe: bool = True

    def __post_init__(self):
        if not 0.0 <= self.min_cvss <= 10.0:
            raise ValueError(f"min_cvss out of range: {self.min_cvss}")
        if self.date_from > self.date_to:
            raise ValueError("date_from is after date_to")

    def matches(self, record: CveRecord) -> bool:
        if record.cvss_v3_score < self.min_cvss:
            return False
        if not self.date_from <= record.published_date <= self.date_to:
            return False
        if self.require_cwe and not record.real_cwe_ids:
            return False
        return True


def curate_dataset(candidates: Iterable[CveRecord], filt: CurationFilter) -> list[CveRecord]:
    """Pure filter: records matching all predicates, sorted by id ascending."""
    kept = [r for r in candidates if filt.matches(r)]
    kept.sort(key=lambda r: r.id.sort_key)
    return kept


def _parse_nvd_item(item: dict) -> CveRecord:
    """Build a CveRecord from one entry of the NVD 2.0 JSON feed."""
    cve = item["cve"]
    cve_id = validate_cve_id(cve["id"])

    description = ""
    for d in cve.get("descriptions", []):
        if d.get("lang") == "en":
            description = d.get("value", "")
            break

    # highest v3.x base score across all CVSS v3.0/v3.1 entries
    score = 0.0
    metrics = cve.get("metrics", {})
    for key in ("cvssMetricV31", "cvssMetricV30"):
        for entry in metrics.get(key, []):
            base = entry.get("cvssData", {}).get("baseScore")
            if base is not None:
                score = max(score, float(base))

    cwe_ids: list[str] = []
    for weakness in cve.get("weaknesses", []):
        for d in weakness.get("description", []):
            value = d.get("value", "")
            if value and value not in cwe_ids:
                cwe_ids.append(value)

    reference_urls: list[str] = []
    for ref in cve.get("references", []):
        url = ref.get("url", "")
        if url and url not in reference_urls:
            reference_urls.append(url)

    return CveRecord(
        id=cve_id,
        description=description,
        cvss_v3_score=score,
        cwe_ids=cwe_ids,
        reference_urls=reference_urls,
        published=cve.get("published", "1970-01-01")[:10],
    )


class NvdClient:
    """Thin client for the NVD REST feed with a global rate limiter.

    Without an API key NVD allows 5 requests per rolling 30 s window; with a
    key the limit is 50. The limiter enforces a minimum interval between
    requests and honors Retry-After on 403/429 responses.
    """

    def __init__(
        self,
        base_url: str = NVD_API_URL,
        api_key: str | None = None,
        *,
        min_interval: float | None = None,
        timeout: float = 30.0,
        max_retries: int = 3,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("?")
        self.api_key = api_key if api_key is not None else os.environ.get(NVD_API_KEY_ENV)
        if min_interval is None:
            min_interval = 0.7 if self.api_key else 6.0
        self.min_interval = min_interval
        self.timeout = timeout
        self.max_retries = max_retries
        self.session = session or requests.Session()
        self._lock = threading.Lock()
        self._last_request = 0.0

    def _throttle(self):
        with self._lock:
            wait = self._last_request + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()

    def _get(self, params: dict) -> dict:
        headers = {"apiKey": self.api_key} if self.api_key else {}
        last_exc: Exception | None = None
        for attempt in range(self.max_retries + 1):
            self._throttle()
            try:
                resp = self.session.get(
                    self.base_url, params=params, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_exc = Upstream(f"NVD request failed: {exc}")
                continue
            if resp.status_code in (403, 429):
                retry_after = float(resp.headers.get("Retry-After", "6") or 6)
                if attempt < self.max_retries:
                    logger.warning("NVD rate limited; sleeping %.1fs", retry_after)
                    time.sleep(retry_after)
                    continue
                raise RateLimited("NVD rate limit persisted", retry_after=retry_after)
            if resp.status_code != 200:
                raise Upstream(f"NVD returned HTTP {resp.status_code}")
            try:
                return resp.json()
            except ValueError as exc:
                raise Upstream(f"NVD payload was not JSON: {exc}") from exc
        raise last_exc or Upstream("NVD request failed")

    def fetch_cve(self, cve_id: CveId) -> CveRecord:
        """Fetch one record by id; NotFound when the feed has no entry."""
        data = self._get({"cveId": cve_id.value})
        items = data.get("vulnerabilities", [])
        if not items:
            raise NotFound(f"no NVD entry for {cve_id}")
        try:
            return _parse_nvd_item(items[0])
        except (KeyError, TypeError, ValueError) as exc:
            raise Upstream(f"could not parse NVD entry for {cve_id}: {exc}") from exc

    def iter_published(self, start: date, end: date, page_size: int = 2000) -> Iterator[CveRecord]:
        """Stream all records published in [start, end], paging the feed."""
        index = 0
        while True:
            data = self._get(
                {
                    "pubStartDate": f"{start.isoformat()}T00:00:00.000",
                    "pubEndDate": f"{end.isoformat()}T23:59:59.999",
                    "resultsPerPage": page_size,
                    "startIndex": index,
                }
            )
            items = data.get("vulnerabilities", [])
            for item in items:
                try:
                    yield _parse_nvd_item(item)
                except (KeyError, TypeError, ValueError, MalformedId) as exc:
                    logger.warning("skipping unparseable NVD entry: %s", exc)
            total = int(data.get("totalResults", 0))
            index += len(items)
            if index >= total or not items:
                return


class SnapshotCatalog:
    """Offline catalog backed by a JSON snapshot so curation is reproducible."""

    def __init__(self, path: str):
        self.path = path
        self._records = {r.id: r for r in load_snapshot(path)}

    def fetch_cve(self, cve_id: CveId) -> CveRecord:
        try:
            return self._records[cve_id]
        except KeyError:
            raise NotFound(f"no snapshot entry for {cve_id}") from None

    def iter_records(self) -> Iterator[CveRecord]:
        yield from self._records.values()


def load_snapshot(path: str) -> list[CveRecord]:
    """Read a snapshot file: a JSON array of CveRecord objects."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"snapshot {path} is not a JSON array")
    return [CveRecord.from_dict(d) for d in data]


def save_snapshot(records: Iterable[CveRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=2)
        fh.write("\n")
