"""CVE id validation, NVD feed parsing, snapshots, and dataset curation."""

from __future__ import annotations

import json
from datetime import date

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vulnrag.catalog import (
    CurationFilter,
    CveRecord,
    NvdClient,
    SnapshotCatalog,
    curate_dataset,
    load_snapshot,
    save_snapshot,
    validate_cve_id,
)
from vulnrag.errors import MalformedId, NotFound, RateLimited, Upstream

from conftest import make_record


# -- validate_cve_id ------------------------------------------------------------


def test_canonical_id_passes_through():
    assert validate_cve_id("CVE-2024-0302").value == "CVE-2024-0302"


def test_lowercase_prefix_is_normalized():
    assert validate_cve_id("cve-2024-0244").value == "CVE-2024-0244"


@pytest.mark.parametrize(
    "raw",
    [
        "CVE-24-1",
        "CVE-2024-302",
        "CVE-2024-",
        "2024-0302",
        "CVE_2024_0302",
        " CVE-2024-0302",
        "CVE-2024-0302 ",
        "",
        "CVE-20245-0302",
    ],
)
def test_malformed_ids_rejected(raw):
    with pytest.raises(MalformedId):
        validate_cve_id(raw)


def test_long_number_part_is_valid():
    assert validate_cve_id("cve-2024-123456").value == "CVE-2024-123456"


def test_id_sort_key_is_numeric():
    a = validate_cve_id("CVE-2024-9999")
    b = validate_cve_id("CVE-2024-10000")
    assert a.sort_key < b.sort_key


# -- NVD client ------------------------------------------------------------------


NVD_FIXTURE_ITEM = {
    "cve": {
        "id": "CVE-2024-0244",
        "published": "2024-02-07T00:00:00.000",
        "descriptions": [
            {"lang": "es", "value": "ignored"},
            {
                "lang": "en",
                "value": "Buffer overflow in the CPCA PDL protocol processing of certain printers.",
            },
        ],
        "metrics": {
            "cvssMetricV31": [
                {"cvssData": {"baseScore": 9.8}},
                {"cvssData": {"baseScore": 8.1}},
            ],
            "cvssMetricV30": [{"cvssData": {"baseScore": 9.1}}],
        },
        "weaknesses": [
            {"description": [{"lang": "en", "value": "CWE-787"}]},
            {"description": [{"lang": "en", "value": "CWE-787"}]},
        ],
        "references": [
            {"url": "https://psirt.canon/advisory-information/cp2024-001/"},
            {"url": "https://www.canon-europe.com/support/product-security-latest-news/"},
        ],
    }
}


def _nvd_client(fixture_server) -> NvdClient:
    return NvdClient(
        base_url=f"{fixture_server.base_url}/nvdapi/rest/json/cves/2.0",
        api_key="",
        min_interval=0.0,
        max_retries=1,
    )


def test_fetch_cve_parses_fixture_feed_field_for_field(fixture_server):
    fixture_server.add(
        "/nvdapi/rest/json/cves/2.0?cveId=CVE-2024-0244",
        json.dumps({"vulnerabilities": [NVD_FIXTURE_ITEM]}),
        content_type="application/json",
    )
    record = _nvd_client(fixture_server).fetch_cve(validate_cve_id("CVE-2024-0244"))
    assert record.id.value == "CVE-2024-0244"
    assert record.description.startswith("Buffer overflow in the CPCA")
    assert record.cvss_v3_score == 9.8  # highest v3.x base score
    assert record.cwe_ids == ["CWE-787"]
    assert record.reference_urls == [
        "https://psirt.canon/advisory-information/cp2024-001/",
        "https://www.canon-europe.com/support/product-security-latest-news/",
    ]
    assert record.published == "2024-02-07"
    # the advisory hyperlink the analyst workflow depends on is present
    assert any("psirt.canon/advisory-information/cp2024-001" in u for u in record.reference_urls)


def test_fetch_cve_not_found(fixture_server):
    fixture_server.add(
        "/nvdapi/rest/json/cves/2.0?cveId=CVE-1900-0001",
        json.dumps({"vulnerabilities": []}),
        content_type="application/json",
    )
    with pytest.raises(NotFound):
        _nvd_client(fixture_server).fetch_cve(validate_cve_id("CVE-1900-0001"))


def test_fetch_cve_upstream_error(fixture_server):
    fixture_server.add(
        "/nvdapi/rest/json/cves/2.0?cveId=CVE-2024-0001", "boom", status=500
    )
    with pytest.raises(Upstream):
        _nvd_client(fixture_server).fetch_cve(validate_cve_id("CVE-2024-0001"))


def test_persistent_rate_limit_honors_retry_after(fixture_server):
    path = "/nvdapi/rest/json/cves/2.0?cveId=CVE-2024-0002"
    fixture_server.add(path, "slow down", status=429, headers={"Retry-After": "0"})
    client = _nvd_client(fixture_server)
    with pytest.raises(RateLimited) as excinfo:
        client.fetch_cve(validate_cve_id("CVE-2024-0002"))
    assert excinfo.value.retry_after == 0.0
    # the client retried (sleeping Retry-After between attempts) before giving up
    assert fixture_server.hit_count(path) == client.max_retries + 1


def test_fetch_cve_is_deterministic_against_fixed_feed(fixture_server):
    fixture_server.add(
        "/nvdapi/rest/json/cves/2.0?cveId=CVE-2024-0244",
        json.dumps({"vulnerabilities": [NVD_FIXTURE_ITEM]}),
        content_type="application/json",
    )
    client = _nvd_client(fixture_server)
    first = client.fetch_cve(validate_cve_id("CVE-2024-0244"))
    second = client.fetch_cve(validate_cve_id("CVE-2024-0244"))
    assert first.to_dict() == second.to_dict()


# -- snapshots --------------------------------------------------------------------


def test_snapshot_round_trip(tmp_path):
    records = [make_record(1), make_record(2, cvss=7.0, cwes=())]
    path = tmp_path / "snapshot.json"
    save_snapshot(records, str(path))
    loaded = load_snapshot(str(path))
    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in records]

    catalog = SnapshotCatalog(str(path))
    assert catalog.fetch_cve(records[0].id).to_dict() == records[0].to_dict()
    with pytest.raises(NotFound):
        catalog.fetch_cve(validate_cve_id("CVE-1900-0001"))


def test_snapshot_field_names_match_published_schema(tmp_path):
    path = tmp_path / "snapshot.json"
    save_snapshot([make_record(7)], str(path))
    raw = json.loads(path.read_text())
    assert set(raw[0]) == {
        "id",
        "description",
        "cvss_v3_score",
        "cwe_ids",
        "reference_urls",
        "published",
    }


# -- curation ----------------------------------------------------------------------


def default_filter() -> CurationFilter:
    return CurationFilter(
        min_cvss=9.0,
        date_from=date(2024, 1, 1),
        date_to=date(2024, 7, 25),
        require_cwe=True,
    )


def test_curate_empty_stream_is_empty():
    assert curate_dataset([], default_filter()) == []


def test_curate_five_records_two_match():
    # oracle: manual predicate evaluation of each record
    records = [
        make_record(10, cvss=9.8),                              # match
        make_record(11, cvss=8.9),                              # cvss too low
        make_record(12, published="2023-12-31"),                # before window
        make_record(13, cwes=()),                               # no CWE mapping
        make_record(14, cvss=9.0, published="2024-07-25"),      # match (boundaries)
    ]
    curated = curate_dataset(records, default_filter())
    assert [r.id.value for r in curated] == ["CVE-2024-0010", "CVE-2024-0014"]


def test_noinfo_cwe_counts_as_unmapped():
    noinfo = make_record(20, cwes=("NVD-CWE-noinfo",))
    other = make_record(21, cwes=("NVD-CWE-Other",))
    mixed = make_record(22, cwes=("NVD-CWE-noinfo", "CWE-89"))
    curated = curate_dataset([noinfo, other, mixed], default_filter())
    assert [r.id.value for r in curated] == ["CVE-2024-0022"]
    # all mappings stay on the record; only the filter treats placeholders as unmapped
    assert curated[0].cwe_ids == ["NVD-CWE-noinfo", "CWE-89"]
    assert curated[0].real_cwe_ids == ["CWE-89"]


def test_curate_requires_cwe_only_when_asked():
    record = make_record(30, cwes=())
    filt = default_filter()
    filt.require_cwe = False
    assert curate_dataset([record], filt) == [record]


def test_curate_output_sorted_by_id():
    records = [make_record(10000), make_record(9999), make_record(123)]
    curated = curate_dataset(records, default_filter())
    assert [r.id.value for r in curated] == [
        "CVE-2024-0123",
        "CVE-2024-9999",
        "CVE-2024-10000",
    ]


@st.composite
def record_strategy(draw):
    suffix = draw(st.integers(min_value=1, max_value=99999))
    cvss = draw(st.floats(min_value=0.0, max_value=10.0, allow_nan=False))
    month = draw(st.integers(min_value=1, max_value=12))
    day = draw(st.integers(min_value=1, max_value=28))
    has_cwe = draw(st.booleans())
    return make_record(
        suffix,
        cvss=round(cvss, 1),
        cwes=("CWE-79",) if has_cwe else (),
        published=f"2024-{month:02d}-{day:02d}",
    )


@settings(max_examples=60, deadline=None)
@given(st.lists(record_strategy(), max_size=25))
def test_curation_is_a_pure_idempotent_filter(records):
    filt = default_filter()
    curated = curate_dataset(records, filt)
    ids = {id(r) for r in records}
    # every output is an input that satisfies all predicates
    for r in curated:
        assert id(r) in ids
        assert r.cvss_v3_score >= filt.min_cvss
        assert filt.date_from <= r.published_date <= filt.date_to
        assert r.real_cwe_ids
    # every qualifying input appears in the output
    expected = {id(r) for r in records if filt.matches(r)}
    assert {id(r) for r in curated} == expected
    # idempotence
    assert curate_dataset(curated, filt) == curated


def test_record_validation_rejects_bad_score_and_urls():
    with pytest.raises(ValueError):
        make_record(40, cvss=10.1)
    with pytest.raises(ValueError):
        CveRecord(
            id=validate_cve_id("CVE-2024-0001"),
            description="x",
            cvss_v3_score=9.0,
            cwe_ids=["CWE-79"],
            reference_urls=["not a url"],
            published="2024-01-01",
        )
