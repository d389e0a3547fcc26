"""Text extraction, page fetching/caching, and source-set assembly."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vulnrag.errors import NvdUnreachable
from vulnrag.ingest import PageContent, SourceSet, extract_text

from conftest import html_page, make_record


# -- extract_text -----------------------------------------------------------------


def test_simple_inline_markup_stripped():
    assert extract_text("<p>Hello <b>world</b></p>") == "Hello world"


def test_script_dropped_and_blocks_separated():
    assert extract_text("<script>x()</script><p>A</p><p>B</p>") == "A\nB"


def test_style_and_noscript_dropped():
    html = "<style>p{}</style><noscript>nope</noscript><div>kept</div>"
    assert extract_text(html) == "kept"


def test_whitespace_runs_collapse_within_lines():
    assert extract_text("<p>a   b\t\tc</p>") == "a b c"


def test_table_cells_joined_by_spaces_rows_by_newlines():
    html = "<table><tr><td>a</td><td>b</td></tr><tr><td>c</td><td>d</td></tr></table>"
    assert extract_text(html) == "a b\nc d"


def test_entities_are_decoded():
    assert extract_text("<p>AT&amp;T &lt;works&gt;</p>") == "AT&T <works>"


def test_non_html_bytes_pass_through_normalized():
    assert extract_text(b"plain  text\n\n\nwith   gaps") == "plain text\nwith gaps"


def test_nvd_fixture_page_contains_description_verbatim():
    record = make_record(244, description="Buffer overflow in the CPCA PDL protocol.")
    html = html_page("NVD - CVE-2024-0244", [record.description, "Other content."])
    text = extract_text(html)
    assert record.description in text


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet=st.characters(blacklist_characters="<&", blacklist_categories=("Cs",))))
def test_extract_text_idempotent_on_markup_free_text(s):
    once = extract_text(s)
    assert extract_text(once) == once


@settings(max_examples=60, deadline=None)
@given(st.text())
def test_extract_text_idempotent_on_own_output_of_typical_html(s):
    # second pass over already-extracted text of arbitrary input: outputs with
    # no residual markup metacharacters must be stable
    once = extract_text(s)
    if "<" not in once and "&" not in once:
        assert extract_text(once) == once


# -- fetch_page -------------------------------------------------------------------


def _ingestor(pipeline_fixture, **kwargs):
    return pipeline_fixture.ingestor(**kwargs)


def test_fetch_page_ok_extracts_fixture_text(pipeline_fixture, fixture_server):
    fixture_server.add("/nvdweb/x", "<p>Alpha</p><p>Beta</p>")
    page = _ingestor(pipeline_fixture).fetch_page("https://nvd.nist.gov/x")
    assert page.ok
    assert page.text == "Alpha\nBeta"
    assert page.url == "https://nvd.nist.gov/x"  # original URL, not the rewrite


def test_fetch_page_404_is_failed_not_raised(pipeline_fixture, fixture_server):
    fixture_server.add("/nvdweb/missing", "nope", status=404)
    page = _ingestor(pipeline_fixture).fetch_page("https://nvd.nist.gov/missing")
    assert not page.ok
    assert page.status == "failed"
    assert page.reason == "http 404"
    assert page.text == ""


def test_fetch_page_connection_error_is_failed(tmp_path):
    from vulnrag.ingest import WebIngestor

    ingestor = WebIngestor(
        str(tmp_path / "cache"), min_host_interval=0.0, retries=0, backoff=0.0, timeout=0.5
    )
    page = ingestor.fetch_page("http://127.0.0.1:9/unreachable")
    assert not page.ok
    assert "request error" in page.reason


def test_second_fetch_served_from_cache(pipeline_fixture, fixture_server):
    fixture_server.add("/nvdweb/cached", "<p>once</p>")
    ingestor = _ingestor(pipeline_fixture)
    first = ingestor.fetch_page("https://nvd.nist.gov/cached")
    second = ingestor.fetch_page("https://nvd.nist.gov/cached")
    assert fixture_server.hit_count("/nvdweb/cached") == 1
    assert first.to_dict() == second.to_dict()


def test_cache_shared_across_ingestor_instances(pipeline_fixture, fixture_server, tmp_path):
    fixture_server.add("/nvdweb/shared", "<p>reuse me</p>")
    cache_dir = tmp_path / "shared_cache"
    first = pipeline_fixture.ingestor(cache_dir=cache_dir).fetch_page("https://nvd.nist.gov/shared")
    second = pipeline_fixture.ingestor(cache_dir=cache_dir).fetch_page("https://nvd.nist.gov/shared")
    assert fixture_server.hit_count("/nvdweb/shared") == 1
    assert first.to_dict() == second.to_dict()


def test_expired_ttl_refetches(pipeline_fixture, fixture_server):
    fixture_server.add("/nvdweb/ttl", "<p>v</p>")
    ingestor = _ingestor(pipeline_fixture, ttl_days=0.0)
    ingestor.fetch_page("https://nvd.nist.gov/ttl")
    ingestor.fetch_page("https://nvd.nist.gov/ttl")
    assert fixture_server.hit_count("/nvdweb/ttl") == 2


def test_failed_pages_are_cached_too(pipeline_fixture, fixture_server):
    fixture_server.add("/nvdweb/dead", "x", status=404)
    ingestor = _ingestor(pipeline_fixture)
    ingestor.fetch_page("https://nvd.nist.gov/dead")
    ingestor.fetch_page("https://nvd.nist.gov/dead")
    assert fixture_server.hit_count("/nvdweb/dead") == 1


# -- assemble_source_set -------------------------------------------------------------


def test_source_set_covers_all_configured_sources(pipeline_fixture):
    record = pipeline_fixture.add_cve(244, refs=2, include_aqua=True)
    sources = _ingestor(pipeline_fixture).assemble_source_set(record, include_aqua=True)
    urls = [p.url for p in sources.pages()]
    assert urls[0] == "https://nvd.nist.gov/vuln/detail/CVE-2024-0244"
    assert any("cwe.mitre.org" in u for u in urls)
    assert any("avd.aquasec.com/nvd/cve-2024-0244/" in u for u in urls)
    assert urls[-2:] == list(record.reference_urls)  # NVD reference order kept
    assert sources.page_count == 1 + 1 + 1 + 2
    assert all(p.ok for p in sources.pages())


def test_source_set_without_aqua_unless_requested(pipeline_fixture):
    record = pipeline_fixture.add_cve(300, refs=0)
    sources = _ingestor(pipeline_fixture).assemble_source_set(record, include_aqua=False)
    assert sources.aqua_page is None
    assert sources.hyperlink_pages == []
    assert sources.page_count == 2  # nvd + one cwe


def test_dead_hyperlink_recorded_in_position(pipeline_fixture):
    record = pipeline_fixture.add_cve(301, refs=3, dead_ref_positions=(1,))
    sources = _ingestor(pipeline_fixture).assemble_source_set(record)
    statuses = [p.ok for p in sources.hyperlink_pages]
    assert statuses == [True, False, True]
    assert sources.hyperlink_pages[1].reason == "http 404"
    # failures never change the page count
    assert sources.page_count == 1 + 1 + 3


def test_nvd_page_failure_is_fatal_for_that_cve(pipeline_fixture):
    record = pipeline_fixture.add_cve(302, nvd_status=500)
    with pytest.raises(NvdUnreachable):
        _ingestor(pipeline_fixture).assemble_source_set(record)


def test_warm_cache_assembly_is_byte_identical(pipeline_fixture):
    record = pipeline_fixture.add_cve(303, refs=2, include_aqua=True)
    ingestor = _ingestor(pipeline_fixture)
    first = ingestor.assemble_source_set(record, include_aqua=True)
    second = ingestor.assemble_source_set(record, include_aqua=True)
    assert [p.to_dict() for p in first.pages()] == [p.to_dict() for p in second.pages()]


def test_select_filters_by_category(pipeline_fixture):
    record = pipeline_fixture.add_cve(304, refs=1, include_aqua=True)
    sources = _ingestor(pipeline_fixture).assemble_source_set(record, include_aqua=True)
    nvd_only = sources.select(("nvd",))
    assert len(nvd_only) == 1 and "nvd.nist.gov" in nvd_only[0][0]
    both = sources.select(("nvd", "cwe"))
    assert len(both) == 2
    with pytest.raises(ValueError):
        sources.select(("nvd", "bogus"))


def test_select_skips_failed_pages():
    ok = PageContent(url="https://a/1", fetched_at="t", status="ok", text="x")
    bad = PageContent(url="https://a/2", fetched_at="t", status="failed", reason="http 500")
    sources = SourceSet(cve="CVE-2024-0001", nvd_page=ok, hyperlink_pages=[bad])
    assert sources.select(("nvd", "hyperlinks")) == [("https://a/1", "x")]
