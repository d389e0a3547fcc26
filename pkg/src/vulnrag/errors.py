"""Exception types shared across the vulnrag pipeline."""

from __future__ import annotations


class VulnragError(Exception):
    """Base class for all vulnrag errors."""


class MalformedId(VulnragError):
    """A string does not match the canonical CVE-ID pattern."""


class NotFound(VulnragError):
    """The requested CVE does not exist in the feed."""


class Upstream(VulnragError):
    """An upstream HTTP call or payload parse failed."""


class RateLimited(Upstream):
    """Upstream rejected the request for rate reasons; retry_after in seconds."""

    def __init__(self, message: str, retry_after: float = 0.0):
        super().__init__(message)
        self.retry_after = retry_after


class NvdUnreachable(VulnragError):
    """The NVD page for a CVE could not be fetched; it is the root source."""


class ContextOverflow(VulnragError):
    """A prompt would exceed the model's context window (local check)."""


class NoScript(VulnragError):
    """The scripted chat backend has no entry for a request fingerprint."""


class TranscriptMissing(VulnragError):
    """Replay mode found no transcript entry for a request fingerprint."""


class EmptyInput(VulnragError):
    """Text input was empty after whitespace trimming."""


class UnboundPlaceholder(VulnragError):
    """A prompt template placeholder was left without a binding."""


class NoContent(VulnragError):
    """No usable page content was available to index."""


class NoContext(VulnragError):
    """A retrieval strategy produced no context at all."""


class PageFailed(VulnragError):
    """An operation required an Ok page but got a failed one."""


class DimensionMismatch(VulnragError):
    """Two vectors have different lengths."""


class ZeroVector(VulnragError):
    """Cosine similarity is undefined for an all-zero vector."""


class VerdictParseError(VulnragError):
    """Self-critique output could not be parsed into a single verdict."""

    def __init__(self, message: str, raw_output: str = ""):
        super().__init__(message)
        self.raw_output = raw_output


class EmptySegment(VulnragError):
    """Provenance metrics need both segments nonempty."""


class ConfigError(VulnragError):
    """A run configuration is invalid."""


class CveSetMismatch(VulnragError):
    """Two runs cover different CVE sets and cannot be compared."""
