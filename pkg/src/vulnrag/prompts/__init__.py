"""Prompt catalog: every template the pipeline sends, loaded from plain-text
files in this directory so any wording change is an explicit diff.

Placeholders use {name} syntax with a fixed vocabulary; rendering fails on
unbound placeholders and guarantees none survive in the output. Model
addenda (addendum_<prefix>.txt) attach by model-id prefix so base templates
stay identical across models.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

from ..errors import UnboundPlaceholder

TEMPLATE_NAMES = (
    "generation",
    "relevancy_exploitation",
    "relevancy_mitigation",
    "evaluation",
)

PLACEHOLDER_VOCAB = ("cve_id", "content", "response", "evidence", "question")

_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDER_VOCAB) + r")\}")

_TEMPLATE_DIR = Path(__file__).parent

# Bindings used for the golden-file renderings under golden/.
CANONICAL_BINDINGS = {
    "cve_id": "CVE-2024-0302",
    "content": "[canonical content block]",
    "response": "[canonical response block]",
    "evidence": "[canonical evidence block]",
    "question": "exploitation",
}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body))


class PromptCatalog:
    """Loads templates and addenda once; immutable and shareable afterwards."""

    def __init__(self, template_dir: str | Path | None = None):
        self._dir = Path(template_dir) if template_dir else _TEMPLATE_DIR
        self._templates: dict[str, PromptTemplate] = {}
        for name in TEMPLATE_NAMES:
            path = self._dir / f"{name}.txt"
            self._templates[name] = PromptTemplate(name=name, body=path.read_text(encoding="utf-8"))
        self._addenda: dict[str, str] = {}
        for path in sorted(self._dir.glob("addendum_*.txt")):
            prefix = path.stem.removeprefix("addendum_")
            self._addenda[prefix] = path.read_text(encoding="utf-8")

    def template(self, name: str) -> PromptTemplate:
        return self._templates[name]

    def addendum_for(self, model_id: str | None) -> str | None:
        if not model_id:
            return None
        lowered = model_id.lower()
        for prefix, text in self._addenda.items():
            if lowered.startswith(prefix):
                return text
        return None

    def _substitute(self, body: str, bindings: dict[str, str]) -> str:
        required = frozenset(_PLACEHOLDER_RE.findall(body))
        missing = required - bindings.keys()
        if missing:
            raise UnboundPlaceholder(f"unbound placeholders: {sorted(missing)}")
        # single-pass substitution: every template marker is consumed here,
        # so none can survive regardless of what the bound values contain
        return _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), body)

    def render(self, name: str, bindings: dict[str, str], model_id: str | None = None) -> str:
        """Render a template; appends the model's addendum when one matches."""
        body = self._templates[name].body
        rendered = self._substitute(body, bindings)
        addendum = self.addendum_for(model_id)
        if addendum:
            rendered = rendered.rstrip("\n") + "\n\n" + addendum
        return rendered

    def render_generation(
        self, cve_id: str, content: str | None, model_id: str | None = None
    ) -> str:
        """Generation prompt; content=None renders the prompt-only variant with
        the Relevant Information block removed."""
        if content is not None:
            return self.render("generation", {"cve_id": cve_id, "content": content}, model_id)
        body = self._templates["generation"].body
        body = body.replace(
            "Consider the Relevant Information provided below and answer the Query.",
            "Answer the Query.",
        )
        body = re.sub(r"Relevant Information: \{content\}\n+", "", body)
        return self._substitute(body, {"cve_id": cve_id})

    def catalog_hash(self) -> str:
        """Content hash over all templates and addenda, for run audit records."""
        h = hashlib.sha256()
        for name in TEMPLATE_NAMES:
            h.update(name.encode())
            h.update(b"\x00")
            h.update(self._templates[name].body.encode("utf-8"))
            h.update(b"\x00")
        for prefix in sorted(self._addenda):
            h.update(prefix.encode())
            h.update(b"\x00")
            h.update(self._addenda[prefix].encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


_default_catalog: PromptCatalog | None = None


def default_catalog() -> PromptCatalog:
    global _default_catalog
    if _default_catalog is None:
        _default_catalog = PromptCatalog()
    return _default_catalog
