"""Prompt templates: bracketed-placeholder rendering and asset loading.

Templates live as UTF-8 text assets (one file per template id) so the exact
wording stays diffable. Placeholders are bracketed uppercase tokens such as
``[STORY]`` or ``[EVIDENCE CHAIN]``; the numeric knobs render through ``[N]``
and ``[B]`` as decimal integers.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import MissingBindingError

PLACEHOLDER_RE = re.compile(r"\[([A-Z](?:[A-Z ]*[A-Z])?)\]")

# Scanner ground truth for every shipped template.
DOCUMENTED_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "initial_story": frozenset({"RETRIEVED EXAMPLE", "GENRE", "EMOTION", "SUBJECTS", "PLOTS"}),
    "initial_story_bare": frozenset({"GENRE", "EMOTION", "SUBJECTS", "PLOTS"}),
    "ambiguities": frozenset({"STORY", "N"}),
    "ambiguities_conditioned": frozenset({"STORY", "N", "GENRE", "EMOTION", "SUBJECTS", "PLOTS"}),
    "asking_why": frozenset({"STORY", "EVIDENCE CHAIN", "B"}),
    "chain_selection": frozenset({"STORY", "EVIDENCE CHAINS"}),
    "rewrite": frozenset({"STORY", "EVIDENCE CHAINS"}),
    "cot_suffix": frozenset({"N"}),
    "extract_mood": frozenset({"STORY"}),
    "extract_subjects": frozenset({"STORY"}),
    "extract_plots": frozenset({"STORY"}),
    "plot_count": frozenset({"STORY"}),
    "prompt_e_variants": frozenset(),
    "likert_grammar": frozenset({"STORY"}),
    "likert_coherence": frozenset({"STORY"}),
    "likert_likability": frozenset({"STORY"}),
    "likert_relevance": frozenset({"STORY", "GENRE", "EMOTION", "SUBJECTS", "PLOTS"}),
    "likert_complexity": frozenset({"STORY"}),
    "likert_creativity": frozenset({"STORY"}),
}


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    def placeholders(self) -> frozenset[str]:
        return frozenset(m.group(1) for m in PLACEHOLDER_RE.finditer(self.body))


def render(template: PromptTemplate, bindings: Mapping[str, str | int]) -> str:
    """Substitute every placeholder in one pass; extra bindings are ignored.

    Integer values render as decimals. Raises if a body placeholder has no
    binding; bound values are inserted verbatim and never rescanned.
    """
    missing = [name for name in template.placeholders() if name not in bindings]
    if missing:
        raise MissingBindingError(template.template_id, sorted(missing)[0])

    def _sub(match: re.Match[str]) -> str:
        value = bindings[match.group(1)]
        return str(value) if isinstance(value, int) else value

    return PLACEHOLDER_RE.sub(_sub, template.body)


class TemplateSet:
    """All templates loaded from one asset directory."""

    def __init__(self, templates: Mapping[str, PromptTemplate], source: str):
        self._templates = dict(templates)
        self.source = source

    def __getitem__(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise KeyError(f"no template {template_id!r} in {self.source}") from None

    def __contains__(self, template_id: str) -> bool:
        return template_id in self._templates

    def ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._templates))

    def asset_hashes(self) -> dict[str, str]:
        """sha256 of each template body, keyed by id; goes into run manifests."""
        return {
            tid: hashlib.sha256(t.body.encode("utf-8")).hexdigest()
            for tid, t in sorted(self._templates.items())
        }


def _builtin_dir() -> Path:
    return Path(str(resources.files("grove").joinpath("assets/templates")))


def load_templates(directory: str | Path | None = None) -> TemplateSet:
    """Load every ``<id>.txt`` file from the directory (default: built-in assets)."""
    base = Path(directory) if directory is not None else _builtin_dir()
    templates = {}
    for path in sorted(base.glob("*.txt")):
        body = path.read_text(encoding="utf-8").rstrip("\n")
        templates[path.stem] = PromptTemplate(template_id=path.stem, body=body)
    if not templates:
        raise FileNotFoundError(f"no *.txt templates found in {base}")
    return TemplateSet(templates, source=str(base))


_DEFAULT: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_templates()
    return _DEFAULT
