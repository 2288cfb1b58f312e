"""The migration-related semantic concept hierarchy.

Concepts live on two levels: twenty first-level concepts spread over five
categories, each with second-level children that inherit the category.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from types import MappingProxyType
from typing import Mapping

CATEGORIES = ("Economic", "Social", "Demographic", "Environmental", "Political")


class TaxonomyError(ValueError):
    """Invalid taxonomy content. ``kind`` names the violated rule."""

    def __init__(self, kind: str, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{kind}: {message}")
        self.kind = kind
        self.line = line


def slugify(label: str) -> str:
    """Stable concept key: lowercase, runs of non-alphanumerics become one hyphen."""
    return re.sub(r"[^0-9a-z]+", "-", label.lower()).strip("-")


@dataclass(frozen=True)
class Concept:
    id: str
    label: str
    category: str
    level: int
    parent_id: str | None = None
    definition: str = ""
    augmentations: tuple[str, ...] = ()


@dataclass(frozen=True)
class AugmentedQuery:
    concept_id: str
    sentences: tuple[str, ...]

    def __post_init__(self):
        if not self.sentences:
            raise ValueError("an augmented query needs at least one sentence")
        if any(not s.strip() for s in self.sentences):
            raise ValueError("query sentences must be non-empty")


@dataclass(frozen=True)
class ConceptTree:
    concepts: Mapping[str, Concept]
    by_category: Mapping[str, tuple[str, ...]] = field(default=None)

    def __post_init__(self):
        concepts = dict(self.concepts)
        _validate(concepts.values())
        index = {c: tuple(k for k, v in concepts.items() if v.level == 1 and v.category == c)
                 for c in CATEGORIES}
        object.__setattr__(self, "concepts", MappingProxyType(concepts))
        object.__setattr__(self, "by_category", MappingProxyType(index))

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, concept_id: str) -> bool:
        return concept_id in self.concepts

    def __getitem__(self, concept_id: str) -> Concept:
        try:
            return self.concepts[concept_id]
        except KeyError:
            raise TaxonomyError("unknown concept", repr(concept_id)) from None

    def level(self, level: int) -> list[Concept]:
        return [c for c in self.concepts.values() if c.level == level]

    def children(self, concept_id: str) -> list[Concept]:
        self[concept_id]
        return [c for c in self.concepts.values() if c.parent_id == concept_id]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConceptTree):
            return NotImplemented
        return dict(self.concepts) == dict(other.concepts)

    __hash__ = None


def _validate(concepts, lines: Mapping[str, int] | None = None) -> None:
    lines = lines or {}
    by_id: dict[str, Concept] = {}
    for c in concepts:
        line = lines.get(c.id)
        if c.id in by_id:
            raise TaxonomyError("duplicate id", repr(c.id), line)
        if c.category not in CATEGORIES:
            raise TaxonomyError("unknown category", repr(c.category), line)
        if c.level not in (1, 2):
            raise TaxonomyError("bad level", f"{c.id!r} has level {c.level}", line)
        if c.level == 1 and c.parent_id is not None:
            raise TaxonomyError("unexpected parent", f"level-1 concept {c.id!r} has a parent", line)
        by_id[c.id] = c
    for c in by_id.values():
        if c.level != 2:
            continue
        line = lines.get(c.id)
        if c.parent_id is None or c.parent_id not in by_id:
            raise TaxonomyError("dangling parent", f"{c.id!r} -> {c.parent_id!r}", line)
        parent = by_id[c.parent_id]
        if parent.level != 1:
            raise TaxonomyError("wrong-level parent", f"{c.id!r} -> level-{parent.level} "
                                f"{parent.id!r}", line)
        if parent.category != c.category:
            raise TaxonomyError("category mismatch", f"{c.id!r} is {c.category}, parent "
                                f"{parent.id!r} is {parent.category}", line)


def _field(value: str) -> str | None:
    return None if value in ("", "-") else value


def load_taxonomy(source: str) -> ConceptTree:
    """Parse and validate taxonomy file content.

    Records are tab separated:
    ``id  label  category  level  parent_id|-  definition  aug1|aug2|...``.
    Blank lines and lines starting with ``#`` are skipped.
    """
    concepts: list[Concept] = []
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) == 6:
            parts.append("")
        if len(parts) != 7:
            raise TaxonomyError("malformed record", f"expected 7 tab-separated fields, "
                                f"got {len(parts)}", lineno)
        cid, label, category, level, parent, definition, augs = (p.strip() for p in parts)
        if not cid or not label:
            raise TaxonomyError("malformed record", "empty id or label", lineno)
        try:
            lvl = int(level)
        except ValueError:
            raise TaxonomyError("bad level", repr(level), lineno) from None
        if cid in lines:
            raise TaxonomyError("duplicate id", repr(cid), lineno)
        lines[cid] = lineno
        aug = tuple(a.strip() for a in augs.split("|") if a.strip()) if _field(augs) else ()
        concepts.append(Concept(cid, label, category, lvl, _field(parent),
                                _field(definition) or "", aug))
    _validate(concepts, lines)
    return ConceptTree({c.id: c for c in concepts})


def serialize_taxonomy(tree: ConceptTree) -> str:
    out = ["# id\tlabel\tcategory\tlevel\tparent\tdefinition\taugmentations"]
    for c in tree.concepts.values():
        for text in (c.label, c.definition, *c.augmentations):
            if "\t" in text or "\n" in text:
                raise TaxonomyError("unserializable text", f"tab or newline in {c.id!r}")
        if any("|" in a for a in c.augmentations):
            raise TaxonomyError("unserializable text", f"'|' inside an augmentation of {c.id!r}")
        out.append("\t".join([c.id, c.label, c.category, str(c.level), c.parent_id or "-",
                              c.definition or "-", "|".join(c.augmentations) or "-"]))
    return "\n".join(out) + "\n"


def shipped_taxonomy_text() -> str:
    return resources.files("conceptvid.data").joinpath("mrsc_taxonomy.tsv").read_text("utf-8")


def load_shipped_taxonomy() -> ConceptTree:
    """The published concepts: all first-level entries and the listed second-level examples."""
    return load_taxonomy(shipped_taxonomy_text())


def expand_query(tree: ConceptTree, concept_id: str) -> AugmentedQuery:
    """Concept label followed by its augmentation sentences."""
    c = tree[concept_id]
    return AugmentedQuery(c.id, (c.label, *c.augmentations))


def label_query(tree: ConceptTree, concept_id: str) -> AugmentedQuery:
    """Query made of the concept label only."""
    c = tree[concept_id]
    return AugmentedQuery(c.id, (c.label,))


def ancestors(tree: ConceptTree, concept_id: str) -> list[Concept]:
    c = tree[concept_id]
    return [tree[c.parent_id]] if c.parent_id is not None else []


def extend_taxonomy(base: ConceptTree, source: str) -> ConceptTree:
    """Add user-supplied records (taxonomy file content) to ``base``.

    New second-level concepts may hang under first-level concepts of ``base``;
    an id already present in ``base`` is a duplicate.
    """
    return load_taxonomy(serialize_taxonomy(base) + source)
