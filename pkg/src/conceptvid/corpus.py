"""Loaders, writers, vocabulary building and the synthetic desk-scale corpus."""
from __future__ import annotations

import json
import os
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import EmbeddingTable, FeatureSequence, tokenize
from .evaluation import format_qrels
from .taxonomy import CATEGORIES, Concept, ConceptTree, serialize_taxonomy, slugify
from .training import CaptionPair

__all__ = [
    "ParseError", "Vocabulary", "build_vocabulary", "tokenize",
    "parse_features_text", "format_features_text", "dump_features_binary",
    "parse_features_binary", "load_features", "parse_captions", "format_captions",
    "load_captions", "parse_embeddings", "format_embeddings", "load_embeddings",
    "random_embeddings", "SyntheticCorpusSpec", "SyntheticCorpus",
    "generate_synthetic_corpus", "write_synthetic_corpus",
]


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        loc = ", ".join(x for x in (path and str(path), line is not None and f"line {line}") if x)
        super().__init__(f"{loc}: {message}" if loc else message)
        self.line = line
        self.path = path


# ---------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class Vocabulary:
    index: dict[str, int]
    min_frequency: int
    counts: dict[str, int] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @property
    def words(self) -> list[str]:
        return sorted(self.index, key=self.index.__getitem__)


def build_vocabulary(captions: Iterable[str], min_frequency: int = 5) -> Vocabulary:
    """Words seen at least ``min_frequency`` times, by descending count then alphabetically."""
    if min_frequency < 1:
        raise ValueError("min_frequency must be at least 1")
    counts: Counter[str] = Counter()
    n = 0
    for text in captions:
        n += 1
        counts.update(tokenize(text))
    if n == 0:
        raise ValueError("cannot build a vocabulary from no captions")
    kept = sorted((w for w, c in counts.items() if c >= min_frequency),
                  key=lambda w: (-counts[w], w))
    return Vocabulary({w: i for i, w in enumerate(kept)}, min_frequency,
                      {w: counts[w] for w in kept})


def random_embeddings(words: Sequence[str] | Vocabulary, dim: int, seed: int = 0) -> EmbeddingTable:
    """Gaussian word vectors with unit expected norm."""
    if isinstance(words, Vocabulary):
        words = words.words
    rng = np.random.default_rng(seed)
    vecs = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(len(words), dim)).astype(np.float32)
    return EmbeddingTable(list(words), vecs)


# ---------------------------------------------------------------------------
# features


FEATURE_MAGIC = b"FEAT"
FEATURE_VERSION = 1


def _f32(x) -> str:
    return str(np.float32(x))


def format_features_text(shots: Sequence[FeatureSequence]) -> str:
    out = []
    for s in shots:
        frames = np.asarray(s.frames, dtype=np.float32)
        out.append(f"{s.shot_id} {frames.shape[0]} {frames.shape[1]}")
        out.extend(" ".join(_f32(v) for v in row) for row in frames)
    return "\n".join(out) + "\n"


def parse_features_text(text: str, path: str | None = None) -> list[FeatureSequence]:
    lines = text.splitlines()
    shots: list[FeatureSequence] = []
    seen: set[str] = set()
    dim = None
    i = 0
    while i < len(lines):
        header = lines[i].split()
        lineno = i + 1
        i += 1
        if not header:
            continue
        if len(header) != 3:
            raise ParseError("expected header 'shot_id n D'", lineno, path)
        sid = header[0]
        try:
            n, d = int(header[1]), int(header[2])
        except ValueError:
            raise ParseError("n and D must be integers", lineno, path) from None
        if n < 1 or d < 1:
            raise ParseError("n and D must be positive", lineno, path)
        if sid in seen:
            raise ParseError(f"duplicate shot id {sid!r}", lineno, path)
        if dim is not None and d != dim:
            raise ParseError(f"shot {sid!r} has dimension {d}, earlier shots {dim}", lineno, path)
        dim = d
        rows = []
        for _ in range(n):
            if i >= len(lines):
                raise ParseError(f"shot {sid!r} ends early", i, path)
            try:
                row = [float(v) for v in lines[i].split()]
            except ValueError:
                raise ParseError("bad number", i + 1, path) from None
            if len(row) != d:
                raise ParseError(f"expected {d} values, got {len(row)}", i + 1, path)
            rows.append(row)
            i += 1
        seen.add(sid)
        shots.append(FeatureSequence(sid, np.array(rows, dtype=np.float32)))
    return shots


def dump_features_binary(shots: Sequence[FeatureSequence]) -> bytes:
    """``FEAT`` container: version, shot count, then per shot id, n, D and float32 frames."""
    parts = [FEATURE_MAGIC, struct.pack("<II", FEATURE_VERSION, len(shots))]
    for s in shots:
        raw = s.shot_id.encode("utf-8")
        frames = np.ascontiguousarray(s.frames, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<II", *frames.shape))
        parts.append(frames.tobytes())
    return b"".join(parts)


def parse_features_binary(blob: bytes, path: str | None = None) -> list[FeatureSequence]:
    if blob[:4] != FEATURE_MAGIC:
        raise ParseError("not a binary feature file", path=path)
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != FEATURE_VERSION:
            raise ParseError(f"unsupported feature file version {version}", path=path)
        pos = 12
        shots, seen, dim = [], set(), None
        for k in range(count):
            (ln,) = struct.unpack_from("<I", blob, pos)
            sid = blob[pos + 4:pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            n, d = struct.unpack_from("<II", blob, pos)
            pos += 8
            frames = np.frombuffer(blob, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
            pos += 4 * n * d
            if sid in seen:
                raise ParseError(f"duplicate shot id {sid!r} (record {k + 1})", path=path)
            if dim is not None and d != dim:
                raise ParseError(f"shot {sid!r} has dimension {d}, earlier shots {dim}", path=path)
            seen.add(sid)
            dim = d
            shots.append(FeatureSequence(sid, frames.astype(np.float32)))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"truncated feature file: {exc}", path=path) from None
    return shots


def load_features(path: str | os.PathLike) -> list[FeatureSequence]:
    """Read a text or binary feature file (detected from the magic bytes)."""
    blob = Path(path).read_bytes()
    if blob[:4] == FEATURE_MAGIC:
        return parse_features_binary(blob, str(path))
    return parse_features_text(blob.decode("utf-8"), str(path))


# ---------------------------------------------------------------------------
# captions


def parse_captions(text: str, path: str | None = None) -> list[CaptionPair]:
    pairs, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ParseError("missing tab between shot id and caption", lineno, path)
        sid, caption = line.split("\t", 1)
        sid, caption = sid.strip(), caption.strip()
        if not sid or not caption:
            raise ParseError("empty shot id or caption", lineno, path)
        if (sid, caption) in seen:
            raise ParseError(f"duplicate caption for shot {sid!r}", lineno, path)
        seen.add((sid, caption))
        pairs.append(CaptionPair(sid, caption))
    return pairs


def format_captions(pairs: Iterable[CaptionPair]) -> str:
    return "".join(f"{p.shot_id}\t{p.caption}\n" for p in pairs)


def load_captions(path: str | os.PathLike) -> list[CaptionPair]:
    return parse_captions(Path(path).read_text("utf-8"), str(path))


# ---------------------------------------------------------------------------
# embeddings


def parse_embeddings(text: str, path: str | None = None) -> EmbeddingTable:
    """``word v1 ... vE`` lines, optionally preceded by a ``count dim`` header."""
    lines = [(i, ln) for i, ln in enumerate(text.splitlines(), start=1) if ln.strip()]
    expected_count = None
    dim = None
    if lines:
        first = lines[0][1].split()
        if len(first) == 2 and all(p.isdigit() for p in first):
            expected_count, dim = int(first[0]), int(first[1])
            lines = lines[1:]
    words, vecs, seen = [], [], set()
    for lineno, line in lines:
        parts = line.split()
        word = parts[0]
        try:
            vec = [float(v) for v in parts[1:]]
        except ValueError:
            raise ParseError("bad number", lineno, path) from None
        if dim is None:
            dim = len(vec)
        if len(vec) != dim or dim == 0:
            raise ParseError(f"expected {dim} values, got {len(vec)}", lineno, path)
        if word in seen:
            raise ParseError(f"duplicate word {word!r}", lineno, path)
        seen.add(word)
        words.append(word)
        vecs.append(vec)
    if expected_count is not None and expected_count != len(words):
        raise ParseError(f"header announces {expected_count} words, found {len(words)}", path=path)
    if not words:
        raise ParseError("no word vectors", path=path)
    return EmbeddingTable(words, np.array(vecs, dtype=np.float32))


def format_embeddings(table: EmbeddingTable, header: bool = True) -> str:
    out = [f"{len(table)} {table.dim}"] if header else []
    for w, v in zip(table.words, table.vectors):
        out.append(w + " " + " ".join(_f32(x) for x in v))
    return "\n".join(out) + "\n"


def load_embeddings(path: str | os.PathLike, second: str | os.PathLike | None = None) -> EmbeddingTable:
    """Load one table, or two whose per-word vectors get concatenated."""
    table = parse_embeddings(Path(path).read_text("utf-8"), str(path))
    if second is not None:
        table = table.concat(parse_embeddings(Path(second).read_text("utf-8"), str(second)))
    return table


# ---------------------------------------------------------------------------
# synthetic corpus

THEMES = (
    ("boat", ("ship", "harbor", "waves", "sailing", "deck", "sea")),
    ("kitchen", ("cooking", "stove", "chef", "pan", "vegetables", "counter")),
    ("dancing", ("dancer", "music", "stage", "spinning", "couple", "ballroom")),
    ("traffic", ("cars", "road", "intersection", "trucks", "highway", "honking")),
    ("forest", ("trees", "leaves", "hiking", "trail", "moss", "woods")),
    ("classroom", ("students", "teacher", "lecture", "desks", "blackboard", "notebooks")),
    ("telephone", ("phone", "calling", "talking", "receiver", "dialing", "conversation")),
    ("protest", ("crowd", "banners", "marching", "chanting", "police", "square")),
)
ATTRIBUTES = ("red", "blue", "green", "yellow", "night", "rainy", "sunny", "snowy",
              "foggy", "windy", "dusty", "bright")
CAPTION_TEMPLATES = (
    "a {w1} with {w2} on a {attr} day",
    "the {w1} and the {w2} near {w3} {attr}",
    "{attr} scene of {w1} {w2}",
    "some {w1} {w2} {w3} in {attr} light",
)
DESCRIPTION_TEMPLATES = (
    "a {w1} with {w2} and {w3}",
    "the {w1} near the {w2}",
    "{w1} and {w2} {w3}",
)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Parameters of the generated corpus.

    Each shot belongs to one prototype (the concept) and carries one visual
    attribute. Prototype centroids and attribute offsets share a signal
    subspace; a per-shot distractor lives in its orthogonal complement.
    """

    n_prototypes: int = 5
    shots_per_prototype: int = 40
    frames: int = 8
    feature_dim: int = 32
    n_attributes: int = 8
    captions_per_shot: int = 4
    noise: float = 0.1
    attribute_scale: float = 2.0
    distractor_scale: float = 1.5
    label_rate: float = 0.25
    n_descriptions: int = 3
    validation_fraction: float = 0.2
    judged_rate: float = 1.0
    embed_dim: int = 16
    caption_templates: tuple[str, ...] = CAPTION_TEMPLATES
    seed: int = 0

    def __post_init__(self):
        for name in ("n_prototypes", "shots_per_prototype", "frames", "feature_dim",
                     "n_attributes", "captions_per_shot", "embed_dim", "n_descriptions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if self.noise < 0 or self.distractor_scale < 0 or self.attribute_scale < 0:
            raise ValueError("scales must be non-negative")
        if self.n_attributes > len(ATTRIBUTES):
            raise ValueError(f"at most {len(ATTRIBUTES)} attributes")
        if not 0 <= self.label_rate <= 1 or not 0 < self.judged_rate <= 1:
            raise ValueError("rates must lie in [0, 1] (judged rate in (0, 1])")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if not self.caption_templates:
            raise ValueError("need at least one caption template")


@dataclass
class SyntheticCorpus:
    spec: SyntheticCorpusSpec
    shots: list[FeatureSequence]
    train_pairs: list[CaptionPair]
    val_pairs: list[CaptionPair]
    qrels: list[tuple[str, str, str, int]]
    taxonomy: ConceptTree
    embeddings: EmbeddingTable
    prototype_of: dict[str, int]
    attribute_of: dict[str, int]
    centroids: np.ndarray
    concept_ids: list[str]

    @property
    def features(self) -> dict[str, FeatureSequence]:
        return {s.shot_id: s for s in self.shots}

    @property
    def val_shot_ids(self) -> list[str]:
        return sorted({p.shot_id for p in self.val_pairs})


def _theme(p: int) -> tuple[str, tuple[str, ...]]:
    if p < len(THEMES):
        return THEMES[p]
    return f"proto{p}", tuple(f"p{p}word{i}" for i in range(6))


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> SyntheticCorpus:
    """Deterministic corpus of shots, captions, qrels and a concept fragment."""
    rng = np.random.default_rng(spec.seed)
    D = spec.feature_dim
    k = D // 2
    basis, _ = np.linalg.qr(rng.normal(size=(D, D)))
    centroids_sig = rng.normal(size=(spec.n_prototypes, k))
    attrs_sig = spec.attribute_scale * rng.normal(size=(spec.n_attributes, k))
    centroids = np.concatenate([centroids_sig, np.zeros((spec.n_prototypes, D - k))], axis=1) @ basis.T

    concepts, concept_ids, descriptions = {}, [], {}
    for p in range(spec.n_prototypes):
        name, words = _theme(p)
        sents = []
        for t in range(spec.n_descriptions):
            w = rng.permutation(len(words))[:3]
            tmpl = DESCRIPTION_TEMPLATES[t % len(DESCRIPTION_TEMPLATES)]
            sents.append(tmpl.format(w1=words[w[0]], w2=words[w[1]], w3=words[w[2]]))
        cid = slugify(name)
        descriptions[cid] = tuple(sents)
        concepts[cid] = Concept(cid, name, CATEGORIES[p % len(CATEGORIES)], 1, None,
                                f"synthetic prototype {p}", tuple(sents))
        concept_ids.append(cid)
    taxonomy = ConceptTree(concepts)

    rounds = max(1, -(-spec.shots_per_prototype // spec.n_attributes))
    val_rounds = int(round(spec.validation_fraction * rounds))
    if spec.validation_fraction > 0:
        val_rounds = max(1, val_rounds)

    shots, train_pairs, val_pairs = [], [], []
    prototype_of, attribute_of = {}, {}
    for p in range(spec.n_prototypes):
        name, words = _theme(p)
        for i in range(spec.shots_per_prototype):
            sid = f"p{p:02d}_s{i:03d}"
            a = i % spec.n_attributes
            distractor = spec.distractor_scale * rng.normal(size=D - k)
            clean = np.concatenate([centroids_sig[p] + attrs_sig[a], distractor]) @ basis.T
            frames = clean + spec.noise * rng.normal(size=(spec.frames, D))
            shots.append(FeatureSequence(sid, frames.astype(np.float32)))
            prototype_of[sid] = p
            attribute_of[sid] = a
            is_val = (i // spec.n_attributes) < val_rounds
            written: set[str] = set()
            for _ in range(spec.captions_per_shot):
                # caption files reject a repeated (shot, caption) pair, so redraw
                for _attempt in range(100):
                    w = rng.permutation(len(words))[:3]
                    tmpl = spec.caption_templates[rng.integers(len(spec.caption_templates))]
                    text = tmpl.format(w1=words[w[0]], w2=words[w[1]], w3=words[w[2]],
                                       attr=ATTRIBUTES[a])
                    if rng.random() < spec.label_rate:
                        text = f"{name} {text}"
                    if text not in written:
                        break
                else:
                    raise ValueError("too few distinct captions for captions_per_shot")
                written.add(text)
                (val_pairs if is_val else train_pairs).append(CaptionPair(sid, text))

    qrels = []
    for p, cid in enumerate(concept_ids):
        sids = [s.shot_id for s in shots]
        judged = np.ones(len(sids), dtype=bool)
        if spec.judged_rate < 1:
            judged[:] = False
            n_judge = max(1, int(round(spec.judged_rate * len(sids))))
            pos = [i for i, s in enumerate(sids) if prototype_of[s] == p]
            # keep at least one judged relevant shot per topic
            first = pos[rng.integers(len(pos))]
            rest = rng.permutation([i for i in range(len(sids)) if i != first])[:n_judge - 1]
            judged[[first, *rest]] = True
        for s, j in zip(sids, judged):
            qrels.append((cid, "s1", s, (1 if prototype_of[s] == p else 0) if j else -1))

    if not train_pairs:
        raise ValueError("validation split leaves no training captions")
    vocab = build_vocabulary([c.caption for c in train_pairs], min_frequency=1)
    embeddings = random_embeddings(vocab, spec.embed_dim, seed=spec.seed + 1)
    return SyntheticCorpus(spec, shots, train_pairs, val_pairs, qrels, taxonomy, embeddings,
                           prototype_of, attribute_of, centroids, concept_ids)


def _write(path: Path, data: str | bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data, "utf-8")
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def write_synthetic_corpus(corpus: SyntheticCorpus, outdir: str | os.PathLike) -> dict:
    """Write every artifact plus ``manifest.json``; returns the manifest."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "features": ("features.txt", format_features_text(corpus.shots)),
        "features_binary": ("features.bin", dump_features_binary(corpus.shots)),
        "train_captions": ("captions_train.tsv", format_captions(corpus.train_pairs)),
        "val_captions": ("captions_val.tsv", format_captions(corpus.val_pairs)),
        "qrels": ("qrels.txt", format_qrels(corpus.qrels)),
        "taxonomy": ("taxonomy.tsv", serialize_taxonomy(corpus.taxonomy)),
        "embeddings": ("embeddings.txt", format_embeddings(corpus.embeddings)),
    }
    for name, data in files.values():
        _write(out / name, data)
    spec = asdict(corpus.spec)
    spec["caption_templates"] = list(spec["caption_templates"])
    manifest = {
        "seed": corpus.spec.seed,
        "spec": spec,
        "paths": {k: str(out / v[0]) for k, v in files.items()},
        "counts": {
            "shots": len(corpus.shots),
            "train_captions": len(corpus.train_pairs),
            "val_captions": len(corpus.val_pairs),
            "qrels": len(corpus.qrels),
            "concepts": len(corpus.taxonomy),
            "vocabulary": len(corpus.embeddings),
        },
        "concepts": corpus.concept_ids,
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
