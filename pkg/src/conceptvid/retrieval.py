"""Shot index construction, concept ranking and run files."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .encoders import (EmbeddingTable, EmptySequenceError, EncoderParams, FeatureSequence,
                       encode_text, encode_video)
from .taxonomy import AugmentedQuery


class RetrievalError(ValueError):
    pass


def params_fingerprint(params: EncoderParams) -> str:
    """SHA-256 of the checkpoint serialization of ``params``."""
    return hashlib.sha256(params.to_bytes()).hexdigest()


@dataclass(frozen=True)
class ShotIndex:
    shot_ids: tuple[str, ...]
    vectors: np.ndarray
    fingerprint: str

    def __post_init__(self):
        if len(set(self.shot_ids)) != len(self.shot_ids):
            raise RetrievalError("duplicate shot id in index")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.shot_ids):
            raise RetrievalError("index needs one vector per shot")

    def __len__(self) -> int:
        return len(self.shot_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class RankedList:
    topic_id: str
    entries: tuple[tuple[str, float], ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def shot_ids(self) -> list[str]:
        return [s for s, _ in self.entries]


def build_index(shots: Sequence[FeatureSequence], params: EncoderParams) -> ShotIndex:
    """Encode every shot, one ``encode_video`` call each, keeping input order."""
    if not shots:
        raise RetrievalError("cannot index an empty corpus")
    ids = [s.shot_id for s in shots]
    seen: set[str] = set()
    for s in ids:
        if s in seen:
            raise RetrievalError(f"duplicate shot id {s!r}")
        seen.add(s)
    vectors = np.stack([encode_video(s, params)[1] for s in shots])
    return ShotIndex(tuple(ids), vectors, params_fingerprint(params))


def cosine_scores(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity, reduced exactly like ``encoders.similarity``."""
    dots = np.sum(vectors * query, axis=1)
    denom = np.sqrt(np.sum(vectors * vectors, axis=1)) * np.sqrt(np.sum(query * query))
    out = np.zeros_like(dots)
    nz = denom != 0
    out[nz] = dots[nz] / denom[nz]
    return out


def order_by_score(shot_ids: Sequence[str], scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending shot id."""
    return np.lexsort((np.asarray(shot_ids), -scores))


def query_vectors(query: AugmentedQuery, table: EmbeddingTable,
                  params: EncoderParams) -> list[np.ndarray]:
    """Common-space vectors of the query sentences that have in-vocabulary words."""
    out = []
    for sentence in query.sentences:
        try:
            out.append(encode_text(table.to_tokens(sentence), table, params)[1])
        except EmptySequenceError:
            continue
    if not out:
        raise EmptySequenceError(f"no sentence of concept {query.concept_id!r} is encodable")
    return out


def score_index(query: AugmentedQuery, index: ShotIndex, table: EmbeddingTable,
                params: EncoderParams, fusion: str = "score") -> np.ndarray:
    """Per-shot score of an augmented query.

    ``fusion="score"`` averages per-sentence similarities; ``"embedding"``
    averages the sentence vectors first and scores once.
    """
    vecs = query_vectors(query, table, params)
    if fusion == "score":
        total = np.zeros(len(index), dtype=index.vectors.dtype)
        for v in vecs:
            total = total + cosine_scores(index.vectors, v)
        return total / len(vecs)
    if fusion == "embedding":
        return cosine_scores(index.vectors, np.mean(np.stack(vecs), axis=0))
    raise RetrievalError(f"unknown fusion mode {fusion!r}")


def rank_shots(query: AugmentedQuery, index: ShotIndex, table: EmbeddingTable,
               params: EncoderParams, k: int, fusion: str = "score") -> RankedList:
    if k < 1:
        raise RetrievalError("k must be at least 1")
    scores = score_index(query, index, table, params, fusion)
    order = order_by_score(index.shot_ids, scores)[:k]
    return RankedList(query.concept_id,
                      tuple((index.shot_ids[i], float(scores[i])) for i in order))


# ---------------------------------------------------------------------------
# files


def format_run(lists: Iterable[RankedList], tag: str = "conceptvid") -> str:
    """``topic_id Q0 shot_id rank score run_tag`` lines, scores to 6 decimals."""
    lines = []
    for rl in lists:
        for rank, (shot, score) in enumerate(rl.entries, start=1):
            lines.append(f"{rl.topic_id} Q0 {shot} {rank} {score:.6f} {tag}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_run(text: str) -> dict[str, RankedList]:
    """Parse a run file into per-topic lists ordered by rank (topic order kept)."""
    rows: dict[str, list[tuple[int, str, float]]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise RetrievalError(f"run line {lineno}: expected 6 fields, got {len(parts)}")
        topic, _, shot, rank, score, _ = parts
        try:
            rows.setdefault(topic, []).append((int(rank), shot, float(score)))
        except ValueError:
            raise RetrievalError(f"run line {lineno}: bad rank or score") from None
    out = {}
    for topic, items in rows.items():
        items.sort()
        shots = [s for _, s, _ in items]
        if len(set(shots)) != len(shots):
            raise RetrievalError(f"topic {topic!r} lists a shot twice")
        out[topic] = RankedList(topic, tuple((s, sc) for _, s, sc in items))
    return out


def format_index(index: ShotIndex) -> str:
    """Text index: a header line, then ``shot_id v1 ... vd`` with round-trip floats."""
    lines = [f"# conceptvid-index fingerprint={index.fingerprint} dim={index.dim} count={len(index)}"]
    for sid, vec in zip(index.shot_ids, index.vectors):
        lines.append(sid + " " + " ".join(repr(float(x)) for x in vec))
    return "\n".join(lines) + "\n"


def parse_index(text: str) -> ShotIndex:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# conceptvid-index"):
        raise RetrievalError("not an index file")
    header = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
    ids, vecs = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        ids.append(parts[0])
        try:
            vecs.append([float(x) for x in parts[1:]])
        except ValueError:
            raise RetrievalError(f"index line {lineno}: bad number") from None
        if len(vecs[-1]) != int(header["dim"]):
            raise RetrievalError(f"index line {lineno}: expected {header['dim']} values")
    return ShotIndex(tuple(ids), np.array(vecs, dtype=np.float64).reshape(len(ids), int(header["dim"])),
                     header["fingerprint"])
