"""Extended inferred average precision over stratified judgment pools.

Each topic's pool is partitioned into strata; within a stratum only a random
sample of the pooled shots is judged. Precision above a relevant shot is
estimated per stratum from the judged sample, and each sampled relevant shot
stands for ``1 / rate`` relevant shots of its stratum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .retrieval import RankedList

DEFAULT_EPSILON = 1e-5


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Stratum:
    stratum_id: str
    pooled: frozenset[str]
    relevant: frozenset[str]
    nonrelevant: frozenset[str]

    def __post_init__(self):
        if not (self.relevant | self.nonrelevant) <= self.pooled:
            raise EvaluationError(f"stratum {self.stratum_id}: judged shots must be pooled")
        if self.relevant & self.nonrelevant:
            raise EvaluationError(f"stratum {self.stratum_id}: shot judged both ways")
        if not self.relevant and not self.nonrelevant:
            raise EvaluationError(f"stratum {self.stratum_id}: no judged shots")

    @property
    def judged(self) -> int:
        return len(self.relevant) + len(self.nonrelevant)

    @property
    def rate(self) -> float:
        return self.judged / len(self.pooled)


@dataclass(frozen=True)
class JudgmentPool:
    topics: Mapping[str, tuple[Stratum, ...]]

    def __contains__(self, topic: str) -> bool:
        return topic in self.topics

    def strata(self, topic: str) -> tuple[Stratum, ...]:
        try:
            return self.topics[topic]
        except KeyError:
            raise EvaluationError(f"topic {topic!r} has no judgments") from None

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, str, int]]) -> "JudgmentPool":
        """Build a pool from ``(topic, stratum, shot, judgment)`` tuples."""
        return _build(((t, s, d, j, None) for t, s, d, j in records))


@dataclass(frozen=True)
class EvalConfig:
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise EvaluationError("epsilon must be positive")


def _build(rows) -> JudgmentPool:
    acc: dict[str, dict[str, dict[str, set]]] = {}
    owner: dict[tuple[str, str], str] = {}
    for topic, stratum, shot, judgment, lineno in rows:
        where = f"line {lineno}: " if lineno is not None else ""
        if judgment not in (-1, 0, 1):
            raise EvaluationError(f"{where}judgment {judgment} not in {{-1, 0, 1}}")
        prev = owner.get((topic, shot))
        if prev is not None:
            kind = "listed twice" if prev == stratum else f"in strata {prev} and {stratum}"
            raise EvaluationError(f"{where}shot {shot!r} of topic {topic!r} {kind}")
        owner[(topic, shot)] = stratum
        st = acc.setdefault(topic, {}).setdefault(
            stratum, {"pooled": set(), "rel": set(), "non": set()})
        st["pooled"].add(shot)
        if judgment == 1:
            st["rel"].add(shot)
        elif judgment == 0:
            st["non"].add(shot)
    topics = {}
    for topic, strata in acc.items():
        built = []
        for sid, st in strata.items():
            if not st["rel"] and not st["non"]:
                raise EvaluationError(f"topic {topic!r} stratum {sid!r} has no judged shots")
            built.append(Stratum(sid, frozenset(st["pooled"]), frozenset(st["rel"]),
                                 frozenset(st["non"])))
        topics[topic] = tuple(built)
    return JudgmentPool(topics)


def parse_qrels(source: str) -> JudgmentPool:
    """Parse ``topic_id stratum_id shot_id judgment`` lines.

    Judgments: 1 relevant, 0 nonrelevant, -1 pooled but not judged.
    """
    def rows():
        for lineno, line in enumerate(source.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise EvaluationError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                judgment = int(parts[3])
            except ValueError:
                raise EvaluationError(f"line {lineno}: judgment {parts[3]!r} is not an integer") from None
            yield parts[0], parts[1], parts[2], judgment, lineno

    return _build(rows())


def format_qrels(records: Iterable[tuple[str, str, str, int]]) -> str:
    return "".join(f"{t} {s} {d} {j}\n" for t, s, d, j in records)


def _stratum_of(strata: Sequence[Stratum]) -> tuple[dict[str, int], dict[str, int]]:
    where, label = {}, {}
    for i, st in enumerate(strata):
        for d in st.pooled:
            where[d] = i
        for d in st.relevant:
            label[d] = 1
        for d in st.nonrelevant:
            label[d] = 0
    return where, label


def _precision_terms(shots: Sequence[str], strata: Sequence[Stratum], eps: float):
    """Yield (rank, shot, E[P@rank]) for every judged-relevant shot in ``shots``."""
    where, label = _stratum_of(strata)
    n = len(strata)
    pooled_above = np.zeros(n)
    rel_above = np.zeros(n)
    non_above = np.zeros(n)
    for k, shot in enumerate(shots, start=1):
        t = where.get(shot)
        lab = label.get(shot)
        if lab == 1:
            if k == 1:
                yield k, shot, 1.0
            else:
                frac = (rel_above + eps) / (rel_above + non_above + 2 * eps)
                # ((k-1)/k) * sum_t (pooled_t/(k-1)) * frac_t
                yield k, shot, 1.0 / k + float(np.sum(pooled_above * frac)) / k
        if t is not None:
            pooled_above[t] += 1
            if lab == 1:
                rel_above[t] += 1
            elif lab == 0:
                non_above[t] += 1


def expected_precision_at_k(run: RankedList, pool: JudgmentPool, k: int,
                            epsilon: float = DEFAULT_EPSILON) -> float:
    """Estimated precision at rank ``k``, which must hold a judged-relevant shot."""
    if k < 1:
        raise EvaluationError("k must be at least 1")
    if k > len(run):
        raise EvaluationError(f"k={k} exceeds run length {len(run)}")
    strata = pool.strata(run.topic_id)
    target = run.entries[k - 1][0]
    for rank, _, value in _precision_terms(run.shot_ids[:k], strata, epsilon):
        if rank == k:
            return value
    raise EvaluationError(f"shot {target!r} at rank {k} is not judged relevant")


def estimated_relevant(strata: Sequence[Stratum]) -> float:
    return sum(len(st.relevant) / st.rate for st in strata)


def xinfap(run: RankedList, pool: JudgmentPool, epsilon: float = DEFAULT_EPSILON) -> float:
    """Per-topic extended inferred AP of ``run`` (evaluated to its full length)."""
    if not epsilon > 0:
        raise EvaluationError("epsilon must be positive")
    strata = pool.strata(run.topic_id)
    r_hat = estimated_relevant(strata)
    if r_hat == 0:
        raise EvaluationError(f"topic {run.topic_id!r} has no judged relevant shots")
    rate = {}
    for st in strata:
        for d in st.relevant:
            rate[d] = st.rate
    total = 0.0
    for _, shot, value in _precision_terms(run.shot_ids, strata, epsilon):
        total += value / rate[shot]
    return total / r_hat


def mean_xinfap(scores: Mapping[str, float] | Sequence[float]) -> float:
    values = list(scores.values()) if isinstance(scores, Mapping) else list(scores)
    if not values:
        raise EvaluationError("no topic scores to average")
    return float(np.mean(values))


def average_precision(ranked: Sequence[str], relevant: Iterable[str]) -> float:
    """Plain (fully judged) average precision; unretrieved relevant shots count as 0."""
    relevant = set(relevant)
    if not relevant:
        raise EvaluationError("no relevant shots")
    hits, total = 0, 0.0
    for k, shot in enumerate(ranked, start=1):
        if shot in relevant:
            hits += 1
            total += hits / k
    return total / len(relevant)


def evaluate_runs(runs: Mapping[str, RankedList], pool: JudgmentPool,
                  epsilon: float = DEFAULT_EPSILON) -> dict[str, float]:
    """xinfAP per topic, in run order."""
    missing = [t for t in runs if t not in pool]
    if missing:
        raise EvaluationError(f"topics missing from qrels: {', '.join(missing)}")
    return {t: xinfap(rl, pool, epsilon) for t, rl in runs.items()}


def format_report(scores: Mapping[str, float], delimiter: str | None = None) -> str:
    """Per-topic table with a final mean row (text, or delimited when ``delimiter`` is given)."""
    mean = mean_xinfap(scores)
    if delimiter is not None:
        rows = ["topic" + delimiter + "xinfap"]
        rows += [f"{t}{delimiter}{v:.4f}" for t, v in scores.items()]
        rows.append(f"mean{delimiter}{mean:.4f}")
        return "\n".join(rows) + "\n"
    width = max([len("Mean XinfAP")] + [len(t) for t in scores])
    rows = [f"{'topic':<{width}}  xinfAP"]
    rows += [f"{t:<{width}}  {v:.4f}" for t, v in scores.items()]
    rows.append(f"{'Mean XinfAP':<{width}}  {mean:.4f}")
    return "\n".join(rows) + "\n"


def format_comparison(base: Mapping[str, float], other: Mapping[str, float],
                      names: tuple[str, str] = ("name", "name+descriptions"),
                      delimiter: str | None = None) -> str:
    """Two score columns side by side with per-topic deltas and a mean row."""
    topics = [t for t in base if t in other]
    if not topics:
        raise EvaluationError("runs share no topics")
    rows = [(t, base[t], other[t]) for t in topics]
    mb = mean_xinfap([b for _, b, _ in rows])
    mo = mean_xinfap([o for _, _, o in rows])
    if delimiter is not None:
        out = [delimiter.join(["topic", names[0], names[1], "delta"])]
        out += [delimiter.join([t, f"{b:.4f}", f"{o:.4f}", f"{o - b:+.4f}"]) for t, b, o in rows]
        out.append(delimiter.join(["mean", f"{mb:.4f}", f"{mo:.4f}", f"{mo - mb:+.4f}"]))
        return "\n".join(out) + "\n"
    width = max([len("Mean XinfAP")] + [len(t) for t in topics])
    cw = max(len(names[0]), len(names[1]), 7)
    out = [f"{'topic':<{width}}  {names[0]:>{cw}}  {names[1]:>{cw}}  {'delta':>8}"]
    out += [f"{t:<{width}}  {b:>{cw}.4f}  {o:>{cw}.4f}  {o - b:>+8.4f}" for t, b, o in rows]
    out.append(f"{'Mean XinfAP':<{width}}  {mb:>{cw}.4f}  {mo:>{cw}.4f}  {mo - mb:>+8.4f}")
    return "\n".join(out) + "\n"
