import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conceptvid.evaluation import (EvalConfig, EvaluationError, JudgmentPool,
                                   average_precision, evaluate_runs, expected_precision_at_k,
                                   format_comparison, format_qrels, format_report, mean_xinfap,
                                   parse_qrels, xinfap)
from conceptvid.retrieval import RankedList

from oracles import exact_ap


def run_of(ids, topic="t"):
    return RankedList(topic, tuple((s, 1.0 / (i + 1)) for i, s in enumerate(ids)))


def test_rates_from_qrels():
    pool = parse_qrels("t s1 a 1\nt s1 b 0\n")
    assert pool.strata("t")[0].rate == 1.0
    lines = "".join(f"t s d{i} {1 if i < 2 else (0 if i < 5 else -1)}\n" for i in range(10))
    assert parse_qrels(lines).strata("t")[0].rate == 0.5


@pytest.mark.parametrize("text", [
    "t s1 a 1\nt s2 a 0\n",     # shot in two strata
    "t s1 a 1\nt s1 a 1\n",     # listed twice
    "t s1 a 2\n",               # judgment out of range
    "t s1 a -1\nt s1 b -1\n",   # nothing judged
    "t s1 a\n",                 # missing field
])
def test_bad_qrels(text):
    with pytest.raises(EvaluationError):
        parse_qrels(text)


def test_relevant_at_rank_one():
    pool = parse_qrels("t s a 1\nt s b 0\n")
    assert expected_precision_at_k(run_of(["a", "b"]), pool, 1) == 1.0


def test_relevant_below_judged_nonrelevant():
    pool = parse_qrels("t s n 0\nt s r 1\n")
    eps = 1e-5
    value = expected_precision_at_k(run_of(["n", "r"]), pool, 2, eps)
    assert value == pytest.approx(0.5 + 0.5 * eps / (1 + 2 * eps), abs=1e-15)
    assert value == pytest.approx(0.500005, abs=1e-9)


def test_relevant_below_unpooled_shot():
    pool = parse_qrels("t s r 1\n")
    assert expected_precision_at_k(run_of(["x", "r"]), pool, 2) == 0.5


def test_precision_at_k_errors():
    pool = parse_qrels("t s r 1\nt s n 0\n")
    with pytest.raises(EvaluationError):
        expected_precision_at_k(run_of(["r", "n"]), pool, 3)
    with pytest.raises(EvaluationError):
        expected_precision_at_k(run_of(["r", "n"]), pool, 2)


def test_perfect_run_scores_one():
    ids = [f"d{i}" for i in range(30)]
    rel = ids[:8]
    pool = JudgmentPool.from_records(("t", "s", d, int(d in rel)) for d in ids)
    assert xinfap(run_of(ids), pool) == pytest.approx(1.0, abs=1e-3)
    assert xinfap(run_of(["d0"]), JudgmentPool.from_records([("t", "s", "d0", 1)])) == 1.0


def test_topic_without_relevant_is_an_error():
    pool = parse_qrels("t s a 0\n")
    with pytest.raises(EvaluationError):
        xinfap(run_of(["a"]), pool)
    with pytest.raises(EvaluationError):
        xinfap(run_of(["a"], topic="u"), pool)


@given(seed=st.integers(0, 10_000), n=st.integers(2, 60))
def test_fully_judged_matches_exact_ap(seed, n):
    rng = np.random.default_rng(seed)
    ids = [f"d{i}" for i in range(n)]
    rel = {d for d in ids if rng.random() < 0.3} or {ids[0]}
    pool = JudgmentPool.from_records(("t", "s", d, int(d in rel)) for d in ids)
    ranked = list(rng.permutation(ids)[: int(rng.integers(1, n + 1))])
    assert xinfap(run_of(ranked), pool) == pytest.approx(exact_ap(ranked, rel), abs=1e-3)
    assert average_precision(ranked, rel) == pytest.approx(exact_ap(ranked, rel), abs=1e-15)


@given(seed=st.integers(0, 10_000))
def test_score_is_a_probability_and_monotone(seed):
    rng = np.random.default_rng(seed)
    ids = [f"d{i}" for i in range(25)]
    labels = {d: int(rng.integers(-1, 2)) for d in ids}
    labels[ids[0]] = 1
    strata = {d: f"s{int(rng.integers(0, 3))}" for d in ids}
    for s in set(strata.values()):
        first = next(d for d in ids if strata[d] == s)
        labels[first] = labels[first] if labels[first] >= 0 else 0
    pool = JudgmentPool.from_records((("t", strata[d], d, labels[d]) for d in ids))
    ranked = list(rng.permutation(ids))
    base = xinfap(run_of(ranked), pool)
    assert 0.0 <= base <= 1.0
    for i in range(len(ranked) - 1):
        if labels[ranked[i]] == 0 and labels[ranked[i + 1]] == 1:
            swapped = ranked[:i] + [ranked[i + 1], ranked[i]] + ranked[i + 2:]
            assert xinfap(run_of(swapped), pool) >= base - 1e-12


def test_monte_carlo_subsampling_small():
    # cheap version of the acceptance check: 1,000 trials on one random run
    rng = np.random.default_rng(11)
    ids = [f"d{i:03d}" for i in range(200)]
    rel = set(rng.permutation(ids)[:40])
    ranked = list(rng.permutation(ids))
    exact = exact_ap(ranked, rel)
    values = []
    for _ in range(1000):
        records = []
        for s, members in (("top", ranked[:100]), ("rest", ranked[100:])):
            judged = set(rng.permutation(members)[:50])
            records += [("t", s, d, int(d in rel) if d in judged else -1) for d in members]
        values.append(xinfap(run_of(ranked), JudgmentPool.from_records(records)))
    assert abs(np.mean(values) - exact) < 0.02


def test_mean_and_reports():
    assert mean_xinfap({"a": 0.2, "b": 0.4}) == pytest.approx(0.3)
    assert mean_xinfap([0.7]) == 0.7
    assert mean_xinfap({"b": 0.4, "a": 0.2}) == mean_xinfap({"a": 0.2, "b": 0.4})
    with pytest.raises(EvaluationError):
        mean_xinfap([])
    report = format_report({"war": 0.25, "refugees": 0.5})
    assert report.splitlines()[-1].split() == ["Mean", "XinfAP", "0.3750"]
    csv = format_report({"war": 0.25}, delimiter=",")
    assert csv.splitlines() == ["topic,xinfap", "war,0.2500", "mean,0.2500"]
    cmp = format_comparison({"war": 0.1}, {"war": 0.4}, ("name", "name+descriptions"))
    assert "+0.3000" in cmp.splitlines()[1]


def test_evaluate_runs_requires_known_topics():
    pool = parse_qrels("t s a 1\n")
    with pytest.raises(EvaluationError):
        evaluate_runs({"u": run_of(["a"], "u")}, pool)
    assert evaluate_runs({"t": run_of(["a"])}, pool) == {"t": 1.0}


def test_config_and_qrels_round_trip():
    with pytest.raises(EvaluationError):
        EvalConfig(epsilon=0.0)
    recs = [("t", "s", "a", 1), ("t", "s", "b", -1), ("t", "s", "c", 0)]
    pool = parse_qrels(format_qrels(recs))
    st_ = pool.strata("t")[0]
    assert st_.relevant == {"a"} and st_.nonrelevant == {"c"} and st_.pooled == {"a", "b", "c"}
