import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from conceptvid.encoders import (EmbeddingTable, EmptySequenceError, EncoderConfig,
                                 FeatureSequence, encode_text, encode_video, init_params,
                                 similarity)
from conceptvid.retrieval import (RankedList, RetrievalError, ShotIndex, build_index,
                                  format_index, format_run, parse_index, parse_run, rank_shots,
                                  score_index)
from conceptvid.taxonomy import AugmentedQuery

CFG = EncoderConfig(feature_dim=5, embed_dim=4, vocab_size=6, hidden=3, common_dim=4,
                    filters=(2, 2, 2))
WORDS = ["boat", "water", "sail", "city", "car", "road"]


def setup(seed, n_shots=20):
    rng = np.random.default_rng(seed)
    params = init_params(CFG, seed=seed)
    table = EmbeddingTable(WORDS, rng.normal(size=(6, 4)))
    shots = [FeatureSequence(f"shot{i:03d}", rng.normal(size=(int(rng.integers(1, 6)), 5)))
             for i in range(n_shots)]
    return params, table, shots


def brute_force(query, shots, table, params, k):
    vectors = {s.shot_id: encode_video(s, params)[1] for s in shots}
    qs = [encode_text(table.to_tokens(t), table, params)[1] for t in query.sentences]
    scored = []
    for sid, v in vectors.items():
        total = 0.0
        for q in qs:
            total = total + similarity(v, q)
        scored.append((sid, total / len(qs)))
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored[:k]


def test_index_of_one_shot():
    params, _, shots = setup(0, 1)
    assert len(build_index(shots, params)) == 1


def test_index_matches_per_shot_encoding_and_is_deterministic():
    params, _, shots = setup(1, 100)
    index = build_index(shots, params)
    for sid, vec, shot in zip(index.shot_ids, index.vectors, shots):
        assert sid == shot.shot_id
        assert_array_equal(vec, encode_video(shot, params)[1])
    assert_array_equal(build_index(shots, params).vectors, index.vectors)


def test_three_sentence_query_equals_brute_force():
    params, table, shots = setup(2, 20)
    q = AugmentedQuery("boat", ("boat", "a boat on the water", "sail water boat"))
    got = rank_shots(q, build_index(shots, params), table, params, k=20)
    assert list(got.entries) == brute_force(q, shots, table, params, 20)


def test_self_match_ranks_first_with_score_one():
    params, table, shots = setup(3, 10)
    q = AugmentedQuery("car", ("car road",))
    qvec = encode_text("car road", table, params)[1]
    index = build_index(shots, params)
    index = ShotIndex(index.shot_ids + ("zzz",), np.vstack([index.vectors, qvec]), "f")
    top = rank_shots(q, index, table, params, k=1).entries[0]
    assert top[0] == "zzz"
    assert top[1] == pytest.approx(1.0, abs=1e-12)


def test_ties_break_by_shot_id():
    params, table, shots = setup(4, 3)
    frames = shots[0].frames
    dup = [FeatureSequence("b", frames), FeatureSequence("a", frames), shots[1]]
    got = rank_shots(AugmentedQuery("c", ("city",)), build_index(dup, params), table, params, 3)
    ids = got.shot_ids
    assert ids.index("a") == ids.index("b") - 1


@given(k=st.integers(1, 30), seed=st.integers(0, 50))
def test_output_length_is_min_k_n(k, seed):
    params, table, shots = setup(seed, 12)
    got = rank_shots(AugmentedQuery("x", ("boat",)), build_index(shots, params), table, params, k)
    assert len(got) == min(k, 12)


def test_adding_a_shot_keeps_relative_order():
    params, table, shots = setup(5, 15)
    q = AugmentedQuery("x", ("water road", "car"))
    before = rank_shots(q, build_index(shots[:-1], params), table, params, 100).shot_ids
    after = rank_shots(q, build_index(shots, params), table, params, 100).shot_ids
    assert [s for s in after if s != shots[-1].shot_id] == before


def test_oov_sentences_are_skipped_and_all_oov_fails():
    params, table, shots = setup(6, 5)
    index = build_index(shots, params)
    a = score_index(AugmentedQuery("x", ("boat", "zebra unicorn")), index, table, params)
    b = score_index(AugmentedQuery("x", ("boat",)), index, table, params)
    assert_array_equal(a, b)
    with pytest.raises(EmptySequenceError):
        rank_shots(AugmentedQuery("x", ("zebra",)), index, table, params, 3)


def test_embedding_fusion_mode():
    params, table, shots = setup(7, 8)
    index = build_index(shots, params)
    q = AugmentedQuery("x", ("boat", "road"))
    v = (encode_text("boat", table, params)[1] + encode_text("road", table, params)[1]) / 2
    got = score_index(q, index, table, params, fusion="embedding")
    want = [similarity(x, v) for x in index.vectors]
    np.testing.assert_allclose(got, want, atol=1e-15)
    with pytest.raises(RetrievalError):
        score_index(q, index, table, params, fusion="max")


def test_bad_k_and_duplicates():
    params, table, shots = setup(8, 3)
    with pytest.raises(RetrievalError):
        rank_shots(AugmentedQuery("x", ("boat",)), build_index(shots, params), table, params, 0)
    with pytest.raises(RetrievalError):
        build_index([shots[0], shots[0]], params)
    with pytest.raises(RetrievalError):
        build_index([], params)


def test_run_file_round_trip():
    lists = [RankedList("t1", (("s1", 0.5), ("s2", 0.25))), RankedList("t0", (("s3", 0.1),))]
    text = format_run(lists, "tag")
    assert text.splitlines()[0] == "t1 Q0 s1 1 0.500000 tag"
    back = parse_run(text)
    assert list(back) == ["t1", "t0"]
    assert back["t1"].shot_ids == ["s1", "s2"]
    with pytest.raises(RetrievalError):
        parse_run("t Q0 s 1 0.5\n")


def test_index_file_round_trip_is_exact():
    params, _, shots = setup(9, 6)
    index = build_index(shots, params)
    back = parse_index(format_index(index))
    assert back.shot_ids == index.shot_ids
    assert back.fingerprint == index.fingerprint
    assert_array_equal(back.vectors, index.vectors)
