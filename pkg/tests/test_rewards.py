import itertools
import math

import numpy as np
import pytest

from offcritic import rewards
from offcritic.rewards import build_idf, cider_score, self_critical_advantage


def test_build_idf_empty_corpus_rejected():
    with pytest.raises(rewards.RewardError):
        build_idf([])


def test_single_document_corpus_idf_zero():
    stats = build_idf([[1, 2, 3]])
    for g in stats.doc_freq:
        assert stats.idf(g) == 0.0


def test_two_disjoint_docs_idf_log2():
    stats = build_idf([[1, 1, 1, 1], [2, 3, 2, 3]])
    for g in stats.doc_freq:
        assert math.isclose(stats.idf(g), math.log(2.0))


def test_unseen_ngram_gets_df_one():
    stats = build_idf([[1, 2], [3, 4]])
    assert math.isclose(stats.idf((99,)), math.log(2.0))


def test_doc_freq_bounded_by_num_docs():
    docs = [[1, 2, 1], [1, 2], [2, 5]]
    stats = build_idf(docs)
    assert all(1 <= v <= stats.num_docs for v in stats.doc_freq.values())


def test_disjoint_candidate_scores_zero():
    refs = [[1, 2, 3, 4, 5]]
    stats = build_idf(refs + [[6, 7, 8]])
    assert cider_score([6, 7, 8], refs, stats) == 0.0


def test_exact_match_beats_all_brute_force():
    # vocab {1,2,3}, all candidates of length 1..3, single reference
    ref = [1, 2, 3]
    stats = build_idf([ref, [2, 2, 1], [3, 1]])
    best = cider_score(ref, [ref], stats)
    for length in (1, 2, 3):
        for cand in itertools.product([1, 2, 3], repeat=length):
            assert cider_score(list(cand), [ref], stats) <= best + 1e-12


def test_score_never_exceeds_self_score():
    rng = np.random.default_rng(5)
    for _ in range(50):
        docs = [list(rng.integers(1, 5, size=rng.integers(2, 8)))
                for _ in range(4)]
        stats = build_idf(docs)
        ref = docs[0]
        self_score = cider_score(ref, [ref], stats)
        cand = list(rng.integers(1, 5, size=rng.integers(1, 8)))
        s = cider_score(cand, [ref], stats)
        assert 0.0 <= s <= self_score + 1e-12


def test_relabeling_invariance():
    relabel = {1: 10, 2: 20, 3: 30, 4: 40}
    docs = [[1, 2, 3, 1], [2, 4, 4], [3, 3, 1]]
    cand = [1, 2, 4]
    stats = build_idf(docs)
    stats2 = build_idf([[relabel[t] for t in d] for d in docs])
    s1 = cider_score(cand, [docs[0]], stats)
    s2 = cider_score([relabel[t] for t in cand],
                     [[relabel[t] for t in docs[0]]], stats2)
    assert math.isclose(s1, s2, rel_tol=1e-12)


def test_corpus_order_independence():
    docs = [[1, 2, 3], [3, 2], [4, 4, 1]]
    a = cider_score([1, 2], [docs[0]], build_idf(docs))
    b = cider_score([1, 2], [docs[0]], build_idf(docs[::-1]))
    assert math.isclose(a, b, rel_tol=1e-12)


def test_plain_cider_variant_has_no_length_penalty():
    refs = [[1, 2, 3, 4, 5, 6, 7, 8]]
    stats = build_idf(refs + [[9, 9, 1]])
    short = [1, 2]
    d = cider_score(short, refs, stats, variant="cider-d")
    plain = cider_score(short, refs, stats, variant="cider")
    assert plain > d  # gaussian penalty suppresses the mismatched length


def test_advantage_identical_rollouts_zero():
    refs = [[1, 2, 3]]
    stats = build_idf(refs)
    adv = self_critical_advantage([1, 2], [1, 2], refs, stats)
    assert adv.value == 0.0


def test_advantage_exact_sample_vs_disjoint_greedy():
    ref = [1, 2, 3, 1]
    stats = build_idf([ref, [5, 6]])
    adv = self_critical_advantage(ref, [5, 6], [ref], stats)
    assert math.isclose(adv.value, cider_score(ref, [ref], stats))


def test_advantage_antisymmetry():
    ref = [1, 2, 3]
    stats = build_idf([ref, [2, 4]])
    a = self_critical_advantage([1, 2], [2, 4], [ref], stats).value
    b = self_critical_advantage([2, 4], [1, 2], [ref], stats).value
    assert math.isclose(a, -b, rel_tol=1e-12)


def test_empty_rollout_rejected():
    stats = build_idf([[1, 2]])
    with pytest.raises(rewards.RewardError):
        cider_score([], [[1, 2]], stats)
    with pytest.raises(rewards.RewardError):
        self_critical_advantage([], [1], [[1, 2]], stats)
