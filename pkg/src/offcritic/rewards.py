"""Consensus n-gram reward (CIDEr-D by default) and the self-critical advantage.

Scores are computed over token-id sequences: TF-IDF vectors per n-gram order
1..4, cosine similarity against each reference, a gaussian length penalty
(sigma=6) with candidate counts clipped at the reference counts, averaged
over orders and references, scaled by 10. variant="cider" drops the clipping
and the length penalty. N-grams unseen in the IDF corpus score with document
frequency 1.

The reward is whole-sequence only: there is no intermediate reward signal.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

NGRAM_ORDERS = 4
LENGTH_SIGMA = 6.0
SCALE = 10.0


class RewardError(ValueError):
    pass


@dataclass
class CiderStats:
    """Document frequencies of 1..4-grams over a reference corpus."""

    doc_freq: dict[tuple, int]
    num_docs: int

    def idf(self, ngram: tuple) -> float:
        df = max(1, self.doc_freq.get(ngram, 0))
        return math.log(self.num_docs / df)


@dataclass(frozen=True)
class Advantage:
    value: float


def _ngrams(tokens: Sequence[int], n: int) -> Iterable[tuple]:
    return (tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def count_ngrams(tokens: Sequence[int]) -> list[Counter]:
    """Counters for orders 1..4 (index 0 = unigrams)."""
    return [Counter(_ngrams(tokens, n)) for n in range(1, NGRAM_ORDERS + 1)]


def build_idf(reference_corpus: Sequence[Sequence[int]]) -> CiderStats:
    """Document-frequency table: in how many documents each n-gram occurs."""
    if not reference_corpus:
        raise RewardError("empty reference corpus")
    doc_freq: dict[tuple, int] = defaultdict(int)
    for doc in reference_corpus:
        seen = set()
        for counts in count_ngrams(doc):
            seen.update(counts)
        for g in seen:
            doc_freq[g] += 1
    return CiderStats(doc_freq=dict(doc_freq), num_docs=len(reference_corpus))


def _tfidf_vector(counts: Counter, stats: CiderStats) -> tuple[dict, float]:
    vec = {g: c * stats.idf(g) for g, c in counts.items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider_score(candidate: Sequence[int],
                references: Sequence[Sequence[int]],
                stats: CiderStats,
                variant: str = "cider-d") -> float:
    """Consensus score of a candidate against references, >= 0."""
    if len(candidate) == 0 or not references or any(len(r) == 0 for r in references):
        raise RewardError("candidate and references must be non-empty")
    if variant not in ("cider-d", "cider"):
        raise RewardError(f"unknown variant {variant!r}")
    clipped = variant == "cider-d"

    cand_counts = count_ngrams(candidate)
    cand_vecs = [_tfidf_vector(c, stats) for c in cand_counts]
    order_totals = [0.0] * NGRAM_ORDERS
    for ref in references:
        ref_counts = count_ngrams(ref)
        if clipped:
            delta = float(len(candidate) - len(ref))
            penalty = math.exp(-(delta * delta) / (2.0 * LENGTH_SIGMA ** 2))
        else:
            penalty = 1.0
        for n in range(NGRAM_ORDERS):
            cvec, cnorm = cand_vecs[n]
            rvec, rnorm = _tfidf_vector(ref_counts[n], stats)
            num = 0.0
            for g, cv in cvec.items():
                rv = rvec.get(g)
                if rv is None:
                    continue
                num += (min(cv, rv) if clipped else cv) * rv
            if cnorm > 0.0 and rnorm > 0.0:
                order_totals[n] += penalty * num / (cnorm * rnorm)
    per_order = [tot / len(references) for tot in order_totals]
    return SCALE * sum(per_order) / NGRAM_ORDERS


def self_critical_advantage(sampled_tokens: Sequence[int],
                            greedy_tokens: Sequence[int],
                            references: Sequence[Sequence[int]],
                            stats: CiderStats,
                            variant: str = "cider-d") -> Advantage:
    """Sampled-sequence reward minus the greedy-baseline reward."""
    if len(sampled_tokens) == 0 or len(greedy_tokens) == 0:
        raise RewardError("rollouts must be non-empty")
    s = cider_score(sampled_tokens, references, stats, variant)
    g = cider_score(greedy_tokens, references, stats, variant)
    return Advantage(s - g)
