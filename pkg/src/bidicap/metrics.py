"""Corpus-level caption metrics: consensus tf-idf scoring (plain and the
clipped/length-penalized variant) and corpus BLEU.

All functions consume already-tokenized sequences and are deterministic; the
document-frequency table is built once per reference corpus and shared
read-only.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

N_GRAM_MAX = 4


def ngram_counts(tokens, max_n: int = N_GRAM_MAX) -> list[Counter]:
    """Multiset counts of 1..max_n grams; index i holds the (i+1)-grams."""
    tokens = [str(t) for t in tokens]
    out = []
    for n in range(1, max_n + 1):
        c = Counter()
        for i in range(len(tokens) - n + 1):
            c[tuple(tokens[i : i + n])] += 1
        out.append(c)
    return out


@dataclass
class DocumentFrequency:
    """Image-granular document frequencies: an n-gram counts once per image."""

    counts: dict
    n_images: int

    @property
    def log_n(self) -> float:
        return math.log(self.n_images)

    def idf(self, gram) -> float:
        # unseen n-grams have df floored at 1, i.e. idf = log(n_images)
        return self.log_n - math.log(max(1.0, self.counts.get(gram, 0.0)))


def build_document_frequency(references) -> DocumentFrequency:
    """references: per-image lists of reference token sequences."""
    if len(references) == 0:
        raise InputError("cannot compute document frequencies of an empty corpus")
    counts: dict = {}
    for refs in references:
        seen = set()
        for ref in refs:
            for c in ngram_counts(ref):
                seen.update(c.keys())
        for g in seen:
            counts[g] = counts.get(g, 0) + 1
    return DocumentFrequency(counts, len(references))


def _tfidf(counts: list[Counter], df: DocumentFrequency):
    """Per-n tf-idf vectors (sparse dicts), their norms, and the unigram length."""
    vecs = []
    norms = []
    length = 0
    for n, c in enumerate(counts):
        vec = {g: cnt * df.idf(g) for g, cnt in c.items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
        if n == 0:
            length = sum(c.values())
    return vecs, norms, length


def cider(candidates, references, variant: str = "cider",
          df: DocumentFrequency | None = None, sigma: float = 6.0
          ) -> tuple[float, np.ndarray]:
    """Consensus score: 10 * mean over n=1..4 of the average cosine similarity
    between candidate and reference tf-idf n-gram vectors.

    candidates[i] is one token sequence, references[i] the reference list for
    the same image. The "cider-d" variant clips candidate counts at the
    reference count and applies a gaussian length penalty (sigma). When `df`
    is None, document frequencies come from `references` itself; pass a
    precomputed table to score against another corpus (e.g. training
    references during self-critical training).
    """
    if variant not in ("cider", "cider-d"):
        raise InputError(f"unknown cider variant {variant!r}")
    if len(candidates) != len(references):
        raise InputError("need one candidate per reference list")
    if df is None:
        df = build_document_frequency(references)

    scores = np.zeros(len(candidates))
    for i, (cand, refs) in enumerate(zip(candidates, references)):
        if len(cand) == 0:
            log.warning("empty candidate for image %d scores 0", i)
            continue
        cand_vecs, cand_norms, cand_len = _tfidf(ngram_counts(cand), df)
        acc = np.zeros(N_GRAM_MAX)
        for ref in refs:
            ref_vecs, ref_norms, ref_len = _tfidf(ngram_counts(ref), df)
            for n in range(N_GRAM_MAX):
                num = 0.0
                for g, val in cand_vecs[n].items():
                    rv = ref_vecs[n].get(g)
                    if rv is None:
                        continue
                    num += (min(val, rv) if variant == "cider-d" else val) * rv
                if cand_norms[n] != 0.0 and ref_norms[n] != 0.0:
                    sim = num / (cand_norms[n] * ref_norms[n])
                else:
                    sim = 0.0
                if variant == "cider-d":
                    delta = float(cand_len - ref_len)
                    sim *= math.exp(-(delta * delta) / (2.0 * sigma * sigma))
                acc[n] += sim
        scores[i] = 10.0 * float(acc.mean()) / len(refs)
    return float(scores.mean()), scores


def bleu(candidates, references, max_n: int = N_GRAM_MAX) -> list[float]:
    """Corpus BLEU-1..max_n: modified n-gram precision with a brevity penalty
    against the closest reference length (ties towards the shorter). No
    smoothing; an order with zero matches zeroes every BLEU-k with k >= n."""
    if len(candidates) != len(references):
        raise InputError("need one candidate per reference list")
    matched = np.zeros(max_n)
    total = np.zeros(max_n)
    cand_len_sum = 0
    ref_len_sum = 0
    for cand, refs in zip(candidates, references):
        cand_counts = ngram_counts(cand, max_n)
        ref_counts = [ngram_counts(r, max_n) for r in refs]
        for n in range(max_n):
            for g, cnt in cand_counts[n].items():
                best = max((rc[n].get(g, 0) for rc in ref_counts), default=0)
                matched[n] += min(cnt, best)
            total[n] += max(len(cand) - n, 0)
        cand_len_sum += len(cand)
        ref_len_sum += min(
            (len(r) for r in refs),
            key=lambda L: (abs(L - len(cand)), L),
        )
    bp = 1.0 if cand_len_sum >= ref_len_sum else (
        math.exp(1.0 - ref_len_sum / cand_len_sum) if cand_len_sum > 0 else 0.0
    )
    out = []
    for k in range(1, max_n + 1):
        if any(total[n] == 0 or matched[n] == 0 for n in range(k)):
            out.append(0.0)
            continue
        logp = sum(math.log(matched[n] / total[n]) for n in range(k)) / k
        out.append(bp * math.exp(logp))
    return out
