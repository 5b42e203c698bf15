"""Reconstruction metrics: ROUGE-L F, smoothed BLEU-4, cosine similarity."""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Vocab, words


class MetricError(ValueError):
    pass


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """ROUGE-L F-measure from the longest common subsequence."""
    if not candidate or not reference:
        raise MetricError("rouge_l needs non-empty sequences")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(candidate: Sequence, references: Sequence[Sequence], max_n: int = 4) -> float:
    """Sentence BLEU-4 with brevity penalty.

    Orders 2..4 use add-one smoothing, ``(matches + 1) / (total + 1)``.  A
    candidate sharing no unigram with any reference scores exactly 0.
    The brevity penalty uses the reference length closest to the candidate
    (shorter wins ties).
    """
    if not candidate:
        raise MetricError("bleu needs a non-empty candidate")
    refs = [r for r in references if len(r)]
    if not refs:
        raise MetricError("all references are empty")
    log_p = 0.0
    for n in range(1, max_n + 1):
        cand = _ngrams(candidate, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        matches = sum(min(c, max_ref[g]) for g, c in cand.items())
        total = sum(cand.values())
        if n == 1:
            if matches == 0:
                return 0.0
            p = matches / total
        else:
            p = (matches + 1) / (total + 1)
        log_p += math.log(p) / max_n
    c = len(candidate)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


# --- sentence embedders -------------------------------------------------------

SentenceEmbedder = Callable[[str], np.ndarray]


class CountEmbedder:
    """L2-normalized bag-of-words counts over a fixed vocabulary."""

    def __init__(self, vocab: Vocab | None = None):
        self.vocab = vocab
        self._index: dict[str, int] = {}

    def _id(self, w: str) -> int:
        if self.vocab is not None:
            return self.vocab.stoi.get(w, self.vocab.unk_id)
        return self._index.setdefault(w, len(self._index))

    def __call__(self, text: str) -> dict[int, float]:
        counts = Counter(self._id(w) for w in words(text))
        norm = math.sqrt(sum(c * c for c in counts.values()))
        return {k: v / norm for k, v in counts.items()} if norm else {}


class MeanEmbedder:
    """Mean of the victim's token-embedding rows (positions excluded)."""

    def __init__(self, embedding: np.ndarray, vocab: Vocab):
        self.embedding = np.asarray(embedding, dtype=np.float64)
        self.vocab = vocab

    def __call__(self, text: str) -> np.ndarray:
        ids = [self.vocab.stoi.get(w, self.vocab.unk_id) for w in words(text)]
        if not ids:
            return np.zeros(self.embedding.shape[1])
        return self.embedding[ids].mean(axis=0)

    @classmethod
    def from_victim(cls, victim, vocab: Vocab) -> "MeanEmbedder":
        return cls(victim.tok_emb.weight.detach().numpy(), vocab)


def _cos(u, v) -> float:
    if isinstance(u, dict):
        dot = sum(x * v.get(k, 0.0) for k, x in u.items())
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
    else:
        u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
        dot, nu, nv = float(u @ v), float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0 or nv == 0:
        warnings.warn("zero sentence embedding; cosine similarity defined as 0.0", RuntimeWarning)
        return 0.0
    return max(-1.0, min(1.0, dot / (nu * nv)))


def cosine_similarity(candidate: str, reference: str, embedder: SentenceEmbedder) -> float:
    if candidate == reference and words(candidate):
        return 1.0
    return _cos(embedder(candidate), embedder(reference))


# --- run evaluation -------------------------------------------------------------


@dataclass
class PairScore:
    record_id: str
    rouge_l: float
    bleu: float
    cos_sim: float


@dataclass
class EvalReport:
    rouge_l: float
    bleu: float
    cos_sim: float
    n_pairs: int
    per_pair: list[PairScore] = field(default_factory=list)

    def summary(self) -> dict:
        return {"rouge_l": self.rouge_l, "bleu": self.bleu, "cos_sim": self.cos_sim, "n_pairs": self.n_pairs}

    def write(self, path: str | Path) -> None:
        """Per-pair CSV rows followed by a ``# mean`` summary footer."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["record_id", "rouge_l", "bleu", "cos_sim"])
            for p in self.per_pair:
                w.writerow([p.record_id, repr(p.rouge_l), repr(p.bleu), repr(p.cos_sim)])
            fh.write(f"# mean,{self.rouge_l!r},{self.bleu!r},{self.cos_sim!r},n={self.n_pairs}\n")


def score_pair(truth: str, guess: str, embedder: SentenceEmbedder) -> tuple[float, float, float]:
    ref, cand = words(truth), words(guess)
    if not cand:
        # an empty reconstruction shares nothing with the truth
        return 0.0, 0.0, 0.0
    return rouge_l(cand, ref), bleu(cand, [ref]), cosine_similarity(guess, truth, embedder)


def evaluate_run(
    inversions: Sequence[tuple[str, str | None, str]],
    embedder: SentenceEmbedder | None = None,
    keep_pairs: bool = True,
) -> EvalReport:
    """Aggregate metrics over ``(record_id, truth, guess)`` triples (sorted by id)."""
    if not inversions:
        raise MetricError("no inversions to evaluate")
    embedder = embedder or CountEmbedder()
    pairs = []
    for rid, truth, guess in sorted(inversions, key=lambda t: t[0]):
        if truth is None or not words(truth):
            raise MetricError(f"record {rid} has no ground truth")
        pairs.append(PairScore(rid, *score_pair(truth, guess, embedder)))
    n = len(pairs)
    report = EvalReport(
        rouge_l=math.fsum(p.rouge_l for p in pairs) / n,
        bleu=math.fsum(p.bleu for p in pairs) / n,
        cos_sim=math.fsum(p.cos_sim for p in pairs) / n,
        n_pairs=n,
    )
    if keep_pairs:
        report.per_pair = pairs
    return report


def write_inversions(rows: Sequence[tuple[str, str | None, str]], path: str | Path) -> None:
    """(record_id, ground_truth, inverted_text); ground_truth is blank outside evaluation."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["record_id", "ground_truth", "inverted_text"])
        for rid, truth, guess in rows:
            w.writerow([rid, truth or "", guess])


def read_inversions(path: str | Path) -> list[tuple[str, str | None, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh, delimiter="\t")
        next(r)
        return [(rid, truth or None, guess) for rid, truth, guess in r]
