"""Brute-force reference implementations of the text metrics."""

import itertools
import math
import random

WORDS = "i like to eat pizza and pasta on the weekend my dog cat".split()


def brute_lcs(a, b):
    # longest subsequence of a that is also a subsequence of b, by enumeration
    def is_sub(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(min(len(a), len(b)), 0, -1):
        if any(is_sub(c, b) for c in itertools.combinations(a, k)):
            return k
    return 0


def oracle_rouge(c, r):
    lcs = brute_lcs(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def oracle_bleu(c, r):
    # single-reference BLEU-4, written independently of the implementation
    def grams(s, n):
        return [tuple(s[i : i + n]) for i in range(len(s) - n + 1)]

    logs = []
    for n in range(1, 5):
        cg, rg = grams(c, n), grams(r, n)
        pool = list(rg)
        m = 0
        for g in cg:
            if g in pool:
                pool.remove(g)
                m += 1
        if n == 1:
            if m == 0:
                return 0.0
            logs.append(math.log(m / len(cg)))
        else:
            logs.append(math.log((m + 1) / (len(cg) + 1)))
    bp = 1.0 if len(c) > len(r) else math.exp(1 - len(r) / len(c))
    return bp * math.exp(sum(logs) / 4)


def random_pairs(seed, n=50, lo=1, hi=9):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        a = [rng.choice(WORDS) for _ in range(rng.randint(lo, hi))]
        b = [rng.choice(WORDS) for _ in range(rng.randint(lo, hi))]
        out.append((a, b))
    return out


def oracle_count_cosine(a, b):
    """Cosine of bag-of-words count vectors, via dictionaries."""
    if a == b:
        return 1.0
    ca, cb = {}, {}
    for w in a:
        ca[w] = ca.get(w, 0) + 1
    for w in b:
        cb[w] = cb.get(w, 0) + 1
    dot = sum(c * cb.get(w, 0) for w, c in ca.items())
    return dot / math.sqrt(sum(c * c for c in ca.values())) / math.sqrt(sum(c * c for c in cb.values()))
