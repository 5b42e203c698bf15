import math
import time
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import WORDS, brute_lcs, oracle_bleu, oracle_rouge, random_pairs
from revertlab.corpus import Vocab, words
from revertlab.evalkit import (
    CountEmbedder,
    MeanEmbedder,
    MetricError,
    bleu,
    cosine_similarity,
    evaluate_run,
    lcs_length,
    read_inversions,
    rouge_l,
    write_inversions,
)

@pytest.fixture
def vocab():
    return Vocab(["<bos>", "<eos>", "<unk>"] + WORDS)

def test_rouge_matches_brute_force():
    diffs = [abs(rouge_l(a, b) - oracle_rouge(a, b)) for a, b in random_pairs(0)]
    assert max(diffs) <= 1e-9

def test_lcs_matches_brute_force():
    for a, b in random_pairs(1):
        assert lcs_length(a, b) == brute_lcs(a, b)

def test_bleu_matches_oracle():
    diffs = [abs(bleu(a, [b]) - oracle_bleu(a, b)) for a, b in random_pairs(2)]
    assert max(diffs) <= 1e-9

# Hand-computed values (single reference).
BLEU_TABLE = [
    # identical 4-grams: every precision is 1, no brevity penalty
    ("a b c d", "a b c d", 1.0),
    # no shared unigram
    ("x y", "a b", 0.0),
    # p1=1, p2=(1+1)/(1+1)=1, p3=(0+1)/(0+1)=1, p4=1, bp=exp(1-4/2)
    ("a b", "a b c d", math.exp(-1.0)),
    # p1=2/3, p2=(1+1)/(2+1), p3=(0+1)/(1+1), p4=(0+1)/(0+1); c=3 == r=3
    ("a b x", "a b c", (2 / 3 * 2 / 3 * 1 / 2 * 1) ** 0.25),
]

@pytest.mark.parametrize("cand,ref,expected", BLEU_TABLE)
def test_bleu_hand_table(cand, ref, expected):
    assert bleu(cand.split(), [ref.split()]) == pytest.approx(expected, abs=1e-12)

def test_bleu_uses_closest_reference_length():
    c = "a b c".split()
    near = bleu(c, ["a b c".split(), "a b c d e f g h".split()])
    assert near == pytest.approx(1.0)

def test_identical_text_scores_one(vocab):
    emb = MeanEmbedder(np.random.default_rng(0).normal(size=(len(vocab), 8)), vocab)
    for a, _ in random_pairs(3):
        text = " ".join(a)
        assert rouge_l(a, a) == 1.0
        assert cosine_similarity(text, text, emb) == 1.0
        assert cosine_similarity(text, text, CountEmbedder(vocab)) == 1.0
    assert bleu("a b c d e".split(), ["a b c d e".split()]) == 1.0

def test_tokenized_guess_of_punctuated_text_scores_one():
    truth = "No I just make boats on the weekend. What else do you do?"
    guess = "no i just make boats on the weekend . what else do you do ?"
    assert rouge_l(words(guess), words(truth)) == 1.0

def test_count_cosine_matches_dense_oracle(vocab):
    emb = CountEmbedder(vocab)
    diffs = []
    for a, b in random_pairs(4):
        u = np.zeros(len(vocab))
        v = np.zeros(len(vocab))
        for w in a:
            u[vocab.stoi[w]] += 1
        for w in b:
            v[vocab.stoi[w]] += 1
        expected = 1.0 if a == b else u @ v / np.linalg.norm(u) / np.linalg.norm(v)
        diffs.append(abs(cosine_similarity(" ".join(a), " ".join(b), emb) - expected))
    assert max(diffs) <= 1e-9

def test_count_cosine_examples():
    emb = CountEmbedder()
    assert cosine_similarity("the cat sat", "the cat sat down", emb) == pytest.approx(3 / (math.sqrt(3) * 2), abs=1e-12)
    assert cosine_similarity("the cat", "a dog", emb) == 0.0

def test_mean_cosine_matches_loop_oracle(vocab):
    table = np.random.default_rng(5).normal(size=(len(vocab), 6))
    emb = MeanEmbedder(table, vocab)
    diffs = []
    for a, b in random_pairs(5):
        def mean(ws):
            rows = [table[vocab.stoi[w]] for w in ws]
            return [sum(r[j] for r in rows) / len(rows) for j in range(6)]

        u, v = mean(a), mean(b)
        dot = sum(x * y for x, y in zip(u, v))
        expected = 1.0 if a == b else dot / math.sqrt(sum(x * x for x in u)) / math.sqrt(sum(y * y for y in v))
        diffs.append(abs(cosine_similarity(" ".join(a), " ".join(b), emb) - expected))
    assert max(diffs) <= 1e-9

def test_metric_oracles_are_fast(vocab):
    t = time.perf_counter()
    test_rouge_matches_brute_force()
    test_bleu_matches_oracle()
    test_count_cosine_matches_dense_oracle(vocab)
    assert time.perf_counter() - t < 10

@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.sampled_from(WORDS), min_size=1, max_size=12),
    st.lists(st.sampled_from(WORDS), min_size=1, max_size=12),
)
def test_metrics_bounded_and_rouge_symmetric(a, b):
    for v in (rouge_l(a, b), bleu(a, [b])):
        assert 0.0 <= v <= 1.0
    assert rouge_l(a, b) == pytest.approx(rouge_l(b, a), abs=1e-12)
    c = cosine_similarity(" ".join(a), " ".join(b), CountEmbedder())
    assert -1.0 <= c <= 1.0

def test_empty_inputs_rejected():
    with pytest.raises(MetricError):
        rouge_l([], ["a"])
    with pytest.raises(MetricError):
        bleu(["a"], [[]])

def test_zero_embedding_warns(vocab):
    emb = MeanEmbedder(np.zeros((len(vocab), 4)), vocab)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert cosine_similarity("i like", "my dog", emb) == 0.0
    assert any("zero sentence embedding" in str(x.message) for x in w)

def test_evaluate_run_is_order_independent(vocab):
    triples = [(f"r{i}", " ".join(a), " ".join(b)) for i, (a, b) in enumerate(random_pairs(6))]
    r1 = evaluate_run(triples, CountEmbedder(vocab))
    r2 = evaluate_run(list(reversed(triples)), CountEmbedder(vocab))
    assert r1.summary() == r2.summary()
    assert r1.n_pairs == 50

def test_evaluate_run_needs_ground_truth():
    with pytest.raises(MetricError):
        evaluate_run([("r0", None, "hello")])

def test_report_and_inversion_files(tmp_path, vocab):
    triples = [("r1", "i like pizza", "i like pasta"), ("r0", "my dog", "my cat")]
    rep = evaluate_run(triples, CountEmbedder(vocab))
    rep.write(tmp_path / "pairs.csv")
    lines = (tmp_path / "pairs.csv").read_text().splitlines()
    assert lines[0] == "record_id,rouge_l,bleu,cos_sim"
    assert lines[1].startswith("r0,") and lines[-1].startswith("# mean,")
    write_inversions(triples + [("r2", None, "x")], tmp_path / "inv.tsv")
    assert read_inversions(tmp_path / "inv.tsv") == triples + [("r2", None, "x")]
