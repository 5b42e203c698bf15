import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from revertlab.corpus import (
    SPLIT_NAMES,
    Corpus,
    CorpusError,
    TemplateGrammar,
    TextRecord,
    Vocab,
    corpus_stats,
    detokenize,
    load_corpus,
    load_corpus_file,
    make_splits,
    normalize,
    save_corpus,
    synth_corpus,
    tokenize,
)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(7, 5000)


def test_tokenize_empty_rejected():
    v = Vocab(["<bos>", "<eos>", "<unk>", "a"])
    with pytest.raises(CorpusError, match="empty input"):
        tokenize("", v)
    with pytest.raises(CorpusError, match="empty input"):
        tokenize("   ", v)


def test_tokenize_forced_example():
    v = Vocab.from_mapping({"<bos>": 0, "<eos>": 1, "<unk>": 2, "a": 3})
    assert tokenize("a a", v) == [0, 3, 3, 1]


def test_unknown_words_map_to_unk():
    v = Vocab(["<bos>", "<eos>", "<unk>", "a"])
    assert tokenize("a zebra", v) == [0, 3, 2, 1]


def test_vocab_ids_must_be_dense():
    with pytest.raises(CorpusError):
        Vocab.from_mapping({"<bos>": 0, "<eos>": 1, "<unk>": 5})


def test_round_trip_on_corpus_lines(corpus):
    lines = random.Random(0).sample(list(corpus.records), 1000)
    for r in lines:
        assert detokenize(tokenize(r.text, corpus.vocab), corpus.vocab) == normalize(r.text)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_round_trip_property(data):
    v = synth_corpus(1, 200).vocab
    content = [w for w in v.itos if not w.startswith("<")]
    ws = data.draw(st.lists(st.sampled_from(content), min_size=1, max_size=20))
    spacing = data.draw(st.sampled_from([" ", "  ", "\t", " \n "]))
    text = spacing.join(w.upper() if data.draw(st.booleans()) else w for w in ws)
    assert detokenize(tokenize(text, v), v) == normalize(text)


def test_synth_is_deterministic(corpus):
    again = synth_corpus(7, 5000)
    assert len(corpus) == 5000
    assert [r.text for r in again.records] == [r.text for r in corpus.records]
    assert [r.tokens for r in again.records] == [r.tokens for r in corpus.records]
    assert again.vocab == corpus.vocab


def test_synth_statistics(corpus):
    s = corpus_stats(corpus)
    assert 8 <= s["mean_length"] <= 16
    assert s["vocab_size"] <= 2000
    assert all(r.entities for r in corpus.records if "{" not in r.text)


def test_synth_stats_stable_across_seeds(corpus):
    ref = corpus_stats(corpus)
    for seed in (0, 1, 2):
        s = corpus_stats(synth_corpus(seed, 5000))
        assert abs(s["mean_length"] - ref["mean_length"]) <= 0.1 * ref["mean_length"]
        assert abs(s["vocab_size"] - ref["vocab_size"]) <= 0.1 * ref["vocab_size"]


def test_synth_rejects_nonpositive_n():
    with pytest.raises(CorpusError):
        synth_corpus(0, 0)


def test_grammar_needs_twenty_templates():
    assert len(TemplateGrammar().templates) >= 20
    with pytest.raises(CorpusError):
        TemplateGrammar(templates=(("i like {food}", 1),))


def _cheap_corpus(n):
    v = Vocab(["<bos>", "<eos>", "<unk>", "x"])
    rec = tuple(TextRecord(f"r{i}", "x", (0, 3, 1)) for i in range(n))
    return Corpus(rec, v)


def test_split_sizes_match_table_proportions():
    n = 162_064
    c = make_splits(_cheap_corpus(n), (0.82, 0.09, 0.09), aux_fraction=0.0, seed=0)
    sizes = {k: len(c.split(k)) for k in SPLIT_NAMES}
    assert abs(sizes["train"] - 0.82 * n) <= 1
    assert abs(sizes["val"] - 0.09 * n) <= 1
    assert abs(sizes["test"] - 0.09 * n) <= 1


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 400),
    train=st.floats(0.1, 0.9),
    aux=st.floats(0.0, 0.5),
    seed=st.integers(0, 10),
)
def test_split_partition_and_aux_disjoint(n, train, aux, seed):
    val = (1 - train) / 2
    c = make_splits(_cheap_corpus(n), (train, val, 1 - train - val), aux, seed)
    assert set(c.split_labels) == {r.id for r in c.records}
    assert set(c.split_labels.values()) <= set(SPLIT_NAMES)
    aux_ids = {r.id for r in c.split("aux")}
    test_ids = {r.id for r in c.split("test")}
    assert not aux_ids & test_ids
    assert sum(len(c.split(k)) for k in SPLIT_NAMES) == n
    assert make_splits(_cheap_corpus(n), (train, val, 1 - train - val), aux, seed).split_labels == c.split_labels


def test_aux_fraction_is_taken_from_train():
    c = make_splits(_cheap_corpus(1000), (0.8, 0.1, 0.1), aux_fraction=0.1, seed=3)
    assert len(c.split("aux")) == 80
    assert len(c.split("train")) == 720


def test_bad_ratios_rejected():
    with pytest.raises(CorpusError):
        make_splits(_cheap_corpus(10), (0.5, 0.2, 0.2))


def test_save_and_load(tmp_path, corpus):
    c = make_splits(synth_corpus(3, 300), seed=1)
    paths = save_corpus(c, tmp_path)
    vocab_lines = paths["vocab"].read_text().splitlines()
    assert vocab_lines == list(c.vocab.itos)
    assert json.loads(paths["splits"].read_text()) == dict(c.split_labels)
    back = load_corpus(tmp_path)
    assert back.records == c.records
    assert dict(back.split_labels) == dict(c.split_labels)


def test_load_plain_sentence_file(tmp_path):
    f = tmp_path / "persona.txt"
    f.write_text("No I just make boats on the weekend. What else do you do?\n\nI love CHRISTMAS!\n", encoding="utf-8")
    c = load_corpus_file(f)
    assert [r.text for r in c.records] == [
        "no i just make boats on the weekend . what else do you do ?",
        "i love christmas !",
    ]
