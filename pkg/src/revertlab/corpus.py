"""Text corpora: normalization, word-level vocabularies, a persona-chat style
synthetic generator, and seeded train/val/test/aux splitting."""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
SPECIALS = (BOS, EOS, UNK)

SPLIT_NAMES = ("train", "val", "test", "aux")

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


class CorpusError(ValueError):
    pass


def normalize(text: str) -> str:
    """Lowercase, split punctuation from words and collapse whitespace."""
    return " ".join(_WORD_RE.findall(text.lower()))


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class Vocab:
    """Bijection between token strings and dense ids ``0..len-1``."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.itos: tuple[str, ...] = tuple(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for sp in SPECIALS:
            if sp not in self.stoi:
                raise CorpusError(f"vocabulary lacks special token {sp}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, int]) -> "Vocab":
        ids = sorted(mapping.values())
        if ids != list(range(len(ids))):
            raise CorpusError("vocab ids must be dense in [0, vocab_size)")
        inv = {i: t for t, i in mapping.items()}
        return cls([inv[i] for i in range(len(ids))])

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocab":
        counts = Counter(w for t in texts for w in words(t))
        kept = sorted(w for w, c in counts.items() if c >= min_count and w not in SPECIALS)
        return cls(list(SPECIALS) + kept)

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def __hash__(self) -> int:
        return hash(self.itos)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").rstrip("\n").split("\n"))


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Map text to ``[BOS, w1, ..., wn, EOS]``; unknown words become UNK."""
    ws = words(text)
    if not ws:
        raise CorpusError("empty input")
    unk = vocab.unk_id
    return [vocab.bos_id] + [vocab.stoi.get(w, unk) for w in ws] + [vocab.eos_id]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    """Inverse of :func:`tokenize`; BOS is skipped and decoding stops at EOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == vocab.eos_id:
            break
        if i == vocab.bos_id:
            continue
        out.append(vocab.itos[i])
    return " ".join(out)


@dataclass(frozen=True)
class TextRecord:
    id: str
    text: str
    tokens: tuple[int, ...]
    label: int | None = None
    entities: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class Corpus:
    records: tuple[TextRecord, ...]
    vocab: Vocab
    split_labels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise CorpusError("record ids must be unique")

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[TextRecord]:
        if name not in SPLIT_NAMES:
            raise CorpusError(f"unknown split {name!r}")
        return [r for r in self.records if self.split_labels.get(r.id) == name]

    def by_id(self) -> dict[str, TextRecord]:
        return {r.id: r for r in self.records}

    @property
    def max_len(self) -> int:
        return max(len(r.tokens) for r in self.records)


def corpus_from_texts(
    texts: Sequence[str],
    vocab: Vocab | None = None,
    max_seq_len: int = 32,
    id_prefix: str = "line",
    labels: Sequence[int | None] | None = None,
) -> Corpus:
    """Build a corpus from raw sentences, truncating to ``max_seq_len`` tokens."""
    texts = [normalize(t) for t in texts]
    texts = [t for t in texts if t]
    vocab = vocab or Vocab.build(texts)
    records = []
    for i, t in enumerate(texts):
        toks = tokenize(t, vocab)
        if len(toks) > max_seq_len:
            toks = toks[: max_seq_len - 1] + [vocab.eos_id]
            t = detokenize(toks, vocab)
        label = labels[i] if labels is not None else None
        records.append(TextRecord(f"{id_prefix}{i:06d}", t, tuple(toks), label))
    return Corpus(tuple(records), vocab)


def load_corpus_file(path: str | Path, vocab: Vocab | None = None, max_seq_len: int = 32) -> Corpus:
    """One UTF-8 sentence per line (PersonaChat/Wiki exports in this shape work)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return corpus_from_texts(lines, vocab=vocab, max_seq_len=max_seq_len)


def save_corpus(corpus: Corpus, directory: str | Path) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": d / "corpus.txt",
        "vocab": d / "vocab.txt",
        "splits": d / "splits.json",
        "records": d / "records.jsonl",
    }
    paths["corpus"].write_text("".join(r.text + "\n" for r in corpus.records), encoding="utf-8")
    corpus.vocab.save(paths["vocab"])
    paths["splits"].write_text(json.dumps(dict(corpus.split_labels), indent=1, sort_keys=True))
    with open(paths["records"], "w", encoding="utf-8") as fh:
        for r in corpus.records:
            fh.write(json.dumps({"id": r.id, "label": r.label, "entities": dict(r.entities)}) + "\n")
    return paths


def load_corpus(directory: str | Path) -> Corpus:
    d = Path(directory)
    vocab = Vocab.load(d / "vocab.txt")
    texts = (d / "corpus.txt").read_text(encoding="utf-8").splitlines()
    meta = [json.loads(l) for l in (d / "records.jsonl").read_text(encoding="utf-8").splitlines()]
    if len(meta) != len(texts):
        raise CorpusError("records.jsonl and corpus.txt disagree in length")
    records = tuple(
        TextRecord(m["id"], t, tuple(tokenize(t, vocab)), m["label"], tuple(m["entities"].items()))
        for m, t in zip(meta, texts)
    )
    splits = json.loads((d / "splits.json").read_text()) if (d / "splits.json").exists() else {}
    return Corpus(records, vocab, splits)


# --- synthetic persona-chat corpus ---------------------------------------

_FILLERS: dict[str, list[str]] = {
    "name": """anna ben carla dmitri elena farid grace hiro ines jamal kira liam maya noor
        oscar priya quinn rosa sami tara umar vera wen xavier yara zoe amir bella chen dana
        emil fatima goran hana ivan julia kofi lena mateo nadia olga pablo rami sofia tomas
        ursula victor wanda yusuf zara""".split(),
    "place": """paris tokyo texas berlin ohio lagos lima oslo cairo denver seattle boston
        madrid rome dublin nairobi sydney toronto chicago miami vienna prague warsaw athens
        lisbon seoul manila delhi mumbai kyoto alaska florida iceland norway kenya peru chile
        canada mexico spain italy greece brazil france japan india egypt ghana""".split(),
    "food": """pizza sushi tacos pasta curry ramen burgers salad pancakes waffles steak
        dumplings noodles soup bagels cheese chocolate cookies pie cake rice beans chili
        lasagna falafel hummus kebabs paella risotto oatmeal cereal yogurt mangoes apples
        bananas strawberries grapes peaches popcorn pretzels donuts""".split(),
    "hobby": """painting hiking reading swimming cooking baking gardening fishing knitting
        dancing singing running cycling surfing skiing climbing camping writing drawing
        chess gaming sewing woodworking photography yoga boxing rowing sailing skating
        juggling pottery archery bowling golfing""".split(),
    "job": """nurse teacher doctor lawyer chef pilot farmer baker plumber dentist
        engineer mechanic cashier librarian firefighter accountant carpenter electrician
        waiter barber painter writer singer driver student professor scientist
        programmer architect pharmacist""".split(),
    "pet": "dog cat parrot hamster rabbit turtle goldfish snake lizard horse pony ferret".split(),
    "color": "red blue green yellow purple orange pink black white gray brown teal".split(),
    "sport": """soccer tennis basketball baseball hockey volleyball rugby cricket golf
        football badminton wrestling""".split(),
    "music": "jazz rock pop country metal blues reggae classical rap folk punk opera".split(),
    "family": "mother father sister brother grandmother grandfather aunt uncle cousin wife husband son daughter".split(),
    "number": "two three four five six seven eight nine ten eleven twelve".split(),
    "day": "monday tuesday wednesday thursday friday saturday sunday weekend".split(),
}

# (template, sentiment label) -- 1 positive, 0 negative
_TEMPLATES: list[tuple[str, int]] = [
    ("i love {food} . what about you ?", 1),
    ("my favorite food is {food} and i eat it every {day} .", 1),
    ("i hate {food} , it makes me sick .", 0),
    ("i live in {place} with my {pet} .", 1),
    ("i grew up in {place} but i moved to {place2} .", 1),
    ("i work as a {job} and i really enjoy it .", 1),
    ("i am a {job} , but i do not like my boss .", 0),
    ("my name is {name} and i am from {place} .", 1),
    ("my {family} is a {job} in {place} .", 1),
    ("i have {number} {pet}s at home .", 1),
    ("in my free time i like {hobby} and {hobby2} .", 1),
    ("i do not enjoy {hobby} at all .", 0),
    ("my favorite color is {color} , what is yours ?", 1),
    ("i play {sport} every {day} with my {family} .", 1),
    ("i listen to {music} music when i am {hobby} .", 1),
    ("i can not stand {music} music .", 0),
    ("no i just make boats on the {day} . what else do you do ?", 1),
    ("what is your favorite holiday ? mine is in {place} .", 1),
    ("my {family} {name} hates {food} and {sport} .", 0),
    ("i am {number} years into my job as a {job} .", 1),
    ("i am sad because my {pet} ran away last {day} .", 0),
    ("do you like {sport} ? i watch it on {day} .", 1),
    ("i was a {job} before i retired to {place} .", 1),
    ("i am scared of {pet}s since i was a child .", 0),
    ("we go {hobby} in {place} every summer .", 1),
    ("my {pet} is {color} and loves {food} .", 1),
    ("i failed my {job} exam and i feel awful .", 0),
    ("i drive a {color} car to work on {day} .", 1),
]


@dataclass(frozen=True)
class TemplateGrammar:
    templates: tuple[tuple[str, int], ...] = tuple(_TEMPLATES)
    fillers: Mapping[str, Sequence[str]] = field(default_factory=lambda: dict(_FILLERS))

    def __post_init__(self):
        if len(self.templates) < 20:
            raise CorpusError("grammar needs at least 20 templates")

    def slots(self, template: str) -> list[str]:
        return re.findall(r"\{(\w+)\}", template)

    def render(self, rng: random.Random) -> tuple[str, int, tuple[tuple[str, str], ...]]:
        template, label = rng.choice(self.templates)
        values: dict[str, str] = {}
        entities = []
        for slot in self.slots(template):
            base = slot.rstrip("0123456789")
            choices = [c for c in self.fillers[base] if c not in values.values()]
            values[slot] = rng.choice(choices)
            entities.append((slot, values[slot]))
        return template.format(**values), label, tuple(entities)


def synth_corpus(
    seed: int, n: int, grammar: TemplateGrammar | None = None, max_seq_len: int = 32
) -> Corpus:
    """Deterministic persona-style corpus; every record has its own RNG stream."""
    if n <= 0:
        raise CorpusError("n must be positive")
    grammar = grammar or TemplateGrammar()
    rendered = []
    for i in range(n):
        rng = random.Random(f"{seed}:{i}")
        rendered.append(grammar.render(rng))
    texts = [normalize(t) for t, _, _ in rendered]
    vocab = Vocab.build(texts)
    records = []
    for i, ((_, label, ents), text) in enumerate(zip(rendered, texts)):
        toks = tokenize(text, vocab)
        if len(toks) > max_seq_len:
            raise CorpusError(f"template produced {len(toks)} tokens > max_seq_len")
        records.append(TextRecord(f"s{seed}-{i:06d}", text, tuple(toks), label, ents))
    return Corpus(tuple(records), vocab)


def make_splits(
    corpus: Corpus,
    ratios: tuple[float, float, float] = (0.82, 0.09, 0.09),
    aux_fraction: float = 0.1,
    seed: int = 0,
) -> Corpus:
    """Assign every record to exactly one of train/val/test/aux.

    The aux set is carved out of the train portion, so it never meets test.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise CorpusError("split ratios must be three non-negative numbers summing to 1")
    if not 0.0 <= aux_fraction < 1.0:
        raise CorpusError("aux_fraction must lie in [0, 1)")
    ids = [r.id for r in corpus.records]
    random.Random(f"split:{seed}").shuffle(ids)
    n = len(ids)
    n_train = round(ratios[0] * n)
    n_val = round(ratios[1] * n)
    n_val = min(n_val, n - n_train)
    n_aux = round(aux_fraction * n_train)
    labels = {}
    for k, rid in enumerate(ids):
        if k < n_aux:
            labels[rid] = "aux"
        elif k < n_train:
            labels[rid] = "train"
        elif k < n_train + n_val:
            labels[rid] = "val"
        else:
            labels[rid] = "test"
    return Corpus(corpus.records, corpus.vocab, labels)


def corpus_stats(corpus: Corpus) -> dict[str, float]:
    lengths = [len(r.tokens) - 2 for r in corpus.records]
    return {
        "n_records": len(corpus),
        "mean_length": sum(lengths) / len(lengths),
        "vocab_size": len(corpus.vocab),
        "unique_entities": len({v for r in corpus.records for _, v in r.entities}),
    }
