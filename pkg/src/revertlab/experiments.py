"""Experiment recipes on the toy benchmark: single attacks, sublayer and
depth sweeps, purifier ablation and the information-plane scan."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .corpus import Corpus, load_corpus_file, make_splits, synth_corpus
from .evalkit import CountEmbedder, EvalReport, MeanEmbedder, evaluate_run
from .miprobe import MIEstimate, information_plane, monotone_report, pearson
from .revertlm import (
    AttackerModel,
    DecoderFit,
    PurifierConfig,
    PurifierFit,
    TrainRecipe,
    build_attacker,
    freeze,
    invert_many,
    joint_finetune,
    pretrain_purifier,
    train_attacker,
)
from .splitproto import AttackKnowledge, CaptureSet, capture_dataset, deserialize_frame
from .tinylm import ModelConfig, TapPoint, TinyLM, train_victim

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    pass


def build_corpus(cfg: RunConfig) -> Corpus:
    c = cfg.corpus
    if c.source == "synthetic":
        corpus = synth_corpus(cfg.seed, c.n, max_seq_len=c.max_seq_len)
    else:
        if not Path(c.path).exists():
            raise MissingArtifact(f"corpus file {c.path} not found")
        corpus = load_corpus_file(c.path, max_seq_len=c.max_seq_len)
    return make_splits(corpus, tuple(c.ratios), c.aux_fraction, seed=cfg.seed)


def model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        arch=m.arch, n_blocks=m.n_blocks, d_model=m.d_model, n_heads=m.n_heads, d_ff=m.d_ff,
        vocab_size=vocab_size, max_seq_len=m.max_seq_len, seed=cfg.seed,
    )


@dataclass
class Benchmark:
    config: RunConfig
    corpus: Corpus
    victim: TinyLM
    victim_val_ce: float = float("nan")
    victim_initial_ce: float = float("nan")
    _captures: dict = field(default_factory=dict, repr=False)

    @property
    def pad_id(self) -> int:
        return self.corpus.vocab.eos_id

    def captures(self, tap: TapPoint) -> CaptureSet:
        """Frames for every record at ``tap``, computed once per benchmark."""
        if tap not in self._captures:
            self._captures[tap] = capture_dataset(
                self.victim, tap, list(self.corpus.records), dict(self.corpus.split_labels), self.pad_id
            )
        return self._captures[tap]


def prepare_benchmark(cfg: RunConfig, checkpoint_out: str | Path | None = None) -> Benchmark:
    """Corpus plus victim: loaded from ``cfg.victim.checkpoint`` when set, else trained."""
    corpus = build_corpus(cfg)
    if cfg.victim.checkpoint:
        if not Path(cfg.victim.checkpoint).exists():
            raise MissingArtifact(f"victim checkpoint {cfg.victim.checkpoint} not found")
        victim = TinyLM.load(cfg.victim.checkpoint)
        if victim.config.vocab_size != len(corpus.vocab):
            raise MissingArtifact("victim checkpoint does not match the configured corpus")
        return Benchmark(cfg, corpus, victim, victim.meta.get("val_ce", float("nan")))
    v = cfg.victim
    res = train_victim(
        model_config(cfg, len(corpus.vocab)), corpus, epochs=v.epochs, batch_size=v.batch_size,
        lr=v.lr, denoise_prob=v.denoise_prob, checkpoint_path=checkpoint_out,
    )
    log.info("victim trained: val CE %.4f (initial %.4f)", res.val_ce, res.initial_val_ce)
    return Benchmark(cfg, corpus, res.model, res.val_ce, res.initial_val_ce)


@dataclass
class AttackOutcome:
    tap: TapPoint
    variant: str
    attacker: AttackerModel
    report: EvalReport
    report_count: EvalReport
    purifier_fit: PurifierFit
    step2: DecoderFit
    step3: DecoderFit
    inversions: list[tuple[str, str, str]]

    def scores(self) -> dict:
        return {
            "rouge_l": self.report.rouge_l,
            "bleu": self.report.bleu,
            "cos_sim": self.report.cos_sim,
            "cos_count": self.report_count.cos_sim,
            "n_pairs": self.report.n_pairs,
        }


def _split_data(bench: Benchmark, cs: CaptureSet, split: str):
    by_id = bench.corpus.by_id()
    sub = cs.subset(split)
    return sub.traces(), [list(by_id[r].tokens) for r in sub.record_ids], sub


def run_attack(
    bench: Benchmark,
    tap: TapPoint,
    purifier: PurifierConfig | None = None,
    recipe: TrainRecipe | None = None,
    seed: int | None = None,
) -> AttackOutcome:
    """Train an attacker on captures at ``tap`` and score it on the test split."""
    cfg = bench.config
    purifier = purifier or cfg.purifier
    recipe = recipe or cfg.recipe
    seed = cfg.seed if seed is None else seed
    cs = bench.captures(tap)
    emb = bench.captures(TapPoint(0, "embedding"))
    aux_x, aux_tok, _ = _split_data(bench, cs, "aux")
    aux_y, _, _ = _split_data(bench, emb, "aux")
    tr_x, tr_tok, _ = _split_data(bench, cs, "train")
    va_x, va_tok, _ = _split_data(bench, cs, "val")
    a = cfg.attacker
    attacker = build_attacker(
        bench.corpus.vocab, bench.victim.model_id(), bench.victim.config.d_model, bench.victim.config.d_model,
        bench.victim.config.max_seq_len, purifier,
        AttackKnowledge(a.knowledge, server_arch_known=a.knowledge == "white_box"), seed=seed,
        d_model=a.d_model, n_blocks=a.n_blocks, n_heads=a.n_heads, d_ff=a.d_ff, max_prefix=a.max_prefix,
    )
    pfit = pretrain_purifier(attacker, aux_x, aux_y, recipe.step1, aux_tokens=aux_tok, seed=seed)
    freeze(attacker.purifier)
    s2 = train_attacker(attacker, tr_x, tr_tok, va_x, va_tok, recipe, lm_tokens=aux_tok, seed=seed)
    s3 = joint_finetune(attacker, tr_x, tr_tok, va_x, va_tok, recipe, seed=seed)
    report, report_count, rows = evaluate_attacker(bench, attacker, cs)
    log.info("attack %s/%s: rouge_l %.4f", tap, purifier.variant, report.rouge_l)
    return AttackOutcome(tap, purifier.variant, attacker, report, report_count, pfit, s2, s3, rows)


def evaluate_attacker(bench: Benchmark, attacker: AttackerModel, cs: CaptureSet, split: str = "test"):
    test = cs.subset(split)
    by_id = bench.corpus.by_id()
    guesses = invert_many(attacker, [deserialize_frame(f) for f in test.frames])
    rows = [(rid, by_id[rid].text, g) for rid, g in zip(test.record_ids, guesses)]
    report = evaluate_run(rows, MeanEmbedder.from_victim(bench.victim, bench.corpus.vocab))
    report_count = evaluate_run(rows, CountEmbedder(bench.corpus.vocab))
    return report, report_count, rows


# --- recipes ---------------------------------------------------------------------


def sublayer_sweep(bench: Benchmark, blocks=None, attack=run_attack) -> dict:
    """One attacker per sublayer tap; a table with one row per block.

    ``attack`` has the signature of :func:`run_attack`; callers may pass a
    memoizing wrapper to share attacks between recipes.
    """
    blocks = bench.config.sweep_blocks if blocks is None else blocks
    rows, detail = [], []
    for k in blocks:
        row = {"block": k}
        for col, pos in (("attention", "attention_out"), ("ffn", "ffn_out"), ("whole", "block_out")):
            out = attack(bench, TapPoint(k, pos))
            row[col] = out.report.rouge_l
            detail.append({"tap": str(out.tap), **out.scores()})
        rows.append(row)
    return {"table": rows, "detail": detail, "metric": "rouge_l"}


def depth_sweep(bench: Benchmark, attack=run_attack, include_embedding: bool = True) -> dict:
    """Attack every block output once; optionally the embedding tap for reference."""
    rows = []
    for k in range(bench.victim.config.n_blocks):
        out = attack(bench, TapPoint(k, "block_out"))
        s = out.scores()
        rows.append({"block": k, "rouge_l": s["rouge_l"], "bleu": s["bleu"], "cos_sim": s["cos_sim"], "cos_count": s["cos_count"]})
    emb = attack(bench, TapPoint(0, "embedding")).scores() if include_embedding else None
    scores = [r["rouge_l"] for r in rows]
    monotone = all(b <= a for a, b in zip(scores, scores[1:])) or all(b >= a for a, b in zip(scores, scores[1:]))
    return {"rows": rows, "embedding": emb, "monotone": monotone}


def purifier_ablation(bench: Benchmark, tap: TapPoint | None = None) -> dict:
    """Same seed, same captures; only the purifier variant changes."""
    tap = tap or TapPoint.parse(bench.config.ablation_tap)
    base = bench.config.purifier
    rows = []
    for variant in ("none", "linear_projection", "linear_with_tester", "autoencoder"):
        pc = PurifierConfig(
            variant, base.target_space,
            base.bottleneck_dim if variant == "autoencoder" else None,
            base.tester_weight if variant == "linear_with_tester" else 0.0,
        )
        out = run_attack(bench, tap, purifier=pc)
        s = out.scores()
        rows.append({
            "variant": variant, "rouge_l": s["rouge_l"], "bleu": s["bleu"], "cos_sim": s["cos_sim"],
            "cos_count": s["cos_count"], "purifier_heldout_mse": out.purifier_fit.heldout_mse,
            "purifier_baseline_mse": out.purifier_fit.baseline_mse,
        })
    return {"tap": str(tap), "rows": rows}


def mi_scan(bench: Benchmark) -> dict:
    """Information plane over every tap of the victim."""
    m = bench.config.mi
    taps = bench.victim.config.taps(m.positions)
    records = list(bench.corpus.records)
    order = np.random.default_rng(bench.config.seed).permutation(len(records))[: m.n_samples]
    records = [records[i] for i in sorted(order)]
    est = information_plane(bench.victim, records, taps, m.binning, probe_len=m.probe_len, pad_id=bench.pad_id)
    block_outs = [e for e in est if e.tap.position == "block_out"]
    ordered = [e for e in est if e.tap.position in ("embedding", "block_out")]
    return {
        "estimates": est,
        "pearson_block_out": pearson([e.i_xh for e in block_outs], [e.i_hy for e in block_outs]),
        "monotonicity": monotone_report(ordered),
    }


def estimates_table(est: list[MIEstimate]) -> list[dict]:
    return [e.row() for e in est]
