"""Two-stage representation inversion.

Stage one (the purifier) maps captured representations row by row toward
the victim's embedding space.  Stage two, a small prefix-conditioned
decoder, generates the text autoregressively: each purified row is mapped to
the decoder width and fed as one prefix vector ahead of the text tokens.

Training follows a fixed three-step recipe: pretrain the purifier on the
attacker's auxiliary data, train mapper + decoder with the purifier frozen,
then fine-tune everything jointly.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from .checkpoint import read_container, write_container
from .corpus import Vocab, detokenize
from .splitproto import AttackKnowledge, KnowledgePolicyError, RepresentationFrame, ServerPart
from .tinylm import Block, pad_batch, stack_mask

PURIFIER_VARIANTS = ("none", "linear_projection", "linear_with_tester", "autoencoder")


class AttackConfigError(ValueError):
    pass


class AttackDivergence(RuntimeError):
    pass


class AttackerVictimMismatch(ValueError):
    pass


@lru_cache(maxsize=None)
def load_defaults() -> dict:
    text = resources.files("revertlab").joinpath("defaults.yaml").read_text()
    return yaml.safe_load(text)


def load_calibration() -> dict:
    """Frozen acceptance thresholds and the measurements behind them."""
    text = resources.files("revertlab").joinpath("calibration.yaml").read_text()
    return yaml.safe_load(text)


@dataclass(frozen=True)
class PurifierConfig:
    variant: str
    target_space: str = "victim_embedding"
    bottleneck_dim: int | None = None
    tester_weight: float = 0.0

    def __post_init__(self):
        if self.variant not in PURIFIER_VARIANTS:
            raise AttackConfigError(f"unknown purifier variant {self.variant!r}")
        if self.target_space != "victim_embedding":
            raise AttackConfigError("only the victim_embedding target space is supported")

    @classmethod
    def default(cls, **overrides) -> "PurifierConfig":
        return cls(**{**load_defaults()["purifier"], **overrides})


@dataclass(frozen=True)
class StepSpec:
    epochs: int
    lr: float


@dataclass(frozen=True)
class TrainRecipe:
    step1: StepSpec
    step2: StepSpec
    step3: StepSpec
    batch_size: int = 64
    lm_weight: float = 0.1
    ppl_eval_every: int = 20

    @classmethod
    def default(cls, **overrides) -> "TrainRecipe":
        d = {**load_defaults()["recipe"], **overrides}
        for k in ("step1", "step2", "step3"):
            if isinstance(d[k], dict):
                d[k] = StepSpec(**d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecipe":
        return cls.default(**d)


@dataclass(frozen=True)
class AttackerConfig:
    vocab_size: int
    d_input: int
    d_embed: int
    max_len: int
    d_model: int = 128
    n_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_prefix: int = 32
    seed: int = 0

    @classmethod
    def default(cls, **kw) -> "AttackerConfig":
        return cls(**{**load_defaults()["attacker"], **kw})


# --- modules -----------------------------------------------------------------


class Purifier(nn.Module):
    def __init__(self, config: PurifierConfig, d_in: int, d_embed: int):
        super().__init__()
        self.config = config
        v = config.variant
        if v == "none":
            if d_in != d_embed:
                raise AttackConfigError(
                    f"identity purifier needs d_model == d_embed, got {d_in} and {d_embed}"
                )
            self.net = nn.Identity()
        elif v in ("linear_projection", "linear_with_tester"):
            self.net = nn.Linear(d_in, d_embed)
        else:
            b = config.bottleneck_dim or d_embed
            if b > d_in:
                raise AttackConfigError("bottleneck_dim must not exceed d_model")
            self.net = nn.Sequential(nn.Linear(d_in, b), nn.GELU(), nn.Linear(b, d_embed))

    def forward(self, x):
        return self.net(x)


class PrefixDecoder(nn.Module):
    """Causal transformer over ``[prefix vectors ; text tokens]``."""

    def __init__(self, vocab_size: int, d_model: int, n_blocks: int, n_heads: int, d_ff: int, max_positions: int):
        super().__init__()
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Embedding(max_positions, d_model)
        self.blocks = nn.ModuleList(Block(d_model, n_heads, d_ff) for _ in range(n_blocks))
        self.ln_f = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, vocab_size, bias=False)

    def forward(self, prefix, prefix_mask, tokens, token_mask=None):
        B, L = tokens.shape
        x = self.tok_emb(tokens)
        if token_mask is None:
            token_mask = torch.ones(B, L, dtype=torch.bool)
        if prefix is not None and prefix.shape[1] > 0:
            P = prefix.shape[1]
            x = torch.cat([prefix, x], dim=1)
            key_padding = torch.cat([prefix_mask, token_mask], dim=1)
            # text positions start right after each row's own prefix, so padding
            # in a batch never shifts them
            n_prefix = prefix_mask.sum(dim=1, keepdim=True)
            pos = torch.cat([torch.arange(P).expand(B, P), n_prefix + torch.arange(L)], dim=1)
        else:
            P = 0
            key_padding = token_mask
            pos = torch.arange(L).expand(B, L)
        x = x + self.pos_emb(pos)
        mask = stack_mask(True, P + L, key_padding)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.out(self.ln_f(x[:, P:]))


class TokenProbe(nn.Module):
    """Linear read-out from embedding space to token ids (the frozen tester)."""

    def __init__(self, d_embed: int, vocab_size: int):
        super().__init__()
        self.out = nn.Linear(d_embed, vocab_size)

    def forward(self, x):
        return self.out(x)


class AttackerModel(nn.Module):
    def __init__(
        self,
        config: AttackerConfig,
        purifier_config: PurifierConfig,
        vocab: Vocab,
        victim_id: bytes,
        knowledge: AttackKnowledge = AttackKnowledge(),
    ):
        super().__init__()
        self.config = config
        self.purifier_config = purifier_config
        self.vocab = vocab
        self.victim_id = victim_id
        self.knowledge = knowledge
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.purifier = Purifier(purifier_config, config.d_input, config.d_embed)
            self.mapper = nn.Linear(config.d_embed, config.d_model)
            self.decoder = PrefixDecoder(
                config.vocab_size, config.d_model, config.n_blocks, config.n_heads,
                config.d_ff, config.max_prefix + config.max_len + 1,
            )
            for m in list(self.mapper.modules()) + list(self.decoder.modules()):
                if isinstance(m, (nn.Linear, nn.Embedding)):
                    nn.init.normal_(m.weight, 0.0, 0.02)
                if isinstance(m, nn.Linear) and m.bias is not None:
                    nn.init.zeros_(m.bias)

    def prefix(self, traces: Sequence[np.ndarray]):
        """Purify, map and pad a batch of traces: ``([B, P, d], [B, P] mask)``."""
        rows = [torch.as_tensor(t[: self.config.max_prefix], dtype=self.mapper.weight.dtype) for t in traces]
        P = max(r.shape[0] for r in rows)
        x = torch.zeros(len(rows), P, self.config.d_input, dtype=self.mapper.weight.dtype)
        mask = torch.zeros(len(rows), P, dtype=torch.bool)
        for i, r in enumerate(rows):
            x[i, : r.shape[0]] = r
            mask[i, : r.shape[0]] = True
        return self.mapper(self.purifier(x)), mask

    def logits(self, traces, token_seqs):
        """Teacher-forced logits: inputs ``[BOS, w1..wn]``, aligned targets ``[w1..wn, EOS]``."""
        tokens, kp = pad_batch(token_seqs, self.vocab.eos_id)
        prefix, pmask = self.prefix(traces)
        return self.decoder(prefix, pmask, tokens[:, :-1], kp[:, :-1]), tokens[:, 1:], kp[:, 1:]

    def save(self, path: str | Path, recipe: TrainRecipe | None = None, meta: dict | None = None) -> None:
        tensors = {k: v.detach().cpu().float().numpy() for k, v in self.state_dict().items()}
        write_container(
            path, "attacker", asdict(self.config), tensors,
            {
                "purifier_config": asdict(self.purifier_config),
                "recipe": recipe.to_dict() if recipe else None,
                "victim_id": self.victim_id.hex(),
                "vocab": list(self.vocab.itos),
                "knowledge": asdict(self.knowledge),
                **(meta or {}),
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "AttackerModel":
        header, tensors = read_container(path)
        if header["kind"] != "attacker":
            raise ValueError(f"{path} is a {header['kind']} checkpoint, not an attacker")
        meta = header["meta"]
        model = cls(
            AttackerConfig(**header["config"]),
            PurifierConfig(**meta["purifier_config"]),
            Vocab(meta["vocab"]),
            bytes.fromhex(meta["victim_id"]),
            AttackKnowledge(**meta["knowledge"]),
        )
        model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        model.meta = meta
        return model.eval()


def build_attacker(
    vocab: Vocab,
    victim_id: bytes,
    d_input: int,
    d_embed: int,
    max_len: int,
    purifier_config: PurifierConfig | None = None,
    knowledge: AttackKnowledge = AttackKnowledge(),
    seed: int = 0,
    **arch,
) -> AttackerModel:
    cfg = AttackerConfig.default(
        vocab_size=len(vocab), d_input=d_input, d_embed=d_embed, max_len=max_len, seed=seed, **arch
    )
    return AttackerModel(cfg, purifier_config or PurifierConfig.default(), vocab, victim_id, knowledge)


def audit_knowledge(attacker: AttackerModel, server: ServerPart) -> None:
    """Fail if a black-box attacker's graph holds any server parameter."""
    if attacker.knowledge.level == "white_box":
        return
    server_ptrs = {p.data_ptr() for p in server.parameters()}
    shared = [n for n, p in attacker.named_parameters() if p.data_ptr() in server_ptrs]
    if shared:
        raise KnowledgePolicyError(f"black-box attacker holds server parameters: {shared}")


# --- losses -------------------------------------------------------------------


def sequence_nll(logits, targets, target_mask):
    """Per-sequence summed negative log-likelihood (nats) and token counts."""
    t = targets.masked_fill(~target_mask, 0)
    logp = F.log_softmax(logits, dim=-1).gather(-1, t[..., None])[..., 0]
    nll = -(logp * target_mask.to(logp.dtype)).sum(dim=1)
    return nll, target_mask.sum(dim=1)


def attack_loss(attacker: AttackerModel, traces, token_seqs):
    """Mean per-token SequenceCrossEntropy, plus (nll_sum, n_tokens)."""
    logits, targets, tmask = attacker.logits(traces, token_seqs)
    nll, n = sequence_nll(logits, targets, tmask)
    total, count = nll.sum(), n.sum()
    return total / count, float(total.detach()), int(count)


def lm_loss(attacker: AttackerModel, token_seqs):
    """Unconditioned language-modelling loss of the decoder (no prefix)."""
    tokens, kp = pad_batch(token_seqs, attacker.vocab.eos_id)
    logits = attacker.decoder(None, None, tokens[:, :-1], kp[:, :-1])
    nll, n = sequence_nll(logits, tokens[:, 1:], kp[:, 1:])
    return nll.sum() / n.sum()


def perplexity(nll_sum: float, n_tokens: int) -> float:
    return math.exp(nll_sum / n_tokens)


@torch.no_grad()
def evaluate_attack_ce(attacker: AttackerModel, traces, token_seqs, batch_size: int = 256) -> float:
    attacker.eval()
    total, count = 0.0, 0
    for i in range(0, len(traces), batch_size):
        _, s, n = attack_loss(attacker, traces[i : i + batch_size], token_seqs[i : i + batch_size])
        total += s
        count += n
    return total / count


# --- step 1: purifier ---------------------------------------------------------


@dataclass
class PurifierFit:
    heldout_mse: float
    baseline_mse: float
    history: list[float] = field(default_factory=list)

    @property
    def beats_constant(self) -> bool:
        return self.heldout_mse < self.baseline_mse


def _rows(arrays: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.as_tensor(np.concatenate(arrays, axis=0), dtype=torch.float32)


def pretrain_purifier(
    attacker: AttackerModel,
    aux_traces: Sequence[np.ndarray],
    aux_targets: Sequence[np.ndarray],
    spec: StepSpec,
    aux_tokens: Sequence[Sequence[int]] | None = None,
    batch_size: int = 256,
    holdout_fraction: float = 0.1,
    seed: int = 0,
) -> PurifierFit:
    """Regress the victim's embedding-tap rows from tap rows (per timestep).

    Linear variants start from the least-squares solution.
    Uses only attacker-owned auxiliary records.  ``linear_with_tester`` adds
    ``tester_weight`` times the CE of a frozen token probe, trained first on
    the targets, applied to the purified rows.
    """
    purifier = attacker.purifier
    n_hold = max(1, int(round(holdout_fraction * len(aux_traces))))
    x_tr, y_tr = _rows(aux_traces[n_hold:]), _rows(aux_targets[n_hold:])
    x_ho, y_ho = _rows(aux_traces[:n_hold]), _rows(aux_targets[:n_hold])
    baseline = float(((y_ho - y_ho.mean(0)) ** 2).mean())
    fit = PurifierFit(float("nan"), baseline)
    params = list(purifier.parameters())
    tester = None
    if purifier.config.variant == "linear_with_tester":
        if aux_tokens is None:
            raise AttackConfigError("linear_with_tester needs aux token ids")
        tok_tr = torch.as_tensor(np.concatenate([np.asarray(t) for t in aux_tokens[n_hold:]]), dtype=torch.long)
        tester = _fit_probe(y_tr, tok_tr, attacker.config.vocab_size, spec, seed)
    gen = torch.Generator().manual_seed(seed)
    if isinstance(purifier.net, nn.Linear):
        _least_squares_init(purifier.net, x_tr, y_tr)
        if tester is None:
            # the closed form is the exact minimizer; SGD would only add noise
            params = []
            with torch.no_grad():
                fit.history.append(float(F.mse_loss(purifier(x_ho), y_ho)))
    if params:
        opt = torch.optim.Adam(params, lr=spec.lr)
        for epoch in range(spec.epochs):
            order = torch.randperm(len(x_tr), generator=gen)
            for i in range(0, len(order), batch_size):
                idx = order[i : i + batch_size]
                loss = F.mse_loss(purifier(x_tr[idx]), y_tr[idx])
                if tester is not None:
                    loss = loss + purifier.config.tester_weight * F.cross_entropy(
                        tester(purifier(x_tr[idx])), tok_tr[idx]
                    )
                if not torch.isfinite(loss):
                    raise AttackDivergence(f"purifier loss became {loss.item()} in epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
            with torch.no_grad():
                fit.history.append(float(F.mse_loss(purifier(x_ho), y_ho)))
    with torch.no_grad():
        fit.heldout_mse = float(F.mse_loss(purifier(x_ho), y_ho))
    return fit


def _least_squares_init(layer: nn.Linear, x: torch.Tensor, y: torch.Tensor) -> None:
    a = torch.cat([x, torch.ones(len(x), 1)], dim=1).double()
    sol = torch.linalg.lstsq(a, y.double()).solution
    with torch.no_grad():
        layer.weight.copy_(sol[:-1].T.float())
        layer.bias.copy_(sol[-1].float())


def _fit_probe(x, tokens, vocab_size, spec: StepSpec, seed: int) -> TokenProbe:
    with torch.random.fork_rng():
        torch.manual_seed(seed + 7)
        probe = TokenProbe(x.shape[1], vocab_size)
    opt = torch.optim.Adam(probe.parameters(), lr=spec.lr)
    gen = torch.Generator().manual_seed(seed + 7)
    for _ in range(spec.epochs):
        order = torch.randperm(len(x), generator=gen)
        for i in range(0, len(order), 256):
            idx = order[i : i + 256]
            loss = F.cross_entropy(probe(x[idx]), tokens[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    for p in probe.parameters():
        p.requires_grad_(False)
    return probe


def freeze(module: nn.Module, frozen: bool = True) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)


# --- steps 2 and 3: decoder and joint fine-tune --------------------------------


@dataclass
class DecoderFit:
    val_ce_before: float
    val_ce_after: float
    ppl_log: list[dict] = field(default_factory=list)
    reverted: bool = False
    param_deltas: dict[str, float | None] = field(default_factory=dict)


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen).tolist()
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _run_epochs(attacker, params, spec, traces, tokens, recipe, gen, lm_tokens, log, step_name):
    opt = torch.optim.Adam(params, lr=spec.lr)
    step = 0
    lm_gen = torch.Generator().manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    for epoch in range(spec.epochs):
        attacker.train()
        for idx in _batches(len(traces), recipe.batch_size, gen):
            loss, nll_sum, n_tok = attack_loss(attacker, [traces[i] for i in idx], [tokens[i] for i in idx])
            total = loss
            lm_val = None
            if lm_tokens:
                pick = torch.randint(0, len(lm_tokens), (recipe.batch_size,), generator=lm_gen).tolist()
                lm_val = lm_loss(attacker, [lm_tokens[i] for i in pick])
                total = loss + recipe.lm_weight * lm_val
            if not torch.isfinite(total):
                raise AttackDivergence(f"attack loss became {total.item()} in {step_name}, epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            if step % recipe.ppl_eval_every == 0:
                entry = {
                    "step": step_name,
                    "iter": step,
                    "nll_sum": nll_sum,
                    "n_tokens": n_tok,
                    "mean_ce": float(loss.detach()),
                    "ppl": perplexity(nll_sum, n_tok),
                }
                if lm_val is not None:
                    entry["lm_ppl"] = math.exp(float(lm_val.detach()))
                log.append(entry)
            step += 1


def train_attacker(
    attacker: AttackerModel,
    traces: Sequence[np.ndarray],
    tokens: Sequence[Sequence[int]],
    val_traces: Sequence[np.ndarray],
    val_tokens: Sequence[Sequence[int]],
    recipe: TrainRecipe,
    lm_tokens: Sequence[Sequence[int]] | None = None,
    seed: int = 0,
) -> DecoderFit:
    """Step 2: train mapper and decoder on (trace, text) pairs, purifier frozen.

    The objective is SequenceCrossEntropy plus ``lm_weight`` times the
    decoder's unconditioned LM loss on ``lm_tokens`` (aux text).
    """
    if any(p.requires_grad for p in attacker.purifier.parameters()):
        raise AttackConfigError("purifier must be frozen during decoder training")
    fit = DecoderFit(evaluate_attack_ce(attacker, val_traces, val_tokens), float("nan"))
    params = list(attacker.mapper.parameters()) + list(attacker.decoder.parameters())
    gen = torch.Generator().manual_seed(seed)
    lm = list(lm_tokens) if (lm_tokens and recipe.lm_weight > 0) else None
    _run_epochs(attacker, params, recipe.step2, traces, tokens, recipe, gen, lm, fit.ppl_log, "step2")
    fit.val_ce_after = evaluate_attack_ce(attacker, val_traces, val_tokens)
    attacker.eval()
    return fit


def joint_finetune(
    attacker: AttackerModel,
    traces: Sequence[np.ndarray],
    tokens: Sequence[Sequence[int]],
    val_traces: Sequence[np.ndarray],
    val_tokens: Sequence[Sequence[int]],
    recipe: TrainRecipe,
    tolerance: float = 0.01,
    seed: int = 0,
) -> DecoderFit:
    """Step 3: one optimizer over purifier, mapper and decoder.

    If validation CE ends more than ``tolerance`` (relative) above its
    starting value, the step-2 weights are restored and ``reverted`` is set.
    """
    before = copy.deepcopy(attacker.state_dict())
    fit = DecoderFit(evaluate_attack_ce(attacker, val_traces, val_tokens), float("nan"))
    freeze(attacker, False)
    gen = torch.Generator().manual_seed(seed + 3)
    _run_epochs(attacker, list(attacker.parameters()), recipe.step3, traces, tokens, recipe, gen, None, fit.ppl_log, "step3")
    after = attacker.state_dict()
    for name, sub in (("purifier", "purifier."), ("mapper", "mapper."), ("decoder", "decoder.")):
        keys = [k for k in before if k.startswith(sub)]
        fit.param_deltas[name] = (
            float(torch.sqrt(sum(((after[k] - before[k]) ** 2).sum() for k in keys))) if keys else None
        )
    fit.val_ce_after = evaluate_attack_ce(attacker, val_traces, val_tokens)
    if fit.val_ce_after > (1.0 + tolerance) * fit.val_ce_before:
        attacker.load_state_dict(before)
        fit.reverted = True
        fit.val_ce_after = fit.val_ce_before
    attacker.eval()
    return fit


# --- inversion ----------------------------------------------------------------


def parse_decode(spec: str) -> tuple[str, float]:
    """``"greedy"``, ``"beam:K"`` or ``"sample:TEMP"``."""
    name, _, arg = spec.partition(":")
    if name == "greedy":
        return name, 0
    if name == "beam":
        return name, int(arg or 4)
    if name == "sample":
        return name, float(arg or 1.0)
    raise AttackConfigError(f"unknown decode mode {spec!r}")


def _check_frame(attacker: AttackerModel, frame: RepresentationFrame) -> None:
    if frame.model_id != attacker.victim_id:
        raise AttackerVictimMismatch("attacker/victim mismatch")


@torch.no_grad()
def greedy_ids(attacker: AttackerModel, traces: Sequence[np.ndarray], max_len: int | None = None) -> list[list[int]]:
    attacker.eval()
    max_len = max_len or attacker.config.max_len
    prefix, pmask = attacker.prefix(traces)
    B = len(traces)
    eos = attacker.vocab.eos_id
    seq = torch.full((B, 1), attacker.vocab.bos_id, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    for _ in range(max_len - 1):
        nxt = attacker.decoder(prefix, pmask, seq)[:, -1].argmax(-1)
        nxt = nxt.masked_fill(done, eos)
        seq = torch.cat([seq, nxt[:, None]], dim=1)
        done |= nxt == eos
        if bool(done.all()):
            break
    out = []
    for row in seq[:, 1:].tolist():
        out.append(row[: row.index(eos) + 1] if eos in row else row)
    return out


@torch.no_grad()
def _beam_ids(attacker: AttackerModel, trace: np.ndarray, k: int) -> list[int]:
    prefix, pmask = attacker.prefix([trace])
    eos, bos = attacker.vocab.eos_id, attacker.vocab.bos_id
    beams = [([bos], 0.0, False)]
    for _ in range(attacker.config.max_len - 1):
        if all(d for _, _, d in beams):
            break
        cands = []
        live = [b for b in beams if not b[2]]
        cands.extend(b for b in beams if b[2])
        seqs = torch.tensor([b[0] for b in live])
        logp = F.log_softmax(
            attacker.decoder(prefix.expand(len(live), -1, -1), pmask.expand(len(live), -1), seqs)[:, -1], -1
        )
        top = logp.topk(k, dim=-1)
        for (s, score, _), vals, ids in zip(live, top.values, top.indices):
            for v, i in zip(vals.tolist(), ids.tolist()):
                cands.append((s + [i], score + v, i == eos))
        cands.sort(key=lambda b: (-b[1] / len(b[0]), b[0]))
        beams = cands[:k]
    best = max(beams, key=lambda b: (b[1] / len(b[0]), [-t for t in b[0]]))
    return best[0][1:]


@torch.no_grad()
def _sample_ids(attacker: AttackerModel, trace: np.ndarray, temperature: float, gen: torch.Generator) -> list[int]:
    prefix, pmask = attacker.prefix([trace])
    seq = [attacker.vocab.bos_id]
    for _ in range(attacker.config.max_len - 1):
        logits = attacker.decoder(prefix, pmask, torch.tensor([seq]))[0, -1] / max(temperature, 1e-6)
        nxt = int(torch.multinomial(logits.softmax(-1), 1, generator=gen))
        seq.append(nxt)
        if nxt == attacker.vocab.eos_id:
            break
    return seq[1:]


def invert(
    attacker: AttackerModel,
    frame: RepresentationFrame,
    decode: str = "greedy",
    generator: torch.Generator | None = None,
) -> str:
    """Reconstruct text from one transmitted frame."""
    _check_frame(attacker, frame)
    mode, arg = parse_decode(decode)
    if mode == "greedy":
        ids = greedy_ids(attacker, [frame.states])[0]
    elif mode == "beam":
        ids = _beam_ids(attacker, frame.states, int(arg))
    else:
        ids = _sample_ids(attacker, frame.states, arg, generator or torch.Generator().manual_seed(0))
    return detokenize(ids, attacker.vocab)


def invert_many(attacker: AttackerModel, frames: Sequence[RepresentationFrame], batch_size: int = 256) -> list[str]:
    """Greedy inversion of many frames, batched."""
    for f in frames:
        _check_frame(attacker, f)
    out = []
    for i in range(0, len(frames), batch_size):
        ids = greedy_ids(attacker, [f.states for f in frames[i : i + batch_size]])
        out.extend(detokenize(s, attacker.vocab) for s in ids)
    return out
