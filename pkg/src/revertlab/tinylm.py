"""Toy victim transformers with observer taps and a client/server splitter.

Blocks are pre-norm::

    a   = h + Attn(LN1(h))        <- attention_out  (after the residual add)
    f   = FFN(LN2(a))             <- ffn_out        (raw sublayer output)
    h'  = a + f                   <- block_out

Three architectures share the same block stack: ``decoder_only`` (causal LM),
``encoder_decoder`` (bidirectional encoder, causal decoder with cross
attention, trained to denoise its input) and ``encoder_mlp`` (bidirectional
encoder, mean pool, four-layer MLP classifier).  Taps index the first stack.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_container, write_container

ARCHS = ("decoder_only", "encoder_decoder", "encoder_mlp")
POSITIONS = ("embedding", "attention_out", "ffn_out", "block_out")


class TapError(ValueError):
    pass


class VictimDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TapPoint:
    block_index: int
    position: str

    def __post_init__(self):
        if self.position not in POSITIONS:
            raise TapError(f"unknown tap position {self.position!r}")
        if self.block_index < 0:
            raise TapError("block_index must be non-negative")
        if self.position == "embedding" and self.block_index != 0:
            raise TapError("the embedding tap only exists at block 0")

    @classmethod
    def parse(cls, spec: str) -> "TapPoint":
        """``"2:block_out"`` -> TapPoint(2, "block_out")."""
        try:
            block, position = spec.split(":")
            return cls(int(block), position)
        except ValueError as exc:
            raise TapError(f"bad tap spec {spec!r}, expected BLOCK:POSITION") from exc

    def __str__(self) -> str:
        return f"{self.block_index}:{self.position}"

    @property
    def stage(self) -> int:
        # index into the linear sequence of residual-stream states
        if self.position == "embedding":
            return 0
        if self.position == "attention_out":
            return 2 * self.block_index + 1
        return 2 * self.block_index + 2


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "decoder_only"
    n_blocks: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 512
    max_seq_len: int = 32
    seed: int = 0
    n_decoder_blocks: int = 1
    n_classes: int = 2

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_blocks < 2:
            raise ValueError("n_blocks must be >= 2 so both split halves own a block")
        for name in ("d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def case1(cls, vocab_size: int, **kw) -> "ModelConfig":
        """Encoder followed by a four-layer MLP classifier; tap after block 0."""
        return cls(arch="encoder_mlp", vocab_size=vocab_size, **kw)

    def taps(self, positions: Sequence[str] = POSITIONS) -> list[TapPoint]:
        out = []
        for k in range(self.n_blocks):
            for p in positions:
                if p == "embedding":
                    if k == 0:
                        out.append(TapPoint(0, p))
                else:
                    out.append(TapPoint(k, p))
        return out

    def check_tap(self, tap: TapPoint) -> None:
        if tap.block_index >= self.n_blocks:
            raise TapError(f"tap {tap} beyond the {self.n_blocks}-block model")


@dataclass
class RepresentationTrace:
    tap: TapPoint
    states: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32)
        if self.states.ndim != 2:
            raise ValueError("trace states must be a [T, d_model] matrix")
        if not np.isfinite(self.states).all():
            raise ValueError("trace contains non-finite values")

    @property
    def token_count(self) -> int:
        return self.states.shape[0]


# --- building blocks --------------------------------------------------------

_NEG = -1e9


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x, mask, memory=None):
        # mask: bool, broadcastable to [B, heads, S_q, S_k]; True = may attend
        B, S, D = x.shape
        H, dh = self.n_heads, D // self.n_heads
        if memory is None:
            q, k, v = self.qkv(x).split(D, dim=-1)
        else:
            w_q, w_kv = self.qkv.weight.split([D, 2 * D])
            b_q, b_kv = self.qkv.bias.split([D, 2 * D])
            q = F.linear(x, w_q, b_q)
            k, v = F.linear(memory, w_kv, b_kv).split(D, dim=-1)
        q = q.view(B, S, H, dh).transpose(1, 2)
        k = k.view(B, k.shape[1], H, dh).transpose(1, 2)
        v = v.view(B, v.shape[1], H, dh).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(~mask, _NEG).softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, S, D)
        return self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def attend(ln1, attn, h, mask):
    return h + attn(ln1(h), mask)


def feed(ln2, ffn, a):
    return ffn(ln2(a))


class Block(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, cross=False):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        if cross:
            self.ln_x = nn.LayerNorm(d_model)
            self.xattn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff)

    def forward(self, h, mask, memory=None, memory_mask=None):
        a = attend(self.ln1, self.attn, h, mask)
        if memory is not None:
            a = a + self.xattn(self.ln_x(a), memory_mask, memory=memory)
        return a + feed(self.ln2, self.ffn, a)


def causal_mask(S: int, device=None) -> torch.Tensor:
    return torch.ones(S, S, dtype=torch.bool, device=device).tril()[None, None]


def stack_mask(causal: bool, S: int, key_padding: torch.Tensor | None) -> torch.Tensor:
    mask = causal_mask(S) if causal else torch.ones(1, 1, S, S, dtype=torch.bool)
    if key_padding is not None:
        mask = mask & key_padding[:, None, None, :]
    return mask


def masked_mean(h, key_padding):
    if key_padding is None:
        return h.mean(dim=1)
    w = key_padding.to(h.dtype)[..., None]
    return (h * w).sum(1) / w.sum(1).clamp_min(1.0)


class LMHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def forward(self, h, key_padding=None, dec_tokens=None):
        return self.out(self.ln_f(h))


class ClassifierHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_f = nn.LayerNorm(cfg.d_model)
        d, f = cfg.d_model, cfg.d_ff
        self.mlp = nn.Sequential(
            nn.Linear(d, f), nn.GELU(), nn.Linear(f, f), nn.GELU(),
            nn.Linear(f, f), nn.GELU(), nn.Linear(f, cfg.n_classes),
        )

    def forward(self, h, key_padding=None, dec_tokens=None):
        return self.mlp(masked_mean(self.ln_f(h), key_padding))


class Seq2SeqHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_enc = nn.LayerNorm(cfg.d_model)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.blocks = nn.ModuleList(
            Block(cfg.d_model, cfg.n_heads, cfg.d_ff, cross=True) for _ in range(cfg.n_decoder_blocks)
        )
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def forward(self, h, key_padding=None, dec_tokens=None):
        if dec_tokens is None:
            raise ValueError("encoder_decoder models need decoder input tokens")
        memory = self.ln_enc(h)
        S = dec_tokens.shape[1]
        x = self.tok_emb(dec_tokens) + self.pos_emb(torch.arange(S))
        self_mask = causal_mask(S)
        mem_mask = (
            torch.ones(1, 1, 1, h.shape[1], dtype=torch.bool)
            if key_padding is None
            else key_padding[:, None, None, :]
        )
        for blk in self.blocks:
            x = blk(x, self_mask, memory, mem_mask)
        return self.out(self.ln_f(x))


_HEADS = {"decoder_only": LMHead, "encoder_mlp": ClassifierHead, "encoder_decoder": Seq2SeqHead}


def run_stages(blocks, h, start: int, stop: int, mask, record=None, offset: int = 0):
    """Advance residual-stream state ``h`` from stage ``start`` to ``stop``.

    ``blocks`` must be indexable by absolute block index minus ``offset``.
    ``record`` (a dict) receives every tap passed on the way.
    """
    for s in range(start + 1, stop + 1):
        k = (s - 1) // 2
        blk = blocks[k - offset]
        if s % 2:
            h = attend(blk.ln1, blk.attn, h, mask)
            if record is not None:
                record[TapPoint(k, "attention_out")] = h
        else:
            f = feed(blk.ln2, blk.ffn, h)
            h = h + f
            if record is not None:
                record[TapPoint(k, "ffn_out")] = f
                record[TapPoint(k, "block_out")] = h
    return h


class TinyLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        with torch.random.fork_rng():
            torch.manual_seed(c.seed)
            self.tok_emb = nn.Embedding(c.vocab_size, c.d_model)
            self.pos_emb = nn.Embedding(c.max_seq_len, c.d_model)
            self.blocks = nn.ModuleList(Block(c.d_model, c.n_heads, c.d_ff) for _ in range(c.n_blocks))
            self.head = _HEADS[c.arch](c)
            for m in self.modules():
                if isinstance(m, (nn.Linear, nn.Embedding)):
                    nn.init.normal_(m.weight, 0.0, 0.02)
                if isinstance(m, nn.Linear) and m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def causal(self) -> bool:
        return self.config.arch == "decoder_only"

    @property
    def n_stages(self) -> int:
        return 2 * self.config.n_blocks

    def embed(self, tokens):
        S = tokens.shape[1]
        if S > self.config.max_seq_len:
            raise ValueError(f"sequence of {S} tokens exceeds max_seq_len")
        return self.tok_emb(tokens) + self.pos_emb(torch.arange(S))

    def forward(self, tokens, key_padding=None, dec_tokens=None, record=None):
        h = self.embed(tokens)
        if record is not None:
            record[TapPoint(0, "embedding")] = h
        mask = stack_mask(self.causal, tokens.shape[1], key_padding)
        h = run_stages(self.blocks, h, 0, self.n_stages, mask, record)
        return self.head(h, key_padding, dec_tokens)

    def model_id(self) -> bytes:
        """16-byte digest of config and parameters."""
        hsh = hashlib.blake2b(digest_size=16)
        hsh.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, p in sorted(self.state_dict().items()):
            hsh.update(name.encode())
            hsh.update(p.detach().to(torch.float32).contiguous().numpy().tobytes())
        return hsh.digest()

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        tensors = {k: v.detach().cpu().float().numpy() for k, v in self.state_dict().items()}
        write_container(path, "victim", self.config.to_dict(), tensors, meta)

    @classmethod
    def load(cls, path: str | Path) -> "TinyLM":
        header, tensors = read_container(path)
        if header["kind"] != "victim":
            raise ValueError(f"{path} is a {header['kind']} checkpoint, not a victim")
        model = cls(ModelConfig.from_dict(header["config"]))
        model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        model.meta = header["meta"]
        return model.eval()


# --- batching, loss and training -------------------------------------------


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to a ``[B, S]`` LongTensor; returns (tokens, key_padding)."""
    S = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), S), pad_id, dtype=torch.long)
    key_padding = torch.zeros((len(seqs), S), dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        key_padding[i, : len(s)] = True
    return tokens, key_padding


def victim_loss(model: TinyLM, seqs, labels=None, pad_id: int = 1, noise=None, reduction="mean"):
    """Training objective of the victim for its architecture.

    decoder_only: next-token CE.  encoder_decoder: reconstruct the sequence
    from a (possibly noised) encoder input.  encoder_mlp: label CE.
    ``noise`` is ``(generator, prob, unk_id)`` and only affects the encoder input.
    """
    tokens, kp = pad_batch(seqs, pad_id)
    arch = model.config.arch
    if arch == "decoder_only":
        logits = model(tokens[:, :-1], kp[:, :-1])
        targets = tokens[:, 1:].masked_fill(~kp[:, 1:], -100)
        return F.cross_entropy(logits.transpose(1, 2), targets, ignore_index=-100, reduction=reduction)
    if arch == "encoder_decoder":
        enc_in = tokens
        if noise is not None:
            gen, prob, unk = noise
            drop = (torch.rand(tokens.shape, generator=gen) < prob) & kp
            drop[:, 0] = False
            enc_in = tokens.masked_fill(drop, unk)
        logits = model(enc_in, kp, dec_tokens=tokens[:, :-1])
        targets = tokens[:, 1:].masked_fill(~kp[:, 1:], -100)
        return F.cross_entropy(logits.transpose(1, 2), targets, ignore_index=-100, reduction=reduction)
    if labels is None:
        raise ValueError("encoder_mlp victims need class labels")
    logits = model(tokens, kp)
    return F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long), reduction=reduction)


@torch.no_grad()
def evaluate_ce(model: TinyLM, records, pad_id: int = 1, batch_size: int = 256) -> float:
    """Mean per-token (or per-example, for classifiers) cross-entropy in nats."""
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        seqs = [r.tokens for r in chunk]
        labels = [r.label for r in chunk] if model.config.arch == "encoder_mlp" else None
        loss = victim_loss(model, seqs, labels, pad_id, reduction="sum")
        total += float(loss)
        count += len(chunk) if labels is not None else sum(len(s) - 1 for s in seqs)
    return total / count


@dataclass
class VictimTrainResult:
    model: TinyLM
    history: list[dict] = field(default_factory=list)
    val_ce: float = float("nan")
    initial_val_ce: float = float("nan")


def train_victim(
    config: ModelConfig,
    corpus,
    epochs: int = 10,
    batch_size: int = 64,
    lr: float = 3e-3,
    denoise_prob: float = 0.15,
    checkpoint_path: str | Path | None = None,
) -> VictimTrainResult:
    """Train on the ``train`` split, report CE on ``val``."""
    if len(corpus.vocab) != config.vocab_size:
        raise ValueError("corpus vocab size does not match config.vocab_size")
    train = corpus.split("train")
    val = corpus.split("val") or train[: max(1, len(train) // 10)]
    pad_id = corpus.vocab.eos_id
    model = TinyLM(config)
    result = VictimTrainResult(model, initial_val_ce=evaluate_ce(model, val, pad_id))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed + 1)
    noise = (noise_gen, denoise_prob, corpus.vocab.unk_id) if config.arch == "encoder_decoder" else None
    step = 0
    for epoch in range(epochs):
        model.train()
        order = torch.randperm(len(train), generator=gen).tolist()
        for i in range(0, len(order), batch_size):
            chunk = [train[j] for j in order[i : i + batch_size]]
            labels = [r.label for r in chunk] if config.arch == "encoder_mlp" else None
            loss = victim_loss(model, [r.tokens for r in chunk], labels, pad_id, noise=noise)
            if not torch.isfinite(loss):
                raise VictimDivergence(f"victim loss became {loss.item()} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        result.history.append({"epoch": epoch, "train_loss": loss.item(), "val_ce": evaluate_ce(model, val, pad_id)})
    model.eval()
    result.val_ce = result.history[-1]["val_ce"] if result.history else result.initial_val_ce
    if checkpoint_path is not None:
        model.save(checkpoint_path, {"vocab": list(corpus.vocab.itos), "val_ce": result.val_ce})
    return result


# --- taps and splitting -----------------------------------------------------


@torch.no_grad()
def forward_with_tap(model: TinyLM, tokens: Sequence[int], tap: TapPoint, source_id: str = ""):
    """Teacher-forced forward of one sequence, returning (trace, logits)."""
    model.config.check_tap(tap)
    x = torch.as_tensor(list(tokens), dtype=torch.long)[None]
    record: dict = {}
    dec = x[:, :-1] if model.config.arch == "encoder_decoder" else None
    logits = model(x, dec_tokens=dec, record=record)
    return RepresentationTrace(tap, record[tap][0].numpy(), source_id), logits[0]


@torch.no_grad()
def batch_taps(model: TinyLM, seqs, taps: Sequence[TapPoint], pad_id: int = 1):
    """States for many sequences at several taps: ``{tap: [array [T_i, d]]}`` plus logits."""
    for t in taps:
        model.config.check_tap(t)
    tokens, kp = pad_batch(seqs, pad_id)
    record: dict = {}
    dec = tokens[:, :-1] if model.config.arch == "encoder_decoder" else None
    logits = model(tokens, kp, dec_tokens=dec, record=record)
    out = {t: [record[t][i, : len(s)].numpy().copy() for i, s in enumerate(seqs)] for t in taps}
    return out, logits


class ClientPart(nn.Module):
    """Device side: embeddings plus every computation up to the cut."""

    def __init__(self, model: TinyLM, tap: TapPoint):
        super().__init__()
        if tap.position == "embedding":
            raise TapError("cannot split before block 0 output")
        if tap.position == "ffn_out":
            raise TapError("ffn_out is not a residual-stream state; split at attention_out or block_out")
        model.config.check_tap(tap)
        self.config = model.config
        self.tap = tap
        k = tap.block_index
        self.tok_emb, self.pos_emb = model.tok_emb, model.pos_emb
        n_full = k + 1 if tap.position == "block_out" else k
        self.blocks = nn.ModuleList(model.blocks[:n_full])
        if tap.position == "attention_out":
            self.ln1, self.attn = model.blocks[k].ln1, model.blocks[k].attn

    def forward(self, tokens, key_padding=None):
        S = tokens.shape[1]
        h = self.tok_emb(tokens) + self.pos_emb(torch.arange(S))
        mask = stack_mask(self.config.arch == "decoder_only", S, key_padding)
        for blk in self.blocks:
            h = blk(h, mask)
        if self.tap.position == "attention_out":
            h = attend(self.ln1, self.attn, h, mask)
        return h


class ServerPart(nn.Module):
    """Cloud side: the rest of the stack and the task head."""

    def __init__(self, model: TinyLM, tap: TapPoint):
        super().__init__()
        if tap.position in ("embedding", "ffn_out"):
            raise TapError(f"cannot split at {tap.position}")
        model.config.check_tap(tap)
        self.config = model.config
        self.tap = tap
        k = tap.block_index
        if tap.position == "attention_out":
            self.ln2, self.ffn = model.blocks[k].ln2, model.blocks[k].ffn
        self.blocks = nn.ModuleList(model.blocks[k + 1 :])
        self.head = model.head

    def forward(self, states, key_padding=None, dec_tokens=None):
        mask = stack_mask(self.config.arch == "decoder_only", states.shape[1], key_padding)
        h = states
        if self.tap.position == "attention_out":
            h = h + feed(self.ln2, self.ffn, h)
        for blk in self.blocks:
            h = blk(h, mask)
        return self.head(h, key_padding, dec_tokens)

    def architecture(self) -> dict:
        """Structural metadata only (no parameter values)."""
        return {
            "config": self.config.to_dict(),
            "cut": str(self.tap),
            "modules": [n for n, _ in self.named_modules() if n],
            "shapes": {n: list(p.shape) for n, p in self.named_parameters()},
        }


def split(model: TinyLM, tap: TapPoint) -> tuple[ClientPart, ServerPart]:
    return ClientPart(model, tap), ServerPart(model, tap)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
