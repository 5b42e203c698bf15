"""Binning estimators of mutual information and the information plane.

All quantities are in bits.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tinylm import TapPoint, TinyLM, batch_taps


class MIError(ValueError):
    pass


@dataclass(frozen=True)
class BinningConfig:
    """``range_mode``: "global_minmax" | "per_dim_minmax" | "fixed".

    ``dim_reduction``: "none" (exact joint symbols), "per_dim_then_joint_hash"
    (64-bit hash of the bin tuple) or "random_projection" (project to
    ``projection_k`` dims first, then hash).  ``"auto"`` picks
    random_projection when the input has more than 16 dimensions.
    """

    n_bins: int = 30
    range_mode: str = "global_minmax"
    fixed_range: tuple[float, float] = (-1.0, 1.0)
    dim_reduction: str = "auto"
    projection_k: int = 10
    projection_seed: int = 0

    def __post_init__(self):
        if self.n_bins < 2:
            raise MIError("n_bins must be >= 2")
        if self.range_mode not in ("global_minmax", "per_dim_minmax", "fixed"):
            raise MIError(f"unknown range_mode {self.range_mode!r}")
        if self.dim_reduction not in ("auto", "none", "per_dim_then_joint_hash", "random_projection"):
            raise MIError(f"unknown dim_reduction {self.dim_reduction!r}")
        if self.range_mode == "fixed" and not self.fixed_range[0] < self.fixed_range[1]:
            raise MIError("fixed range needs a < b")


def _codes(samples: Sequence) -> np.ndarray:
    arr = np.asarray(samples)
    if arr.ndim > 1:
        arr = np.ascontiguousarray(arr).view(np.dtype((np.void, arr.dtype.itemsize * arr.shape[1]))).ravel()
    return np.unique(arr, return_inverse=True)[1].ravel()


def entropy(samples: Sequence) -> float:
    """Plug-in entropy of a sample of discrete symbols."""
    counts = np.bincount(_codes(samples)).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def mutual_information(samples_a: Sequence, samples_b: Sequence) -> float:
    """Plug-in estimate of I(A;B) from paired discrete samples.

    Symbols may be any hashable numpy-compatible values; 2-D arrays are read
    row-wise, one symbol per row.
    """
    a, b = _codes(samples_a), _codes(samples_b)
    if len(a) != len(b):
        raise MIError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise MIError("need at least one sample")
    n = len(a)
    na, nb = a.max() + 1, b.max() + 1
    joint = np.bincount(a * nb + b, minlength=na * nb).astype(np.float64)
    ca = np.bincount(a, minlength=na).astype(np.float64)
    cb = np.bincount(b, minlength=nb).astype(np.float64)
    nz = np.nonzero(joint)[0]
    c_ab = joint[nz]
    c_a, c_b = ca[nz // nb], cb[nz % nb]
    mi = float(np.sum(c_ab / n * np.log2(c_ab * n / (c_a * c_b))))
    return max(mi, 0.0)


def mi_from_joint(p: np.ndarray) -> float:
    """I(A;B) of an explicit joint probability table."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise MIError("joint table must be a probability distribution")
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(p[mask] / (pa @ pb)[mask])))


def _bin_edges(x: np.ndarray, config: BinningConfig) -> tuple[np.ndarray, np.ndarray]:
    if config.range_mode == "global_minmax":
        lo = np.full(x.shape[1], x.min())
        hi = np.full(x.shape[1], x.max())
    elif config.range_mode == "per_dim_minmax":
        lo, hi = x.min(axis=0), x.max(axis=0)
    else:
        lo = np.full(x.shape[1], config.fixed_range[0], dtype=np.float64)
        hi = np.full(x.shape[1], config.fixed_range[1], dtype=np.float64)
    return lo, hi


def bin_indices(x: np.ndarray, config: BinningConfig) -> np.ndarray:
    """Per-dimension bin index in ``[0, n_bins)``.

    Bins are right-closed, ``(e_{k-1}, e_k]``, so a value sitting exactly on
    an interior edge belongs to the lower bin; the first bin also takes its
    left edge.  Zero-width dimensions map to bin 0.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = _bin_edges(x, config)
    out = np.zeros(x.shape, dtype=np.int64)
    frac = np.linspace(0.0, 1.0, config.n_bins + 1)[1:-1]
    for j in range(x.shape[1]):
        if hi[j] <= lo[j]:
            continue
        inner = lo[j] + frac * (hi[j] - lo[j])
        out[:, j] = np.searchsorted(inner, x[:, j], side="left")
    return out


def _hash_rows(idx: np.ndarray) -> np.ndarray:
    out = np.empty(len(idx), dtype=np.uint64)
    for i, row in enumerate(idx):
        out[i] = int.from_bytes(hashlib.blake2b(row.astype("<i8").tobytes(), digest_size=8).digest(), "little")
    return out


@dataclass
class Discretized:
    symbols: np.ndarray
    n_distinct_tuples: int
    collisions: int


def discretize_detailed(rows: np.ndarray, config: BinningConfig) -> Discretized:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise MIError("discretize expects a [n, d] matrix")
    if not np.isfinite(rows).all():
        raise MIError("cannot discretize non-finite values")
    mode = config.dim_reduction
    if mode == "auto":
        mode = "random_projection" if rows.shape[1] > 16 else "none"
    if mode == "random_projection":
        rng = np.random.default_rng(config.projection_seed)
        proj = rng.standard_normal((rows.shape[1], config.projection_k)) / np.sqrt(rows.shape[1])
        rows = rows @ proj
    idx = bin_indices(rows, config)
    exact = _codes(idx)
    n_tuples = int(exact.max()) + 1 if len(exact) else 0
    if mode == "none":
        return Discretized(exact.astype(np.int64), n_tuples, 0)
    hashed = _hash_rows(idx)
    n_hashed = len(np.unique(hashed))
    return Discretized(hashed, n_tuples, n_tuples - n_hashed)


def discretize(rows: np.ndarray, config: BinningConfig) -> np.ndarray:
    """One discrete symbol per row."""
    d = discretize_detailed(rows, config)
    if d.collisions:
        warnings.warn(f"{d.collisions} hash collisions while discretizing", RuntimeWarning)
    return d.symbols


@dataclass
class MIEstimate:
    tap: TapPoint
    i_xh: float
    i_hy: float
    n_samples: int
    binning: BinningConfig
    h_x: float = float("nan")
    h_h: float = float("nan")
    h_y: float = float("nan")
    undersampled: bool = False
    hash_collisions: int = 0
    notes: list[str] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "block_index": self.tap.block_index,
            "position": self.tap.position,
            "i_xh_bits": self.i_xh,
            "i_hy_bits": self.i_hy,
            "n_samples": self.n_samples,
            "undersampled_flag": int(self.undersampled),
        }


def estimate(tap: TapPoint, x, h_rows: np.ndarray, y, config: BinningConfig) -> MIEstimate:
    disc = discretize_detailed(h_rows, config)
    h = disc.symbols
    est = MIEstimate(
        tap=tap,
        i_xh=mutual_information(x, h),
        i_hy=mutual_information(h, y),
        n_samples=len(h),
        binning=config,
        h_x=entropy(x),
        h_h=entropy(h),
        h_y=entropy(y),
        hash_collisions=disc.collisions,
    )
    mode = config.dim_reduction
    if mode == "auto":
        mode = "random_projection" if h_rows.shape[1] > 16 else "none"
    active = config.projection_k if mode == "random_projection" else h_rows.shape[1]
    if len(h) < 10 * config.n_bins * active:
        est.undersampled = True
        est.notes.append(f"{len(h)} samples < 10 * n_bins * {active} active dims")
    return est


def probe_rows(
    victim: TinyLM, seqs: Sequence[Sequence[int]], taps: Sequence[TapPoint], probe_len: int, pad_id: int = 1
):
    """States and predictions at the last position of each length-``probe_len`` prefix.

    Returns ``({tap: [n, d] array}, y)`` with ``y`` the argmax next-token id.
    """
    prefixes = [list(s)[: min(probe_len, len(s))] for s in seqs]
    rows = {t: [] for t in taps}
    ys = []
    for i in range(0, len(prefixes), 512):
        chunk = prefixes[i : i + 512]
        states, logits = batch_taps(victim, chunk, taps, pad_id)
        last = [len(p) - 1 for p in chunk]
        for t in taps:
            rows[t].extend(s[j] for s, j in zip(states[t], last))
        if victim.config.arch == "encoder_mlp":
            ys.extend(logits.argmax(-1).tolist())
        else:
            pos = [min(j, logits.shape[1] - 1) for j in last]
            ys.extend(int(logits[b, p].argmax()) for b, p in enumerate(pos))
    return {t: np.stack(v) for t, v in rows.items()}, np.asarray(ys)


def information_plane(
    victim: TinyLM,
    records: Sequence,
    taps: Sequence[TapPoint],
    config: BinningConfig,
    labels: Sequence | None = None,
    probe_len: int = 4,
    pad_id: int = 1,
) -> list[MIEstimate]:
    """(I(X;H), I(H;Y)) for each tap.

    X is the record id (or ``labels`` when given), H the tap state at the
    final position of a ``probe_len``-token prefix, Y the victim's argmax
    prediction there.
    """
    x = np.asarray(labels) if labels is not None else np.asarray([r.id for r in records])
    rows, y = probe_rows(victim, [r.tokens for r in records], taps, probe_len, pad_id)
    return [estimate(t, x, rows[t], y, config) for t in taps]


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def monotone_report(estimates: Sequence[MIEstimate]) -> dict:
    """Does I(X;H) fall monotonically along the given (ordered) taps?"""
    ixh = [e.i_xh for e in estimates]
    rises = [str(estimates[i + 1].tap) for i in range(len(ixh) - 1) if ixh[i + 1] > ixh[i] + 1e-12]
    return {"monotone_non_increasing": not rises, "rises_at": rises}


PLOT_FIELDS = ["block_index", "position", "i_xh_bits", "i_hy_bits", "n_samples", "undersampled_flag"]


def write_plot_data(estimates: Sequence[MIEstimate], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PLOT_FIELDS)
        w.writeheader()
        for e in estimates:
            w.writerow(e.row())
