"""CTC loss (log-space forward-backward), greedy decoding, and blank-frame
filtering.

Blank filtering keeps exactly the frames whose argmax token is not blank;
it is the compression step that brings speech encodings down to roughly
text length before they enter the adapter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, _make, take_rows

NEG_INF = -np.inf


@dataclass
class CtcPosteriors:
    """Per-frame log-probabilities over V symbols plus blank (index V)."""

    log_probs: Tensor  # [T, V+1]
    blank_id: int

    def __post_init__(self):
        lp = self.log_probs.data
        if lp.ndim != 2:
            raise ValueError(f"log_probs must be [T, V+1], got shape {lp.shape}")
        if not 0 <= self.blank_id < lp.shape[1]:
            raise ValueError(f"blank_id {self.blank_id} outside width {lp.shape[1]}")
        if lp.shape[0]:
            rows = _logsumexp(lp, axis=1)
            if np.max(np.abs(rows)) > 1e-4:
                raise ValueError("log_probs rows must log-sum-exp to 0 within 1e-4")

    @property
    def n_frames(self) -> int:
        return self.log_probs.data.shape[0]


@dataclass
class BlankFilterResult:
    kept_indices: np.ndarray           # strictly increasing frame indices
    kept_encodings: Tensor             # [K, d]
    compression_ratio: float | None    # T/K, None when K == 0


def _logsumexp(x, axis=None):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else float(out)


def min_frames_required(target) -> int:
    """Shortest frame count that can emit `target`: repeats need a blank."""
    target = list(target)
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def ctc_loss(posteriors: CtcPosteriors, target) -> Tensor:
    """-log P(target | posteriors) marginalized over the alignment lattice.

    Infeasible targets (too few frames) yield +inf rather than raising, so
    batch averaging can skip them. Differentiable w.r.t. log_probs.
    """
    target = [int(t) for t in target]
    blank = posteriors.blank_id
    if any(t == blank for t in target):
        raise ValueError("CTC target must not contain the blank id")
    lp_t = posteriors.log_probs
    width = lp_t.data.shape[1]
    if any(not 0 <= t < width for t in target):
        raise ValueError(f"CTC target id outside posterior width {width}")
    T = posteriors.n_frames
    if T < min_frames_required(target):
        return Tensor(np.asarray(np.inf, dtype=lp_t.data.dtype))
    if T == 0:
        return Tensor(np.asarray(0.0, dtype=lp_t.data.dtype))

    lp = lp_t.data.astype(np.float64)
    ext = np.empty(2 * len(target) + 1, dtype=np.int64)
    ext[0::2] = blank
    ext[1::2] = target
    S = ext.size
    # skip transition s-2 -> s allowed only onto a label differing from l'[s-2]
    allow_skip = np.zeros(S, dtype=bool)
    if S > 2:
        allow_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, blank]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = np.logaddexp(prev, np.concatenate(([NEG_INF], prev[:-1])))
        if S > 2:
            skip = np.where(allow_skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2])), NEG_INF)
            acc = np.logaddexp(acc, skip)
        alpha[t] = acc + lp[t, ext]

    tail = alpha[T - 1, S - 1]
    if S > 1:
        tail = np.logaddexp(tail, alpha[T - 1, S - 2])
    log_p = tail
    if not np.isfinite(log_p):
        return Tensor(np.asarray(np.inf, dtype=lp_t.data.dtype))
    loss_val = np.asarray(-log_p, dtype=lp_t.data.dtype)

    # beta excludes the emission at t, so alpha+beta is the exact occupancy.
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        acc = np.logaddexp(nxt, np.concatenate((nxt[1:], [NEG_INF])))
        if S > 2:
            allow_fwd = np.concatenate((allow_skip[2:], [False, False]))
            skip = np.where(allow_fwd, np.concatenate((nxt[2:], [NEG_INF, NEG_INF])), NEG_INF)
            acc = np.logaddexp(acc, skip)
        beta[t] = acc

    gamma = np.exp(alpha + beta - log_p)  # [T, S] occupancy

    def backward(g):
        if lp_t.requires_grad:
            grad = np.zeros_like(lp)
            tt = np.broadcast_to(np.arange(T)[:, None], (T, S))
            ll = np.broadcast_to(ext[None, :], (T, S))
            np.add.at(grad, (tt, ll), -gamma)
            lp_t._accumulate((np.asarray(g) * grad).astype(lp_t.data.dtype))

    return _make(loss_val, (lp_t,), backward)


def ctc_greedy_decode(posteriors: CtcPosteriors) -> list[int]:
    """Best-path decode: per-frame argmax, collapse repeats, drop blanks."""
    if posteriors.n_frames == 0:
        return []
    path = np.argmax(posteriors.log_probs.data, axis=1)
    return collapse_path(path, posteriors.blank_id)


def collapse_path(path, blank_id: int) -> list[int]:
    out: list[int] = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank_id:
            out.append(p)
        prev = p
    return out


def blank_filter(encodings: Tensor, posteriors: CtcPosteriors) -> BlankFilterResult:
    """Keep frames whose argmax token is not blank, preserving order."""
    T = encodings.data.shape[0]
    if T != posteriors.n_frames:
        raise ValueError(
            f"encodings rows ({T}) != posterior rows ({posteriors.n_frames})"
        )
    if T == 0:
        kept = np.zeros(0, dtype=np.int64)
    else:
        path = np.argmax(posteriors.log_probs.data, axis=1)
        kept = np.nonzero(path != posteriors.blank_id)[0]
    return BlankFilterResult(
        kept_indices=kept,
        kept_encodings=take_rows(encodings, kept),
        compression_ratio=(T / kept.size) if kept.size else None,
    )


def compression_stats(items, encode_fn) -> dict[str, float]:
    """Corpus-level compression report.

    items: iterable of (frames [T, frame_dim], n_reference_symbols).
    encode_fn: frames -> (encodings Tensor, CtcPosteriors).
    mean_ratio averages input-frames / kept-frames per utterance (end to
    end, i.e. including the encoder's down-sampling); frames_per_symbol
    averages kept-frames / reference symbols.
    """
    ratios, fps, skipped = [], [], 0
    n = 0
    for frames, n_symbols in items:
        n += 1
        enc, post = encode_fn(frames)
        res = blank_filter(enc, post)
        k = res.kept_indices.size
        if k == 0:
            skipped += 1
            continue
        ratios.append(frames.shape[0] / k)
        if n_symbols > 0:
            fps.append(k / n_symbols)
    if n == 0:
        raise ValueError("compression_stats: empty corpus")
    return {
        "mean_ratio": float(np.mean(ratios)) if ratios else float("nan"),
        "frames_per_symbol": float(np.mean(fps)) if fps else float("nan"),
        "n_utterances": n,
        "n_zero_kept": skipped,
    }
