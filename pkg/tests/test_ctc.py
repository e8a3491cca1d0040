"""CTC tests: exhaustive alignment enumeration oracle, gradient checks,
greedy decoding, blank filtering, compression stats."""

import itertools

import numpy as np
import pytest

from slmf import numerics as nm
from slmf.ctc import (
    BlankFilterResult,
    CtcPosteriors,
    blank_filter,
    collapse_path,
    compression_stats,
    ctc_greedy_decode,
    ctc_loss,
    min_frames_required,
)
from slmf.numerics import Tensor


def normalize_rows(logits):
    x = logits - logits.max(axis=1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def random_posteriors(rng, t, width, blank=None, dtype=np.float64):
    lp = normalize_rows(rng.normal(size=(t, width)))
    blank = width - 1 if blank is None else blank
    return CtcPosteriors(Tensor(lp, requires_grad=True, dtype=dtype), blank)


def reference_collapse(path, blank):
    out, prev = [], None
    for p in path:
        if p != blank and p != prev:
            out.append(int(p))
        prev = p
    return out


def enumerate_ctc_loss(log_probs, blank, target):
    """Sum path probabilities over all (V+1)^T paths collapsing to target."""
    t_len, width = log_probs.shape
    probs = np.exp(log_probs)
    target = list(target)
    total = 0.0
    for path in itertools.product(range(width), repeat=t_len):
        if reference_collapse(path, blank) == target:
            p = 1.0
            for t, s in enumerate(path):
                p *= probs[t, s]
            total += p
    return -np.log(total) if total > 0 else np.inf


def test_single_frame_uniform_is_ln2():
    lp = np.log(np.full((1, 2), 0.5))
    post = CtcPosteriors(Tensor(lp), blank_id=1)
    assert abs(float(ctc_loss(post, [0]).data) - np.log(2)) < 1e-6


def test_repeat_needs_separating_blank():
    rng = np.random.default_rng(0)
    post = random_posteriors(rng, t=2, width=3)
    assert np.isinf(float(ctc_loss(post, [0, 0]).data))
    assert min_frames_required([0, 0]) == 3


def test_empty_target_all_blank_probability():
    rng = np.random.default_rng(1)
    post = random_posteriors(rng, t=4, width=3)
    want = -post.log_probs.data[:, 2].sum()
    assert abs(float(ctc_loss(post, []).data) - want) < 1e-6


def test_blank_in_target_rejected():
    rng = np.random.default_rng(2)
    post = random_posteriors(rng, t=3, width=3)
    with pytest.raises(ValueError, match="blank"):
        ctc_loss(post, [2])


def test_exhaustive_oracle_small_case():
    rng = np.random.default_rng(3)
    post = random_posteriors(rng, t=3, width=3)  # V=2 + blank
    target = [0, 1]
    got = float(ctc_loss(post, target).data)
    want = enumerate_ctc_loss(post.log_probs.data, 2, target)
    assert abs(got - want) < 1e-6


@pytest.mark.parametrize("seed", range(12))
def test_exhaustive_oracle_sweep(seed):
    """Loss == path enumeration over a grid of (T, V, |target|)."""
    rng = np.random.default_rng(1000 + seed)
    for t_len in range(1, 7):
        for v in range(1, 4):
            width = v + 1
            post = random_posteriors(rng, t_len, width)
            max_target = min(3, t_len)
            tgt_len = int(rng.integers(0, max_target + 1))
            target = list(rng.integers(0, v, size=tgt_len))
            got = float(ctc_loss(post, target).data)
            want = enumerate_ctc_loss(post.log_probs.data, v, target)
            if np.isinf(want):
                assert np.isinf(got)
            else:
                assert abs(got - want) < 1e-6, (t_len, v, target)


@pytest.mark.parametrize("seed", range(6))
def test_ctc_gradient_finite_differences(seed):
    rng = np.random.default_rng(2000 + seed)
    t_len, v = int(rng.integers(3, 6)), 3
    post = random_posteriors(rng, t_len, v + 1)
    target = list(rng.integers(0, v, size=2))
    if t_len < min_frames_required(target):
        target = target[:1]
    loss = ctc_loss(post, target)
    nm.backward(loss)
    grad = post.log_probs.grad.copy()

    lp = post.log_probs.data
    h = 1e-4
    fd = np.zeros_like(lp)
    for i in range(lp.shape[0]):
        for j in range(lp.shape[1]):
            bumped = lp.copy()
            bumped[i, j] += h
            up = float(ctc_loss(CtcPosteriors(Tensor(bumped, dtype=np.float64), v), target).data)
            bumped[i, j] -= 2 * h
            dn = float(ctc_loss(CtcPosteriors(Tensor(bumped, dtype=np.float64), v), target).data)
            fd[i, j] = (up - dn) / (2 * h)
    denom = max(np.max(np.abs(grad)), np.max(np.abs(fd)), 1e-8)
    assert np.max(np.abs(grad - fd)) / denom <= 1e-3


def _posteriors_for_path(path, width, blank):
    logits = np.zeros((len(path), width))
    logits[np.arange(len(path)), path] = 6.0
    return CtcPosteriors(Tensor(normalize_rows(logits)), blank)


def test_greedy_decode_collapse_and_drop_blank():
    post = _posteriors_for_path([0, 0, 2, 1], width=3, blank=2)
    assert ctc_greedy_decode(post) == [0, 1]


def test_greedy_decode_all_blank_empty():
    post = _posteriors_for_path([2, 2, 2], width=3, blank=2)
    assert ctc_greedy_decode(post) == []


def test_greedy_decode_blank_separates_repeats():
    post = _posteriors_for_path([0, 2, 0], width=3, blank=2)
    assert ctc_greedy_decode(post) == [0, 0]


@pytest.mark.parametrize("seed", range(10))
def test_greedy_decode_matches_reference_collapse(seed):
    rng = np.random.default_rng(3000 + seed)
    post = random_posteriors(rng, t=int(rng.integers(1, 15)), width=5)
    path = np.argmax(post.log_probs.data, axis=1)
    assert ctc_greedy_decode(post) == reference_collapse(path, 4)
    assert collapse_path(path, 4) == reference_collapse(path, 4)


def test_blank_filter_all_blank():
    post = _posteriors_for_path([2, 2], width=3, blank=2)
    enc = Tensor(np.arange(8, dtype=np.float32).reshape(2, 4))
    res = blank_filter(enc, post)
    assert res.kept_indices.size == 0
    assert res.kept_encodings.shape == (0, 4)
    assert res.compression_ratio is None


def test_blank_filter_no_blank_is_identity():
    post = _posteriors_for_path([0, 1, 0], width=3, blank=2)
    enc = Tensor(np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32))
    res = blank_filter(enc, post)
    assert list(res.kept_indices) == [0, 1, 2]
    assert np.array_equal(res.kept_encodings.data, enc.data)
    assert res.compression_ratio == 1.0


def test_blank_filter_pattern():
    post = _posteriors_for_path([2, 0, 2, 1], width=3, blank=2)
    enc = Tensor(np.random.default_rng(1).normal(size=(4, 3)).astype(np.float32))
    res = blank_filter(enc, post)
    assert list(res.kept_indices) == [1, 3]
    assert res.compression_ratio == 2.0


def test_blank_filter_length_mismatch():
    post = _posteriors_for_path([0, 1], width=3, blank=2)
    with pytest.raises(ValueError, match="rows"):
        blank_filter(Tensor(np.zeros((3, 4))), post)


@pytest.mark.parametrize("seed", range(8))
def test_blank_filter_rows_are_subsequence(seed):
    rng = np.random.default_rng(4000 + seed)
    t = int(rng.integers(1, 12))
    post = random_posteriors(rng, t, width=4)
    enc = Tensor(rng.normal(size=(t, 5)).astype(np.float32))
    res = blank_filter(enc, post)
    assert np.all(np.diff(res.kept_indices) > 0)
    for row, idx in zip(res.kept_encodings.data, res.kept_indices):
        assert np.array_equal(row, enc.data[idx])


def test_blank_filter_gradient_flows_to_kept_rows():
    post = _posteriors_for_path([2, 0, 1], width=3, blank=2)
    enc = Tensor(np.ones((3, 2), dtype=np.float32), requires_grad=True)
    res = blank_filter(enc, post)
    nm.backward(nm.sum_(res.kept_encodings))
    assert np.array_equal(enc.grad, [[0, 0], [1, 1], [1, 1]])


def _identity_encoder(width, blank, argmax_rows):
    """Stub encoder: fixed posterior argmax pattern, encodings == frames."""

    def encode(frames):
        t = frames.shape[0]
        path = [argmax_rows[i % len(argmax_rows)] for i in range(t)]
        return Tensor(frames), _posteriors_for_path(path, width, blank)

    return encode


def test_compression_stats_no_filtering_matches_raw_ratio():
    rng = np.random.default_rng(5)
    items = [(rng.normal(size=(8, 4)).astype(np.float32), 4), (rng.normal(size=(6, 4)).astype(np.float32), 3)]
    stats = compression_stats(items, _identity_encoder(3, 2, [0, 1]))
    assert stats["mean_ratio"] == 1.0
    assert stats["frames_per_symbol"] == 2.0  # 8/4 and 6/3
    assert stats["n_zero_kept"] == 0


def test_compression_stats_empty_corpus_errors():
    with pytest.raises(ValueError, match="empty"):
        compression_stats([], _identity_encoder(3, 2, [0]))
