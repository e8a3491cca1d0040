"""Model stack tests: shape contracts, masking, determinism, and the
copy-task smoke training run."""

import numpy as np
import pytest

from slmf import numerics as nm
from slmf.model import (
    ModelConfig,
    ModelBundle,
    adapter_forward,
    build_bundle,
    clone_bundle,
    lm_forward,
    lm_generate,
    pooled_length,
    speech_encode,
)
from slmf.ctc import BlankFilterResult, blank_filter, CtcPosteriors
from slmf.numerics import Tensor
from slmf.pipeline import pretrain_lm
from slmf.speechsim import SynthParams, build_vocab, synth_utterance


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(proto_seed=0)


def small_config(vocab, **kw):
    defaults = dict(
        vocab=vocab, d_speech=32, d_model=32, n_speech_layers=2,
        n_adapter_layers=1, n_lm_enc_layers=1, n_lm_dec_layers=1,
        n_heads=2, downsample_factor=2, frame_dim=8,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


@pytest.fixture(scope="module")
def bundle(vocab):
    return build_bundle(small_config(vocab), seed=0)


def frames_for(vocab, text, seed=0, frame_dim=8):
    params = SynthParams(frame_dim=frame_dim, seed=seed)
    return synth_utterance(vocab.encode(text), vocab, params)


def test_config_validation(vocab):
    with pytest.raises(ValueError):
        small_config(vocab, d_speech=33)
    with pytest.raises(ValueError):
        small_config(vocab, downsample_factor=0)
    with pytest.raises(ValueError):
        small_config(vocab, n_adapter_layers=0)


def test_config_digest_roundtrip(vocab):
    cfg = small_config(vocab)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again.digest() == cfg.digest()


def test_speech_encode_shapes(vocab, bundle):
    frames = np.random.default_rng(0).normal(size=(8, 8)).astype(np.float32)
    enc, post = speech_encode(frames, bundle)
    assert enc.shape == (4, 32)  # T'=ceil(8/2)
    assert post.log_probs.shape == (4, len(vocab))


def test_speech_encode_ceil_boundary(vocab, bundle):
    frames = np.random.default_rng(1).normal(size=(7, 8)).astype(np.float32)
    enc, _ = speech_encode(frames, bundle)
    assert enc.shape[0] == 4  # ceil(7/2)
    assert pooled_length(7, 2) == 4


def test_speech_encode_rejects_empty(vocab, bundle):
    with pytest.raises(ValueError, match="non-empty"):
        speech_encode(np.zeros((0, 8), dtype=np.float32), bundle)


def test_posterior_rows_normalized(vocab, bundle):
    frames = np.random.default_rng(2).normal(size=(10, 8)).astype(np.float32)
    _, post = speech_encode(frames, bundle)
    rows = np.log(np.exp(post.log_probs.data).sum(axis=1))
    assert np.max(np.abs(rows)) < 1e-4


def test_adapter_empty_input(vocab, bundle):
    res = BlankFilterResult(
        kept_indices=np.zeros(0, dtype=np.int64),
        kept_encodings=Tensor(np.zeros((0, 32), dtype=np.float32)),
        compression_ratio=None,
    )
    out = adapter_forward(res, bundle)
    assert out.shape == (0, 32)


def test_adapter_output_width_is_lm_width(vocab):
    """Adapter output always matches the LM embedding width."""
    for d_model in (16, 32, 48):
        cfg = small_config(vocab, d_model=d_model, n_heads=2)
        b = build_bundle(cfg, seed=1)
        frames = np.random.default_rng(3).normal(size=(9, 8)).astype(np.float32)
        enc, post = speech_encode(frames, b)
        out = adapter_forward(blank_filter(enc, post), b)
        assert out.shape[1] == d_model
        assert out.shape[1] == b.groups["lm_embedding"].tensors["tok"].shape[1]


def test_lm_forward_requires_bos(vocab, bundle):
    emb = Tensor(np.zeros((3, 32), dtype=np.float32))
    with pytest.raises(ValueError, match="BOS"):
        lm_forward(emb, [5, 6], bundle)


def test_lm_forward_single_token_target(vocab, bundle):
    emb = Tensor(np.random.default_rng(4).normal(size=(3, 32)).astype(np.float32))
    logits = lm_forward(emb, [vocab.bos_id], bundle)
    assert logits.shape == (1, len(vocab))


def test_lm_forward_length_cap(vocab):
    cfg = small_config(vocab, max_len=8)
    b = build_bundle(cfg, seed=0)
    emb = Tensor(np.zeros((3, 32), dtype=np.float32))
    with pytest.raises(ValueError, match="max_len"):
        lm_forward(emb, [vocab.bos_id] + [5] * 20, b)


def test_decoder_causality(vocab, bundle):
    """Changing target position j leaves logits at positions < j unchanged."""
    rng = np.random.default_rng(5)
    emb = Tensor(rng.normal(size=(4, 32)).astype(np.float32))
    target = np.array([vocab.bos_id, 20, 21, 22, 23])
    base = lm_forward(emb, target, bundle).data.copy()
    for j in range(1, len(target)):
        mutated = target.copy()
        mutated[j] = 30
        out = lm_forward(emb, mutated, bundle).data
        assert np.allclose(out[:j], base[:j], atol=1e-5), f"position {j} leaked backwards"
        assert not np.allclose(out[j:], base[j:], atol=1e-7)


def test_forward_finite_on_random_inputs(vocab, bundle):
    rng = np.random.default_rng(6)
    frames = rng.normal(scale=3.0, size=(12, 8)).astype(np.float32)
    enc, post = speech_encode(frames, bundle)
    assert np.isfinite(enc.data).all()
    assert np.isfinite(post.log_probs.data).all()
    out = adapter_forward(blank_filter(enc, post), bundle)
    assert np.isfinite(out.data).all()


def test_generate_deterministic(vocab, bundle):
    emb = Tensor(np.random.default_rng(7).normal(size=(5, 32)).astype(np.float32))
    a = lm_generate(emb, bundle, max_len=10)
    b = lm_generate(emb, bundle, max_len=10)
    assert a == b


def test_generate_never_emits_pad_or_bos(vocab):
    # bias the output head towards PAD/BOS to stress the exclusion rule
    cfg = small_config(vocab)
    b = build_bundle(cfg, seed=3)
    rng = np.random.default_rng(8)
    for trial in range(5):
        emb = Tensor(rng.normal(size=(4, 32)).astype(np.float32))
        out = lm_generate(emb, b, max_len=12)
        assert vocab.pad_id not in out
        assert vocab.bos_id not in out
        assert vocab.eos_id not in out  # EOS terminates, never appears


def test_generate_max_len_respected(vocab, bundle):
    emb = Tensor(np.random.default_rng(9).normal(size=(4, 32)).astype(np.float32))
    assert len(lm_generate(emb, bundle, max_len=3)) <= 3
    with pytest.raises(ValueError):
        lm_generate(emb, bundle, max_len=0)


def test_clone_bundle_independent(vocab, bundle):
    c = clone_bundle(bundle)
    t0 = bundle.groups["adapter"].tensors["in_w"]
    t1 = c.groups["adapter"].tensors["in_w"]
    assert np.array_equal(t0.data, t1.data)
    t1.data[0, 0] += 1.0
    assert not np.array_equal(t0.data, t1.data)
    assert bundle.weights_digest() != c.weights_digest()


def test_shape_contracts_over_random_configs(vocab):
    """T' = ceil(T/factor), adapter width == d_model, posteriors normalized,
    across >= 50 random config/input draws."""
    rng = np.random.default_rng(42)
    for trial in range(50):
        heads = int(rng.choice([1, 2, 4]))
        d_speech = heads * int(rng.integers(4, 13))
        d_model = heads * int(rng.integers(4, 13))
        factor = int(rng.integers(1, 4))
        cfg = ModelConfig(
            vocab=vocab,
            d_speech=d_speech,
            d_model=d_model,
            n_speech_layers=int(rng.integers(1, 4)),
            n_adapter_layers=int(rng.integers(1, 3)),
            n_lm_enc_layers=1,
            n_lm_dec_layers=1,
            n_heads=heads,
            downsample_factor=factor,
            frame_dim=int(rng.integers(4, 12)),
        )
        b = build_bundle(cfg, seed=trial)
        t = int(rng.integers(1, 14))
        frames = rng.normal(size=(t, cfg.frame_dim)).astype(np.float32)
        enc, post = speech_encode(frames, b)
        assert enc.shape == (pooled_length(t, factor), d_speech)
        assert post.log_probs.shape[0] == enc.shape[0]
        rows = np.log(np.exp(post.log_probs.data).sum(axis=1))
        assert np.max(np.abs(rows)) < 1e-4
        out = adapter_forward(blank_filter(enc, post), b)
        assert out.shape[1] == d_model


@pytest.mark.slow
def test_copy_task_smoke_training(vocab):
    """LM pretraining drives the copy loss below ln|vocab| quickly, and a
    trained model reproduces held-out sequences."""
    cfg = small_config(vocab, d_model=48, d_speech=48, n_lm_enc_layers=2, n_lm_dec_layers=2)
    b = build_bundle(cfg, seed=0)
    log = pretrain_lm(b, steps=200, batch_size=16, lr=2e-3, seed=0, noise_sigma=0.1)
    assert log[-1]["loss"] < np.log(len(vocab))

    # held-out generation: >=95% exact copies
    from slmf.speechsim import ASR_TAG

    emb = b.groups["lm_embedding"].tensors["tok"]
    asr_id = vocab.index[ASR_TAG]
    hist_id = vocab.index["[HIST]"]
    rng = np.random.default_rng(99)
    from slmf.pipeline import content_token_ids

    content = np.array(content_token_ids(vocab))
    hits = 0
    n = 40
    for _ in range(n):
        ids = [int(t) for t in content[rng.integers(0, len(content), size=int(rng.integers(2, 8)))]]
        inp = nm.take_rows(emb, np.asarray(ids + [hist_id]))
        out = lm_generate(inp, b, max_len=16)
        hits += out == [asr_id] + ids
    assert hits / n >= 0.95
