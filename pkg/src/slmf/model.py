"""The three neural stacks: speech encoder with CTC head and internal
down-sampling, the speech-to-text adapter, and a small text encoder-decoder
LM whose decoder ties its output projection to the token embedding.

All forward paths accept batched [B, L, d] tensors with length masks;
the single-example entry points wrap them with B=1.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from .checkpoint import config_digest, serialize_group
from .ctc import BlankFilterResult, CtcPosteriors
from .numerics import ParamGroup, Tensor
from .speechsim import Vocab

MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    vocab: Vocab
    d_speech: int = 128
    d_model: int = 128
    n_speech_layers: int = 4
    n_adapter_layers: int = 2
    n_lm_enc_layers: int = 3
    n_lm_dec_layers: int = 3
    n_heads: int = 4
    downsample_factor: int = 2
    frame_dim: int = 16
    max_frames: int = 512
    max_len: int = 256

    def __post_init__(self):
        if self.d_speech % self.n_heads or self.d_model % self.n_heads:
            raise ValueError("d_speech and d_model must be divisible by n_heads")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.n_adapter_layers < 1:
            raise ValueError("n_adapter_layers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = self.vocab.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab"] = Vocab.from_dict(d["vocab"])
        return cls(**d)

    def digest(self) -> str:
        return config_digest(self.to_dict())


@dataclass
class ModelBundle:
    config: ModelConfig
    groups: dict[str, ParamGroup] = field(default_factory=dict)

    def group_list(self) -> list[ParamGroup]:
        return [self.groups[n] for n in sorted(self.groups)]

    def weights_digest(self) -> str:
        h = hashlib.sha256(self.config.digest().encode())
        for g in self.group_list():
            h.update(serialize_group(g))
        return h.hexdigest()


def _add_block(group: ParamGroup, rng, prefix: str, d: int, cross: bool = False) -> None:
    def p(name, shape, fan_in=None):
        group.add(prefix + name, nm.init_param(rng, shape, fan_in))

    def ln(name):
        group.add(prefix + name + "_g", Tensor(np.ones(d, dtype=np.float32), requires_grad=True))
        group.add(prefix + name + "_b", Tensor(np.zeros(d, dtype=np.float32), requires_grad=True))

    ln("ln1")
    for w in ("wq", "wk", "wv", "wo"):
        p("attn_" + w, (d, d))
    if cross:
        ln("lnx")
        for w in ("wq", "wk", "wv", "wo"):
            p("xattn_" + w, (d, d))
    ln("ln2")
    p("ffn_w1", (d, 4 * d))
    group.add(prefix + "ffn_b1", Tensor(np.zeros(4 * d, dtype=np.float32), requires_grad=True))
    p("ffn_w2", (4 * d, d))
    group.add(prefix + "ffn_b2", Tensor(np.zeros(d, dtype=np.float32), requires_grad=True))


def _add_final_ln(group: ParamGroup, d: int, name: str = "final_ln") -> None:
    group.add(name + "_g", Tensor(np.ones(d, dtype=np.float32), requires_grad=True))
    group.add(name + "_b", Tensor(np.zeros(d, dtype=np.float32), requires_grad=True))


def clone_bundle(bundle: ModelBundle) -> ModelBundle:
    """Copy weights and freeze flags; optimizer state starts fresh."""
    new = build_bundle(bundle.config, seed=0)
    for name, g in bundle.groups.items():
        for p, t in g.tensors.items():
            new.groups[name].tensors[p].data = t.data.copy()
        new.groups[name].set_frozen(g.frozen)
    return new


def build_bundle(config: ModelConfig, seed: int) -> ModelBundle:
    """Fresh bundle; every learned tensor belongs to exactly one group."""
    v = len(config.vocab)
    groups: dict[str, ParamGroup] = {}

    rng = np.random.default_rng((seed, 1))
    g = groups["speech_encoder"] = ParamGroup("speech_encoder")
    g.add("in_w", nm.init_param(rng, (config.frame_dim, config.d_speech)))
    g.add("in_b", Tensor(np.zeros(config.d_speech, dtype=np.float32), requires_grad=True))
    g.add("pos", nm.init_param(rng, (config.max_frames, config.d_speech), fan_in=config.d_speech))
    for i in range(config.n_speech_layers):
        _add_block(g, rng, f"layer{i}.", config.d_speech)
    _add_final_ln(g, config.d_speech)
    g.add("ctc_w", nm.init_param(rng, (config.d_speech, v)))
    g.add("ctc_b", Tensor(np.zeros(v, dtype=np.float32), requires_grad=True))

    rng = np.random.default_rng((seed, 2))
    g = groups["adapter"] = ParamGroup("adapter")
    g.add("in_w", nm.init_param(rng, (config.d_speech, config.d_model)))
    g.add("in_b", Tensor(np.zeros(config.d_model, dtype=np.float32), requires_grad=True))
    g.add("pos", nm.init_param(rng, (config.max_frames, config.d_model), fan_in=config.d_model))
    for i in range(config.n_adapter_layers):
        _add_block(g, rng, f"layer{i}.", config.d_model)
    _add_final_ln(g, config.d_model)

    rng = np.random.default_rng((seed, 3))
    g = groups["lm_embedding"] = ParamGroup("lm_embedding")
    g.add("tok", nm.init_param(rng, (v, config.d_model), fan_in=config.d_model))

    rng = np.random.default_rng((seed, 4))
    g = groups["lm_encoder"] = ParamGroup("lm_encoder")
    g.add("pos", nm.init_param(rng, (config.max_len, config.d_model), fan_in=config.d_model))
    for i in range(config.n_lm_enc_layers):
        _add_block(g, rng, f"layer{i}.", config.d_model)
    _add_final_ln(g, config.d_model)

    rng = np.random.default_rng((seed, 5))
    g = groups["lm_decoder"] = ParamGroup("lm_decoder")
    g.add("pos", nm.init_param(rng, (config.max_len, config.d_model), fan_in=config.d_model))
    for i in range(config.n_lm_dec_layers):
        _add_block(g, rng, f"layer{i}.", config.d_model, cross=True)
    _add_final_ln(g, config.d_model)

    return ModelBundle(config=config, groups=groups)


# ---------------------------------------------------------------------------
# masks and attention
# ---------------------------------------------------------------------------


def length_mask(lengths, max_len: int) -> np.ndarray:
    """Additive key mask [B, 1, 1, max_len]: 0 on valid, MASK_VALUE on pad."""
    lengths = np.asarray(lengths)
    valid = np.arange(max_len)[None, :] < lengths[:, None]
    return np.where(valid, 0.0, MASK_VALUE).astype(np.float32)[:, None, None, :]

def causal_mask(n: int) -> np.ndarray:
    m = np.triu(np.full((n, n), MASK_VALUE, dtype=np.float32), k=1)
    return m[None, None, :, :]


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return nm.transpose(nm.reshape(x, (b, l, n_heads, d // n_heads)), (0, 2, 1, 3))


def _unheads(x: Tensor) -> Tensor:
    b, h, l, dh = x.shape
    return nm.reshape(nm.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def _mha(xq: Tensor, xkv: Tensor, p: dict, prefix: str, n_heads: int, mask) -> Tensor:
    dh = xq.shape[-1] // n_heads
    q = _heads(nm.matmul(xq, p[prefix + "wq"]), n_heads)
    k = _heads(nm.matmul(xkv, p[prefix + "wk"]), n_heads)
    v = _heads(nm.matmul(xkv, p[prefix + "wv"]), n_heads)
    scores = nm.matmul(nm.scale(q, 1.0 / math.sqrt(dh)), nm.transpose(k, (0, 1, 3, 2)))
    if mask is not None:
        scores = nm.add(scores, Tensor(mask))
    att = nm.softmax(scores, axis=-1)
    return nm.matmul(_unheads(nm.matmul(att, v)), p[prefix + "wo"])


def _ffn(x: Tensor, p: dict, prefix: str) -> Tensor:
    h = nm.relu(nm.add(nm.matmul(x, p[prefix + "ffn_w1"]), p[prefix + "ffn_b1"]))
    return nm.add(nm.matmul(h, p[prefix + "ffn_w2"]), p[prefix + "ffn_b2"])


def _maybe_drop(x: Tensor, p: float, rng) -> Tensor:
    return nm.dropout(x, p, rng) if p > 0.0 and rng is not None else x


def _encoder_block(x: Tensor, p: dict, i: int, n_heads: int, mask, drop=0.0, rng=None) -> Tensor:
    pre = f"layer{i}."
    h = nm.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
    x = nm.add(x, _maybe_drop(_mha(h, h, p, pre + "attn_", n_heads, mask), drop, rng))
    h = nm.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
    return nm.add(x, _maybe_drop(_ffn(h, p, pre), drop, rng))


def _decoder_block(x: Tensor, memory: Tensor, p: dict, i: int, n_heads: int,
                   self_mask, mem_mask, drop=0.0, rng=None) -> Tensor:
    pre = f"layer{i}."
    h = nm.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
    x = nm.add(x, _maybe_drop(_mha(h, h, p, pre + "attn_", n_heads, self_mask), drop, rng))
    h = nm.layer_norm(x, p[pre + "lnx_g"], p[pre + "lnx_b"])
    x = nm.add(x, _maybe_drop(_mha(h, memory, p, pre + "xattn_", n_heads, mem_mask), drop, rng))
    h = nm.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
    return nm.add(x, _maybe_drop(_ffn(h, p, pre), drop, rng))


# ---------------------------------------------------------------------------
# speech encoder
# ---------------------------------------------------------------------------


def pooled_length(t: int, factor: int) -> int:
    return -(-t // factor)  # ceil


def _pool_matrix(lengths, t_max: int, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Averaging matrices for non-overlapping stride-`factor` mean pooling."""
    lengths = np.asarray(lengths)
    out_lens = np.array([pooled_length(int(l), factor) for l in lengths])
    tp_max = int(out_lens.max()) if len(out_lens) else 0
    w = np.zeros((len(lengths), tp_max, t_max), dtype=np.float32)
    for b, l in enumerate(lengths):
        for i in range(out_lens[b]):
            lo, hi = i * factor, min((i + 1) * factor, int(l))
            w[b, i, lo:hi] = 1.0 / (hi - lo)
    return w, out_lens


def speech_encode_batch(frames: np.ndarray, lengths, bundle: ModelBundle,
                        drop=0.0, rng=None) -> tuple[Tensor, Tensor, np.ndarray]:
    """frames [B, Tmax, frame_dim] -> (encodings [B, T'max, d_speech],
    ctc log-probs [B, T'max, V], pooled lengths)."""
    cfg = bundle.config
    p = bundle.groups["speech_encoder"].tensors
    b, t_max, _ = frames.shape
    if t_max > cfg.max_frames:
        raise ValueError(f"{t_max} frames exceeds max_frames={cfg.max_frames}")
    x = nm.add(nm.matmul(Tensor(frames), p["in_w"]), p["in_b"])
    x = nm.add(x, nm.take_rows(p["pos"], np.arange(t_max)))
    mask = length_mask(lengths, t_max)
    half = cfg.n_speech_layers // 2
    for i in range(half):
        x = _encoder_block(x, p, i, cfg.n_heads, mask, drop, rng)
    w, out_lens = _pool_matrix(lengths, t_max, cfg.downsample_factor)
    x = nm.matmul(Tensor(w), x)
    mask = length_mask(out_lens, int(out_lens.max()))
    for i in range(half, cfg.n_speech_layers):
        x = _encoder_block(x, p, i, cfg.n_heads, mask, drop, rng)
    x = nm.layer_norm(x, p["final_ln_g"], p["final_ln_b"])
    logits = nm.add(nm.matmul(x, p["ctc_w"]), p["ctc_b"])
    return x, nm.log_softmax(logits, axis=-1), out_lens


def speech_encode(frames: np.ndarray, bundle: ModelBundle) -> tuple[Tensor, CtcPosteriors]:
    """Single utterance: [T, frame_dim] -> encodings [T', d_speech] + posteriors."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError(f"speech_encode expects non-empty [T, frame_dim], got {frames.shape}")
    enc, logp, _ = speech_encode_batch(frames[None], [frames.shape[0]], bundle)
    enc1 = nm.take_rows(enc, np.asarray(0))
    logp1 = nm.take_rows(logp, np.asarray(0))
    return enc1, CtcPosteriors(log_probs=logp1, blank_id=bundle.config.vocab.blank_id)


# ---------------------------------------------------------------------------
# adapter
# ---------------------------------------------------------------------------


def adapter_forward_batch(kept: Tensor, lengths, bundle: ModelBundle,
                          drop=0.0, rng=None, tensors: dict | None = None) -> Tensor:
    """kept [B, Kmax, d_speech] -> [B, Kmax, d_model].

    `tensors` overrides the bundle's adapter weights (retriever query tower
    runs the same stack on its own parameter copies).
    """
    cfg = bundle.config
    p = tensors if tensors is not None else bundle.groups["adapter"].tensors
    k_max = kept.shape[1]
    x = nm.add(nm.matmul(kept, p["in_w"]), p["in_b"])
    x = nm.add(x, nm.take_rows(p["pos"], np.arange(k_max)))
    mask = length_mask(lengths, k_max)
    for i in range(cfg.n_adapter_layers):
        x = _encoder_block(x, p, i, cfg.n_heads, mask, drop, rng)
    return nm.layer_norm(x, p["final_ln_g"], p["final_ln_b"])


def adapter_forward(filtered: BlankFilterResult, bundle: ModelBundle) -> Tensor:
    """Map kept speech encodings into the LM embedding space: [K, d_model]."""
    k = filtered.kept_encodings.shape[0]
    if k == 0:
        return Tensor(np.zeros((0, bundle.config.d_model), dtype=np.float32))
    x3 = nm.reshape(filtered.kept_encodings, (1, k, bundle.config.d_speech))
    out = adapter_forward_batch(x3, [k], bundle)
    return nm.take_rows(out, np.asarray(0))


# ---------------------------------------------------------------------------
# encoder-decoder LM
# ---------------------------------------------------------------------------


def lm_encode_batch(inputs: Tensor, lengths, bundle: ModelBundle, drop=0.0, rng=None,
                    tensors: dict | None = None) -> Tensor:
    cfg = bundle.config
    p = tensors if tensors is not None else bundle.groups["lm_encoder"].tensors
    l_max = inputs.shape[1]
    if l_max > cfg.max_len:
        raise ValueError(f"input length {l_max} exceeds max_len={cfg.max_len}")
    x = nm.add(inputs, nm.take_rows(p["pos"], np.arange(l_max)))
    mask = length_mask(lengths, l_max)
    for i in range(cfg.n_lm_enc_layers):
        x = _encoder_block(x, p, i, cfg.n_heads, mask, drop, rng)
    return nm.layer_norm(x, p["final_ln_g"], p["final_ln_b"])


def lm_decode_batch(memory: Tensor, mem_lengths, targets: np.ndarray,
                    bundle: ModelBundle, drop=0.0, rng=None) -> Tensor:
    """Teacher-forced decoder: targets [B, Lt] ids -> logits [B, Lt, V]."""
    cfg = bundle.config
    pd = bundle.groups["lm_decoder"].tensors
    emb = bundle.groups["lm_embedding"].tensors["tok"]
    b, lt = targets.shape
    if lt > cfg.max_len:
        raise ValueError(f"target length {lt} exceeds max_len={cfg.max_len}")
    x = nm.add(nm.take_rows(emb, targets), nm.take_rows(pd["pos"], np.arange(lt)))
    self_mask = causal_mask(lt)
    mem_mask = length_mask(mem_lengths, memory.shape[1])
    for i in range(cfg.n_lm_dec_layers):
        x = _decoder_block(x, memory, pd, i, cfg.n_heads, self_mask, mem_mask, drop, rng)
    x = nm.layer_norm(x, pd["final_ln_g"], pd["final_ln_b"])
    return nm.matmul(x, nm.transpose(emb, (1, 0)))  # tied output projection


def lm_forward(input_embeddings: Tensor, target, bundle: ModelBundle) -> Tensor:
    """Single example: input [L, d_model], target ids starting with BOS.

    Returns logits [len(target), V]; position j predicts target[j+1].
    """
    target = np.asarray(target, dtype=np.int64)
    if target.ndim != 1 or target.size < 1:
        raise ValueError("target must be a non-empty 1-D id sequence")
    if target[0] != bundle.config.vocab.bos_id:
        raise ValueError("target must begin with BOS")
    l = input_embeddings.shape[0]
    if l < 1:
        raise ValueError("lm_forward requires at least one input embedding")
    x3 = nm.reshape(input_embeddings, (1, l, bundle.config.d_model))
    memory = lm_encode_batch(x3, [l], bundle)
    logits = lm_decode_batch(memory, [l], target[None, :], bundle)
    return nm.take_rows(logits, np.asarray(0))


def lm_generate(input_embeddings: Tensor, bundle: ModelBundle, max_len: int = 64) -> list[int]:
    """Greedy decode until EOS or max_len; never emits PAD or BOS."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    vocab = bundle.config.vocab
    with nm.no_grad():
        l = input_embeddings.shape[0]
        x3 = nm.reshape(input_embeddings, (1, max(l, 1), bundle.config.d_model)) if l else None
        if l == 0:
            # degenerate input: one zero embedding keeps attention well-defined
            x3 = Tensor(np.zeros((1, 1, bundle.config.d_model), dtype=np.float32))
            l = 1
        memory = lm_encode_batch(x3, [l], bundle)
        out: list[int] = [vocab.bos_id]
        for _ in range(max_len):
            logits = lm_decode_batch(memory, [l], np.asarray(out)[None, :], bundle)
            row = logits.data[0, -1].copy()
            row[vocab.pad_id] = -np.inf
            row[vocab.bos_id] = -np.inf
            nxt = int(np.argmax(row))
            if nxt == vocab.eos_id:
                break
            out.append(nxt)
    return out[1:]
