"""Joint-model assembly: input composition (speech embeddings + optional
entity prefix + dialog history), joint ASR+state target serialization,
freeze policies, and the staged training loops (text LM, CTC encoder,
adapter pretraining, joint fine-tuning).

Composition order is speech first, then text. The text part is
"[ENT] <cat : surface | ...>" (only when entities were retrieved) followed
by a "[HIST]" marker and the running dialog history, so an empty history
still leaves one begin-of-text marker token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import numerics as nm
from .checkpoint import load_checkpoint, restore_groups, save_checkpoint
from .ctc import blank_filter, collapse_path, ctc_greedy_decode, ctc_loss, CtcPosteriors
from .model import (
    ModelBundle,
    ModelConfig,
    adapter_forward_batch,
    build_bundle,
    lm_decode_batch,
    lm_encode_batch,
    speech_encode,
    speech_encode_batch,
)
from .numerics import Tensor
from .retriever import EntityIndex, RetrievalParams, RetrieverBundle, retrieve
from .speechsim import (
    ASR_TAG,
    BLANK,
    DST_TAG,
    ENT_TAG,
    EQ,
    HIST_TAG,
    SEMI,
    SEP,
    Dialog,
    Entity,
    SynthParams,
    Utterance,
    Vocab,
    utterance_frames,
    turn_frames,
)


class FreezePolicy(str, Enum):
    WHOLE_LM = "WholeLM"
    ENCODER_AND_EMBEDDING = "EncoderAndEmbedding"
    ENCODER_ONLY = "EncoderOnly"
    ADAPTER_ONLY = "AdapterOnly"


class Mode(str, Enum):
    SLM = "SLM"
    RESLM = "ReSLM"


# Trainable groups per policy; the speech encoder is frozen under all of them.
_POLICY_TRAINABLE = {
    FreezePolicy.WHOLE_LM: {"adapter", "lm_embedding", "lm_encoder", "lm_decoder"},
    FreezePolicy.ENCODER_AND_EMBEDDING: {"adapter", "lm_embedding", "lm_encoder"},
    FreezePolicy.ENCODER_ONLY: {"adapter", "lm_encoder"},
    FreezePolicy.ADAPTER_ONLY: {"adapter"},
}


def apply_freeze_policy(bundle: ModelBundle, policy: FreezePolicy) -> None:
    trainable = _POLICY_TRAINABLE[FreezePolicy(policy)]
    for name, group in bundle.groups.items():
        group.set_frozen(name not in trainable)


def freeze_all_except(bundle: ModelBundle, names: set[str]) -> None:
    for name, group in bundle.groups.items():
        group.set_frozen(name not in names)


# ---------------------------------------------------------------------------
# joint target serialization
# ---------------------------------------------------------------------------


@dataclass
class JointTarget:
    transcript: str
    state: dict[str, str]
    serialized: str


def serialize_target(transcript: str, state: dict[str, str]) -> str:
    """"[ASR] <transcript> [DST] slot = value ; slot = value" (slots sorted).

    Separators are standalone whitespace-delimited tokens because the
    artifact tokenizes on whitespace.
    """
    parts = [ASR_TAG]
    if transcript:
        parts.append(transcript)
    parts.append(DST_TAG)
    pairs = [f"{k} {EQ} {v}" for k, v in sorted(state.items())]
    if pairs:
        parts.append(f" {SEMI} ".join(pairs))
    return " ".join(parts)


def make_joint_target(transcript: str, state: dict[str, str]) -> JointTarget:
    return JointTarget(transcript=transcript, state=dict(state), serialized=serialize_target(transcript, state))


def parse_output(text_or_tokens) -> tuple[str, dict[str, str], int]:
    """Best-effort inverse of serialize_target; never raises.

    Returns (transcript, state, malformed_pair_count). A missing [DST]
    section yields an empty state; malformed pairs are skipped and counted.
    """
    toks = text_or_tokens.split() if isinstance(text_or_tokens, str) else list(text_or_tokens)
    warnings = 0
    if DST_TAG in toks:
        cut = toks.index(DST_TAG)
        left, right = toks[:cut], toks[cut + 1 :]
    else:
        left, right = toks, []
    if left and left[0] == ASR_TAG:
        left = left[1:]
    elif left:
        warnings += 1
    transcript = " ".join(t for t in left if t != ASR_TAG)

    state: dict[str, str] = {}
    if right:
        chunk: list[str] = []
        chunks = []
        for t in right:
            if t == SEMI:
                chunks.append(chunk)
                chunk = []
            else:
                chunk.append(t)
        chunks.append(chunk)
        for c in chunks:
            if len(c) >= 3 and c[1] == EQ and c[0] != EQ:
                state[c[0]] = " ".join(c[2:])
            elif c:
                warnings += 1
    return transcript, state, warnings


# ---------------------------------------------------------------------------
# input composition
# ---------------------------------------------------------------------------


@dataclass
class ComposedInput:
    speech_part: Tensor          # [K, d_model] adapter outputs
    text_part: str               # entity prefix (if any) + [HIST] + history
    combined: Tensor             # [K + len(text tokens), d_model]
    text_ids: list[int] = field(default_factory=list)


def compose_text_tokens(history_text: str, retrieved: list[Entity] | None) -> list[str]:
    toks: list[str] = []
    if retrieved:
        toks.append(ENT_TAG)
        for j, e in enumerate(retrieved):
            if j:
                toks.append(SEP)
            toks.extend([e.category, ":", *e.surface.split()])
    toks.append(HIST_TAG)
    if history_text.strip():
        toks.extend(history_text.split())
    return toks


def adapter_apply(kept: np.ndarray, bundle: ModelBundle, drop=0.0, rng=None) -> Tensor:
    """Adapter over pre-filtered encodings [K, d_speech] -> [K, d_model]."""
    k = kept.shape[0]
    if k == 0:
        return Tensor(np.zeros((0, bundle.config.d_model), dtype=np.float32))
    out = adapter_forward_batch(Tensor(kept[None]), [k], bundle, drop, rng)
    return nm.take_rows(out, np.asarray(0))


def compose_input(
    frames: np.ndarray | None,
    history_text: str,
    retrieved: list[Entity] | None,
    bundle: ModelBundle,
    kept: np.ndarray | None = None,
) -> ComposedInput:
    """Speech -> encode -> blank-filter -> adapter; text part appended after.

    `kept` short-circuits the frozen speech front end with cached filtered
    encodings. An empty retrieval list composes identically to plain mode.
    """
    if kept is None:
        if frames is None or frames.shape[0] == 0:
            kept = np.zeros((0, bundle.config.d_speech), dtype=np.float32)
        else:
            with nm.no_grad():
                enc, post = speech_encode(frames, bundle)
                kept = blank_filter(enc, post).kept_encodings.data
    speech_part = adapter_apply(kept, bundle)
    text_tokens = compose_text_tokens(history_text, retrieved)
    text_part = " ".join(text_tokens)
    text_ids = bundle.config.vocab.encode(text_part)
    text_emb = nm.take_rows(bundle.groups["lm_embedding"].tensors["tok"], np.asarray(text_ids))
    combined = nm.concat([speech_part, text_emb], axis=0) if speech_part.shape[0] else text_emb
    return ComposedInput(speech_part=speech_part, text_part=text_part, combined=combined, text_ids=text_ids)


# ---------------------------------------------------------------------------
# speech front-end cache (the encoder is frozen after CTC training)
# ---------------------------------------------------------------------------


@dataclass
class EncodedUtterance:
    kept: np.ndarray                 # filtered encodings [K, d_speech]
    ctc_text: str                    # greedy transcript
    n_frames: int                    # raw input frames
    full: np.ndarray | None = None   # unfiltered encodings, only when K == 0

    @property
    def kept_or_full(self) -> np.ndarray:
        return self.kept if self.kept.shape[0] else self.full


def encode_utterance(frames: np.ndarray, bundle: ModelBundle) -> EncodedUtterance:
    with nm.no_grad():
        enc, post = speech_encode(frames, bundle)
        res = blank_filter(enc, post)
        text = bundle.config.vocab.decode(ctc_greedy_decode(post))
        kept = res.kept_encodings.data.copy()
        return EncodedUtterance(
            kept=kept,
            ctc_text=text,
            n_frames=frames.shape[0],
            full=enc.data.copy() if kept.shape[0] == 0 else None,
        )


def encode_dialog_corpus(
    dialogs: list[Dialog], bundle: ModelBundle, vocab: Vocab, params: SynthParams
) -> dict[tuple[str, int], EncodedUtterance]:
    cache = {}
    for d in dialogs:
        for i, turn in enumerate(d.turns):
            cache[(d.dialog_id, i)] = encode_utterance(turn_frames(turn, vocab, params), bundle)
    return cache


# ---------------------------------------------------------------------------
# batched teacher-forced step
# ---------------------------------------------------------------------------


def _pad_stack(embs: list[Tensor], d_model: int) -> tuple[Tensor, list[int]]:
    lengths = [e.shape[0] for e in embs]
    l_max = max(lengths)
    rows = []
    for e in embs:
        if e.shape[0] < l_max:
            e = nm.concat([e, Tensor(np.zeros((l_max - e.shape[0], d_model), dtype=np.float32))], axis=0)
        rows.append(nm.reshape(e, (1, l_max, d_model)))
    return nm.concat(rows, axis=0), lengths


def _target_arrays(target_ids: list[list[int]], vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    b = len(target_ids)
    lt = max(len(t) for t in target_ids) + 1
    dec_in = np.full((b, lt), vocab.pad_id, dtype=np.int64)
    labels = np.full((b, lt), vocab.pad_id, dtype=np.int64)
    for i, ids in enumerate(target_ids):
        dec_in[i, 0] = vocab.bos_id
        dec_in[i, 1 : len(ids) + 1] = ids
        labels[i, : len(ids)] = ids
        labels[i, len(ids)] = vocab.eos_id
    return dec_in, labels


def teacher_forced_loss(
    bundle: ModelBundle,
    composed: list[Tensor],
    target_ids: list[list[int]],
    drop=0.0,
    rng=None,
) -> Tensor:
    vocab = bundle.config.vocab
    emb3, lengths = _pad_stack(composed, bundle.config.d_model)
    memory = lm_encode_batch(emb3, lengths, bundle, drop, rng)
    dec_in, labels = _target_arrays(target_ids, vocab)
    logits = lm_decode_batch(memory, lengths, dec_in, bundle, drop, rng)
    return nm.cross_entropy(logits, labels, ignore_index=vocab.pad_id)


def _compose_batch(
    kept_list: list[np.ndarray],
    text_token_lists: list[list[str]],
    bundle: ModelBundle,
    drop=0.0,
    rng=None,
) -> list[Tensor]:
    """Batched adapter pass, then per-example [speech ; text] concatenation.

    Produces the same composition as compose_input, batched for training.
    """
    vocab = bundle.config.vocab
    emb = bundle.groups["lm_embedding"].tensors["tok"]
    k_lens = [k.shape[0] for k in kept_list]
    k_max = max(k_lens)
    speech_rows: list[Tensor | None] = [None] * len(kept_list)
    if k_max > 0:
        batch = np.zeros((len(kept_list), k_max, bundle.config.d_speech), dtype=np.float32)
        for b, k in enumerate(kept_list):
            if k.shape[0]:
                batch[b, : k.shape[0]] = k
        out = adapter_forward_batch(Tensor(batch), [max(1, l) for l in k_lens], bundle, drop, rng)
        for b, l in enumerate(k_lens):
            if l:
                speech_rows[b] = nm.take_rows(nm.take_rows(out, np.asarray(b)), np.arange(l))
    composed = []
    for b, toks in enumerate(text_token_lists):
        ids = vocab.encode(" ".join(toks))
        text_emb = nm.take_rows(emb, np.asarray(ids))
        if speech_rows[b] is not None:
            composed.append(nm.concat([speech_rows[b], text_emb], axis=0))
        else:
            composed.append(text_emb)
    return composed


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


def _log_record(step, loss, lr, policy, mode):
    return {"step": step, "loss": float(loss), "lr": lr, "policy": str(policy), "mode": str(mode)}


def content_token_ids(vocab: Vocab) -> list[int]:
    """Tokens that may appear in spoken text (no control tokens, no blank)."""
    skip = set(_control_tokens())
    return [i for i, t in enumerate(vocab.tokens) if t not in skip]


def _control_tokens():
    from .speechsim import _SPECIALS

    return list(_SPECIALS) + [BLANK]


def pretrain_lm(
    bundle: ModelBundle,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    noise_scale: float = 0.5,
    start_step: int = 0,
) -> list[dict]:
    """Teach the LM its transcription-shaped interface before any speech
    is involved: inputs are (noisy, sometimes duplicated) token embeddings
    ending in the [HIST] marker, optionally followed by clean distractor
    text; the target is "[ASR] <clean tokens>".

    This is the miniature stand-in for a pretrained text LM: it makes the
    decoder a robust copy machine over embedding space, which is exactly
    the capability the frozen-LM adapter stage depends on.
    """
    vocab = bundle.config.vocab
    freeze_all_except(bundle, {"lm_embedding", "lm_encoder", "lm_decoder"})
    content = np.array(content_token_ids(vocab))
    emb = bundle.groups["lm_embedding"].tensors["tok"]
    hist_id = vocab.index[HIST_TAG]
    asr_id = vocab.index[ASR_TAG]
    # embedding rows are ~unit norm (init std 1/sqrt(d)), so per-coordinate
    # noise must shrink with width to keep a workable signal-to-noise ratio
    sigma = noise_scale / np.sqrt(bundle.config.d_model)
    log = []
    for step in range(start_step, start_step + steps):
        rng = np.random.default_rng((seed, step, 0x11))
        composed, targets = [], []
        for _ in range(batch_size):
            n = int(rng.integers(2, 11))
            ids = content[rng.integers(0, len(content), size=n)]
            dup_ids = []
            for t in ids:
                dup_ids.extend([int(t)] * (2 if rng.random() < 0.3 else 1))
            in_ids = dup_ids + [hist_id]
            if rng.random() < 0.5:
                n_extra = int(rng.integers(1, 9))
                in_ids += [int(t) for t in content[rng.integers(0, len(content), size=n_extra)]]
            e = nm.take_rows(emb, np.asarray(in_ids))
            noise = np.zeros((len(in_ids), bundle.config.d_model), dtype=np.float32)
            noise[: len(dup_ids)] = rng.normal(0.0, sigma, size=(len(dup_ids), bundle.config.d_model))
            composed.append(nm.add(e, Tensor(noise)))
            targets.append([asr_id] + [int(t) for t in ids])
        loss = teacher_forced_loss(bundle, composed, targets)
        nm.zero_grad(bundle.group_list())
        nm.backward(loss)
        nm.adam_step(bundle.group_list(), lr=lr)
        log.append(_log_record(step, loss.data, lr, "lm-pretrain", "-"))
    return log


def train_ctc(
    bundle: ModelBundle,
    utterances: list[Utterance],
    vocab: Vocab,
    params: SynthParams,
    steps: int,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
    start_step: int = 0,
) -> list[dict]:
    """Train the speech encoder + CTC head; everything else frozen."""
    if not utterances:
        raise ValueError("train_ctc: empty corpus")
    freeze_all_except(bundle, {"speech_encoder"})
    frames_all = [utterance_frames(u, vocab, params) for u in utterances]
    targets_all = [vocab.encode(u.text) for u in utterances]
    log = []
    for step in range(start_step, start_step + steps):
        rng = np.random.default_rng((seed, step, 0x22))
        idx = rng.integers(0, len(utterances), size=batch_size)
        frames = [frames_all[int(i)] for i in idx]
        t_max = max(f.shape[0] for f in frames)
        batch = np.zeros((batch_size, t_max, params.frame_dim), dtype=np.float32)
        for b, f in enumerate(frames):
            batch[b, : f.shape[0]] = f
        enc, logp, out_lens = speech_encode_batch(batch, [f.shape[0] for f in frames], bundle)
        losses = []
        for b in range(batch_size):
            lp_b = nm.take_rows(nm.take_rows(logp, np.asarray(b)), np.arange(out_lens[b]))
            post = CtcPosteriors(log_probs=lp_b, blank_id=vocab.blank_id)
            l = ctc_loss(post, targets_all[int(idx[b])])
            if np.isfinite(l.data):
                losses.append(l)
        if not losses:
            log.append(_log_record(step, np.inf, lr, "ctc", "-"))
            continue
        total = losses[0]
        for l in losses[1:]:
            total = nm.add(total, l)
        loss = nm.scale(total, 1.0 / len(losses))
        nm.zero_grad(bundle.group_list())
        nm.backward(loss)
        nm.adam_step(bundle.group_list(), lr=lr)
        log.append(_log_record(step, loss.data, lr, "ctc", "-"))
    return log


def pretrain_adapter(
    bundle: ModelBundle,
    asr_cache: list[EncodedUtterance],
    asr_texts: list[str],
    steps: int,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
    start_step: int = 0,
) -> list[dict]:
    """Adapter-only ASR pretraining: speech-only input (text part is just
    the begin-of-text marker), target "[ASR] <transcript>", all other
    groups frozen. Dropout stays off in this stage."""
    if not asr_cache:
        raise ValueError("pretrain_adapter: empty corpus")
    vocab = bundle.config.vocab
    apply_freeze_policy(bundle, FreezePolicy.ADAPTER_ONLY)
    asr_id = vocab.index[ASR_TAG]
    target_ids = [[asr_id] + vocab.encode(t) for t in asr_texts]
    text_tokens = [HIST_TAG]
    log = []
    for step in range(start_step, start_step + steps):
        rng = np.random.default_rng((seed, step, 0x33))
        idx = rng.integers(0, len(asr_cache), size=batch_size)
        kept_list = [asr_cache[int(i)].kept for i in idx]
        composed = _compose_batch(kept_list, [text_tokens] * batch_size, bundle)
        loss = teacher_forced_loss(bundle, composed, [target_ids[int(i)] for i in idx])
        nm.zero_grad(bundle.group_list())
        nm.backward(loss)
        nm.adam_step(bundle.group_list(), lr=lr)
        log.append(_log_record(step, loss.data, lr, FreezePolicy.ADAPTER_ONLY.value, "-"))
    return log


@dataclass
class TurnExample:
    dialog_id: str
    turn_index: int
    kept: np.ndarray
    history_text: str
    target_ids: list[int]
    retrieved: list[Entity] = field(default_factory=list)


def build_turn_examples(
    dialogs: list[Dialog],
    bundle: ModelBundle,
    speech_cache: dict[tuple[str, int], EncodedUtterance],
    mode: Mode,
    retriever_bundle: RetrieverBundle | None = None,
    index: EntityIndex | None = None,
    retrieval_params: RetrievalParams | None = None,
) -> list[TurnExample]:
    """Flatten dialogs into per-turn training examples.

    History is the CTC transcript of prior turns (not references). In
    retrieval-augmented mode each turn's entity prefix is retrieved with
    the same top-K/threshold policy used at inference, precomputed here
    because the retriever is fixed during joint training.
    """
    vocab = bundle.config.vocab
    mode = Mode(mode)
    if mode is Mode.RESLM and (retriever_bundle is None or index is None):
        raise ValueError("ReSLM mode requires a trained retriever and entity index")
    from .retriever import embed_queries_from_kept, rank_candidates

    examples = []
    for d in dialogs:
        history: list[str] = []
        for i, turn in enumerate(d.turns):
            enc = speech_cache[(d.dialog_id, i)]
            retrieved: list[Entity] = []
            if mode is Mode.RESLM:
                with nm.no_grad():
                    q = embed_queries_from_kept([enc.kept_or_full], retriever_bundle).data[0]
                retrieved = [e for e, _ in rank_candidates(q, index, retrieval_params or RetrievalParams())]
            target = serialize_target(turn.user_text, turn.reference_state)
            examples.append(
                TurnExample(
                    dialog_id=d.dialog_id,
                    turn_index=i,
                    kept=enc.kept,
                    history_text=" | ".join(history),
                    target_ids=vocab.encode(target),
                    retrieved=retrieved,
                )
            )
            history.append(enc.ctc_text)
    return examples


def train_slm(
    bundle: ModelBundle,
    examples: list[TurnExample],
    policy: FreezePolicy,
    mode: Mode,
    steps: int,
    batch_size: int = 8,
    lr: float = 3e-4,
    seed: int = 0,
    dropout: float = 0.1,
    start_step: int = 0,
) -> list[dict]:
    """Joint ASR+state fine-tuning on serialized targets."""
    if not examples:
        raise ValueError("train_slm: no examples")
    apply_freeze_policy(bundle, policy)
    mode = Mode(mode)
    log = []
    for step in range(start_step, start_step + steps):
        rng = np.random.default_rng((seed, step, 0x44))
        idx = rng.integers(0, len(examples), size=batch_size)
        batch = [examples[int(i)] for i in idx]
        toks = [compose_text_tokens(ex.history_text, ex.retrieved if mode is Mode.RESLM else None) for ex in batch]
        drop_rng = np.random.default_rng((seed, step, 0x45))
        composed = _compose_batch([ex.kept for ex in batch], toks, bundle, drop=dropout, rng=drop_rng)
        loss = teacher_forced_loss(bundle, composed, [ex.target_ids for ex in batch], drop=dropout, rng=drop_rng)
        nm.zero_grad(bundle.group_list())
        nm.backward(loss)
        nm.adam_step(bundle.group_list(), lr=lr)
        log.append(_log_record(step, loss.data, lr, FreezePolicy(policy).value, mode.value))
    return log


# ---------------------------------------------------------------------------
# bundle persistence
# ---------------------------------------------------------------------------


def save_bundle(path, bundle: ModelBundle, stage: str, step: int = 0, extra: dict | None = None) -> None:
    meta = dict(extra or {})
    meta.update({"stage": stage, "step": step, "model_config": bundle.config.to_dict()})
    save_checkpoint(path, bundle.group_list(), digest=bundle.config.digest(), meta=meta)


def load_bundle(path) -> tuple[ModelBundle, dict]:
    digest, meta, entries = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["model_config"])
    if digest != config.digest():
        raise ValueError(f"{path}: header digest does not match embedded config")
    bundle = build_bundle(config, seed=0)
    restore_groups(bundle.group_list(), entries, meta)
    return bundle, meta
