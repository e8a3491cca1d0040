"""Experiment orchestration shared by the CLI, the scripts, and the
acceptance suite: corpus generation and (de)serialization, staged training
against a checkpoint directory, and the evaluation tasks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dialog import EvalReport, corpus_wer, evaluate_corpus
from .model import ModelBundle, ModelConfig, build_bundle, clone_bundle
from .numerics import ParamGroup, Tensor
from .pipeline import (
    EncodedUtterance,
    FreezePolicy,
    Mode,
    build_turn_examples,
    encode_utterance,
    compose_text_tokens,
    load_bundle,
    parse_output,
    pretrain_adapter,
    pretrain_lm,
    save_bundle,
    teacher_forced_loss,
    train_ctc,
    train_slm,
    _compose_batch,
)
from .retriever import (
    EntityIndex,
    RetrievalParams,
    RetrieverBundle,
    build_index,
    build_retriever,
    calibrate_threshold,
    load_index,
    load_retriever,
    precision_at_k,
    rank_candidates,
    recall_at_k,
    save_index,
    save_retriever,
    train_retriever,
)
from .speechsim import (
    SCHEMA,
    Dialog,
    Entity,
    SynthParams,
    Turn,
    Utterance,
    Vocab,
    build_vocab,
    gen_asr_corpus,
    gen_dialog_corpus,
    gen_entity_catalog,
    synth_utterance,
    turn_frames,
    utterance_frames,
)

RETRIEVER_EVAL_KS = (1, 3, 5, 10, 20, 100)


@dataclass
class Corpus:
    vocab: Vocab
    synth: SynthParams
    train_entities: list[Entity]
    eval_entities: list[Entity]
    train_dialogs: list[Dialog]
    eval_dialogs: list[Dialog]
    heldout_dialogs: list[Dialog]  # train-catalog dialogs reserved for retriever eval
    asr_train: list[Utterance]
    asr_eval: list[Utterance]
    frames: dict[str, np.ndarray] | None = None  # optional stored frames

    def stats(self) -> dict:
        eval_only = {e.surface for e in self.eval_entities}
        eval_turns = [t for d in self.eval_dialogs for t in d.turns]
        mention_turns = sum(
            1 for t in eval_turns if any(m.surface in eval_only for m in t.mentions)
        )
        return {
            "n_train_dialogs": len(self.train_dialogs),
            "n_eval_dialogs": len(self.eval_dialogs),
            "n_heldout_dialogs": len(self.heldout_dialogs),
            "n_train_entities": len(self.train_entities),
            "n_eval_entities": len(self.eval_entities),
            "n_asr_train": len(self.asr_train),
            "n_asr_eval": len(self.asr_eval),
            "catalogs_disjoint": not (
                {e.surface for e in self.train_entities} & eval_only
            ),
            "eval_turns_with_eval_entity": (mention_turns / len(eval_turns)) if eval_turns else 0.0,
            "vocab_size": len(self.vocab),
        }


def make_synth_params(cfg: RunConfig) -> SynthParams:
    return SynthParams(
        frame_dim=cfg.synth.frame_dim,
        dup_min=cfg.synth.dup_min,
        dup_max=cfg.synth.dup_max,
        noise_sigma=cfg.synth.noise_sigma,
        seed=0,
    )


def build_model_config(cfg: RunConfig, vocab: Vocab) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        vocab=vocab,
        d_speech=m.d_speech,
        d_model=m.d_model,
        n_speech_layers=m.n_speech_layers,
        n_adapter_layers=m.n_adapter_layers,
        n_lm_enc_layers=m.n_lm_enc_layers,
        n_lm_dec_layers=m.n_lm_dec_layers,
        n_heads=m.n_heads,
        downsample_factor=m.downsample_factor,
        frame_dim=cfg.synth.frame_dim,
        max_frames=m.max_frames,
        max_len=m.max_len,
    )


def gen_corpus(cfg: RunConfig) -> Corpus:
    """Full synthetic corpus, a pure function of cfg (notably cfg.seed)."""
    seed = cfg.seed
    vocab = build_vocab(proto_seed=seed)
    synth = make_synth_params(cfg)
    train_ents, eval_ents = gen_entity_catalog(
        cfg.data.n_train_entities, cfg.data.n_eval_entities, seed=seed
    )
    d = cfg.data
    train_dialogs = gen_dialog_corpus(
        train_ents, d.n_train_dialogs, seed=(seed * 7 + 1), id_prefix="tr",
        turns_min=d.turns_min, turns_max=d.turns_max,
    )
    eval_dialogs = gen_dialog_corpus(
        eval_ents, d.n_eval_dialogs, seed=(seed * 7 + 2), id_prefix="ev",
        turns_min=d.turns_min, turns_max=d.turns_max,
    )
    heldout_dialogs = gen_dialog_corpus(
        train_ents, d.n_heldout_dialogs, seed=(seed * 7 + 3), id_prefix="ho",
        turns_min=d.turns_min, turns_max=d.turns_max,
    )
    asr_train = gen_asr_corpus(vocab, d.n_asr_train, seed=(seed * 7 + 4))
    asr_eval = gen_asr_corpus(vocab, d.n_asr_eval, seed=(seed * 7 + 5))
    return Corpus(
        vocab=vocab,
        synth=synth,
        train_entities=train_ents,
        eval_entities=eval_ents,
        train_dialogs=train_dialogs,
        eval_dialogs=eval_dialogs,
        heldout_dialogs=heldout_dialogs,
        asr_train=asr_train,
        asr_eval=asr_eval,
    )


# ---------------------------------------------------------------------------
# corpus files (JSON lines with embedded seeds; frames optional)
# ---------------------------------------------------------------------------


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _dialog_record(d: Dialog) -> dict:
    return {
        "dialog_id": d.dialog_id,
        "schema": d.domain_schema,
        "turns": [
            {
                "text": t.user_text,
                "state": t.reference_state,
                "frame_seed": t.frame_seed,
                "mentions": [[m.category, m.surface] for m in t.mentions],
            }
            for t in d.turns
        ],
    }


def _dialog_from_record(r: dict) -> Dialog:
    return Dialog(
        dialog_id=r["dialog_id"],
        domain_schema=r["schema"],
        turns=[
            Turn(
                user_text=t["text"],
                reference_state=t["state"],
                frame_seed=t["frame_seed"],
                mentions=[Entity(c, s) for c, s in t["mentions"]],
            )
            for t in r["turns"]
        ],
    )


def save_corpus(corpus: Corpus, corpus_dir, store_frames: bool = False) -> None:
    out = Path(corpus_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"vocab": corpus.vocab.to_dict(), "synth": {
        "frame_dim": corpus.synth.frame_dim,
        "dup_min": corpus.synth.dup_min,
        "dup_max": corpus.synth.dup_max,
        "noise_sigma": corpus.synth.noise_sigma,
    }}
    (out / "vocab.json").write_text(json.dumps(meta, sort_keys=True))
    for name, ents in (("train", corpus.train_entities), ("eval", corpus.eval_entities)):
        _write_jsonl(out / f"entities_{name}.jsonl", ({"category": e.category, "surface": e.surface} for e in ents))
    for name, ds in (
        ("train", corpus.train_dialogs),
        ("eval", corpus.eval_dialogs),
        ("heldout", corpus.heldout_dialogs),
    ):
        _write_jsonl(out / f"dialogs_{name}.jsonl", (_dialog_record(d) for d in ds))
    for name, utts in (("train", corpus.asr_train), ("eval", corpus.asr_eval)):
        _write_jsonl(out / f"asr_{name}.jsonl", ({"text": u.text, "frame_seed": u.frame_seed} for u in utts))
    if store_frames:
        g = ParamGroup("frames")
        for d in corpus.train_dialogs + corpus.eval_dialogs + corpus.heldout_dialogs:
            for i, t in enumerate(d.turns):
                g.add(f"{d.dialog_id}/{i}", Tensor(turn_frames(t, corpus.vocab, corpus.synth)))
        for tag, utts in (("asr_train", corpus.asr_train), ("asr_eval", corpus.asr_eval)):
            for i, u in enumerate(utts):
                g.add(f"{tag}/{i}", Tensor(utterance_frames(u, corpus.vocab, corpus.synth)))
        save_checkpoint(out / "frames.slmf", [g], digest="frames", include_optimizer=False)


def load_corpus(corpus_dir) -> Corpus:
    src = Path(corpus_dir)
    meta = json.loads((src / "vocab.json").read_text())
    vocab = Vocab.from_dict(meta["vocab"])
    synth = SynthParams(seed=0, **meta["synth"])
    ents = {}
    for name in ("train", "eval"):
        ents[name] = [Entity(r["category"], r["surface"]) for r in _read_jsonl(src / f"entities_{name}.jsonl")]
    dialogs = {}
    for name in ("train", "eval", "heldout"):
        dialogs[name] = [_dialog_from_record(r) for r in _read_jsonl(src / f"dialogs_{name}.jsonl")]
    asr = {}
    for name in ("train", "eval"):
        asr[name] = [Utterance(r["text"], r["frame_seed"]) for r in _read_jsonl(src / f"asr_{name}.jsonl")]
    frames = None
    if (src / "frames.slmf").exists():
        _, _, entries = load_checkpoint(src / "frames.slmf")
        frames = {k.split("/", 1)[1]: v for k, v in entries.items()}
    return Corpus(
        vocab=vocab,
        synth=synth,
        train_entities=ents["train"],
        eval_entities=ents["eval"],
        train_dialogs=dialogs["train"],
        eval_dialogs=dialogs["eval"],
        heldout_dialogs=dialogs["heldout"],
        asr_train=asr["train"],
        asr_eval=asr["eval"],
        frames=frames,
    )


def get_turn_frames(corpus: Corpus, dialog: Dialog, i: int) -> np.ndarray:
    key = f"{dialog.dialog_id}/{i}"
    if corpus.frames is not None and key in corpus.frames:
        return corpus.frames[key]
    return turn_frames(dialog.turns[i], corpus.vocab, corpus.synth)


def get_utterance_frames(corpus: Corpus, tag: str, i: int, utt: Utterance) -> np.ndarray:
    key = f"{tag}/{i}"
    if corpus.frames is not None and key in corpus.frames:
        return corpus.frames[key]
    return utterance_frames(utt, corpus.vocab, corpus.synth)


# ---------------------------------------------------------------------------
# speech caches / derived training sets
# ---------------------------------------------------------------------------


def encode_asr_cache(corpus: Corpus, tag: str, utts: list[Utterance], bundle: ModelBundle) -> list[EncodedUtterance]:
    return [
        encode_utterance(get_utterance_frames(corpus, tag, i, u), bundle)
        for i, u in enumerate(utts)
    ]


def encode_dialog_cache(corpus: Corpus, dialogs: list[Dialog], bundle: ModelBundle) -> dict:
    cache = {}
    for d in dialogs:
        for i in range(len(d.turns)):
            cache[(d.dialog_id, i)] = encode_utterance(get_turn_frames(corpus, d, i), bundle)
    return cache


def retriever_examples(dialogs: list[Dialog], cache: dict) -> list[tuple[np.ndarray, Entity]]:
    """(kept encodings, mentioned entity) pairs from turns with one mention."""
    out = []
    for d in dialogs:
        for i, t in enumerate(d.turns):
            if len(t.mentions) == 1:
                out.append((cache[(d.dialog_id, i)].kept_or_full, t.mentions[0]))
    return out


# ---------------------------------------------------------------------------
# evaluations
# ---------------------------------------------------------------------------


def eval_asr(bundle: ModelBundle, cache: list[EncodedUtterance], texts: list[str], max_len: int = 32) -> dict:
    """ASR-only evaluation: speech-only composition, corpus-level WER."""
    pairs = []
    records = []
    for enc, ref in zip(cache, texts):
        composed = _compose_batch([enc.kept], [compose_text_tokens("", None)], bundle)
        from .model import lm_generate

        out = lm_generate(composed[0], bundle, max_len=max_len)
        hyp, _, _ = parse_output(bundle.config.vocab.decode(out))
        pairs.append((hyp, ref))
        records.append({"hypothesis": hyp, "reference": ref})
    return {"wer": corpus_wer(pairs), "n_utterances": len(pairs), "records": records}


def eval_ctc_symbol_error(bundle: ModelBundle, cache: list[EncodedUtterance], texts: list[str]) -> float:
    """Greedy-CTC token error rate against references (diagnostic)."""
    return corpus_wer([(enc.ctc_text, ref) for enc, ref in zip(cache, texts)])


def eval_retriever(
    rb: RetrieverBundle,
    index: EntityIndex,
    queries: list[tuple[np.ndarray, set[Entity], str]],
    params: RetrievalParams,
    ks=RETRIEVER_EVAL_KS,
) -> dict:
    """Mean R@k / P@k over queries; also returns per-query records."""
    from .retriever import embed_queries_from_kept

    recalls = {k: [] for k in ks}
    precisions = {k: [] for k in ks}
    records = []
    scan_params = RetrievalParams(k=max(ks), sim_threshold=params.sim_threshold)
    for kept, gold, qid in queries:
        with nm.no_grad():
            q = embed_queries_from_kept([kept], rb).data[0]
        results = rank_candidates(q, index, scan_params)
        for k in ks:
            recalls[k].append(recall_at_k(results, gold, k))
            precisions[k].append(precision_at_k(results, gold, k))
        records.append(
            {
                "query_id": qid,
                "gold": sorted(f"{e.category}:{e.surface}" for e in gold),
                "returned": [f"{e.category}:{e.surface}" for e, _ in results[:10]],
                "similarities": [round(s, 4) for _, s in results[:10]],
                "R@10": recall_at_k(results, gold, 10),
                "P@10": precision_at_k(results, gold, 10),
            }
        )
    metrics = {f"R@{k}": float(np.mean(recalls[k])) for k in ks}
    metrics.update({f"P@{k}": float(np.mean(precisions[k])) for k in ks})
    metrics["n_queries"] = len(queries)
    return {"metrics": metrics, "records": records}


def heldout_r_at_1(rb: RetrieverBundle, index: EntityIndex, examples: list[tuple[np.ndarray, Entity]]) -> float:
    from .retriever import embed_queries_from_kept

    hits = 0
    for kept, gold in examples:
        with nm.no_grad():
            q = embed_queries_from_kept([kept], rb).data[0]
        results = rank_candidates(q, index, RetrievalParams(k=1, sim_threshold=-1.0))
        hits += bool(results and results[0][0] == gold)
    return hits / len(examples) if examples else 0.0


def retrieval_queries_from_dialogs(dialogs: list[Dialog], cache: dict) -> list[tuple[np.ndarray, set[Entity], str]]:
    out = []
    for d in dialogs:
        for i, t in enumerate(d.turns):
            if t.mentions:
                out.append((cache[(d.dialog_id, i)].kept_or_full, set(t.mentions), f"{d.dialog_id}:{i}"))
    return out


# ---------------------------------------------------------------------------
# staged in-memory pipeline (acceptance trends / scripts)
# ---------------------------------------------------------------------------


@dataclass
class StagedRuns:
    """Artifacts shared by the trend comparisons for one seed."""

    base: ModelBundle                   # LM + CTC trained, adapter untouched
    pretrained: ModelBundle             # base + adapter pretraining
    asr_cache_train: list[EncodedUtterance]
    asr_cache_eval: list[EncodedUtterance]
    train_dialog_cache: dict
    eval_dialog_cache: dict
    heldout_dialog_cache: dict
    logs: dict[str, list] = field(default_factory=dict)


def run_base_stages(cfg: RunConfig, corpus: Corpus, seed: int) -> StagedRuns:
    mc = build_model_config(cfg, corpus.vocab)
    bundle = build_bundle(mc, seed=seed)
    logs = {}
    steps, batch, lr = cfg.training.resolve("lm")
    logs["lm"] = pretrain_lm(bundle, steps=steps, batch_size=batch, lr=lr, seed=seed)
    steps, batch, lr = cfg.training.resolve("ctc")
    logs["ctc"] = train_ctc(
        bundle, corpus.asr_train, corpus.vocab, corpus.synth,
        steps=steps, batch_size=batch, lr=lr, seed=seed,
    )
    asr_cache_train = encode_asr_cache(corpus, "asr_train", corpus.asr_train, bundle)
    asr_cache_eval = encode_asr_cache(corpus, "asr_eval", corpus.asr_eval, bundle)
    pretrained = clone_bundle(bundle)
    steps, batch, lr = cfg.training.resolve("adapter")
    logs["adapter"] = pretrain_adapter(
        pretrained, asr_cache_train, [u.text for u in corpus.asr_train],
        steps=steps, batch_size=batch, lr=lr, seed=seed,
    )
    return StagedRuns(
        base=bundle,
        pretrained=pretrained,
        asr_cache_train=asr_cache_train,
        asr_cache_eval=asr_cache_eval,
        train_dialog_cache=encode_dialog_cache(corpus, corpus.train_dialogs, bundle),
        eval_dialog_cache=encode_dialog_cache(corpus, corpus.eval_dialogs, bundle),
        heldout_dialog_cache=encode_dialog_cache(corpus, corpus.heldout_dialogs, bundle),
        logs=logs,
    )


def finetune_slm(
    cfg: RunConfig,
    corpus: Corpus,
    staged: StagedRuns,
    seed: int,
    adapter_pretrained: bool = True,
    mode: Mode = Mode.SLM,
    retriever: RetrieverBundle | None = None,
    index: EntityIndex | None = None,
    retrieval_params: RetrievalParams | None = None,
) -> tuple[ModelBundle, list]:
    start = staged.pretrained if adapter_pretrained else staged.base
    bundle = clone_bundle(start)
    examples = build_turn_examples(
        corpus.train_dialogs, bundle, staged.train_dialog_cache, mode,
        retriever_bundle=retriever, index=index, retrieval_params=retrieval_params,
    )
    steps, batch, lr = cfg.training.resolve("slm")
    log = train_slm(
        bundle, examples, FreezePolicy(cfg.training.policy), mode,
        steps=steps, batch_size=batch, lr=lr, seed=seed, dropout=cfg.training.dropout,
    )
    return bundle, log


def train_retriever_stage(
    cfg: RunConfig, corpus: Corpus, staged: StagedRuns, slm_bundle: ModelBundle, seed: int
) -> tuple[RetrieverBundle, dict]:
    rb = build_retriever(slm_bundle, d_r=cfg.training.d_r, seed=seed)
    examples = retriever_examples(corpus.train_dialogs, staged.train_dialog_cache)
    steps, batch, lr = cfg.training.resolve("retriever")
    log = train_retriever(
        rb, examples, steps=steps, batch_size=batch, lr=lr,
        temperature=cfg.training.temperature, seed=seed,
    )
    train_index = build_index(corpus.train_entities, rb)
    heldout_examples = retriever_examples(corpus.heldout_dialogs, staged.heldout_dialog_cache)
    r1 = heldout_r_at_1(rb, train_index, heldout_examples)
    return rb, {"log": log, "train_index": train_index, "heldout_r_at_1": r1}


def resolve_retrieval_params(
    cfg: RunConfig, rb: RetrieverBundle, index: EntityIndex, sample_kept: list[np.ndarray]
) -> RetrievalParams:
    thr = cfg.retrieval.sim_threshold
    if cfg.retrieval.auto_threshold:
        thr = calibrate_threshold(sample_kept, rb, index, k=cfg.retrieval.k)
    return RetrievalParams(k=cfg.retrieval.k, sim_threshold=thr)
