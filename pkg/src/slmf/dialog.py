"""Auto-regressive multi-turn inference and the evaluation metrics
(joint goal accuracy, slot error rate, word error rate).

The inference path consumes an InferenceDialog view that carries frames
only: reference transcripts and states are structurally out of reach, and
each turn's history is the model's own predicted transcript.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .model import ModelBundle, lm_generate
from .pipeline import EncodedUtterance, Mode, compose_input, encode_utterance, parse_output
from .retriever import EntityIndex, RetrievalParams, RetrieverBundle, rank_candidates
from .speechsim import Dialog, SynthParams, Vocab, turn_frames


@dataclass
class TurnPrediction:
    turn_index: int                 # 1-based
    asr_hypothesis: str
    predicted_state: dict[str, str]
    raw_output: str
    parse_warnings: int
    history_text: str = ""          # text history this turn was conditioned on


@dataclass
class EvalReport:
    jga: float
    wer: float
    ser: float
    per_slot_error: dict[str, float]
    n_turns: int


@dataclass
class InferenceDialog:
    """Reference-free view: dialog id and per-turn frames, nothing else."""

    dialog_id: str
    frames: list[np.ndarray] = field(default_factory=list)


def inference_view(dialog: Dialog, vocab: Vocab, params: SynthParams) -> InferenceDialog:
    return InferenceDialog(
        dialog_id=dialog.dialog_id,
        frames=[turn_frames(t, vocab, params) for t in dialog.turns],
    )


def run_dialog(
    bundle: ModelBundle,
    dialog: InferenceDialog,
    mode: Mode = Mode.SLM,
    retriever: RetrieverBundle | None = None,
    index: EntityIndex | None = None,
    retrieval_params: RetrievalParams | None = None,
    max_len: int = 64,
    speech_cache: dict[int, EncodedUtterance] | None = None,
) -> list[TurnPrediction]:
    """Decode a dialog turn by turn; each turn's predicted transcript is
    appended to the history for the next turn."""
    mode = Mode(mode)
    if mode is Mode.RESLM and (retriever is None or index is None):
        raise ValueError("ReSLM inference requires a retriever and an entity index")
    from .retriever import embed_queries_from_kept

    history: list[str] = []
    preds: list[TurnPrediction] = []
    for i, frames in enumerate(dialog.frames):
        enc = speech_cache[i] if speech_cache else encode_utterance(frames, bundle)
        retrieved = None
        if mode is Mode.RESLM:
            with nm.no_grad():
                q = embed_queries_from_kept([enc.kept_or_full], retriever).data[0]
            retrieved = [e for e, _ in rank_candidates(q, index, retrieval_params or RetrievalParams())]
        history_text = " | ".join(history)
        comp = compose_input(None, history_text, retrieved, bundle, kept=enc.kept)
        out_ids = lm_generate(comp.combined, bundle, max_len=max_len)
        raw = bundle.config.vocab.decode(out_ids)
        transcript, state, warnings = parse_output(raw)
        preds.append(
            TurnPrediction(
                turn_index=i + 1,
                asr_hypothesis=transcript,
                predicted_state=state,
                raw_output=raw,
                parse_warnings=warnings,
                history_text=history_text,
            )
        )
        history.append(transcript)
    return preds


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def canonical_state(state: dict[str, str]) -> dict[str, str]:
    """Lowercase + whitespace-normalize, sorted by slot name."""
    out = {}
    for k in sorted(state):
        key = " ".join(str(k).lower().split())
        out[key] = " ".join(str(state[k]).lower().split())
    return out


def jga(predictions: list[dict], references: list[dict]) -> float:
    """Fraction of turns whose predicted state exactly equals the reference."""
    if len(predictions) != len(references):
        raise ValueError(f"turn count mismatch: {len(predictions)} vs {len(references)}")
    if not references:
        raise ValueError("jga: no turns")
    hits = sum(
        canonical_state(p) == canonical_state(r) for p, r in zip(predictions, references)
    )
    return hits / len(references)


def _slot_errors(pred: dict, ref: dict) -> list[tuple[str, str]]:
    """(slot, kind) error events for one turn; kind in {sub, del, ins}."""
    p, r = canonical_state(pred), canonical_state(ref)
    events = []
    for slot, val in r.items():
        if slot not in p:
            events.append((slot, "del"))
        elif p[slot] != val:
            events.append((slot, "sub"))
    for slot in p:
        if slot not in r:
            events.append((slot, "ins"))
    return events


def slot_error_rate(predictions: list[dict], references: list[dict]) -> float:
    """(substitutions + insertions + deletions) / total reference slots.

    Returns NaN when the references contain no slots at all.
    """
    if len(predictions) != len(references):
        raise ValueError(f"turn count mismatch: {len(predictions)} vs {len(references)}")
    total_ref = sum(len(canonical_state(r)) for r in references)
    errors = sum(len(_slot_errors(p, r)) for p, r in zip(predictions, references))
    if total_ref == 0:
        return float("nan")
    return errors / total_ref


def slot_error_breakdown(predictions: list[dict], references: list[dict]) -> dict[str, float]:
    """Per-slot error rate: events on that slot / reference count of it.

    Insertions attribute to the inserted slot name; a slot with no
    references counts errors against a denominator of 1 to stay finite.
    """
    ref_counts: dict[str, int] = {}
    err_counts: dict[str, int] = {}
    for p, r in zip(predictions, references):
        for slot in canonical_state(r):
            ref_counts[slot] = ref_counts.get(slot, 0) + 1
        for slot, _ in _slot_errors(p, r):
            err_counts[slot] = err_counts.get(slot, 0) + 1
    return {
        slot: err_counts.get(slot, 0) / max(ref_counts.get(slot, 0), 1)
        for slot in sorted(set(ref_counts) | set(err_counts))
    }


def word_edit_distance(hyp_words: list[str], ref_words: list[str]) -> int:
    n, m = len(ref_words), len(hyp_words)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref_words[i - 1] != hyp_words[j - 1])
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return prev[m]


def wer(hypothesis: str, reference: str) -> float:
    """Word-level edit distance over reference length.

    Empty reference: 0.0 against an empty hypothesis, otherwise the
    insertion count itself (denominator 1).
    """
    hyp, ref = hypothesis.split(), reference.split()
    if not ref:
        return float(len(hyp))
    return word_edit_distance(hyp, ref) / len(ref)


def corpus_wer(pairs: list[tuple[str, str]]) -> float:
    """Total edit distance / total reference words over (hyp, ref) pairs."""
    total_dist = sum(word_edit_distance(h.split(), r.split()) for h, r in pairs)
    total_ref = sum(len(r.split()) for _, r in pairs)
    if total_ref == 0:
        return float(total_dist)
    return total_dist / total_ref


# ---------------------------------------------------------------------------
# corpus evaluation
# ---------------------------------------------------------------------------


def evaluate_corpus(
    bundle: ModelBundle,
    dialogs: list[Dialog],
    mode: Mode,
    vocab: Vocab,
    params: SynthParams,
    retriever: RetrieverBundle | None = None,
    index: EntityIndex | None = None,
    retrieval_params: RetrievalParams | None = None,
    max_len: int = 64,
    trace_path=None,
) -> EvalReport:
    """Aggregate JGA / WER / SER over all turns of all dialogs, plus a
    per-slot error breakdown; optionally writes a per-turn trace file."""
    if not dialogs:
        raise ValueError("evaluate_corpus: empty corpus")
    pred_states, ref_states = [], []
    wer_pairs = []
    trace_records = []
    for d in dialogs:
        view = inference_view(d, vocab, params)
        preds = run_dialog(
            bundle, view, mode, retriever=retriever, index=index,
            retrieval_params=retrieval_params, max_len=max_len,
        )
        for pred, turn in zip(preds, d.turns):
            pred_states.append(pred.predicted_state)
            ref_states.append(turn.reference_state)
            wer_pairs.append((pred.asr_hypothesis, turn.user_text))
            trace_records.append(
                {
                    "dialog_id": d.dialog_id,
                    "turn": pred.turn_index,
                    "hypothesis": pred.asr_hypothesis,
                    "reference": turn.user_text,
                    "predicted_state": canonical_state(pred.predicted_state),
                    "reference_state": canonical_state(turn.reference_state),
                    "match_flag": canonical_state(pred.predicted_state) == canonical_state(turn.reference_state),
                }
            )
    if trace_path is not None:
        with open(trace_path, "w") as fh:
            for rec in trace_records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return EvalReport(
        jga=jga(pred_states, ref_states),
        wer=corpus_wer(wer_pairs),
        ser=slot_error_rate(pred_states, ref_states),
        per_slot_error=slot_error_breakdown(pred_states, ref_states),
        n_turns=len(ref_states),
    )
