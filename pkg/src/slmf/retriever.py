"""Speech-to-entity retrieval: a dual encoder over (speech query, entity
candidate) pairs scored by cosine similarity, trained with in-batch
negatives, served from an exact full-scan index.

Both towers start from a trained joint-model checkpoint (the query tower
copies the adapter, the candidate tower copies the text embedding+encoder)
and add fresh projection heads; the speech encoder stays frozen.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .checkpoint import config_digest, load_checkpoint, save_checkpoint, serialize_group
from .ctc import blank_filter
from .model import ModelBundle, ModelConfig, adapter_forward_batch, lm_encode_batch, speech_encode
from .numerics import ParamGroup, Tensor
from .speechsim import Entity


@dataclass
class RetrievalParams:
    k: int = 10
    sim_threshold: float = -1.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not -1.0 <= self.sim_threshold <= 1.0:
            raise ValueError("sim_threshold must lie in [-1, 1]")


@dataclass
class EntityIndex:
    entities: list[Entity]
    embeddings: np.ndarray  # [N, d_r], unit rows
    built_from: str         # weights digest of the bundle that embedded them


class IndexDigestError(ValueError):
    pass


@dataclass
class RetrieverBundle:
    """Query tower: speech encoder -> blank filter -> adapter copy -> pool
    -> projection. Candidate tower: embedding+encoder copies -> pool ->
    projection. Both emit unit vectors of width d_r."""

    config: ModelConfig
    d_r: int
    groups: dict[str, ParamGroup] = field(default_factory=dict)

    @property
    def speech_bundle(self) -> ModelBundle:
        return ModelBundle(config=self.config, groups={"speech_encoder": self.groups["speech_encoder"]})

    def group_list(self) -> list[ParamGroup]:
        return [self.groups[n] for n in ("speech_encoder", "retriever_query", "retriever_candidate")]

    def trainable_groups(self) -> list[ParamGroup]:
        return [self.groups["retriever_query"], self.groups["retriever_candidate"]]

    def weights_digest(self) -> str:
        h = hashlib.sha256(config_digest({"model": self.config.to_dict(), "d_r": self.d_r}).encode())
        for g in self.group_list():
            h.update(serialize_group(g))
        return h.hexdigest()


def _copy_group(name: str, src: ParamGroup, frozen: bool) -> ParamGroup:
    g = ParamGroup(name)
    for pname, t in src.tensors.items():
        g.add(pname, Tensor(t.data.copy(), requires_grad=True))
    g.set_frozen(frozen)
    return g


def build_retriever(base: ModelBundle, d_r: int = 64, seed: int = 0) -> RetrieverBundle:
    """Initialize both towers from a trained joint-model bundle."""
    rng = np.random.default_rng((seed, 21))
    groups = {"speech_encoder": _copy_group("speech_encoder", base.groups["speech_encoder"], frozen=True)}

    q = _copy_group("retriever_query", base.groups["adapter"], frozen=False)
    q.add("proj_w", nm.init_param(rng, (base.config.d_model, d_r)))
    groups["retriever_query"] = q

    c = ParamGroup("retriever_candidate")
    c.add("tok", Tensor(base.groups["lm_embedding"].tensors["tok"].data.copy(), requires_grad=True))
    for pname, t in base.groups["lm_encoder"].tensors.items():
        c.add(pname, Tensor(t.data.copy(), requires_grad=True))
    c.add("proj_w", nm.init_param(rng, (base.config.d_model, d_r)))
    groups["retriever_candidate"] = c

    return RetrieverBundle(config=base.config, d_r=d_r, groups=groups)


# ---------------------------------------------------------------------------
# tower forwards
# ---------------------------------------------------------------------------


def _mean_pool_matrix(lengths) -> np.ndarray:
    lengths = np.asarray(lengths)
    k_max = int(lengths.max())
    w = np.zeros((len(lengths), 1, k_max), dtype=np.float32)
    for b, l in enumerate(lengths):
        w[b, 0, : int(l)] = 1.0 / int(l)
    return w


def embed_queries_from_kept(kept_list: list[np.ndarray], rb: RetrieverBundle) -> Tensor:
    """Batch of pre-filtered speech encodings -> unit query vectors [B, d_r]."""
    lengths = [max(1, k.shape[0]) for k in kept_list]
    k_max = max(lengths)
    d = rb.config.d_speech
    batch = np.zeros((len(kept_list), k_max, d), dtype=np.float32)
    for b, k in enumerate(kept_list):
        if k.shape[0]:
            batch[b, : k.shape[0]] = k
    q = rb.groups["retriever_query"]
    x = adapter_forward_batch(Tensor(batch), lengths, rb.speech_bundle, tensors=q.tensors)
    pooled = nm.reshape(nm.matmul(Tensor(_mean_pool_matrix(lengths)), x), (len(kept_list), rb.config.d_model))
    return nm.l2_normalize(nm.matmul(pooled, q.tensors["proj_w"]), axis=-1)


def query_kept_encodings(frames: np.ndarray, rb: RetrieverBundle) -> np.ndarray:
    """Speech front end for the query tower (frozen): encode + blank-filter.

    Falls back to the unfiltered encodings when the filter keeps nothing.
    """
    with nm.no_grad():
        enc, post = speech_encode(frames, rb.speech_bundle)
        res = blank_filter(enc, post)
        kept = res.kept_encodings.data
        return kept if kept.shape[0] else enc.data


def embed_query(frames: np.ndarray, rb: RetrieverBundle) -> Tensor:
    """Single utterance -> unit query vector [d_r]."""
    kept = query_kept_encodings(frames, rb)
    return nm.take_rows(embed_queries_from_kept([kept], rb), np.asarray(0))


def candidate_text(entity: Entity) -> str:
    return f"{entity.category} : {entity.surface}"


def embed_candidates(entities: list[Entity], rb: RetrieverBundle) -> Tensor:
    """Entities -> unit candidate vectors [B, d_r]."""
    vocab = rb.config.vocab
    ids = [vocab.encode(candidate_text(e)) for e in entities]
    lengths = [len(i) for i in ids]
    l_max = max(lengths)
    batch = np.full((len(entities), l_max), vocab.pad_id, dtype=np.int64)
    for b, seq in enumerate(ids):
        batch[b, : len(seq)] = seq
    c = rb.groups["retriever_candidate"]
    emb = nm.take_rows(c.tensors["tok"], batch)
    x = lm_encode_batch(emb, lengths, rb.speech_bundle, tensors=c.tensors)
    pooled = nm.reshape(nm.matmul(Tensor(_mean_pool_matrix(lengths)), x), (len(entities), rb.config.d_model))
    return nm.l2_normalize(nm.matmul(pooled, c.tensors["proj_w"]), axis=-1)


def embed_candidate(entity: Entity, rb: RetrieverBundle) -> Tensor:
    return nm.take_rows(embed_candidates([entity], rb), np.asarray(0))


# ---------------------------------------------------------------------------
# loss / index / retrieval
# ---------------------------------------------------------------------------


def in_batch_contrastive_loss(q: Tensor, c: Tensor, temperature: float = 0.05) -> Tensor:
    """Mean over i of -log softmax_j(q_i . c_j / temperature) at j == i."""
    if q.shape != c.shape or q.ndim != 2:
        raise ValueError(f"query/candidate shapes must match as [B, d], got {q.shape} vs {c.shape}")
    for name, t in (("query", q), ("candidate", c)):
        norms = np.linalg.norm(t.data, axis=-1)
        if np.max(np.abs(norms - 1.0)) > 1e-4:
            raise ValueError(f"{name} rows must be unit-norm")
    logits = nm.scale(nm.matmul(q, nm.transpose(c, (1, 0))), 1.0 / temperature)
    return nm.cross_entropy(logits, np.arange(q.shape[0]))


def build_index(entities: list[Entity], rb: RetrieverBundle) -> EntityIndex:
    if not entities:
        raise ValueError("build_index: entity list is empty")
    with nm.no_grad():
        embs = embed_candidates(entities, rb).data.copy()
    return EntityIndex(entities=list(entities), embeddings=embs, built_from=rb.weights_digest())


def retrieve(query_frames: np.ndarray, index: EntityIndex, params: RetrievalParams,
             rb: RetrieverBundle) -> list[tuple[Entity, float]]:
    """Exact scan: cosine-score all candidates, threshold, top-k.

    Ties break lexicographically on entity surface; result may be empty.
    """
    if index.built_from != rb.weights_digest():
        raise IndexDigestError(
            "index was built from a different checkpoint than the serving bundle"
        )
    with nm.no_grad():
        q = embed_query(query_frames, rb).data
    return rank_candidates(q, index, params)


def rank_candidates(q: np.ndarray, index: EntityIndex, params: RetrievalParams) -> list[tuple[Entity, float]]:
    sims = index.embeddings @ q
    keep = [
        (e, float(s)) for e, s in zip(index.entities, sims) if s >= params.sim_threshold
    ]
    keep.sort(key=lambda es: (-es[1], es[0].surface))
    return keep[: params.k]


def calibrate_threshold(kept_list: list[np.ndarray], rb: RetrieverBundle,
                        index: EntityIndex, k: int = 10) -> float:
    """Similarity cutoff such that the median query keeps about k survivors."""
    if not kept_list:
        return -1.0
    kth = []
    with nm.no_grad():
        q = embed_queries_from_kept(kept_list, rb).data
    sims = q @ index.embeddings.T  # [B, N]
    n = index.embeddings.shape[0]
    for row in sims:
        srt = np.sort(row)[::-1]
        kth.append(srt[min(k, n) - 1])
    return float(max(-1.0, np.median(kth) - 1e-6))


def recall_at_k(results, gold: set[Entity], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not gold:
        return 1.0
    top = {e for e, _ in results[:k]}
    return len(top & gold) / len(gold)


def precision_at_k(results, gold: set[Entity], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    top = {e for e, _ in results[:k]}
    return len(top & gold) / k


# ---------------------------------------------------------------------------
# training / persistence
# ---------------------------------------------------------------------------


def train_retriever(
    rb: RetrieverBundle,
    examples: list[tuple[np.ndarray, Entity]],
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-3,
    temperature: float = 0.05,
    seed: int = 0,
) -> list[dict]:
    """Contrastive training on (kept speech encodings, mentioned entity) pairs.

    Batches draw distinct entities so in-batch negatives are never the
    positive in disguise.
    """
    if not examples:
        raise ValueError("train_retriever: no examples")
    by_entity: dict[Entity, list[int]] = {}
    for i, (_, e) in enumerate(examples):
        by_entity.setdefault(e, []).append(i)
    entities = sorted(by_entity, key=lambda e: (e.category, e.surface))
    groups = rb.trainable_groups()
    log = []
    for step in range(steps):
        rng = np.random.default_rng((seed, step, 0xBEEF))
        b = min(batch_size, len(entities))
        ent_idx = rng.choice(len(entities), size=b, replace=False)
        batch = []
        for ei in ent_idx:
            ent = entities[int(ei)]
            ex_i = by_entity[ent][int(rng.integers(len(by_entity[ent])))]
            batch.append((examples[ex_i][0], ent))
        q = embed_queries_from_kept([kept for kept, _ in batch], rb)
        c = embed_candidates([e for _, e in batch], rb)
        loss = in_batch_contrastive_loss(q, c, temperature)
        nm.zero_grad(groups)
        nm.backward(loss)
        nm.adam_step(groups, lr=lr)
        log.append({"step": step, "loss": float(loss.data), "lr": lr})
    return log


def save_retriever(path, rb: RetrieverBundle, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["d_r"] = rb.d_r
    meta["model_config"] = rb.config.to_dict()
    save_checkpoint(path, rb.group_list(), digest=rb.config.digest(), meta=meta)


def load_retriever(path) -> tuple[RetrieverBundle, dict]:
    from .checkpoint import restore_groups

    digest, meta, entries = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["model_config"])
    base_like = ModelBundle(config=config, groups={})
    # rebuild group skeletons with correct shapes, then restore
    from .model import build_bundle

    skeleton = build_bundle(config, seed=0)
    rb = build_retriever(skeleton, d_r=int(meta["d_r"]), seed=0)
    restore_groups(rb.group_list(), entries, meta)
    del base_like
    return rb, meta


def save_index(path, index: EntityIndex) -> None:
    g = ParamGroup("index")
    g.add("embeddings", Tensor(index.embeddings))
    meta = {
        "entities": [[e.category, e.surface] for e in index.entities],
        "built_from": index.built_from,
    }
    save_checkpoint(path, [g], digest=index.built_from, meta=meta, include_optimizer=False)


def load_index(path) -> EntityIndex:
    digest, meta, entries = load_checkpoint(path)
    entities = [Entity(c, s) for c, s in meta["entities"]]
    return EntityIndex(entities=entities, embeddings=entries["index/embeddings"], built_from=meta["built_from"])
