"""Deterministic synthetic stand-ins for speech audio, entity catalogs, and
multi-turn task dialogs.

Every generator is a pure function of its seed: symbols map to fixed random
unit prototype vectors, utterances expand each symbol into a few noisy
copies of its prototype, and dialogs are templated slot-filling turns over
hotel / restaurant / train domains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Reserved control tokens. <blank> is pinned to the LAST vocab index so the
# CTC output layer can treat the full vocab as "V symbols + blank at V".
PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
ASR_TAG, DST_TAG, ENT_TAG, HIST_TAG = "[ASR]", "[DST]", "[ENT]", "[HIST]"
SEP, EQ, SEMI, COLON = "|", "=", ";", ":"
BLANK = "<blank>"

_SPECIALS = [PAD, BOS, EOS, ASR_TAG, DST_TAG, ENT_TAG, HIST_TAG, SEP, EQ, SEMI, COLON]

DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]
TIMES = ["morning", "noon", "afternoon", "evening", "night", "dawn", "dusk", "midnight"]

COMMON_WORDS = sorted(
    set(
        """
        a about after again all also and another any are around as ask at away
        back bad be because bed best better big book but by call called can car
        change cheap city close cold come could day do does down early eat end
        evening family far fast find fine first food for four free from get go
        going good great guest have he hello help her here him his home hotel
        hour house how i if in is it just know last late leave like little long
        look looking make many may me meal more morning most much my near need
        new next nice night no north not now of off okay old on one only open
        or other our out over park place please price quiet ride right room
        say see she short should so some sounds south stay station stop sure
        table take thank thanks that the then there they this three ticket time
        to today tomorrow town train travel trip two up us very visit want warm
        was we week welcome well west what when where which who will with would
        yes you your
        """.split()
        + DAYS
        + TIMES
        + ["restaurant", "reserve", "sharp", "dinner", "lunch", "seat", "cab"]
    )
)

# Entity-name syllables: CVC shapes with x/z codas so they cannot collide
# with the common-word list. Entity surfaces are 2-3 syllable sequences.
_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]
ENTITY_SYLLABLES = [c + v + coda for coda in ("x", "z") for c in _ONSETS for v in _VOWELS][:48]

ENTITY_CATEGORIES = ("hotel", "restaurant", "city")

SCHEMA = ["day", "hotel-name", "restaurant-name", "time", "train-destination"]
_CATEGORY_SLOT = {"hotel": "hotel-name", "restaurant": "restaurant-name", "city": "train-destination"}


class Vocab:
    """Closed symbol inventory with reserved control tokens.

    Prototype vectors (one random unit vector per token) are fixed by
    `proto_seed`, independent of any per-utterance noise seed.
    """

    def __init__(self, tokens: list[str], proto_seed: int = 0):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab tokens must be unique")
        if tokens[-1] != BLANK:
            raise ValueError("vocab must end with the blank token")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}
        self.proto_seed = int(proto_seed)
        self._protos: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def bos_id(self):
        return self.index[BOS]

    @property
    def eos_id(self):
        return self.index[EOS]

    @property
    def blank_id(self):
        return self.index[BLANK]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as exc:
            raise ValueError(f"unknown token {exc.args[0]!r}") from exc

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def prototypes(self, frame_dim: int) -> np.ndarray:
        """Unit prototype vectors, one row per token, fixed by proto_seed."""
        if frame_dim not in self._protos:
            rng = np.random.default_rng((self.proto_seed, frame_dim))
            m = rng.normal(size=(len(self.tokens), frame_dim))
            m /= np.linalg.norm(m, axis=1, keepdims=True)
            self._protos[frame_dim] = m.astype(np.float32)
        return self._protos[frame_dim]

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "proto_seed": self.proto_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["tokens"], d["proto_seed"])


def build_vocab(proto_seed: int = 0) -> Vocab:
    """Specials + slot names + common words + entity syllables + blank.

    Slot names like "day" double as ordinary words; duplicates collapse to
    a single token id.
    """
    tokens = list(_SPECIALS) + sorted(SCHEMA) + COMMON_WORDS + ENTITY_SYLLABLES
    tokens = list(dict.fromkeys(tokens)) + [BLANK]
    return Vocab(tokens, proto_seed=proto_seed)


@dataclass
class SynthParams:
    """Controls pseudo-speech synthesis. `seed` varies per utterance."""

    frame_dim: int = 16
    dup_min: int = 2
    dup_max: int = 5
    noise_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.dup_min <= self.dup_max):
            raise ValueError(f"need 1 <= dup_min <= dup_max, got [{self.dup_min}, {self.dup_max}]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.frame_dim < 4:
            raise ValueError("frame_dim must be >= 4")

    def with_seed(self, seed: int) -> "SynthParams":
        return SynthParams(self.frame_dim, self.dup_min, self.dup_max, self.noise_sigma, int(seed))


def synth_utterance(token_ids, vocab: Vocab, params: SynthParams) -> np.ndarray:
    """Expand each symbol into Uniform[dup_min, dup_max] noisy prototype frames.

    Returns a [T, frame_dim] float32 array, bitwise reproducible from
    (token_ids, vocab, params).
    """
    protos = vocab.prototypes(params.frame_dim)
    for t in token_ids:
        if not 0 <= int(t) < len(vocab):
            raise ValueError(f"token id {t} outside vocab of size {len(vocab)}")
    rng = np.random.default_rng((params.seed, 0xA5))
    chunks = []
    for t in token_ids:
        n = int(rng.integers(params.dup_min, params.dup_max + 1))
        noise = rng.normal(0.0, params.noise_sigma, size=(n, params.frame_dim))
        chunks.append(protos[int(t)][None, :] + noise)
    if not chunks:
        return np.zeros((0, params.frame_dim), dtype=np.float32)
    return np.concatenate(chunks, axis=0).astype(np.float32)


@dataclass(frozen=True)
class Entity:
    category: str
    surface: str

    def __post_init__(self):
        if self.category not in ENTITY_CATEGORIES:
            raise ValueError(f"unknown entity category {self.category!r}")
        if not self.surface:
            raise ValueError("entity surface must be non-empty")


def gen_entity_catalog(n_train: int, n_eval: int, seed: int) -> tuple[list[Entity], list[Entity]]:
    """Two catalogs with disjoint surfaces and roughly balanced categories."""
    if n_train < 1 or n_eval < 1:
        raise ValueError("catalog sizes must be >= 1")
    n_syll = len(ENTITY_SYLLABLES)
    namespace = n_syll**2 + n_syll**3
    if n_train + n_eval > namespace // 2:
        raise ValueError(
            f"requested {n_train + n_eval} entities exceeds generator namespace ({namespace})"
        )
    rng = np.random.default_rng((seed, 0xE17))
    seen: set[str] = set()

    def draw_surface() -> str:
        while True:
            k = 2 if rng.random() < 0.5 else 3
            surf = " ".join(ENTITY_SYLLABLES[int(i)] for i in rng.integers(0, n_syll, size=k))
            if surf not in seen:
                seen.add(surf)
                return surf

    def draw_split(n: int) -> list[Entity]:
        return [Entity(ENTITY_CATEGORIES[i % 3], draw_surface()) for i in range(n)]

    return draw_split(n_train), draw_split(n_eval)


@dataclass
class Turn:
    user_text: str
    reference_state: dict[str, str]
    frame_seed: int = 0
    mentions: list[Entity] = field(default_factory=list)


@dataclass
class Dialog:
    dialog_id: str
    turns: list[Turn]
    domain_schema: list[str] = field(default_factory=lambda: list(SCHEMA))


@dataclass
class Utterance:
    text: str
    frame_seed: int = 0


_ENTITY_TEMPLATES = {
    "hotel-name": [
        "book hotel {e}",
        "i need a hotel called {e}",
        "find me the hotel {e}",
        "reserve hotel {e} please",
    ],
    "restaurant-name": [
        "find restaurant {e}",
        "book a table at {e}",
        "i want to eat at {e}",
        "reserve the restaurant {e} please",
    ],
    "train-destination": [
        "train to {e}",
        "i need a train to {e}",
        "going by train to {e}",
        "book a train ticket to {e} please",
    ],
}

_VALUE_TEMPLATES = {
    "day": ["we travel on {v}", "make it {v}", "change the day to {v}"],
    "time": ["at {v} please", "around {v}", "make it {v} sharp"],
}

_CHITCHAT = ["hello there", "thank you so much", "that sounds good", "okay great thanks"]

_VALUE_POOL = {"day": DAYS, "time": TIMES}


def gen_dialog(catalog: list[Entity], schema: list[str], n_turns: int, seed: int, dialog_id: str = "d0") -> Dialog:
    """Templated multi-turn dialog whose states accumulate slot assignments."""
    if not schema:
        raise ValueError("schema must be non-empty")
    if not catalog:
        raise ValueError("catalog must be non-empty")
    rng = np.random.default_rng((seed, 0xD1A))
    entity_slots = [s for s in schema if s in _ENTITY_TEMPLATES]
    value_slots = [s for s in schema if s in _VALUE_TEMPLATES]
    by_cat: dict[str, list[Entity]] = {}
    for e in catalog:
        by_cat.setdefault(e.category, []).append(e)
    usable_entity_slots = [
        s for s in entity_slots
        if any(_CATEGORY_SLOT[c] == s and by_cat.get(c) for c in by_cat)
    ]

    state: dict[str, str] = {}
    turns: list[Turn] = []
    for _ in range(n_turns):
        roll = rng.random()
        mentions: list[Entity] = []
        if roll < 0.1 or not usable_entity_slots:
            text = _CHITCHAT[int(rng.integers(len(_CHITCHAT)))]
        elif roll < 0.8:
            slot = usable_entity_slots[int(rng.integers(len(usable_entity_slots)))]
            cat = next(c for c, s in _CATEGORY_SLOT.items() if s == slot)
            ent = by_cat[cat][int(rng.integers(len(by_cat[cat])))]
            tpl = _ENTITY_TEMPLATES[slot][int(rng.integers(len(_ENTITY_TEMPLATES[slot])))]
            text = tpl.format(e=ent.surface)
            state[slot] = ent.surface
            mentions.append(ent)
            if value_slots and rng.random() < 0.35:
                vslot = value_slots[int(rng.integers(len(value_slots)))]
                val = _VALUE_POOL[vslot][int(rng.integers(len(_VALUE_POOL[vslot])))]
                text += f" on {val}" if vslot == "day" else f" at {val}"
                state[vslot] = val
        else:
            vslot = value_slots[int(rng.integers(len(value_slots)))]
            val = _VALUE_POOL[vslot][int(rng.integers(len(_VALUE_POOL[vslot])))]
            tpl = _VALUE_TEMPLATES[vslot][int(rng.integers(len(_VALUE_TEMPLATES[vslot])))]
            text = tpl.format(v=val)
            state[vslot] = val
        turns.append(
            Turn(
                user_text=text,
                reference_state=dict(sorted(state.items())),
                frame_seed=int(rng.integers(2**62)),
                mentions=mentions,
            )
        )
    return Dialog(dialog_id=dialog_id, turns=turns, domain_schema=list(schema))


def gen_dialog_corpus(
    catalog: list[Entity],
    n_dialogs: int,
    seed: int,
    id_prefix: str = "d",
    turns_min: int = 2,
    turns_max: int = 4,
    schema: list[str] | None = None,
) -> list[Dialog]:
    rng = np.random.default_rng((seed, 0xC0))
    out = []
    for i in range(n_dialogs):
        n_turns = int(rng.integers(turns_min, turns_max + 1))
        out.append(
            gen_dialog(catalog, schema or SCHEMA, n_turns, seed=int(rng.integers(2**62)), dialog_id=f"{id_prefix}{i:04d}")
        )
    return out


def gen_asr_corpus(vocab: Vocab, n: int, seed: int, len_min: int = 3, len_max: int = 9, syllable_frac: float = 0.35) -> list[Utterance]:
    """Random content-word sentences; a fixed fraction of entity syllables.

    Stands in for generic ASR training audio, so it covers the whole symbol
    inventory rather than any task-specific entity list.
    """
    rng = np.random.default_rng((seed, 0xA52))
    words = [w for w in COMMON_WORDS]
    out = []
    for _ in range(n):
        length = int(rng.integers(len_min, len_max + 1))
        toks = [
            ENTITY_SYLLABLES[int(rng.integers(len(ENTITY_SYLLABLES)))]
            if rng.random() < syllable_frac
            else words[int(rng.integers(len(words)))]
            for _ in range(length)
        ]
        out.append(Utterance(text=" ".join(toks), frame_seed=int(rng.integers(2**62))))
    return out


def turn_frames(turn: Turn, vocab: Vocab, params: SynthParams) -> np.ndarray:
    return synth_utterance(vocab.encode(turn.user_text), vocab, params.with_seed(turn.frame_seed))


def utterance_frames(utt: Utterance, vocab: Vocab, params: SynthParams) -> np.ndarray:
    return synth_utterance(vocab.encode(utt.text), vocab, params.with_seed(utt.frame_seed))
