"""Synthetic data generators: determinism, disjointness, dialog contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slmf.speechsim import (
    BLANK,
    COMMON_WORDS,
    ENTITY_SYLLABLES,
    SCHEMA,
    Entity,
    SynthParams,
    Vocab,
    build_vocab,
    gen_asr_corpus,
    gen_dialog,
    gen_dialog_corpus,
    gen_entity_catalog,
    synth_utterance,
)


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(proto_seed=3)


def test_vocab_blank_is_last(vocab):
    assert vocab.tokens[-1] == BLANK
    assert vocab.blank_id == len(vocab) - 1


def test_vocab_rejects_duplicates():
    with pytest.raises(ValueError, match="unique"):
        Vocab(["a", "a", BLANK])


def test_entity_syllables_do_not_collide_with_words():
    assert not set(ENTITY_SYLLABLES) & set(COMMON_WORDS)


def test_vocab_encode_decode_roundtrip(vocab):
    text = "book hotel bax kex on monday"
    assert vocab.decode(vocab.encode(text)) == text


def test_vocab_unknown_token(vocab):
    with pytest.raises(ValueError, match="unknown token"):
        vocab.encode("book qqqq")


def test_prototypes_unit_norm_and_cached(vocab):
    protos = vocab.prototypes(16)
    assert protos.shape == (len(vocab), 16)
    assert np.allclose(np.linalg.norm(protos, axis=1), 1.0, atol=1e-5)
    assert vocab.prototypes(16) is protos


def test_synth_empty_text(vocab):
    frames = synth_utterance([], vocab, SynthParams(seed=1))
    assert frames.shape == (0, 16)


def test_synth_no_noise_single_dup_matches_prototypes(vocab):
    params = SynthParams(dup_min=1, dup_max=1, noise_sigma=0.0, seed=5)
    ids = vocab.encode("book hotel")
    frames = synth_utterance(ids, vocab, params)
    assert frames.shape == (2, params.frame_dim)
    protos = vocab.prototypes(params.frame_dim)
    assert np.array_equal(frames, protos[ids])


def test_synth_bitwise_reproducible(vocab):
    params = SynthParams(seed=11)
    ids = vocab.encode("find restaurant dax on friday")
    a = synth_utterance(ids, vocab, params)
    b = synth_utterance(ids, vocab, params)
    assert a.tobytes() == b.tobytes()


def test_synth_unknown_id(vocab):
    with pytest.raises(ValueError, match="outside vocab"):
        synth_utterance([len(vocab) + 5], vocab, SynthParams(seed=0))


def test_synth_params_validation():
    with pytest.raises(ValueError):
        SynthParams(dup_min=3, dup_max=2)
    with pytest.raises(ValueError):
        SynthParams(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        SynthParams(frame_dim=2)


def test_synth_dup_range(vocab):
    params = SynthParams(dup_min=2, dup_max=5, seed=3)
    ids = vocab.encode("book a table at bax")
    frames = synth_utterance(ids, vocab, params)
    assert 2 * len(ids) <= frames.shape[0] <= 5 * len(ids)


# ---------------------------------------------------------------------------
# entity catalogs
# ---------------------------------------------------------------------------


def test_catalog_disjoint_surfaces():
    train, eval_ = gen_entity_catalog(250, 700, seed=0)
    assert len(train) == 250 and len(eval_) == 700
    assert not ({e.surface for e in train} & {e.surface for e in eval_})


def test_catalog_roughly_balanced_categories():
    train, _ = gen_entity_catalog(90, 10, seed=1)
    counts = {}
    for e in train:
        counts[e.category] = counts.get(e.category, 0) + 1
    assert set(counts) == {"hotel", "restaurant", "city"}
    assert max(counts.values()) - min(counts.values()) <= 1


def test_catalog_same_seed_identical():
    a = gen_entity_catalog(30, 40, seed=9)
    b = gen_entity_catalog(30, 40, seed=9)
    assert a == b


def test_catalog_namespace_exceeded():
    with pytest.raises(ValueError, match="namespace"):
        gen_entity_catalog(10**6, 10**6, seed=0)


def test_catalog_size_validation():
    with pytest.raises(ValueError):
        gen_entity_catalog(0, 5, seed=0)


def test_entity_validation():
    with pytest.raises(ValueError):
        Entity("castle", "bax")
    with pytest.raises(ValueError):
        Entity("hotel", "")


# ---------------------------------------------------------------------------
# dialogs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def catalog():
    train, _ = gen_entity_catalog(30, 10, seed=2)
    return train


def test_dialog_states_are_cumulative(catalog):
    d = gen_dialog(catalog, SCHEMA, n_turns=6, seed=4)
    assert len(d.turns) == 6
    prev: dict = {}
    for t in d.turns:
        # cumulative: every previously set slot is still present
        assert set(prev) <= set(t.reference_state)
        assert all(v for v in t.reference_state.values())
        assert set(t.reference_state) <= set(SCHEMA)
        prev = t.reference_state


def test_dialog_mentions_match_state(catalog, vocab):
    d = gen_dialog(catalog, SCHEMA, n_turns=5, seed=8)
    for t in d.turns:
        vocab.encode(t.user_text)  # every turn must be tokenizable
        for m in t.mentions:
            assert m.surface in t.user_text
            assert m.surface in t.reference_state.values()


def test_dialog_same_seed_identical(catalog):
    a = gen_dialog(catalog, SCHEMA, 4, seed=5, dialog_id="x")
    b = gen_dialog(catalog, SCHEMA, 4, seed=5, dialog_id="x")
    assert a == b


def test_dialog_requires_schema_and_catalog(catalog):
    with pytest.raises(ValueError):
        gen_dialog(catalog, [], 3, seed=0)
    with pytest.raises(ValueError):
        gen_dialog([], SCHEMA, 3, seed=0)


def test_single_turn_template_state():
    ents = [Entity("hotel", "bax kex")]
    found = False
    for seed in range(40):
        d = gen_dialog(ents, SCHEMA, 1, seed=seed)
        t = d.turns[0]
        if t.mentions:
            assert t.reference_state["hotel-name"] == "bax kex"
            found = True
    assert found


def test_corpus_eval_turns_mention_eval_entities():
    """On a 200-dialog seeded corpus, >= 30% of turns mention an entity
    from the generating catalog."""
    _, eval_ents = gen_entity_catalog(50, 120, seed=3)
    dialogs = gen_dialog_corpus(eval_ents, 200, seed=17, id_prefix="ev")
    surfaces = {e.surface for e in eval_ents}
    turns = [t for d in dialogs for t in d.turns]
    frac = sum(1 for t in turns if any(m.surface in surfaces for m in t.mentions)) / len(turns)
    assert frac >= 0.30


def test_asr_corpus_deterministic_and_tokenizable(vocab):
    a = gen_asr_corpus(vocab, 50, seed=6)
    b = gen_asr_corpus(vocab, 50, seed=6)
    assert a == b
    for u in a:
        ids = vocab.encode(u.text)
        assert 3 <= len(ids) <= 9


@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
@settings(max_examples=15, deadline=None)
def test_dialog_generator_pure_function_of_seed(seed, n_turns):
    ents = [Entity("hotel", "bax"), Entity("city", "kex dax"), Entity("restaurant", "fex")]
    assert gen_dialog(ents, SCHEMA, n_turns, seed=seed) == gen_dialog(ents, SCHEMA, n_turns, seed=seed)
