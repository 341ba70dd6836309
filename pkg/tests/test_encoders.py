"""Question encoding, embedding stores and graph-factorization pretraining."""

import numpy as np
import pytest

from tkgqa.autodiff import Tensor
from tkgqa.config import TrainingConfig
from tkgqa.encoders import (
    MAX_INSTANTS_PER_FACT,
    QuestionEncoderParams,
    _init_complex_tables,
    _object_scores,
    build_store,
    build_token_vocab,
    completion_hits_at_1,
    encode_token_ids,
    expand_fact_instants,
    init_random,
    load_store,
    pretrain_tables,
    pretrain_tcomplex,
    save_store,
)
from tkgqa.errors import CheckpointError, ConfigError, TrainingDiverged
from tkgqa.kg import (
    Answer,
    QuestionInstance,
    QuestionSubgraph,
    TemporalFact,
    UNK_NAME,
    build_background_kg,
    new_vocabularies,
)


def small_kg(n_positions=2, holders_per_position=3, tenure=4, start=1950):
    """A miniature office world whose graph has learnable structure."""
    entities, relations = new_vocabularies()
    questions = []
    year = start
    for p in range(n_positions):
        office = entities.intern(f"office_{p}")
        facts = []
        year = start + 2 * p
        for h in range(holders_per_position):
            person = entities.intern(f"p{p}_{h}")
            facts.append(
                TemporalFact(person, relations.intern("held"), office, year, year + tenure - 1)
            )
            year += tenure
        questions.append(
            QuestionInstance(
                qid=f"q{p}",
                text=f"who held office_{p} in {start}?",
                category="explicit",
                subgraph=QuestionSubgraph(facts),
                answers=frozenset({Answer("entity", facts[0].subject)}),
            )
        )
    kg = build_background_kg(questions, entities, relations)
    return kg, questions


# ---------------------------------------------------------------------------
# Token vocabulary and question encoder


def test_token_vocab_reserves_unknown_and_orders_by_first_seen():
    _, questions = small_kg()
    vocab = build_token_vocab(questions)
    assert vocab.names[0] == UNK_NAME
    assert vocab.id_of("who") == 1


def test_unseen_tokens_collapse_to_unknown():
    _, questions = small_kg()
    vocab = build_token_vocab(questions)
    ids = encode_token_ids(("who", "banana"), vocab)
    assert ids[0] == vocab.id_of("who")
    assert ids[1] == vocab.id_of(UNK_NAME)


def test_encoder_init_is_seed_deterministic():
    a = QuestionEncoderParams.init(11, 8, np.random.default_rng(3))
    b = QuestionEncoderParams.init(11, 8, np.random.default_rng(3))
    assert np.array_equal(a.token_embeddings.data, b.token_embeddings.data)
    assert np.array_equal(a.projection.data, b.projection.data)


def test_encoder_output_is_projection_of_token_mean():
    enc = QuestionEncoderParams.init(5, 4, np.random.default_rng(0))
    ids = np.array([1, 3, 3])
    out = enc.encode(ids)
    want = enc.projection.data @ enc.token_embeddings.data[ids].mean(axis=0)
    np.testing.assert_allclose(out.data, want)


# ---------------------------------------------------------------------------
# Embedding stores


def test_random_store_shapes_and_determinism():
    kg, _ = small_kg()
    a = init_random(kg, 8, seed=4)
    b = init_random(kg, 8, seed=4)
    c = init_random(kg, 8, seed=5)
    assert a.entity_table.shape == (kg.core_entity_count, 8)
    assert a.time_table.shape == (len(kg.years), 8)
    assert np.array_equal(a.entity_table.data, b.entity_table.data)
    assert not np.array_equal(a.entity_table.data, c.entity_table.data)
    assert a.provenance == "random"


def test_store_round_trip_and_vocabulary_guard(tmp_path):
    kg, _ = small_kg()
    store = init_random(kg, 8, seed=4)
    path = tmp_path / "emb.ckpt"
    save_store(store, path, kg)
    loaded = load_store(path, kg)
    assert np.array_equal(loaded.entity_table.data, store.entity_table.data)
    assert np.array_equal(loaded.time_table.data, store.time_table.data)

    other_kg, _ = small_kg(n_positions=3)
    with pytest.raises(CheckpointError):
        load_store(path, other_kg)


def test_store_sidecar_lists_names(tmp_path):
    kg, _ = small_kg()
    store = init_random(kg, 8, seed=4)
    path = tmp_path / "emb.ckpt"
    save_store(store, path, kg)
    sidecar = (tmp_path / "emb.ckpt.vocab.json").read_text(encoding="utf-8")
    assert "office_0" in sidecar
    assert "held" in sidecar


# ---------------------------------------------------------------------------
# Fact instants


def test_short_interval_expands_to_every_year():
    kg, _ = small_kg(n_positions=1, holders_per_position=1, tenure=3)
    instants = expand_fact_instants(kg)
    assert len(instants) == 3
    assert sorted(instants[:, 3]) == [0, 1, 2]


def test_long_interval_subsamples_with_endpoints():
    entities, relations = new_vocabularies()
    fact = TemporalFact(entities.intern("a"), relations.intern("r"), entities.intern("b"), 1900, 1999)
    question = QuestionInstance(
        qid="q0",
        text="when did a r b?",
        category="temporal",
        subgraph=QuestionSubgraph([fact]),
        answers=frozenset({Answer("time", 1900)}),
    )
    kg = build_background_kg([question], entities, relations)
    instants = expand_fact_instants(kg)
    assert len(instants) <= MAX_INSTANTS_PER_FACT
    t_rows = set(instants[:, 3])
    assert kg.year_row(1900) in t_rows
    assert kg.year_row(1999) in t_rows


# ---------------------------------------------------------------------------
# Pretraining


def test_zero_epochs_returns_seeded_tables():
    kg, _ = small_kg()
    a = pretrain_tcomplex(kg, dim=8, epochs=0, seed=9)
    b = pretrain_tcomplex(kg, dim=8, epochs=0, seed=9)
    assert np.array_equal(a.entity_table.data, b.entity_table.data)
    assert a.provenance == "pretrained"
    assert a.entity_table.shape == (kg.core_entity_count, 8)


def test_pretraining_needs_even_dim():
    kg, _ = small_kg()
    with pytest.raises(ConfigError):
        pretrain_tcomplex(kg, dim=7, epochs=1, seed=9)


def test_pretraining_improves_object_completion():
    kg, _ = small_kg(n_positions=3, holders_per_position=4)
    instants = expand_fact_instants(kg)
    before = completion_hits_at_1(_init_complex_tables(kg, 16, 9), instants)
    trained = pretrain_tables(kg, dim=16, epochs=20, seed=9)
    after = completion_hits_at_1(trained, instants)
    assert after > before
    assert after >= 0.5


def test_pretraining_is_seed_deterministic():
    kg, _ = small_kg()
    a = pretrain_tcomplex(kg, dim=8, epochs=3, seed=9)
    b = pretrain_tcomplex(kg, dim=8, epochs=3, seed=9)
    assert np.array_equal(a.entity_table.data, b.entity_table.data)
    assert np.array_equal(a.time_table.data, b.time_table.data)


def test_pretraining_aborts_on_non_finite_loss(monkeypatch):
    kg, _ = small_kg()

    def poisoned(kg, dim, seed):
        tables = _init_complex_tables(kg, dim, seed)
        tables.entity_re.data[0, 0] = np.nan
        return tables

    monkeypatch.setattr("tkgqa.encoders._init_complex_tables", poisoned)
    with pytest.raises(TrainingDiverged):
        pretrain_tcomplex(kg, dim=8, epochs=1, seed=9)


def complex_view(tables):
    """Reassemble numpy complex vectors from the paired real tables."""
    j = 1j
    return (
        tables.entity_re.data + j * tables.entity_im.data,
        tables.relation_re.data + j * tables.relation_im.data,
        tables.time_re.data + j * tables.time_im.data,
    )


def test_scoring_matches_complex_trilinear_form():
    kg, _ = small_kg()
    tables = _init_complex_tables(kg, 8, seed=2)
    ent, rel, tim = complex_view(tables)
    instants = expand_fact_instants(kg)
    scores = _object_scores(tables, instants[:, 0], instants[:, 1], instants[:, 3]).data
    for row, (s, r, o, t) in zip(scores, instants):
        query = ent[s] * rel[r] * tim[t]
        want = (query * np.conj(ent)).sum(axis=1).real
        np.testing.assert_allclose(row, want, atol=1e-10)


def test_scoring_symmetric_under_conjugated_swap():
    kg, _ = small_kg()
    tables = _init_complex_tables(kg, 8, seed=2)
    ent, rel, tim = complex_view(tables)
    s, r, o, t = expand_fact_instants(kg)[0]
    forward = (ent[s] * rel[r] * tim[t] * np.conj(ent[o])).sum().real
    swapped = (ent[o] * np.conj(rel[r] * tim[t]) * np.conj(ent[s])).sum().real
    assert abs(forward - swapped) < 1e-12


def test_build_store_dispatch(tmp_path):
    kg, _ = small_kg()
    cfg = TrainingConfig(dim=8, tcomplex_epochs=0)
    assert build_store(kg, cfg, seed=1).provenance == "random"

    cfg_t = TrainingConfig(dim=8, embedding_init="tcomplex", tcomplex_epochs=0)
    assert build_store(kg, cfg_t, seed=1).provenance == "pretrained"

    store = init_random(kg, 8, seed=1)
    path = tmp_path / "emb.ckpt"
    save_store(store, path, kg)
    cfg_f = TrainingConfig(dim=8, embedding_init="file", embedding_file=str(path))
    loaded = build_store(kg, cfg_f, seed=1)
    assert np.array_equal(loaded.entity_table.data, store.entity_table.data)
