"""Question and graph-element encoders.

The question encoder is deliberately small: mean of learned token
embeddings followed by a learned linear projection.  Entity and time
embeddings either start from seeded Gaussian noise or from a complex
bilinear factorization of the background graph (real and imaginary
halves packed into one real vector per element), trained with a
multiclass log-loss over objects.  Both init paths produce the same
``EmbeddingStore`` shape, and the tables are fine-tuned downstream
unless frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .kg import UNK_NAME, BackgroundKG, QuestionInstance, Vocabulary
from .optim import Adam
from .storage import EMBEDDING_MAGIC, read_container, write_container, write_json

logger = logging.getLogger("tkgqa.encoders")

MAX_INSTANTS_PER_FACT = 16


def build_token_vocab(questions: Sequence[QuestionInstance]) -> Vocabulary:
    """Token vocabulary over the training split, unknown token reserved."""
    vocab = Vocabulary(reserved=(UNK_NAME,))
    for question in questions:
        for token in question.tokens:
            vocab.intern(token)
    return vocab


def encode_token_ids(tokens: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    unk = vocab.id_of(UNK_NAME)
    return np.asarray([vocab.id_of(t) if t in vocab else unk for t in tokens], dtype=np.int64)


@dataclass
class QuestionEncoderParams:
    """Mean-of-token-embeddings encoder with a linear output projection."""

    token_embeddings: Tensor
    projection: Tensor
    kind: str = "mean-of-tokens"

    @classmethod
    def init(cls, vocab_size: int, question_dim: int, rng: np.random.Generator) -> "QuestionEncoderParams":
        scale = 1.0 / np.sqrt(question_dim)
        # Near-identity output map: the pooled token geometry passes through
        # unscrambled at the start of training instead of behind a random
        # rotation the optimizer must first undo.
        projection = np.eye(question_dim) + rng.normal(0.0, 0.01, (question_dim, question_dim))
        return cls(
            token_embeddings=Tensor(rng.normal(0.0, scale, (vocab_size, question_dim)), requires_grad=True),
            projection=Tensor(projection, requires_grad=True),
        )

    def encode(self, token_ids: np.ndarray) -> Tensor:
        """Pooled question representation; empty input is a contract error."""
        rows = ad.gather_rows(self.token_embeddings, token_ids)
        pooled = ad.mean(rows, axis=0)
        return ad.matmul(self.projection, pooled)

    def tensors(self) -> dict[str, Tensor]:
        return {"encoder.token_embeddings": self.token_embeddings, "encoder.projection": self.projection}


@dataclass
class EmbeddingStore:
    """Entity and time embedding tables plus their provenance tag."""

    entity_table: Tensor
    time_table: Tensor
    provenance: str

    @property
    def dim(self) -> int:
        return self.entity_table.data.shape[1]

    def copy(self) -> "EmbeddingStore":
        return EmbeddingStore(
            entity_table=Tensor(self.entity_table.data.copy(), requires_grad=self.entity_table.requires_grad),
            time_table=Tensor(self.time_table.data.copy(), requires_grad=self.time_table.requires_grad),
            provenance=self.provenance,
        )


def init_random(kg: BackgroundKG, dim: int, seed: int) -> EmbeddingStore:
    """Seeded Gaussian tables with rows of mean norm close to 1."""
    if dim <= 0:
        raise ConfigError("embedding dim must be positive")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)
    entity = rng.normal(0.0, scale, (kg.core_entity_count, dim))
    time = rng.normal(0.0, scale, (len(kg.years), dim))
    return EmbeddingStore(
        entity_table=Tensor(entity, requires_grad=True),
        time_table=Tensor(time, requires_grad=True),
        provenance="random",
    )


def save_store(store: EmbeddingStore, path, kg: BackgroundKG, sidecar_path=None) -> None:
    """Write the store as a binary container plus an id-mapping sidecar."""
    meta = {
        "kind": "embedding-store",
        "dim": store.dim,
        "entity_count": int(store.entity_table.data.shape[0]),
        "time_count": int(store.time_table.data.shape[0]),
        "provenance": store.provenance,
        "vocabulary_hashes": kg.vocabulary_hashes(),
    }
    arrays = {"entity_table": store.entity_table.data, "time_table": store.time_table.data}
    write_container(path, EMBEDDING_MAGIC, meta, arrays)
    if sidecar_path is None:
        sidecar_path = str(path) + ".vocab.json"
    write_json(
        sidecar_path,
        {
            "entities": list(kg.entities.names[: kg.core_entity_count]),
            "relations": list(kg.relations.names[: kg.core_relation_count]),
            "year_range": [kg.min_year, kg.max_year],
        },
    )


def load_store(path, kg: BackgroundKG) -> EmbeddingStore:
    """Read a store and check it against the current graph's vocabularies."""
    meta, arrays = read_container(path, EMBEDDING_MAGIC)
    if meta.get("kind") != "embedding-store":
        raise CheckpointError(f"{path}: not an embedding store")
    if meta["vocabulary_hashes"] != kg.vocabulary_hashes():
        raise CheckpointError(f"{path}: embedding store was built against different vocabularies")
    if meta["entity_count"] != kg.core_entity_count or meta["time_count"] != len(kg.years):
        raise CheckpointError(f"{path}: table sizes do not match the background graph")
    return EmbeddingStore(
        entity_table=Tensor(arrays["entity_table"], requires_grad=True),
        time_table=Tensor(arrays["time_table"], requires_grad=True),
        provenance=str(meta["provenance"]),
    )


# ---------------------------------------------------------------------------
# Complex bilinear pretraining


@dataclass
class ComplexTables:
    """Real/imaginary factor tables for entities, relations and times."""

    entity_re: Tensor
    entity_im: Tensor
    relation_re: Tensor
    relation_im: Tensor
    time_re: Tensor
    time_im: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {
            "entity_re": self.entity_re,
            "entity_im": self.entity_im,
            "relation_re": self.relation_re,
            "relation_im": self.relation_im,
            "time_re": self.time_re,
            "time_im": self.time_im,
        }


def _init_complex_tables(kg: BackgroundKG, dim: int, seed: int) -> ComplexTables:
    if dim % 2 != 0:
        raise ConfigError("pretraining needs an even embedding dim")
    rank = dim // 2
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)

    def table(rows: int) -> Tensor:
        return Tensor(rng.normal(0.0, scale, (rows, rank)), requires_grad=True)

    return ComplexTables(
        entity_re=table(kg.core_entity_count),
        entity_im=table(kg.core_entity_count),
        relation_re=table(kg.core_relation_count),
        relation_im=table(kg.core_relation_count),
        time_re=table(len(kg.years)),
        time_im=table(len(kg.years)),
    )


def expand_fact_instants(kg: BackgroundKG) -> np.ndarray:
    """Yearly (subject, relation, object, time-row) instants of every fact.

    Intervals longer than ``MAX_INSTANTS_PER_FACT`` years are subsampled to
    that many evenly spaced instants, always keeping both endpoints.
    """
    rows = []
    for fact in kg.facts:
        span = fact.end - fact.start + 1
        if span <= MAX_INSTANTS_PER_FACT:
            years = range(fact.start, fact.end + 1)
        else:
            years = sorted(
                {int(round(y)) for y in np.linspace(fact.start, fact.end, MAX_INSTANTS_PER_FACT)}
            )
        for year in years:
            rows.append((fact.subject, fact.relation, fact.object, kg.year_row(year)))
    return np.asarray(rows, dtype=np.int64)


def _complex_query(tables: ComplexTables, s_idx: np.ndarray, r_idx: np.ndarray, t_idx: np.ndarray):
    """Per-instant query vector u_s * (v_r * w_t) in real/imaginary parts."""
    s_re = ad.gather_rows(tables.entity_re, s_idx)
    s_im = ad.gather_rows(tables.entity_im, s_idx)
    r_re = ad.gather_rows(tables.relation_re, r_idx)
    r_im = ad.gather_rows(tables.relation_im, r_idx)
    t_re = ad.gather_rows(tables.time_re, t_idx)
    t_im = ad.gather_rows(tables.time_im, t_idx)
    rt_re = ad.sub(ad.mul(r_re, t_re), ad.mul(r_im, t_im))
    rt_im = ad.add(ad.mul(r_re, t_im), ad.mul(r_im, t_re))
    q_re = ad.sub(ad.mul(s_re, rt_re), ad.mul(s_im, rt_im))
    q_im = ad.add(ad.mul(s_re, rt_im), ad.mul(s_im, rt_re))
    return q_re, q_im


def _object_scores(tables: ComplexTables, s_idx, r_idx, t_idx) -> Tensor:
    """Real part of the trilinear product against every candidate object."""
    q_re, q_im = _complex_query(tables, s_idx, r_idx, t_idx)
    scores_re = ad.matmul(q_re, ad.transpose(tables.entity_re))
    scores_im = ad.matmul(q_im, ad.transpose(tables.entity_im))
    return ad.add(scores_re, scores_im)


def completion_hits_at_1(tables: ComplexTables, instants: np.ndarray) -> float:
    """Held-in object completion accuracy by exhaustive enumeration.

    For each training instant the argmax object over the full entity table
    counts as a hit when it lies in the gold set of objects observed for
    that (subject, relation, time) triple.
    """
    gold: dict[tuple[int, int, int], set[int]] = {}
    for s, r, o, t in instants:
        gold.setdefault((int(s), int(r), int(t)), set()).add(int(o))
    scores = _object_scores(tables, instants[:, 0], instants[:, 1], instants[:, 3]).data
    predicted = scores.argmax(axis=1)
    hits = sum(
        1
        for (s, r, o, t), top in zip(instants, predicted)
        if int(top) in gold[(int(s), int(r), int(t))]
    )
    return hits / len(instants)


def _export_store(tables: ComplexTables) -> EmbeddingStore:
    entity = np.concatenate([tables.entity_re.data, tables.entity_im.data], axis=1)
    time = np.concatenate([tables.time_re.data, tables.time_im.data], axis=1)
    return EmbeddingStore(
        entity_table=Tensor(entity.copy(), requires_grad=True),
        time_table=Tensor(time.copy(), requires_grad=True),
        provenance="pretrained",
    )


def pretrain_tables(
    kg: BackgroundKG,
    dim: int,
    epochs: int,
    seed: int,
    learning_rate: float = 0.05,
    batch_size: int = 512,
) -> ComplexTables:
    """Factorize the background graph, returning the trained factor tables.

    Zero epochs returns the seeded initialization unchanged.  A non-finite
    loss aborts with a diagnostic rather than returning garbage tables.
    """
    tables = _init_complex_tables(kg, dim, seed)
    instants = expand_fact_instants(kg)
    if instants.size == 0:
        raise ConfigError("background graph has no facts to pretrain on")
    rng = np.random.default_rng(seed + 1)
    optimizer = Adam(tables.tensors())
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(instants))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), batch_size):
            batch = instants[order[lo : lo + batch_size]]
            for p in tables.tensors().values():
                p.zero_grad()
            with ad.Tape() as tape:
                scores = _object_scores(tables, batch[:, 0], batch[:, 1], batch[:, 3])
                loss = ad.softmax_cross_entropy_batch(scores, batch[:, 2])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"pretraining loss became non-finite in epoch {epoch}")
            tape.backward(loss)
            optimizer.step(learning_rate)
            epoch_loss += loss.item()
            n_batches += 1
        logger.info("pretrain epoch %d loss %.4f", epoch, epoch_loss / max(n_batches, 1))
    return tables


def pretrain_tcomplex(
    kg: BackgroundKG,
    dim: int,
    epochs: int,
    seed: int,
    learning_rate: float = 0.05,
    batch_size: int = 512,
) -> EmbeddingStore:
    """Pretrain on the background graph and export real-valued tables.

    Entity and time rows are the concatenated real and imaginary parts of
    the trained factors; relation factors stay internal to pretraining.
    """
    tables = pretrain_tables(kg, dim, epochs, seed, learning_rate, batch_size)
    return _export_store(tables)


def build_store(kg: BackgroundKG, cfg, seed: int) -> EmbeddingStore:
    """Construct the embedding store for a training config's init mode."""
    if cfg.embedding_init == "random":
        return init_random(kg, cfg.dim, seed)
    if cfg.embedding_init == "tcomplex":
        return pretrain_tcomplex(
            kg,
            cfg.dim,
            cfg.tcomplex_epochs,
            seed,
            learning_rate=cfg.tcomplex_learning_rate,
            batch_size=cfg.tcomplex_batch_size,
        )
    if cfg.embedding_init == "file":
        return load_store(cfg.embedding_file, kg)
    raise ConfigError(f"unknown embedding init {cfg.embedding_init!r}")
