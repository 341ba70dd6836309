"""Time-weighted relational graph convolution over question subgraphs.

Message passing follows the relational graph convolution update

    h_i <- act( W0 h_i + sum_r sum_{j in N_i^r} w(i,r,j) W_r h_j / |N_i^r| )

where each edge's scalar weight ``w`` is the cosine similarity between
the question's projected time representation and the embeddings of the
edge's interval endpoints.  Two weighting variants exist: ``average``
compares against the mean of the two endpoint embeddings, ``interval``
averages the two endpoint cosines.  Both are bounded by [-1, 1] and
symmetric in the endpoints.

Every directed fact contributes messages in both directions; the reverse
direction uses a distinct inverse relation id, so the relation parameter
count is twice the vocabulary size.  Per-relation matrices come from a
shared basis decomposition and are materialized lazily for the relations
present in a subgraph.  ``|N_i^r|`` counts the incoming edges of node
``i`` labeled ``r`` in the message-passing direction.

After the final layer, mean-pooled node states and mean-pooled subgraph
time embeddings are mixed by a learned entity-versus-time gate and a
residual question projection, and the result is scored against every
entity and every year by scaled cosine similarity over one joint
candidate list.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainingConfig
from .encoders import EmbeddingStore, QuestionEncoderParams, build_token_vocab, encode_token_ids
from .errors import CheckpointError, ContractViolation
from .kg import BackgroundKG, QuestionInstance, Vocabulary
from .storage import MODEL_MAGIC, read_container, write_container, write_json, read_json

WEIGHT_BOUND_SLACK = 1e-9


# ---------------------------------------------------------------------------
# Edge weighting


def edge_weight_average(h_start: Tensor, h_end: Tensor, q_time: Tensor) -> Tensor:
    """Cosine between the midpoint of the endpoint embeddings and q_time."""
    midpoint = ad.scale(ad.add(h_start, h_end), 0.5)
    return ad.cosine_similarity(midpoint, q_time)


def edge_weight_interval(h_start: Tensor, h_end: Tensor, q_time: Tensor) -> Tensor:
    """Mean of the two endpoint cosines against q_time."""
    start_cos = ad.cosine_similarity(h_start, q_time)
    end_cos = ad.cosine_similarity(h_end, q_time)
    return ad.scale(ad.add(start_cos, end_cos), 0.5)


def edge_weights_batch(start_rows: Tensor, end_rows: Tensor, q_time: Tensor, weighting: str) -> Tensor:
    """Vectorized per-edge weights; equals the scalar variants row by row."""
    if weighting == "average":
        midpoints = ad.scale(ad.add(start_rows, end_rows), 0.5)
        return ad.rowwise_cosine(midpoints, q_time)
    if weighting == "interval":
        start_cos = ad.rowwise_cosine(start_rows, q_time)
        end_cos = ad.rowwise_cosine(end_rows, q_time)
        return ad.scale(ad.add(start_cos, end_cos), 0.5)
    raise ContractViolation(f"unknown weighting variant {weighting!r}")


# ---------------------------------------------------------------------------
# Prepared questions


@dataclass
class PreparedQuestion:
    """Index arrays for one question, ready for the vectorized forward pass.

    Nodes appear in ascending entity-id order and edges in the canonical
    subgraph order (forward directions first, then their inverses), so the
    forward pass accumulates in a fixed order regardless of how the
    question file listed its facts.
    """

    qid: str
    category: str
    text: str
    token_ids: np.ndarray
    node_ids: np.ndarray
    node_rows: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_rel: np.ndarray
    edge_inv_norm: np.ndarray
    edge_start_rows: np.ndarray
    edge_end_rows: np.ndarray
    time_rows: np.ndarray
    target_indices: np.ndarray
    gold_entity_ids: frozenset[int]
    gold_years: frozenset[int]

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)


def prepare_question(
    question: QuestionInstance,
    kg: BackgroundKG,
    token_vocab: Vocabulary,
) -> PreparedQuestion:
    """Flatten a question into index arrays against the embedding layout."""
    node_ids = np.asarray(sorted(question.subgraph.nodes), dtype=np.int64)
    local = {int(e): i for i, e in enumerate(node_ids)}
    n_rel = kg.core_relation_count

    src, dst, rel, starts, ends = [], [], [], [], []
    for fact in question.subgraph.edges:
        row = kg.relation_row(fact.relation)
        start_row = kg.year_row(fact.start)
        end_row = kg.year_row(fact.end)
        src.append(local[fact.subject])
        dst.append(local[fact.object])
        rel.append(row)
        starts.append(start_row)
        ends.append(end_row)
    for fact in question.subgraph.edges:
        row = kg.relation_row(fact.relation)
        src.append(local[fact.object])
        dst.append(local[fact.subject])
        rel.append(row + n_rel)
        starts.append(kg.year_row(fact.start))
        ends.append(kg.year_row(fact.end))

    edge_dst = np.asarray(dst, dtype=np.int64)
    edge_rel = np.asarray(rel, dtype=np.int64)
    counts: dict[tuple[int, int], int] = {}
    for d, r in zip(edge_dst, edge_rel):
        counts[(int(d), int(r))] = counts.get((int(d), int(r)), 0) + 1
    inv_norm = np.asarray([1.0 / counts[(int(d), int(r))] for d, r in zip(edge_dst, edge_rel)])

    time_rows = np.asarray(sorted({kg.year_row(y) for y in question.subgraph.times}), dtype=np.int64)

    n_entity_rows = kg.core_entity_count
    targets = set()
    for answer_id in question.gold_entity_ids():
        if answer_id < n_entity_rows:
            targets.add(int(answer_id))
    for year in question.gold_years():
        if kg.min_year <= year <= kg.max_year:
            targets.add(n_entity_rows + (year - kg.min_year))

    return PreparedQuestion(
        qid=question.qid,
        category=question.category,
        text=question.text,
        token_ids=encode_token_ids(question.tokens, token_vocab),
        node_ids=node_ids,
        node_rows=np.asarray([kg.entity_row(int(e)) for e in node_ids], dtype=np.int64),
        edge_src=np.asarray(src, dtype=np.int64),
        edge_dst=edge_dst,
        edge_rel=edge_rel,
        edge_inv_norm=inv_norm,
        edge_start_rows=np.asarray(starts, dtype=np.int64),
        edge_end_rows=np.asarray(ends, dtype=np.int64),
        time_rows=time_rows,
        target_indices=np.asarray(sorted(targets), dtype=np.int64),
        gold_entity_ids=question.gold_entity_ids(),
        gold_years=question.gold_years(),
    )


def prepare_questions(questions, kg, token_vocab) -> list[PreparedQuestion]:
    return [prepare_question(q, kg, token_vocab) for q in questions]


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class LayerParameters:
    """Basis-decomposed relation transforms plus the self-loop matrix."""

    bases: Tensor
    coefficients: Tensor
    self_loop: Tensor

    @classmethod
    def init(cls, n_directed_relations: int, dim: int, basis_count: int, rng: np.random.Generator):
        return cls(
            bases=Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), (basis_count, dim, dim)), requires_grad=True),
            coefficients=Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(basis_count), (n_directed_relations, basis_count)),
                requires_grad=True,
            ),
            self_loop=Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)), requires_grad=True),
        )


@dataclass
class PredictionHeadParams:
    """Question-to-time projection, gate vector and residual projection.

    The gate vector starts at zero so a fresh model mixes entity and time
    evidence evenly (sigmoid(0) = 0.5), which also makes the gated and
    ungated ablation arms coincide at initialization.
    """

    time_projection: Tensor
    gate_vector: Tensor
    residual_projection: Tensor

    @classmethod
    def init(cls, dim: int, question_dim: int, rng: np.random.Generator):
        scale = 1.0 / np.sqrt(question_dim)
        if dim == question_dim:
            # Near-identity start keeps whatever year geometry the question
            # encoding carries visible to the edge weights from epoch one.
            time_projection = np.eye(dim) + rng.normal(0.0, 0.01, (dim, dim))
        else:
            time_projection = rng.normal(0.0, scale, (dim, question_dim))
        return cls(
            time_projection=Tensor(time_projection, requires_grad=True),
            gate_vector=Tensor(np.zeros(question_dim), requires_grad=True),
            residual_projection=Tensor(rng.normal(0.0, scale, (dim, question_dim)), requires_grad=True),
        )


def seed_token_rows_from_store(
    encoder: QuestionEncoderParams,
    token_vocab: Vocabulary,
    kg: BackgroundKG,
    store: EmbeddingStore,
) -> int:
    """Initialize tokens that name an entity or a year from the store's rows.

    A from-scratch token table gives "1957" and "1958" unrelated vectors, so
    nothing downstream can exploit year adjacency until training rediscovers
    it.  Copying the store rows (rescaled against the token table's typical
    norm, truncated or zero-padded across widths) hands the question encoder
    the same geometry the graph side uses.  Seeded rows get amplified norms,
    year tokens most of all: mean pooling dilutes each token by the question
    length, and the year is the one token the edge weighting depends on.
    Returns the number of seeded rows.
    """
    table = encoder.token_embeddings.data
    question_dim = table.shape[1]
    norms = np.linalg.norm(table, axis=1)
    base_norm = float(np.median(norms[norms > 0])) if np.any(norms > 0) else 1.0

    def fitted(row: np.ndarray, gain: float) -> np.ndarray:
        out = np.zeros(question_dim)
        width = min(question_dim, row.shape[0])
        out[:width] = row[:width]
        norm = np.linalg.norm(out)
        return out * (gain * base_norm / norm) if norm > 0 else out

    seeded = 0
    for token_id, token in enumerate(token_vocab.names):
        if token in kg.entities and kg.entities.id_of(token) < kg.core_entity_count:
            source = store.entity_table.data[kg.entities.id_of(token)]
            gain = 1.5
        elif token.isdigit() and kg.min_year <= int(token) <= kg.max_year:
            source = store.time_table.data[int(token) - kg.min_year]
            gain = 3.0
        else:
            continue
        table[token_id] = fitted(source, gain)
        seeded += 1
    return seeded


# ---------------------------------------------------------------------------
# Forward-pass pieces


def conv_layer(
    pq: PreparedQuestion,
    states: Tensor,
    edge_weights: Tensor,
    layer: LayerParameters,
) -> Tensor:
    """One message-passing layer over the prepared subgraph.

    Messages are grouped by the relations actually present, each edge's
    message is scaled by its weight over its neighborhood size, summed
    into the destination node, combined with the self-loop term and passed
    through a rectifier.  A node with no incoming edges keeps only its
    self-loop term.
    """
    present, local_rel = np.unique(pq.edge_rel, return_inverse=True)
    coefficients = ad.gather_rows(layer.coefficients, present)
    relation_mats = ad.combine_bases(coefficients, layer.bases)
    edge_mats = ad.gather_rows(relation_mats, local_rel)
    source_states = ad.gather_rows(states, pq.edge_src)
    messages = ad.batched_vecmat(edge_mats, source_states)
    per_edge = ad.mul(edge_weights, Tensor(pq.edge_inv_norm))
    weighted = ad.mul(messages, ad.reshape(per_edge, (pq.n_edges, 1)))
    aggregated = ad.scatter_add_rows(weighted, pq.edge_dst, pq.n_nodes)
    self_term = ad.matmul(states, ad.transpose(layer.self_loop))
    return ad.relu(ad.add(aggregated, self_term))


def pool_predictions(final_states: Tensor, subgraph_time_rows: Tensor) -> tuple[Tensor, Tensor]:
    """Mean-pool node states and subgraph time embeddings.

    Inputs are built in sorted-id order, so pooling is invariant to how the
    subgraph presented its nodes and times.
    """
    return ad.mean(final_states, axis=0), ad.mean(subgraph_time_rows, axis=0)


def gate(gate_vector: Tensor, question_vec: Tensor) -> Tensor:
    """Entity-share of the final mix: sigmoid(gate_vector . question_vec)."""
    return ad.sigmoid(ad.matmul(gate_vector, question_vec))


def predict(
    question_vec: Tensor,
    entity_evidence: Tensor,
    time_evidence: Tensor,
    entity_share: Tensor,
    head: PredictionHeadParams,
    divisor: float,
) -> Tensor:
    """Gated mix of pooled evidence plus the projected question residual."""
    time_share = ad.sub(Tensor(1.0), entity_share)
    mixed = ad.add(
        ad.add(ad.mul(entity_share, entity_evidence), ad.mul(time_share, time_evidence)),
        ad.matmul(head.residual_projection, question_vec),
    )
    return ad.scale(mixed, 1.0 / divisor)


def score_candidates(prediction: Tensor, candidate_rows: Tensor, score_scale: float) -> Tensor:
    """Scaled cosine of the prediction against every candidate row."""
    return ad.scale(ad.rowwise_cosine(candidate_rows, prediction), score_scale)


@dataclass
class ForwardState:
    """Intermediate and final tensors of one question's forward pass."""

    question_vec: Tensor
    question_time: Tensor
    edge_weights: Tensor
    final_states: Tensor
    entity_evidence: Tensor
    time_evidence: Tensor
    entity_share: Tensor
    prediction: Tensor
    scores: Tensor
    n_entity_rows: int


# ---------------------------------------------------------------------------
# The model


class TimeWeightedRGCN:
    """Full question-answering model over a fixed background graph."""

    def __init__(
        self,
        kg: BackgroundKG,
        store: EmbeddingStore,
        token_vocab: Vocabulary,
        encoder: QuestionEncoderParams,
        layers: list[LayerParameters],
        head: PredictionHeadParams,
        cfg: TrainingConfig,
    ):
        if store.dim != cfg.dim:
            raise ContractViolation("embedding store dim does not match the configuration")
        self.kg = kg
        self.store = store
        self.token_vocab = token_vocab
        self.encoder = encoder
        self.layers = layers
        self.head = head
        self.cfg = cfg
        store.entity_table.requires_grad = not cfg.freeze_embeddings
        store.time_table.requires_grad = not cfg.freeze_embeddings

    @classmethod
    def build(
        cls,
        kg: BackgroundKG,
        store: EmbeddingStore,
        token_vocab: Vocabulary,
        cfg: TrainingConfig,
        seed: int,
    ) -> "TimeWeightedRGCN":
        rng = np.random.default_rng(seed)
        n_directed = 2 * kg.core_relation_count
        encoder = QuestionEncoderParams.init(len(token_vocab), cfg.question_dim, rng)
        seed_token_rows_from_store(encoder, token_vocab, kg, store)
        layers = [LayerParameters.init(n_directed, cfg.dim, cfg.basis_count, rng) for _ in range(cfg.layers)]
        head = PredictionHeadParams.init(cfg.dim, cfg.question_dim, rng)
        return cls(kg, store, token_vocab, encoder, layers, head, cfg)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.encoder.tensors())
        for i, layer in enumerate(self.layers):
            params[f"layer{i}.bases"] = layer.bases
            params[f"layer{i}.coefficients"] = layer.coefficients
            params[f"layer{i}.self_loop"] = layer.self_loop
        params["head.time_projection"] = self.head.time_projection
        params["head.gate_vector"] = self.head.gate_vector
        params["head.residual_projection"] = self.head.residual_projection
        params["store.entity_table"] = self.store.entity_table
        params["store.time_table"] = self.store.time_table
        if trainable_only:
            params = {k: v for k, v in params.items() if v.requires_grad}
        return params

    # -- forward pieces ------------------------------------------------------

    def encode_question(self, pq: PreparedQuestion) -> Tensor:
        return self.encoder.encode(pq.token_ids)

    def question_time(self, question_vec: Tensor) -> Tensor:
        """Project the pooled question vector into the time embedding space."""
        return ad.matmul(self.head.time_projection, question_vec)

    def forward(self, pq: PreparedQuestion) -> ForwardState:
        question_vec = self.encode_question(pq)
        question_time = self.question_time(question_vec)

        start_rows = ad.gather_rows(self.store.time_table, pq.edge_start_rows)
        end_rows = ad.gather_rows(self.store.time_table, pq.edge_end_rows)
        weights = edge_weights_batch(start_rows, end_rows, question_time, self.cfg.weighting)
        if np.any(np.abs(weights.data) > 1.0 + WEIGHT_BOUND_SLACK):
            raise ContractViolation("edge weight escaped [-1, 1]")

        states = ad.gather_rows(self.store.entity_table, pq.node_rows)
        for layer in self.layers:
            states = conv_layer(pq, states, weights, layer)

        subgraph_times = ad.gather_rows(self.store.time_table, pq.time_rows)
        entity_evidence, time_evidence = pool_predictions(states, subgraph_times)

        if self.cfg.gating_enabled:
            entity_share = gate(self.head.gate_vector, question_vec)
        else:
            entity_share = Tensor(0.5)
        prediction = predict(
            question_vec,
            entity_evidence,
            time_evidence,
            entity_share,
            self.head,
            self.cfg.prediction_divisor,
        )

        candidates = ad.concat([self.store.entity_table, self.store.time_table], axis=0)
        scores = score_candidates(prediction, candidates, self.cfg.score_scale)
        return ForwardState(
            question_vec=question_vec,
            question_time=question_time,
            edge_weights=weights,
            final_states=states,
            entity_evidence=entity_evidence,
            time_evidence=time_evidence,
            entity_share=entity_share,
            prediction=prediction,
            scores=scores,
            n_entity_rows=self.kg.core_entity_count,
        )

    def loss(self, pq: PreparedQuestion, state: ForwardState | None = None) -> Tensor | None:
        """Cross entropy of the gold candidate set; None when unreachable."""
        if pq.target_indices.size == 0:
            return None
        if state is None:
            state = self.forward(pq)
        return ad.softmax_cross_entropy(state.scores, pq.target_indices)

    def rank(self, state: ForwardState, k: int) -> list[tuple[str, object, float]]:
        """Top-k candidates as (kind, value, score), ties broken by index."""
        scores = state.scores.data
        order = np.argsort(-scores, kind="stable")[:k]
        ranked: list[tuple[str, object, float]] = []
        for idx in order:
            idx = int(idx)
            if idx < state.n_entity_rows:
                ranked.append(("entity", self.kg.entities.name_of(idx), float(scores[idx])))
            else:
                ranked.append(("time", self.kg.years[idx - state.n_entity_rows], float(scores[idx])))
        return ranked

    def candidate_count(self) -> int:
        return self.kg.core_entity_count + len(self.kg.years)

    # -- persistence ---------------------------------------------------------

    def save(self, path, sidecar_path=None) -> None:
        """Write all parameters, hyperparameters and vocabulary hashes."""
        meta = {
            "kind": "model-checkpoint",
            "config": self.cfg.to_dict(),
            "vocabulary_hashes": self.kg.vocabulary_hashes(),
            "token_vocab_hash": self.token_vocab.content_hash(),
            "weighting": self.cfg.weighting,
            "store_provenance": self.store.provenance,
        }
        arrays = {name: tensor.data for name, tensor in self.parameters().items()}
        write_container(path, MODEL_MAGIC, meta, arrays)
        if sidecar_path is None:
            sidecar_path = str(path) + ".vocab.json"
        write_json(
            sidecar_path,
            {
                "tokens": list(self.token_vocab.names),
                "entities": list(self.kg.entities.names[: self.kg.core_entity_count]),
                "relations": list(self.kg.relations.names[: self.kg.core_relation_count]),
                "year_range": [self.kg.min_year, self.kg.max_year],
            },
        )

    @classmethod
    def load(cls, path, kg: BackgroundKG, sidecar_path=None) -> "TimeWeightedRGCN":
        meta, arrays = read_container(path, MODEL_MAGIC)
        if meta.get("kind") != "model-checkpoint":
            raise CheckpointError(f"{path}: not a model checkpoint")
        if meta["vocabulary_hashes"] != kg.vocabulary_hashes():
            raise CheckpointError(f"{path}: checkpoint was trained against different vocabularies")
        cfg = TrainingConfig(**meta["config"]).validate()
        if sidecar_path is None:
            sidecar_path = str(path) + ".vocab.json"
        sidecar = read_json(sidecar_path)
        token_vocab = Vocabulary()
        for token in sidecar["tokens"]:
            token_vocab.intern(token)
        if token_vocab.content_hash() != meta["token_vocab_hash"]:
            raise CheckpointError(f"{path}: token vocabulary sidecar does not match the checkpoint")

        store = EmbeddingStore(
            entity_table=Tensor(arrays["store.entity_table"], requires_grad=True),
            time_table=Tensor(arrays["store.time_table"], requires_grad=True),
            provenance=str(meta["store_provenance"]),
        )
        model = cls.build(kg, store, token_vocab, cfg, seed=cfg.seed)
        for name, tensor in model.parameters().items():
            if name not in arrays:
                raise CheckpointError(f"{path}: checkpoint is missing tensor {name!r}")
            if arrays[name].shape != tensor.data.shape:
                raise CheckpointError(f"{path}: tensor {name!r} has shape {arrays[name].shape}, expected {tensor.data.shape}")
            tensor.data = arrays[name].copy()
        return model


def build_model_for_dataset(
    kg: BackgroundKG,
    train_questions: Sequence[QuestionInstance],
    store: EmbeddingStore,
    cfg: TrainingConfig,
    seed: int,
) -> TimeWeightedRGCN:
    """Convenience constructor: token vocabulary from the training split."""
    token_vocab = build_token_vocab(train_questions)
    return TimeWeightedRGCN.build(kg, store, token_vocab, cfg, seed)
