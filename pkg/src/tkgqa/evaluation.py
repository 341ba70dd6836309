"""Metrics, error analysis and prediction files.

All metric functions are pure: they consume prediction records and gold
records (both plain data, as read from files) and return numbers, so any
two prediction files over the same questions can be compared, wherever
they came from.

A prediction file is JSON lines; each record has the question ``id``, the
model's entity-versus-time ``gate`` value and ``ranked``, a list of at
least the top three ``{"kind", "value", "score"}`` candidates in
descending score order.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EvaluationError, ParseError
from .kg import CATEGORIES, QuestionInstance, Vocabulary
from .model import PreparedQuestion, TimeWeightedRGCN

logger = logging.getLogger("tkgqa.evaluation")

MIN_RANKED = 3


@dataclass
class PredictionRecord:
    """One scored question: gate value plus the ranked candidate list."""

    qid: str
    gate: float
    ranked: list[tuple[str, object, float]]


@dataclass
class GoldRecord:
    """File-level gold answers for one question."""

    qid: str
    category: str
    answers: frozenset[tuple[str, object]]


def gold_records(questions: Sequence[QuestionInstance], entities: Vocabulary) -> dict[str, GoldRecord]:
    return {
        q.qid: GoldRecord(qid=q.qid, category=q.category, answers=q.gold_tuples(entities))
        for q in questions
    }


# ---------------------------------------------------------------------------
# Prediction files


def write_predictions(records: Sequence[PredictionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            if len(record.ranked) < MIN_RANKED:
                raise EvaluationError(f"prediction {record.qid} has fewer than {MIN_RANKED} ranked candidates")
            payload = {
                "id": record.qid,
                "gate": record.gate,
                "ranked": [{"kind": k, "value": v, "score": s} for k, v, s in record.ranked],
            }
            handle.write(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def read_predictions(path) -> list[PredictionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", path, line_no) from None
            for key in ("id", "gate", "ranked"):
                if key not in payload:
                    raise ParseError(f"missing key {key!r}", path, line_no)
            ranked = []
            for entry in payload["ranked"]:
                if not isinstance(entry, dict) or not {"kind", "value", "score"} <= set(entry):
                    raise ParseError(f"malformed ranked entry {entry!r}", path, line_no)
                ranked.append((entry["kind"], entry["value"], float(entry["score"])))
            if len(ranked) < MIN_RANKED:
                raise ParseError(f"fewer than {MIN_RANKED} ranked candidates", path, line_no)
            records.append(PredictionRecord(qid=str(payload["id"]), gate=float(payload["gate"]), ranked=ranked))
    return records


def predictions_from_model(
    model: TimeWeightedRGCN,
    prepared: Sequence[PreparedQuestion],
    k: int,
    workers: int = 1,
) -> list[PredictionRecord]:
    """Run the model over prepared questions and collect ranked candidates.

    With ``workers > 1`` the forward passes run on a thread pool; results
    are assembled in input order either way.
    """
    if k < MIN_RANKED:
        raise EvaluationError(f"top-k must be at least {MIN_RANKED}")

    def run(pq: PreparedQuestion) -> PredictionRecord:
        state = model.forward(pq)
        return PredictionRecord(
            qid=pq.qid,
            gate=float(state.entity_share.data),
            ranked=model.rank(state, k),
        )

    if workers <= 1:
        return [run(pq) for pq in prepared]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, prepared))


def mean_loss(model: TimeWeightedRGCN, prepared: Sequence[PreparedQuestion], batch_size: int = 32) -> float:
    """Mean cross entropy over questions with reachable gold answers."""
    total, counted = 0.0, 0
    for lo in range(0, len(prepared), batch_size):
        for pq in prepared[lo : lo + batch_size]:
            loss = model.loss(pq)
            if loss is not None:
                total += loss.item()
                counted += 1
    return total / counted if counted else float("nan")


# ---------------------------------------------------------------------------
# Hit metrics


def _match(entry: tuple[str, object, float], answers: frozenset[tuple[str, object]]) -> bool:
    kind, value, _ = entry
    return (kind, value) in answers


def _check_coverage(predictions: Sequence[PredictionRecord], gold: dict[str, GoldRecord]) -> None:
    missing = sorted(p.qid for p in predictions if p.qid not in gold)
    if missing:
        raise EvaluationError(f"predictions without gold entries: {', '.join(missing)}")


def hits_at_k(
    predictions: Sequence[PredictionRecord],
    gold: dict[str, GoldRecord],
    k: int,
) -> tuple[float, dict[str, float | None]]:
    """Fraction of questions whose top-k contains any gold answer.

    Returns the overall rate and a per-category breakdown (None for
    categories with no questions).
    """
    if k < 1:
        raise EvaluationError("k must be at least 1")
    _check_coverage(predictions, gold)
    if not predictions:
        raise EvaluationError("no predictions to score")
    per_category: dict[str, list[int]] = {c: [] for c in CATEGORIES}
    overall: list[int] = []
    for record in predictions:
        answers = gold[record.qid].answers
        hit = any(_match(entry, answers) for entry in record.ranked[:k])
        overall.append(1 if hit else 0)
        per_category[gold[record.qid].category].append(1 if hit else 0)
    breakdown = {c: (sum(v) / len(v) if v else None) for c, v in per_category.items()}
    return sum(overall) / len(overall), breakdown


def hits_with_tolerance(
    predictions: Sequence[PredictionRecord],
    gold: dict[str, GoldRecord],
    window: int,
) -> tuple[float | None, int]:
    """Top-1 accuracy within a +-window of years, for time-answer questions.

    Only questions whose gold answers are all times are scored; the match
    uses the nearest gold year.  Returns (rate, question count); the rate
    is None when no question qualifies.
    """
    if window < 0:
        raise EvaluationError("tolerance window must be non-negative")
    _check_coverage(predictions, gold)
    hits, total = 0, 0
    for record in predictions:
        answers = gold[record.qid].answers
        if not answers or any(kind != "time" for kind, _ in answers):
            continue
        total += 1
        kind, value, _ = record.ranked[0]
        if kind != "time":
            continue
        nearest = min(abs(int(value) - int(year)) for _, year in answers)
        if nearest <= window:
            hits += 1
    return (hits / total if total else None), total


def answer_type_confusion(
    predictions: Sequence[PredictionRecord],
    gold: dict[str, GoldRecord],
) -> dict[str, float | int | None]:
    """How often the top-1 answer has the wrong kind.

    ``entity_as_time`` is the fraction of entity-gold questions whose top-1
    was a time; ``time_as_entity`` is the reverse.  Mixed-kind questions
    are excluded.
    """
    _check_coverage(predictions, gold)
    entity_total = entity_confused = 0
    time_total = time_confused = 0
    for record in predictions:
        kinds = {kind for kind, _ in gold[record.qid].answers}
        top_kind = record.ranked[0][0]
        if kinds == {"entity"}:
            entity_total += 1
            if top_kind == "time":
                entity_confused += 1
        elif kinds == {"time"}:
            time_total += 1
            if top_kind == "entity":
                time_confused += 1
    return {
        "entity_as_time": entity_confused / entity_total if entity_total else None,
        "time_as_entity": time_confused / time_total if time_total else None,
        "n_entity_questions": entity_total,
        "n_time_questions": time_total,
    }


# ---------------------------------------------------------------------------
# Question-time probe


_BC_RE = re.compile(r"\b(\d{1,4})\s*BCE?\b", re.IGNORECASE)
_YEAR_RE = re.compile(r"\b(\d{3,4})\b")


def extract_question_year(text: str) -> int | None:
    """First year mentioned in the text.

    Standalone 3-4 digit tokens in [1000, 2100] count as years; an explicit
    ``N BC`` (1-4 digits) maps to the negative year -N and takes precedence.
    """
    bc = _BC_RE.search(text)
    if bc:
        return -int(bc.group(1))
    for match in _YEAR_RE.finditer(text):
        year = int(match.group(1))
        if 1000 <= year <= 2100:
            return year
    return None


def question_time_probe(
    model: TimeWeightedRGCN,
    prepared: Sequence[PreparedQuestion],
    gold_years: dict[str, int] | None = None,
) -> dict:
    """Compare the projected question time against each question's year.

    For every question with an extractable year (or a supplied gold year),
    the probe takes the argmax year of cosine similarity between the
    year embeddings and the projected question representation, and
    aggregates absolute deviations.
    """
    deltas: list[int] = []
    per_category: dict[str, list[int]] = {c: [] for c in CATEGORIES}
    time_table = model.store.time_table.data
    norms = np.linalg.norm(time_table, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    for pq in prepared:
        if gold_years is not None:
            year = gold_years.get(pq.qid)
        else:
            year = extract_question_year(pq.text)
        if year is None:
            continue
        question_vec = model.encoder.encode(pq.token_ids)
        question_time = model.question_time(question_vec).data
        qnorm = float(np.linalg.norm(question_time))
        if qnorm == 0.0:
            continue
        cos = (time_table @ question_time) / (safe * qnorm)
        cos = np.where(norms > 0, cos, -np.inf)
        best = model.kg.years[int(np.argmax(cos))]
        delta = abs(int(best) - int(year))
        deltas.append(delta)
        per_category[pq.category].append(delta)
    if not deltas:
        logger.warning("question-time probe found no questions with an extractable year")
        return {"n_probed": 0, "median_abs_delta": None, "pct_exact": None, "pct_within_5": None, "pct_within_20": None, "per_category": {}}
    arr = np.asarray(deltas)
    return {
        "n_probed": len(deltas),
        "median_abs_delta": float(np.median(arr)),
        "pct_exact": float((arr == 0).mean()),
        "pct_within_5": float((arr <= 5).mean()),
        "pct_within_20": float((arr <= 20).mean()),
        "per_category": {
            c: {"n": len(v), "median_abs_delta": float(np.median(v)) if v else None}
            for c, v in per_category.items()
            if v
        },
    }


# ---------------------------------------------------------------------------
# Prediction overlap


def prediction_overlap(
    predictions_a: Sequence[PredictionRecord],
    predictions_b: Sequence[PredictionRecord],
    gold: dict[str, GoldRecord],
) -> dict:
    """Partition questions by which of two prediction files got them right.

    Correctness is hit@1.  Both files must cover exactly the same ids.
    """
    ids_a = {p.qid for p in predictions_a}
    ids_b = {p.qid for p in predictions_b}
    if ids_a != ids_b:
        difference = sorted(ids_a.symmetric_difference(ids_b))
        raise EvaluationError(f"prediction files cover different ids: {', '.join(difference)}")
    _check_coverage(predictions_a, gold)
    by_id_b = {p.qid: p for p in predictions_b}
    cells = {"both": 0, "only_a": 0, "only_b": 0, "neither": 0}
    per_category: dict[str, dict[str, int]] = {c: dict(cells) for c in CATEGORIES}
    for record_a in predictions_a:
        answers = gold[record_a.qid].answers
        correct_a = _match(record_a.ranked[0], answers)
        correct_b = _match(by_id_b[record_a.qid].ranked[0], answers)
        cell = "both" if correct_a and correct_b else "only_a" if correct_a else "only_b" if correct_b else "neither"
        cells[cell] += 1
        per_category[gold[record_a.qid].category][cell] += 1
    return {"overall": cells, "per_category": {c: v for c, v in per_category.items() if sum(v.values())}}


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    """Everything the evaluator knows how to say about one prediction set.

    ``to_dict`` is the machine-readable surface and its key names are
    stable; ``format_table`` renders the same content for people.
    """

    split: str
    n_questions: int
    hits: dict = field(default_factory=dict)
    tolerance_hits1: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    answer_recall: dict = field(default_factory=dict)
    probe: dict | None = None
    overlap: dict | None = None

    def to_dict(self) -> dict:
        payload = {
            "split": self.split,
            "n_questions": self.n_questions,
            "hits": self.hits,
            "tolerance_hits1": self.tolerance_hits1,
            "confusion": self.confusion,
            "answer_recall": self.answer_recall,
        }
        if self.probe is not None:
            payload["probe"] = self.probe
        if self.overlap is not None:
            payload["overlap"] = self.overlap
        return payload

    def format_table(self) -> str:
        lines = [f"split: {self.split} ({self.n_questions} questions)"]
        if self.hits:
            lines.append("hits@k (overall and per category):")
            header = ["k"] + ["overall"] + list(CATEGORIES)
            lines.append("  " + "  ".join(f"{h:>9}" for h in header))
            for k in sorted(self.hits["overall"], key=int):
                row = [k, _fmt(self.hits["overall"][k])]
                row += [_fmt(self.hits[c][k]) if self.hits.get(c) else "-" for c in CATEGORIES]
                lines.append("  " + "  ".join(f"{v:>9}" for v in row))
        if self.tolerance_hits1:
            pairs = ", ".join(
                f"+-{w}: {_fmt(v)}" for w, v in sorted(self.tolerance_hits1.items(), key=lambda kv: int(kv[0]))
                if w != "n_time_questions"
            )
            lines.append(f"time hits@1 with tolerance ({self.tolerance_hits1.get('n_time_questions', 0)} questions): {pairs}")
        if self.confusion:
            lines.append(
                "answer-type confusion: entity-as-time "
                f"{_fmt(self.confusion.get('entity_as_time'))}, time-as-entity {_fmt(self.confusion.get('time_as_entity'))}"
            )
        if self.answer_recall:
            lines.append(f"gold-answer recall in subgraphs: {_fmt(self.answer_recall.get('overall'))}")
        if self.probe is not None and self.probe.get("n_probed"):
            lines.append(
                f"question-time probe ({self.probe['n_probed']} questions): "
                f"median |delta| {self.probe['median_abs_delta']}, exact {_fmt(self.probe['pct_exact'])}"
            )
        if self.overlap is not None:
            lines.append(f"hit@1 overlap: {self.overlap['overall']}")
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.4f}"


def build_metrics_report(
    split: str,
    predictions: Sequence[PredictionRecord],
    gold: dict[str, GoldRecord],
    recall: dict[str, float | None],
    ks: Iterable[int] = (1, 2, 3),
    tolerance_windows: Iterable[int] = (0, 1, 3),
) -> MetricsReport:
    hits: dict[str, dict[str, float | None]] = {"overall": {}}
    for c in CATEGORIES:
        hits[c] = {}
    for k in ks:
        overall, breakdown = hits_at_k(predictions, gold, k)
        hits["overall"][str(k)] = overall
        for c in CATEGORIES:
            hits[c][str(k)] = breakdown[c]
    tolerance: dict[str, float | int | None] = {}
    n_time = 0
    for window in tolerance_windows:
        rate, n_time = hits_with_tolerance(predictions, gold, window)
        tolerance[str(window)] = rate
    tolerance["n_time_questions"] = n_time
    return MetricsReport(
        split=split,
        n_questions=len(predictions),
        hits=hits,
        tolerance_hits1=tolerance,
        confusion=answer_type_confusion(predictions, gold),
        answer_recall=recall,
    )
