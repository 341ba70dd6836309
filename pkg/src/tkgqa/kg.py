"""Temporal knowledge graph containers and their on-disk formats.

Facts are quadruples (subject, relation, object, [start_year, end_year])
with inclusive year intervals.  Questions carry their own retrieved
subgraph of facts plus gold answers that are either entities or years.
The background graph used to size embedding tables is the deduplicated
union of all training-split question subgraphs.

File formats
------------
Facts: UTF-8 text, one fact per line, five tab-separated fields
``subject<TAB>relation<TAB>object<TAB>start_year<TAB>end_year``.  Lines
starting with ``#`` and blank lines are ignored.

Questions: UTF-8 JSON lines.  Each record has keys ``id``, ``text``,
``category`` (explicit | implicit | temporal | ordinal), ``facts`` (an
array of five-element arrays mirroring the facts file fields) and
``answers`` (an array of ``{"kind": "entity" | "time", "value": ...}``
objects, entity values by name, time values as integer years).

Loading and construction run single-threaded; the resulting containers
are treated as immutable afterward.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, ContractViolation, ParseError

UNK_NAME = "<unk>"
CATEGORIES = ("explicit", "implicit", "temporal", "ordinal")

_TOKEN_RE = re.compile(r"[a-z0-9_]+")


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase alphanumeric/underscore tokens, in order of appearance."""
    return tuple(_TOKEN_RE.findall(text.lower()))


class Vocabulary:
    """Dense id interning in first-seen order, with optional reserved names."""

    def __init__(self, reserved: Sequence[str] = ()):
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        for name in reserved:
            self.intern(name)

    def intern(self, name: str) -> int:
        idx = self._index.get(name)
        if idx is None:
            idx = len(self._names)
            self._names.append(name)
            self._index[name] = idx
        return idx

    def id_of(self, name: str) -> int:
        return self._index[name]

    def name_of(self, idx: int) -> str:
        return self._names[idx]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self._names)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def content_hash(self) -> str:
        payload = "\n".join(self._names).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True, order=True)
class TemporalFact:
    """One edge of the graph: subject --relation--> object over [start, end]."""

    subject: int
    relation: int
    object: int
    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end:
            raise ContractViolation(f"fact interval start {self.start} exceeds end {self.end}")

    def names(self, entities: Vocabulary, relations: Vocabulary) -> tuple[str, str, str, int, int]:
        return (
            entities.name_of(self.subject),
            relations.name_of(self.relation),
            entities.name_of(self.object),
            self.start,
            self.end,
        )


@dataclass(frozen=True)
class Answer:
    """Gold answer, either an interned entity id or an integer year."""

    kind: str
    value: int

    def __post_init__(self):
        if self.kind not in ("entity", "time"):
            raise ContractViolation(f"unknown answer kind {self.kind!r}")


class QuestionSubgraph:
    """The deduplicated fact set retrieved for one question.

    Edges are stored in canonical sorted order; the node, relation and time
    sets are derived from them, so the stated containment invariants hold by
    construction.
    """

    __slots__ = ("edges", "nodes", "relations", "times")

    def __init__(self, facts: Iterable[TemporalFact]):
        edges = tuple(sorted(set(facts)))
        if not edges:
            raise ContractViolation("question subgraph must contain at least one fact")
        self.edges = edges
        self.nodes = frozenset(e.subject for e in edges) | frozenset(e.object for e in edges)
        self.relations = frozenset(e.relation for e in edges)
        self.times = frozenset(e.start for e in edges) | frozenset(e.end for e in edges)

    def __len__(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class QuestionInstance:
    """One question: text, category, retrieved subgraph and gold answers."""

    qid: str
    text: str
    category: str
    subgraph: QuestionSubgraph
    answers: frozenset[Answer]
    tokens: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ContractViolation(f"unsupported category {self.category!r}")
        if not self.answers:
            raise ContractViolation(f"question {self.qid} has no gold answers")
        if not self.tokens:
            object.__setattr__(self, "tokens", tokenize(self.text))

    def gold_entity_ids(self) -> frozenset[int]:
        return frozenset(a.value for a in self.answers if a.kind == "entity")

    def gold_years(self) -> frozenset[int]:
        return frozenset(a.value for a in self.answers if a.kind == "time")

    def gold_tuples(self, entities: Vocabulary) -> frozenset[tuple[str, object]]:
        """Name-level gold set, as used by the file-based metric functions."""
        out: set[tuple[str, object]] = set()
        for a in self.answers:
            if a.kind == "entity":
                out.add(("entity", entities.name_of(a.value)))
            else:
                out.add(("time", a.value))
        return frozenset(out)


@dataclass
class BackgroundKG:
    """Union of the training-split subgraphs plus the shared vocabularies.

    ``core_entity_count`` and ``core_relation_count`` record the vocabulary
    sizes when the graph was built.  Names interned later (unseen test-time
    entities or relations) map onto the reserved unknown row.  The time
    vocabulary is the contiguous inclusive year range spanned by the union;
    out-of-range years from later splits are clamped to the nearest
    boundary row and recorded in ``out_of_range_years``.
    """

    facts: tuple[TemporalFact, ...]
    entities: Vocabulary
    relations: Vocabulary
    years: tuple[int, ...]
    core_entity_count: int
    core_relation_count: int
    out_of_range_years: set[int] = field(default_factory=set)

    @property
    def min_year(self) -> int:
        return self.years[0]

    @property
    def max_year(self) -> int:
        return self.years[-1]

    def entity_row(self, entity_id: int) -> int:
        return entity_id if entity_id < self.core_entity_count else self.entities.id_of(UNK_NAME)

    def relation_row(self, relation_id: int) -> int:
        return relation_id if relation_id < self.core_relation_count else self.relations.id_of(UNK_NAME)

    def year_row(self, year: int) -> int:
        if year < self.min_year:
            self.out_of_range_years.add(year)
            return 0
        if year > self.max_year:
            self.out_of_range_years.add(year)
            return len(self.years) - 1
        return year - self.min_year

    def canonical_facts(self) -> tuple[tuple[str, str, str, int, int], ...]:
        """Name-level fact tuples in sorted order; independent of id assignment."""
        return tuple(sorted(f.names(self.entities, self.relations) for f in self.facts))

    def vocabulary_hashes(self) -> dict[str, str]:
        return {
            "entities": self.entities.content_hash(),
            "relations": self.relations.content_hash(),
            "years": hashlib.sha256(f"{self.min_year}:{self.max_year}".encode()).hexdigest(),
        }


# ---------------------------------------------------------------------------
# Facts file


def _parse_fact_fields(
    fields: Sequence[str],
    entities: Vocabulary,
    relations: Vocabulary,
    path,
    line_no: int,
) -> TemporalFact:
    if len(fields) != 5:
        raise ParseError(f"expected 5 tab-separated fields, got {len(fields)}", path, line_no)
    subject, relation, obj, start_text, end_text = fields
    if not subject or not relation or not obj:
        raise ParseError("empty subject, relation or object", path, line_no)
    try:
        start = int(start_text)
        end = int(end_text)
    except ValueError:
        raise ParseError(f"non-integer year in {start_text!r}/{end_text!r}", path, line_no) from None
    if start > end:
        raise ParseError(f"interval start {start} exceeds end {end}", path, line_no)
    return TemporalFact(entities.intern(subject), relations.intern(relation), entities.intern(obj), start, end)


def load_facts(path, entities: Vocabulary, relations: Vocabulary) -> list[TemporalFact]:
    """Parse a facts file, interning names into the given vocabularies."""
    facts = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            facts.append(_parse_fact_fields(line.split("\t"), entities, relations, path, line_no))
    return facts


def save_facts(facts: Iterable[TemporalFact], path, entities: Vocabulary, relations: Vocabulary) -> None:
    """Write facts in canonical form: deduplicated, sorted by name fields."""
    rows = sorted(set(f.names(entities, relations) for f in facts))
    with open(path, "w", encoding="utf-8") as handle:
        for subject, relation, obj, start, end in rows:
            handle.write(f"{subject}\t{relation}\t{obj}\t{start}\t{end}\n")


# ---------------------------------------------------------------------------
# Questions file


def _parse_answer(raw, entities: Vocabulary, path, line_no: int) -> Answer:
    if not isinstance(raw, dict) or set(raw) != {"kind", "value"}:
        raise ParseError(f"answer must be an object with kind and value, got {raw!r}", path, line_no)
    kind = raw["kind"]
    value = raw["value"]
    if kind == "entity":
        if not isinstance(value, str) or not value:
            raise ParseError(f"entity answer value must be a name, got {value!r}", path, line_no)
        return Answer("entity", entities.intern(value))
    if kind == "time":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(f"time answer value must be an integer year, got {value!r}", path, line_no)
        return Answer("time", value)
    raise ParseError(f"unsupported answer kind {kind!r}", path, line_no)


def load_questions(
    path,
    entities: Vocabulary,
    relations: Vocabulary,
    kg: BackgroundKG | None = None,
) -> list[QuestionInstance]:
    """Parse a question split.

    When ``kg`` is given (validation and test splits), subgraph years outside
    its time vocabulary are recorded as out of range; unseen entity names are
    interned past the core count and therefore resolve to the unknown row.
    """
    questions: list[QuestionInstance] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", path, line_no) from None
            for key in ("id", "text", "category", "facts", "answers"):
                if key not in record:
                    raise ParseError(f"missing key {key!r}", path, line_no)
            qid = record["id"]
            if not isinstance(qid, str) or not qid:
                raise ParseError("question id must be a non-empty string", path, line_no)
            if qid in seen_ids:
                raise ParseError(f"duplicate question id {qid!r}", path, line_no)
            seen_ids.add(qid)
            category = record["category"]
            if category not in CATEGORIES:
                raise ParseError(f"unsupported category {category!r}", path, line_no)
            raw_facts = record["facts"]
            if not isinstance(raw_facts, list) or not raw_facts:
                raise ParseError("question record needs a non-empty facts array", path, line_no)
            facts = []
            for entry in raw_facts:
                if not isinstance(entry, list) or len(entry) != 5:
                    raise ParseError(f"subgraph fact must be a 5-element array, got {entry!r}", path, line_no)
                facts.append(_parse_fact_fields([str(v) for v in entry], entities, relations, path, line_no))
            raw_answers = record["answers"]
            if not isinstance(raw_answers, list) or not raw_answers:
                raise ParseError("question record needs a non-empty answers array", path, line_no)
            answers = frozenset(_parse_answer(a, entities, path, line_no) for a in raw_answers)
            try:
                question = QuestionInstance(
                    qid=qid,
                    text=str(record["text"]),
                    category=category,
                    subgraph=QuestionSubgraph(facts),
                    answers=answers,
                )
            except ContractViolation as exc:
                raise ParseError(str(exc), path, line_no) from None
            if kg is not None:
                for year in question.subgraph.times:
                    if year < kg.min_year or year > kg.max_year:
                        kg.out_of_range_years.add(year)
            questions.append(question)
    return questions


def question_to_record(question: QuestionInstance, entities: Vocabulary, relations: Vocabulary) -> dict:
    answers = []
    for a in sorted(question.answers, key=lambda a: (a.kind, a.value)):
        value = entities.name_of(a.value) if a.kind == "entity" else a.value
        answers.append({"kind": a.kind, "value": value})
    return {
        "id": question.qid,
        "text": question.text,
        "category": question.category,
        "facts": [list(e.names(entities, relations)) for e in question.subgraph.edges],
        "answers": answers,
    }


def save_questions(questions: Iterable[QuestionInstance], path, entities: Vocabulary, relations: Vocabulary) -> None:
    """Write a question split in canonical form (sorted by id, sorted keys)."""
    records = sorted(
        (question_to_record(q, entities, relations) for q in questions),
        key=lambda r: r["id"],
    )
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# Background graph


def build_background_kg(
    train_questions: Sequence[QuestionInstance],
    entities: Vocabulary,
    relations: Vocabulary,
) -> BackgroundKG:
    """Union the training subgraphs into the shared background graph.

    The result is canonical: facts are deduplicated and sorted by their name
    fields, so permuting the split (or rebuilding) yields the same graph
    content.  The time vocabulary is the contiguous year range covering
    every interval endpoint in the union.
    """
    if not train_questions:
        raise ConfigError("cannot build a background graph from an empty training split")
    union: set[TemporalFact] = set()
    for question in train_questions:
        union.update(question.subgraph.edges)
    facts = tuple(sorted(union, key=lambda f: f.names(entities, relations)))
    min_year = min(f.start for f in facts)
    max_year = max(f.end for f in facts)
    return BackgroundKG(
        facts=facts,
        entities=entities,
        relations=relations,
        years=tuple(range(min_year, max_year + 1)),
        core_entity_count=len(entities),
        core_relation_count=len(relations),
    )


def new_vocabularies() -> tuple[Vocabulary, Vocabulary]:
    """Fresh entity and relation vocabularies with the unknown row reserved."""
    return Vocabulary(reserved=(UNK_NAME,)), Vocabulary(reserved=(UNK_NAME,))


# ---------------------------------------------------------------------------
# Diagnostics


def answer_recall(questions: Sequence[QuestionInstance]) -> dict[str, float | None]:
    """Fraction of questions with at least one gold answer inside the subgraph.

    Entity answers count when the entity is a subgraph node; time answers
    count when the year is one of the subgraph's interval endpoints.  The
    subgraphs are retrieved, not constructed from the answers, so this is a
    measured quantity rather than an assumption.
    """
    per_category: dict[str, list[int]] = {c: [] for c in CATEGORIES}
    for question in questions:
        reachable = bool(
            question.gold_entity_ids() & question.subgraph.nodes
            or question.gold_years() & question.subgraph.times
        )
        per_category[question.category].append(1 if reachable else 0)
    report: dict[str, float | None] = {}
    counted = [v for values in per_category.values() for v in values]
    report["overall"] = sum(counted) / len(counted) if counted else None
    for category, values in per_category.items():
        report[category] = sum(values) / len(values) if values else None
    return report


def dataset_paths(data_dir) -> dict[str, Path]:
    """Conventional file layout of a generated dataset directory."""
    base = Path(data_dir)
    return {
        "facts": base / "facts.tsv",
        "train": base / "train.jsonl",
        "valid": base / "valid.jsonl",
        "test": base / "test.jsonl",
        "manifest": base / "manifest.json",
    }


def load_dataset(data_dir):
    """Load all three splits and build the background graph.

    Returns ``(kg, splits)`` where ``splits`` maps split name to question
    lists.  Train is loaded first so the background graph defines the core
    vocabulary; validation and test are loaded against it.
    """
    paths = dataset_paths(data_dir)
    entities, relations = new_vocabularies()
    train = load_questions(paths["train"], entities, relations)
    kg = build_background_kg(train, entities, relations)
    valid = load_questions(paths["valid"], entities, relations, kg=kg)
    test = load_questions(paths["test"], entities, relations, kg=kg)
    return kg, {"train": train, "valid": valid, "test": test}
