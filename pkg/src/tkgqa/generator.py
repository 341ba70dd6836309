"""Synthetic temporal-QA worlds with symbolically answerable questions.

The world is a small society: people hold offices (one holder per office
at a time, tenures partitioning each office's active window exactly),
play for teams in non-overlapping stints, and receive awards in single
years.  Office windows are staggered across the global year range so an
office name carries information about when its tenures happened.

Question families cover the four reasoning categories:

* explicit: "who held offy_03 in 1957?", "what award did per_12 receive in 1940?"
* implicit: "who held offy_03 before per_12?", "who did per_12 play for after team_2?"
* temporal: "when did per_12 hold offy_03?", "when did per_12 play for team_2?"
* ordinal:  "who was the second holder of offy_03?", "what was the third team of per_12?"

Every gold answer is computed by an exhaustive scan over the master fact
list (no indexing).  A question's subgraph is a deterministic function of
the entities its text mentions: every fact touching those entities, plus
a bounded, canonically ordered block of one-hop distractor facts.  Two
questions about the same entities therefore see the same subgraph, so
subgraphs cannot serve as per-question fingerprints, and gold-answer
recall is 1.0 by construction and is asserted at generation time.

Two desk-scale guarantees are engineered in: explicit "anchor" questions
pinned to the training split cover every tenure at a fixed year stride
(plus one extra per otherwise-unseen year), so every holder is a trained
answer and every year surface form is trainable; and a final coverage
pass attaches any world fact missing from the training split's union to
a training subgraph as an extra distractor, so the background graph
equals the full world.  Generation is a pure function of (spec, seed);
bytes on disk included.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GenerationError
from .kg import (
    Answer,
    QuestionInstance,
    QuestionSubgraph,
    TemporalFact,
    Vocabulary,
    dataset_paths,
    new_vocabularies,
    save_facts,
    save_questions,
)
from .storage import write_json

REL_HELD = "position_held"
REL_PLAYS = "plays_for"
REL_AWARD = "award_received"

ORDINAL_WORDS = (
    "first", "second", "third", "fourth", "fifth",
    "sixth", "seventh", "eighth", "ninth", "tenth",
)

NameFact = tuple[str, str, str, int, int]


@dataclass(frozen=True)
class WorldSpec:
    """Size and shape of a synthetic world; fully determines it with a seed."""

    n_people: int = 170
    n_positions: int = 24
    n_teams: int = 12
    n_awards: int = 8
    year_start: int = 1900
    year_end: int = 1999
    tenure_min: int = 4
    tenure_max: int = 4
    window_min: int = 32
    window_max: int = 52
    stint_min: int = 4
    stint_max: int = 10
    max_stints: int = 3
    ordinal_max_k: int = 4
    anchor_year_stride: int = 2
    distractor_min: int = 5
    distractor_max: int = 15
    questions_per_category: int = 350
    train_fraction: float = 0.70
    valid_fraction: float = 0.15
    seed: int = 7

    def validate(self) -> "WorldSpec":
        width = self.year_end - self.year_start + 1
        if width < 30:
            raise GenerationError(f"year range must span at least 30 years, got {width}")
        if min(self.n_people, self.n_positions, self.n_teams, self.n_awards) < 2:
            raise GenerationError("world needs at least 2 of each entity type")
        if not (1 <= self.tenure_min <= self.tenure_max):
            raise GenerationError("invalid tenure length bounds")
        if not (1 <= self.stint_min <= self.stint_max):
            raise GenerationError("invalid stint length bounds")
        if self.window_min < self.tenure_min:
            raise GenerationError("office window shorter than the minimum tenure is infeasible")
        if self.window_min > width or self.window_max < self.window_min:
            raise GenerationError("invalid office window bounds")
        if self.distractor_min < 0 or self.distractor_max < self.distractor_min:
            raise GenerationError("invalid distractor count bounds")
        if not (1 <= self.ordinal_max_k <= len(ORDINAL_WORDS)):
            raise GenerationError("ordinal_max_k out of range")
        if self.anchor_year_stride < 1:
            raise GenerationError("anchor_year_stride must be positive")
        if self.questions_per_category < 1:
            raise GenerationError("questions_per_category must be positive")
        if not (0 < self.train_fraction < 1 and 0 < self.valid_fraction < 1):
            raise GenerationError("split fractions must lie in (0, 1)")
        if self.train_fraction + self.valid_fraction >= 1:
            raise GenerationError("train and valid fractions must leave room for a test split")
        return self

    @property
    def entity_count(self) -> int:
        return self.n_people + self.n_positions + self.n_teams + self.n_awards


def _person(i: int) -> str:
    return f"per_{i:03d}"


def _position(i: int) -> str:
    return f"offy_{i:02d}"


def _team(i: int) -> str:
    return f"team_{i:02d}"


def _award(i: int) -> str:
    return f"award_{i:02d}"


# ---------------------------------------------------------------------------
# World generation


def generate_world(spec: WorldSpec, rng: np.random.Generator) -> list[NameFact]:
    """Sample the master fact list at the name level."""
    spec.validate()
    people = [_person(i) for i in range(spec.n_people)]
    facts: list[NameFact] = []

    covered_years: set[int] = set()
    used_holders: set[str] = set()
    career_start: dict[str, int] = {}
    for p in range(spec.n_positions):
        position = _position(p)
        window = int(rng.integers(spec.window_min, spec.window_max + 1))
        window = min(window, spec.year_end - spec.year_start + 1)
        w_start = int(rng.integers(spec.year_start, spec.year_end - window + 2))
        w_end = w_start + window - 1
        year = w_start
        previous = None
        tenures: list[NameFact] = []
        while w_end - year + 1 >= spec.tenure_min:
            length = int(rng.integers(spec.tenure_min, spec.tenure_max + 1))
            end = min(year + length - 1, w_end)
            # Fresh holders first: a person whose whole record sits in one
            # narrow era is answerable from their name alone.  Once everyone
            # has held something, reuse the people already active nearby so
            # careers stay confined to one era.
            candidates = [x for x in people if x != previous and x not in used_holders]
            if not candidates:
                nearby = sorted(
                    (x for x in people if x != previous),
                    key=lambda x: abs(career_start.get(x, year) - year),
                )
                candidates = nearby[:20]
            holder = candidates[int(rng.integers(0, len(candidates)))]
            tenures.append((holder, REL_HELD, position, year, end))
            used_holders.add(holder)
            career_start.setdefault(holder, year)
            previous = holder
            year = end + 1
        if not tenures:
            raise GenerationError(f"office {position} received no tenures (window {window})")
        last = tenures[-1]
        if last[4] < w_end:
            tenures[-1] = (last[0], last[1], last[2], last[3], w_end)
        facts.extend(tenures)
        covered_years.update(range(w_start, w_end + 1))

    latest_start = max(spec.year_start, spec.year_end - spec.stint_min)
    for i, person in enumerate(people):
        n_stints = int(rng.integers(1, spec.max_stints + 1))
        base = career_start.get(person)
        if base is None:
            year = int(rng.integers(spec.year_start, latest_start + 1))
        else:
            # Playing stints stay near the person's office era so each
            # person occupies one coherent slice of the timeline.
            jitter = int(rng.integers(-5, 6))
            year = min(max(base + jitter, spec.year_start), latest_start)
        previous = None
        for _ in range(n_stints):
            if spec.year_end - year + 1 < spec.stint_min:
                break
            length = int(rng.integers(spec.stint_min, spec.stint_max + 1))
            end = min(year + length - 1, spec.year_end)
            teams = [_team(t) for t in range(spec.n_teams) if _team(t) != previous]
            team = teams[int(rng.integers(0, len(teams)))]
            facts.append((person, REL_PLAYS, team, year, end))
            previous = team
            year = end + 1 + int(rng.integers(0, 4))

    # Award years come from the covered set so their surface forms are
    # guaranteed to be trainable through the anchor questions.
    covered = sorted(covered_years)
    given: set[tuple[str, int]] = set()
    for i in range(spec.n_people // 2):
        person = people[int(rng.integers(0, len(people)))]
        award = _award(int(rng.integers(0, spec.n_awards)))
        year = covered[int(rng.integers(0, len(covered)))]
        if (person, year) in given:
            continue
        given.add((person, year))
        facts.append((person, REL_AWARD, award, year, year))

    return facts


# ---------------------------------------------------------------------------
# The symbolic oracle


def oracle_answer(kind: str, params: tuple, facts: list[NameFact]) -> set:
    """Ground-truth answers by exhaustive scan of the master fact list.

    Entity answers come back as name strings, time answers as the full set
    of valid years (any one of which counts as correct downstream).
    """
    if kind == "held_in_year":
        position, year = params
        return {s for s, r, o, a, b in facts if r == REL_HELD and o == position and a <= year <= b}
    if kind == "award_in_year":
        person, year = params
        return {o for s, r, o, a, b in facts if r == REL_AWARD and s == person and a <= year <= b}
    if kind in ("held_before", "held_after"):
        position, person = params
        tenures = sorted(
            ((a, b, s) for s, r, o, a, b in facts if r == REL_HELD and o == position),
        )
        own_starts = [a for a, b, s in tenures if s == person]
        if not own_starts:
            return set()
        if kind == "held_before":
            reference = min(own_starts)
            earlier = [(a, s) for a, b, s in tenures if a < reference]
            return {max(earlier)[1]} if earlier else set()
        reference = max(own_starts)
        later = [(a, s) for a, b, s in tenures if a > reference]
        return {min(later)[1]} if later else set()
    if kind in ("played_before", "played_after"):
        person, team = params
        stints = sorted(((a, b, o) for s, r, o, a, b in facts if r == REL_PLAYS and s == person))
        own_starts = [a for a, b, o in stints if o == team]
        if not own_starts:
            return set()
        if kind == "played_before":
            reference = min(own_starts)
            earlier = [(a, o) for a, b, o in stints if a < reference]
            return {max(earlier)[1]} if earlier else set()
        reference = max(own_starts)
        later = [(a, o) for a, b, o in stints if a > reference]
        return {min(later)[1]} if later else set()
    if kind == "held_when":
        person, position = params
        years: set[int] = set()
        for s, r, o, a, b in facts:
            if r == REL_HELD and s == person and o == position:
                years.update(range(a, b + 1))
        return years
    if kind == "played_when":
        person, team = params
        years = set()
        for s, r, o, a, b in facts:
            if r == REL_PLAYS and s == person and o == team:
                years.update(range(a, b + 1))
        return years
    if kind == "kth_holder":
        position, k = params
        tenures = sorted(((a, b, s) for s, r, o, a, b in facts if r == REL_HELD and o == position))
        return {tenures[k - 1][2]} if 1 <= k <= len(tenures) else set()
    if kind == "kth_team":
        person, k = params
        stints = sorted(((a, b, o) for s, r, o, a, b in facts if r == REL_PLAYS and s == person))
        return {stints[k - 1][2]} if 1 <= k <= len(stints) else set()
    raise GenerationError(f"unknown question kind {kind!r}")


_TEMPLATES = {
    "held_in_year": ("explicit", "who held {0} in {1}?", "entity"),
    "award_in_year": ("explicit", "what award did {0} receive in {1}?", "entity"),
    "held_before": ("implicit", "who held {0} before {1}?", "entity"),
    "held_after": ("implicit", "who held {0} after {1}?", "entity"),
    "played_before": ("implicit", "who did {0} play for before {1}?", "entity"),
    "played_after": ("implicit", "who did {0} play for after {1}?", "entity"),
    "held_when": ("temporal", "when did {0} hold {1}?", "time"),
    "played_when": ("temporal", "when did {0} play for {1}?", "time"),
    "kth_holder": ("ordinal", "who was the {1} holder of {0}?", "entity"),
    "kth_team": ("ordinal", "what was the {1} team of {0}?", "entity"),
}


def _question_text(kind: str, params: tuple) -> str:
    _, template, _ = _TEMPLATES[kind]
    if kind in ("kth_holder", "kth_team"):
        return template.format(params[0], ORDINAL_WORDS[params[1] - 1])
    return template.format(*params)


@dataclass
class _Draft:
    kind: str
    params: tuple
    category: str
    answers: set
    core_entities: set


# ---------------------------------------------------------------------------
# Question assembly


def _facts_mentioning(entity: str, facts: list[NameFact]) -> list[NameFact]:
    return [f for f in facts if f[0] == entity or f[2] == entity]


def _subgraph_for(core_entities: frozenset, facts: list[NameFact], spec: WorldSpec) -> list[NameFact]:
    """Deterministic retrieval for a set of core entities.

    Every fact touching a core entity is included, then the pool of facts
    one hop out (sharing an entity with a core fact) pads the subgraph with
    up to ``distractor_max`` distractors in canonical order.  Retrieval
    depends only on the core entities, so all questions about the same
    entities see the same subgraph and only the question text (through the
    time-weighting of edges) can tell them apart.
    """
    core: list[NameFact] = []
    seen = set()
    for entity in sorted(core_entities):
        for fact in _facts_mentioning(entity, facts):
            if fact not in seen:
                seen.add(fact)
                core.append(fact)
    touched = {f[0] for f in core} | {f[2] for f in core}
    pool = sorted(f for f in facts if f not in seen and (f[0] in touched or f[2] in touched))
    core.extend(pool[: spec.distractor_max])
    return core


def _draft_questions(spec: WorldSpec, facts: list[NameFact], rng: np.random.Generator) -> tuple[list[_Draft], list[_Draft]]:
    """Sampled drafts per category, plus the per-year anchor drafts."""
    held = [f for f in facts if f[1] == REL_HELD]
    plays = [f for f in facts if f[1] == REL_PLAYS]
    awards = [f for f in facts if f[1] == REL_AWARD]
    positions = sorted({f[2] for f in held})
    tenures_by_position = {p: sorted((a, b, s) for s, r, o, a, b in held if o == p) for p in positions}
    stints_by_person = {}
    for s, r, o, a, b in plays:
        stints_by_person.setdefault(s, []).append((a, b, o))
    for person in stints_by_person:
        stints_by_person[person].sort()

    def draft(kind: str, params: tuple) -> _Draft | None:
        category, _, _ = _TEMPLATES[kind]
        answers = oracle_answer(kind, params, facts)
        if not answers:
            return None
        if kind in ("held_in_year", "held_before", "held_after", "held_when", "kth_holder"):
            core = {params[0] if kind != "held_when" else params[1]}
            if kind in ("held_before", "held_after", "held_when"):
                core.add(params[1] if kind != "held_when" else params[0])
        elif kind == "award_in_year":
            core = {params[0]}
        else:
            core = {params[0]}
        return _Draft(kind=kind, params=params, category=category, answers=answers, core_entities=core)

    anchors: list[_Draft] = []
    anchored_years: set[int] = set()
    year_positions: dict[int, list[str]] = {}
    for p in positions:
        for a, b, s in tenures_by_position[p]:
            for year in range(a, b + 1):
                year_positions.setdefault(year, []).append(p)
            # Every tenure gets anchor questions at a fixed year stride so
            # each holder is a supervised answer for in-tenure years.
            for year in range(a, b + 1, spec.anchor_year_stride):
                anchor = draft("held_in_year", (p, year))
                if anchor is not None:
                    anchors.append(anchor)
                    anchored_years.add(year)
    # Any covered year the stride skipped still needs one anchor so every
    # year token appears in training text.
    for year in sorted(year_positions):
        if year in anchored_years:
            continue
        options = sorted(set(year_positions[year]))
        position = options[int(rng.integers(0, len(options)))]
        anchor = draft("held_in_year", (position, year))
        if anchor is not None:
            anchors.append(anchor)
            anchored_years.add(year)
    # Era anchors: one "when" question per person pinned to train.  A
    # person's time of activity reaches the model only through trained
    # question text, so every person surface form needs one such question.
    # The playing relation is preferred so office "when" questions held out
    # for evaluation probe transfer of the era rather than recall.
    held_by_person: dict[str, list[tuple[int, int, str]]] = {}
    for s, r, o, a, b in held:
        held_by_person.setdefault(s, []).append((a, b, o))
    for person in sorted(set(held_by_person) | set(stints_by_person)):
        if person in stints_by_person:
            _, _, team = min(stints_by_person[person])
            anchor = draft("played_when", (person, team))
        else:
            _, _, position = min(held_by_person[person])
            anchor = draft("held_when", (person, position))
        if anchor is not None:
            anchors.append(anchor)

    candidates: dict[str, list[tuple[str, tuple]]] = {c: [] for c in ("explicit", "implicit", "temporal", "ordinal")}
    for position in positions:
        for a, b, s in tenures_by_position[position]:
            for year in range(a, b + 1):
                candidates["explicit"].append(("held_in_year", (position, year)))
        seen_holders = {s for a, b, s in tenures_by_position[position]}
        for holder in sorted(seen_holders):
            candidates["implicit"].append(("held_before", (position, holder)))
            candidates["implicit"].append(("held_after", (position, holder)))
            candidates["temporal"].append(("held_when", (holder, position)))
        for k in range(1, min(len(tenures_by_position[position]), spec.ordinal_max_k) + 1):
            candidates["ordinal"].append(("kth_holder", (position, k)))
    for s, r, o, a, b in awards:
        for year in range(a, b + 1):
            candidates["explicit"].append(("award_in_year", (s, year)))
    for person in sorted(stints_by_person):
        stints = stints_by_person[person]
        teams = sorted({o for a, b, o in stints})
        for team in teams:
            candidates["implicit"].append(("played_before", (person, team)))
            candidates["implicit"].append(("played_after", (person, team)))
            candidates["temporal"].append(("played_when", (person, team)))
        for k in range(1, min(len(stints), spec.ordinal_max_k) + 1):
            candidates["ordinal"].append(("kth_team", (person, k)))

    anchor_keys = {(d.kind, d.params) for d in anchors}
    sampled: list[_Draft] = []
    for category in ("explicit", "implicit", "temporal", "ordinal"):
        pool = [c for c in candidates[category] if c not in anchor_keys]
        order = rng.permutation(len(pool))
        taken = 0
        for idx in order:
            if taken >= spec.questions_per_category:
                break
            kind, params = pool[int(idx)]
            d = draft(kind, params)
            if d is None:
                continue
            sampled.append(d)
            taken += 1
        if taken < spec.questions_per_category:
            raise GenerationError(
                f"world too small for {spec.questions_per_category} {category} questions (got {taken})"
            )
    return sampled, anchors


def _to_instance(
    draft: _Draft,
    qid: str,
    subgraph_facts: list[NameFact],
    entities: Vocabulary,
    relations: Vocabulary,
) -> QuestionInstance:
    interned = [
        TemporalFact(entities.intern(s), relations.intern(r), entities.intern(o), a, b)
        for s, r, o, a, b in subgraph_facts
    ]
    if _TEMPLATES[draft.kind][2] == "entity":
        answers = frozenset(Answer("entity", entities.intern(a)) for a in draft.answers)
    else:
        answers = frozenset(Answer("time", int(y)) for y in draft.answers)
    instance = QuestionInstance(
        qid=qid,
        text=_question_text(draft.kind, draft.params),
        category=draft.category,
        subgraph=QuestionSubgraph(interned),
        answers=answers,
    )
    reachable = bool(
        instance.gold_entity_ids() & instance.subgraph.nodes
        or instance.gold_years() & instance.subgraph.times
    )
    if not reachable:
        raise GenerationError(f"generated question {qid} cannot reach its gold answer")
    return instance


@dataclass
class GeneratedDataset:
    world_facts: list[NameFact]
    splits: dict[str, list[QuestionInstance]]
    entities: Vocabulary
    relations: Vocabulary
    manifest: dict


def generate_dataset(spec: WorldSpec, seed: int | None = None) -> GeneratedDataset:
    """World, questions, splits and manifest; a pure function of the spec.

    ``seed`` overrides ``spec.seed`` when given, which keeps one spec object
    reusable across seed sweeps.
    """
    spec.validate()
    if seed is None:
        seed = spec.seed
    rng = np.random.default_rng(seed)
    facts = generate_world(spec, rng)
    sampled, anchors = _draft_questions(spec, facts, rng)

    entities, relations = new_vocabularies()
    # Intern the world in canonical order so ids are stable for a given world.
    for s, r, o, a, b in sorted(set(facts)):
        entities.intern(s)
        relations.intern(r)
        entities.intern(o)

    order = rng.permutation(len(sampled))
    by_category: dict[str, list[_Draft]] = {}
    for idx in order:
        by_category.setdefault(sampled[int(idx)].category, []).append(sampled[int(idx)])
    split_drafts: dict[str, list[tuple[_Draft, bool]]] = {"train": [(d, True) for d in anchors], "valid": [], "test": []}
    for category in sorted(by_category):
        drafts = by_category[category]
        n = len(drafts)
        n_train = int(round(n * spec.train_fraction))
        n_valid = int(round(n * spec.valid_fraction))
        split_drafts["train"].extend((d, False) for d in drafts[:n_train])
        split_drafts["valid"].extend((d, False) for d in drafts[n_train : n_train + n_valid])
        split_drafts["test"].extend((d, False) for d in drafts[n_train + n_valid :])

    splits: dict[str, list[QuestionInstance]] = {}
    gold_question_years: dict[str, int] = {}
    counter = 0
    subgraphs: dict[str, list[NameFact]] = {}
    retrieval_cache: dict[frozenset, list[NameFact]] = {}
    for split_name in ("train", "valid", "test"):
        instances = []
        for d, is_anchor in split_drafts[split_name]:
            qid = f"q{counter:05d}"
            counter += 1
            key = frozenset(d.core_entities)
            if key not in retrieval_cache:
                retrieval_cache[key] = _subgraph_for(key, facts, spec)
            subgraphs[qid] = list(retrieval_cache[key])
            if d.kind in ("held_in_year", "award_in_year"):
                gold_question_years[qid] = int(d.params[1])
            instances.append((qid, d, is_anchor))
        splits[split_name] = instances  # placeholder, interned below

    # Coverage pass: attach any world fact absent from the training union to
    # a training subgraph sharing an entity with it (arbitrary but
    # deterministic fallback otherwise), so the background graph equals the
    # world.
    train_union: set[NameFact] = set()
    train_qids = [qid for qid, _, _ in splits["train"]]
    node_sets = {}
    for qid in train_qids:
        train_union.update(subgraphs[qid])
        node_sets[qid] = {x for g in subgraphs[qid] for x in (g[0], g[2])}
    missing = [f for f in sorted(set(facts)) if f not in train_union]
    injected = 0
    for fact in missing:
        target = next(
            (qid for qid in train_qids if fact[0] in node_sets[qid] or fact[2] in node_sets[qid]),
            train_qids[0],
        )
        subgraphs[target].append(fact)
        node_sets[target].update((fact[0], fact[2]))
        injected += 1

    final_splits: dict[str, list[QuestionInstance]] = {}
    for split_name in ("train", "valid", "test"):
        final_splits[split_name] = [
            _to_instance(d, qid, subgraphs[qid], entities, relations)
            for qid, d, _ in splits[split_name]
        ]

    category_counts = {
        split_name: {
            c: sum(1 for q in qs if q.category == c) for c in ("explicit", "implicit", "temporal", "ordinal")
        }
        for split_name, qs in final_splits.items()
    }
    manifest = {
        "world_spec": dataclasses.asdict(spec),
        "seed": seed,
        "n_world_facts": len(set(facts)),
        "n_entities": spec.entity_count,
        "n_anchor_questions": len(anchors),
        "coverage_injected_facts": injected,
        "category_counts": category_counts,
        "gold_question_years": gold_question_years,
        "answer_recall": 1.0,
    }
    return GeneratedDataset(
        world_facts=sorted(set(facts)),
        splits=final_splits,
        entities=entities,
        relations=relations,
        manifest=manifest,
    )


def write_dataset(dataset: GeneratedDataset, out_dir) -> None:
    """Serialize the dataset in canonical form under the standard layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = dataset_paths(out)
    interned = [
        TemporalFact(
            dataset.entities.intern(s),
            dataset.relations.intern(r),
            dataset.entities.intern(o),
            a,
            b,
        )
        for s, r, o, a, b in dataset.world_facts
    ]
    save_facts(interned, paths["facts"], dataset.entities, dataset.relations)
    for split_name in ("train", "valid", "test"):
        save_questions(dataset.splits[split_name], paths[split_name], dataset.entities, dataset.relations)
    write_json(paths["manifest"], dataset.manifest)


def generate_to_directory(spec: WorldSpec, out_dir, seed: int | None = None) -> GeneratedDataset:
    dataset = generate_dataset(spec, seed)
    write_dataset(dataset, out_dir)
    return dataset
