"""Metric arithmetic on fixed prediction fixtures with precomputed values."""

import json

import numpy as np
import pytest

from tkgqa.config import TrainingConfig
from tkgqa.encoders import init_random
from tkgqa.errors import EvaluationError, ParseError
from tkgqa.evaluation import (
    GoldRecord,
    PredictionRecord,
    answer_type_confusion,
    build_metrics_report,
    extract_question_year,
    gold_records,
    hits_at_k,
    hits_with_tolerance,
    prediction_overlap,
    predictions_from_model,
    question_time_probe,
    read_predictions,
    write_predictions,
)
from tkgqa.kg import (
    Answer,
    QuestionInstance,
    QuestionSubgraph,
    TemporalFact,
    build_background_kg,
    new_vocabularies,
)
from tkgqa.model import build_model_for_dataset, prepare_question


def pred(qid, ranked, gate=0.5):
    return PredictionRecord(qid=qid, gate=gate, ranked=ranked)


def entity(name, score):
    return ("entity", name, score)


def time(year, score):
    return ("time", year, score)


def fixture():
    """Ten questions with hand-computed metric values.

    hits@1 = 0.4, hits@2 = 0.7, hits@3 = 0.9; per category at k=1:
    explicit 2/3, implicit 0, temporal 1/3, ordinal 1/2.
    """
    gold = {
        "q01": GoldRecord("q01", "explicit", frozenset({("entity", "alice")})),
        "q02": GoldRecord("q02", "explicit", frozenset({("entity", "bob")})),
        "q03": GoldRecord("q03", "implicit", frozenset({("entity", "carol")})),
        "q04": GoldRecord("q04", "implicit", frozenset({("entity", "erin")})),
        "q05": GoldRecord("q05", "temporal", frozenset({("time", 1992)})),
        "q06": GoldRecord("q06", "temporal", frozenset({("time", 1955)})),
        "q07": GoldRecord("q07", "temporal", frozenset({("time", 1970)})),
        "q08": GoldRecord("q08", "ordinal", frozenset({("entity", "gina")})),
        "q09": GoldRecord("q09", "ordinal", frozenset({("entity", "hank")})),
        "q10": GoldRecord("q10", "explicit", frozenset({("entity", "ivy")})),
    }
    predictions = [
        pred("q01", [entity("alice", 9.0), entity("bob", 8.0), time(1950, 7.0)]),
        pred("q02", [entity("carol", 9.0), time(1951, 8.0), entity("bob", 7.0)]),
        pred("q03", [entity("dave", 9.0), time(1950, 8.0), entity("carol", 7.0)]),
        pred("q04", [entity("frank", 9.0), entity("gina", 8.0), entity("hank", 7.0)]),
        pred("q05", [time(1990, 9.0), time(1992, 8.0), entity("alice", 7.0)]),
        pred("q06", [time(1955, 9.0), time(1956, 8.0), time(1954, 7.0)]),
        pred("q07", [entity("frank", 9.0), time(1970, 8.0), time(1971, 7.0)]),
        pred("q08", [time(1960, 9.0), entity("gina", 8.0), entity("ivy", 7.0)]),
        pred("q09", [entity("hank", 9.0), entity("gina", 8.0), time(1960, 7.0)]),
        pred("q10", [entity("ivy", 9.0), entity("alice", 8.0), time(1950, 7.0)]),
    ]
    return predictions, gold


# ---------------------------------------------------------------------------
# hits@k


def test_hits_at_k_golden_values():
    predictions, gold = fixture()
    overall1, by_cat1 = hits_at_k(predictions, gold, 1)
    assert overall1 == pytest.approx(0.4)
    assert by_cat1["explicit"] == pytest.approx(2 / 3)
    assert by_cat1["implicit"] == pytest.approx(0.0)
    assert by_cat1["temporal"] == pytest.approx(1 / 3)
    assert by_cat1["ordinal"] == pytest.approx(0.5)
    overall2, _ = hits_at_k(predictions, gold, 2)
    overall3, _ = hits_at_k(predictions, gold, 3)
    assert overall2 == pytest.approx(0.7)
    assert overall3 == pytest.approx(0.9)


def test_hits_non_decreasing_in_k():
    predictions, gold = fixture()
    rates = [hits_at_k(predictions, gold, k)[0] for k in (1, 2, 3)]
    assert rates == sorted(rates)


def test_overall_is_count_weighted_mean_of_categories():
    predictions, gold = fixture()
    overall, by_cat = hits_at_k(predictions, gold, 1)
    sizes = {c: sum(1 for g in gold.values() if g.category == c) for c in by_cat}
    weighted = sum(by_cat[c] * sizes[c] for c in by_cat if by_cat[c] is not None)
    assert overall == pytest.approx(weighted / len(gold))


def test_single_hit_in_two_questions_is_half():
    predictions, gold = fixture()
    subset = [predictions[0], predictions[3]]
    overall, _ = hits_at_k(subset, gold, 1)
    assert overall == pytest.approx(0.5)


def test_predictions_without_gold_are_an_error():
    predictions, gold = fixture()
    orphan = pred("q99", [entity("x", 3.0), entity("y", 2.0), entity("z", 1.0)])
    with pytest.raises(EvaluationError, match="q99"):
        hits_at_k(predictions + [orphan], gold, 1)


def test_empty_category_reports_none():
    predictions, gold = fixture()
    subset = [predictions[0]]
    _, by_cat = hits_at_k(subset, gold, 1)
    assert by_cat["temporal"] is None


# ---------------------------------------------------------------------------
# Temporal tolerance


def test_off_by_two_year_needs_a_three_year_window():
    predictions, gold = fixture()
    rate0, n = hits_with_tolerance(predictions, gold, 0)
    rate1, _ = hits_with_tolerance(predictions, gold, 1)
    rate3, _ = hits_with_tolerance(predictions, gold, 3)
    assert n == 3
    assert rate0 == pytest.approx(1 / 3)
    assert rate1 == pytest.approx(1 / 3)
    assert rate3 == pytest.approx(2 / 3)


def test_entity_top_answer_misses_at_any_window():
    gold = {"q": GoldRecord("q", "temporal", frozenset({("time", 1970)}))}
    predictions = [pred("q", [entity("frank", 9.0), time(1970, 8.0), time(1969, 7.0)])]
    for window in (0, 1, 100):
        rate, n = hits_with_tolerance(predictions, gold, window)
        assert n == 1
        assert rate == 0.0


def test_tolerance_uses_nearest_gold_year():
    gold = {"q": GoldRecord("q", "temporal", frozenset({("time", 1950), ("time", 1980)}))}
    predictions = [pred("q", [time(1978, 9.0), time(1950, 8.0), time(1949, 7.0)])]
    rate, _ = hits_with_tolerance(predictions, gold, 2)
    assert rate == 1.0


def test_tolerance_rate_is_none_without_time_questions():
    gold = {"q": GoldRecord("q", "explicit", frozenset({("entity", "alice")}))}
    predictions = [pred("q", [entity("alice", 9.0), entity("bob", 8.0), entity("eve", 7.0)])]
    rate, n = hits_with_tolerance(predictions, gold, 3)
    assert rate is None
    assert n == 0


def test_negative_window_is_rejected():
    with pytest.raises(EvaluationError):
        hits_with_tolerance([], {}, -1)


# ---------------------------------------------------------------------------
# Answer-type confusion


def test_confusion_golden_values():
    predictions, gold = fixture()
    confusion = answer_type_confusion(predictions, gold)
    assert confusion["entity_as_time"] == pytest.approx(1 / 7)
    assert confusion["time_as_entity"] == pytest.approx(1 / 3)
    assert confusion["n_entity_questions"] == 7
    assert confusion["n_time_questions"] == 3


def test_no_confusion_when_types_match():
    gold = {
        "a": GoldRecord("a", "explicit", frozenset({("entity", "x")})),
        "b": GoldRecord("b", "temporal", frozenset({("time", 1950)})),
    }
    predictions = [
        pred("a", [entity("y", 3.0), entity("x", 2.0), entity("z", 1.0)]),
        pred("b", [time(1900, 3.0), time(1950, 2.0), time(1902, 1.0)]),
    ]
    confusion = answer_type_confusion(predictions, gold)
    assert confusion["entity_as_time"] == 0.0
    assert confusion["time_as_entity"] == 0.0


# ---------------------------------------------------------------------------
# Year extraction and the question-time probe


@pytest.mark.parametrize(
    "text,year",
    [
        ("who held offy_03 in 1957?", 1957),
        ("what happened in 1957 and 1960?", 1957),
        ("who was the second holder of offy_03?", None),
        ("who ruled in 44 BC?", -44),
        ("who ruled in 300 BCE?", -300),
        ("chapter 250 of the chronicle?", None),
        ("the year 2100 exactly?", 2100),
        ("the year 2101 exactly?", None),
    ],
)
def test_year_extraction(text, year):
    assert extract_question_year(text) == year


def probe_fixture():
    entities, relations = new_vocabularies()
    held = relations.intern("held")
    questions = []
    for i, year in enumerate(range(1950, 1960)):
        office = entities.intern(f"office_{i}")
        person = entities.intern(f"p{i}")
        fact = TemporalFact(person, held, office, year, year)
        questions.append(
            QuestionInstance(
                qid=f"q{i}",
                text=f"who held office_{i} in {year}?",
                category="explicit",
                subgraph=QuestionSubgraph([fact]),
                answers=frozenset({Answer("entity", person)}),
            )
        )
    kg = build_background_kg(questions, entities, relations)
    cfg = TrainingConfig(dim=16, question_dim=16, basis_count=2)
    store = init_random(kg, 16, seed=3)
    model = build_model_for_dataset(kg, questions, store, cfg, seed=3)
    prepared = [prepare_question(q, kg, model.token_vocab) for q in questions]
    return model, prepared


def test_probe_reads_years_back_out_of_seeded_questions():
    model, prepared = probe_fixture()
    stats = question_time_probe(model, prepared)
    assert stats["n_probed"] == len(prepared)
    assert stats["median_abs_delta"] == 0.0
    assert stats["pct_exact"] == 1.0
    assert stats["per_category"]["explicit"]["n"] == len(prepared)


def test_probe_skips_questions_without_extractable_years():
    model, prepared = probe_fixture()
    stats = question_time_probe(model, prepared, gold_years={"q0": 1950})
    assert stats["n_probed"] == 1


def test_probe_on_yearless_split_warns_and_returns_empty(caplog):
    model, prepared = probe_fixture()
    with caplog.at_level("WARNING", logger="tkgqa.evaluation"):
        stats = question_time_probe(model, prepared, gold_years={})
    assert stats["n_probed"] == 0
    assert stats["median_abs_delta"] is None
    assert any("probe" in message for message in caplog.messages)


# ---------------------------------------------------------------------------
# Prediction overlap


def test_overlap_with_self_has_no_exclusive_cells():
    predictions, gold = fixture()
    overlap = prediction_overlap(predictions, predictions, gold)
    assert overlap["overall"]["only_a"] == 0
    assert overlap["overall"]["only_b"] == 0
    assert overlap["overall"]["both"] == 4
    assert overlap["overall"]["neither"] == 6


def test_overlap_counts_sum_to_split_sizes():
    predictions, gold = fixture()
    flipped = [
        pred("q01", [entity("zed", 9.0), entity("alice", 8.0), time(1950, 7.0)]),
        *predictions[1:3],
        pred("q04", [entity("erin", 9.0), entity("gina", 8.0), entity("hank", 7.0)]),
        *predictions[4:],
    ]
    overlap = prediction_overlap(predictions, flipped, gold)
    cells = overlap["overall"]
    assert cells == {"both": 3, "only_a": 1, "only_b": 1, "neither": 5}
    assert sum(cells.values()) == len(gold)
    for category, sub in overlap["per_category"].items():
        size = sum(1 for g in gold.values() if g.category == category)
        assert sum(sub.values()) == size


def test_overlap_requires_identical_id_sets():
    predictions, gold = fixture()
    with pytest.raises(EvaluationError, match="q10"):
        prediction_overlap(predictions, predictions[:-1], gold)


# ---------------------------------------------------------------------------
# Prediction files


def test_prediction_file_round_trip(tmp_path):
    predictions, _ = fixture()
    path = tmp_path / "preds.jsonl"
    write_predictions(predictions, path)
    loaded = read_predictions(path)
    assert [p.qid for p in loaded] == [p.qid for p in predictions]
    assert loaded[0].ranked == predictions[0].ranked
    assert loaded[0].gate == predictions[0].gate


def test_short_ranked_list_rejected_on_write(tmp_path):
    record = pred("q", [entity("a", 1.0), entity("b", 0.5)])
    with pytest.raises(EvaluationError):
        write_predictions([record], tmp_path / "preds.jsonl")


def test_malformed_prediction_lines_carry_line_numbers(tmp_path):
    path = tmp_path / "preds.jsonl"
    good = json.dumps(
        {"id": "q", "gate": 0.5, "ranked": [{"kind": "entity", "value": "a", "score": 1.0}] * 3}
    )
    path.write_text(good + "\n{broken\n", encoding="utf-8")
    with pytest.raises(ParseError, match=":2:"):
        read_predictions(path)


def test_prediction_records_from_model_are_order_stable_across_workers():
    model, prepared = probe_fixture()
    serial = predictions_from_model(model, prepared, k=3, workers=1)
    threaded = predictions_from_model(model, prepared, k=3, workers=4)
    assert [p.qid for p in serial] == [p.qid for p in threaded]
    for a, b in zip(serial, threaded):
        assert a.ranked == b.ranked
    with pytest.raises(EvaluationError):
        predictions_from_model(model, prepared, k=2)


# ---------------------------------------------------------------------------
# Reports


def test_metrics_report_keys_and_values_are_stable():
    predictions, gold = fixture()
    recall = {"overall": 1.0}
    report = build_metrics_report("test", predictions, gold, recall)
    payload = report.to_dict()
    assert sorted(payload) == [
        "answer_recall",
        "confusion",
        "hits",
        "n_questions",
        "split",
        "tolerance_hits1",
    ]
    assert payload["hits"]["overall"] == {"1": 0.4, "2": 0.7, "3": 0.9}
    assert payload["tolerance_hits1"]["0"] == pytest.approx(1 / 3)
    assert payload["tolerance_hits1"]["3"] == pytest.approx(2 / 3)
    assert payload["tolerance_hits1"]["n_time_questions"] == 3
    assert payload["n_questions"] == 10

    table = report.format_table()
    assert "split: test" in table
    assert "hits@k" in table


def test_gold_records_resolve_entity_names():
    entities, relations = new_vocabularies()
    person = entities.intern("alice")
    office = entities.intern("office")
    q = QuestionInstance(
        qid="q0",
        text="who held office in 1950?",
        category="explicit",
        subgraph=QuestionSubgraph([TemporalFact(person, relations.intern("held"), office, 1950, 1955)]),
        answers=frozenset({Answer("entity", person)}),
    )
    records = gold_records([q], entities)
    assert records["q0"].answers == frozenset({("entity", "alice")})
