import math
import random

import pytest
from hypothesis import given, strategies as st

from rationale_vt.judgments import (
    EvalItem,
    FidelityReport,
    JUDGMENTS_PER_ITEM,
    JudgmentError,
    JudgmentRecord,
    LABELS,
    PhraseLists,
    PlausibilityMode,
    RuleTagger,
    aggregate_fidelity,
    aggregate_grammaticality,
    aggregate_plausibility,
    analyze_lengths,
    assemble_report,
    correlate,
    extract_phrases,
    make_eval_items,
    merge_weak,
    plausibility_variation,
)
from rationale_vt.fusion import VARIANTS

from oracles import oracle_pearson


def make_record(item_id="item-1", worker_id="w1", textual="yes", visual="yes",
                grammatical="yes", unrelated="no", phrases=()):
    return JudgmentRecord(
        item_id=item_id,
        worker_id=worker_id,
        textual_plausibility=textual,
        visual_plausibility=visual,
        grammatical=grammatical,
        unrelated_content=unrelated,
        unrelated_phrases=list(phrases),
        timestamp=0.0,
    )


def make_item(item_id="item-1", rationale="the dog is not running in the park",
              nouns=("dog", "park"), nps=("the dog", "the park"),
              vps=("is not running",)):
    return EvalItem(
        item_id=item_id,
        instance_id=item_id,
        question="why",
        answer="because",
        rationale=rationale,
        image_ref=f"images/{item_id}.png",
        offered_phrases=PhraseLists(
            nouns=list(nouns), noun_phrases=list(nps), verb_phrases=list(vps)
        ),
    )


# --- label merging ---------------------------------------------------------


def test_merge_weak_values():
    assert merge_weak("yes") == "yes"
    assert merge_weak("weak_yes") == "yes"
    assert merge_weak("weak_no") == "no"
    assert merge_weak("no") == "no"


@given(st.sampled_from(LABELS))
def test_merge_weak_idempotent_and_strong(label):
    merged = merge_weak(label)
    assert merged in ("yes", "no")
    assert merge_weak(merged) == merged


def test_merge_weak_rejects_unknown():
    with pytest.raises(JudgmentError):
        merge_weak("maybe")


def test_record_rejects_bad_label():
    with pytest.raises(JudgmentError):
        make_record(visual="sort of")


def test_record_round_trip():
    record = make_record(phrases=["the dog"])
    assert JudgmentRecord.from_json(record.to_json()) == record


# --- phrase extraction -----------------------------------------------------


def test_extract_phrases_negated_sentence():
    phrases = extract_phrases("the dog is not running in the park")
    assert set(phrases.nouns) == {"dog", "park"}
    assert set(phrases.noun_phrases) == {"the dog", "the park"}
    assert set(phrases.verb_phrases) == {"is not running"}


def test_extract_phrases_pronoun_subject():
    phrases = extract_phrases("she is pointing")
    assert phrases.nouns == []
    assert phrases.noun_phrases == []
    assert set(phrases.verb_phrases) == {"is pointing"}


def test_extract_phrases_empty():
    phrases = extract_phrases("")
    assert phrases.nouns == []
    assert phrases.noun_phrases == []
    assert phrases.verb_phrases == []


def test_extract_phrases_adverb_kept_out_of_verb_group():
    phrases = extract_phrases("the man is quickly walking")
    assert set(phrases.verb_phrases) == {"is walking"}


def test_extract_phrases_dedupes():
    phrases = extract_phrases("the dog saw the dog")
    assert phrases.nouns == ["dog"]
    assert phrases.noun_phrases == ["the dog"]


def test_tagger_defaults_to_noun():
    assert RuleTagger().tag(["zyzzyva"]) == ["NOUN"]


def test_phrase_check_rejects_stray_pick():
    item = make_item()
    record = make_record(phrases=["the moon"])
    with pytest.raises(JudgmentError):
        record.check_phrases(item)
    make_record(phrases=["the dog"]).check_phrases(item)


def test_make_eval_items_requires_known_instance():
    with pytest.raises(JudgmentError):
        make_eval_items([("missing", "some text")], {}, lambda i: i)


# --- plausibility aggregation ----------------------------------------------


def test_plausibility_single_item_hand_value():
    records = [
        make_record(worker_id="w1", visual="yes"),
        make_record(worker_id="w2", visual="weak_yes"),
        make_record(worker_id="w3", visual="no"),
    ]
    score = aggregate_plausibility(records, PlausibilityMode.VISUAL)
    assert math.isclose(score, 100.0 * 2 / 3, rel_tol=0, abs_tol=1e-9)


def test_plausibility_mean_of_item_ratios_not_pooled():
    records = [
        make_record(item_id="a", worker_id="w1", visual="yes"),
        make_record(item_id="b", worker_id="w1", visual="yes"),
        make_record(item_id="b", worker_id="w2", visual="no"),
        make_record(item_id="b", worker_id="w3", visual="no"),
    ]
    # pooled would give 2/4; per-item mean is (1 + 1/3) / 2
    score = aggregate_plausibility(records, PlausibilityMode.VISUAL)
    assert math.isclose(score, 100.0 * (1 + 1 / 3) / 2, abs_tol=1e-9)


def test_plausibility_modes_read_different_fields():
    records = [make_record(textual="no", visual="yes")]
    assert aggregate_plausibility(records, PlausibilityMode.VISUAL) == 100.0
    assert aggregate_plausibility(records, PlausibilityMode.TEXTUAL) == 0.0


def test_grammaticality_uses_grammatical_field():
    records = [
        make_record(worker_id="w1", grammatical="weak_yes"),
        make_record(worker_id="w2", grammatical="no"),
    ]
    assert math.isclose(aggregate_grammaticality(records), 50.0, abs_tol=1e-9)


def test_plausibility_empty_records_error():
    with pytest.raises(JudgmentError):
        aggregate_plausibility([], PlausibilityMode.VISUAL)


@given(
    st.lists(
        st.tuples(st.integers(0, 5), st.sampled_from(LABELS)),
        min_size=1,
        max_size=40,
    )
)
def test_plausibility_bounds(pairs):
    records = [
        make_record(item_id=f"item-{i}", worker_id=f"w{n}", visual=label)
        for n, (i, label) in enumerate(pairs)
    ]
    score = aggregate_plausibility(records, PlausibilityMode.VISUAL)
    assert 0.0 <= score <= 100.0


# --- fidelity ---------------------------------------------------------------


def test_fidelity_overall_hand_value():
    items = [make_item()]
    records = [
        make_record(worker_id="w1", unrelated="no"),
        make_record(worker_id="w2", unrelated="no"),
        make_record(worker_id="w3", unrelated="weak_no"),
    ]
    report = aggregate_fidelity(records, items)
    assert math.isclose(report.overall, 100.0, abs_tol=1e-9)


def test_fidelity_entity_hand_value():
    items = [make_item(nouns=("dog", "ball", "frisbee"))]
    records = [make_record(worker_id="w1", phrases=["frisbee"])]
    report = aggregate_fidelity(records, items)
    assert math.isclose(report.entity, 100.0 * 2 / 3, abs_tol=1e-9)


def test_fidelity_nothing_picked_is_perfect():
    items = [make_item()]
    records = [make_record(worker_id="w1", phrases=[])]
    report = aggregate_fidelity(records, items)
    assert report.entity == 100.0
    assert report.entity_detail == 100.0
    assert report.action == 100.0


def test_fidelity_zero_offered_excluded_and_reported():
    items = [
        make_item(item_id="a", vps=()),
        make_item(item_id="b"),
    ]
    records = [
        make_record(item_id="a", worker_id="w1"),
        make_record(item_id="b", worker_id="w1", phrases=["is not running"]),
    ]
    report = aggregate_fidelity(records, items)
    assert report.items_without_verb_phrases == 1
    assert math.isclose(report.action, 0.0, abs_tol=1e-9)


def test_fidelity_all_items_zero_offered_gives_none():
    items = [make_item(item_id="a", nouns=(), nps=(), vps=())]
    records = [make_record(item_id="a", worker_id="w1")]
    report = aggregate_fidelity(records, items)
    assert report.entity is None
    assert report.items_without_nouns == 1


def test_fidelity_picks_averaged_within_item_then_across():
    items = [make_item(item_id="a", nouns=("dog", "park")),
             make_item(item_id="b", nouns=("tree",))]
    records = [
        make_record(item_id="a", worker_id="w1", phrases=["dog"]),
        make_record(item_id="a", worker_id="w2", phrases=[]),
        make_record(item_id="b", worker_id="w1", phrases=["tree"]),
    ]
    report = aggregate_fidelity(records, items)
    expected = 100.0 * (((1 / 2) + 1.0) / 2 + 0.0) / 2
    assert math.isclose(report.entity, expected, abs_tol=1e-9)


def test_fidelity_unknown_item_errors():
    with pytest.raises(JudgmentError):
        aggregate_fidelity([make_record(item_id="ghost")], [make_item()])


# --- correlation -------------------------------------------------------------


def test_correlate_identity_line():
    xs = [1.0, 2.0, 3.0, 4.0]
    assert math.isclose(correlate(xs, xs), 1.0, abs_tol=1e-9)


def test_correlate_negative_line():
    xs = [0.0, 0.25, 0.5, 1.0]
    ys = [1.0 - x for x in xs]
    assert math.isclose(correlate(xs, ys), -1.0, abs_tol=1e-9)


def test_correlate_matches_oracle():
    rng = random.Random(7)
    xs = [rng.uniform(0, 100) for _ in range(10)]
    ys = [rng.uniform(0, 100) for _ in range(10)]
    assert math.isclose(correlate(xs, ys), oracle_pearson(xs, ys), abs_tol=1e-9)


def test_correlate_symmetric_and_affine_invariant():
    rng = random.Random(11)
    xs = [rng.uniform(0, 1) for _ in range(12)]
    ys = [rng.uniform(0, 1) for _ in range(12)]
    r = correlate(xs, ys)
    assert math.isclose(correlate(ys, xs), r, abs_tol=1e-12)
    scaled = [3.5 * y + 2.0 for y in ys]
    assert math.isclose(correlate(xs, scaled), r, abs_tol=1e-9)


def test_correlate_zero_variance_errors():
    with pytest.raises(JudgmentError):
        correlate([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(JudgmentError):
        correlate([1.0, 2.0], [5.0, 5.0])


def test_correlate_length_checks():
    with pytest.raises(JudgmentError):
        correlate([1.0], [2.0])
    with pytest.raises(JudgmentError):
        correlate([1.0, 2.0], [1.0, 2.0, 3.0])


# --- agreement histogram ------------------------------------------------------


def test_variation_hand_bucket():
    records = [
        make_record(worker_id="w1", visual="yes"),
        make_record(worker_id="w2", visual="yes"),
        make_record(worker_id="w3", visual="no"),
    ]
    report = plausibility_variation(records)
    assert report.histogram[2 / 3] == 1
    assert sum(report.histogram.values()) == 1
    assert report.excluded_items == []


def test_variation_wrong_count_excluded():
    records = [
        make_record(item_id="a", worker_id="w1"),
        make_record(item_id="a", worker_id="w2"),
        make_record(item_id="b", worker_id="w1", visual="no"),
        make_record(item_id="b", worker_id="w2", visual="no"),
        make_record(item_id="b", worker_id="w3", visual="weak_no"),
    ]
    report = plausibility_variation(records)
    assert report.excluded_items == ["a"]
    assert report.histogram[0.0] == 1


def test_variation_buckets_cover_all_counts():
    histogram_keys = set()
    for yes_count in range(JUDGMENTS_PER_ITEM + 1):
        labels = ["yes"] * yes_count + ["no"] * (JUDGMENTS_PER_ITEM - yes_count)
        records = [
            make_record(worker_id=f"w{i}", visual=label)
            for i, label in enumerate(labels)
        ]
        report = plausibility_variation(records)
        (bucket,) = [k for k, v in report.histogram.items() if v == 1]
        histogram_keys.add(bucket)
    assert histogram_keys == {0.0, 1 / 3, 2 / 3, 1.0}


# --- length analysis ---------------------------------------------------------


def test_analyze_lengths_groups_by_agreement():
    items = [
        make_item(item_id="a", rationale="one two three"),
        make_item(item_id="b", rationale="one two three four five"),
        make_item(item_id="c", rationale="one"),
    ]
    def records_for(item_id, labels):
        return [
            make_record(item_id=item_id, worker_id=f"w{i}", visual=v)
            for i, v in enumerate(labels)
        ]
    records = (
        records_for("a", ["yes", "yes", "yes"])
        + records_for("b", ["yes", "yes", "yes"])
        + records_for("c", ["no", "no", "no"])
    )
    out = analyze_lengths(items, records, length_fn=lambda s: len(s.split()))
    assert out["groups"]["1.0"]["count"] == 2
    assert math.isclose(out["groups"]["1.0"]["mean_length"], 4.0)
    assert math.isclose(out["groups"]["1.0"]["length_variance"], 1.0)
    assert out["groups"]["0.0"]["count"] == 1
    assert out["excluded_items"] == []


def test_analyze_lengths_excludes_partial_items():
    items = [make_item(item_id="a")]
    records = [make_record(item_id="a", worker_id="w1")]
    out = analyze_lengths(items, records, length_fn=len)
    assert out["excluded_items"] == ["a"]
    assert out["groups"] == {}


# --- report assembly ----------------------------------------------------------


def test_assemble_report_shape():
    measures = {"bleu_4": 10.0, "visual_plausibility": 80.0}
    table = assemble_report({f"{m}:{s}" if s else m: dict(measures)
                             for m, s in VARIANTS})
    assert len(table["rows"]) == 7
    assert table["columns"] == ["bleu_4", "visual_plausibility"]
    for row in table["rows"]:
        assert set(row["scores"]) == set(table["columns"])


def test_assemble_report_missing_measures_are_none():
    table = assemble_report({"a": {"x": 1.0}, "b": {"y": 2.0}})
    assert table["rows"][0]["scores"]["y"] is None
    assert table["rows"][1]["scores"]["x"] is None


def test_assemble_report_empty_errors():
    with pytest.raises(JudgmentError):
        assemble_report({})


def test_fidelity_report_round_trip():
    report = FidelityReport(overall=90.0, entity=80.0, entity_detail=None,
                            action=70.0, items_without_noun_phrases=2)
    payload = report.to_json()
    assert payload["overall"] == 90.0
    assert payload["entity_detail"] is None
    assert payload["items_without_noun_phrases"] == 2
