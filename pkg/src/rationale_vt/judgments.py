"""Human-judgment records: phrase extraction, task items, and score aggregation.

Workers answer four questions per rationale (textual plausibility before
seeing the image, visual plausibility, grammaticality, unrelated content) on
the scale {yes, weak_yes, weak_no, no}, then pick unrelated phrases from
offered noun/noun-phrase/verb-phrase lists. Aggregation always merges the weak
labels into their strong neighbors and averages per-item ratios, never pooled
votes. A small rule-based tagger (closed-class lexicon plus suffix heuristics)
extracts the offered phrases deterministically.
"""

from __future__ import annotations

import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

from rationale_vt.metrics import tokenize
from rationale_vt.validation import ValidationError

LABELS = ("yes", "weak_yes", "weak_no", "no")
VARIATION_BUCKETS = (0.0, 1 / 3, 2 / 3, 1.0)
JUDGMENTS_PER_ITEM = 3


class JudgmentError(ValidationError):
    pass


def merge_weak(label: str) -> str:
    """weak_yes → yes, weak_no → no; idempotent on the strong labels."""
    if label not in LABELS:
        raise JudgmentError(f"unknown label {label!r}; expected one of {LABELS}")
    return "yes" if label in ("yes", "weak_yes") else "no"


class PlausibilityMode(str, Enum):
    VISUAL = "visual_plausibility"
    TEXTUAL = "textual_plausibility"


@dataclass
class PhraseLists:
    nouns: list[str] = field(default_factory=list)
    noun_phrases: list[str] = field(default_factory=list)
    verb_phrases: list[str] = field(default_factory=list)

    def all_phrases(self) -> set[str]:
        return set(self.nouns) | set(self.noun_phrases) | set(self.verb_phrases)

    def to_json(self) -> dict:
        return {
            "nouns": self.nouns,
            "noun_phrases": self.noun_phrases,
            "verb_phrases": self.verb_phrases,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "PhraseLists":
        return cls(
            nouns=list(payload.get("nouns", [])),
            noun_phrases=list(payload.get("noun_phrases", [])),
            verb_phrases=list(payload.get("verb_phrases", [])),
        )


@dataclass
class EvalItem:
    item_id: str
    instance_id: str
    question: str
    answer: str
    rationale: str
    image_ref: str
    offered_phrases: PhraseLists

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "instance_id": self.instance_id,
            "question": self.question,
            "answer": self.answer,
            "rationale": self.rationale,
            "image_ref": self.image_ref,
            "offered_phrases": self.offered_phrases.to_json(),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EvalItem":
        return cls(
            item_id=payload["item_id"],
            instance_id=payload["instance_id"],
            question=payload["question"],
            answer=payload["answer"],
            rationale=payload["rationale"],
            image_ref=payload["image_ref"],
            offered_phrases=PhraseLists.from_json(payload["offered_phrases"]),
        )


@dataclass
class JudgmentRecord:
    item_id: str
    worker_id: str
    textual_plausibility: str
    visual_plausibility: str
    grammatical: str
    unrelated_content: str
    unrelated_phrases: list[str] = field(default_factory=list)
    timestamp: float = field(default_factory=time.time)

    def __post_init__(self):
        for name in ("textual_plausibility", "visual_plausibility", "grammatical",
                     "unrelated_content"):
            value = getattr(self, name)
            if value not in LABELS:
                raise JudgmentError(
                    f"{name} must be one of {LABELS}, got {value!r}"
                )

    def check_phrases(self, item: EvalItem) -> None:
        offered = item.offered_phrases.all_phrases()
        stray = [p for p in self.unrelated_phrases if p not in offered]
        if stray:
            raise JudgmentError(
                f"picked phrases {stray} were never offered for item {item.item_id!r}"
            )

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "worker_id": self.worker_id,
            "textual_plausibility": self.textual_plausibility,
            "visual_plausibility": self.visual_plausibility,
            "grammatical": self.grammatical,
            "unrelated_content": self.unrelated_content,
            "unrelated_phrases": list(self.unrelated_phrases),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "JudgmentRecord":
        return cls(**payload)


# ---------------------------------------------------------------------------
# rule-based part-of-speech tagging and phrase extraction
# ---------------------------------------------------------------------------

DETERMINERS = {
    "the", "a", "an", "this", "that", "these", "those", "his", "her", "its",
    "their", "my", "our", "your", "some", "any", "every", "each", "both",
}
AUXILIARIES = {
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have",
    "had", "do", "does", "did", "will", "would", "can", "could", "may",
    "might", "should", "must", "shall",
}
NEGATIONS = {"not", "never", "no"}
PRONOUNS = {
    "i", "you", "he", "she", "it", "we", "they", "him", "them", "us", "me",
    "who", "someone", "something", "anyone", "anything", "everyone",
}
PREPOSITIONS = {
    "in", "on", "at", "by", "with", "from", "to", "of", "for", "near",
    "under", "over", "into", "onto", "about", "behind", "during", "inside",
    "outside", "around", "against", "between", "through", "off", "up", "down",
}
CONJUNCTIONS = {"and", "or", "but", "because", "so", "while", "when", "if", "as", "than"}
ADJECTIVES = {
    "happy", "sad", "big", "small", "red", "green", "blue", "wet", "dry",
    "young", "old", "good", "bad", "hot", "cold", "open", "closed", "busy",
}
VERB_LEXICON = {
    "run", "runs", "ran", "sit", "sits", "sat", "eat", "eats", "ate",
    "sleep", "sleeps", "walk", "walks", "go", "goes", "went", "look",
    "looks", "hold", "holds", "ride", "rides", "read", "reads", "cook",
    "cooks", "dine", "dines", "play", "plays", "stand", "stands", "point",
    "points", "rain", "rains", "rained", "wear", "wears", "see", "sees",
    "saw", "seen", "say", "says", "said", "take", "takes", "took", "make",
    "makes", "made", "give", "gives", "gave", "get", "gets", "got",
    "seem", "seems", "appear", "appears", "smile", "smiles", "laugh", "laughs",
}
ADJ_SUFFIXES = ("ful", "ous", "ible", "able", "ive", "less")


class RuleTagger:
    """Closed-class lexicon first, suffix heuristics second, noun by default."""

    def tag(self, tokens: Sequence[str]) -> list[str]:
        return [self._tag_one(t) for t in tokens]

    @staticmethod
    def _tag_one(token: str) -> str:
        if token in DETERMINERS:
            return "DET"
        if token in AUXILIARIES:
            return "AUX"
        if token in NEGATIONS:
            return "NEG"
        if token in PRONOUNS:
            return "PRON"
        if token in PREPOSITIONS:
            return "ADP"
        if token in CONJUNCTIONS:
            return "CONJ"
        if token in ADJECTIVES:
            return "ADJ"
        if token in VERB_LEXICON:
            return "VERB"
        if token.endswith("ing") and len(token) >= 5:
            return "VERB"
        if token.endswith("ed") and len(token) >= 4:
            return "VERB"
        if token.endswith("ly") and len(token) >= 4:
            return "ADV"
        if token.endswith(ADJ_SUFFIXES) and len(token) >= 5:
            return "ADJ"
        return "NOUN"


def _dedupe(items: Iterable[str]) -> list[str]:
    seen = set()
    out = []
    for item in items:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


def extract_phrases(rationale: str, tagger: Optional[RuleTagger] = None) -> PhraseLists:
    """Nouns, base noun phrases, and verb groups offered to workers.

    A noun phrase is a maximal determiner/adjective/noun run containing at
    least one noun; a verb group is a maximal auxiliary/negation/verb run
    containing at least one verb, with adverbs skipped (adjuncts are not part
    of the offered phrase).
    """
    tagger = tagger or RuleTagger()
    tokens = tokenize(rationale)
    tags = tagger.tag(tokens)

    nouns = [t for t, g in zip(tokens, tags) if g == "NOUN"]

    noun_phrases: list[str] = []
    i = 0
    while i < len(tokens):
        if tags[i] in ("DET", "ADJ", "NOUN"):
            j = i
            while j < len(tokens) and tags[j] in ("DET", "ADJ", "NOUN"):
                j += 1
            run = list(range(i, j))
            while run and tags[run[-1]] != "NOUN":
                run.pop()
            if any(tags[k] == "NOUN" for k in run):
                noun_phrases.append(" ".join(tokens[k] for k in run))
            i = j
        else:
            i += 1

    verb_phrases: list[str] = []
    i = 0
    while i < len(tokens):
        if tags[i] in ("AUX", "NEG", "VERB", "ADV"):
            j = i
            while j < len(tokens) and tags[j] in ("AUX", "NEG", "VERB", "ADV"):
                j += 1
            kept = [tokens[k] for k in range(i, j) if tags[k] != "ADV"]
            if any(tags[k] == "VERB" for k in range(i, j)) and kept:
                verb_phrases.append(" ".join(kept))
            i = j
        else:
            i += 1

    return PhraseLists(
        nouns=_dedupe(nouns),
        noun_phrases=_dedupe(noun_phrases),
        verb_phrases=_dedupe(verb_phrases),
    )


def make_eval_items(generations: Sequence[tuple[str, str]],
                    instances_by_id: dict,
                    image_ref_fn: Callable[[str], str],
                    tagger: Optional[RuleTagger] = None) -> list[EvalItem]:
    """One task item per (instance_id, rationale) pair, phrases pre-extracted."""
    items = []
    for instance_id, rationale in generations:
        if instance_id not in instances_by_id:
            raise JudgmentError(f"generation references unknown instance {instance_id!r}")
        inst = instances_by_id[instance_id]
        items.append(
            EvalItem(
                item_id=instance_id,
                instance_id=instance_id,
                question=inst.question,
                answer=inst.answer,
                rationale=rationale,
                image_ref=image_ref_fn(inst.image_id),
                offered_phrases=extract_phrases(rationale, tagger),
            )
        )
    return items


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _group_by_item(records: Sequence[JudgmentRecord]) -> dict[str, list[JudgmentRecord]]:
    groups: dict[str, list[JudgmentRecord]] = defaultdict(list)
    for record in records:
        groups[record.item_id].append(record)
    return dict(groups)


def per_item_ratios(records: Sequence[JudgmentRecord], field_name: str,
                    positive: str) -> dict[str, float]:
    """item_id → ratio of merged labels equal to `positive` among its records."""
    groups = _group_by_item(records)
    if not groups:
        raise JudgmentError("no judgment records to aggregate")
    return {
        item_id: sum(merge_weak(getattr(r, field_name)) == positive for r in group)
        / len(group)
        for item_id, group in groups.items()
    }


def aggregate_plausibility(records: Sequence[JudgmentRecord],
                           mode: PlausibilityMode) -> float:
    """Mean of per-item yes ratios, on 0..100."""
    ratios = per_item_ratios(records, PlausibilityMode(mode).value, positive="yes")
    return 100.0 * sum(ratios.values()) / len(ratios)


def aggregate_grammaticality(records: Sequence[JudgmentRecord]) -> float:
    ratios = per_item_ratios(records, "grammatical", positive="yes")
    return 100.0 * sum(ratios.values()) / len(ratios)


@dataclass
class FidelityReport:
    overall: float
    entity: Optional[float]
    entity_detail: Optional[float]
    action: Optional[float]
    items_without_nouns: int = 0
    items_without_noun_phrases: int = 0
    items_without_verb_phrases: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _phrase_fidelity(groups: dict[str, list[JudgmentRecord]],
                     items: dict[str, EvalItem],
                     category: str) -> tuple[Optional[float], int]:
    """Mean over items of mean-over-records kept-phrase fraction.

    kept fraction = (offered − picked) / offered for the given category;
    items offering zero phrases in the category are excluded and counted.
    """
    item_scores = []
    excluded = 0
    for item_id, group in groups.items():
        offered = getattr(items[item_id].offered_phrases, category)
        if not offered:
            excluded += 1
            continue
        offered_set = set(offered)
        per_record = []
        for record in group:
            picked = offered_set & set(record.unrelated_phrases)
            per_record.append((len(offered_set) - len(picked)) / len(offered_set))
        item_scores.append(sum(per_record) / len(per_record))
    if not item_scores:
        return None, excluded
    return 100.0 * sum(item_scores) / len(item_scores), excluded


def aggregate_fidelity(records: Sequence[JudgmentRecord],
                       items: Sequence[EvalItem]) -> FidelityReport:
    """Overall fidelity is the mean per-item ratio of merged *no* answers to
    the unrelated-content question; the fine-grained scores come from the
    phrases workers left unpicked."""
    groups = _group_by_item(records)
    if not groups:
        raise JudgmentError("no judgment records to aggregate")
    by_id = {item.item_id: item for item in items}
    missing = sorted(set(groups) - set(by_id))
    if missing:
        raise JudgmentError(f"records reference unknown items: {missing}")
    ratios = per_item_ratios(records, "unrelated_content", positive="no")
    overall = 100.0 * sum(ratios.values()) / len(ratios)
    entity, no_nouns = _phrase_fidelity(groups, by_id, "nouns")
    detail, no_nps = _phrase_fidelity(groups, by_id, "noun_phrases")
    action, no_vps = _phrase_fidelity(groups, by_id, "verb_phrases")
    return FidelityReport(
        overall=overall,
        entity=entity,
        entity_detail=detail,
        action=action,
        items_without_nouns=no_nouns,
        items_without_noun_phrases=no_nps,
        items_without_verb_phrases=no_vps,
    )


def correlate(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson product-moment correlation via the direct formula."""
    if len(xs) != len(ys):
        raise JudgmentError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise JudgmentError("correlation needs at least two points")
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    var_x = sum((x - mean_x) ** 2 for x in xs)
    var_y = sum((y - mean_y) ** 2 for y in ys)
    if var_x == 0.0 or var_y == 0.0:
        raise JudgmentError("correlation undefined: zero variance in input scores")
    cov = sum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    return cov / math.sqrt(var_x * var_y)


@dataclass
class VariationReport:
    histogram: dict[float, int]
    excluded_items: list[str]

    def to_json(self) -> dict:
        return {
            "histogram": {str(k): v for k, v in self.histogram.items()},
            "excluded_items": self.excluded_items,
        }


def plausibility_variation(records: Sequence[JudgmentRecord],
                           mode: PlausibilityMode = PlausibilityMode.VISUAL
                           ) -> VariationReport:
    """Histogram of per-item agreement values over {0, 1/3, 2/3, 1}.

    Items need exactly three records to land in a bucket; others are excluded
    and reported.
    """
    groups = _group_by_item(records)
    if not groups:
        raise JudgmentError("no judgment records to aggregate")
    field_name = PlausibilityMode(mode).value
    histogram = {bucket: 0 for bucket in VARIATION_BUCKETS}
    excluded = []
    for item_id in sorted(groups):
        group = groups[item_id]
        if len(group) != JUDGMENTS_PER_ITEM:
            excluded.append(item_id)
            continue
        yes = sum(merge_weak(getattr(r, field_name)) == "yes" for r in group)
        histogram[yes / JUDGMENTS_PER_ITEM] += 1
    return VariationReport(histogram=histogram, excluded_items=excluded)


def analyze_lengths(items: Sequence[EvalItem], records: Sequence[JudgmentRecord],
                    length_fn: Callable[[str], int],
                    mode: PlausibilityMode = PlausibilityMode.VISUAL) -> dict:
    """Rationale-length mean/variance grouped by the item's agreement value."""
    groups = _group_by_item(records)
    by_id = {item.item_id: item for item in items}
    field_name = PlausibilityMode(mode).value
    lengths_by_value: dict[float, list[int]] = defaultdict(list)
    excluded = []
    for item_id, group in sorted(groups.items()):
        if item_id not in by_id or len(group) != JUDGMENTS_PER_ITEM:
            excluded.append(item_id)
            continue
        yes = sum(merge_weak(getattr(r, field_name)) == "yes" for r in group)
        lengths_by_value[yes / JUDGMENTS_PER_ITEM].append(
            length_fn(by_id[item_id].rationale)
        )
    out = {"groups": {}, "excluded_items": excluded}
    for value, lengths in sorted(lengths_by_value.items()):
        mean = sum(lengths) / len(lengths)
        variance = sum((x - mean) ** 2 for x in lengths) / len(lengths)
        out["groups"][str(value)] = {
            "count": len(lengths),
            "mean_length": mean,
            "length_variance": variance,
        }
    return out


def assemble_report(variant_measures: dict[str, dict[str, float]]) -> dict:
    """Rows = model variants, columns = union of measure names."""
    if not variant_measures:
        raise JudgmentError("no variant measures to report")
    columns: list[str] = []
    for measures in variant_measures.values():
        for name in measures:
            if name not in columns:
                columns.append(name)
    rows = [
        {"variant": variant, "scores": {c: measures.get(c) for c in columns}}
        for variant, measures in variant_measures.items()
    ]
    return {"columns": columns, "rows": rows}
