"""Captioning-style text similarity measures.

All metrics share one tokenizer (lowercase, punctuation-split) that is
independent of the model's subtoken vocabulary. Scores are on a 0..100 scale
except the tf-idf cosine measure, which follows the usual 0..1000 reporting
convention. The unigram F measure here matches on exact tokens plus a light
suffix stemmer and deliberately has no fragmentation penalty; the report
metadata records these variant choices.
"""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

from rationale_vt.validation import ValidationError

TOKEN_RE = re.compile(r"[a-z0-9]+")
ROUGE_BETA = 1.2
METEOR_RECALL_WEIGHT = 9.0  # harmonic mean weight favoring recall
CIDER_MAX_N = 4
CIDER_SCALE = 1000.0


class MetricError(ValidationError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on anything that is not a letter or digit."""
    return TOKEN_RE.findall(text.lower())


def _check_corpus(candidates: Sequence[str], references: Sequence[str]) -> None:
    if len(candidates) != len(references):
        raise MetricError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    if not candidates:
        raise MetricError("empty candidate set")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def bleu(candidates: Sequence[str], references: Sequence[str],
         max_n: int = 4) -> dict[int, float]:
    """Corpus-level scores {1: BLEU-1, ..., max_n: BLEU-max_n} on 0..100."""
    _check_corpus(candidates, references)
    cand_tokens = [tokenize(c) for c in candidates]
    ref_tokens = [tokenize(r) for r in references]
    matches = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    cand_len = sum(len(t) for t in cand_tokens)
    ref_len = sum(len(t) for t in ref_tokens)
    for cand, ref in zip(cand_tokens, ref_tokens):
        for n in range(1, max_n + 1):
            cand_counts = ngrams(cand, n)
            ref_counts = ngrams(ref, n)
            matches[n] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            totals[n] += sum(cand_counts.values())
    if cand_len == 0:
        return {n: 0.0 for n in range(1, max_n + 1)}
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    precisions = [
        matches[n] / totals[n] if totals[n] else 0.0 for n in range(1, max_n + 1)
    ]
    scores = {}
    for n in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:n]):
            scores[n] = 0.0
        else:
            log_mean = sum(math.log(p) for p in precisions[:n]) / n
            scores[n] = 100.0 * brevity * math.exp(log_mean)
    return scores


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        row = [0]
        for j, y in enumerate(b, start=1):
            row.append(prev[j - 1] + 1 if x == y else max(prev[j], row[-1]))
        prev = row
    return prev[-1]


def rouge_l_pair(candidate: str, reference: str, beta: float = ROUGE_BETA) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    denom = recall + beta * beta * precision
    return 100.0 * (1 + beta * beta) * recall * precision / denom


def rouge_l(candidates: Sequence[str], references: Sequence[str]) -> float:
    _check_corpus(candidates, references)
    return sum(rouge_l_pair(c, r) for c, r in zip(candidates, references)) / len(candidates)


# ---------------------------------------------------------------------------
# tf-idf n-gram cosine (CIDEr-style)
# ---------------------------------------------------------------------------


def _tfidf_vector(counts: Counter, df: Counter, n_docs: int) -> dict:
    # grams unseen in the reference corpus keep the maximal idf of ln(n_docs)
    return {
        g: c * (math.log(n_docs) - math.log(max(1.0, df[g])))
        for g, c in counts.items()
    }


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = sum(x * v.get(g, 0.0) for g, x in u.items())
    return dot / (nu * nv)


def cider_pairs(candidates: Sequence[str], references: Sequence[str],
                max_n: int = CIDER_MAX_N) -> list[float]:
    """Per-pair scores; document frequencies come from the reference corpus."""
    _check_corpus(candidates, references)
    if len(set(references)) < 2:
        raise MetricError(
            "tf-idf weighting needs at least two distinct references in the corpus"
        )
    ref_tokens = [tokenize(r) for r in references]
    n_docs = len(references)
    df_per_n: list[Counter] = []
    for n in range(1, max_n + 1):
        df = Counter()
        for tokens in ref_tokens:
            df.update(set(ngrams(tokens, n)))
        df_per_n.append(df)
    scores = []
    for cand, ref in zip(candidates, ref_tokens):
        cand_tokens = tokenize(cand)
        per_n = []
        for n in range(1, max_n + 1):
            df = df_per_n[n - 1]
            u = _tfidf_vector(ngrams(cand_tokens, n), df, n_docs)
            v = _tfidf_vector(ngrams(ref, n), df, n_docs)
            per_n.append(_cosine(u, v))
        scores.append(CIDER_SCALE * sum(per_n) / max_n)
    return scores


def cider(candidates: Sequence[str], references: Sequence[str],
          max_n: int = CIDER_MAX_N) -> float:
    scores = cider_pairs(candidates, references, max_n)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# unigram F with exact + stem matching
# ---------------------------------------------------------------------------

_STEM_SUFFIXES = ("ing", "edly", "ed", "ies", "es", "s", "ly")


def light_stem(word: str) -> str:
    for suffix in _STEM_SUFFIXES:
        if word.endswith(suffix) and len(word) - len(suffix) >= 3:
            stem = word[: -len(suffix)]
            if suffix == "ies":
                stem += "y"
            return stem
    return word


def _match_unigrams(cand: list[str], ref: list[str]) -> int:
    """Exact matches first, then stem matches over the leftovers."""
    ref_pool = Counter(ref)
    matched = 0
    leftovers = []
    for token in cand:
        if ref_pool[token] > 0:
            ref_pool[token] -= 1
            matched += 1
        else:
            leftovers.append(token)
    stem_pool = Counter(light_stem(t) for t in ref_pool.elements())
    for token in leftovers:
        stem = light_stem(token)
        if stem_pool[stem] > 0:
            stem_pool[stem] -= 1
            matched += 1
    return matched


def meteor_reduced_pair(candidate: str, reference: str) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    m = _match_unigrams(cand, ref)
    if m == 0:
        return 0.0
    precision = m / len(cand)
    recall = m / len(ref)
    w = METEOR_RECALL_WEIGHT
    f = (1 + w) * precision * recall / (recall + w * precision)
    return 100.0 * f


def meteor_reduced(candidates: Sequence[str], references: Sequence[str]) -> float:
    _check_corpus(candidates, references)
    return sum(meteor_reduced_pair(c, r) for c, r in zip(candidates, references)) / len(
        candidates
    )


# ---------------------------------------------------------------------------
# content-word overlap
# ---------------------------------------------------------------------------


def load_stopwords(path: Optional[str | Path] = None) -> frozenset[str]:
    """The shipped stopword list, or one from a file with the same format."""
    if path is None:
        text = (resources.files("rationale_vt") / "data" / "stopwords.txt").read_text()
    else:
        text = Path(path).read_text()
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line.lower())
    return frozenset(words)


def stopword_hash(stopwords: Iterable[str]) -> str:
    blob = "\n".join(sorted(set(stopwords))).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def content_words(text: str, stopwords: frozenset[str]) -> set[str]:
    return {t for t in tokenize(text) if t not in stopwords}


def content_word_overlap(a: str, b: str, stopwords: frozenset[str]) -> float:
    """Share of a's content words that also occur in b, on 0..100."""
    content_a = content_words(a, stopwords)
    if not content_a:
        raise MetricError(f"no content words in {a!r}")
    content_b = content_words(b, stopwords)
    return 100.0 * len(content_a & content_b) / len(content_a)


def corpus_content_word_overlap(
    candidates: Sequence[str], references: Sequence[str], stopwords: frozenset[str]
) -> tuple[float, int]:
    """Corpus mean plus the count of pairs excluded for having no content words."""
    _check_corpus(candidates, references)
    scores, excluded = [], 0
    for c, r in zip(candidates, references):
        try:
            scores.append(content_word_overlap(c, r, stopwords))
        except MetricError:
            excluded += 1
    if not scores:
        raise MetricError("every candidate was empty of content words")
    return sum(scores) / len(scores), excluded


# ---------------------------------------------------------------------------
# combined report
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    scores: dict[str, float]
    per_instance: dict[str, list[float]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "scores": self.scores,
            "per_instance": self.per_instance,
            "metadata": self.metadata,
        }


def score_generations(candidates: Sequence[str], references: Sequence[str],
                      stopwords: Optional[frozenset[str]] = None) -> MetricReport:
    """All corpus measures for one candidate/reference pairing."""
    _check_corpus(candidates, references)
    if stopwords is None:
        stopwords = load_stopwords()
    bleu_scores = bleu(candidates, references)
    try:
        overlap, excluded = corpus_content_word_overlap(
            candidates, references, stopwords
        )
    except MetricError:
        # a degenerate model can emit only stopwords; report the measure as
        # unavailable instead of failing the whole report
        overlap, excluded = float("nan"), len(candidates)
    try:
        cider_per_pair = cider_pairs(candidates, references)
        cider_score = sum(cider_per_pair) / len(cider_per_pair)
    except MetricError:
        cider_per_pair = []
        cider_score = float("nan")
    scores = {f"bleu_{n}": s for n, s in bleu_scores.items()}
    scores.update(
        rouge_l=rouge_l(candidates, references),
        meteor=meteor_reduced(candidates, references),
        cider=cider_score,
        content_word_overlap=overlap,
    )
    per_instance = {
        "rouge_l": [rouge_l_pair(c, r) for c, r in zip(candidates, references)],
        "meteor": [meteor_reduced_pair(c, r) for c, r in zip(candidates, references)],
    }
    if cider_per_pair:
        per_instance["cider"] = cider_per_pair
    return MetricReport(
        scores=scores,
        per_instance=per_instance,
        metadata={
            "tokenizer": "lowercase, punctuation-split",
            "stopword_hash": stopword_hash(stopwords),
            "overlap_pairs_excluded": excluded,
            "variants": {
                "meteor": "exact+stem unigram matching, no fragmentation penalty",
                "cider": "plain tf-idf cosine, x1000 scale, reference-corpus idf",
                "rouge_l": f"F-measure beta={ROUGE_BETA}",
            },
        },
    )
