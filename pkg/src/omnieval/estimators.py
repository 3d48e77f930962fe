"""Scoring: exact-match scorers for the five question formats plus sentence
BLEU and ROUGE.

Tokenization everywhere is lowercase + split on Unicode whitespace; no
stemming, no language-specific handling. All scores live in [0, 1].
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .errors import EmptyReferences
from .filters import ExtractedAnswer, ExtractionStatus, QuestionType, normalize_text

MAX_BLEU_ORDER = 4


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# --- exact-match scorers -----------------------------------------------------

def score_choice_exact(extracted: ExtractedAnswer, truth: str) -> float:
    """1.0 iff the extracted letter (or yes/no token) equals the truth."""
    if extracted.status is ExtractionStatus.UNEXTRACTED:
        return 0.0
    return 1.0 if extracted.value == truth else 0.0


def score_multi_choice(extracted: Iterable[str], truth: Iterable[str]) -> tuple[float, float]:
    """Exact set match plus the Jaccard overlap as a diagnostic."""
    got, want = set(extracted), set(truth)
    exact = 1.0 if got == want else 0.0
    union = got | want
    jaccard = len(got & want) / len(union) if union else 0.0
    return exact, jaccard


def score_fill_blank(extracted: str, truth: str | Sequence[str]) -> float:
    """1.0 iff the normalized answer equals any accepted normalized truth."""
    accepted = [truth] if isinstance(truth, str) else list(truth)
    got = normalize_text(extracted)
    return 1.0 if any(got == normalize_text(t) for t in accepted) else 0.0


# --- BLEU --------------------------------------------------------------------

def _clipped_matches(cand_counts: Counter, refs_tokens: list[list[str]], n: int) -> int:
    max_ref = Counter()
    for ref in refs_tokens:
        for gram, count in _ngram_counts(ref, n).items():
            if count > max_ref[gram]:
                max_ref[gram] = count
    return sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())


def _closest_ref_len(refs_tokens: list[list[str]], c: int) -> int:
    # ties between equally close references go to the shorter one
    return min((abs(len(r) - c), len(r)) for r in refs_tokens)[1]


def bleu(candidate: str, references: Sequence[str]) -> float:
    """Sentence-level BLEU, max order 4.

    Modified (clipped) n-gram precision with multi-reference clipping. p1 is
    unsmoothed; higher orders get add-one smoothing; orders where the
    candidate has no n-grams are dropped from the geometric mean. Brevity
    penalty exp(1 - r/c) applies when the candidate is shorter than the
    closest reference. An empty candidate scores 0.
    """
    if not references:
        raise EmptyReferences("bleu needs at least one reference")
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not cand:
        return 0.0

    log_sum = 0.0
    orders = 0
    for n in range(1, MAX_BLEU_ORDER + 1):
        cand_counts = _ngram_counts(cand, n)
        total = max(len(cand) - n + 1, 0)
        if total == 0:
            continue
        matched = _clipped_matches(cand_counts, refs, n)
        if n == 1:
            if matched == 0:
                return 0.0
            p = matched / total
        else:
            p = (matched + 1) / (total + 1)
        log_sum += math.log(p)
        orders += 1

    geo = math.exp(log_sum / orders)
    c = len(cand)
    r = _closest_ref_len(refs, c)
    bp = math.exp(1.0 - r / c) if c < r else 1.0
    return bp * geo


def corpus_bleu(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Micro-averaged corpus BLEU: n-gram counts pooled over all pairs before
    the precisions are formed. Same smoothing and brevity rules as ``bleu``.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up")
    if not candidates:
        return 0.0
    for refs in references:
        if not refs:
            raise EmptyReferences("corpus_bleu needs at least one reference per candidate")

    matched = [0] * MAX_BLEU_ORDER
    total = [0] * MAX_BLEU_ORDER
    cand_len = 0
    ref_len = 0
    for candidate, refs in zip(candidates, references):
        cand = tokenize(candidate)
        refs_tokens = [tokenize(r) for r in refs]
        ref_len += _closest_ref_len(refs_tokens, len(cand))
        if not cand:
            continue
        cand_len += len(cand)
        for n in range(1, MAX_BLEU_ORDER + 1):
            count = max(len(cand) - n + 1, 0)
            if count == 0:
                continue
            total[n - 1] += count
            matched[n - 1] += _clipped_matches(_ngram_counts(cand, n), refs_tokens, n)

    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    orders = 0
    for n in range(1, MAX_BLEU_ORDER + 1):
        if total[n - 1] == 0:
            continue
        if n == 1:
            if matched[0] == 0:
                return 0.0
            p = matched[0] / total[0]
        else:
            p = (matched[n - 1] + 1) / (total[n - 1] + 1)
        log_sum += math.log(p)
        orders += 1
    geo = math.exp(log_sum / orders)
    bp = math.exp(1.0 - ref_len / cand_len) if cand_len < ref_len else 1.0
    return bp * geo


# --- ROUGE -------------------------------------------------------------------

def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def rouge_n(candidate: str, reference: str, n: int) -> tuple[float, float, float]:
    """ROUGE-N (n in {1, 2}): clipped n-gram overlap as (precision, recall, f1)."""
    if n not in (1, 2):
        raise ValueError("rouge_n supports n in {1, 2}")
    cand_counts = _ngram_counts(tokenize(candidate), n)
    ref_counts = _ngram_counts(tokenize(reference), n)
    cand_total = sum(cand_counts.values())
    ref_total = sum(ref_counts.values())
    if cand_total == 0 or ref_total == 0:
        return (0.0, 0.0, 0.0)
    overlap = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
    precision = overlap / cand_total
    recall = overlap / ref_total
    return (precision, recall, _f1(precision, recall))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length, two-row DP."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[len(b)]


def rouge_l(candidate: str, reference: str) -> tuple[float, float, float]:
    """ROUGE-L over token sequences: P = LCS/|cand|, R = LCS/|ref|."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return (0.0, 0.0, 0.0)
    lcs = lcs_length(cand, ref)
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return (precision, recall, _f1(precision, recall))


# --- metric registry ---------------------------------------------------------

@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    support: int

    def __post_init__(self):
        if self.support < 1:
            raise ValueError("a metric value needs at least one supporting item")


@dataclass(frozen=True)
class QuestionOutcome:
    item_id: str
    metric_name: str
    score: float
    extracted: ExtractedAnswer
    ground_truth: str | tuple[str, ...] | None


@dataclass(frozen=True)
class MetricSpec:
    name: str
    applicable_types: frozenset[QuestionType]
    fn: Callable  # (extracted, item) -> dict[str, float]


def _truth_refs(item) -> list[str]:
    answer = item.answer
    return list(answer) if isinstance(answer, tuple) else [answer]


def _candidate(extracted: ExtractedAnswer) -> str:
    if extracted.status is ExtractionStatus.UNEXTRACTED:
        return ""
    return extracted.value if isinstance(extracted.value, str) else " ".join(extracted.value)


def _accuracy(extracted, item):
    qtype = item.question_type
    if qtype in (QuestionType.SINGLE_CHOICE, QuestionType.YES_NO):
        return {"accuracy": score_choice_exact(extracted, item.answer)}
    if qtype is QuestionType.MULTIPLE_CHOICE:
        got = extracted.value if extracted.status is not ExtractionStatus.UNEXTRACTED else ()
        exact, jaccard = score_multi_choice(got, item.answer)
        return {"accuracy": exact, "multi_choice_jaccard": jaccard}
    return {"accuracy": score_fill_blank(_candidate(extracted), item.answer)}


def _multi_choice_exact(extracted, item):
    got = extracted.value if extracted.status is not ExtractionStatus.UNEXTRACTED else ()
    exact, jaccard = score_multi_choice(got, item.answer)
    return {"multi_choice_exact": exact, "multi_choice_jaccard": jaccard}


def _fill_blank_exact(extracted, item):
    return {"fill_blank_exact": score_fill_blank(_candidate(extracted), item.answer)}


def _bleu_metric(extracted, item):
    return {"bleu": bleu(_candidate(extracted), _truth_refs(item))}


def _rouge_metric(name, scorer):
    def fn(extracted, item):
        candidate = _candidate(extracted)
        best = max(scorer(candidate, ref)[2] for ref in _truth_refs(item))
        return {name: best}

    return fn


_ALL_TYPES = frozenset(QuestionType)
_TEXTUAL = frozenset({QuestionType.FILL_BLANK, QuestionType.FREE_OPEN})

METRIC_REGISTRY: dict[str, MetricSpec] = {
    spec.name: spec
    for spec in (
        MetricSpec("accuracy", _ALL_TYPES, _accuracy),
        MetricSpec("multi_choice_exact", frozenset({QuestionType.MULTIPLE_CHOICE}), _multi_choice_exact),
        MetricSpec("fill_blank_exact", _TEXTUAL, _fill_blank_exact),
        MetricSpec("bleu", _TEXTUAL, _bleu_metric),
        MetricSpec("rouge1", _TEXTUAL, _rouge_metric("rouge1", lambda c, r: rouge_n(c, r, 1))),
        MetricSpec("rouge2", _TEXTUAL, _rouge_metric("rouge2", lambda c, r: rouge_n(c, r, 2))),
        MetricSpec("rougeL", _TEXTUAL, _rouge_metric("rougeL", rouge_l)),
    )
}


def score_item(item, extracted: ExtractedAnswer, metric_names: Iterable[str]) -> list[QuestionOutcome]:
    """Apply every applicable registered metric to one item."""
    outcomes: list[QuestionOutcome] = []
    seen: set[str] = set()
    for name in metric_names:
        spec = METRIC_REGISTRY[name]
        if item.question_type not in spec.applicable_types:
            continue
        for out_name, score in spec.fn(extracted, item).items():
            if out_name in seen:
                continue
            seen.add(out_name)
            outcomes.append(QuestionOutcome(item.id, out_name, score, extracted, item.answer))
    return outcomes
