"""Answer extraction: strip the noise out of a free-form model response and
pull out a canonical answer.

Extraction runs a bank of regex rules in a fixed precedence order (user rules
first, then the built-in marker rules), followed by per-question-type fallback
stages. Within a single rule the LAST match in the text wins, because
step-by-step responses restate the final answer at the end. Extraction never
raises: failure is an ``ExtractedAnswer`` with status ``unextracted``.
"""

from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass
from enum import Enum

from .errors import BackendError, ConfigError

logger = logging.getLogger(__name__)


class QuestionType(str, Enum):
    SINGLE_CHOICE = "single_choice"
    MULTIPLE_CHOICE = "multiple_choice"
    YES_NO = "yes_no"
    FILL_BLANK = "fill_blank"
    FREE_OPEN = "free_open"


class ExtractionStatus(str, Enum):
    EXTRACTED = "extracted"
    MODEL_EXTRACTED = "model_extracted"
    UNEXTRACTED = "unextracted"


LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"

_YES_TOKENS = {"yes", "true", "correct"}
_NO_TOKENS = {"no", "false", "incorrect"}
_NEGATORS = {"not", "never"}
_ARTICLE_RE = re.compile(r"^(?:a|an|the)\s+")
_WS_RE = re.compile(r"\s+")


def normalize_text(s: str) -> str:
    """Canonicalize free text for comparison.

    Compatibility-form Unicode normalization, lowercasing, surrounding
    punctuation stripped, internal whitespace collapsed, leading English
    articles dropped. Applied to a fixpoint, so the function is idempotent.
    """
    prev = None
    for _ in range(16):
        if s == prev:
            break
        prev = s
        s = unicodedata.normalize("NFKC", s).lower()
        s = _strip_edge_punct(s)
        s = _WS_RE.sub(" ", s).strip()
        s = _ARTICLE_RE.sub("", s)
    return s


def _strip_edge_punct(s: str) -> str:
    start, end = 0, len(s)
    while start < end and _is_junk(s[start]):
        start += 1
    while end > start and _is_junk(s[end - 1]):
        end -= 1
    return s[start:end]


def _is_junk(ch: str) -> bool:
    return ch.isspace() or unicodedata.category(ch)[0] in ("P", "S")


@dataclass(frozen=True)
class ExtractionRule:
    """One regex in the extraction bank.

    ``pattern`` must compile and contain ``capture_group``; the captured span
    is parsed according to the question type it is applied to.
    """

    name: str
    pattern: str
    capture_group: int = 1
    applicable_types: frozenset[QuestionType] = frozenset(QuestionType)

    def __post_init__(self):
        try:
            compiled = re.compile(self.pattern)
        except re.error as exc:
            raise ConfigError(f"rule {self.name!r}: pattern does not compile: {exc}") from exc
        if self.capture_group > compiled.groups:
            raise ConfigError(
                f"rule {self.name!r}: capture group {self.capture_group} not in pattern"
            )
        object.__setattr__(self, "_compiled", compiled)

    @property
    def compiled(self) -> re.Pattern:
        return self._compiled  # type: ignore[attr-defined]


@dataclass(frozen=True)
class ExtractedAnswer:
    """Canonical answer plus how it was obtained.

    ``value`` is a letter, a sorted tuple of letters, a yes/no token, or
    normalized text; it is None exactly when status is ``unextracted``.
    """

    value: str | tuple[str, ...] | None
    status: ExtractionStatus
    rule_name: str | None = None
    raw_span: str | None = None

    def __post_init__(self):
        if (self.value is None) != (self.status is ExtractionStatus.UNEXTRACTED):
            raise ValueError("value must be absent exactly when status is unextracted")


UNEXTRACTED = ExtractedAnswer(None, ExtractionStatus.UNEXTRACTED)

# Captures a standalone option letter, tolerating (B), **B**, lowercase.
_LETTER = r"\(?\**([A-Za-z])\**\)?\b"
# Captures a letter list: "A, C", "A and C", "(A) and (C)", or a bare run "AC".
_LETTER_SET = r"\(?\**([A-Za-z]\b(?:\)?\s*(?:,|and|or|&)\s*\(?[A-Za-z]\b)*|[A-Z]{2,}\b)\**\)?"
# Captures the rest of the sentence or line after a marker.
_TEXT_SPAN = r"(.+?)(?:\.(?=\s|$)|\n|$)"
# Captures one word, for yes/no style markers.
_WORD = r"[\"'(]*\**([A-Za-z]+)\**"

_ANSWER_IS = r"(?i:\banswers?\s+(?:is|are)\s*:?\s*)"
_ANSWER_COLON = r"(?i:\banswers?\s*:\s*)"
_CORRECT_IS = r"(?i:\b(?:correct|right|final)\s+(?:answer|option|choice)s?\s*(?:is|are)?\s*:?\s*)"

_CHOICE_TYPES = frozenset({QuestionType.SINGLE_CHOICE, QuestionType.MULTIPLE_CHOICE})
_TEXT_TYPES = frozenset({QuestionType.FILL_BLANK, QuestionType.FREE_OPEN})
_YN = frozenset({QuestionType.YES_NO})

BUILTIN_RULES: tuple[ExtractionRule, ...] = (
    # single-choice letters
    ExtractionRule("answer_is_letter", _ANSWER_IS + _LETTER, 1, frozenset({QuestionType.SINGLE_CHOICE})),
    ExtractionRule("answer_colon_letter", _ANSWER_COLON + _LETTER, 1, frozenset({QuestionType.SINGLE_CHOICE})),
    ExtractionRule("correct_option_letter", _CORRECT_IS + _LETTER, 1, frozenset({QuestionType.SINGLE_CHOICE})),
    # multiple-choice letter sets
    ExtractionRule("answer_is_letters", _ANSWER_IS + _LETTER_SET, 1, frozenset({QuestionType.MULTIPLE_CHOICE})),
    ExtractionRule("answer_colon_letters", _ANSWER_COLON + _LETTER_SET, 1, frozenset({QuestionType.MULTIPLE_CHOICE})),
    ExtractionRule("correct_option_letters", _CORRECT_IS + _LETTER_SET, 1, frozenset({QuestionType.MULTIPLE_CHOICE})),
    # shared letter markers
    ExtractionRule("paren_line_start", r"(?m:^\s*\(([A-Za-z])\))", 1, _CHOICE_TYPES),
    ExtractionRule("boxed_letters", r"(?i:\\?boxed)\{([^{}]+)\}", 1, _CHOICE_TYPES),
    # yes/no markers
    ExtractionRule("answer_is_token", _ANSWER_IS + _WORD, 1, _YN),
    ExtractionRule("answer_colon_token", _ANSWER_COLON + _WORD, 1, _YN),
    ExtractionRule("correct_answer_token", _CORRECT_IS + _WORD, 1, _YN),
    # free-text markers
    ExtractionRule("boxed_text", r"(?i:\\?boxed)\{([^{}]+)\}", 1, _TEXT_TYPES),
    ExtractionRule("answer_is_text", _ANSWER_IS + _TEXT_SPAN, 1, _TEXT_TYPES),
    ExtractionRule("answer_colon_text", _ANSWER_COLON + _TEXT_SPAN, 1, _TEXT_TYPES),
)

# Wording is frozen so that reruns with the same extractor model are reproducible.
MODEL_EXTRACTION_PROMPT = (
    "Extract the final answer from the response below.\n"
    "Reply with only the answer and nothing else:\n"
    "- for a multiple-choice question, reply with the option letter(s), e.g. \"B\" or \"A, C\";\n"
    "- for a yes-or-no question, reply with \"yes\" or \"no\";\n"
    "- otherwise, reply with the short answer text.\n"
    "\n"
    "Question type: {question_type}\n"
    "{options_block}"
    "Response:\n"
    "{response}\n"
    "\n"
    "Final answer:"
)


def extract_answer(
    raw: str,
    qtype: QuestionType,
    choices: list[str] | tuple[str, ...] | None = None,
    rules: list[ExtractionRule] | tuple[ExtractionRule, ...] = (),
) -> ExtractedAnswer:
    """Extract a canonical answer from a raw model response.

    ``rules`` are user rules; they run ahead of the built-ins. Total and
    deterministic; returns status ``unextracted`` instead of raising.
    """
    qtype = QuestionType(qtype)
    if not raw:
        return UNEXTRACTED
    n_choices = len(choices) if choices else 0

    for rule in tuple(rules) + BUILTIN_RULES:
        if qtype not in rule.applicable_types:
            continue
        hit = _apply_rule(rule, raw, qtype, n_choices)
        if hit is not None:
            return hit

    if qtype is QuestionType.SINGLE_CHOICE:
        return _standalone_letter(raw, n_choices) or _choice_text(raw, choices, single=True) or UNEXTRACTED
    if qtype is QuestionType.MULTIPLE_CHOICE:
        return _standalone_letters(raw, n_choices) or _choice_text(raw, choices, single=False) or UNEXTRACTED
    if qtype is QuestionType.YES_NO:
        return _leading_token(raw) or _polarity_scan(raw) or UNEXTRACTED
    # fill_blank / free_open: the normalized full response
    text = normalize_text(raw)
    if not text:
        return UNEXTRACTED
    return ExtractedAnswer(text, ExtractionStatus.EXTRACTED, "full_text", raw)


def _apply_rule(rule: ExtractionRule, raw: str, qtype: QuestionType, n_choices: int):
    matches = list(rule.compiled.finditer(raw))
    if not matches:
        return None
    span = matches[-1].group(rule.capture_group)
    if span is None:
        return None
    value = _parse_span(span, qtype, n_choices)
    if value is None:
        return None  # last match invalid: the rule is skipped
    return ExtractedAnswer(value, ExtractionStatus.EXTRACTED, rule.name, span)


def _parse_span(span: str, qtype: QuestionType, n_choices: int):
    if qtype is QuestionType.SINGLE_CHOICE:
        letters = _span_letters(span)
        if letters is None or len(letters) != 1 or not _valid(letters[0], n_choices):
            return None
        return letters[0]
    if qtype is QuestionType.MULTIPLE_CHOICE:
        letters = _span_letters(span)
        if not letters or any(not _valid(ch, n_choices) for ch in letters):
            return None
        return tuple(sorted(set(letters)))
    if qtype is QuestionType.YES_NO:
        return _map_token(normalize_text(span).split(" ")[0])
    text = normalize_text(span)
    return text or None


def _span_letters(span: str) -> list[str] | None:
    """Parse "A", "a and c", "A, C" or an all-caps run "AC" into letters."""
    letters: list[str] = []
    for run in re.findall(r"[A-Za-z]+", span):
        if run.lower() in ("and", "or"):
            continue
        if len(run) == 1:
            letters.append(run.upper())
        elif run.isupper():
            letters.extend(run)  # "AC" -> A, C
        else:
            return None  # an ordinary word: not a letter list
    return letters


def _valid(letter: str, n_choices: int) -> bool:
    return letter in LETTERS and LETTERS.index(letter) < n_choices


def _standalone_letter(raw: str, n_choices: int):
    valid = [m.group(1) for m in re.finditer(r"\b([A-Z])\b", raw) if _valid(m.group(1), n_choices)]
    if not valid:
        return None
    return ExtractedAnswer(valid[-1], ExtractionStatus.EXTRACTED, "standalone_letter", valid[-1])

def _standalone_letters(raw: str, n_choices: int):
    # For set answers, collect every valid letter on the last line that has one.
    for line in reversed(raw.splitlines()):
        valid = [m.group(1) for m in re.finditer(r"\b([A-Z])\b", line) if _valid(m.group(1), n_choices)]
        if valid:
            return ExtractedAnswer(
                tuple(sorted(set(valid))), ExtractionStatus.EXTRACTED, "standalone_letters", line
            )
    return None


def _choice_text(raw: str, choices, single: bool):
    if not choices:
        return None
    norm = normalize_text(raw)
    if not norm:
        return None
    for i, choice in enumerate(choices):
        if normalize_text(choice) == norm:
            letter = LETTERS[i]
            value = letter if single else (letter,)
            return ExtractedAnswer(value, ExtractionStatus.EXTRACTED, "choice_text", raw.strip())
    return None


def _map_token(token: str) -> str | None:
    if token in _YES_TOKENS:
        return "yes"
    if token in _NO_TOKENS:
        return "no"
    return None


def _clean_tokens(raw: str) -> list[str]:
    return [_strip_edge_punct(t) for t in normalize_text(raw).split(" ") if _strip_edge_punct(t)]


def _leading_token(raw: str):
    tokens = _clean_tokens(raw)
    if not tokens:
        return None
    value = _map_token(tokens[0])
    if value is None:
        return None
    return ExtractedAnswer(value, ExtractionStatus.EXTRACTED, "leading_token", tokens[0])


def _polarity_scan(raw: str):
    """Decide yes/no from the polarity tokens in the response.

    "not"/"never" flips the token that follows it; a mix of polarities is
    treated as ambiguous.
    """
    tokens = _clean_tokens(raw)
    polarities = set()
    for i, token in enumerate(tokens):
        value = _map_token(token)
        if value is None:
            continue
        if i > 0 and tokens[i - 1] in _NEGATORS:
            value = "no" if value == "yes" else "yes"
        polarities.add(value)
    if len(polarities) != 1:
        return None
    value = polarities.pop()
    return ExtractedAnswer(value, ExtractionStatus.EXTRACTED, "polarity_scan", value)


def model_extract(
    raw: str,
    qtype: QuestionType,
    choices: list[str] | tuple[str, ...] | None,
    extractor,
    rules: tuple[ExtractionRule, ...] = (),
) -> ExtractedAnswer:
    """Ask a second model to isolate the answer, then re-run the regex bank
    on its reply. Backend failures degrade to ``unextracted``; they never
    propagate.
    """
    from .backends.base import GenerationOptions
    from .prompts import PromptBundle, Turn

    if not extractor.capabilities().supports_generation:
        raise ConfigError("extractor backend does not support generation")

    options_block = ""
    if choices:
        lines = "\n".join(f"{LETTERS[i]}. {text}" for i, text in enumerate(choices))
        options_block = f"Options:\n{lines}\n"
    prompt = MODEL_EXTRACTION_PROMPT.format(
        question_type=QuestionType(qtype).value, options_block=options_block, response=raw
    )
    bundle = PromptBundle(system_text=None, turns=(Turn("user", prompt),))
    try:
        reply = extractor.generate(bundle, GenerationOptions(temperature=0.0, max_new_tokens=64))
    except BackendError as exc:
        logger.warning("model extraction failed: %s", exc)
        return UNEXTRACTED
    second = extract_answer(reply.text, qtype, choices, rules)
    if second.status is ExtractionStatus.UNEXTRACTED:
        return UNEXTRACTED
    return ExtractedAnswer(second.value, ExtractionStatus.MODEL_EXTRACTED, second.rule_name, second.raw_span)
