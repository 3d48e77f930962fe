"""Loading and validating evaluation datasets stored in the unified JSON
format: either a bare array of records or ``{"meta": {...}, "data": [...]}``.

Loaded items are immutable and fully canonicalized: option letters are
positional (choice 0 is A), multi-answer ground truth becomes a sorted letter
tuple, and yes/no truth becomes the literal token "yes" or "no". Unknown
record keys survive a round trip untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import EmptyDataset, ParseError, SchemaError
from .estimators import METRIC_REGISTRY
from .filters import LETTERS, QuestionType, normalize_text

RESERVED_CATEGORY = "__all__"

_RECORD_KEYS = frozenset(
    {
        "id", "instruction", "choices", "answer", "question_type", "few_shot",
        "cot_directive", "images", "category", "language", "domain", "modality",
    }
)


@dataclass(frozen=True)
class FewShotExemplar:
    instruction: str
    answer: str
    choices: tuple[str, ...] | None = None


@dataclass(frozen=True)
class EvalItem:
    """One evaluation record, after validation."""

    id: str
    instruction: str
    question_type: QuestionType
    answer: str | tuple[str, ...]
    choices: tuple[str, ...] | None = None
    few_shot: tuple[FewShotExemplar, ...] = ()
    cot_directive: str | None = None
    images: tuple[str, ...] = ()
    category: str | None = None
    language: str | None = None
    domain: str | None = None
    modality: str | None = None
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetManifest:
    """Per-dataset defaults carried by the optional ``meta`` object."""

    name: str
    version: str = "0"
    default_question_type: QuestionType | None = None
    metrics: tuple[str, ...] = ("accuracy",)
    language: str | None = None
    domain: str | None = None
    modality: str | None = None
    few_shot: tuple[FewShotExemplar, ...] = ()

    def __post_init__(self):
        for name in self.metrics:
            if name not in METRIC_REGISTRY:
                raise SchemaError(
                    f"manifest {self.name!r}: unknown metric {name!r} "
                    f"(known: {', '.join(sorted(METRIC_REGISTRY))})"
                )


def load_dataset(path, defaults: DatasetManifest | None = None) -> tuple[DatasetManifest, list[EvalItem]]:
    """Load and validate a dataset file.

    ``defaults`` supplies the synthesized manifest for bare-array files
    (typically derived from the run configuration). Raises ParseError on bad
    JSON, SchemaError naming the first offending record and field, and
    EmptyDataset when no records are present.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"{path}: cannot read dataset: {exc}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: not valid UTF-8 JSON: {exc}") from exc

    if isinstance(payload, list):
        records = payload
        base = defaults or DatasetManifest(name=path.stem)
        manifest = replace(base, name=base.name or path.stem)
    elif isinstance(payload, dict):
        meta = payload.get("meta", {})
        if not isinstance(meta, dict) or not isinstance(payload.get("data"), list):
            raise ParseError(f"{path}: object form requires a 'meta' object and a 'data' array")
        records = payload["data"]
        manifest = _manifest_from_meta(meta, defaults, fallback_name=path.stem)
    else:
        raise ParseError(f"{path}: top level must be an array or an object")

    if not records:
        raise EmptyDataset(f"{path}: dataset contains no records")

    items = []
    seen_ids: set[str] = set()
    for index, record in enumerate(records):
        item = validate_item(record, manifest, index=index)
        if item.id in seen_ids:
            raise SchemaError(f"record {item.id!r} (index {index}): duplicate field: id")
        seen_ids.add(item.id)
        items.append(item)
    return manifest, items


def _manifest_from_meta(meta: dict, defaults: DatasetManifest | None, fallback_name: str) -> DatasetManifest:
    base = defaults or DatasetManifest(name=fallback_name)
    qtype = meta.get("default_question_type")
    few_shot = tuple(
        _exemplar(f, "meta", i) for i, f in enumerate(meta.get("few_shot", []))
    ) or base.few_shot
    return DatasetManifest(
        name=meta.get("name", base.name or fallback_name),
        version=str(meta.get("version", base.version)),
        default_question_type=QuestionType(qtype) if qtype else base.default_question_type,
        metrics=tuple(meta.get("metrics", base.metrics)),
        language=meta.get("language", base.language),
        domain=meta.get("domain", base.domain),
        modality=meta.get("modality", base.modality),
        few_shot=few_shot,
    )


def validate_item(record, manifest: DatasetManifest, index: int = 0) -> EvalItem:
    """Validate one raw record against the schema and canonicalize it.

    Fills the question type from the manifest default when absent and
    normalizes the ground-truth answer. Raises SchemaError with the record id
    (or index) and the offending field in the message.
    """
    if not isinstance(record, dict):
        raise SchemaError(f"record at index {index}: not an object")
    rid = record.get("id")
    where = f"record {rid!r} (index {index})" if rid else f"record at index {index}"

    def fail(detail):
        raise SchemaError(f"{where}: {detail}")

    if not rid or not isinstance(rid, str):
        fail("missing field: id")
    instruction = record.get("instruction")
    if not isinstance(instruction, str) or not instruction.strip():
        fail("missing field: instruction")

    qtype_raw = record.get("question_type") or (
        manifest.default_question_type.value if manifest.default_question_type else None
    )
    if not qtype_raw:
        fail("missing field: question_type")
    try:
        qtype = QuestionType(qtype_raw)
    except ValueError:
        fail(f"bad field: question_type: {qtype_raw!r}")

    choices = record.get("choices")
    if choices is not None:
        if not isinstance(choices, list) or not all(isinstance(c, str) for c in choices):
            fail("bad field: choices: must be a list of strings")
        if len(choices) > len(LETTERS):
            fail(f"bad field: choices: {len(choices)} options exceed the 26-letter range")
        choices = tuple(choices)
    if qtype in (QuestionType.SINGLE_CHOICE, QuestionType.MULTIPLE_CHOICE) and not choices:
        fail("missing field: choices")

    if "answer" not in record or record["answer"] is None:
        fail("missing field: answer")
    answer = _canonical_answer(record["answer"], qtype, choices, fail)

    few_shot = tuple(
        _exemplar(f, where, i) for i, f in enumerate(record.get("few_shot", []))
    ) or manifest.few_shot

    category = record.get("category")
    if category == RESERVED_CATEGORY:
        fail(f"bad field: category: {RESERVED_CATEGORY!r} is reserved")

    images = record.get("images", [])
    if not isinstance(images, list) or not all(isinstance(p, str) for p in images):
        fail("bad field: images: must be a list of paths")

    extra = {k: v for k, v in record.items() if k not in _RECORD_KEYS}
    return EvalItem(
        id=rid,
        instruction=instruction,
        question_type=qtype,
        answer=answer,
        choices=choices,
        few_shot=few_shot,
        cot_directive=record.get("cot_directive"),
        images=tuple(images),
        category=category,
        language=record.get("language", manifest.language),
        domain=record.get("domain", manifest.domain),
        modality=record.get("modality", manifest.modality),
        extra=extra,
    )


def _canonical_answer(answer, qtype, choices, fail):
    if qtype is QuestionType.SINGLE_CHOICE:
        letter = _parse_letter(answer, choices)
        if letter is None:
            fail(f"bad field: answer: {answer!r} is not a letter within the {len(choices)} choices")
        return letter
    if qtype is QuestionType.MULTIPLE_CHOICE:
        letters = _parse_letter_set(answer, choices)
        if not letters:
            fail(f"bad field: answer: {answer!r} is not a letter set within the {len(choices)} choices")
        return letters
    if qtype is QuestionType.YES_NO:
        token = normalize_text(str(answer)) if not isinstance(answer, bool) else ("yes" if answer else "no")
        if token in ("yes", "true", "correct", "y"):
            return "yes"
        if token in ("no", "false", "incorrect", "n"):
            return "no"
        fail(f"bad field: answer: {answer!r} does not normalize to yes or no")
    # fill_blank / free_open: a string or a list of accepted alternatives
    if isinstance(answer, str):
        if not answer.strip():
            fail("missing field: answer")
        return answer
    if isinstance(answer, list) and answer and all(isinstance(a, str) and a.strip() for a in answer):
        return tuple(answer)
    fail(f"bad field: answer: expected text or a list of texts, got {answer!r}")


def _parse_letter(answer, choices) -> str | None:
    if not isinstance(answer, str):
        return None
    letter = answer.strip().upper()
    if len(letter) == 1 and letter in LETTERS and LETTERS.index(letter) < len(choices):
        return letter
    return None


def _parse_letter_set(answer, choices) -> tuple[str, ...] | None:
    """Canonicalize "A,C", "CA", or ["A","C"] into a sorted letter tuple."""
    if isinstance(answer, str):
        parts = [ch for ch in answer.upper() if not ch.isspace() and ch != ","]
    elif isinstance(answer, list):
        parts = [str(a).strip().upper() for a in answer]
    else:
        return None
    letters = set()
    for part in parts:
        if len(part) != 1 or part not in LETTERS or LETTERS.index(part) >= len(choices):
            return None
        letters.add(part)
    return tuple(sorted(letters)) if letters else None


def _exemplar(raw, where, index) -> FewShotExemplar:
    if not isinstance(raw, dict):
        raise SchemaError(f"{where}: bad field: few_shot[{index}]: not an object")
    instruction = raw.get("instruction")
    answer = raw.get("answer")
    if not isinstance(instruction, str) or not instruction.strip():
        raise SchemaError(f"{where}: missing field: few_shot[{index}].instruction")
    if not isinstance(answer, str) or not answer.strip():
        raise SchemaError(f"{where}: missing field: few_shot[{index}].answer")
    choices = raw.get("choices")
    return FewShotExemplar(instruction, answer, tuple(choices) if choices else None)


# --- serialization back to the unified format --------------------------------

def item_to_record(item: EvalItem) -> dict:
    """Inverse of validate_item, modulo canonicalization already applied."""
    record: dict = {"id": item.id, "instruction": item.instruction}
    if item.choices is not None:
        record["choices"] = list(item.choices)
    record["answer"] = list(item.answer) if isinstance(item.answer, tuple) else item.answer
    record["question_type"] = item.question_type.value
    if item.few_shot:
        record["few_shot"] = [
            {
                "instruction": f.instruction,
                "answer": f.answer,
                **({"choices": list(f.choices)} if f.choices else {}),
            }
            for f in item.few_shot
        ]
    for key in ("cot_directive", "category", "language", "domain", "modality"):
        value = getattr(item, key)
        if value is not None:
            record[key] = value
    if item.images:
        record["images"] = list(item.images)
    record.update(item.extra)
    return record


def dump_dataset(manifest: DatasetManifest, items: list[EvalItem]) -> dict:
    meta: dict = {"name": manifest.name, "version": manifest.version, "metrics": list(manifest.metrics)}
    if manifest.default_question_type:
        meta["default_question_type"] = manifest.default_question_type.value
    for key in ("language", "domain", "modality"):
        value = getattr(manifest, key)
        if value is not None:
            meta[key] = value
    return {"meta": meta, "data": [item_to_record(item) for item in items]}
