"""BIRD / Spider example loading and difficulty partitioning."""

from __future__ import annotations

import json
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Tuple, TypeVar

from .errors import CorpusParseError, PreconditionError

DIFFICULTIES = ("simple", "moderate", "challenging", "easy", "medium", "hard", "extra", "unknown")
SOURCES = ("bird", "spider")
KNOWLEDGE_MODES = ("with_knowledge", "without_knowledge")

_DIFFICULTY_ALIASES = {"extra hard": "extra", "extra_hard": "extra", "extra-hard": "extra"}

T = TypeVar("T")


@dataclass(frozen=True)
class TaskExample:
    example_id: str
    question: str
    db_id: str
    gold_sql: str
    evidence: str = ""
    difficulty: str = "unknown"

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise PreconditionError(f"example {self.example_id}: empty question")
        if self.difficulty not in DIFFICULTIES:
            raise PreconditionError(f"example {self.example_id}: unknown difficulty {self.difficulty}")


@dataclass(frozen=True)
class Corpus:
    examples: Tuple[TaskExample, ...] = ()
    source: str = "bird"
    knowledge_mode: str = "with_knowledge"
    errors: Tuple[str, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def normalize_difficulty(value: Any) -> str:
    text = str(value or "").strip().lower()
    text = _DIFFICULTY_ALIASES.get(text, text)
    return text if text in DIFFICULTIES else "unknown"


def _record_to_example(rec: Dict[str, Any], index: int) -> TaskExample:
    question = rec.get("question")
    db_id = rec.get("db_id")
    gold = rec.get("SQL", rec.get("query"))
    missing = [name for name, v in (("question", question), ("db_id", db_id), ("SQL/query", gold)) if not v]
    if missing:
        raise KeyError(", ".join(missing))
    ex_id = rec.get("question_id", index)
    return TaskExample(
        example_id=str(ex_id),
        question=str(question),
        db_id=str(db_id),
        gold_sql=str(gold),
        evidence=str(rec.get("evidence") or ""),
        difficulty=normalize_difficulty(rec.get("difficulty")),
    )


def _char_to_byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def load_corpus(
    path: str | pathlib.Path,
    source: str = "bird",
    knowledge_mode: str = "with_knowledge",
) -> Corpus:
    """Read a benchmark JSON array. Records missing a mandatory field are skipped and listed in `errors`."""
    if source not in SOURCES:
        raise PreconditionError(f"source must be one of {SOURCES}")
    if knowledge_mode not in KNOWLEDGE_MODES:
        raise PreconditionError(f"knowledge_mode must be one of {KNOWLEDGE_MODES}")
    text = pathlib.Path(path).read_text(encoding="utf-8-sig")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise CorpusParseError(f"{pathlib.Path(path).name}: {e.msg}", _char_to_byte_offset(text, e.pos)) from e
    if not isinstance(data, list):
        raise CorpusParseError(f"{pathlib.Path(path).name}: top level is not a JSON array", 0)

    examples: List[TaskExample] = []
    errors: List[str] = []
    for i, rec in enumerate(data):
        if not isinstance(rec, dict):
            errors.append(f"record {i}: not a JSON object")
            continue
        try:
            examples.append(_record_to_example(rec, i))
        except KeyError as e:
            errors.append(f"record {i}: missing {e.args[0]}")
        except PreconditionError as e:
            errors.append(f"record {i}: {e}")
    return Corpus(examples=tuple(examples), source=source, knowledge_mode=knowledge_mode, errors=tuple(errors))


def partition_by_difficulty(items: Iterable[T]) -> Dict[str, List[T]]:
    """
    Buckets keyed by difficulty, in first-seen order; input order kept inside each bucket.
    Takes a Corpus or any iterable of records with a `difficulty` attribute.
    """
    buckets: Dict[str, List[T]] = {}
    for item in items:
        buckets.setdefault(item.difficulty, []).append(item)
    return buckets


def bucket_order(keys: List[str]) -> List[str]:
    """Report order: the benchmark's own difficulty order, then anything else."""
    ranked = [d for d in DIFFICULTIES if d in keys]
    return ranked + sorted(k for k in keys if k not in ranked)
