"""Execution Accuracy and schema-linking Recall/Precision/F1."""

from __future__ import annotations

import io
import pathlib
import sqlite3
import time
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from .dataset import bucket_order, partition_by_difficulty
from .errors import DatabaseIOError, PreconditionError
from .schema_catalog import connect_readonly
from .sql_extract import LinkedSchema

DEFAULT_TIMEOUT = 30.0
ROWS, ERROR, TIMEOUT = "rows", "error", "timeout"
# sqlite calls the progress handler every N virtual machine instructions
_PROGRESS_STEPS = 10_000


class _SqlNull:
    __slots__ = ()

    def __repr__(self) -> str:
        return "NULL"


NULL = _SqlNull()


@dataclass(frozen=True)
class ExecutionOutcome:
    status: str
    rows: Optional[FrozenSet[Tuple[Any, ...]]] = None
    elapsed: float = 0.0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == ROWS


def _normalize_value(value: Any) -> Any:
    if value is None:
        return NULL
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, (bytearray, memoryview)):
        return bytes(value)
    return value


def execute_sql(db_file: str | pathlib.Path, sql: Optional[str], timeout: float = DEFAULT_TIMEOUT) -> ExecutionOutcome:
    """Run one statement read-only and collect its rows as a set. Never raises."""
    if not sql or not sql.strip():
        return ExecutionOutcome(ERROR, error="empty SQL")
    start = time.monotonic()
    try:
        conn = connect_readonly(db_file)
    except DatabaseIOError as e:
        return ExecutionOutcome(ERROR, error=str(e))

    deadline = start + timeout
    expired = False

    def _watchdog() -> int:
        nonlocal expired
        if time.monotonic() > deadline:
            expired = True
            return 1
        return 0

    conn.set_progress_handler(_watchdog, _PROGRESS_STEPS)
    try:
        cur = conn.execute(sql)
        rows = frozenset(tuple(_normalize_value(v) for v in row) for row in cur.fetchall())
    except (sqlite3.Error, sqlite3.Warning, ValueError, OverflowError) as e:
        elapsed = time.monotonic() - start
        if expired:
            return ExecutionOutcome(TIMEOUT, elapsed=elapsed, error=f"timed out after {timeout:g}s")
        return ExecutionOutcome(ERROR, elapsed=elapsed, error=str(e))
    finally:
        conn.close()
    return ExecutionOutcome(ROWS, rows=rows, elapsed=time.monotonic() - start)


@dataclass(frozen=True)
class ExecutionVerdict:
    correct: bool
    gold_valid: bool
    predicted: ExecutionOutcome
    gold: ExecutionOutcome


def compare_execution(
    pred_sql: Optional[str],
    gold_sql: str,
    db_file: str | pathlib.Path,
    timeout: float = DEFAULT_TIMEOUT,
) -> ExecutionVerdict:
    gold = execute_sql(db_file, gold_sql, timeout)
    pred = execute_sql(db_file, pred_sql, timeout)
    correct = gold.ok and pred.ok and pred.rows == gold.rows
    return ExecutionVerdict(correct=correct, gold_valid=gold.ok, predicted=pred, gold=gold)


def execution_accuracy(pred_sql: Optional[str], gold_sql: str, db_file: str | pathlib.Path, timeout: float = DEFAULT_TIMEOUT) -> bool:
    return compare_execution(pred_sql, gold_sql, db_file, timeout).correct


# ------------------------------
# Schema linking
# ------------------------------

class LinkingExample(NamedTuple):
    indicator: int
    precision: float
    gold_size: int
    linked_size: int


@dataclass(frozen=True)
class SchemaLinkingScore:
    recall: float
    precision: float
    f1: float
    n_examples: int
    per_example: Tuple[LinkingExample, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "recall": round(self.recall, 6),
            "precision": round(self.precision, 6),
            "f1": round(self.f1, 6),
            "n_examples": self.n_examples,
        }


def _elements(linked: LinkedSchema, include_tables: bool) -> set:
    keys = set(linked.column_keys())
    if include_tables:
        keys.update(f"table:{t}" for t in linked.table_keys())
    return keys


def score_linking_pair(predicted: LinkedSchema, gold: LinkedSchema, include_tables: bool = False) -> LinkingExample:
    pred, truth = _elements(predicted, include_tables), _elements(gold, include_tables)
    hits = len(pred & truth)
    return LinkingExample(
        indicator=int(truth <= pred),
        precision=hits / len(pred) if pred else 0.0,
        gold_size=len(truth),
        linked_size=len(pred),
    )


def schema_linking_scores(
    pairs: Sequence[Tuple[LinkedSchema, LinkedSchema]],
    include_tables: bool = False,
) -> SchemaLinkingScore:
    """pairs are (linked, gold). Recall counts examples whose linked set covers the gold set."""
    if not pairs:
        raise PreconditionError("schema_linking_scores needs at least one example")
    per = tuple(score_linking_pair(pred, gold, include_tables) for pred, gold in pairs)
    recall = float(np.mean([p.indicator for p in per]))
    precision = float(np.mean([p.precision for p in per]))
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return SchemaLinkingScore(recall=recall, precision=precision, f1=f1, n_examples=len(per), per_example=per)


# ------------------------------
# Corpus report
# ------------------------------

@dataclass(frozen=True)
class ExampleEval:
    example_id: str
    difficulty: str
    correct: bool
    gold_valid: bool
    pred_status: str = ROWS
    error: Optional[str] = None
    linked: Optional[LinkedSchema] = None
    gold_schema: Optional[LinkedSchema] = None
    fallback: bool = False


def _pct(hits: int, total: int) -> float:
    return round(100.0 * hits / total, 2) if total else 0.0


@dataclass
class EvalReport:
    total_ex: float
    by_difficulty: Dict[str, Dict[str, Any]]
    schema_linking: Optional[SchemaLinkingScore]
    counts: Dict[str, int]
    errors: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total_ex": self.total_ex,
            "by_difficulty": self.by_difficulty,
            "schema_linking": self.schema_linking.to_dict() if self.schema_linking else None,
            "counts": self.counts,
            "errors": self.errors,
        }

    def table(self) -> Table:
        table = Table(title="Execution Accuracy (EX %)")
        table.add_column("Bucket")
        table.add_column("Correct", justify="right")
        table.add_column("Count", justify="right")
        table.add_column("EX", justify="right")
        for bucket, row in self.by_difficulty.items():
            table.add_row(bucket, str(row["correct"]), str(row["total"]), f"{row['ex']:.2f}")
        table.add_row("total", str(self.counts["correct"]), str(self.counts["evaluated"]), f"{self.total_ex:.2f}")
        return table

    def linking_table(self) -> Optional[Table]:
        if self.schema_linking is None:
            return None
        return linking_table(self.schema_linking)

    def render(self, width: int = 100) -> str:
        return render_tables([t for t in (self.table(), self.linking_table()) if t is not None], width)


def linking_table(score: SchemaLinkingScore) -> Table:
    table = Table(title=f"Schema linking ({score.n_examples} examples)")
    table.add_column("Recall", justify="right")
    table.add_column("Precision", justify="right")
    table.add_column("F1", justify="right")
    table.add_row(f"{100 * score.recall:.2f}", f"{100 * score.precision:.2f}", f"{100 * score.f1:.2f}")
    return table


def render_tables(tables: Iterable[Table], width: int = 100) -> str:
    """Plain-text rendering of rich tables, for the .txt reports written next to the JSON."""
    buf = io.StringIO()
    out = Console(file=buf, width=width, color_system=None, force_terminal=False)
    for t in tables:
        out.print(t)
    return buf.getvalue()


def corpus_report(results: Sequence[ExampleEval], include_tables: bool = False) -> EvalReport:
    """EX per difficulty bucket and overall; examples whose gold SQL fails are left out of every denominator."""
    evaluated: List[ExampleEval] = []
    errors: List[Dict[str, Any]] = []
    counts = {
        "examples": len(results),
        "evaluated": 0,
        "correct": 0,
        "gold_invalid": 0,
        "pred_errors": 0,
        "pred_timeouts": 0,
        "fallbacks": 0,
    }
    pairs: List[Tuple[LinkedSchema, LinkedSchema]] = []
    for r in results:
        if r.fallback:
            counts["fallbacks"] += 1
        if r.linked is not None and r.gold_schema is not None:
            pairs.append((r.linked, r.gold_schema))
        if not r.gold_valid:
            counts["gold_invalid"] += 1
            errors.append({"example_id": r.example_id, "stage": "gold", "message": r.error or "gold SQL failed"})
            continue
        counts["evaluated"] += 1
        if r.pred_status == ERROR:
            counts["pred_errors"] += 1
        elif r.pred_status == TIMEOUT:
            counts["pred_timeouts"] += 1
        if r.error and r.pred_status != ROWS:
            errors.append({"example_id": r.example_id, "stage": "prediction", "message": r.error})
        counts["correct"] += int(r.correct)
        evaluated.append(r)

    buckets = partition_by_difficulty(evaluated)
    by_difficulty = {}
    for b in bucket_order(list(buckets)):
        hits = sum(r.correct for r in buckets[b])
        by_difficulty[b] = {"ex": _pct(hits, len(buckets[b])), "correct": hits, "total": len(buckets[b])}
    linking = schema_linking_scores(pairs, include_tables) if pairs else None
    return EvalReport(
        total_ex=_pct(counts["correct"], counts["evaluated"]),
        by_difficulty=by_difficulty,
        schema_linking=linking,
        counts=counts,
        errors=errors,
    )
