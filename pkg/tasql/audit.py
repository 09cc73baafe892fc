"""
Rule-based hallucination audit of predicted SQL against gold SQL.

Each detector is a necessary-condition heuristic for one category and returns a short
evidence string when it fires, None otherwise. The detectors measure; they never repair.
"""

from __future__ import annotations

import pathlib
import re
import sqlite3
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Sequence, Set, Tuple

from rich.table import Table
import sqlglot
from sqlglot import exp
from sqlglot.errors import TokenError
from sqlglot.tokens import TokenType

from .errors import DatabaseIOError, SqlParseError, UnsupportedError
from .schema_catalog import ColumnRef, SchemaCatalog, connect_readonly, quote_ident
from .sql_extract import DIALECT, equality_literals, extract_schema_entities, has_clause, parse_sql, projection_keys
from .utils import PACKAGE_DATA, read_text

SCHEMA_CONTRADICTION = "SchemaContradiction"
ATTRIBUTE_OVERANALYSIS = "AttributeOveranalysis"
VALUE_MISREPRESENTATION = "ValueMisrepresentation"
JOIN_REDUNDANCY = "JoinRedundancy"
CLAUSE_ABUSE = "ClauseAbuse"
MATHEMATICAL_DELUSION = "MathematicalDelusion"

FAMILIES: Dict[str, Tuple[str, ...]] = {
    "schema": (SCHEMA_CONTRADICTION, ATTRIBUTE_OVERANALYSIS, VALUE_MISREPRESENTATION),
    "logic": (JOIN_REDUNDANCY, CLAUSE_ABUSE, MATHEMATICAL_DELUSION),
}
CATEGORIES: Tuple[str, ...] = FAMILIES["schema"] + FAMILIES["logic"]
FAMILY_OF = {cat: fam for fam, cats in FAMILIES.items() for cat in cats}

FUNCTIONS_FILE = PACKAGE_DATA / "sqlite_functions.txt"
DEFAULT_CLAUSES = ("GROUP BY",)
DISTINCT_PROBE_CAP = 10_000

_QUOTED = re.compile(r"'(?:[^']|'')*'|\"(?:[^\"]|\"\")*\"|`(?:[^`]|``)*`|\[[^\]]*\]")
_CALL = re.compile(r"\b([A-Za-z_][A-Za-z0-9_]*)\s*\(")
_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NOT_CALLABLE = frozenset(
    getattr(TokenType, name)
    for name in ("STRING", "IDENTIFIER", "NUMBER", "NATIONAL_STRING", "HEX_STRING", "BIT_STRING", "BYTE_STRING", "RAW_STRING")
    if hasattr(TokenType, name)
)
# keywords that may be followed by an opening parenthesis without being a call
_PAREN_KEYWORDS = frozenset(
    """
    select from where and or not in exists as on join using values over filter when then else
    case between is like glob having by partition window with recursive union all except
    intersect distinct limit offset into table returning
    """.split()
)


@lru_cache(maxsize=4)
def _load_function_whitelist(path: str) -> FrozenSet[str]:
    names = set()
    for line in read_text(path).splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            names.add(line.lower())
    return frozenset(names)


def function_whitelist(path: str | pathlib.Path = FUNCTIONS_FILE) -> FrozenSet[str]:
    return _load_function_whitelist(str(path))


# ------------------------------
# Value probes
# ------------------------------

def _as_text(value: Any) -> Optional[str]:
    """Literal 1 and '1' name the same stored value."""
    return None if value is None else str(value)


class ValueProbe:
    """Answers "does this value occur in column c?" for one database, caching small columns."""

    def __init__(self, db_file: str | pathlib.Path, cap: int = DISTINCT_PROBE_CAP):
        self.db_file = pathlib.Path(db_file)
        self.cap = cap
        self._conn: Optional[sqlite3.Connection] = None
        self._distinct: Dict[str, Optional[Set[Optional[str]]]] = {}
        self._lock = threading.Lock()

    def _connection(self) -> sqlite3.Connection:
        if self._conn is None:
            self._conn = connect_readonly(self.db_file)
        return self._conn

    def contains(self, ref: ColumnRef, value: Any) -> bool:
        t, c = quote_ident(ref.table), quote_ident(ref.column)
        with self._lock:
            conn = self._connection()
            if ref.key not in self._distinct:
                rows = conn.execute(f"SELECT DISTINCT {c} FROM {t} LIMIT ?", (self.cap + 1,)).fetchall()
                self._distinct[ref.key] = {_as_text(r[0]) for r in rows} if len(rows) <= self.cap else None
            values = self._distinct[ref.key]
            if values is not None:
                return _as_text(value) in values
            sql = f"SELECT 1 FROM {t} WHERE CAST({c} AS TEXT) = ? LIMIT 1"
            return conn.execute(sql, (_as_text(value),)).fetchone() is not None

    def close(self) -> None:
        with self._lock:
            if self._conn is not None:
                self._conn.close()
                self._conn = None


# ------------------------------
# Detectors
# ------------------------------

def detect_schema_contradiction(pred_tree: exp.Expression, catalog: SchemaCatalog) -> Optional[str]:
    unresolved = extract_schema_entities(pred_tree, catalog).unresolved
    if unresolved:
        return "references absent from the schema: " + ", ".join(unresolved)
    return None


def detect_attribute_overanalysis(pred_tree: exp.Expression, gold_tree: exp.Expression, catalog: SchemaCatalog) -> Optional[str]:
    pred, gold = set(projection_keys(pred_tree, catalog)), set(projection_keys(gold_tree, catalog))
    if gold and pred > gold:
        return "extra projected attributes: " + ", ".join(sorted(pred - gold))
    return None


def detect_value_misrepresentation(
    pred_tree: exp.Expression,
    gold_tree: exp.Expression,
    catalog: SchemaCatalog,
    probe: ValueProbe,
) -> Optional[str]:
    """Raises DatabaseIOError or sqlite3.Error when the database cannot be probed."""
    gold_values: Dict[ColumnRef, List[Any]] = {}
    for ref, value in equality_literals(gold_tree, catalog):
        gold_values.setdefault(ref, []).append(value)
    hits: List[str] = []
    for ref, value in equality_literals(pred_tree, catalog):
        if ref not in gold_values or _as_text(value) in {_as_text(g) for g in gold_values[ref]}:
            continue
        if probe.contains(ref, value):
            continue
        present = [g for g in gold_values[ref] if probe.contains(ref, g)]
        if present:
            hits.append(f"{ref} = {value!r} does not occur (gold uses {present[0]!r})")
    return "; ".join(hits) if hits else None


def _base_tables(tree: exp.Expression, catalog: SchemaCatalog) -> Set[str]:
    return extract_schema_entities(tree, catalog).table_keys()


def detect_join_redundancy(pred_tree: exp.Expression, gold_tree: exp.Expression, catalog: SchemaCatalog) -> Optional[str]:
    pred, gold = _base_tables(pred_tree, catalog), _base_tables(gold_tree, catalog)
    if gold and pred > gold:
        return "joins tables the gold query does not need: " + ", ".join(sorted(pred - gold))
    return None


def detect_clause_abuse(
    pred_tree: exp.Expression,
    gold_tree: exp.Expression,
    clauses: Sequence[str] = DEFAULT_CLAUSES,
) -> Optional[str]:
    ordering = any(has_clause(t, c) for t in (pred_tree, gold_tree) for c in ("ORDER BY", "LIMIT"))
    if not ordering:
        return None
    abused = [c.upper() for c in clauses if has_clause(pred_tree, c) and not has_clause(gold_tree, c)]
    if abused:
        return f"{', '.join(abused)} added where the gold query orders/limits without it"
    return None


def function_calls(sql: str) -> List[str]:
    """Identifiers used as function calls, first-seen order. Literals and quoted identifiers never count."""
    seen: List[str] = []
    for name in _call_names(sql or ""):
        name = name.lower()
        if name in _PAREN_KEYWORDS or name in seen:
            continue
        seen.append(name)
    return seen


def _call_names(sql: str) -> List[str]:
    try:
        tokens = sqlglot.tokenize(sql, read=DIALECT)
    except TokenError:
        text = _QUOTED.sub("''", sql)
        return [m.group(1) for m in _CALL.finditer(text)]
    names: List[str] = []
    for i, tok in enumerate(tokens[:-1]):
        if tokens[i + 1].token_type != TokenType.L_PAREN or tok.token_type in _NOT_CALLABLE:
            continue
        if not _WORD.fullmatch(tok.text):
            continue
        # CTE column lists: WITH c(x) AS ...
        if i and tokens[i - 1].token_type in (TokenType.WITH, TokenType.RECURSIVE):
            continue
        names.append(tok.text)
    return names


def detect_mathematical_delusion(pred_sql: str, whitelist: Optional[FrozenSet[str]] = None) -> Optional[str]:
    allowed = whitelist if whitelist is not None else function_whitelist()
    unknown = [name for name in function_calls(pred_sql) if name not in allowed]
    if unknown:
        return "functions the engine does not provide: " + ", ".join(n.upper() for n in unknown)
    return None


# ------------------------------
# Per pair
# ------------------------------

@dataclass(frozen=True)
class HallucinationLabelSet:
    evidence: Mapping[str, str] = field(default_factory=dict)

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(c for c in CATEGORIES if c in self.evidence)

    def __contains__(self, category: str) -> bool:
        return category in self.evidence

    def __len__(self) -> int:
        return len(self.evidence)


@dataclass(frozen=True)
class AuditPair:
    example_id: str
    db_id: str
    pred_sql: Optional[str]
    gold_sql: str


@dataclass(frozen=True)
class AuditResult:
    example_id: str
    labels: HallucinationLabelSet
    warnings: Tuple[str, ...] = ()
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "example_id": self.example_id,
            "labels": list(self.labels.labels),
            "evidence": {c: self.labels.evidence[c] for c in self.labels.labels},
        }
        if self.warnings:
            out["warnings"] = list(self.warnings)
        if self.error:
            out["error"] = self.error
        return out


def audit_pair(
    pair: AuditPair,
    catalog: SchemaCatalog,
    probe: Optional[ValueProbe],
    clauses: Sequence[str] = DEFAULT_CLAUSES,
    whitelist: Optional[FrozenSet[str]] = None,
) -> AuditResult:
    """Run all six detectors on one pair. Failures become warnings or an error on the result."""
    if not pair.pred_sql:
        return AuditResult(pair.example_id, HallucinationLabelSet(), error="no predicted SQL")
    try:
        gold_tree = parse_sql(pair.gold_sql)
    except (SqlParseError, UnsupportedError) as e:
        return AuditResult(pair.example_id, HallucinationLabelSet(), error=f"gold SQL does not parse: {e}")

    evidence: Dict[str, str] = {}
    warnings: List[str] = []
    delusion = detect_mathematical_delusion(pair.pred_sql, whitelist)
    if delusion:
        evidence[MATHEMATICAL_DELUSION] = delusion

    try:
        pred_tree = parse_sql(pair.pred_sql)
    except (SqlParseError, UnsupportedError) as e:
        warnings.append(f"predicted SQL does not parse, structural checks skipped: {e}")
        return AuditResult(pair.example_id, HallucinationLabelSet(evidence), tuple(warnings))

    checks = (
        (SCHEMA_CONTRADICTION, lambda: detect_schema_contradiction(pred_tree, catalog)),
        (ATTRIBUTE_OVERANALYSIS, lambda: detect_attribute_overanalysis(pred_tree, gold_tree, catalog)),
        (JOIN_REDUNDANCY, lambda: detect_join_redundancy(pred_tree, gold_tree, catalog)),
        (CLAUSE_ABUSE, lambda: detect_clause_abuse(pred_tree, gold_tree, clauses)),
    )
    for category, check in checks:
        hit = check()
        if hit:
            evidence[category] = hit

    if probe is None:
        warnings.append(f"{VALUE_MISREPRESENTATION} skipped: no database to probe")
    else:
        try:
            hit = detect_value_misrepresentation(pred_tree, gold_tree, catalog, probe)
            if hit:
                evidence[VALUE_MISREPRESENTATION] = hit
        except (DatabaseIOError, sqlite3.Error) as e:
            warnings.append(f"{VALUE_MISREPRESENTATION} skipped: {e}")

    return AuditResult(pair.example_id, HallucinationLabelSet(evidence), tuple(warnings))


# ------------------------------
# Corpus report
# ------------------------------

def _pct(n: int, d: int) -> float:
    return round(100.0 * n / d, 2) if d else 0.0


@dataclass
class AuditReport:
    results: List[AuditResult]

    @property
    def audited(self) -> List[AuditResult]:
        return [r for r in self.results if r.error is None]

    def counts(self) -> Dict[str, int]:
        return {c: sum(1 for r in self.audited if c in r.labels) for c in CATEGORIES}

    def labeled(self, family: Optional[str] = None) -> int:
        cats = FAMILIES[family] if family else CATEGORIES
        return sum(1 for r in self.audited if any(c in r.labels for c in cats))

    def categories(self) -> Dict[str, Dict[str, Any]]:
        """Per category: count, share of examples labeled in its family, share of all labeled examples."""
        counts = self.counts()
        total = self.labeled()
        by_family = {fam: self.labeled(fam) for fam in FAMILIES}
        return {
            c: {
                "family": FAMILY_OF[c],
                "count": counts[c],
                "family_pct": _pct(counts[c], by_family[FAMILY_OF[c]]),
                "global_pct": _pct(counts[c], total),
            }
            for c in CATEGORIES
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "audited": len(self.audited),
            "labeled": self.labeled(),
            "labeled_by_family": {fam: self.labeled(fam) for fam in FAMILIES},
            "categories": self.categories(),
            "examples": [r.to_dict() for r in self.results],
            "errors": [{"example_id": r.example_id, "message": r.error} for r in self.results if r.error],
        }

    def table(self, title: str = "Hallucination audit") -> Table:
        table = Table(title=f"{title} ({len(self.audited)} audited, {self.labeled()} labeled)")
        table.add_column("Family")
        table.add_column("Category")
        table.add_column("Count", justify="right")
        table.add_column("Family %", justify="right")
        table.add_column("Global %", justify="right")
        for cat, row in self.categories().items():
            table.add_row(row["family"], cat, str(row["count"]), f"{row['family_pct']:.2f}", f"{row['global_pct']:.2f}")
        return table


@dataclass
class AuditComparison:
    baseline: AuditReport
    candidate: AuditReport

    def deltas(self) -> Dict[str, Dict[str, int]]:
        base, cand = self.baseline.counts(), self.candidate.counts()
        return {c: {"baseline": base[c], "candidate": cand[c], "delta": cand[c] - base[c]} for c in CATEGORIES}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "candidate": self.candidate.to_dict(),
            "baseline": self.baseline.to_dict(),
            "deltas": self.deltas(),
        }

    def table(self) -> Table:
        table = Table(title="Hallucination counts, baseline vs candidate")
        table.add_column("Category")
        table.add_column("Baseline", justify="right")
        table.add_column("Candidate", justify="right")
        table.add_column("Delta", justify="right")
        for cat, row in self.deltas().items():
            table.add_row(cat, str(row["baseline"]), str(row["candidate"]), f"{row['delta']:+d}")
        return table


def audit_corpus(
    pairs: Sequence[AuditPair],
    catalogs: Mapping[str, SchemaCatalog],
    db_files: Mapping[str, str | pathlib.Path],
    clauses: Sequence[str] = DEFAULT_CLAUSES,
    workers: int = 1,
    whitelist: Optional[FrozenSet[str]] = None,
) -> AuditReport:
    """Audit every pair; results keep input order and per-pair failures never abort the run."""
    whitelist = whitelist if whitelist is not None else function_whitelist()
    probes = {db_id: ValueProbe(path) for db_id, path in db_files.items()}

    def _one(pair: AuditPair) -> AuditResult:
        catalog = catalogs.get(pair.db_id)
        if catalog is None:
            return AuditResult(pair.example_id, HallucinationLabelSet(), error=f"no catalog for database '{pair.db_id}'")
        return audit_pair(pair, catalog, probes.get(pair.db_id), clauses, whitelist)

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(_one, pairs))
        else:
            results = [_one(p) for p in pairs]
    finally:
        for probe in probes.values():
            probe.close()
    return AuditReport(results=results)


def compare_audits(baseline: AuditReport, candidate: AuditReport) -> AuditComparison:
    return AuditComparison(baseline=baseline, candidate=candidate)