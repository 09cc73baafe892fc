"""Relational schema model: introspection, column descriptions, schema dictionary, FK graph."""

from __future__ import annotations

import json
import pathlib
import sqlite3
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import networkx as nx
import pandas as pd

from .errors import DatabaseIOError, PreconditionError, TasqlError
from .llm import PromptBundle, assemble_prompt, load_template
from .utils import PROMPTS, load_json, truncate_line, write_json

SAMPLE_LIMIT = 20
SAMPLE_TEXT_CHARS = 100
SUCCINCT_MAX_CHARS = 200
_CSV_ENCODINGS = ("utf-8-sig", "cp1252", "latin-1")


@dataclass(frozen=True, eq=False)
class ColumnRef:
    """`table.column` reference; equality and hashing use the lowercased key."""

    table: str
    column: str

    @property
    def key(self) -> str:
        return f"{self.table}.{self.column}".lower()

    @property
    def table_key(self) -> str:
        return self.table.lower()

    @classmethod
    def parse(cls, text: str) -> "ColumnRef":
        table, sep, column = text.partition(".")
        if not sep:
            raise ValueError(f"'{text}' is not a table.column reference")
        return cls(table, column)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ColumnRef):
            return NotImplemented
        return self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __lt__(self, other: "ColumnRef") -> bool:
        return self.key < other.key

    def __str__(self) -> str:
        return f"{self.table}.{self.column}"

    def to_dict(self) -> Dict[str, str]:
        return {"table": self.table, "column": self.column}


class SampleValue(NamedTuple):
    value: Any
    count: int


@dataclass(frozen=True)
class ColumnDef:
    name: str
    declared_type: str = ""
    original_description: str = ""
    value_description: str = ""
    succinct_description: Optional[str] = None
    sample_values: Tuple[SampleValue, ...] = ()
    distinct_count: int = 0

    def __post_init__(self) -> None:
        values = [s.value for s in self.sample_values]
        if len(values) != len(set(values)):
            raise PreconditionError(f"column {self.name}: sample values are not distinct")
        if len(values) > SAMPLE_LIMIT:
            raise PreconditionError(f"column {self.name}: more than {SAMPLE_LIMIT} sample values")
        s = self.succinct_description
        if s is not None and ("\n" in s or len(s) > SUCCINCT_MAX_CHARS):
            raise PreconditionError(
                f"column {self.name}: succinct description must be one line of at most {SUCCINCT_MAX_CHARS} chars"
            )


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: Tuple[ColumnDef, ...]
    primary_key: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for col in self.columns:
            low = col.name.lower()
            if low in seen:
                raise PreconditionError(f"table {self.name}: duplicate column {col.name}")
            seen.add(low)
        missing = [pk for pk in self.primary_key if pk.lower() not in seen]
        if missing:
            raise PreconditionError(f"table {self.name}: primary key {missing} not among columns")

    def column(self, name: str) -> Optional[ColumnDef]:
        low = name.lower()
        for col in self.columns:
            if col.name.lower() == low:
                return col
        return None


@dataclass(frozen=True)
class FkLink:
    source: ColumnRef
    target: ColumnRef

    def __post_init__(self) -> None:
        if self.source == self.target:
            raise PreconditionError(f"foreign key {self.source} points at itself")
        if self.source.table_key == self.target.table_key:
            raise PreconditionError(f"foreign key {self.source} -> {self.target} stays inside one table")

    def oriented_from(self, table: str) -> Tuple[ColumnRef, ColumnRef]:
        """(near, far) endpoints as seen from `table`."""
        if self.source.table_key == table.lower():
            return self.source, self.target
        return self.target, self.source

    def sort_key(self) -> Tuple[str, str]:
        return (self.source.key, self.target.key)


@dataclass(frozen=True)
class SchemaCatalog:
    db_id: str
    tables: Tuple[TableDef, ...] = ()
    foreign_keys: Tuple[FkLink, ...] = ()
    warnings: Tuple[str, ...] = field(default=(), compare=False)
    _by_name: Dict[str, TableDef] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        lookup: Dict[str, TableDef] = {}
        for table in self.tables:
            low = table.name.lower()
            if low in lookup:
                raise PreconditionError(f"catalog {self.db_id}: duplicate table {table.name}")
            lookup[low] = table
        object.__setattr__(self, "_by_name", lookup)
        for link in self.foreign_keys:
            for end in (link.source, link.target):
                if self.resolve(end.table, end.column) is None:
                    raise PreconditionError(f"catalog {self.db_id}: foreign key endpoint {end} does not exist")

    @property
    def n_tables(self) -> int:
        return len(self.tables)

    @property
    def n_columns(self) -> int:
        return sum(len(t.columns) for t in self.tables)

    def table(self, name: str) -> Optional[TableDef]:
        return self._by_name.get(name.lower())

    def resolve(self, table: str, column: str) -> Optional[ColumnRef]:
        """ColumnRef in catalog display case, or None when the entity does not exist."""
        tdef = self.table(table)
        if tdef is None:
            return None
        cdef = tdef.column(column)
        if cdef is None:
            return None
        return ColumnRef(tdef.name, cdef.name)

    def column_def(self, ref: ColumnRef) -> Optional[ColumnDef]:
        tdef = self.table(ref.table)
        return tdef.column(ref.column) if tdef else None

    def column_refs(self) -> List[ColumnRef]:
        return [ColumnRef(t.name, c.name) for t in self.tables for c in t.columns]

    def table_columns(self, table: str) -> List[ColumnRef]:
        tdef = self.table(table)
        if tdef is None:
            return []
        return [ColumnRef(tdef.name, c.name) for c in tdef.columns]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "db_id": self.db_id,
            "tables": [
                {
                    "name": t.name,
                    "primary_key": list(t.primary_key),
                    "columns": [
                        {
                            "name": c.name,
                            "declared_type": c.declared_type,
                            "original_description": c.original_description,
                            "value_description": c.value_description,
                            "succinct_description": c.succinct_description,
                            "sample_values": [[s.value, s.count] for s in c.sample_values],
                            "distinct_count": c.distinct_count,
                        }
                        for c in t.columns
                    ],
                }
                for t in self.tables
            ],
            "foreign_keys": [
                {"from": fk.source.to_dict(), "to": fk.target.to_dict()} for fk in self.foreign_keys
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SchemaCatalog":
        tables = tuple(
            TableDef(
                name=t["name"],
                primary_key=tuple(t.get("primary_key", [])),
                columns=tuple(
                    ColumnDef(
                        name=c["name"],
                        declared_type=c.get("declared_type", ""),
                        original_description=c.get("original_description", ""),
                        value_description=c.get("value_description", ""),
                        succinct_description=c.get("succinct_description"),
                        sample_values=tuple(SampleValue(v, int(n)) for v, n in c.get("sample_values", [])),
                        distinct_count=int(c.get("distinct_count", 0)),
                    )
                    for c in t.get("columns", [])
                ),
            )
            for t in data.get("tables", [])
        )
        fks = tuple(
            FkLink(
                ColumnRef(fk["from"]["table"], fk["from"]["column"]),
                ColumnRef(fk["to"]["table"], fk["to"]["column"]),
            )
            for fk in data.get("foreign_keys", [])
        )
        return cls(db_id=data["db_id"], tables=tables, foreign_keys=fks)


def save_catalog(catalog: SchemaCatalog, path: str | pathlib.Path) -> None:
    write_json(path, catalog.to_dict())


def load_catalog(path: str | pathlib.Path) -> SchemaCatalog:
    return SchemaCatalog.from_dict(load_json(path))


# ------------------------------
# Introspection
# ------------------------------

def quote_ident(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def connect_readonly(db_file: str | pathlib.Path, timeout: float = 5.0) -> sqlite3.Connection:
    path = pathlib.Path(db_file)
    if not path.is_file():
        raise DatabaseIOError(f"database file not found: {path}")
    try:
        conn = sqlite3.connect(path.resolve().as_uri() + "?mode=ro", uri=True, timeout=timeout, check_same_thread=False)
        conn.execute("SELECT name FROM sqlite_master LIMIT 1").fetchall()
    except sqlite3.Error as e:
        raise DatabaseIOError(f"cannot read database {path}: {e}") from e
    return conn


def _sample_values(conn: sqlite3.Connection, table: str, column: str, limit: int) -> Tuple[Tuple[SampleValue, ...], int]:
    t, c = quote_ident(table), quote_ident(column)
    distinct = conn.execute(f"SELECT COUNT(DISTINCT {c}) FROM {t}").fetchone()[0] or 0
    rows = conn.execute(
        f"SELECT {c}, COUNT(*) AS n FROM {t} WHERE {c} IS NOT NULL GROUP BY {c} ORDER BY n DESC, {c} LIMIT ?",
        (limit,),
    ).fetchall()
    merged: Dict[Any, int] = {}
    for value, n in rows:
        if isinstance(value, (bytes, bytearray, memoryview)):
            continue
        if isinstance(value, str) and len(value) > SAMPLE_TEXT_CHARS:
            value = value[:SAMPLE_TEXT_CHARS]
        merged[value] = merged.get(value, 0) + int(n)
    return tuple(SampleValue(v, n) for v, n in merged.items()), int(distinct)


def _read_description_csv(path: pathlib.Path) -> Tuple[Optional[pd.DataFrame], Optional[str]]:
    last_error: Optional[Exception] = None
    for enc in _CSV_ENCODINGS:
        try:
            frame = pd.read_csv(path, encoding=enc, dtype=str, keep_default_na=False)
        except UnicodeDecodeError as e:
            last_error = e
            continue
        except (pd.errors.ParserError, pd.errors.EmptyDataError, OSError) as e:
            return None, f"{path.name}: unreadable description file ({e})"
        frame.columns = [str(c).strip().lower() for c in frame.columns]
        return frame, None
    return None, f"{path.name}: cannot decode description file ({last_error})"


def _load_descriptions(
    meta_dir: pathlib.Path, tables: Sequence[TableDef]
) -> Tuple[Dict[Tuple[str, str], Tuple[str, str]], List[str]]:
    """Map (table_lower, column_lower) -> (description, value description)."""
    found: Dict[Tuple[str, str], Tuple[str, str]] = {}
    warnings: List[str] = []
    csv_files = {p.stem.strip().lower(): p for p in meta_dir.glob("*.csv")}
    for table in tables:
        path = csv_files.get(table.name.lower())
        if path is None:
            continue
        frame, err = _read_description_csv(path)
        if err:
            warnings.append(err)
            continue
        if "original_column_name" not in frame.columns:
            warnings.append(f"{path.name}: missing original_column_name header, file skipped")
            continue
        for idx, row in frame.iterrows():
            name = str(row.get("original_column_name", "")).strip()
            if not name or table.column(name) is None:
                warnings.append(f"{path.name} row {idx + 2}: column '{name}' not in table {table.name}, skipped")
                continue
            desc = " ".join(str(row.get("column_description", "")).split())
            values = " ".join(str(row.get("value_description", "")).split())
            found[(table.name.lower(), name.lower())] = (desc, values)
    return found, warnings


def introspect_database(
    db_file_path: str | pathlib.Path,
    external_metadata: str | pathlib.Path | None = None,
    db_id: Optional[str] = None,
    sample_limit: int = SAMPLE_LIMIT,
) -> SchemaCatalog:
    """Load tables, columns, primary keys, FKs and value samples from a SQLite file.

    Description CSVs come from `external_metadata` or, when omitted, from the BIRD
    `database_description/` folder next to the database file. Absent metadata is not an
    error; malformed rows are skipped and reported in `catalog.warnings`.
    """
    path = pathlib.Path(db_file_path)
    conn = connect_readonly(path)
    warnings: List[str] = []
    try:
        names = [
            r[0]
            for r in conn.execute(
                "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%'"
            ).fetchall()
        ]
        raw_tables: List[TableDef] = []
        samples: Dict[Tuple[str, str], Tuple[Tuple[SampleValue, ...], int]] = {}
        for name in names:
            info = conn.execute(f"PRAGMA table_info({quote_ident(name)})").fetchall()
            cols = tuple(ColumnDef(name=r[1], declared_type=(r[2] or "").strip()) for r in info)
            pk = tuple(r[1] for r in sorted((r for r in info if r[5]), key=lambda r: r[5]))
            raw_tables.append(TableDef(name=name, columns=cols, primary_key=pk))
            for col in cols:
                try:
                    samples[(name.lower(), col.name.lower())] = _sample_values(conn, name, col.name, sample_limit)
                except sqlite3.Error as e:
                    warnings.append(f"{name}.{col.name}: value sampling failed ({e})")

        by_name = {t.name.lower(): t for t in raw_tables}
        links: List[FkLink] = []
        seen_links: set[Tuple[str, str]] = set()
        for table in raw_tables:
            for row in conn.execute(f"PRAGMA foreign_key_list({quote_ident(table.name)})").fetchall():
                _id, seq, ref_table, from_col, to_col = row[0], row[1], row[2], row[3], row[4]
                target = by_name.get(str(ref_table).lower())
                if target is None:
                    warnings.append(f"{table.name}.{from_col}: foreign key to unknown table {ref_table}, skipped")
                    continue
                if to_col is None:
                    if seq >= len(target.primary_key):
                        warnings.append(f"{table.name}.{from_col}: implicit foreign key target has no primary key, skipped")
                        continue
                    to_col = target.primary_key[seq]
                src_col, dst_col = table.column(from_col), target.column(to_col)
                if src_col is None or dst_col is None:
                    warnings.append(f"{table.name}.{from_col} -> {ref_table}.{to_col}: endpoint missing, skipped")
                    continue
                if target.name.lower() == table.name.lower():
                    warnings.append(f"{table.name}.{from_col}: self-referencing foreign key, skipped")
                    continue
                link = FkLink(ColumnRef(table.name, src_col.name), ColumnRef(target.name, dst_col.name))
                if link.sort_key() in seen_links:
                    continue
                seen_links.add(link.sort_key())
                links.append(link)
    except sqlite3.Error as e:
        raise DatabaseIOError(f"cannot introspect {path}: {e}") from e
    finally:
        conn.close()

    meta_dir = pathlib.Path(external_metadata) if external_metadata else path.parent / "database_description"
    descriptions: Dict[Tuple[str, str], Tuple[str, str]] = {}
    if meta_dir.is_dir():
        descriptions, meta_warnings = _load_descriptions(meta_dir, raw_tables)
        warnings.extend(meta_warnings)

    tables: List[TableDef] = []
    for table in raw_tables:
        cols = []
        for col in table.columns:
            key = (table.name.lower(), col.name.lower())
            desc, values = descriptions.get(key, ("", ""))
            sample, distinct = samples.get(key, ((), 0))
            cols.append(replace(col, original_description=desc, value_description=values,
                                sample_values=sample, distinct_count=distinct))
        tables.append(replace(table, columns=tuple(cols)))

    return SchemaCatalog(
        db_id=db_id or path.stem,
        tables=tuple(tables),
        foreign_keys=tuple(links),
        warnings=tuple(warnings),
    )


# ------------------------------
# Column descriptions
# ------------------------------

def compose_full_description(column: ColumnDef) -> str:
    """`type: …; description: …; values: …` with empty segments left out."""
    parts = [f"type: {column.declared_type}"]
    desc = " ".join(column.original_description.split())
    values = " ".join(column.value_description.split())
    if desc:
        parts.append(f"description: {desc}")
    if values:
        parts.append(f"values: {values}")
    return "; ".join(parts)


def _succinct_prompt(table: TableDef, column: ColumnDef) -> str:
    template = load_template(PROMPTS / "succinct_description.txt")
    samples = ", ".join(repr(s.value) for s in column.sample_values[:5])
    body = template.body.format_map(
        {
            "column_key": ColumnRef(table.name, column.name).key,
            "declared_type": column.declared_type or "unknown",
            "original_description": " ".join(column.original_description.split()) or "(none)",
            "value_description": " ".join(column.value_description.split()) or "(none)",
            "sample_values": samples or "(none)",
        }
    )
    return assemble_prompt(PromptBundle(instruction=template.instruction, demonstrations=(), input=body))


def generate_succinct_descriptions(catalog: SchemaCatalog, gateway, workers: int = 4) -> SchemaCatalog:
    """Ask the gateway for a one-line description of every column.

    Responses are cut at the first newline and at 200 characters. A gateway failure for a
    column falls back to the truncated full description and is recorded in
    `catalog.warnings`.
    """
    jobs: List[Tuple[TableDef, ColumnDef]] = [(t, c) for t in catalog.tables for c in t.columns]

    def _describe(job: Tuple[TableDef, ColumnDef]) -> Tuple[str, Optional[str]]:
        table, column = job
        fallback = truncate_line(compose_full_description(column), SUCCINCT_MAX_CHARS)
        try:
            text = truncate_line(gateway.complete(_succinct_prompt(table, column)), SUCCINCT_MAX_CHARS)
        except TasqlError as e:
            return fallback, f"{table.name}.{column.name}: succinct description fell back to full description ({e})"
        if not text:
            return fallback, f"{table.name}.{column.name}: empty succinct description, used full description"
        return text, None

    if workers and workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_describe, jobs))
    else:
        results = [_describe(j) for j in jobs]

    described: Dict[Tuple[str, str], str] = {}
    warnings: List[str] = []
    for (table, column), (text, warn) in zip(jobs, results):
        described[(table.name, column.name)] = text
        if warn:
            warnings.append(warn)

    tables = tuple(
        replace(t, columns=tuple(replace(c, succinct_description=described[(t.name, c.name)]) for c in t.columns))
        for t in catalog.tables
    )
    return replace(catalog, tables=tables, warnings=tuple(catalog.warnings) + tuple(warnings))


# ------------------------------
# Schema dictionary
# ------------------------------

@dataclass(frozen=True)
class SchemaDictionary:
    entries: Tuple[Tuple[str, str], ...]
    uses_succinct: bool = False

    def keys(self) -> List[str]:
        return [k for k, _ in self.entries]

    def as_dict(self) -> Dict[str, str]:
        return dict(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def render(self) -> str:
        return render_schema_dictionary(self.entries)


def render_schema_dictionary(entries: Iterable[Tuple[str, str]]) -> str:
    """Python-dict style text, one `"table.column": "description",` per line."""
    lines = ["{"]
    for key, value in entries:
        lines.append(f"    {json.dumps(key, ensure_ascii=False)}: {json.dumps(value, ensure_ascii=False)},")
    lines.append("}")
    return "\n".join(lines)


def build_schema_dictionary(catalog: SchemaCatalog, use_succinct: bool) -> SchemaDictionary:
    if use_succinct:
        missing = [str(ColumnRef(t.name, c.name)) for t in catalog.tables for c in t.columns if c.succinct_description is None]
        if missing:
            raise PreconditionError(f"succinct descriptions missing for: {', '.join(missing)}")
    entries = []
    for t in catalog.tables:
        for c in t.columns:
            value = c.succinct_description if use_succinct else compose_full_description(c)
            entries.append((ColumnRef(t.name, c.name).key, value or ""))
    return SchemaDictionary(entries=tuple(entries), uses_succinct=use_succinct)


# ------------------------------
# FK join graph
# ------------------------------

class JoinGraph:
    """Undirected multigraph over tables; one edge per FkLink."""

    def __init__(self, graph: nx.MultiGraph):
        self.graph = graph

    @property
    def n_nodes(self) -> int:
        return self.graph.number_of_nodes()

    @property
    def n_edges(self) -> int:
        return self.graph.number_of_edges()

    def tables(self) -> List[str]:
        return sorted(self.graph.nodes)

    def display(self, node: str) -> str:
        return self.graph.nodes[node.lower()]["name"]

    def __contains__(self, table: str) -> bool:
        return table.lower() in self.graph

    def neighbors(self, table: str) -> List[Tuple[str, FkLink]]:
        """(neighbor, link) pairs sorted by neighbor, then by link columns."""
        node = table.lower()
        pairs = [(other, data["link"]) for _, other, data in self.graph.edges(node, data=True)]
        return sorted(pairs, key=lambda p: (p[0], p[1].oriented_from(node)[0].key, p[1].oriented_from(node)[1].key))

    def components(self) -> List[List[str]]:
        return sorted(sorted(c) for c in nx.connected_components(self.graph))


def fk_join_graph(catalog: SchemaCatalog) -> JoinGraph:
    graph = nx.MultiGraph()
    for table in sorted(catalog.tables, key=lambda t: t.name.lower()):
        graph.add_node(table.name.lower(), name=table.name)
    for link in sorted(catalog.foreign_keys, key=FkLink.sort_key):
        graph.add_edge(link.source.table_key, link.target.table_key, link=link)
    return JoinGraph(graph)
