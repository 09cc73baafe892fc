"""
SQL parsing and schema-entity extraction.

Shared by schema linking (entities of the dummy SQL), gold-schema derivation for the
linking metrics, and the hallucination auditor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, NamedTuple, Optional, Set, Tuple

import sqlglot
from sqlglot import exp
from sqlglot.errors import ParseError, TokenError

from .errors import GoldSchemaError, SqlParseError, UnsupportedError
from .schema_catalog import ColumnRef, SchemaCatalog

DIALECT = "sqlite"

_UNSUPPORTED = tuple(
    getattr(exp, name)
    for name in ("Insert", "Update", "Delete", "Create", "Drop", "Alter", "Command", "Merge", "Set", "Use", "Pragma")
    if hasattr(exp, name)
)


def parse_sql(sql: str) -> exp.Expression:
    """Parse one SELECT-family statement in the SQLite dialect."""
    text = (sql or "").strip()
    if not text:
        raise SqlParseError("empty SQL")
    try:
        tree = sqlglot.parse_one(text, read=DIALECT)
    except ParseError as e:
        first = e.errors[0] if e.errors else {}
        raise SqlParseError(
            first.get("description") or str(e).splitlines()[0],
            first.get("line"),
            first.get("col"),
        ) from e
    except TokenError as e:
        raise SqlParseError(str(e)) from e
    if tree is None:
        raise SqlParseError("no statement found")
    if _UNSUPPORTED and isinstance(tree, _UNSUPPORTED):
        raise UnsupportedError(f"{type(tree).__name__.upper()} statements are not supported")
    if not isinstance(tree, exp.Query):
        raise SqlParseError("not a SELECT statement")
    return tree


@dataclass(frozen=True)
class LinkedSchema:
    """Columns, tables and condition values picked out of one SQL query."""

    columns: FrozenSet[ColumnRef] = frozenset()
    tables: FrozenSet[str] = frozenset()
    condition_values: FrozenSet[Tuple[ColumnRef, Any]] = frozenset()
    unresolved: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        table_keys = {t.lower() for t in self.tables}
        missing = {c.table for c in self.columns if c.table_key not in table_keys}
        if missing:
            object.__setattr__(self, "tables", frozenset(self.tables) | frozenset(missing))

    def column_keys(self) -> Set[str]:
        return {c.key for c in self.columns}

    def table_keys(self) -> Set[str]:
        return {t.lower() for t in self.tables}

    def sorted_columns(self) -> List[ColumnRef]:
        return sorted(self.columns)

    @classmethod
    def full_catalog(cls, catalog: SchemaCatalog) -> "LinkedSchema":
        return cls(
            columns=frozenset(catalog.column_refs()),
            tables=frozenset(t.name for t in catalog.tables),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "columns": [str(c) for c in self.sorted_columns()],
            "tables": sorted(self.tables, key=str.lower),
            "condition_values": [
                [str(c), v] for c, v in sorted(self.condition_values, key=lambda cv: (cv[0].key, repr(cv[1])))
            ],
            "unresolved": list(self.unresolved),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LinkedSchema":
        return cls(
            columns=frozenset(ColumnRef.parse(c) for c in data.get("columns", [])),
            tables=frozenset(data.get("tables", [])),
            condition_values=frozenset((ColumnRef.parse(c), v) for c, v in data.get("condition_values", [])),
            unresolved=tuple(data.get("unresolved", [])),
        )


# ------------------------------
# Scope resolution
# ------------------------------

class _Source(NamedTuple):
    kind: str  # table | derived | unknown
    name: str


@dataclass
class _Scope:
    sources: Dict[str, _Source]
    base: List[str]
    has_derived: bool
    output_aliases: Set[str]


def _from_items(select: exp.Select) -> List[exp.Expression]:
    items: List[exp.Expression] = []
    from_ = select.args.get("from") or select.args.get("from_")
    if from_ is not None:
        items.append(from_.this)
        items.extend(from_.expressions or [])
    for join in select.args.get("joins") or []:
        items.append(join.this)
    return items


class _Resolver:
    def __init__(self, tree: exp.Expression, catalog: SchemaCatalog):
        self.tree = tree
        self.catalog = catalog
        self.ctes = {cte.alias_or_name.lower() for cte in tree.find_all(exp.CTE)}
        self._scopes: Dict[int, _Scope] = {}
        self.unresolved: List[str] = []

    def scope(self, select: exp.Select) -> _Scope:
        cached = self._scopes.get(id(select))
        if cached is not None:
            return cached
        sources: Dict[str, _Source] = {}
        base: List[str] = []
        has_derived = False
        for item in _from_items(select):
            alias = item.alias_or_name.lower() if item.alias_or_name else ""
            if isinstance(item, exp.Table) and isinstance(item.this, exp.Identifier):
                name = item.name
                if name.lower() in self.ctes:
                    has_derived = True
                    sources[alias] = _Source("derived", name)
                    continue
                tdef = self.catalog.table(name)
                src = _Source("table", tdef.name) if tdef else _Source("unknown", name)
                sources[alias] = src
                sources.setdefault(name.lower(), src)
                if tdef and tdef.name not in base:
                    base.append(tdef.name)
                if tdef is None:
                    self._flag(name)
            else:
                has_derived = True
                if alias:
                    sources[alias] = _Source("derived", alias)
        aliases = {e.alias.lower() for e in select.expressions if isinstance(e, exp.Alias) and e.alias}
        built = _Scope(sources, base, has_derived, aliases)
        self._scopes[id(select)] = built
        return built

    def _flag(self, text: str) -> None:
        if text not in self.unresolved:
            self.unresolved.append(text)

    def _chain(self, node: exp.Expression) -> List[_Scope]:
        chain: List[_Scope] = []
        sel = node if isinstance(node, exp.Select) else node.find_ancestor(exp.Select)
        while sel is not None:
            chain.append(self.scope(sel))
            sel = sel.find_ancestor(exp.Select)
        return chain

    def resolve(self, column: exp.Column) -> List[ColumnRef]:
        """Catalog columns a reference denotes; unresolvable references are recorded, derived ones ignored."""
        name = column.name
        qualifier = column.table
        chain = self._chain(column)
        if qualifier:
            q = qualifier.lower()
            for sc in chain:
                src = sc.sources.get(q)
                if src is None:
                    continue
                if src.kind != "table":
                    return []
                ref = self.catalog.resolve(src.name, name)
                if ref is None:
                    self._flag(f"{src.name}.{name}")
                    return []
                return [ref]
            ref = self.catalog.resolve(qualifier, name)
            if ref is None:
                self._flag(f"{qualifier}.{name}")
                return []
            return [ref]

        for depth, sc in enumerate(chain):
            owners = [ref for t in sc.base if (ref := self.catalog.resolve(t, name)) is not None]
            if owners:
                return owners
            if depth == 0 and name.lower() in sc.output_aliases:
                return []
            if sc.has_derived:
                return []
        if chain:
            own = chain[0]
            ident = column.this
            if isinstance(ident, exp.Identifier) and ident.quoted:
                return []
            self._flag(f"{own.base[0]}.{name}" if len(own.base) == 1 else name)
        else:
            self._flag(name)
        return []

    def expand_star(self, select: exp.Select, qualifier: Optional[str] = None) -> List[ColumnRef]:
        sc = self.scope(select)
        if qualifier is None:
            return [ref for t in sc.base for ref in self.catalog.table_columns(t)]
        src = sc.sources.get(qualifier.lower())
        if src is None or src.kind != "table":
            return []
        return self.catalog.table_columns(src.name)


def _literal_value(node: exp.Expression) -> Tuple[bool, Any]:
    if isinstance(node, exp.Neg) and isinstance(node.this, exp.Literal) and not node.this.is_string:
        ok, value = _literal_value(node.this)
        return ok, -value
    if not isinstance(node, exp.Literal):
        return False, None
    if node.is_string:
        return True, node.this
    text = node.this
    try:
        return True, int(text)
    except ValueError:
        try:
            return True, float(text)
        except ValueError:
            return True, text


def _column_literal_pairs(node: exp.Expression) -> List[Tuple[exp.Column, Any]]:
    pairs: List[Tuple[exp.Column, Any]] = []
    if isinstance(node, (exp.EQ, exp.Like, exp.ILike)):
        left, right = node.this, node.expression
        for col, lit in ((left, right), (right, left)):
            if isinstance(col, exp.Column):
                ok, value = _literal_value(lit)
                if ok:
                    pairs.append((col, value))
                    break
    elif isinstance(node, exp.In) and isinstance(node.this, exp.Column):
        for item in node.expressions or []:
            ok, value = _literal_value(item)
            if ok:
                pairs.append((node.this, value))
    return pairs


def extract_schema_entities(tree: exp.Expression, catalog: SchemaCatalog) -> LinkedSchema:
    resolver = _Resolver(tree, catalog)
    columns: Set[ColumnRef] = set()
    tables: Set[str] = set()

    for select in tree.find_all(exp.Select):
        sc = resolver.scope(select)
        tables.update(sc.base)
        for item in select.expressions:
            if isinstance(item, exp.Star):
                columns.update(resolver.expand_star(select))

    for column in tree.find_all(exp.Column):
        if isinstance(column.this, exp.Star):
            select = column.find_ancestor(exp.Select)
            if select is not None:
                columns.update(resolver.expand_star(select, column.table or None))
            continue
        columns.update(resolver.resolve(column))

    values: Set[Tuple[ColumnRef, Any]] = set()
    for node in tree.find_all(exp.EQ, exp.Like, exp.ILike, exp.In):
        for col, value in _column_literal_pairs(node):
            refs = resolver.resolve(col)
            if len(refs) == 1:
                values.add((refs[0], value))

    tables.update(c.table for c in columns)
    return LinkedSchema(
        columns=frozenset(columns),
        tables=frozenset(tables),
        condition_values=frozenset(values),
        unresolved=tuple(resolver.unresolved),
    )


def ground_truth_schema(gold_sql: str, catalog: SchemaCatalog) -> LinkedSchema:
    try:
        tree = parse_sql(gold_sql)
    except (SqlParseError, UnsupportedError) as e:
        raise GoldSchemaError(f"gold SQL does not parse: {e}") from e
    linked = extract_schema_entities(tree, catalog)
    if linked.unresolved:
        raise GoldSchemaError(
            f"gold SQL references unknown entities: {', '.join(linked.unresolved)}", linked.unresolved
        )
    return linked


# ------------------------------
# Helpers used by the auditor
# ------------------------------

def equality_literals(tree: exp.Expression, catalog: SchemaCatalog) -> List[Tuple[ColumnRef, Any]]:
    """(column, literal) for every `column = literal` predicate, in query order."""
    resolver = _Resolver(tree, catalog)
    out: List[Tuple[ColumnRef, Any]] = []
    for node in tree.find_all(exp.EQ):
        for col, value in _column_literal_pairs(node):
            refs = resolver.resolve(col)
            if len(refs) == 1 and (refs[0], value) not in out:
                out.append((refs[0], value))
    return out


def _outer_select(tree: exp.Expression) -> Optional[exp.Select]:
    node = tree
    while node is not None and not isinstance(node, exp.Select):
        if isinstance(node, exp.Subquery):
            node = node.this
        elif isinstance(node, getattr(exp, "SetOperation", exp.Union)):
            node = node.this
        else:
            return None
    return node


def projection_keys(tree: exp.Expression, catalog: SchemaCatalog) -> List[str]:
    """Normalized projection list: plain columns as canonical keys, expressions as canonical SQL text."""
    select = _outer_select(tree)
    if select is None:
        return []
    resolver = _Resolver(tree, catalog)
    keys: List[str] = []
    for item in select.expressions:
        target = item.this if isinstance(item, exp.Alias) else item
        if isinstance(target, exp.Star):
            keys.extend(ref.key for ref in resolver.expand_star(select))
            continue
        if isinstance(target, exp.Column) and isinstance(target.this, exp.Star):
            keys.extend(ref.key for ref in resolver.expand_star(select, target.table or None))
            continue
        if isinstance(target, exp.Column):
            refs = resolver.resolve(target)
            keys.append(refs[0].key if len(refs) == 1 else target.name.lower())
            continue

        # resolve on the attached nodes; a detached copy has lost its scope
        originals = list(target.find_all(exp.Column))
        resolved = [resolver.resolve(c) if not isinstance(c.this, exp.Star) else [] for c in originals]
        canon = target.copy()
        for node, refs in zip(list(canon.find_all(exp.Column)), resolved):
            if len(refs) == 1:
                node.replace(exp.column(refs[0].column.lower(), table=refs[0].table.lower()))
        keys.append(canon.sql(dialect=DIALECT).lower())
    return keys


_CLAUSES = {
    "GROUP BY": exp.Group,
    "ORDER BY": exp.Order,
    "LIMIT": exp.Limit,
    "HAVING": exp.Having,
    "DISTINCT": exp.Distinct,
}


def has_clause(tree: exp.Expression, clause: str) -> bool:
    kind = _CLAUSES.get(" ".join(clause.upper().split()))
    if kind is None:
        raise ValueError(f"unknown clause '{clause}'")
    return tree.find(kind) is not None
