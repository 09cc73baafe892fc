"""
Symbolic plan -> SQLite SQL.

Root `df` is the inner join of every table the plan mentions, joined along the FK graph.
Each binding is a frame state (filters, grouping, having, ordering, limit, projection)
derived from its source frame. Aggregates written over another frame become scalar
subqueries that repeat the plan's join with that frame's own filters.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .errors import CompileError, JoinInferenceError, PreconditionError, SqlParseError, UnsupportedError
from .joins import JoinPath, infer_join_path
from .schema_catalog import ColumnRef, JoinGraph, SchemaCatalog
from .sql_extract import LinkedSchema, parse_sql
from .symbolic import (
    AggExpr,
    Arith,
    CaseWhen,
    Cast,
    Constant,
    GroupBy,
    Limit,
    OrderBy,
    Predicate,
    RESULT_FRAME,
    ROOT_FRAME,
    Select,
    Step,
    SymbolicPlan,
    Where,
    iter_expr,
    op_columns,
    op_exprs,
)

_SIMPLE_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_RESERVED = frozenset(
    """
    abort action add all alter analyze and as asc attach autoincrement before begin between by cascade case
    cast check collate column commit conflict constraint create cross current current_date current_time
    current_timestamp database default deferrable deferred delete desc detach distinct do drop each else end
    escape except exclusive exists explain fail filter for foreign from full glob group having if ignore
    immediate in index indexed initially inner insert instead intersect into is isnull join key left like
    limit match natural no not notnull null of offset on or order outer over plan pragma primary query raise
    recursive references regexp reindex release rename replace restrict right rollback row rows savepoint
    select set table temp temporary then to transaction trigger union unique update using vacuum values view
    virtual when where window with without
    date datetime day double float hour int integer interval minute month position real second text time
    timestamp type year
    """.split()
)
_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


@dataclass(frozen=True)
class ValidationIssue:
    severity: str  # error | warning
    message: str
    binding: Optional[str] = None

    def __str__(self) -> str:
        where = f"{self.binding}: " if self.binding else ""
        return f"[{self.severity}] {where}{self.message}"


@dataclass(frozen=True)
class CompiledQuery:
    sql: str
    tables: Tuple[str, ...]
    join_path: JoinPath
    warnings: Tuple[str, ...] = ()


def has_errors(issues: Sequence[ValidationIssue]) -> bool:
    return any(i.severity == "error" for i in issues)


# ------------------------------
# Validation
# ------------------------------

def _frame_refs(op) -> List[str]:
    return [n.frame for e in op_exprs(op) for n in iter_expr(e) if isinstance(n, AggExpr) and n.frame]


def _counted_tables(op) -> List[str]:
    return [n.table for e in op_exprs(op) for n in iter_expr(e) if isinstance(n, AggExpr) and n.table]


def validate_plan(plan: SymbolicPlan, linked: Optional[LinkedSchema], catalog: SchemaCatalog) -> List[ValidationIssue]:
    """Binding and schema checks. Columns outside the linked schema are only warnings."""
    issues: List[ValidationIssue] = []
    defined: Dict[str, Step] = {}
    linked_keys = linked.column_keys() if linked is not None else None
    reported: set = set()

    for step in plan.steps:
        b = step.binding
        if b == ROOT_FRAME:
            issues.append(ValidationIssue("error", f"'{ROOT_FRAME}' cannot be reassigned", b))
        elif b in defined:
            issues.append(ValidationIssue("error", f"frame '{b}' is defined more than once", b))
        if step.source != ROOT_FRAME and step.source not in defined:
            issues.append(ValidationIssue("error", f"undefined frame '{step.source}'", b))

        lineage_shaped = _lineage_has_filter(step.source, defined)
        for op in step.ops:
            if isinstance(op, Limit) and not lineage_shaped:
                issues.append(ValidationIssue("error", "limit() must follow orderby(), groupby() or where()", b))
            if isinstance(op, (Where, OrderBy, GroupBy)):
                lineage_shaped = True
            for frame in _frame_refs(op):
                if frame != ROOT_FRAME and frame not in defined:
                    issues.append(ValidationIssue("error", f"aggregate over undefined frame '{frame}'", b))
            for ref in op_columns(op):
                if ref.key in reported:
                    continue
                if catalog.resolve(ref.table, ref.column) is None:
                    reported.add(ref.key)
                    issues.append(ValidationIssue("error", f"column {ref} does not exist", b))
                elif linked_keys is not None and ref.key not in linked_keys:
                    reported.add(ref.key)
                    issues.append(ValidationIssue("warning", f"column {ref} is outside the linked schema", b))
            for table in _counted_tables(op):
                if catalog.table(table) is None and table not in reported:
                    reported.add(table)
                    issues.append(ValidationIssue("error", f"table {table} does not exist", b))
        if b not in defined:
            defined[b] = step

    bindings = plan.bindings()
    if RESULT_FRAME not in bindings:
        issues.append(ValidationIssue("error", f"plan never assigns '{RESULT_FRAME}'"))
    elif bindings[-1] != RESULT_FRAME:
        issues.append(ValidationIssue("error", f"'{RESULT_FRAME}' must be the last step", RESULT_FRAME))
    return issues


def _lineage_has_filter(frame: str, defined: Dict[str, Step]) -> bool:
    seen = set()
    while frame != ROOT_FRAME and frame in defined and frame not in seen:
        seen.add(frame)
        step = defined[frame]
        if any(isinstance(op, (Where, OrderBy, GroupBy)) for op in step.ops):
            return True
        frame = step.source
    return False


# ------------------------------
# Frame states
# ------------------------------

Condition = Tuple[Any, Predicate]


@dataclass(frozen=True)
class FrameState:
    name: str
    depth: int = 0
    wheres: Tuple[Condition, ...] = ()
    group: Tuple[ColumnRef, ...] = ()
    having: Tuple[Condition, ...] = ()
    order: Tuple[OrderBy, ...] = ()
    limit: Optional[int] = None
    select: Optional[Select] = None

    @property
    def shaped(self) -> bool:
        return bool(self.group or self.order or self.limit is not None)


def _inline_aggregate(expr: Any) -> bool:
    return any(isinstance(n, AggExpr) and n.frame is None for n in iter_expr(expr))


def _apply(state: FrameState, op, binding: str) -> FrameState:
    if isinstance(op, Where):
        cond = (op.element, op.predicate)
        if _inline_aggregate(op.element) or _inline_aggregate(op.predicate.value):
            if not state.group:
                raise CompileError(f"{binding}: filtering on an aggregate needs a preceding groupby()")
            if state.order or state.limit is not None:
                raise CompileError(f"{binding}: cannot filter a frame after orderby()/limit()")
            return replace(state, having=state.having + (cond,))
        if state.shaped:
            raise CompileError(f"{binding}: cannot filter rows of a frame that is grouped, ordered or limited")
        return replace(state, wheres=state.wheres + (cond,))
    if isinstance(op, OrderBy):
        if state.limit is not None:
            raise CompileError(f"{binding}: orderby() after limit() is not supported")
        return replace(state, order=state.order + (op,))
    if isinstance(op, Limit):
        if state.limit is not None:
            raise CompileError(f"{binding}: frame is already limited")
        return replace(state, limit=op.n)
    if isinstance(op, GroupBy):
        if state.group:
            raise CompileError(f"{binding}: frame is already grouped")
        if state.order or state.limit is not None:
            raise CompileError(f"{binding}: groupby() after orderby()/limit() is not supported")
        return replace(state, group=op.keys)
    if isinstance(op, Select):
        return replace(state, select=op)
    raise CompileError(f"{binding}: unsupported step {op!r}")


def _build_states(plan: SymbolicPlan) -> Dict[str, FrameState]:
    states: Dict[str, FrameState] = {ROOT_FRAME: FrameState(ROOT_FRAME)}
    for step in plan.steps:
        if step.binding in states:
            raise CompileError(f"frame '{step.binding}' is defined more than once")
        source = states.get(step.source)
        if source is None:
            raise CompileError(f"{step.binding}: undefined frame '{step.source}'")
        state = replace(source, name=step.binding, depth=source.depth + 1)
        for op in step.ops:
            for frame in _frame_refs(op):
                if frame not in states:
                    raise CompileError(f"{step.binding}: aggregate over undefined frame '{frame}'")
            state = _apply(state, op, step.binding)
        states[step.binding] = state
    return states


def _final_state(plan: SymbolicPlan, states: Dict[str, FrameState]) -> FrameState:
    res_step = plan.step(RESULT_FRAME)
    if res_step is None or plan.steps[-1].binding != RESULT_FRAME:
        raise CompileError(f"plan must end with a '{RESULT_FRAME}' step")
    final = states[RESULT_FRAME]
    bare = not (final.wheres or final.group or final.having or final.order or final.limit is not None)
    if res_step.source != ROOT_FRAME or not bare or final.select is None:
        return final
    # res = df.select(...): the deepest frame it aggregates over supplies the row set
    frames: List[str] = []
    for item in final.select.items:
        for n in iter_expr(item):
            if isinstance(n, AggExpr) and n.frame and n.frame != ROOT_FRAME and n.frame not in frames:
                frames.append(n.frame)
    if not frames:
        return final
    primary = frames[0]
    for f in frames[1:]:
        if states[f].depth > states[primary].depth:
            primary = f
    return replace(states[primary], name=RESULT_FRAME, select=final.select)


# ------------------------------
# SQL rendering
# ------------------------------

def quote_identifier(name: str) -> str:
    if _SIMPLE_IDENT.match(name) and name.lower() not in _RESERVED:
        return name
    return '"' + name.replace('"', '""') + '"'


def sql_literal(value: Any) -> str:
    if value is None:
        return "NULL"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, float)):
        return repr(value)
    return "'" + str(value).replace("'", "''") + "'"


class _Renderer:
    def __init__(self, catalog: SchemaCatalog, states: Dict[str, FrameState], from_clause: str, final: FrameState):
        self.catalog = catalog
        self.states = states
        self.from_clause = from_clause
        self.final = final

    def column(self, ref: ColumnRef) -> str:
        resolved = self.catalog.resolve(ref.table, ref.column)
        if resolved is None:
            raise CompileError(f"column {ref} does not exist")
        return f"{quote_identifier(resolved.table)}.{quote_identifier(resolved.column)}"

    def expr(self, e: Any, inline_ok: bool = True) -> str:
        if isinstance(e, ColumnRef):
            return self.column(e)
        if isinstance(e, Constant):
            return sql_literal(e.value)
        if isinstance(e, AggExpr):
            return self.aggregate(e, inline_ok)
        if isinstance(e, Arith):
            prec = _PRECEDENCE[e.op]
            left = self.expr(e.left, inline_ok)
            right = self.expr(e.right, inline_ok)
            if isinstance(e.left, Arith) and _PRECEDENCE[e.left.op] < prec:
                left = f"({left})"
            if isinstance(e.right, Arith) and _PRECEDENCE[e.right.op] <= prec:
                right = f"({right})"
            return f"{left} {e.op} {right}"
        if isinstance(e, Cast):
            return f"CAST({self.expr(e.expr, inline_ok)} AS {e.target.upper()})"
        if isinstance(e, CaseWhen):
            cond = self.condition(e.condition.element, e.condition.predicate, inline_ok)
            return f"CASE WHEN {cond} THEN {self.expr(e.then, inline_ok)} ELSE {self.expr(e.otherwise, inline_ok)} END"
        raise CompileError(f"cannot render {e!r}")

    def aggregate(self, agg: AggExpr, inline_ok: bool) -> str:
        if agg.arg is None:
            call = f"{agg.func.upper()}(*)"
        else:
            prefix = "DISTINCT " if agg.distinct else ""
            call = f"{agg.func.upper()}({prefix}{self.expr(agg.arg, inline_ok=False)})"
        if agg.frame is None:
            if not inline_ok:
                raise CompileError("aggregate used where rows are still being filtered")
            return call
        frame = self.states.get(agg.frame)
        if frame is None:
            raise CompileError(f"aggregate over undefined frame '{agg.frame}'")
        same_rows = frame.wheres == self.final.wheres and frame.group == self.final.group
        if inline_ok and same_rows:
            return call
        if frame.shaped:
            raise CompileError(f"cannot aggregate over frame '{agg.frame}': it is grouped, ordered or limited")
        where = self.where_clause(frame)
        return f"(SELECT {call} FROM {self.from_clause}{where})"

    def condition(self, element: Any, pred: Predicate, inline_ok: bool) -> str:
        left = self.expr(element, inline_ok)
        op = pred.op
        if op in ("is null", "is not null"):
            return f"{left} {op.upper()}"
        if op in ("in", "not in"):
            items = ", ".join(self.expr(v, inline_ok) for v in pred.value)
            return f"{left} {op.upper()} ({items})"
        if op == "between":
            low, high = pred.value
            return f"{left} BETWEEN {self.expr(low, inline_ok)} AND {self.expr(high, inline_ok)}"
        if op in ("like", "not like"):
            return f"{left} {op.upper()} {self.expr(pred.value, inline_ok)}"
        return f"{left} {op} {self.expr(pred.value, inline_ok)}"

    def where_clause(self, state: FrameState) -> str:
        if not state.wheres:
            return ""
        return " WHERE " + " AND ".join(self.condition(e, p, inline_ok=False) for e, p in state.wheres)

    def query(self) -> str:
        st = self.final
        if st.select is not None:
            items = ", ".join(self.expr(i) for i in st.select.items)
            head = "SELECT DISTINCT " if st.select.distinct else "SELECT "
        else:
            items, head = "*", "SELECT "
        parts = [f"{head}{items} FROM {self.from_clause}"]
        where = self.where_clause(st)
        if where:
            parts.append(where.strip())
        if st.group:
            parts.append("GROUP BY " + ", ".join(self.column(k) for k in st.group))
        if st.having:
            parts.append("HAVING " + " AND ".join(self.condition(e, p, inline_ok=True) for e, p in st.having))
        if st.order:
            keys = [self.expr(o.by) + (" DESC" if o.direction == "desc" else "") for o in st.order]
            parts.append("ORDER BY " + ", ".join(keys))
        if st.limit is not None:
            parts.append(f"LIMIT {st.limit}")
        return " ".join(parts)


def render_from(path: JoinPath) -> str:
    sql = quote_identifier(path.anchor)
    for step in path.steps:
        near, far = step.condition()
        sql += (
            f" INNER JOIN {quote_identifier(step.table)} ON "
            f"{quote_identifier(near.table)}.{quote_identifier(near.column)} = "
            f"{quote_identifier(far.table)}.{quote_identifier(far.column)}"
        )
    return sql


def plan_tables(plan: SymbolicPlan, catalog: SchemaCatalog) -> List[str]:
    """Catalog table names referenced anywhere in the plan, first occurrence order."""
    tables: List[str] = []
    for name in plan.tables():
        tdef = catalog.table(name)
        if tdef is None:
            raise CompileError(f"table {name} does not exist")
        if tdef.name not in tables:
            tables.append(tdef.name)
    return tables


def compile_plan(plan: SymbolicPlan, catalog: SchemaCatalog, graph: JoinGraph) -> CompiledQuery:
    states = _build_states(plan)
    final = _final_state(plan, states)
    tables = plan_tables(plan, catalog)
    if not tables:
        raise CompileError("plan references no table")
    try:
        path = infer_join_path(tables, graph)
    except (JoinInferenceError, PreconditionError) as e:
        raise CompileError(f"cannot join plan tables: {e}") from e

    sql = _Renderer(catalog, states, render_from(path), final).query()
    try:
        parse_sql(sql)
    except (SqlParseError, UnsupportedError) as e:
        raise CompileError(f"compiled SQL does not reparse: {e}") from e
    return CompiledQuery(
        sql=sql,
        tables=tuple(path.tables()),
        join_path=path,
        warnings=tuple(plan.warnings),
    )
