"""
Symbolic plan language: dataframe-style steps whose functions mirror SQL keywords.

    df1 = df.where(element = schools.StatusType, filter = 'Active')
    df2 = df1.orderby(by = satscores.AvgScrRead, desc).limit(1)
    res = df2.select(schools.District)

The function set is closed; any other call name is rejected at parse time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterator, List, NamedTuple, Optional, Tuple, Union

from .errors import SymbolicParseError, UnknownFunctionError
from .schema_catalog import ColumnRef

ROOT_FRAME = "df"
RESULT_FRAME = "res"
AGGREGATES = ("count", "sum", "avg", "min", "max")
CAST_TARGETS = ("real", "integer", "text")
CHAIN_CALLS = ("where", "orderby", "limit", "groupby", "select") + AGGREGATES
COMPARISONS = ("=", "!=", ">", ">=", "<", "<=")
PREDICATE_OPS = COMPARISONS + ("like", "not like", "in", "not in", "is null", "is not null", "between")


# ------------------------------
# Plan model
# ------------------------------

@dataclass(frozen=True)
class Constant:
    value: Any


@dataclass(frozen=True)
class AggExpr:
    func: str
    arg: Optional["Expr"] = None
    frame: Optional[str] = None
    distinct: bool = False
    table: Optional[str] = None  # count(t.*): counts rows and pins t into the join


@dataclass(frozen=True)
class Arith:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Cast:
    expr: "Expr"
    target: str = "real"


@dataclass(frozen=True)
class Predicate:
    op: str
    value: Any = None  # Expr, tuple of Expr for in/between, None for null tests


@dataclass(frozen=True)
class Condition:
    element: "Expr"
    predicate: Predicate


@dataclass(frozen=True)
class CaseWhen:
    condition: Condition
    then: "Expr"
    otherwise: "Expr"


Expr = Union[ColumnRef, Constant, AggExpr, Arith, Cast, CaseWhen]


@dataclass(frozen=True)
class Where:
    element: Expr
    predicate: Predicate


@dataclass(frozen=True)
class OrderBy:
    by: Expr
    direction: str = "asc"


@dataclass(frozen=True)
class Limit:
    n: int


@dataclass(frozen=True)
class GroupBy:
    keys: Tuple[ColumnRef, ...]


@dataclass(frozen=True)
class Select:
    items: Tuple[Expr, ...]
    distinct: bool = False


StepOp = Union[Where, OrderBy, Limit, GroupBy, Select]


@dataclass(frozen=True)
class Step:
    binding: str
    source: str
    ops: Tuple[StepOp, ...]
    line_no: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SymbolicPlan:
    steps: Tuple[Step, ...]
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    def bindings(self) -> List[str]:
        return [s.binding for s in self.steps]

    def step(self, binding: str) -> Optional[Step]:
        for s in self.steps:
            if s.binding == binding:
                return s
        return None

    def columns(self) -> List[ColumnRef]:
        """Every column the plan mentions, first occurrence order."""
        seen: List[ColumnRef] = []
        for s in self.steps:
            for op in s.ops:
                for ref in op_columns(op):
                    if ref not in seen:
                        seen.append(ref)
        return seen

    def tables(self) -> List[str]:
        """Table names as written, from columns and count(t.*), first occurrence order."""
        seen: List[str] = []
        for s in self.steps:
            for op in s.ops:
                for e in op_exprs(op):
                    for n in iter_expr(e):
                        name = n.table if isinstance(n, (ColumnRef, AggExpr)) else None
                        if name and name not in seen:
                            seen.append(name)
        return seen


# ------------------------------
# Walkers
# ------------------------------

def iter_expr(expr: Any) -> Iterator[Any]:
    """Pre-order walk over an expression, predicates and conditions included."""
    if expr is None:
        return
    if isinstance(expr, tuple):
        for item in expr:
            yield from iter_expr(item)
        return
    yield expr
    if isinstance(expr, AggExpr):
        yield from iter_expr(expr.arg)
    elif isinstance(expr, Arith):
        yield from iter_expr(expr.left)
        yield from iter_expr(expr.right)
    elif isinstance(expr, Cast):
        yield from iter_expr(expr.expr)
    elif isinstance(expr, CaseWhen):
        yield from iter_expr(expr.condition.element)
        yield from iter_expr(expr.condition.predicate.value)
        yield from iter_expr(expr.then)
        yield from iter_expr(expr.otherwise)


def op_exprs(op: StepOp) -> List[Any]:
    if isinstance(op, Where):
        return [op.element, op.predicate.value]
    if isinstance(op, OrderBy):
        return [op.by]
    if isinstance(op, GroupBy):
        return list(op.keys)
    if isinstance(op, Select):
        return list(op.items)
    return []


def op_columns(op: StepOp) -> List[ColumnRef]:
    return [n for e in op_exprs(op) for n in iter_expr(e) if isinstance(n, ColumnRef)]


# ------------------------------
# Tokenizer
# ------------------------------

class Token(NamedTuple):
    kind: str  # number | string | ident | op | end
    text: str
    pos: int


_TOKEN = re.compile(
    r"""
     (?P<ws>\s+)
    |(?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)
    |(?P<string>'(?:[^']|'')*'|"(?:[^"]|"")*")
    |(?P<quoted>`(?:[^`]|``)*`)
    |(?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    |(?P<op>==|!=|<>|>=|<=|[=<>+\-*/(),.])
    """,
    re.VERBOSE,
)


def tokenize(text: str, line_no: Optional[int] = None) -> List[Token]:
    tokens: List[Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise SymbolicParseError(f"unexpected character {text[pos]!r} at column {pos + 1}", line_no)
        kind = m.lastgroup
        raw = m.group(kind)
        if kind == "string":
            q = raw[0]
            tokens.append(Token("string", raw[1:-1].replace(q + q, q), pos))
        elif kind == "quoted":
            tokens.append(Token("ident", raw[1:-1].replace("``", "`"), pos))
        elif kind == "op":
            tokens.append(Token("op", {"==": "=", "<>": "!="}.get(raw, raw), pos))
        elif kind != "ws":
            tokens.append(Token(kind, raw, pos))
        pos = m.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


def _strip_comment(line: str) -> str:
    quote: Optional[str] = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in ("'", '"', "`"):
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


# ------------------------------
# Parser
# ------------------------------

class _LineParser:
    def __init__(self, text: str, line_no: int):
        self.line_no = line_no
        self.tokens = tokenize(text, line_no)
        self.i = 0

    # token helpers
    def peek(self, offset: int = 0) -> Token:
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.peek()
        self.i += 1
        return tok

    def at_op(self, text: str, offset: int = 0) -> bool:
        tok = self.peek(offset)
        return tok.kind == "op" and tok.text == text

    def at_word(self, word: str, offset: int = 0) -> bool:
        tok = self.peek(offset)
        return tok.kind == "ident" and tok.text.lower() == word

    def expect_op(self, text: str) -> None:
        if not self.at_op(text):
            self.fail(f"expected '{text}'")
        self.advance()

    def expect_ident(self) -> str:
        tok = self.peek()
        if tok.kind != "ident":
            self.fail("expected a name")
        self.advance()
        return tok.text

    def fail(self, message: str):
        tok = self.peek()
        near = f" near '{tok.text}'" if tok.kind != "end" else " at end of line"
        raise SymbolicParseError(f"{message}{near}", self.line_no)

    # grammar
    def parse_step(self) -> Step:
        binding = self.expect_ident()
        self.expect_op("=")
        source = self.expect_ident()
        ops: List[StepOp] = []
        while self.at_op("."):
            self.advance()
            name = self.expect_ident()
            if name.lower() not in CHAIN_CALLS:
                raise UnknownFunctionError(name, self.line_no)
            self.expect_op("(")
            ops.append(self.parse_call(name.lower()))
            self.expect_op(")")
        if not ops:
            self.fail("expected at least one call")
        if self.peek().kind != "end":
            self.fail("unexpected text after the last call")
        return Step(binding=binding, source=source, ops=tuple(ops), line_no=self.line_no)

    def parse_call(self, name: str) -> StepOp:
        if name == "where":
            return self.parse_where()
        if name == "orderby":
            return self.parse_orderby()
        if name == "limit":
            return self.parse_limit()
        if name == "groupby":
            return self.parse_groupby()
        if name == "select":
            return self.parse_select()
        return Select(items=(self.parse_agg_args(name, frame=None),))

    def _keyword_arg(self, word: str) -> bool:
        if self.at_word(word) and self.at_op("=", 1):
            self.advance()
            self.advance()
            return True
        return False

    def parse_where(self) -> Where:
        element: Optional[Expr] = None
        predicate: Optional[Predicate] = None
        for _ in range(2):
            if self._keyword_arg("element"):
                element = self.parse_expr()
            elif self._keyword_arg("filter"):
                predicate = self.parse_filter()
            elif element is None:
                element = self.parse_expr()
            else:
                predicate = self.parse_filter()
            if not self.at_op(","):
                break
            self.advance()
        if element is None or predicate is None:
            self.fail("where() needs element and filter")
        return Where(element=element, predicate=predicate)

    def parse_filter(self) -> Predicate:
        tok = self.peek()
        if tok.kind == "op" and tok.text in COMPARISONS:
            self.advance()
            return Predicate(tok.text, self.parse_expr())
        if self.at_word("like"):
            self.advance()
            return Predicate("like", self.parse_expr())
        if self.at_word("not") and self.at_word("like", 1):
            self.advance()
            self.advance()
            return Predicate("not like", self.parse_expr())
        if self.at_word("in"):
            self.advance()
            return Predicate("in", self.parse_list())
        if self.at_word("not") and self.at_word("in", 1):
            self.advance()
            self.advance()
            return Predicate("not in", self.parse_list())
        if self.at_word("is"):
            self.advance()
            negated = False
            if self.at_word("not"):
                self.advance()
                negated = True
            if not self.at_word("null"):
                self.fail("expected null")
            self.advance()
            return Predicate("is not null" if negated else "is null")
        if self.at_word("between"):
            self.advance()
            low = self.parse_expr()
            if not self.at_word("and"):
                self.fail("expected 'and'")
            self.advance()
            return Predicate("between", (low, self.parse_expr()))
        return Predicate("=", self.parse_expr())

    def parse_list(self) -> Tuple[Expr, ...]:
        self.expect_op("(")
        items = [self.parse_expr()]
        while self.at_op(","):
            self.advance()
            items.append(self.parse_expr())
        self.expect_op(")")
        return tuple(items)

    def parse_orderby(self) -> OrderBy:
        self._keyword_arg("by")
        by = self.parse_expr()
        direction = "asc"
        if self.at_op(","):
            self.advance()
            if self.at_word("desc") or self.at_word("asc"):
                direction = self.advance().text.lower()
            elif self._keyword_arg("ascending"):
                word = self.expect_ident().lower()
                direction = "asc" if word == "true" else "desc"
            else:
                self.fail("expected asc or desc")
        return OrderBy(by=by, direction=direction)

    def parse_limit(self) -> Limit:
        self._keyword_arg("n")
        tok = self.peek()
        if tok.kind != "number" or not tok.text.isdigit() or int(tok.text) <= 0:
            self.fail("limit() needs a positive integer")
        self.advance()
        return Limit(int(tok.text))

    def parse_groupby(self) -> GroupBy:
        self._keyword_arg("by")
        keys = [self.parse_column()]
        while self.at_op(","):
            self.advance()
            keys.append(self.parse_column())
        return GroupBy(tuple(keys))

    def parse_select(self) -> Select:
        distinct = False
        if self.at_word("distinct") and not self.at_op(".", 1):
            self.advance()
            distinct = True
        if self.at_op(")"):
            self.fail("select() needs at least one item")
        items = [self.parse_expr()]
        while self.at_op(","):
            self.advance()
            items.append(self.parse_expr())
        return Select(tuple(items), distinct)

    def parse_column(self) -> ColumnRef:
        table = self.expect_ident()
        if not self.at_op("."):
            self.fail(f"expected table.column, got '{table}'")
        self.advance()
        return ColumnRef(table, self.expect_ident())

    # expressions
    def parse_expr(self) -> Expr:
        left = self.parse_term()
        while self.at_op("+") or self.at_op("-"):
            op = self.advance().text
            left = Arith(op, left, self.parse_term())
        return left

    def parse_term(self) -> Expr:
        left = self.parse_factor()
        while self.at_op("*") or self.at_op("/"):
            op = self.advance().text
            left = Arith(op, left, self.parse_factor())
        return left

    def parse_factor(self) -> Expr:
        tok = self.peek()
        if tok.kind == "number":
            self.advance()
            return Constant(_number(tok.text))
        if tok.kind == "string":
            self.advance()
            return Constant(tok.text)
        if self.at_op("-"):
            self.advance()
            inner = self.parse_factor()
            if isinstance(inner, Constant) and isinstance(inner.value, (int, float)):
                return Constant(-inner.value)
            return Arith("*", Constant(-1), inner)
        if self.at_op("("):
            self.advance()
            inner = self.parse_expr()
            self.expect_op(")")
            return inner
        if tok.kind == "ident":
            return self.parse_atom()
        self.fail("expected an expression")

    def parse_atom(self) -> Expr:
        name = self.advance().text
        low = name.lower()
        if self.at_op("("):
            self.advance()
            if low == "cast":
                inner = self.parse_expr()
                self.expect_op(",")
                target = self.expect_ident().lower()
                if target not in CAST_TARGETS:
                    self.fail(f"cannot cast to '{target}'")
                self.expect_op(")")
                return Cast(inner, target)
            if low == "case_when":
                element = self.parse_expr()
                predicate = self.parse_filter()
                self.expect_op(",")
                then = self.parse_expr()
                self.expect_op(",")
                otherwise = self.parse_expr()
                self.expect_op(")")
                return CaseWhen(Condition(element, predicate), then, otherwise)
            if low in AGGREGATES:
                agg = self.parse_agg_args(low, frame=None)
                self.expect_op(")")
                return agg
            raise UnknownFunctionError(name, self.line_no)
        if low == "null":
            return Constant(None)
        if self.at_op("."):
            self.advance()
            member = self.expect_ident()
            if self.at_op("("):
                if member.lower() not in AGGREGATES:
                    raise UnknownFunctionError(member, self.line_no)
                self.advance()
                agg = self.parse_agg_args(member.lower(), frame=name)
                self.expect_op(")")
                return agg
            return ColumnRef(name, member)
        self.fail(f"bare name '{name}' is not a table.column reference")

    def parse_agg_args(self, func: str, frame: Optional[str]) -> AggExpr:
        """Arguments of an aggregate; the caller consumes the closing parenthesis."""
        if self.at_op(")"):
            if func != "count":
                self.fail(f"{func}() needs an argument")
            return AggExpr(func, None, frame)
        if self.at_op("*"):
            self.advance()
            if func != "count":
                self.fail(f"{func}(*) is not allowed")
            return AggExpr(func, None, frame)
        if self.peek().kind == "ident" and self.at_op(".", 1) and self.at_op("*", 2):
            table = self.advance().text
            self.i += 2
            if func != "count":
                self.fail(f"{func}({table}.*) is not allowed")
            return AggExpr(func, None, frame, table=table)
        distinct = False
        if self.at_word("distinct") and not self.at_op(".", 1):
            self.advance()
            distinct = True
        return AggExpr(func, self.parse_expr(), frame, distinct)


def _number(text: str) -> Union[int, float]:
    if re.fullmatch(r"\d+", text):
        return int(text)
    return float(text)


_ASSIGNMENT = re.compile(r"^\s*[A-Za-z_]\w*\s*=\s*[A-Za-z_]\w*\s*\.")
_SKIP = ("#", "```", "--")


def is_plan_line(line: str) -> bool:
    return bool(_ASSIGNMENT.match(line))


def parse_symbolic(text: str) -> SymbolicPlan:
    """Parse plan text; prose around and between the steps is skipped with a warning per line."""
    steps: List[Step] = []
    warnings: List[str] = []
    for line_no, raw in enumerate((text or "").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(_SKIP):
            continue
        line = line.rstrip(";").strip()
        if not is_plan_line(line):
            warnings.append(f"skipped line {line_no}: not a plan step")
            continue
        steps.append(_LineParser(_strip_comment(line), line_no).parse_step())
    if not steps:
        raise SymbolicParseError("no symbolic plan lines found")
    return SymbolicPlan(steps=tuple(steps), warnings=tuple(warnings))


# ------------------------------
# Rendering
# ------------------------------

_SIMPLE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def render_name(name: str) -> str:
    return name if _SIMPLE.match(name) else "`" + name.replace("`", "``") + "`"


def render_constant(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, float)):
        return repr(value)
    return "'" + str(value).replace("'", "''") + "'"


def render_expr(expr: Any) -> str:
    if isinstance(expr, ColumnRef):
        return f"{render_name(expr.table)}.{render_name(expr.column)}"
    if isinstance(expr, Constant):
        return render_constant(expr.value)
    if isinstance(expr, AggExpr):
        if expr.arg is None:
            inner = f"{render_name(expr.table)}.*" if expr.table else ""
        else:
            inner = ("distinct " if expr.distinct else "") + render_expr(expr.arg)
        call = f"{expr.func}({inner})"
        return f"{expr.frame}.{call}" if expr.frame else call
    if isinstance(expr, Arith):
        prec = _PRECEDENCE[expr.op]
        left = render_expr(expr.left)
        right = render_expr(expr.right)
        if isinstance(expr.left, Arith) and _PRECEDENCE[expr.left.op] < prec:
            left = f"({left})"
        if isinstance(expr.right, Arith) and _PRECEDENCE[expr.right.op] <= prec:
            right = f"({right})"
        return f"{left} {expr.op} {right}"
    if isinstance(expr, Cast):
        return f"cast({render_expr(expr.expr)}, {expr.target})"
    if isinstance(expr, CaseWhen):
        cond = f"{render_expr(expr.condition.element)} {render_predicate(expr.condition.predicate)}"
        return f"case_when({cond}, {render_expr(expr.then)}, {render_expr(expr.otherwise)})"
    raise TypeError(f"not a plan expression: {expr!r}")


def render_predicate(pred: Predicate) -> str:
    if pred.op in ("is null", "is not null"):
        return pred.op
    if pred.op in ("in", "not in"):
        return f"{pred.op} (" + ", ".join(render_expr(v) for v in pred.value) + ")"
    if pred.op == "between":
        low, high = pred.value
        return f"between {render_expr(low)} and {render_expr(high)}"
    return f"{pred.op} {render_expr(pred.value)}"


def render_op(op: StepOp) -> str:
    if isinstance(op, Where):
        pred = render_expr(op.predicate.value) if op.predicate.op == "=" else render_predicate(op.predicate)
        return f"where(element = {render_expr(op.element)}, filter = {pred})"
    if isinstance(op, OrderBy):
        suffix = ", desc" if op.direction == "desc" else ""
        return f"orderby(by = {render_expr(op.by)}{suffix})"
    if isinstance(op, Limit):
        return f"limit({op.n})"
    if isinstance(op, GroupBy):
        return "groupby(" + ", ".join(render_expr(k) for k in op.keys) + ")"
    if isinstance(op, Select):
        prefix = "distinct " if op.distinct else ""
        return "select(" + prefix + ", ".join(render_expr(i) for i in op.items) + ")"
    raise TypeError(f"not a plan step: {op!r}")


def render_symbolic(plan: SymbolicPlan) -> str:
    lines = []
    for step in plan.steps:
        calls = ".".join(render_op(op) for op in step.ops)
        lines.append(f"{step.binding} = {step.source}.{calls}")
    return "\n".join(lines) + "\n"
