"""Task-aligned logical synthesis: ask for a symbolic plan, then compile it ourselves."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .compiler import CompiledQuery, ValidationIssue, compile_plan, has_errors, validate_plan
from .dataset import TaskExample
from .errors import CompileError, PreconditionError, SymbolicParseError, SynthesisError
from .llm import PromptBundle, assemble_prompt, template_for
from .schema_catalog import ColumnRef, JoinGraph, SchemaCatalog, compose_full_description, fk_join_graph, render_schema_dictionary
from .sql_extract import LinkedSchema
from .symbolic import SymbolicPlan, is_plan_line, parse_symbolic, render_symbolic
from .tasl import extract_sql_from_response
from .utils import PROMPTS, load_json

SHOTS = 6
DEMOS_FILE = PROMPTS / "talog_demos.json"
RETRY_REMINDER = (
    "Reply with symbolic lines only: one `name = frame.call(...)` assignment per line, "
    "ending with the line that assigns `res`. No SQL, no explanations."
)
_SQL_HINT = re.compile(r"\bSELECT\b", re.IGNORECASE)


@dataclass(frozen=True)
class Demonstration:
    question: str
    evidence: str
    schema_snippet: str
    symbolic_plan: str


@dataclass(frozen=True)
class SynthesisResult:
    plan: SymbolicPlan
    compiled: CompiledQuery
    raw_response: str
    response_sql: Optional[str] = None
    attempts: int = 1
    issues: Tuple[ValidationIssue, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "symbolic_plan": render_symbolic(self.plan),
            "final_sql": self.compiled.sql,
            "response_sql": self.response_sql,
            "attempts": self.attempts,
            "join_tables": list(self.compiled.tables),
            "issues": [str(i) for i in self.issues],
            "warnings": list(self.compiled.warnings),
        }


def load_demonstrations(path=DEMOS_FILE, shots: int = SHOTS) -> List[Demonstration]:
    data = load_json(path)
    demos = [
        Demonstration(
            question=d["question"],
            evidence=d.get("evidence", ""),
            schema_snippet=d["schema_snippet"],
            symbolic_plan=d["symbolic_plan"],
        )
        for d in data
    ]
    if len(demos) != shots:
        raise PreconditionError(f"{path} holds {len(demos)} demonstrations, expected {shots}")
    return demos


def linked_schema_entries(linked: LinkedSchema, catalog: SchemaCatalog) -> List[Tuple[str, str]]:
    """Linked columns plus the FK columns joining linked tables, in catalog order."""
    wanted = linked.column_keys()
    tables = linked.table_keys()
    for fk in catalog.foreign_keys:
        if fk.source.table_key in tables and fk.target.table_key in tables:
            wanted.update({fk.source.key, fk.target.key})
    entries: List[Tuple[str, str]] = []
    for t in catalog.tables:
        for c in t.columns:
            ref = ColumnRef(t.name, c.name)
            if ref.key in wanted:
                entries.append((str(ref), c.succinct_description or compose_full_description(c)))
    return entries


def _input_block(template_body: str, schema: str, question: str, evidence: str) -> str:
    evidence_block = f"\n### External knowledge\n{evidence.strip()}\n" if evidence and evidence.strip() else ""
    return template_body.format_map({"schema": schema, "question": question.strip(), "evidence": evidence_block})


def build_synthesis_prompt(
    question: str,
    evidence: Optional[str],
    linked: LinkedSchema,
    catalog: SchemaCatalog,
    demos: Optional[Sequence[Demonstration]] = None,
) -> PromptBundle:
    if not linked.columns:
        raise PreconditionError("linked schema is empty")
    demos = list(demos) if demos is not None else load_demonstrations()
    template = template_for("logical_synthesis")
    with_knowledge = evidence is not None
    shots = tuple(
        (
            _input_block(template.body, d.schema_snippet, d.question, d.evidence if with_knowledge else ""),
            d.symbolic_plan,
        )
        for d in demos
    )
    schema = render_schema_dictionary(linked_schema_entries(linked, catalog))
    return PromptBundle(
        instruction=template.instruction,
        demonstrations=shots,
        input=_input_block(template.body, schema, question, evidence or ""),
    )


def _response_sql(raw: str) -> Optional[str]:
    """SQL the model wrote next to its plan, kept for diagnostics only."""
    rest = "\n".join(line for line in (raw or "").splitlines() if not is_plan_line(line))
    if not _SQL_HINT.search(rest):
        return None
    sql = extract_sql_from_response(rest)
    return sql if _SQL_HINT.match(sql) or sql.upper().startswith("WITH") else None


def synthesize(
    example: TaskExample,
    linked: LinkedSchema,
    catalog: SchemaCatalog,
    gateway,
    graph: Optional[JoinGraph] = None,
    with_knowledge: bool = True,
    demos: Optional[Sequence[Demonstration]] = None,
) -> SynthesisResult:
    """Prompt -> plan -> validate -> compile. One retry when the reply has no parsable plan."""
    graph = graph or fk_join_graph(catalog)
    evidence = example.evidence if with_knowledge else None
    prompt = assemble_prompt(build_synthesis_prompt(example.question, evidence, linked, catalog, demos))

    responses: List[str] = []
    plan: Optional[SymbolicPlan] = None
    last_error: Optional[SymbolicParseError] = None
    for attempt in range(2):
        text = prompt if attempt == 0 else f"{prompt}\n\n{RETRY_REMINDER}"
        raw = gateway.complete(text)
        responses.append(raw)
        try:
            plan = parse_symbolic(raw)
            break
        except SymbolicParseError as e:
            last_error = e
    if plan is None:
        raise SynthesisError(
            f"no usable symbolic plan after {len(responses)} attempts: {last_error}",
            {"responses": responses, "error": str(last_error)},
        )

    raw = responses[-1]
    artifacts: Dict[str, Any] = {
        "responses": responses,
        "symbolic_plan": render_symbolic(plan),
        "response_sql": _response_sql(raw),
    }
    issues = validate_plan(plan, linked, catalog)
    artifacts["issues"] = [str(i) for i in issues]
    if has_errors(issues):
        raise SynthesisError("symbolic plan failed validation", artifacts)
    try:
        compiled = compile_plan(plan, catalog, graph)
    except CompileError as e:
        artifacts["error"] = str(e)
        raise SynthesisError(f"symbolic plan did not compile: {e}", artifacts) from e

    return SynthesisResult(
        plan=plan,
        compiled=compiled,
        raw_response=raw,
        response_sql=artifacts["response_sql"],
        attempts=len(responses),
        issues=tuple(issues),
    )
