"""Task-aligned schema linking: write a throwaway SQL query, keep only the entities it uses."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .dataset import TaskExample
from .errors import PreconditionError, SqlParseError, UnsupportedError
from .llm import PromptBundle, assemble_prompt, template_for
from .schema_catalog import ColumnRef, SchemaCatalog, SchemaDictionary, build_schema_dictionary
from .sql_extract import LinkedSchema, extract_schema_entities, parse_sql

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.DOTALL)
_STATEMENT_START = re.compile(
    r"\bSELECT\b|\bWITH\s+(?:RECURSIVE\s+)?[\w\"`\[\]]+\s*(?:\([^)]*\)\s*)?AS\s*\(",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class DummySqlResult:
    raw_response: str
    extracted_sql: str
    linked: LinkedSchema
    parse_ok: bool
    fallback: bool = False
    parse_error: Optional[str] = None
    dropped: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dummy_sql": self.extracted_sql,
            "parse_ok": self.parse_ok,
            "fallback": self.fallback,
            "parse_error": self.parse_error,
            "linked": self.linked.to_dict(),
            "dropped": list(self.dropped),
        }


def build_dummy_sql_prompt(question: str, evidence: Optional[str], schema_dict: SchemaDictionary) -> PromptBundle:
    """Zero-shot bundle; pass evidence=None (or empty) when running without knowledge."""
    if len(schema_dict) == 0:
        raise PreconditionError("schema dictionary is empty; the database has no columns")
    template = template_for("schema_linking")
    evidence_block = f"\n### External knowledge\n{evidence.strip()}\n" if evidence and evidence.strip() else ""
    body = template.body.format_map(
        {"schema_dictionary": schema_dict.render(), "question": question.strip(), "evidence": evidence_block}
    )
    return PromptBundle(instruction=template.instruction, demonstrations=(), input=body)


def extract_sql_from_response(raw: str) -> str:
    """First SELECT/WITH statement in a response; the whole response when none is found."""
    text = raw or ""
    blocks = [body for _lang, body in _FENCE.findall(text)]
    for candidate in blocks + [text]:
        m = _STATEMENT_START.search(candidate)
        if not m:
            continue
        stmt = candidate[m.start():]
        end = _statement_end(stmt)
        return stmt[:end].strip()
    return text.strip()


def _statement_end(stmt: str) -> int:
    """Index just past the first top-level `;` outside quotes, or the end of a fenced/plain block."""
    quote: Optional[str] = None
    i = 0
    while i < len(stmt):
        ch = stmt[i]
        if quote:
            if ch == quote:
                if i + 1 < len(stmt) and stmt[i + 1] == quote:
                    i += 2
                    continue
                quote = None
        elif ch in ("'", '"', "`"):
            quote = ch
        elif ch == ";":
            return i + 1
        elif stmt.startswith("```", i) or stmt.startswith("\n\n", i):
            return i
        i += 1
    return len(stmt)


def key_columns(catalog: SchemaCatalog, tables: Iterable[str]) -> List[ColumnRef]:
    """Primary-key columns of each table, or its first column when it has no key."""
    refs: List[ColumnRef] = []
    for name in tables:
        tdef = catalog.table(name)
        if tdef is None or not tdef.columns:
            continue
        keys = tdef.primary_key or (tdef.columns[0].name,)
        refs.extend(ColumnRef(tdef.name, k) for k in keys)
    return refs


def link_schema(
    example: TaskExample,
    catalog: SchemaCatalog,
    gateway,
    use_succinct: bool = True,
    with_knowledge: bool = True,
) -> DummySqlResult:
    if catalog.db_id != example.db_id:
        raise PreconditionError(f"catalog {catalog.db_id} does not match example database {example.db_id}")
    schema_dict = build_schema_dictionary(catalog, use_succinct=use_succinct)
    evidence = example.evidence if with_knowledge else None
    prompt = assemble_prompt(build_dummy_sql_prompt(example.question, evidence, schema_dict))
    raw = gateway.complete(prompt)
    sql = extract_sql_from_response(raw)
    try:
        tree = parse_sql(sql)
    except (SqlParseError, UnsupportedError) as e:
        return DummySqlResult(
            raw_response=raw,
            extracted_sql=sql,
            linked=LinkedSchema.full_catalog(catalog),
            parse_ok=False,
            fallback=True,
            parse_error=str(e),
        )
    found = extract_schema_entities(tree, catalog)
    columns = found.columns or frozenset(key_columns(catalog, found.tables))
    linked = LinkedSchema(columns=columns, tables=found.tables, condition_values=found.condition_values)
    if not linked.columns:
        return DummySqlResult(
            raw_response=raw,
            extracted_sql=sql,
            linked=LinkedSchema.full_catalog(catalog),
            parse_ok=True,
            fallback=True,
            dropped=found.unresolved,
        )
    return DummySqlResult(
        raw_response=raw,
        extracted_sql=sql,
        linked=linked,
        parse_ok=True,
        dropped=found.unresolved,
    )
