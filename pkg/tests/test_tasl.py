import pathlib
import tempfile
import unittest

from tasql.dataset import TaskExample
from tasql.errors import PreconditionError
from tasql.llm import LLMGateway, ResponseStore
from tasql.schema_catalog import ColumnRef, build_schema_dictionary, introspect_database
from tasql.sql_extract import ground_truth_schema
from tasql.tasl import build_dummy_sql_prompt, extract_sql_from_response, key_columns, link_schema
from tests.fixtures import CASE1, CASE2, ScriptedBackend, build_database, case_backend


def example(rec):
    return TaskExample(
        example_id=str(rec["question_id"]),
        question=rec["question"],
        db_id=rec["db_id"],
        gold_sql=rec["SQL"],
        evidence=rec["evidence"],
        difficulty=rec["difficulty"],
    )


class ExtractSqlTests(unittest.TestCase):
    def test_fenced_block_wins(self):
        raw = "Here you go:\n```sql\nSELECT a FROM t WHERE b = 'x;y';\n```\nThis selects a."
        self.assertEqual(extract_sql_from_response(raw), "SELECT a FROM t WHERE b = 'x;y';")

    def test_prose_prefix_and_trailing_text(self):
        raw = "The query is SELECT COUNT(*) FROM t\n\nIt counts rows."
        self.assertEqual(extract_sql_from_response(raw), "SELECT COUNT(*) FROM t")

    def test_with_statement(self):
        raw = "WITH x AS (SELECT 1 AS n) SELECT n FROM x; SELECT 2"
        self.assertEqual(extract_sql_from_response(raw), "WITH x AS (SELECT 1 AS n) SELECT n FROM x;")

    def test_no_statement_returns_text(self):
        self.assertEqual(extract_sql_from_response("  no idea  "), "no idea")


class LinkSchemaTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        root = pathlib.Path(self.tmp.name)
        self.schools = introspect_database(build_database(root, "california_schools"))
        self.debit = introspect_database(build_database(root, "debit_card_specializing"))

    def gateway(self, backend):
        return LLMGateway(mode="record", store=ResponseStore(), backend=backend, model_id="m")

    def test_dummy_sql_entities_become_the_linked_schema(self):
        backend = case_backend()
        result = link_schema(example(CASE1), self.schools, self.gateway(backend), use_succinct=False)
        self.assertTrue(result.parse_ok)
        self.assertFalse(result.fallback)
        self.assertEqual(result.linked.columns, ground_truth_schema(CASE1["SQL"], self.schools).columns)
        self.assertTrue(result.extracted_sql.startswith("SELECT T1.District"))
        self.assertEqual(result.to_dict()["linked"]["tables"], ["satscores", "schools"])

    def test_prompt_contents_follow_knowledge_mode(self):
        backend = case_backend()
        gateway = self.gateway(backend)
        link_schema(example(CASE2), self.debit, gateway, use_succinct=False, with_knowledge=True)
        link_schema(example(CASE2), self.debit, gateway, use_succinct=False, with_knowledge=False)
        with_k, without_k = backend.calls
        self.assertIn("### External knowledge\n'2012/8/25' can be represented by '2012-08-25'", with_k)
        self.assertNotIn("External knowledge", without_k)
        self.assertIn('"transactions_1k.date": "type: DATE"', with_k)
        self.assertTrue(with_k.rstrip().endswith("### SQL"))

    def test_unparseable_dummy_sql_falls_back_to_full_schema(self):
        backend = ScriptedBackend({CASE1["question"]: "SELECT District FROM schools WHERE ("}, {})
        result = link_schema(example(CASE1), self.schools, self.gateway(backend), use_succinct=False)
        self.assertFalse(result.parse_ok)
        self.assertTrue(result.fallback)
        self.assertEqual(len(result.linked.columns), self.schools.n_columns)
        self.assertIsNotNone(result.parse_error)

    def test_unknown_entities_are_dropped(self):
        backend = ScriptedBackend({CASE1["question"]: "SELECT Principal, District FROM schools"}, {})
        result = link_schema(example(CASE1), self.schools, self.gateway(backend), use_succinct=False)
        self.assertEqual(result.linked.column_keys(), {"schools.district"})
        self.assertEqual(result.dropped, ("schools.Principal",))
        self.assertFalse(result.fallback)

    def test_table_only_dummy_sql_links_key_columns(self):
        backend = ScriptedBackend({CASE2["question"]: "SELECT COUNT(*) FROM yearmonth"}, {})
        result = link_schema(example(CASE2), self.debit, self.gateway(backend), use_succinct=False)
        self.assertFalse(result.fallback)
        self.assertEqual(result.linked.column_keys(), {"yearmonth.customerid", "yearmonth.date"})
        self.assertEqual(result.linked.table_keys(), {"yearmonth"})
        self.assertEqual(
            key_columns(self.debit, ["products", "nope"]),
            [ColumnRef("products", "ProductID")],
        )

    def test_nothing_resolvable_falls_back(self):
        backend = ScriptedBackend({CASE1["question"]: "SELECT headmaster FROM academies"}, {})
        result = link_schema(example(CASE1), self.schools, self.gateway(backend), use_succinct=False)
        self.assertTrue(result.parse_ok)
        self.assertTrue(result.fallback)
        self.assertEqual(len(result.linked.columns), self.schools.n_columns)

    def test_same_inputs_same_prompt(self):
        schema = build_schema_dictionary(self.schools, use_succinct=False)
        a = build_dummy_sql_prompt(CASE1["question"], None, schema)
        b = build_dummy_sql_prompt(CASE1["question"], "", schema)
        self.assertEqual(a, b)
        self.assertEqual(a.shots, 0)

    def test_catalog_must_match_example(self):
        with self.assertRaises(PreconditionError):
            link_schema(example(CASE1), self.debit, self.gateway(case_backend()), use_succinct=False)


if __name__ == "__main__":
    unittest.main()
