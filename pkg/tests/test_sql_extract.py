import pathlib
import random
import re
import tempfile
import unittest

from tasql.errors import GoldSchemaError, SqlParseError, UnsupportedError
from tasql.schema_catalog import ColumnRef, introspect_database
from tasql.sql_extract import (
    LinkedSchema,
    equality_literals,
    extract_schema_entities,
    ground_truth_schema,
    has_clause,
    parse_sql,
    projection_keys,
)
from tests.fixtures import CASE1, CASE2, HALLUCINATION_CASES, SCHEMAS, build_database


def refs(*keys):
    return frozenset(ColumnRef.parse(k) for k in keys)


class ExtractionTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        root = pathlib.Path(cls.tmp.name)
        cls.catalogs = {db_id: introspect_database(build_database(root, db_id), db_id=db_id) for db_id in SCHEMAS}

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def extract(self, sql, db_id="california_schools"):
        return extract_schema_entities(parse_sql(sql), self.catalogs[db_id])

    def test_case_one_gold_schema(self):
        linked = ground_truth_schema(CASE1["SQL"], self.catalogs["california_schools"])
        self.assertEqual(
            linked.columns,
            refs("schools.District", "schools.CDSCode", "schools.StatusType", "satscores.cds", "satscores.AvgScrRead"),
        )
        self.assertEqual(linked.table_keys(), {"schools", "satscores"})
        self.assertEqual(linked.condition_values, {(ColumnRef("schools", "StatusType"), "Active")})

    def test_case_two_gold_schema_sees_values_inside_functions(self):
        linked = ground_truth_schema(CASE2["SQL"], self.catalogs["debit_card_specializing"])
        self.assertEqual(
            linked.column_keys(),
            {"customers.currency", "customers.customerid", "transactions_1k.customerid", "transactions_1k.date"},
        )
        self.assertIn((ColumnRef("transactions_1k", "Date"), "2012-08-25"), linked.condition_values)
        self.assertIn((ColumnRef("customers", "Currency"), "EUR"), linked.condition_values)

    def test_unqualified_ambiguous_column_resolves_to_every_owner(self):
        linked = self.extract(
            "SELECT COUNT(CustomerID) FROM transactions_1k JOIN customers "
            "ON transactions_1k.CustomerID = customers.CustomerID",
            "debit_card_specializing",
        )
        self.assertEqual(linked.column_keys(), {"customers.customerid", "transactions_1k.customerid"})

    def test_unknown_entities_are_unresolved(self):
        linked = self.extract("SELECT Principal FROM schools")
        self.assertEqual(linked.unresolved, ("schools.Principal",))
        with self.assertRaises(GoldSchemaError) as ctx:
            ground_truth_schema("SELECT T1.Principal FROM schools AS T1", self.catalogs["california_schools"])
        self.assertEqual(ctx.exception.unresolved, ["schools.Principal"])
        self.assertIn("colleges", self.extract("SELECT name FROM colleges").unresolved)

    def test_quoted_unknown_identifier_reads_as_literal(self):
        linked = self.extract('SELECT District FROM schools WHERE StatusType = "Active"')
        self.assertEqual(linked.unresolved, ())
        self.assertEqual(linked.column_keys(), {"schools.district", "schools.statustype"})

    def test_star_and_qualified_star(self):
        self.assertEqual(len(self.extract("SELECT * FROM frpm").columns), 4)
        linked = self.extract("SELECT T2.* FROM schools AS T1 JOIN satscores AS T2 ON T1.CDSCode = T2.cds")
        self.assertTrue({c.key for c in self.catalogs["california_schools"].table_columns("satscores")} <= linked.column_keys())
        self.assertNotIn("schools.district", linked.column_keys())

    def test_cte_and_subquery_columns_resolve_to_base_tables(self):
        linked = self.extract(
            "WITH active AS (SELECT CDSCode, District FROM schools WHERE StatusType = 'Active') "
            "SELECT District FROM active WHERE CDSCode IN (SELECT cds FROM satscores WHERE AvgScrRead > 500)"
        )
        self.assertEqual(linked.unresolved, ())
        self.assertEqual(
            linked.column_keys(),
            {"schools.cdscode", "schools.district", "schools.statustype", "satscores.cds", "satscores.avgscrread"},
        )

    def test_output_alias_is_not_a_column(self):
        linked = self.extract("SELECT AvgScrRead + AvgScrMath AS total FROM satscores ORDER BY total DESC")
        self.assertEqual(linked.unresolved, ())
        self.assertEqual(linked.column_keys(), {"satscores.avgscrread", "satscores.avgscrmath"})

    def test_in_list_and_negative_values(self):
        linked = self.extract("SELECT superhero_name FROM superhero WHERE race_id IN (1, 2) AND height_cm = -5", "superhero")
        self.assertEqual(
            linked.condition_values,
            {
                (ColumnRef("superhero", "race_id"), 1),
                (ColumnRef("superhero", "race_id"), 2),
                (ColumnRef("superhero", "height_cm"), -5),
            },
        )

    def test_linked_schema_json_round_trip(self):
        linked = ground_truth_schema(CASE1["SQL"], self.catalogs["california_schools"])
        self.assertEqual(LinkedSchema.from_dict(linked.to_dict()), linked)

    def test_alias_renaming_does_not_change_entities(self):
        cases = [(CASE1["db_id"], CASE1["SQL"]), (CASE2["db_id"], CASE2["SQL"])]
        cases += [(db_id, gold) for _, db_id, gold, _ in HALLUCINATION_CASES]
        rng = random.Random(11)
        for i in range(200):
            db_id, sql = cases[i % len(cases)]
            expected = self.extract(sql, db_id)
            aliases = sorted(set(re.findall(r"\bT\d\b", sql)))
            names = {a: "q" + "".join(rng.choice("abcdefghijkmnpqrstuvwxyz_") for _ in range(rng.randint(1, 6))) for a in aliases}
            if len(set(names.values())) < len(names):
                continue
            mutated = re.sub(r"\bT\d\b", lambda m: names[m.group(0)], sql)
            with self.subTest(i=i, sql=mutated):
                got = self.extract(mutated, db_id)
                self.assertEqual(got.columns, expected.columns)
                self.assertEqual(got.table_keys(), expected.table_keys())
                self.assertEqual(got.condition_values, expected.condition_values)


class ParseTests(unittest.TestCase):
    def test_parse_errors(self):
        with self.assertRaises(SqlParseError):
            parse_sql("")
        with self.assertRaises(SqlParseError):
            parse_sql("SELECT * FROM schools WHERE (StatusType = 'Active'")

    def test_non_select_statements_are_unsupported(self):
        for sql in ("DELETE FROM schools", "INSERT INTO schools (CDSCode) VALUES ('1')", "DROP TABLE schools"):
            with self.subTest(sql=sql):
                with self.assertRaises(UnsupportedError):
                    parse_sql(sql)

    def test_clause_detection(self):
        tree = parse_sql("SELECT District FROM schools GROUP BY District ORDER BY COUNT(*) DESC LIMIT 1")
        self.assertTrue(has_clause(tree, "group  by"))
        self.assertTrue(has_clause(tree, "LIMIT"))
        self.assertFalse(has_clause(tree, "HAVING"))
        with self.assertRaises(ValueError):
            has_clause(tree, "WINDOW")


class AuditHelperTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.catalog = introspect_database(build_database(pathlib.Path(self.tmp.name), "california_schools"))

    def test_projection_keys_canonicalize_aliases(self):
        a = projection_keys(parse_sql("SELECT T1.District, COUNT(T2.cds) FROM schools AS T1 JOIN satscores AS T2 ON T1.CDSCode = T2.cds"), self.catalog)
        b = projection_keys(parse_sql("SELECT s.district, COUNT(x.CDS) FROM schools AS s JOIN satscores AS x ON s.CDSCode = x.cds"), self.catalog)
        self.assertEqual(a, b)
        self.assertEqual(a[0], "schools.district")
        self.assertEqual(a[1], "count(satscores.cds)")
        c = projection_keys(parse_sql("SELECT COUNT(cds) FROM satscores"), self.catalog)
        self.assertEqual(c, ["count(satscores.cds)"])

    def test_equality_literals_in_query_order(self):
        tree = parse_sql("SELECT School FROM schools WHERE County = 'Alameda' AND StatusType = 'Active' AND 1 = 1")
        self.assertEqual(
            set(equality_literals(tree, self.catalog)),
            {(ColumnRef("schools", "County"), "Alameda"), (ColumnRef("schools", "StatusType"), "Active")},
        )


if __name__ == "__main__":
    unittest.main()
