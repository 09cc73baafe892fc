import json
import pathlib
import sqlite3
import tempfile
import unittest

from tasql.audit import CATEGORIES
from tasql.config import RunConfig
from tasql.dataset import load_corpus
from tasql.errors import DatabaseIOError, PreconditionError, ReplayMissError
from tasql.llm import LLMGateway, ResponseStore
from tasql.metrics import execute_sql
from tasql.pipeline import (
    CatalogStore,
    Prediction,
    audit_predictions,
    database_path,
    evaluate_predictions,
    gold_predictions,
    link_example,
    load_predictions,
    run_linking,
    run_ordered,
    run_pipeline,
)
from tasql.utils import write_jsonl
from tests.fixtures import CASE1, CASE1_EXPECTED_SQL, CASE2, SUCCINCT_REPLY, build_database, case_backend, write_corpus


def quiet(*_):
    pass


class Workspace(unittest.TestCase):
    """Two databases, a two-question corpus and a config pointing at them."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = pathlib.Path(self.tmp.name)
        self.dbs = self.root / "databases"
        for db_id in (CASE1["db_id"], CASE2["db_id"]):
            build_database(self.dbs, db_id)
        self.dataset = write_corpus(self.root / "dev.json", [CASE1, CASE2])
        self.cache = self.root / "cache" / "responses.jsonl"
        self.config = RunConfig(
            dataset_path=str(self.dataset),
            databases_root=str(self.dbs),
            gateway_mode="record",
            cache_path=str(self.cache),
            output_dir=str(self.root / "out"),
            concurrency=1,
            backend_url="http://localhost:9",
            use_succinct=False,
        )
        self.corpus = load_corpus(self.dataset)

    def gateway(self, mode="record", backend=None):
        if mode == "record" and backend is None:
            backend = case_backend()
        return LLMGateway(
            mode=mode,
            store=ResponseStore(self.cache),
            backend=backend,
            model_id=self.config.model_id,
            decoding=self.config.decoding,
        )

    def store(self, gateway=None, use_succinct=False, cache_dir=None):
        return CatalogStore(self.dbs, cache_dir=cache_dir, gateway=gateway, use_succinct=use_succinct, workers=1)

    def record(self):
        gateway = self.gateway()
        return run_pipeline(self.corpus, self.store(gateway), gateway, self.config, progress_callback=quiet)


class PipelineTests(Workspace):
    def test_both_worked_cases_end_to_end(self):
        first, second = self.record()
        self.assertIsNone(first.error)
        self.assertEqual(first.final_sql, CASE1_EXPECTED_SQL)
        self.assertFalse(first.fallback)
        self.assertTrue(first.diagnostics["linking"]["parse_ok"])
        self.assertEqual(first.to_dict()["linked"]["columns"][0], "satscores.AvgScrRead")
        db_file = database_path(self.dbs, CASE2["db_id"])
        self.assertEqual(execute_sql(db_file, second.final_sql).rows, frozenset({(25,)}))

    def test_replay_reproduces_the_recording(self):
        recorded = [r.to_dict() for r in self.record()]
        for _ in range(2):
            gateway = self.gateway("replay")
            replayed = run_pipeline(self.corpus, self.store(gateway), gateway, self.config, progress_callback=quiet)
            self.assertEqual([r.to_dict() for r in replayed], recorded)
            self.assertEqual(gateway.stats()["backend_calls"], 0)

    def test_replay_miss_stops_the_run(self):
        self.record()
        extra = dict(CASE1, question_id=7, question="Which county has the most schools?")
        corpus = load_corpus(write_corpus(self.root / "more.json", [CASE1, extra]))
        gateway = self.gateway("replay")
        with self.assertRaises(ReplayMissError):
            run_pipeline(corpus, self.store(gateway), gateway, self.config, progress_callback=quiet)

    def test_unanswerable_question_is_a_recorded_failure(self):
        extra = dict(CASE1, question_id=7, question="Which county has the most schools?")
        corpus = load_corpus(write_corpus(self.root / "more.json", [extra]))
        gateway = self.gateway()
        (record,) = run_pipeline(corpus, self.store(gateway), gateway, self.config, progress_callback=quiet)
        self.assertTrue(record.fallback)
        self.assertIsNone(record.final_sql)
        self.assertTrue(record.error.startswith("SynthesisError"))
        self.assertEqual(len(record.diagnostics["synthesis"]["responses"]), 2)

    def test_linking_records_carry_gold_and_scores(self):
        gateway = self.gateway()
        records = run_linking(self.corpus, self.store(gateway), gateway, self.config, progress_callback=quiet)
        out = records[0].to_dict()
        self.assertEqual(out["linking"], {"covers_gold": True, "precision": 1.0})
        self.assertIsNone(out["error"])

    def test_missing_database_is_a_per_example_error(self):
        gateway = self.gateway()
        example = dict(CASE1, db_id="formula_1")
        corpus = load_corpus(write_corpus(self.root / "f1.json", [example]))
        record = link_example(next(iter(corpus)), self.store(gateway), gateway, self.config)
        self.assertIn("DatabaseIOError", record.error)


class CatalogStoreTests(Workspace):
    def test_catalogs_are_cached_by_database_content(self):
        cache_dir = self.root / "catalogs"
        first = self.store(cache_dir=cache_dir).get(CASE1["db_id"])
        index = json.loads((cache_dir / "index.json").read_text(encoding="utf-8"))
        self.assertEqual(list(index), [CASE1["db_id"]])
        self.assertEqual(self.store(cache_dir=cache_dir).get(CASE1["db_id"]).to_dict(), first.to_dict())

        db_file = database_path(self.dbs, CASE1["db_id"])
        with sqlite3.connect(db_file) as conn:
            conn.execute("CREATE TABLE extra (id INTEGER PRIMARY KEY)")
        conn.close()
        rebuilt = self.store(cache_dir=cache_dir).get(CASE1["db_id"])
        self.assertEqual(rebuilt.n_tables, first.n_tables + 1)

    def test_succinct_catalogs_need_a_gateway(self):
        with self.assertRaises(PreconditionError):
            self.store(use_succinct=True).get(CASE1["db_id"])
        catalog = self.store(self.gateway(), use_succinct=True).get(CASE1["db_id"])
        self.assertEqual(catalog.tables[0].columns[0].succinct_description, SUCCINCT_REPLY)

    def test_missing_database(self):
        with self.assertRaises(DatabaseIOError):
            self.store().get("formula_1")


class RunOrderedTests(unittest.TestCase):
    def test_results_keep_input_order(self):
        seen = []
        out = run_ordered(list(range(20)), lambda i: i * i, workers=4, progress_callback=lambda d, t, l: seen.append((d, t)))
        self.assertEqual(out, [i * i for i in range(20)])
        self.assertEqual(seen[-1], (20, 20))
        self.assertEqual(run_ordered([], str, progress_callback=quiet), [])

    def test_exceptions_abort_the_batch(self):
        def boom(i):
            if i == 3:
                raise ValueError("bad item")
            return i

        for workers in (1, 3):
            with self.subTest(workers=workers):
                with self.assertRaises(ValueError):
                    run_ordered(list(range(6)), boom, workers=workers, progress_callback=quiet)


class EvaluationTests(Workspace):
    def test_gold_predictions_score_one_hundred(self):
        report = evaluate_predictions(self.corpus, gold_predictions(self.corpus), self.store(), self.config, quiet)
        self.assertEqual(report.total_ex, 100.0)
        self.assertEqual(report.by_difficulty["simple"]["total"], 1)
        self.assertIsNone(report.schema_linking)

    def test_recorded_predictions_round_trip_through_jsonl(self):
        path = self.root / "predictions.jsonl"
        write_jsonl(path, (r.to_dict() for r in self.record()))
        preds, errors = load_predictions(path)
        self.assertEqual(errors, [])
        report = evaluate_predictions(self.corpus, preds, self.store(), self.config, quiet)
        self.assertEqual(report.total_ex, 100.0)
        self.assertEqual(report.schema_linking.recall, 1.0)

    def test_missing_and_wrong_predictions(self):
        preds = {"0": Prediction(sql="SELECT 'Oakland Unified'")}
        report = evaluate_predictions(self.corpus, preds, self.store(), self.config, quiet)
        self.assertEqual(report.total_ex, 0.0)
        self.assertEqual(report.errors[-1]["message"], "no prediction")

    def test_prediction_file_problems_are_listed(self):
        path = self.root / "preds.jsonl"
        path.write_text('{"example_id": "0", "sql": "SELECT 1"}\nnot json\n{"sql": "SELECT 2"}\n', encoding="utf-8")
        preds, errors = load_predictions(path)
        self.assertEqual(preds["0"].sql, "SELECT 1")
        self.assertEqual(len(errors), 2)
        self.assertIn("missing example_id", errors[1])

    def test_gold_audit_is_clean(self):
        report = audit_predictions(self.corpus, gold_predictions(self.corpus), self.store(), self.config)
        self.assertEqual(report.labeled(), 0)
        self.assertEqual(set(report.counts()), set(CATEGORIES))
        self.assertEqual(len(report.audited), 2)


if __name__ == "__main__":
    unittest.main()
