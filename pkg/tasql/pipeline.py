"""Batch orchestration: per-example TASL/TALOG runs, evaluation and audit over a corpus."""

from __future__ import annotations

import pathlib
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

from rich.progress import BarColumn, Progress, TaskID, TextColumn, TimeRemainingColumn

from .audit import AuditPair, AuditReport, audit_corpus
from .config import RunConfig
from .dataset import Corpus, TaskExample
from .errors import DatabaseIOError, GoldSchemaError, PreconditionError, ReplayMissError, SynthesisError, TasqlError
from .llm import HttpBackend, LLMGateway, ResponseStore
from .metrics import ExampleEval, EvalReport, compare_execution, corpus_report, score_linking_pair
from .schema_catalog import (
    JoinGraph,
    SchemaCatalog,
    fk_join_graph,
    generate_succinct_descriptions,
    introspect_database,
    load_catalog,
    save_catalog,
)
from .sql_extract import LinkedSchema, ground_truth_schema
from .talog import synthesize
from .tasl import link_schema
from .utils import file_sig, iter_jsonl, load_json, write_json

ProgressCallback = Callable[[int, int, str], None]
T = TypeVar("T")
R = TypeVar("R")


def database_path(databases_root: str | pathlib.Path, db_id: str) -> pathlib.Path:
    """BIRD/Spider layout: {root}/{db_id}/{db_id}.sqlite"""
    return pathlib.Path(databases_root) / db_id / f"{db_id}.sqlite"


def build_gateway(config: RunConfig) -> LLMGateway:
    backend = None
    if config.gateway_mode != "replay":
        backend = HttpBackend(config.backend_url, api_key_env=config.api_key_env)
    return LLMGateway(
        mode=config.gateway_mode,
        store=ResponseStore(config.cache_path),
        backend=backend,
        model_id=config.model_id,
        decoding=config.decoding,
    )


# ------------------------------
# Catalog cache
# ------------------------------

class CatalogStore:
    """
    One SchemaCatalog per database, introspected once and cached as JSON under
    `cache_dir/{db_id}.json`. `cache_dir/index.json` maps db_id to the SHA1 of the database
    file the cached catalog was built from; a changed file is introspected again.
    """

    def __init__(
        self,
        databases_root: str | pathlib.Path,
        cache_dir: Optional[str | pathlib.Path] = None,
        gateway: Optional[LLMGateway] = None,
        use_succinct: bool = True,
        workers: int = 4,
    ):
        self.databases_root = pathlib.Path(databases_root)
        self.cache_dir = pathlib.Path(cache_dir) if cache_dir else None
        self.gateway = gateway
        self.use_succinct = use_succinct
        self.workers = workers
        self._catalogs: Dict[str, SchemaCatalog] = {}
        self._graphs: Dict[str, JoinGraph] = {}
        self._locks: Dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def db_file(self, db_id: str) -> pathlib.Path:
        return database_path(self.databases_root, db_id)

    def _lock_for(self, db_id: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(db_id, threading.Lock())

    def _index_path(self) -> Optional[pathlib.Path]:
        return self.cache_dir / "index.json" if self.cache_dir else None

    def _read_index(self) -> Dict[str, str]:
        path = self._index_path()
        if path is None or not path.exists():
            return {}
        data = load_json(path)
        return data if isinstance(data, dict) else {}

    def _cached(self, db_id: str, sig: str) -> Optional[SchemaCatalog]:
        if self.cache_dir is None:
            return None
        path = self.cache_dir / f"{db_id}.json"
        if not path.exists() or self._read_index().get(db_id) != sig:
            return None
        catalog = load_catalog(path)
        if self.use_succinct and any(c.succinct_description is None for t in catalog.tables for c in t.columns):
            return None
        return catalog

    def _store(self, catalog: SchemaCatalog, sig: str) -> None:
        if self.cache_dir is None:
            return
        save_catalog(catalog, self.cache_dir / f"{catalog.db_id}.json")
        with self._guard:
            index = self._read_index()
            index[catalog.db_id] = sig
            write_json(self._index_path(), dict(sorted(index.items())))

    def get(self, db_id: str) -> SchemaCatalog:
        if db_id in self._catalogs:
            return self._catalogs[db_id]
        with self._lock_for(db_id):
            if db_id in self._catalogs:
                return self._catalogs[db_id]
            db_file = self.db_file(db_id)
            if not db_file.is_file():
                raise DatabaseIOError(f"database file not found: {db_file}")
            sig = file_sig(db_file)
            catalog = self._cached(db_id, sig)
            if catalog is None:
                catalog = introspect_database(db_file, db_id=db_id)
                if self.use_succinct:
                    if self.gateway is None:
                        raise PreconditionError(f"succinct descriptions for {db_id} need a gateway")
                    catalog = generate_succinct_descriptions(catalog, self.gateway, workers=self.workers)
                self._store(catalog, sig)
            self._catalogs[db_id] = catalog
            self._graphs[db_id] = fk_join_graph(catalog)
            return catalog

    def graph(self, db_id: str) -> JoinGraph:
        self.get(db_id)
        return self._graphs[db_id]

    def put(self, catalog: SchemaCatalog) -> None:
        """Register an already-built catalog (tests, or catalogs loaded from elsewhere)."""
        self._catalogs[catalog.db_id] = catalog
        self._graphs[catalog.db_id] = fk_join_graph(catalog)


# ------------------------------
# Worker pool
# ------------------------------

def run_ordered(
    items: Sequence[T],
    fn: Callable[[T], R],
    workers: int = 1,
    description: str = "Working",
    label: Callable[[T], str] = str,
    progress_callback: Optional[ProgressCallback] = None,
) -> List[R]:
    """
    Apply fn to every item on a thread pool and return results in input order.

    fn is expected to turn per-item failures into data; anything it raises aborts the batch
    after pending work is cancelled.
    """
    total = len(items)
    results: List[Optional[R]] = [None] * total
    if total == 0:
        return []
    progress: Progress | None = None
    task_id: TaskID | None = None
    try:
        if progress_callback is None:
            progress = Progress(
                "{task.description}",
                BarColumn(bar_width=None),
                TextColumn("{task.completed}/{task.total}"),
                TimeRemainingColumn(),
            )
            progress.start()
            task_id = progress.add_task(description, total=total)

        done = 0

        def _tick(item: T) -> None:
            nonlocal done
            done += 1
            if progress_callback is not None:
                progress_callback(done, total, label(item))
            elif progress is not None and task_id is not None:
                progress.advance(task_id)

        if workers > 1 and total > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                future_map = {ex.submit(fn, item): i for i, item in enumerate(items)}
                try:
                    for fut in as_completed(future_map):
                        i = future_map[fut]
                        results[i] = fut.result()
                        _tick(items[i])
                except BaseException:
                    for fut in future_map:
                        fut.cancel()
                    raise
        else:
            for i, item in enumerate(items):
                results[i] = fn(item)
                _tick(item)
    finally:
        if progress is not None:
            progress.stop()
    return results  # type: ignore[return-value]


# ------------------------------
# Per-example records
# ------------------------------

def _gold_schema(example: TaskExample, catalog: SchemaCatalog) -> Tuple[Optional[LinkedSchema], Optional[str]]:
    try:
        return ground_truth_schema(example.gold_sql, catalog), None
    except GoldSchemaError as e:
        return None, str(e)


@dataclass
class LinkRecord:
    example_id: str
    db_id: str
    difficulty: str
    result: Dict[str, Any] = field(default_factory=dict)
    linked: Optional[LinkedSchema] = None
    gold: Optional[LinkedSchema] = None
    warnings: List[str] = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"example_id": self.example_id, "db_id": self.db_id, "difficulty": self.difficulty}
        out.update(self.result)
        out["gold"] = self.gold.to_dict() if self.gold is not None else None
        if self.linked is not None and self.gold is not None:
            score = score_linking_pair(self.linked, self.gold)
            out["linking"] = {"covers_gold": bool(score.indicator), "precision": round(score.precision, 6)}
        if self.warnings:
            out["warnings"] = self.warnings
        out["error"] = self.error
        return out


def link_example(example: TaskExample, store: CatalogStore, gateway: LLMGateway, config: RunConfig) -> LinkRecord:
    record = LinkRecord(example.example_id, example.db_id, example.difficulty)
    try:
        catalog = store.get(example.db_id)
        dummy = link_schema(example, catalog, gateway, use_succinct=config.use_succinct, with_knowledge=config.with_knowledge)
    except ReplayMissError:
        raise
    except TasqlError as e:
        record.error = f"{type(e).__name__}: {e}"
        return record
    record.result = dummy.to_dict()
    record.linked = dummy.linked
    record.gold, warn = _gold_schema(example, catalog)
    if warn:
        record.warnings.append(warn)
    return record


def run_linking(
    corpus: Corpus,
    store: CatalogStore,
    gateway: LLMGateway,
    config: RunConfig,
    progress_callback: Optional[ProgressCallback] = None,
) -> List[LinkRecord]:
    return run_ordered(
        list(corpus),
        lambda ex: link_example(ex, store, gateway, config),
        workers=config.concurrency,
        description="Linking",
        label=lambda ex: ex.example_id,
        progress_callback=progress_callback,
    )


@dataclass
class PredictionRecord:
    example_id: str
    db_id: str
    dummy_sql: Optional[str] = None
    linked: Optional[LinkedSchema] = None
    fallback: bool = False
    symbolic_plan: Optional[str] = None
    final_sql: Optional[str] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "example_id": self.example_id,
            "db_id": self.db_id,
            "dummy_sql": self.dummy_sql,
            "linked": self.linked.to_dict() if self.linked is not None else None,
            "fallback": self.fallback,
            "symbolic_plan": self.symbolic_plan,
            "final_sql": self.final_sql,
            "diagnostics": self.diagnostics,
            "error": self.error,
        }


def predict_example(example: TaskExample, store: CatalogStore, gateway: LLMGateway, config: RunConfig) -> PredictionRecord:
    """TASL then TALOG for one example. SynthesisError leaves final_sql empty and keeps its artifacts."""
    record = PredictionRecord(example.example_id, example.db_id)
    try:
        catalog = store.get(example.db_id)
        dummy = link_schema(example, catalog, gateway, use_succinct=config.use_succinct, with_knowledge=config.with_knowledge)
    except ReplayMissError:
        raise
    except TasqlError as e:
        record.error = f"{type(e).__name__}: {e}"
        return record

    record.dummy_sql = dummy.extracted_sql
    record.linked = dummy.linked
    record.fallback = dummy.fallback
    record.diagnostics["linking"] = {
        "parse_ok": dummy.parse_ok,
        "parse_error": dummy.parse_error,
        "dropped": list(dummy.dropped),
    }
    try:
        synth = synthesize(
            example,
            dummy.linked,
            catalog,
            gateway,
            graph=store.graph(example.db_id),
            with_knowledge=config.with_knowledge,
        )
    except ReplayMissError:
        raise
    except SynthesisError as e:
        record.error = f"SynthesisError: {e}"
        record.symbolic_plan = e.artifacts.get("symbolic_plan")
        record.diagnostics["synthesis"] = {k: v for k, v in e.artifacts.items() if k != "symbolic_plan"}
        return record
    except TasqlError as e:
        record.error = f"{type(e).__name__}: {e}"
        return record

    out = synth.to_dict()
    record.symbolic_plan = out.pop("symbolic_plan")
    record.final_sql = out.pop("final_sql")
    record.diagnostics["synthesis"] = out
    return record


def run_pipeline(
    corpus: Corpus,
    store: CatalogStore,
    gateway: LLMGateway,
    config: RunConfig,
    progress_callback: Optional[ProgressCallback] = None,
) -> List[PredictionRecord]:
    return run_ordered(
        list(corpus),
        lambda ex: predict_example(ex, store, gateway, config),
        workers=config.concurrency,
        description="Predicting",
        label=lambda ex: ex.example_id,
        progress_callback=progress_callback,
    )


# ------------------------------
# Predictions files
# ------------------------------

@dataclass
class Prediction:
    sql: Optional[str]
    linked: Optional[LinkedSchema] = None
    fallback: bool = False


def load_predictions(path: str | pathlib.Path) -> Tuple[Dict[str, Prediction], List[str]]:
    """Read predictions JSONL keyed by example_id. Accepts `final_sql` or `sql` for the query."""
    preds: Dict[str, Prediction] = {}
    errors: List[str] = []
    for line_no, rec, err in iter_jsonl(path):
        if err or rec is None:
            errors.append(f"line {line_no}: {err}")
            continue
        if "example_id" not in rec:
            errors.append(f"line {line_no}: missing example_id")
            continue
        sql = rec.get("final_sql", rec.get("sql"))
        linked = rec.get("linked")
        preds[str(rec["example_id"])] = Prediction(
            sql=sql if isinstance(sql, str) else None,
            linked=LinkedSchema.from_dict(linked) if isinstance(linked, dict) else None,
            fallback=bool(rec.get("fallback", False)),
        )
    return preds, errors


def gold_predictions(corpus: Corpus) -> Dict[str, Prediction]:
    return {ex.example_id: Prediction(sql=ex.gold_sql) for ex in corpus}


# ------------------------------
# Evaluation and audit
# ------------------------------

def evaluate_example(example: TaskExample, prediction: Optional[Prediction], store: CatalogStore, config: RunConfig) -> ExampleEval:
    db_file = store.db_file(example.db_id)
    if not db_file.is_file():
        return ExampleEval(
            example.example_id, example.difficulty, correct=False, gold_valid=False,
            error=f"database file not found: {db_file}",
        )
    pred_sql = prediction.sql if prediction else None
    verdict = compare_execution(pred_sql, example.gold_sql, db_file, timeout=config.timeout_seconds)
    error = verdict.gold.error if not verdict.gold_valid else verdict.predicted.error
    if prediction is None:
        error = "no prediction"

    gold_schema = None
    if prediction is not None and prediction.linked is not None:
        try:
            gold_schema, _ = _gold_schema(example, store.get(example.db_id))
        except TasqlError:
            gold_schema = None
    return ExampleEval(
        example_id=example.example_id,
        difficulty=example.difficulty,
        correct=verdict.correct,
        gold_valid=verdict.gold_valid,
        pred_status=verdict.predicted.status,
        error=error,
        linked=prediction.linked if prediction else None,
        gold_schema=gold_schema,
        fallback=prediction.fallback if prediction else False,
    )


def evaluate_predictions(
    corpus: Corpus,
    predictions: Dict[str, Prediction],
    store: CatalogStore,
    config: RunConfig,
    progress_callback: Optional[ProgressCallback] = None,
) -> EvalReport:
    results = run_ordered(
        list(corpus),
        lambda ex: evaluate_example(ex, predictions.get(ex.example_id), store, config),
        workers=config.concurrency,
        description="Evaluating",
        label=lambda ex: ex.example_id,
        progress_callback=progress_callback,
    )
    return corpus_report(results, include_tables=config.include_tables_in_linking)


def audit_predictions(
    corpus: Corpus,
    predictions: Dict[str, Prediction],
    store: CatalogStore,
    config: RunConfig,
) -> AuditReport:
    """Audit every corpus example that has a prediction; catalogs that fail to load become per-example errors."""
    pairs: List[AuditPair] = []
    catalogs: Dict[str, SchemaCatalog] = {}
    db_files: Dict[str, pathlib.Path] = {}
    for ex in corpus:
        pred = predictions.get(ex.example_id)
        if pred is None:
            continue
        pairs.append(AuditPair(ex.example_id, ex.db_id, pred.sql, ex.gold_sql))
        if ex.db_id not in catalogs:
            try:
                catalogs[ex.db_id] = store.get(ex.db_id)
                db_files[ex.db_id] = store.db_file(ex.db_id)
            except TasqlError:
                continue
    return audit_corpus(
        pairs,
        catalogs,
        db_files,
        clauses=config.clause_abuse_clauses,
        workers=config.concurrency,
    )
