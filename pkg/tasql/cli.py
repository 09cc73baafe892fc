from __future__ import annotations

import contextlib
import pathlib
from typing import Annotated, Iterator, List, Optional

import typer
from rich.table import Table

from .audit import AuditReport, compare_audits
from .config import RunConfig, load_run_config
from .dataset import Corpus, load_corpus
from .errors import ConfigError, CorpusParseError, PreconditionError, ReplayMissError, TasqlError
from .llm import LLMGateway
from .metrics import linking_table, render_tables, schema_linking_scores
from .pipeline import (
    CatalogStore,
    Prediction,
    audit_predictions,
    build_gateway,
    evaluate_predictions,
    gold_predictions,
    load_predictions,
    run_linking,
    run_pipeline,
)
from .schema_catalog import introspect_database, save_catalog
from .utils import console, write_json, write_jsonl
from .versions import __version__

LINKED_FILE = "linked.jsonl"
LINKING_FILE = "linking.json"
PREDICTIONS_FILE = "predictions.jsonl"
EVAL_FILE = "eval.json"
AUDIT_FILE = "audit.json"
CATALOGS_DIR = "catalogs"

EXIT_PARTIAL, EXIT_FATAL = 1, 2


# ------------------------------
# Typer CLI
# ------------------------------

app = typer.Typer(no_args_is_help=True, add_completion=False, help="TA-SQL text-to-SQL pipeline, evaluation and audit")


def _show_version(value: bool) -> None:
    if value:
        console.print(f"tasql {__version__}")
        raise typer.Exit()


@app.callback()
def _main(
    version: Annotated[bool, typer.Option("--version", callback=_show_version, is_eager=True, help="Print the version and exit")] = False,
):
    pass


ProfileOpt = Annotated[Optional[str], typer.Option("--profile", help="Run profile name from config/tasql.yml")]
ConfigOpt = Annotated[Optional[pathlib.Path], typer.Option("--config", help="Alternative profiles YAML file")]
DatasetOpt = Annotated[Optional[str], typer.Option("--dataset", help="Benchmark JSON file (BIRD or Spider)")]
DatabasesOpt = Annotated[Optional[str], typer.Option("--databases", help="Root folder holding {db_id}/{db_id}.sqlite")]
SourceOpt = Annotated[Optional[str], typer.Option("--source", help="bird | spider")]
KnowledgeOpt = Annotated[Optional[str], typer.Option("--knowledge", help="with_knowledge | without_knowledge")]
ModelOpt = Annotated[Optional[str], typer.Option("--model", help="Model id sent to the backend and part of the cache key")]
ModeOpt = Annotated[Optional[str], typer.Option("--mode", help="live | record | replay")]
CacheOpt = Annotated[Optional[str], typer.Option("--cache", help="Response cache JSONL file")]
OutputOpt = Annotated[Optional[str], typer.Option("--output-dir", help="Folder for every output file")]
ConcurrencyOpt = Annotated[Optional[int], typer.Option("--concurrency", help="Parallel per-example workers")]
TimeoutOpt = Annotated[Optional[float], typer.Option("--timeout", help="Per-statement execution timeout in seconds")]
BackendOpt = Annotated[Optional[str], typer.Option("--backend-url", help="OpenAI-compatible base URL (live/record)")]
SuccinctOpt = Annotated[Optional[bool], typer.Option("--succinct/--full-descriptions", help="Describe columns with succinct one-liners")]


@contextlib.contextmanager
def _fatal_errors() -> Iterator[None]:
    """Configuration, corpus and replay failures end the command with exit code 2."""
    try:
        yield
    except ReplayMissError as e:
        console.print(f"[red]Replay cache miss: {e}. Record the prompt first or switch to record mode.")
        raise typer.Exit(code=EXIT_FATAL)
    except (ConfigError, CorpusParseError, PreconditionError) as e:
        console.print(f"[red]{e}")
        raise typer.Exit(code=EXIT_FATAL)
    except OSError as e:
        console.print(f"[red]{e}")
        raise typer.Exit(code=EXIT_FATAL)


def _config(params: dict, needs_gateway: bool = True) -> RunConfig:
    kwargs = dict(params)
    profile = kwargs.pop("profile", None)
    config_path = kwargs.pop("config_path", None)
    overrides = {
        "dataset_path": kwargs.get("dataset"),
        "databases_root": kwargs.get("databases"),
        "source": kwargs.get("source"),
        "knowledge_mode": kwargs.get("knowledge"),
        "model_id": kwargs.get("model"),
        "gateway_mode": kwargs.get("mode"),
        "cache_path": kwargs.get("cache"),
        "output_dir": kwargs.get("output_dir"),
        "concurrency": kwargs.get("concurrency"),
        "timeout_seconds": kwargs.get("timeout"),
        "backend_url": kwargs.get("backend_url"),
        "use_succinct": kwargs.get("succinct"),
    }
    return load_run_config(profile, config_path, **overrides).validate(needs_gateway=needs_gateway)


def _corpus(config: RunConfig) -> Corpus:
    if not config.dataset_path:
        raise ConfigError("no dataset given (--dataset or dataset_path in the profile)")
    corpus = load_corpus(config.dataset_path, config.source, config.knowledge_mode)
    for err in corpus.errors:
        console.print(f"[yellow]Skipped {err}")
    return corpus


def _store(config: RunConfig, gateway: Optional[LLMGateway], use_succinct: Optional[bool] = None) -> CatalogStore:
    return CatalogStore(
        config.databases_root,
        cache_dir=pathlib.Path(config.output_dir) / CATALOGS_DIR,
        gateway=gateway,
        use_succinct=config.use_succinct if use_succinct is None else use_succinct,
        workers=config.concurrency,
    )


def _print_gateway_stats(gateway: LLMGateway) -> None:
    s = gateway.stats()
    console.print(
        f"[cyan]Gateway {s['mode']} ({s['model']}): {s['hits']} cache hits, {s['misses']} misses, "
        f"{s['backend_calls']} backend calls, {s['cache_entries']} cached responses"
    )


def _write_report(out_dir: pathlib.Path, name: str, data: dict, tables: List[Table]) -> None:
    write_json(out_dir / name, data)
    (out_dir / pathlib.Path(name).with_suffix(".txt")).write_text(render_tables(tables), encoding="utf-8", newline="\n")
    for t in tables:
        console.print(t)


@app.command("link")
def cmd_link(
    profile: ProfileOpt = None,
    config_path: ConfigOpt = None,
    dataset: DatasetOpt = None,
    databases: DatabasesOpt = None,
    source: SourceOpt = None,
    knowledge: KnowledgeOpt = None,
    model: ModelOpt = None,
    mode: ModeOpt = None,
    cache: CacheOpt = None,
    output_dir: OutputOpt = None,
    concurrency: ConcurrencyOpt = None,
    backend_url: BackendOpt = None,
    succinct: SuccinctOpt = None,
    include_tables: bool = typer.Option(False, help="Score tables as schema elements alongside columns"),
):
    """Task-aligned schema linking only: write linked.jsonl and the Recall/Precision/F1 block."""
    params = dict(locals())
    with _fatal_errors():
        config = _config(params)
        corpus = _corpus(config)
        gateway = build_gateway(config)
        records = run_linking(corpus, _store(config, gateway), gateway, config)

    out_dir = pathlib.Path(config.output_dir)
    write_jsonl(out_dir / LINKED_FILE, (r.to_dict() for r in records))
    failed = [r for r in records if r.error]
    for r in failed:
        console.print(f"[red]{r.example_id}: {r.error}")

    pairs = [(r.linked, r.gold) for r in records if r.linked is not None and r.gold is not None]
    if pairs:
        score = schema_linking_scores(pairs, include_tables=include_tables or config.include_tables_in_linking)
        _write_report(out_dir, LINKING_FILE, score.to_dict(), [linking_table(score)])
    _print_gateway_stats(gateway)
    console.print(f"[green]Linked {len(records) - len(failed)}/{len(records)} examples -> {out_dir / LINKED_FILE}")
    if records and len(failed) == len(records):
        raise typer.Exit(code=EXIT_PARTIAL)


@app.command("run")
def cmd_run(
    profile: ProfileOpt = None,
    config_path: ConfigOpt = None,
    dataset: DatasetOpt = None,
    databases: DatabasesOpt = None,
    source: SourceOpt = None,
    knowledge: KnowledgeOpt = None,
    model: ModelOpt = None,
    mode: ModeOpt = None,
    cache: CacheOpt = None,
    output_dir: OutputOpt = None,
    concurrency: ConcurrencyOpt = None,
    backend_url: BackendOpt = None,
    succinct: SuccinctOpt = None,
):
    """Full two-stage pipeline: write predictions.jsonl with every intermediate artifact."""
    params = dict(locals())
    with _fatal_errors():
        config = _config(params)
        corpus = _corpus(config)
        gateway = build_gateway(config)
        records = run_pipeline(corpus, _store(config, gateway), gateway, config)

    out_dir = pathlib.Path(config.output_dir)
    write_jsonl(out_dir / PREDICTIONS_FILE, (r.to_dict() for r in records))
    failed = [r for r in records if r.error]
    for r in failed:
        console.print(f"[red]{r.example_id}: {r.error}")
    _print_gateway_stats(gateway)
    console.print(f"[green]Predicted {len(records) - len(failed)}/{len(records)} examples -> {out_dir / PREDICTIONS_FILE}")
    if failed:
        raise typer.Exit(code=EXIT_PARTIAL)


def _predictions(path: Optional[pathlib.Path], config: RunConfig) -> dict[str, Prediction]:
    src = path or pathlib.Path(config.output_dir) / PREDICTIONS_FILE
    if not src.is_file():
        raise ConfigError(f"predictions file not found: {src}")
    preds, errors = load_predictions(src)
    for err in errors:
        console.print(f"[yellow]{src}: {err}")
    return preds


@app.command("eval")
def cmd_eval(
    predictions: Optional[pathlib.Path] = typer.Option(None, help="Predictions JSONL (defaults to output_dir/predictions.jsonl)"),
    use_gold: bool = typer.Option(False, help="Evaluate the gold SQL itself as the predictions"),
    profile: ProfileOpt = None,
    config_path: ConfigOpt = None,
    dataset: DatasetOpt = None,
    databases: DatabasesOpt = None,
    source: SourceOpt = None,
    output_dir: OutputOpt = None,
    concurrency: ConcurrencyOpt = None,
    timeout: TimeoutOpt = None,
):
    """Execution Accuracy per difficulty bucket, plus schema linking scores when predictions carry them."""
    params = dict(locals())
    with _fatal_errors():
        config = _config(params, needs_gateway=False)
        corpus = _corpus(config)
        preds = gold_predictions(corpus) if use_gold else _predictions(predictions, config)
        report = evaluate_predictions(corpus, preds, _store(config, None, use_succinct=False), config)

    out_dir = pathlib.Path(config.output_dir)
    tables = [t for t in (report.table(), report.linking_table()) if t is not None]
    _write_report(out_dir, EVAL_FILE, report.to_dict(), tables)
    for err in report.errors:
        console.print(f"[yellow]{err['example_id']} ({err['stage']}): {err['message']}")
    console.print(f"[green]EX {report.total_ex:.2f} over {report.counts['evaluated']} examples -> {out_dir / EVAL_FILE}")


@app.command("audit")
def cmd_audit(
    predictions: Optional[pathlib.Path] = typer.Option(None, help="Predictions JSONL (defaults to output_dir/predictions.jsonl)"),
    baseline: Optional[pathlib.Path] = typer.Option(None, help="Second predictions file to compare against"),
    profile: ProfileOpt = None,
    config_path: ConfigOpt = None,
    dataset: DatasetOpt = None,
    databases: DatabasesOpt = None,
    source: SourceOpt = None,
    output_dir: OutputOpt = None,
    concurrency: ConcurrencyOpt = None,
):
    """Label predicted SQL with the six hallucination categories; with --baseline, report per-category deltas."""
    params = dict(locals())
    with _fatal_errors():
        config = _config(params, needs_gateway=False)
        corpus = _corpus(config)
        store = _store(config, None, use_succinct=False)
        report: AuditReport = audit_predictions(corpus, _predictions(predictions, config), store, config)
        base_report = audit_predictions(corpus, _predictions(baseline, config), store, config) if baseline else None

    out_dir = pathlib.Path(config.output_dir)
    if base_report is None:
        _write_report(out_dir, AUDIT_FILE, report.to_dict(), [report.table()])
    else:
        comparison = compare_audits(base_report, report)
        tables = [report.table("Candidate"), base_report.table("Baseline"), comparison.table()]
        _write_report(out_dir, AUDIT_FILE, comparison.to_dict(), tables)
    for r in report.results:
        if r.error:
            console.print(f"[yellow]{r.example_id}: {r.error}")
    console.print(f"[green]Audited {len(report.audited)} examples -> {out_dir / AUDIT_FILE}")


@app.command("describe")
def cmd_describe(
    db_ids: List[str] = typer.Argument(None, help="Databases to describe (default: every database in the corpus)"),
    profile: ProfileOpt = None,
    config_path: ConfigOpt = None,
    dataset: DatasetOpt = None,
    databases: DatabasesOpt = None,
    model: ModelOpt = None,
    mode: ModeOpt = None,
    cache: CacheOpt = None,
    output_dir: OutputOpt = None,
    concurrency: ConcurrencyOpt = None,
    backend_url: BackendOpt = None,
):
    """Generate succinct column descriptions once per database into output_dir/catalogs/."""
    params = dict(locals())
    failed = 0
    with _fatal_errors():
        config = _config(params)
        targets = list(db_ids or [])
        if not targets:
            targets = list(dict.fromkeys(ex.db_id for ex in _corpus(config)))
        gateway = build_gateway(config)
        store = _store(config, gateway, use_succinct=True)
        for db_id in targets:
            try:
                catalog = store.get(db_id)
            except ReplayMissError:
                raise
            except TasqlError as e:
                console.print(f"[red]{db_id}: {e}")
                failed += 1
                continue
            for warn in catalog.warnings:
                console.print(f"[yellow]{db_id}: {warn}")
            console.print(f"[green]{db_id}: {catalog.n_tables} tables, {catalog.n_columns} columns described")
    _print_gateway_stats(gateway)
    if failed:
        raise typer.Exit(code=EXIT_PARTIAL)


@app.command("catalog")
def cmd_catalog(
    db_file: pathlib.Path = typer.Argument(..., help="SQLite database file"),
    metadata: Optional[pathlib.Path] = typer.Option(None, help="Folder of per-table description CSVs (default: database_description next to the file)"),
    out: Optional[pathlib.Path] = typer.Option(None, help="Write the catalog JSON here"),
):
    """Introspect one database and print a per-table summary."""
    with _fatal_errors():
        catalog = introspect_database(db_file, external_metadata=metadata)

    table = Table(title=f"Catalog {catalog.db_id}")
    table.add_column("Table")
    table.add_column("Columns", justify="right")
    table.add_column("Primary key")
    table.add_column("Foreign keys")
    for t in catalog.tables:
        fks = [f"{fk.source.column} -> {fk.target}" for fk in catalog.foreign_keys if fk.source.table_key == t.name.lower()]
        table.add_row(t.name, str(len(t.columns)), ", ".join(t.primary_key) or "-", "; ".join(fks) or "-")
    console.print(table)
    for warn in catalog.warnings:
        console.print(f"[yellow]{warn}")
    if out is not None:
        save_catalog(catalog, out)
        console.print(f"[green]Wrote {out}")


def main() -> None:
    app()


if __name__ == "__main__":
    main()
