from __future__ import annotations
import hashlib, json, pathlib
from typing import Any, Iterable, Iterator
from rich.console import Console

console = Console()
ROOT = pathlib.Path(__file__).resolve().parents[1]
PACKAGE = pathlib.Path(__file__).resolve().parent
PROMPTS = PACKAGE / "prompts"
PACKAGE_DATA = PACKAGE / "data"
CONFIG = ROOT / "config"


def read_text(path: str | pathlib.Path) -> str:
    return pathlib.Path(path).read_text(encoding="utf-8")


def load_json(path: str | pathlib.Path) -> Any:
    return json.loads(read_text(path))


def dump_json(data: Any) -> str:
    """Stable JSON text: insertion order kept, UTF-8, trailing newline."""
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


def write_json(path: str | pathlib.Path, data: Any) -> None:
    out = pathlib.Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dump_json(data), encoding="utf-8", newline="\n")


def iter_jsonl(path: str | pathlib.Path) -> Iterator[tuple[int, dict | None, str | None]]:
    """Yield (line_no, record, error) for every non-blank line of a JSONL file."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                yield line_no, None, str(e)
                continue
            if not isinstance(rec, dict):
                yield line_no, None, "record is not a JSON object"
                continue
            yield line_no, rec, None


def jsonl_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": ")) + "\n"


def write_jsonl(path: str | pathlib.Path, records: Iterable[dict]) -> int:
    out = pathlib.Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(jsonl_line(rec))
            count += 1
    return count


def content_hash(*parts: str) -> str:
    """sha256 over length-prefixed parts, so ("ab", "c") and ("a", "bc") differ."""
    h = hashlib.sha256()
    for part in parts:
        raw = part.encode("utf-8")
        h.update(str(len(raw)).encode("ascii"))
        h.update(b":")
        h.update(raw)
    return h.hexdigest()


def file_sig(path: str | pathlib.Path, chunk_size: int = 8192) -> str:
    """
    SHA1 of the file contents. Used to tell whether a cached catalog still matches the
    database file it was built from.
    """
    h = hashlib.sha1()
    with open(pathlib.Path(path), "rb") as f:
        while chunk := f.read(chunk_size):
            h.update(chunk)
    return h.hexdigest()


def truncate_line(text: str, limit: int) -> str:
    """First line of text, stripped and cut to at most `limit` characters."""
    first = (text or "").strip().splitlines()[0] if (text or "").strip() else ""
    return first.strip()[:limit]
