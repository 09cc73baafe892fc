"""Exception hierarchy shared by every tasql stage."""

from __future__ import annotations

from typing import Any, Dict, List, Optional, Sequence


class TasqlError(Exception):
    """Base class for all tasql failures"""

    pass


class ConfigError(TasqlError, ValueError):
    """Invalid run profile or flag combination"""

    pass


class PreconditionError(TasqlError, ValueError):
    """An operation was called with inputs it cannot accept"""

    pass


class DatabaseIOError(TasqlError, OSError):
    """A database file could not be opened or read"""

    pass


class CorpusParseError(TasqlError):
    """A dataset file is not valid JSON"""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (at byte {byte_offset})")
        self.byte_offset = byte_offset


class ReplayMissError(TasqlError):
    """Replay mode was asked for a prompt that is not in the cache"""

    def __init__(self, prompt_hash: str):
        super().__init__(f"no cached response for prompt {prompt_hash}")
        self.prompt_hash = prompt_hash


class BackendError(TasqlError):
    """The completion backend kept failing after retries"""

    pass


class SqlParseError(TasqlError):
    """SQL text does not parse"""

    def __init__(self, message: str, line: Optional[int] = None, col: Optional[int] = None):
        where = f" (line {line}, col {col})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line
        self.col = col


class UnsupportedError(TasqlError):
    """SQL parsed, but the statement kind is outside the SELECT subset"""

    pass


class GoldSchemaError(TasqlError):
    """Gold SQL does not parse or references entities missing from the catalog"""

    def __init__(self, message: str, unresolved: Sequence[str] = ()):
        super().__init__(message)
        self.unresolved = list(unresolved)


class SymbolicParseError(TasqlError):
    """Symbolic plan text could not be parsed"""

    def __init__(self, message: str, line_no: Optional[int] = None):
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{message}")
        self.line_no = line_no


class UnknownFunctionError(SymbolicParseError):
    """A plan called a function outside the closed DSL"""

    def __init__(self, name: str, line_no: Optional[int] = None):
        super().__init__(f"unknown function '{name}'", line_no)
        self.name = name


class JoinInferenceError(TasqlError):
    """Required tables are not connected in the FK join graph"""

    def __init__(self, message: str, components: List[List[str]]):
        super().__init__(message)
        self.components = components


class CompileError(TasqlError):
    """A symbolic plan cannot be turned into SQL"""

    pass


class SynthesisError(TasqlError):
    """Logical synthesis failed; carries everything produced on the way"""

    def __init__(self, message: str, artifacts: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.artifacts: Dict[str, Any] = dict(artifacts or {})
