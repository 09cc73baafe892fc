"""Task-aligned text-to-SQL: schema linking through dummy SQL, symbolic plans compiled to SQL, evaluation and audit."""

__all__ = [
    "__version__",
]
from .versions import __version__
