#!/usr/bin/env python3
"""
Error hierarchy for the windgam pipeline.

Every error carries the process exit code the CLI reports for it:
1 usage, 2 data, 3 numerical.
"""

from typing import List, Optional, Tuple


class WindGamError(Exception):
    exit_code = 1


class UsageError(WindGamError):
    """Bad flags, unreadable config, unresolvable paths."""
    exit_code = 1


class DataError(WindGamError):
    exit_code = 2


class RecordValidationError(DataError):
    """One or more input rows failed validation; `rows` holds (row index, reason)."""

    def __init__(self, rows: List[Tuple[int, str]], path: Optional[str] = None):
        self.rows = list(rows)
        self.path = path
        preview = '; '.join(f"row {idx}: {reason}" for idx, reason in self.rows[:5])
        more = f" (+{len(self.rows) - 5} more)" if len(self.rows) > 5 else ''
        where = f" in {path}" if path else ''
        super().__init__(f"{len(self.rows)} invalid row(s){where}: {preview}{more}")


class ModelFileError(DataError):
    """Model file missing, truncated or structurally invalid."""


class ModelVersionError(ModelFileError):
    def __init__(self, found: str, expected: str):
        self.found = found
        self.expected = expected
        super().__init__(f"model file version {found} is not compatible with reader version {expected}")


class NumericalError(WindGamError):
    exit_code = 3


class FactorizationError(NumericalError):
    """Cholesky factorization failed even after jitter escalation."""


class OptimizationError(NumericalError):
    """Every optimizer restart failed."""

    def __init__(self, message: str, diagnostics: Optional[list] = None):
        self.diagnostics = diagnostics or []
        super().__init__(message)
