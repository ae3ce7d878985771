"""Exception hierarchy shared across the pipeline.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented exit statuses without inspecting messages.
"""

from __future__ import annotations


class CmeStormError(Exception):
    exit_code = 2


class UsageError(CmeStormError, ValueError):
    exit_code = 1


class DataError(CmeStormError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class FetchError(DataError):
    """Remote archive unavailable after retries; safe to retry later."""

    retryable = True


class OfflineCacheMiss(FetchError):
    retryable = False


class ChecksumError(DataError):
    pass


class ShapeError(CmeStormError, ValueError):
    exit_code = 1


class MissingWeightsError(DataError):
    def __init__(self, adapter: str, detail: str = ""):
        self.adapter = adapter
        msg = f"weights for backbone adapter {adapter!r} are unavailable"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class InstrumentMissing(DataError):
    pass


class NumericError(CmeStormError, ArithmeticError):
    exit_code = 3
