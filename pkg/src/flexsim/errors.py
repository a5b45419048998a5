"""Exception hierarchy and the violation record shared by the checkers."""
from __future__ import annotations

from dataclasses import asdict, dataclass


class FlexError(Exception):
    """Base class for every error raised by flexsim."""


class ParseError(FlexError):
    """Malformed input text. Carries a 1-based line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f"{line}:{column}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class Violation:
    component: str | None
    compartment: str | None
    kind: str
    message: str
    severity: str = "error"  # "error" | "warning"

    @property
    def is_error(self) -> bool:
        return self.severity == "error"

    def to_json(self) -> dict:
        return asdict(self)
