"""
Error hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI should use and a short
``kind`` tag printed in the single-line error prefix.
"""
from __future__ import annotations

from typing import List, Optional


class ClnetError(Exception):
    exit_code: int = 3
    kind: str = "error"

    def one_line(self) -> str:
        text = " ".join(str(self).split())
        return f"clnet-error[{self.kind}]: {text}"


class UsageError(ClnetError):
    exit_code = 2
    kind = "usage"


class ConfigurationError(ClnetError):
    kind = "config"


class ValidationError(ClnetError):
    kind = "validation"


class CheckpointError(ClnetError):
    kind = "checkpoint"

    def __init__(self, message: str, tensor: Optional[str] = None):
        super().__init__(message)
        self.tensor = tensor


class EmbeddingFormatError(ClnetError):
    kind = "format"


class DatasetError(ClnetError):
    """Raised with every problem found, not just the first."""

    kind = "dataset"

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DegenerateSceneError(ClnetError):
    kind = "scene"


class NumericError(ClnetError):
    exit_code = 4
    kind = "numeric"


class DegenerateEmbeddingError(NumericError):
    kind = "degenerate-embedding"
