"""Exception hierarchy for the QE lab.

Every error raised on purpose by the package derives from QeLabError, so the CLI can
map whole families of failures onto exit codes without catching unrelated bugs.
"""

from dataclasses import dataclass


class QeLabError(Exception):
    """Base class for all package errors."""


class ConfigError(QeLabError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataError(QeLabError, ValueError):
    """Dataset could not be read or violates the record schema."""


@dataclass
class IngestIssue:
    """One problem found while ingesting a dataset file.

    Attributes:
        path: File the issue was found in.
        line: 1-based line number (header counts as line 1 for TSV).
        message: Human-readable description.
        severity: "error" drops the record, "warning" keeps it.
    """

    path: str
    line: int
    message: str
    severity: str = "error"

    def __str__(self) -> str:
        return f"{self.path}:{self.line}: {self.severity}: {self.message}"


class IngestError(DataError):
    """Strict-mode ingestion failure carrying every issue found."""

    def __init__(self, issues: list[IngestIssue]):
        self.issues = issues
        shown = "\n".join(f"  {issue}" for issue in issues[:10])
        more = f"\n  ... and {len(issues) - 10} more" if len(issues) > 10 else ""
        super().__init__(f"{len(issues)} malformed record(s):\n{shown}{more}")


class ShapeError(QeLabError, ValueError):
    """Tensor shapes do not agree for an operation."""


class NumericsError(QeLabError, ArithmeticError):
    """Non-finite values, or a gradient request on a non-scalar."""


class AdapterError(QeLabError, ValueError):
    """Adapter attachment or merge contract violated."""


class TrainingError(QeLabError, RuntimeError):
    """Training could not proceed (bad input, diverged loss)."""


class CheckpointError(QeLabError, ValueError):
    """Checkpoint file is unreadable, of the wrong format, or inconsistent."""


class PromptError(QeLabError, ValueError):
    """Template, exemplar or prompt rendering error."""


class ScoreParseError(PromptError):
    """No numeric score could be extracted from a response."""


class ScorerError(QeLabError, RuntimeError):
    """A single scoring request failed."""


class ScorerUnavailableError(ScorerError):
    """The scorer cannot serve any request (after retries or by refusal)."""


class CredentialsError(QeLabError):
    """Credentials for a remote scorer are missing."""


class ReportError(QeLabError, ValueError):
    """Metric report or table cannot be built."""


class QuantizationError(QeLabError, ValueError):
    """Quantized weights are corrupted (codes outside the 4-bit range)."""


class LayerIndexError(QeLabError, IndexError):
    """Layer index does not address a block of the model."""


class MetricError(ReportError):
    """A correlation or average is undefined for the given values."""
