"""Exception hierarchy.

Everything raised on purpose derives from LoraMergeError so the CLI can
separate user-correctable problems (exit code 2) from runtime failures
(exit code 1).
"""

from __future__ import annotations


class LoraMergeError(Exception):
    """Base class for all errors raised by this package."""


class TensorFileError(LoraMergeError):
    """Malformed tensor container: bad header, truncated buffer, bad dtype."""


class AdapterSchemaError(LoraMergeError):
    """Adapter checkpoint violates the expected tensor layout."""


class ShapeMismatchError(LoraMergeError):
    """Tensor shapes disagree across tasks, or a mask does not fit a grid."""


class GridStructureError(LoraMergeError):
    """Task checkpoints do not form a rectangular layer/projection grid."""


class MaskFormatError(LoraMergeError):
    """Mask JSON is malformed or inconsistent with its declared shape."""


class UnsupportedMethodError(LoraMergeError):
    """Requested merge method cannot run on the given inputs."""


class ConfigError(LoraMergeError):
    """Run configuration is invalid."""


class CheckpointError(LoraMergeError):
    """Search checkpoint is missing, malformed, or inconsistent."""


class EvaluatorError(LoraMergeError):
    """Base class for fitness-evaluator failures."""


class EvaluatorCrashError(EvaluatorError):
    """External evaluator process died or closed its pipe; carries stderr."""

    def __init__(self, message: str, stderr: str = "") -> None:
        super().__init__(message if not stderr else f"{message}\n--- evaluator stderr ---\n{stderr}")
        self.stderr = stderr


class EvaluatorTimeoutError(EvaluatorError):
    """External evaluator did not answer within the configured timeout."""


class EvaluatorProtocolError(EvaluatorError):
    """External evaluator broke the wire protocol (bad JSON, wrong id)."""


class EvaluatorRemoteError(EvaluatorError):
    """External evaluator reported an application-level error."""


class SearchAbortedError(LoraMergeError):
    """A generation could not be completed; identifies the failing candidate."""

    def __init__(self, generation: int, candidate: int, cause: Exception) -> None:
        super().__init__(
            f"search aborted at generation {generation}, candidate {candidate}: {cause}"
        )
        self.generation = generation
        self.candidate = candidate
        self.cause = cause
