"""Exception hierarchy for rtnlinv.

Every error raised on purpose by the package derives from RtnlinvError so the
CLI can map it onto an exit code.
"""

from typing import Any, Dict, Optional


class RtnlinvError(Exception):
    """Base class for all rtnlinv errors."""

    exit_code = 1


class ConfigurationError(RtnlinvError, ValueError):
    """Invalid plan, schedule or run configuration."""

    exit_code = 2


class UsageError(RtnlinvError):
    """Invalid combination of command-line options."""

    exit_code = 2


class DataError(RtnlinvError):
    """Problem with input data or output data streams."""

    exit_code = 3


class TruncatedFrameError(DataError):
    """A frame ended before its declared byte count."""

    def __init__(self, expected: int, got: int, frame_index: Optional[int] = None):
        where = f" (frame {frame_index})" if frame_index is not None else ""
        super().__init__(f"truncated frame{where}: expected {expected} bytes, got {got}")
        self.expected = expected
        self.got = got
        self.frame_index = frame_index


class NonFiniteDataError(DataError):
    """NaN or Inf encountered where finite values are required."""


class OrderingError(DataError):
    """Frames delivered out of order while strict ordering is enforced."""


class PairingError(DataError):
    """Flow-encoded frames cannot be paired."""


class ImageWriteError(DataError):
    """I/O failure while writing an image; carries the frame index."""

    def __init__(self, frame_index: int, message: str):
        super().__init__(f"frame {frame_index}: {message}")
        self.frame_index = frame_index


class ContractViolation(RtnlinvError, ValueError):
    """An operation was called with arguments outside its contract."""

    exit_code = 3


class SolverDivergenceError(RtnlinvError):
    """The CG solver produced a non-finite residual."""

    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DecompositionFault(RtnlinvError):
    """A worker partial was missing when the all-reduce needed it."""

    exit_code = 4


class PipelineFailure(RtnlinvError):
    """A pipeline stage failed; the pipeline was drained."""

    def __init__(self, stage: str, last_good_frame: Optional[int], cause: BaseException):
        super().__init__(
            f"stage '{stage}' failed after frame {last_good_frame}: {cause}"
        )
        self.stage = stage
        self.last_good_frame = last_good_frame
        self.cause = cause

    @property
    def exit_code(self) -> int:  # type: ignore[override]
        return getattr(self.cause, "exit_code", 1)
