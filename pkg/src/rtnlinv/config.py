"""Configuration module for rtnlinv."""

import configparser
import logging
import os
import sys
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Union

from .errors import ConfigurationError, UsageError

# Debug logging flag - set RTNLINV_DEBUG=1 environment variable to enable
DEBUG = os.environ.get("RTNLINV_DEBUG", "0") == "1"


class ImagingMode(Enum):
    """Acquisition modes that change the shape of the reconstruction."""

    SINGLE_SLICE = "single_slice"
    MULTI_SLICE = "multi_slice"
    FLOW = "flow"  # Paired flow-encoded acquisitions


class ImageKind(Enum):
    """Kinds of images written by the datasink."""

    MAGNITUDE = "magnitude"
    PHASE_DIFFERENCE = "phase_difference"


class ReportFormat(Enum):
    """Output format of the run summary."""

    JSON = "json"
    TEXT = "text"


class AutotuneMode(Enum):
    """How the autotuning database is used for a run."""

    SELECT = "select"
    LEARN = "learn"


def configure_logging(verbose: bool = False) -> None:
    """
    Install the bracketed stderr log format used by every component.

    Lines look like ``[rtnlinv.nlinv] Newton step 2: alpha=0.25 cg=7``.
    RTNLINV_DEBUG=1 selects DEBUG, ``verbose`` selects INFO, otherwise WARNING.

    Args:
        verbose: Show INFO messages such as the scheduler audit log
    """
    level = logging.DEBUG if DEBUG else (logging.INFO if verbose else logging.WARNING)
    root = logging.getLogger("rtnlinv")
    root.setLevel(level)
    if not any(getattr(h, "_rtnlinv", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("[%(name)s] %(message)s"))
        handler._rtnlinv = True  # type: ignore[attr-defined]
        root.addHandler(handler)


def load_config_sections(path: Union[str, Path]) -> Dict[str, Dict[str, str]]:
    """
    Read a plain-text key=value configuration file.

    Sections such as ``[trajectory]``, ``[phantom]``, ``[motion]``, ``[coils]``
    and ``[plan]`` are returned as plain dictionaries of strings; interpretation
    is left to the module that owns the section.

    Args:
        path: Path to the configuration file

    Returns:
        Mapping of section name to key/value pairs
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return {name: dict(parser.items(name)) for name in parser.sections()}


@dataclass
class RunConfig:
    """Configuration for one CLI run."""

    subcommand: str = "reconstruct"

    # Paths
    input_path: Optional[Path] = None
    output_path: Optional[Path] = None
    config_path: Optional[Path] = None
    fft_table_path: Optional[Path] = None
    tune_db_path: Path = Path("tune.tsv")
    psf_cache_path: Optional[Path] = None

    # Synthetic acquisition (phantom subcommand); None keeps the config file value
    frames: int = 30
    spokes: Optional[int] = None
    turns: Optional[int] = None
    channels: Optional[int] = None
    slices: int = 1
    mode: ImagingMode = ImagingMode.SINGLE_SLICE
    noise: Optional[float] = None

    # Plan overrides (None keeps the plan default)
    image_size: Optional[int] = None
    gamma_min: float = 1.4
    gamma: Optional[float] = None
    newton_steps: Optional[int] = None
    alpha0: Optional[float] = None
    alpha_reduction: Optional[float] = None
    cg_tol: Optional[float] = None
    virtual_channels: Optional[int] = None

    # Parallelisation: explicit (T, A) or autotune, never both
    threads: Optional[int] = None
    workers: Optional[int] = None
    autotune: Optional[AutotuneMode] = None
    total_workers: int = 8

    # Pipeline
    queue_capacity: int = 4
    median_filter: bool = False

    seed: int = 0
    report: ReportFormat = ReportFormat.TEXT
    baseline_ms: Optional[float] = None

    extra: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.autotune is not None and (self.threads is not None or self.workers is not None):
            raise UsageError("--threads/--workers cannot be combined with --autotune")
        for name in ("threads", "workers"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise UsageError(f"--{name} must be >= 1")
        if self.queue_capacity < 1:
            raise UsageError("--queue-capacity must be >= 1")
        if self.gamma is not None and self.gamma < 1.4:
            raise ConfigurationError("gamma must be >= 1.4")
        if self.total_workers < 1:
            raise UsageError("--total-workers must be >= 1")
        if self.frames < 1 or self.slices < 1:
            raise UsageError("--frames and --slices must be >= 1")
        if self.mode is not ImagingMode.MULTI_SLICE and self.slices != 1:
            raise UsageError(f"--slices needs --mode multi_slice, got {self.mode.value}")
        if self.mode is ImagingMode.FLOW and self.frames % 2:
            raise UsageError("flow mode needs an even --frames")

    @property
    def parallelism(self) -> tuple:
        """(T, A) as configured, defaulting unset values to 1."""
        return (self.threads or 1, self.workers or 1)
