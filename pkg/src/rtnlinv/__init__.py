"""
rtnlinv - parallel nonlinear inverse reconstruction for real-time radial MRI.

This package reconstructs undersampled radial k-space series into images by
jointly estimating the image and the coil sensitivities, with grid-size
planning, channel and temporal decomposition over compute workers, a
five-stage streaming pipeline and an autotuning database.
"""

from .config import AutotuneMode, ImageKind, ImagingMode, ReportFormat, RunConfig
from .errors import (
    ConfigurationError,
    ContractViolation,
    DataError,
    DecompositionFault,
    PipelineFailure,
    RtnlinvError,
    SolverDivergenceError,
)
from .seqsim import KSpaceFrame, PhantomSpec, TrajectorySpec, simulate_frame
from .ingest import DatasetHeader, ImageOut, ImageWriter, KSpaceReader, KSpaceWriter
from .planner import FftLookupTable, ReconPlan, select_grid
from .preproc import Preprocessor, PsfCache
from .nlinv import Estimate, reconstruct_frame
from .decomp import (
    TemporalSchedule,
    TemporalScheduler,
    WorkerGroup,
    all_reduce_sum,
    schedule_frames,
)
from .pipeline import Pipeline, PipelineModel, postprocess, run_pipeline
from .autotune import ProtocolKey, TuningDatabase, learn_step, legal_configs, select
from .report import PerfReport, efficiency, nrmse, speedup

__version__ = "0.1.0"
__all__ = [
    "AutotuneMode",
    "ImageKind",
    "ImagingMode",
    "ReportFormat",
    "RunConfig",
    "ConfigurationError",
    "ContractViolation",
    "DataError",
    "DecompositionFault",
    "PipelineFailure",
    "RtnlinvError",
    "SolverDivergenceError",
    "KSpaceFrame",
    "PhantomSpec",
    "TrajectorySpec",
    "simulate_frame",
    "DatasetHeader",
    "ImageOut",
    "ImageWriter",
    "KSpaceReader",
    "KSpaceWriter",
    "FftLookupTable",
    "ReconPlan",
    "select_grid",
    "Preprocessor",
    "PsfCache",
    "Estimate",
    "reconstruct_frame",
    "TemporalSchedule",
    "TemporalScheduler",
    "WorkerGroup",
    "all_reduce_sum",
    "schedule_frames",
    "Pipeline",
    "PipelineModel",
    "postprocess",
    "run_pipeline",
    "ProtocolKey",
    "TuningDatabase",
    "learn_step",
    "legal_configs",
    "select",
    "PerfReport",
    "efficiency",
    "nrmse",
    "speedup",
]
