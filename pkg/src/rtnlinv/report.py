"""Run reports and performance/quality metrics."""

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .pipeline import PipelineSummary


def speedup(t_old: float, t_new: float) -> float:
    """S = t_old / t_new."""
    if t_old <= 0 or t_new <= 0:
        raise ConfigurationError(f"runtimes must be > 0, got {t_old} and {t_new}")
    return t_old / t_new


def efficiency(s: float, p: int) -> float:
    """Parallel efficiency E = S_p / p for p processing units."""
    if p < 1:
        raise ConfigurationError(f"need p >= 1, got {p}")
    return s / p


def nrmse(
    image: np.ndarray, reference: np.ndarray, mask: Optional[np.ndarray] = None
) -> float:
    """
    Root-mean-square error of ``|image|`` against ``|reference|``, relative to
    the reference RMS, after the real least-squares scale that best matches
    the two.

    Args:
        image: Reconstructed image
        reference: Ground truth of the same shape
        mask: Optional boolean region the error is evaluated on

    Returns:
        NRMSE as a fraction (0.05 is 5%)
    """
    if image.shape != reference.shape:
        raise ContractViolation(f"image {image.shape} and reference {reference.shape} differ")
    a = np.abs(image).astype(np.float64)
    b = np.abs(reference).astype(np.float64)
    if mask is not None:
        a, b = a[mask], b[mask]
    denom = float(np.sum(a * a))
    scale = float(np.sum(a * b)) / denom if denom > 0 else 0.0
    ref_norm = float(np.linalg.norm(b))
    if ref_norm == 0:
        raise ContractViolation("reference image is zero on the evaluated region")
    return float(np.linalg.norm(scale * a - b)) / ref_norm


def interior_mask(size: int, fraction: float = 0.8) -> np.ndarray:
    """Disc of radius ``fraction * size / 2`` around the image centre."""
    y, x = np.mgrid[:size, :size] - size // 2
    return np.hypot(x, y) <= fraction * size / 2


@dataclass
class PerfReport:
    """Summary of one reconstruct run."""

    frames: int
    images: int
    fps: float
    seconds: float
    latency_ms: float
    threads: int
    workers: int
    stage_ms: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    fft_counts: Dict[str, int] = field(default_factory=dict)
    cg_iterations: int = 0
    runtime_ms: Optional[float] = None
    speedup: Optional[float] = None
    efficiency: Optional[float] = None
    prologue_ticks: int = 4
    epilogue_ticks: int = 4
    audit: List[str] = field(default_factory=list)

    @classmethod
    def from_summary(
        cls,
        summary: PipelineSummary,
        threads: int,
        workers: int,
        runtime_ms: Optional[float] = None,
        baseline_ms: Optional[float] = None,
    ) -> "PerfReport":
        report = cls(
            frames=summary.frames,
            images=summary.images,
            fps=summary.fps,
            seconds=summary.seconds,
            latency_ms=summary.latency_ms,
            threads=threads,
            workers=workers,
            stage_ms=dict(summary.stage_ms),
            fft_counts=dict(summary.fft_counts),
            cg_iterations=summary.cg_iterations,
            runtime_ms=runtime_ms,
            prologue_ticks=summary.prologue_ticks,
            epilogue_ticks=summary.epilogue_ticks,
            audit=list(summary.audit),
        )
        if baseline_ms is not None and runtime_ms:
            report.speedup = speedup(baseline_ms, runtime_ms)
            report.efficiency = efficiency(report.speedup, threads * workers)
        return report

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"frames: {self.frames} ({self.images} images)",
            f"fps: {self.fps:.2f}",
            f"latency_ms: {self.latency_ms:.2f}",
            f"threads x workers: {self.threads} x {self.workers}",
            f"prologue/epilogue ticks: {self.prologue_ticks}/{self.epilogue_ticks}",
        ]
        if self.runtime_ms is not None:
            lines.append(f"runtime_ms per frame: {self.runtime_ms:.2f}")
        if self.speedup is not None and self.efficiency is not None:
            lines.append(f"speedup: {self.speedup:.2f}, efficiency: {self.efficiency:.2f}")
        for stage, (mean, worst) in self.stage_ms.items():
            lines.append(f"{stage}: mean {mean:.2f} ms, max {worst:.2f} ms")
        if self.fft_counts:
            counts = ", ".join(f"{k}={v}" for k, v in sorted(self.fft_counts.items()))
            lines.append(f"ffts: {counts}")
        lines.append(f"cg iterations: {self.cg_iterations}")
        return "\n".join(lines)
