"""Computational-cost reduction: FFT benchmarking, grid-size selection, crop/pad."""

import logging
import math
import platform
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import scipy
import scipy.fft

from .errors import ConfigurationError, ContractViolation
from .fftops import center_slice

logger = logging.getLogger(__name__)

GAMMA_MIN = 1.4
GAMMA_MAX = 2.0
MEMORY_BUDGET_BYTES = 1 << 30


def machine_key() -> str:
    """Identify the host a lookup table was measured on."""
    return f"{platform.node()}/{platform.machine()}/{platform.processor() or 'cpu'}"


def library_key() -> str:
    """Identify the FFT implementation a lookup table was measured with."""
    return f"scipy-{scipy.__version__}/numpy-{np.__version__}"


@dataclass
class FftLookupTable:
    """Measured 2D FFT runtime (microseconds) per grid side length."""

    entries: Dict[int, float]
    machine_key: str = field(default_factory=machine_key)
    library_key: str = field(default_factory=library_key)

    def __post_init__(self) -> None:
        if not self.entries:
            raise ConfigurationError("FFT lookup table is empty")
        sizes = sorted(self.entries)
        if sizes != list(range(sizes[0], sizes[-1] + 1)):
            raise ConfigurationError("FFT lookup table sizes are not contiguous")
        bad = [s for s, t in self.entries.items() if not (t > 0 and math.isfinite(t))]
        if bad:
            raise ConfigurationError(f"non-positive runtimes for sizes {bad[:5]}")

    @property
    def lo(self) -> int:
        return min(self.entries)

    @property
    def hi(self) -> int:
        return max(self.entries)

    def covers(self, lo: int, hi: int) -> bool:
        return self.lo <= lo and hi <= self.hi

    def matches_host(self) -> bool:
        """True when the table was measured on this machine with this library."""
        return self.machine_key == machine_key() and self.library_key == library_key()

    def save(self, path: Union[str, Path]) -> None:
        """Write ``size<TAB>microseconds`` lines after two comment lines of keys."""
        lines = [f"# machine={self.machine_key}", f"# library={self.library_key}"]
        lines += [f"{size}\t{self.entries[size]!r}" for size in sorted(self.entries)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FftLookupTable":
        keys = {"machine": "", "library": ""}
        entries: Dict[int, float] = {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read FFT table {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key in keys:
                    keys[key] = value
                continue
            try:
                size, micros = line.split("\t")
                entries[int(size)] = float(micros)
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: malformed line {line!r}") from exc
        return cls(entries, machine_key=keys["machine"], library_key=keys["library"])


def benchmark_fft(
    lo: int, hi: int, trials: int = 5, memory_budget: int = MEMORY_BUDGET_BYTES
) -> FftLookupTable:
    """
    Measure a single-precision complex 2D FFT for every side length in [lo, hi].

    Each entry is the minimum wall-clock time over ``trials`` runs.

    Args:
        lo: Smallest side length
        hi: Largest side length (inclusive)
        trials: Number of timed runs per size
        memory_budget: Upper bound in bytes for one input+output pair

    Returns:
        Lookup table for this host and library
    """
    if lo < 1 or hi < lo or trials < 1:
        raise ConfigurationError(f"invalid benchmark range [{lo}, {hi}] x {trials}")
    if 2 * hi * hi * np.dtype(np.complex64).itemsize > memory_budget:
        raise ConfigurationError(f"size {hi} exceeds the memory budget of {memory_budget} bytes")

    tick = time.get_clock_info("perf_counter").resolution
    rng = np.random.default_rng(0)
    entries: Dict[int, float] = {}
    coarse = []
    for size in range(lo, hi + 1):
        x = (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))).astype(
            np.complex64
        )
        scipy.fft.fft2(x)  # warm-up
        best = math.inf
        for _ in range(trials):
            start = time.perf_counter()
            scipy.fft.fft2(x)
            best = min(best, time.perf_counter() - start)
        best = max(best, tick)
        if best < 10 * tick:
            coarse.append(size)
        entries[size] = best * 1e6
        logger.debug(f"FFT {size}x{size}: {entries[size]:.1f} us")
    if coarse:
        warnings.warn(
            f"timer resolution too coarse for {len(coarse)} sizes (first {coarse[0]})",
            RuntimeWarning,
        )
    return FftLookupTable(entries)


def load_or_benchmark(
    path: Union[str, Path], lo: int, hi: int, trials: int = 5
) -> FftLookupTable:
    """Load a persisted table, regenerating it for another host, library or range."""
    path = Path(path)
    if path.exists():
        table = FftLookupTable.load(path)
        if table.matches_host() and table.covers(lo, hi):
            return table
        logger.info(f"regenerating FFT table {path}: host, library or range changed")
    table = benchmark_fft(lo, hi, trials)
    table.save(path)
    return table


def grid_interval(N: int, gamma_min: float = GAMMA_MIN, gamma_max: float = GAMMA_MAX) -> Tuple[int, int]:
    """Inclusive range of grid sides allowed for image side N."""
    lo = math.ceil(2 * gamma_min * N - 1e-9)
    hi = math.floor(2 * gamma_max * N + 1e-9)
    return lo, hi


def select_grid(
    N: int,
    table: FftLookupTable,
    gamma_min: float = GAMMA_MIN,
    gamma_max: float = GAMMA_MAX,
) -> Tuple[int, float]:
    """
    Choose the fastest even grid side for image side N.

    Args:
        N: Image side length in pixels
        table: Measured FFT runtimes
        gamma_min: Smallest allowed oversampling ratio
        gamma_max: Largest allowed oversampling ratio

    Returns:
        (G, gamma) with G the argmin runtime (ties to the smallest G), gamma = G / 2N
    """
    lo, hi = grid_interval(N, gamma_min, gamma_max)
    candidates = [g for g in range(lo, hi + 1) if g % 2 == 0]
    if not candidates:
        raise ConfigurationError(f"no even grid size in [{lo}, {hi}] for N={N}")
    if not table.covers(candidates[0], candidates[-1]):
        raise ConfigurationError(
            f"FFT table [{table.lo}, {table.hi}] does not cover [{candidates[0]}, {candidates[-1]}]"
        )
    G = min(candidates, key=lambda g: table.entries[g])
    gamma = G / (2 * N)
    logger.debug(f"select_grid N={N}: G={G} gamma={gamma:.5f}")
    return G, gamma


def crop_k(x: np.ndarray, G_c: int) -> np.ndarray:
    """Keep the centred G_c x G_c k-space block of the last two axes."""
    G = x.shape[-1]
    if G_c > G:
        raise ContractViolation(f"cannot crop {G} to {G_c}")
    sl = center_slice(G, G_c)
    return x[..., sl, sl].copy()


def pad_k(x: np.ndarray, G: int) -> np.ndarray:
    """Embed a centred k-space block into a zero G x G grid (inverse of crop_k)."""
    G_c = x.shape[-1]
    if G_c > G:
        raise ContractViolation(f"cannot pad {G_c} to {G}")
    out = np.zeros(x.shape[:-2] + (G, G), dtype=x.dtype)
    sl = center_slice(G, G_c)
    out[..., sl, sl] = x
    return out


@dataclass(frozen=True)
class ReconPlan:
    """Grid sizes and solver parameters for one reconstruction."""

    image_size: int
    grid_size: int
    coil_grid: Optional[int] = None
    newton_steps: int = 6
    alpha0: float = 1.0
    alpha_reduction: float = 0.5
    alpha_min: float = 1e-6
    cg_tol: float = 1e-3
    cg_max_iter: int = 200
    damping: float = 1.0
    weight_a: float = 880.0
    weight_b: float = 16.0
    data_scale: float = 100.0
    gradient_delay: float = 0.0

    def __post_init__(self) -> None:
        N, G = self.image_size, self.grid_size
        if N < 1:
            raise ConfigurationError("image size must be >= 1")
        if G % 2:
            raise ConfigurationError(f"grid size {G} must be even")
        if G / (2 * N) < GAMMA_MIN - 1 / (2 * N):
            raise ConfigurationError(f"grid size {G} gives gamma below {GAMMA_MIN} for N={N}")
        if self.coil_grid is None:
            object.__setattr__(self, "coil_grid", G // 4)
        if not 1 <= self.coil_grid <= G:  # type: ignore[operator]
            raise ConfigurationError(f"coil grid {self.coil_grid} outside [1, {G}]")
        if self.newton_steps < 1:
            raise ConfigurationError("at least one Newton step is required")
        if not self.alpha0 > self.alpha_min > 0:
            raise ConfigurationError("need alpha0 > alpha_min > 0")
        if not 0 < self.alpha_reduction < 1:
            raise ConfigurationError("alpha reduction must lie in (0, 1)")
        if self.cg_tol < 0 or self.cg_max_iter < 0:
            raise ConfigurationError("cg_tol and cg_max_iter must be non-negative")
        if not 0 < self.damping <= 1:
            raise ConfigurationError("damping must lie in (0, 1]")
        if self.data_scale <= 0:
            raise ConfigurationError("data scale must be positive")

    @property
    def gamma(self) -> float:
        return self.grid_size / (2 * self.image_size)

    @property
    def fov_size(self) -> int:
        """Side of the centred field-of-view mask on the oversampled grid."""
        return self.grid_size // 2

    def alpha(self, m: int) -> float:
        """Regularisation weight of Newton step m."""
        return max(self.alpha0 * self.alpha_reduction**m, self.alpha_min)

    @classmethod
    def from_gamma(cls, N: int, gamma: float = 1.5, **solver) -> "ReconPlan":
        """Plan with a fixed oversampling ratio; G rounded up to even."""
        G = int(round(2 * gamma * N))
        G += G % 2
        return cls(image_size=N, grid_size=G, **solver)

    @classmethod
    def from_table(
        cls,
        N: int,
        table: FftLookupTable,
        gamma_min: float = GAMMA_MIN,
        gamma_max: float = GAMMA_MAX,
        **solver,
    ) -> "ReconPlan":
        """Plan with the grid size chosen from an FFT lookup table."""
        G, _ = select_grid(N, table, gamma_min, gamma_max)
        return cls(image_size=N, grid_size=G, **solver)
