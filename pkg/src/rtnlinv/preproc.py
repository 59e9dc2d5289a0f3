"""
Preprocessing stage: channel compression, gridding and point-spread kernels.

Gridding spreads radial samples onto the G x G oversampled Cartesian grid with
a Kaiser-Bessel kernel and radial density compensation, then transforms to the
image domain and divides by the kernel's Fourier transform. The field of view
is the centred G/2 x G/2 block of that grid.

The point-spread kernel P realises the normal operator of the sampling as
masked inverse FFT after a pointwise product with P after a forward FFT. P is
computed by exact direct summation of the weighted sample set, which is
separable over the two axes.
"""

import hashlib
import logging
import math
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse
from scipy.special import i0

from .errors import ContractViolation, NonFiniteDataError
from .fftops import cfft2, center_slice, cifft2
from .planner import ReconPlan
from .seqsim import KSpaceFrame, spoke_coordinates

logger = logging.getLogger(__name__)

KB_WIDTH = 4
KB_OVERSAMPLING = 2.0
# standard beta for this kernel width at twofold oversampling
KB_BETA = math.pi * math.sqrt((KB_WIDTH / KB_OVERSAMPLING) ** 2 * (KB_OVERSAMPLING - 0.5) ** 2 - 0.8)
COORD_EPS = 1e-9


@dataclass
class CompressionMatrix:
    """Projection of physical onto virtual channels, rows orthonormal."""

    matrix: np.ndarray
    energy_fraction: float = 1.0

    @property
    def virtual_channels(self) -> int:
        return self.matrix.shape[0]

    @property
    def physical_channels(self) -> int:
        return self.matrix.shape[1]

    def apply(self, frame: KSpaceFrame) -> KSpaceFrame:
        if frame.channels != self.physical_channels:
            raise ContractViolation(
                f"frame has {frame.channels} channels, compression expects {self.physical_channels}"
            )
        J, K, S = frame.samples.shape
        mixed = self.matrix @ frame.samples.reshape(J, K * S)
        samples = mixed.reshape(self.virtual_channels, K, S).astype(np.complex64)
        return KSpaceFrame(frame.frame_index, frame.slice_id, samples, frame.spoke_angles)


def calibrate_compression(frames: Sequence[KSpaceFrame], virtual_channels: int) -> CompressionMatrix:
    """
    Principal-component channel compression from calibration frames.

    Args:
        frames: First L frames of the series (L >= 1)
        virtual_channels: Number of virtual channels to keep

    Returns:
        Compression matrix [J_virtual, J_physical] with the retained energy fraction
    """
    if not frames:
        raise ContractViolation("calibration needs at least one frame")
    physical = frames[0].channels
    if not 1 <= virtual_channels <= physical:
        raise ContractViolation(f"cannot compress {physical} channels to {virtual_channels}")
    stacked = np.concatenate(
        [f.samples.reshape(physical, -1).astype(np.complex128) for f in frames], axis=1
    )
    u, s, _ = np.linalg.svd(stacked, full_matrices=False)
    energy = s**2
    total = float(energy.sum())
    matrix = u[:, :virtual_channels].conj().T.copy()
    rank = int(np.sum(s > s[0] * 1e-6)) if total > 0 else 0
    if rank < virtual_channels:
        warnings.warn(
            f"sample matrix rank {rank} below {virtual_channels} virtual channels; "
            "padding the basis with zeros",
            RuntimeWarning,
        )
        matrix[rank:] = 0
    fraction = float(energy[:virtual_channels].sum() / total) if total > 0 else 1.0
    logger.debug(f"compression {physical}->{virtual_channels}: energy {fraction:.6f}")
    return CompressionMatrix(matrix.astype(np.complex64), fraction)


def kb_kernel(t: np.ndarray, width: int = KB_WIDTH, beta: float = KB_BETA) -> np.ndarray:
    """Kaiser-Bessel window over grid-cell offsets ``t``."""
    t = np.asarray(t, dtype=np.float64)
    inside = np.abs(t) < width / 2
    arg = np.sqrt(np.clip(1 - (2 * t / width) ** 2, 0.0, None))
    return np.where(inside, i0(beta * arg), 0.0)


def kb_transform(f: np.ndarray, width: int = KB_WIDTH, beta: float = KB_BETA) -> np.ndarray:
    """Continuous Fourier transform of kb_kernel at frequency ``f`` (cycles per cell)."""
    a = np.sqrt(beta**2 - (math.pi * width * np.asarray(f, dtype=np.float64)) ** 2 + 0j)
    safe = np.where(np.abs(a) > 1e-12, a, 1.0)
    return np.real(np.where(np.abs(a) > 1e-12, width * np.sinh(safe) / safe, width))


def density_weights(samples_per_spoke: int, spokes: int, delay: float = 0.0) -> np.ndarray:
    """
    Ramp density compensation for one spoke, with a plateau at the centre.

    The first sample (at -kmax) has no partner at +kmax and gets weight 0,
    which keeps every spoke symmetric about the origin.
    """
    dk = 1.0 / samples_per_spoke
    kr = (np.arange(samples_per_spoke) - samples_per_spoke // 2 + delay) * dk
    w = np.maximum(np.abs(kr), dk / 4) * dk * math.pi / spokes
    w[0] = 0.0
    return w


def fov_mask(G: int) -> np.ndarray:
    """Boolean field-of-view mask: the centred G/2 block."""
    mask = np.zeros((G, G), dtype=bool)
    sl = center_slice(G, G // 2)
    mask[sl, sl] = True
    return mask


def _check_coordinates(kx: np.ndarray, ky: np.ndarray) -> None:
    if not (np.all(np.isfinite(kx)) and np.all(np.isfinite(ky))):
        raise NonFiniteDataError("non-finite sample coordinates")
    worst = max(float(np.max(np.abs(kx))), float(np.max(np.abs(ky))))
    if worst > 0.5 + COORD_EPS:
        raise ContractViolation(f"sample coordinate {worst:.6f} outside [-0.5, 0.5]")


class Gridder:
    """
    Kaiser-Bessel interpolation between sample positions and the G x G grid.

    Args:
        G: Grid side
        kx: Sample x coordinates in cycles per pixel, any shape
        ky: Sample y coordinates, same shape
        weights: Density compensation per sample, same shape
    """

    def __init__(self, G: int, kx: np.ndarray, ky: np.ndarray, weights: np.ndarray):
        kx = np.ravel(kx)
        ky = np.ravel(ky)
        _check_coordinates(kx, ky)
        self.G = G
        self.weights = np.ravel(weights).astype(np.float64)
        self.mask = fov_mask(G)
        self.matrix = self._interpolation_matrix(kx, ky)
        freq = (np.arange(G) - G // 2) / G
        roll = kb_transform(freq)
        self.deapodization = np.outer(roll, roll)

    def _interpolation_matrix(self, kx: np.ndarray, ky: np.ndarray) -> scipy.sparse.csr_matrix:
        G = self.G
        offsets = np.arange(-1, KB_WIDTH - 1)
        ux = G * kx + G // 2
        uy = G * ky + G // 2
        ix = np.floor(ux)[:, None] + offsets
        iy = np.floor(uy)[:, None] + offsets
        wx = kb_kernel(ux[:, None] - ix)
        wy = kb_kernel(uy[:, None] - iy)
        ix = ix.astype(np.int64) % G
        iy = iy.astype(np.int64) % G
        rows = np.repeat(np.arange(kx.size), KB_WIDTH * KB_WIDTH)
        cols = (iy[:, :, None] * G + ix[:, None, :]).ravel()
        vals = (wy[:, :, None] * wx[:, None, :]).ravel()
        return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(kx.size, G * G))

    def spread(self, samples: np.ndarray, weighted: bool = True) -> np.ndarray:
        """Interpolate samples onto the k-space grid (no transform)."""
        y = np.ravel(samples).astype(np.complex128)
        if weighted:
            y = y * self.weights
        return (self.matrix.T @ y).reshape(self.G, self.G)

    def adjoint(self, samples: np.ndarray, weighted: bool = True) -> np.ndarray:
        """Image-domain adjoint of the sampling, restricted to the field of view."""
        grid = self.spread(samples, weighted)
        image = self.G**2 * cifft2(grid, tag="grid") / self.deapodization
        return np.where(self.mask, image, 0).astype(np.complex64)

    def forward(self, image: np.ndarray, weighted: bool = False) -> np.ndarray:
        """Sample the field-of-view image at the trajectory; adjoint of ``adjoint``."""
        x = np.where(self.mask, image, 0) / self.deapodization
        y = self.matrix @ cfft2(x.astype(np.complex128), tag="grid").ravel()
        if weighted:
            y = y * self.weights
        return y


@dataclass
class PsfKernel:
    """Real Fourier-domain convolution kernel P on the G x G grid."""

    P: np.ndarray
    G: int

    def __post_init__(self) -> None:
        if self.P.shape != (self.G, self.G):
            raise ContractViolation(f"kernel shape {self.P.shape} != ({self.G}, {self.G})")
        if not np.all(np.isfinite(self.P)):
            raise NonFiniteDataError("non-finite point-spread kernel")
        self.mask = fov_mask(self.G)

    def apply(self, x: np.ndarray, tag: str = "normal") -> np.ndarray:
        """Masked convolution with the point-spread function, per channel."""
        masked = np.where(self.mask, x, 0)
        out = cifft2(self.P * cfft2(masked, tag=tag), tag=tag)
        return np.where(self.mask, out, 0).astype(x.dtype, copy=False)


def psf_from_samples(kx: np.ndarray, ky: np.ndarray, weights: np.ndarray, G: int) -> PsfKernel:
    """
    Exact point-spread kernel of a weighted sample set.

    psf(d) = sum_s w_s exp(2 pi i k_s . d) for offsets d in [-G/2, G/2), with the
    unpaired offset -G/2 zeroed; P is its centred DFT.
    """
    kx = np.ravel(kx).astype(np.float64)
    ky = np.ravel(ky).astype(np.float64)
    w = np.ravel(weights).astype(np.float64)
    d = np.arange(G) - G // 2
    ex = np.exp(2j * np.pi * np.outer(kx, d))
    ey = np.exp(2j * np.pi * np.outer(ky, d))
    psf = (ey * w[:, None]).T @ ex
    psf[0, :] = 0
    psf[:, 0] = 0
    P = cfft2(psf, tag="psf")
    return PsfKernel(np.real(P).astype(np.float32), G)


def build_psf(angles: np.ndarray, samples_per_spoke: int, plan: ReconPlan) -> PsfKernel:
    """Point-spread kernel of one frame's radial trajectory."""
    if plan.grid_size < 2 * plan.image_size:
        raise ContractViolation(f"grid {plan.grid_size} below twofold oversampling of {plan.image_size}")
    kx, ky = spoke_coordinates(angles, samples_per_spoke, plan.gradient_delay)
    _check_coordinates(kx, ky)
    w = np.broadcast_to(
        density_weights(samples_per_spoke, len(angles), plan.gradient_delay), kx.shape
    )
    return psf_from_samples(kx, ky, w, plan.grid_size)


def trajectory_key(angles: np.ndarray, samples_per_spoke: int, G: int, delay: float) -> str:
    digest = hashlib.sha1(np.round(np.asarray(angles, dtype=np.float64), 12).tobytes()).hexdigest()
    return f"{digest[:16]}_{G}_{samples_per_spoke}_{delay!r}"


class PsfCache:
    """Kernels and gridders per angle set; read-shared once built."""

    def __init__(self) -> None:
        self._kernels: Dict[str, PsfKernel] = {}
        self._gridders: Dict[str, Gridder] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._kernels)

    def kernel(self, angles: np.ndarray, samples_per_spoke: int, plan: ReconPlan) -> PsfKernel:
        key = trajectory_key(angles, samples_per_spoke, plan.grid_size, plan.gradient_delay)
        with self._lock:
            cached = self._kernels.get(key)
            if cached is not None:
                self.hits += 1
                return cached
            self.misses += 1
        kernel = build_psf(angles, samples_per_spoke, plan)
        logger.debug(f"PSF cache miss {key}")
        with self._lock:
            return self._kernels.setdefault(key, kernel)

    def gridder(self, angles: np.ndarray, samples_per_spoke: int, plan: ReconPlan) -> Gridder:
        key = trajectory_key(angles, samples_per_spoke, plan.grid_size, plan.gradient_delay)
        with self._lock:
            cached = self._gridders.get(key)
        if cached is not None:
            return cached
        kx, ky = spoke_coordinates(angles, samples_per_spoke, plan.gradient_delay)
        w = np.broadcast_to(
            density_weights(samples_per_spoke, len(angles), plan.gradient_delay), kx.shape
        )
        gridder = Gridder(plan.grid_size, kx, ky, w)
        with self._lock:
            return self._gridders.setdefault(key, gridder)

    def save(self, path: Union[str, Path]) -> None:
        with self._lock:
            arrays = {key: k.P for key, k in self._kernels.items()}
        # through a handle, so numpy does not append .npz to other suffixes
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    def load(self, path: Union[str, Path]) -> int:
        """Merge kernels from an ``.npz`` sidecar; returns the number loaded."""
        with np.load(path) as data:
            loaded = {key: PsfKernel(data[key].astype(np.float32), data[key].shape[0]) for key in data.files}
        with self._lock:
            self._kernels.update(loaded)
        return len(loaded)


@dataclass
class GriddedData:
    """Per-channel adjoint of one frame, [J, G, G] complex64."""

    z: np.ndarray
    frame_index: int
    slice_id: int

    @property
    def channels(self) -> int:
        return self.z.shape[0]


def grid_adjoint(frame: KSpaceFrame, plan: ReconPlan, cache: Optional[PsfCache] = None) -> GriddedData:
    """Grid every channel of ``frame`` onto the plan's G x G grid."""
    gridder = (cache or PsfCache()).gridder(frame.spoke_angles, frame.samples_per_spoke, plan)
    z = np.stack([gridder.adjoint(frame.samples[j]) for j in range(frame.channels)])
    return GriddedData(z, frame.frame_index, frame.slice_id)


@dataclass
class PreprocessedFrame:
    data: GriddedData
    psf: PsfKernel


class Preprocessor:
    """Compression, gridding and kernel lookup for a stream of frames."""

    def __init__(
        self,
        plan: ReconPlan,
        compression: Optional[CompressionMatrix] = None,
        cache: Optional[PsfCache] = None,
    ):
        self.plan = plan
        self.compression = compression
        self.cache = cache or PsfCache()

    def calibrate(self, frames: List[KSpaceFrame], virtual_channels: int) -> CompressionMatrix:
        self.compression = calibrate_compression(frames, virtual_channels)
        return self.compression

    def process(self, frame: KSpaceFrame) -> PreprocessedFrame:
        if self.compression is not None:
            frame = self.compression.apply(frame)
        data = grid_adjoint(frame, self.plan, self.cache)
        psf = self.cache.kernel(frame.spoke_angles, frame.samples_per_spoke, self.plan)
        return PreprocessedFrame(data, psf)
