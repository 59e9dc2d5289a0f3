"""
Synthetic radial acquisitions for testing and benchmarking.

Coordinates: image positions are in pixels with the origin at index size//2,
k-space positions in cycles per pixel, so the readout spans [-0.5, 0.5).
Phantom geometry is given in fractions of the field of view and scaled by the
image side length when evaluated.

The object spectrum is the analytic Fourier transform of a sum of ellipses.
Coil profiles are truncated 2D Fourier series with period 2N, so the spectrum
of (object x coil) is an exact finite sum of shifted object spectra.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import j1

from .config import ImagingMode
from .errors import ConfigurationError, ContractViolation, NonFiniteDataError
from .fftops import cfft2, cifft2, crop_center

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajectorySpec:
    """Interleaved radial sampling: ``spokes`` per frame, ``turns`` angle sets."""

    spokes: int
    turns: int
    samples_per_spoke: int
    base_angle: float = 0.0

    def __post_init__(self) -> None:
        if self.spokes < 1 or self.turns < 1:
            raise ConfigurationError("spokes and turns must be >= 1")
        if self.samples_per_spoke < 2 or self.samples_per_spoke % 2:
            raise ConfigurationError("samples per spoke must be even and >= 2")
        if not math.isfinite(self.base_angle):
            raise ConfigurationError("base angle must be finite")

    @property
    def spoke_spacing(self) -> float:
        """Angle between spokes of one frame."""
        return 2 * math.pi / self.spokes

    @property
    def turn_increment(self) -> float:
        """Angle offset between successive turns."""
        return 2 * math.pi / (self.spokes * self.turns)

    @classmethod
    def for_image(cls, N: int, spokes: int = 11, turns: int = 5, base_angle: float = 0.0):
        return cls(spokes, turns, 2 * N, base_angle)


def spoke_angle(spec: TrajectorySpec, n: int, k: int) -> float:
    """Angle of spoke ``k`` in frame ``n``, reduced to [0, 2*pi)."""
    if not 0 <= k < spec.spokes:
        raise ContractViolation(f"spoke {k} outside [0, {spec.spokes})")
    angle = k * spec.spoke_spacing + (n % spec.turns) * spec.turn_increment + spec.base_angle
    return angle % (2 * math.pi)


def frame_angles(spec: TrajectorySpec, n: int) -> np.ndarray:
    return np.array([spoke_angle(spec, n, k) for k in range(spec.spokes)])


def readout_positions(samples_per_spoke: int, delay: float = 0.0) -> np.ndarray:
    """Radial positions of one spoke, shifted by ``delay`` samples."""
    S = samples_per_spoke
    return (np.arange(S) - S // 2 + delay) / S


def spoke_coordinates(
    angles: np.ndarray, samples_per_spoke: int, delay: float = 0.0
) -> Tuple[np.ndarray, np.ndarray]:
    """(kx, ky) arrays of shape [K, S] for full-diameter spokes at ``angles``."""
    kr = readout_positions(samples_per_spoke, delay)
    angles = np.asarray(angles, dtype=np.float64)
    return np.outer(np.cos(angles), kr), np.outer(np.sin(angles), kr)


def acquisition_turn(n: int, mode: ImagingMode) -> int:
    """Frame index that selects the angle set; flow pairs share one."""
    return n // 2 if mode is ImagingMode.FLOW else n


@dataclass(frozen=True)
class Ellipse:
    center: Tuple[float, float]
    axes: Tuple[float, float]
    angle: float = 0.0
    amplitude: complex = 1.0
    # Phase added on the flow-encoded frame of a pair
    flow_phase: float = 0.0

    def __post_init__(self) -> None:
        values = [*self.center, *self.axes, self.angle, self.flow_phase]
        if not all(math.isfinite(v) for v in values) or not np.isfinite(self.amplitude):
            raise ConfigurationError(f"non-finite ellipse parameters: {self}")
        if min(self.axes) <= 0:
            raise ConfigurationError("ellipse axes must be positive")


@dataclass(frozen=True)
class MotionSpec:
    """Sinusoidal translation of one ellipse."""

    ellipse: int = 0
    amplitude: float = 0.0  # fraction of the field of view
    period: float = 20.0  # frames
    phase: float = 0.0
    direction: float = math.pi / 2

    def displacement(self, n: int) -> Tuple[float, float]:
        params = (self.amplitude, self.period, self.phase, self.direction)
        if not all(math.isfinite(v) for v in params) or self.period == 0:
            raise NonFiniteDataError(f"non-finite motion parameters: {params}")
        shift = self.amplitude * math.sin(2 * math.pi * n / self.period + self.phase)
        return shift * math.cos(self.direction), shift * math.sin(self.direction)


@dataclass(frozen=True)
class CoilModel:
    """
    Receive coils on a ring around the field of view.

    Each profile is a Gaussian window centred on the ring with a constant phase
    per coil and ``order`` cycles of phase ramp along the ring tangent over twice
    the image side, fitted by a Fourier series with ``terms`` harmonics per axis
    over that period. ``kind="uniform"`` gives c == 1.

    Defaults keep the profiles smooth under the solver's coil weighting down
    to N = 16.
    """

    count: int = 4
    kind: str = "ring"
    radius: float = 0.5  # fraction of the field of view
    width: float = 0.8
    order: int = 0
    terms: int = 6

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ConfigurationError("coil count must be >= 1")
        if self.kind not in ("ring", "uniform"):
            raise ConfigurationError(f"unknown coil model {self.kind!r}")
        if self.width <= 0 or self.terms < 0:
            raise ConfigurationError("coil width must be positive and terms >= 0")

    def center(self, j: int, N: int) -> Tuple[float, float]:
        """Coil centre in pixels."""
        theta = 2 * math.pi * j / self.count
        return self.radius * N * math.cos(theta), self.radius * N * math.sin(theta)

    def window(self, j: int, N: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """The continuous profile the Fourier series is fitted to."""
        cx, cy = self.center(j, N)
        theta = 2 * math.pi * j / self.count
        w = self.width * N
        gauss = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / w**2)
        # phase ramp along the ring tangent
        t = (x - cx) * -math.sin(theta) + (y - cy) * math.cos(theta)
        phase = math.pi * j / self.count + 2 * math.pi * self.order * t / (2 * N)
        return gauss * np.exp(1j * phase)


def _default_ellipses() -> Tuple[Ellipse, ...]:
    # Modified Shepp-Logan scaled into 90% of the field of view
    table = [
        (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
        (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
        (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
        (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
        (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
        (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
        (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
        (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
        (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
    ]
    s = 0.45
    return tuple(
        Ellipse((s * x0, s * y0), (s * a, s * b), math.radians(phi), amp)
        for amp, a, b, x0, y0, phi in table
    )


@dataclass(frozen=True)
class PhantomSpec:
    """Dynamic multi-coil ellipse phantom for an N x N field of view."""

    image_size: int
    ellipses: Tuple[Ellipse, ...] = field(default_factory=_default_ellipses)
    motion: MotionSpec = field(default_factory=MotionSpec)
    coils: CoilModel = field(default_factory=CoilModel)
    blur: float = 0.0  # Gaussian sigma in pixels
    noise: float = 0.0  # complex Gaussian standard deviation
    seed: int = 0
    slice_shrink: float = 0.9

    def __post_init__(self) -> None:
        if self.image_size < 1:
            raise ConfigurationError("image size must be >= 1")
        if self.blur < 0 or self.noise < 0:
            raise ConfigurationError("blur and noise must be non-negative")
        if self.ellipses and not 0 <= self.motion.ellipse < len(self.ellipses):
            raise ConfigurationError(f"motion ellipse {self.motion.ellipse} does not exist")

    @property
    def coil_count(self) -> int:
        return self.coils.count

    def coil_coefficients(self) -> np.ndarray:
        """Fourier coefficients [J, 2T+1, 2T+1] of every coil profile."""
        return _coil_coefficients(self.coils, self.image_size)


_COEFF_CACHE: Dict[Tuple[CoilModel, int], np.ndarray] = {}


def _coil_coefficients(coils: CoilModel, N: int) -> np.ndarray:
    key = (coils, N)
    if key not in _COEFF_CACHE:
        # harmonics beyond the period's Nyquist limit would alias
        T = min(coils.terms, N - 1)
        size = 2 * T + 1
        coeffs = np.zeros((coils.count, size, size), dtype=np.complex128)
        if coils.kind == "uniform":
            coeffs[:, T, T] = 1.0
        else:
            P = 2 * N
            pos = np.arange(P) - P // 2
            y, x = np.meshgrid(pos, pos, indexing="ij")
            for j in range(coils.count):
                spectrum = cfft2(coils.window(j, N, x, y), tag="sim") / P**2
                coeffs[j] = crop_center(spectrum, size)
        _COEFF_CACHE[key] = coeffs
    return _COEFF_CACHE[key]


def _harmonics(coeffs: np.ndarray) -> np.ndarray:
    T = coeffs.shape[-1] // 2
    return np.arange(-T, T + 1)


def coil_sensitivity(phantom: PhantomSpec, j: int, pixel: Tuple[float, float]) -> complex:
    """Sensitivity of coil ``j`` at pixel position (x, y)."""
    if not 0 <= j < phantom.coil_count:
        raise ContractViolation(f"coil {j} outside [0, {phantom.coil_count})")
    value = coil_map(phantom, j, np.array([[pixel[0]]]), np.array([[pixel[1]]]))
    return complex(value[0, 0])


def coil_map(phantom: PhantomSpec, j: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate coil ``j`` at pixel positions ``x``, ``y`` (any matching shapes)."""
    coeffs = phantom.coil_coefficients()[j]
    q = _harmonics(coeffs)
    P = 2 * phantom.image_size
    ex = np.exp(2j * np.pi * np.multiply.outer(x, q) / P)
    ey = np.exp(2j * np.pi * np.multiply.outer(y, q) / P)
    return np.einsum("...a,...b,ab->...", ey, ex, coeffs)


def _ellipse_geometry(
    phantom: PhantomSpec, n: int, slice_id: int
) -> Sequence[Tuple[Ellipse, Tuple[float, float], Tuple[float, float]]]:
    """(ellipse, centre px, axes px) after motion and slice scaling."""
    N = phantom.image_size
    scale = phantom.slice_shrink**slice_id
    dx, dy = phantom.motion.displacement(n)
    out = []
    for i, e in enumerate(phantom.ellipses):
        cx, cy = e.center
        if i == phantom.motion.ellipse:
            cx, cy = cx + dx, cy + dy
        out.append((e, (cx * N * scale, cy * N * scale), (e.axes[0] * N * scale, e.axes[1] * N * scale)))
    return out


def object_spectrum(
    phantom: PhantomSpec,
    kx: np.ndarray,
    ky: np.ndarray,
    n: int = 0,
    slice_id: int = 0,
    flow_encoded: bool = False,
) -> np.ndarray:
    """Analytic Fourier transform of the phantom object at (kx, ky)."""
    kx = np.asarray(kx, dtype=np.float64)
    ky = np.asarray(ky, dtype=np.float64)
    out = np.zeros(np.broadcast(kx, ky).shape, dtype=np.complex128)
    for e, (cx, cy), (a, b) in _ellipse_geometry(phantom, n, slice_id):
        ku = kx * math.cos(e.angle) + ky * math.sin(e.angle)
        kv = -kx * math.sin(e.angle) + ky * math.cos(e.angle)
        q = np.hypot(a * ku, b * kv)
        safe = np.where(q > 0, q, 1.0)
        shape = np.where(q > 0, j1(2 * np.pi * safe) / safe, np.pi)
        amplitude = complex(e.amplitude)
        if flow_encoded and e.flow_phase:
            amplitude *= complex(np.exp(1j * e.flow_phase))
        out += amplitude * a * b * shape * np.exp(-2j * np.pi * (kx * cx + ky * cy))
    if phantom.blur:
        out *= np.exp(-2 * np.pi**2 * phantom.blur**2 * (kx**2 + ky**2))
    return out


def coil_spectra(
    phantom: PhantomSpec,
    kx: np.ndarray,
    ky: np.ndarray,
    n: int = 0,
    slice_id: int = 0,
    flow_encoded: bool = False,
) -> np.ndarray:
    """Spectra of object x coil_j for every coil, shape [J, *kx.shape]."""
    coils = phantom.coils
    if coils.kind == "uniform":
        single = object_spectrum(phantom, kx, ky, n, slice_id, flow_encoded)
        return np.repeat(single[None], coils.count, axis=0)
    coeffs = phantom.coil_coefficients()
    q = _harmonics(coeffs)
    P = 2 * phantom.image_size
    shifted = np.stack(
        [
            object_spectrum(phantom, kx - qx / P, ky - qy / P, n, slice_id, flow_encoded)
            for qy in q
            for qx in q
        ]
    )
    return np.tensordot(coeffs.reshape(coils.count, -1), shifted, axes=(1, 0))


@dataclass
class KSpaceFrame:
    """One frame of multi-channel radial samples, [J, K, S] complex64."""

    frame_index: int
    slice_id: int
    samples: np.ndarray
    spoke_angles: np.ndarray

    def __post_init__(self) -> None:
        if self.samples.ndim != 3:
            raise ContractViolation(f"samples must be [J, K, S], got {self.samples.shape}")
        if self.samples.shape[1] != len(self.spoke_angles):
            raise ContractViolation(
                f"{len(self.spoke_angles)} angles for {self.samples.shape[1]} spokes"
            )
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteDataError(f"frame {self.frame_index}: non-finite samples")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def spokes(self) -> int:
        return self.samples.shape[1]

    @property
    def samples_per_spoke(self) -> int:
        return self.samples.shape[2]


def simulate_frame(
    phantom: PhantomSpec,
    spec: TrajectorySpec,
    n: int,
    slice_id: int = 0,
    mode: ImagingMode = ImagingMode.SINGLE_SLICE,
    gradient_delay: float = 0.0,
) -> KSpaceFrame:
    """
    Sample the analytic phantom spectrum along the spokes of frame ``n``.

    In flow mode frames come in pairs sharing one angle set and one motion
    state; the odd frame carries the flow-encoding phase.

    Args:
        phantom: Object, motion and coil description
        spec: Trajectory
        n: Acquisition frame index
        slice_id: Slice index (multi-slice shrinks the object per slice)
        mode: Imaging mode
        gradient_delay: Readout shift in samples applied to the sampled positions

    Returns:
        Frame with complex64 samples [J, K, S]
    """
    if n < 0:
        raise ContractViolation("frame index must be >= 0")
    turn = acquisition_turn(n, mode)
    angles = frame_angles(spec, turn)
    kx, ky = spoke_coordinates(angles, spec.samples_per_spoke, gradient_delay)
    flow_encoded = mode is ImagingMode.FLOW and n % 2 == 1
    data = coil_spectra(phantom, kx, ky, turn, slice_id, flow_encoded)
    if phantom.noise:
        rng = np.random.default_rng([phantom.seed, n, slice_id])
        data = data + phantom.noise * (
            rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape)
        ) / math.sqrt(2)
    logger.debug(f"simulated frame {n} slice {slice_id}: turn {turn % spec.turns}")
    return KSpaceFrame(n, slice_id, data.astype(np.complex64), angles)


def render_image(
    phantom: PhantomSpec,
    n: int,
    size: int,
    coil: Optional[int] = None,
    slice_id: int = 0,
    flow_encoded: bool = False,
) -> np.ndarray:
    """
    Band-limited reference image on a ``size`` x ``size`` pixel grid.

    The analytic spectrum is sampled on the Cartesian grid m / size and inverse
    transformed; with ``coil`` set the image is object x coil.
    """
    m = (np.arange(size) - size // 2) / size
    ky, kx = np.meshgrid(m, m, indexing="ij")
    if coil is None:
        spectrum = object_spectrum(phantom, kx, ky, n, slice_id, flow_encoded)
    else:
        spectrum = coil_spectra(phantom, kx, ky, n, slice_id, flow_encoded)[coil]
    return cifft2(spectrum, tag="sim")


def reference_magnitude(phantom: PhantomSpec, n: int, size: int, slice_id: int = 0) -> np.ndarray:
    """Root-sum-of-squares of the per-coil reference images."""
    images = [render_image(phantom, n, size, j, slice_id) for j in range(phantom.coil_count)]
    return np.sqrt(sum(np.abs(im) ** 2 for im in images))


def _floats(section: Dict[str, str], key: str, default: float) -> float:
    try:
        return float(section.get(key, default))
    except ValueError as exc:
        raise ConfigurationError(f"{key}={section[key]!r} is not a number") from exc


def specs_from_config(
    sections: Dict[str, Dict[str, str]], image_size: int
) -> Tuple[TrajectorySpec, PhantomSpec]:
    """Build trajectory and phantom specs from ``[trajectory]``, ``[phantom]``,
    ``[motion]`` and ``[coils]`` config sections."""
    traj = sections.get("trajectory", {})
    spec = TrajectorySpec(
        spokes=int(_floats(traj, "spokes", 11)),
        turns=int(_floats(traj, "turns", 5)),
        samples_per_spoke=int(_floats(traj, "samples_per_spoke", 2 * image_size)),
        base_angle=_floats(traj, "base_angle", 0.0),
    )
    mot = sections.get("motion", {})
    motion = MotionSpec(
        ellipse=int(_floats(mot, "ellipse", 4)),
        amplitude=_floats(mot, "amplitude", 0.03),
        period=_floats(mot, "period", 20.0),
        phase=_floats(mot, "phase", 0.0),
        direction=_floats(mot, "direction", math.pi / 2),
    )
    coil = sections.get("coils", {})
    coils = CoilModel(
        count=int(_floats(coil, "count", 4)),
        kind=coil.get("model", "ring"),
        radius=_floats(coil, "radius", 0.5),
        width=_floats(coil, "width", 0.8),
        order=int(_floats(coil, "order", 0)),
        terms=int(_floats(coil, "terms", 6)),
    )
    ph = sections.get("phantom", {})
    ellipses = _default_ellipses()
    flow_phase = _floats(ph, "flow_phase", 0.0)
    if flow_phase:
        # the moving ellipse carries the flow signal
        idx = motion.ellipse
        e = ellipses[idx]
        ellipses = ellipses[:idx] + (
            Ellipse(e.center, e.axes, e.angle, e.amplitude, flow_phase),
        ) + ellipses[idx + 1 :]
    phantom = PhantomSpec(
        image_size=image_size,
        ellipses=ellipses,
        motion=motion,
        coils=coils,
        blur=_floats(ph, "blur", 0.0),
        noise=_floats(ph, "noise", 0.0),
        seed=int(_floats(ph, "seed", 0)),
    )
    return spec, phantom
