"""
Nonlinear inversion: joint estimation of image and coil sensitivities.

The unknown is x = (rho, c_hat_1..c_hat_J): the image on the G x G grid and
the coil profiles as weighted, cropped k-space arrays on the G_c x G_c grid.
Coil images are c_j = W^-1 c_hat_j. Each frame runs M regularised Gauss-Newton
steps; each step solves its linear system with conjugate residual iterations, applying
the normal operator entirely on the oversampled grid through the frame's
point-spread kernel.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .decomp import WorkerGroup, all_reduce_sum
from .errors import ContractViolation, SolverDivergenceError
from .fftops import cfft2, cifft2, crop_center
from .planner import ReconPlan, crop_k, pad_k
from .preproc import PsfKernel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightSpec:
    """Sobolev-type k-space weight w(k) = (1 + a |k|^2)^b for the coil components."""

    a: float = 880.0
    b: float = 16.0

    def weights(self, G_c: int, G: int) -> np.ndarray:
        """w on the centred G_c grid; k in cycles per pixel of the G grid."""
        k = (np.arange(G_c) - G_c // 2) / G
        k2 = k[:, None] ** 2 + k[None, :] ** 2
        with np.errstate(over="ignore"):
            return (1.0 + self.a * k2) ** self.b

    def inverse(self, G_c: int, G: int) -> np.ndarray:
        return (1.0 / self.weights(G_c, G)).astype(np.float32)

    @classmethod
    def for_plan(cls, plan: ReconPlan) -> "WeightSpec":
        return cls(plan.weight_a, plan.weight_b)


@dataclass
class Estimate:
    """Image component rho [G, G] and coil components c_hat [J, G_c, G_c]."""

    rho: np.ndarray
    coils: np.ndarray

    @property
    def channels(self) -> int:
        return self.coils.shape[0]

    def copy(self) -> "Estimate":
        return Estimate(self.rho.copy(), self.coils.copy())

    def zeros_like(self) -> "Estimate":
        return Estimate(np.zeros_like(self.rho), np.zeros_like(self.coils))

    def __add__(self, other: "Estimate") -> "Estimate":
        return Estimate(self.rho + other.rho, self.coils + other.coils)

    def __sub__(self, other: "Estimate") -> "Estimate":
        return Estimate(self.rho - other.rho, self.coils - other.coils)

    def __mul__(self, s: Union[float, complex]) -> "Estimate":
        return Estimate((self.rho * s).astype(self.rho.dtype), (self.coils * s).astype(self.coils.dtype))

    __rmul__ = __mul__

    def axpy(self, a: float, other: "Estimate") -> None:
        """In place: self += a * other."""
        self.rho += np.float32(a) * other.rho
        self.coils += np.float32(a) * other.coils

    def vdot(self, other: "Estimate") -> complex:
        return complex(np.vdot(self.rho, other.rho)) + complex(np.vdot(self.coils, other.coils))

    def norm(self) -> float:
        return float(np.sqrt(self.vdot(self).real))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.rho)) and np.all(np.isfinite(self.coils)))


def initial_estimate(plan: ReconPlan, channels: int) -> Estimate:
    """First-frame start: rho set to one, coil components set to zero."""
    G, G_c = plan.grid_size, plan.coil_grid
    return Estimate(
        np.ones((G, G), dtype=np.complex64),
        np.zeros((channels, G_c, G_c), dtype=np.complex64),  # type: ignore[arg-type]
    )


def apply_W_inv(c_hat: np.ndarray, inv_w: np.ndarray, G: int, tag: str = "normal") -> np.ndarray:
    """Coil component(s) to image-domain coil profile(s) on the G grid."""
    padded = pad_k(c_hat * inv_w, G)
    return cifft2(padded, tag=tag, norm="ortho").astype(np.complex64, copy=False)


def apply_W_invH(c: np.ndarray, inv_w: np.ndarray, G_c: int, tag: str = "normal") -> np.ndarray:
    """Adjoint of apply_W_inv: FFT, crop to G_c, divide by the weight."""
    spectrum = crop_k(cfft2(c, tag=tag, norm="ortho"), G_c)
    return (spectrum * inv_w).astype(np.complex64, copy=False)


class Linearization:
    """Decoded image and coil profiles of x_n, shared by one Newton step."""

    def __init__(self, x: Estimate, plan: ReconPlan, inv_w: Optional[np.ndarray] = None):
        self.plan = plan
        self.rho = x.rho
        self.c_hat = x.coils
        self.inv_w = inv_w if inv_w is not None else WeightSpec.for_plan(plan).inverse(
            plan.coil_grid, plan.grid_size  # type: ignore[arg-type]
        )
        self.coil_images = np.zeros((x.channels,) + x.rho.shape, dtype=np.complex64)
        self._decoded = np.zeros(x.channels, dtype=bool)

    @property
    def channels(self) -> int:
        return self.c_hat.shape[0]

    def decode(self, channels: range, tag: str) -> None:
        for j in channels:
            self.coil_images[j] = apply_W_inv(self.c_hat[j], self.inv_w, self.plan.grid_size, tag)
            self._decoded[j] = True

    def check_decoded(self) -> None:
        if not self._decoded.all():
            raise ContractViolation("coil profiles of the linearisation point are not decoded")


def _map(group: Optional[WorkerGroup], fn, J: int):
    if group is None:
        return [fn(range(J))]
    return group.map_blocks(fn, J)


def _check_shapes(dx: Estimate, lin: Linearization, psf: PsfKernel) -> None:
    if dx.rho.shape != lin.rho.shape or dx.coils.shape != lin.c_hat.shape:
        raise ContractViolation(
            f"update {dx.rho.shape}/{dx.coils.shape} does not match "
            f"{lin.rho.shape}/{lin.c_hat.shape}"
        )
    if psf.G != lin.rho.shape[-1]:
        raise ContractViolation(f"kernel grid {psf.G} != image grid {lin.rho.shape[-1]}")


def apply_normal(
    dx: Estimate, lin: Linearization, psf: PsfKernel, group: Optional[WorkerGroup] = None
) -> Estimate:
    """
    Normal operator DF^H DF of the linearised model at ``lin``.

    With t_j = FHF(c_j drho + rho W^-1 dc_hat_j) the result is
    (sum_j conj(c_j) t_j, W^-H(conj(rho) t_j) for every j). Four FFTs per
    channel: one in W^-1, two in FHF, one in W^-H.
    """
    _check_shapes(dx, lin, psf)
    lin.check_decoded()
    G, G_c = lin.plan.grid_size, lin.plan.coil_grid
    rho_conj = np.conj(lin.rho)

    def block(channels: range) -> Tuple[np.ndarray, np.ndarray]:
        rho_terms = np.empty((len(channels),) + lin.rho.shape, dtype=np.complex64)
        coil_out = np.empty((len(channels), G_c, G_c), dtype=np.complex64)  # type: ignore[arg-type]
        for i, j in enumerate(channels):
            c = lin.coil_images[j]
            dc = apply_W_inv(dx.coils[j], lin.inv_w, G)
            t = psf.apply(c * dx.rho + lin.rho * dc)
            rho_terms[i] = np.conj(c) * t
            coil_out[i] = apply_W_invH(rho_conj * t, lin.inv_w, G_c)  # type: ignore[arg-type]
        return rho_terms, coil_out

    results = _map(group, block, lin.channels)
    rho = all_reduce_sum([r for r, _ in results])
    coils = np.concatenate([c for _, c in results])
    return Estimate(rho, coils)


def gradient_rhs(
    lin: Linearization, z: np.ndarray, psf: PsfKernel, group: Optional[WorkerGroup] = None
) -> Tuple[Estimate, float]:
    """
    DF^H of the gridded residual z_j - FHF(rho c_j); decodes ``lin`` on the way.

    Returns the adjoint residual and the data residual norm. Four FFTs per channel.
    """
    if z.shape != (lin.channels,) + lin.rho.shape:
        raise ContractViolation(f"gridded data {z.shape} does not match {lin.channels} channels")
    G_c = lin.plan.coil_grid
    rho_conj = np.conj(lin.rho)

    def block(channels: range):
        lin.decode(channels, "setup")
        rho_terms = np.empty((len(channels),) + lin.rho.shape, dtype=np.complex64)
        coil_out = np.empty((len(channels), G_c, G_c), dtype=np.complex64)  # type: ignore[arg-type]
        sq = 0.0
        for i, j in enumerate(channels):
            c = lin.coil_images[j]
            r = z[j] - psf.apply(lin.rho * c, tag="setup")
            sq += float(np.vdot(r, r).real)
            rho_terms[i] = np.conj(c) * r
            coil_out[i] = apply_W_invH(rho_conj * r, lin.inv_w, G_c, tag="setup")  # type: ignore[arg-type]
        return rho_terms, coil_out, sq

    results = _map(group, block, lin.channels)
    rho = all_reduce_sum([r for r, _, _ in results])
    coils = np.concatenate([c for _, c, _ in results])
    residual = float(np.sqrt(sum(s for _, _, s in results)))
    return Estimate(rho, coils), residual


@dataclass
class CgResult:
    x: Estimate
    iterations: int
    residuals: List[float]


def cg_solve(
    rhs: Estimate,
    lin: Linearization,
    alpha: float,
    psf: PsfKernel,
    tol: float,
    max_iter: int,
    group: Optional[WorkerGroup] = None,
) -> CgResult:
    """
    Solve (DF^H DF + alpha I) dx = rhs from zero with conjugate residual iterations.

    Conjugate residual minimises ||r|| over the same Krylov space as conjugate
    gradients, so ``residuals`` never increases. One normal-operator
    application per iteration: A p is carried along with p.

    Stops when ||r|| <= tol * ||rhs|| or after ``max_iter`` iterations.

    Raises:
        SolverDivergenceError: when a residual becomes non-finite
    """
    if alpha <= 0:
        raise ContractViolation("CG needs alpha > 0")
    x = rhs.zeros_like()
    b_norm = rhs.norm()
    if b_norm == 0.0:
        return CgResult(x, 0, [0.0])
    residuals = [b_norm]
    if max_iter == 0 or tol >= 1.0:
        return CgResult(x, 0, residuals)

    def shifted(v: Estimate) -> Estimate:
        out = apply_normal(v, lin, psf, group)
        out.axpy(alpha, v)
        return out

    r = rhs.copy()
    Ar = shifted(r)
    p, Ap = r.copy(), Ar.copy()
    rAr = r.vdot(Ar).real
    iterations = 0
    while True:
        ApAp = Ap.vdot(Ap).real
        # exact minimiser of ||r - step * Ap|| for the vectors at hand
        step = r.vdot(Ap).real / ApAp
        x.axpy(step, p)
        r.axpy(-step, Ap)
        iterations += 1
        norm = r.norm()
        if not np.isfinite(norm) or not np.isfinite(step):
            raise SolverDivergenceError(
                f"non-finite CG residual at iteration {iterations}",
                {"iteration": iterations, "residual": norm, "alpha": alpha, "ApAp": ApAp},
            )
        residuals.append(norm)
        if iterations >= max_iter or norm <= tol * b_norm:
            break
        Ar = shifted(r)
        rAr_new = r.vdot(Ar).real
        beta = np.float32(rAr_new / rAr)
        p = r + p * beta
        Ap = Ar + Ap * beta
        rAr = rAr_new
    return CgResult(x, iterations, residuals)


@dataclass
class NewtonState:
    """x_n, alpha_n and the regularisation target of one Newton step."""

    frame_index: int
    step: int
    x: Estimate
    alpha: float
    x_prev: Estimate
    cg_iterations: List[int] = field(default_factory=list)
    residual: float = float("nan")


def newton_step(
    state: NewtonState,
    z: np.ndarray,
    psf: PsfKernel,
    plan: ReconPlan,
    group: Optional[WorkerGroup] = None,
    cg_max_iter: Optional[int] = None,
    inv_w: Optional[np.ndarray] = None,
) -> NewtonState:
    """
    One regularised Gauss-Newton update.

    rhs = DF^H(z - FHF(rho c)) - alpha (x_n - damping x_prev); the update is
    x_{n+1} = x_n + dx with alpha_{n+1} = max(q alpha_n, alpha_min).
    """
    lin = Linearization(state.x, plan, inv_w)
    grad, residual = gradient_rhs(lin, z, psf, group)
    drift = state.x - state.x_prev * np.float32(plan.damping)
    rhs = grad - drift * np.float32(state.alpha)
    max_iter = plan.cg_max_iter if cg_max_iter is None else cg_max_iter
    try:
        cg = cg_solve(rhs, lin, state.alpha, psf, plan.cg_tol, max_iter, group)
    except SolverDivergenceError as exc:
        exc.diagnostics.update(frame=state.frame_index, step=state.step)
        raise
    logger.debug(
        f"frame {state.frame_index} step {state.step}: alpha={state.alpha:.3g} "
        f"cg={cg.iterations} residual={residual:.4g}"
    )
    return NewtonState(
        frame_index=state.frame_index,
        step=state.step + 1,
        x=state.x + cg.x,
        alpha=max(plan.alpha_reduction * state.alpha, plan.alpha_min),
        x_prev=state.x_prev,
        cg_iterations=state.cg_iterations + [cg.iterations],
        residual=residual,
    )


def data_scale_factor(z: np.ndarray, plan: ReconPlan) -> float:
    """Factor that brings gridded data to the plan's reference norm."""
    norm = float(np.linalg.norm(z))
    return plan.data_scale / norm if norm > 0 else 1.0


def output_image(x: Estimate, plan: ReconPlan, inv_w: Optional[np.ndarray] = None) -> np.ndarray:
    """rho times the root-sum-of-squares of the coil profiles, cropped to N x N."""
    lin = Linearization(x, plan, inv_w)
    lin.decode(range(x.channels), "output")
    rss = np.sqrt(np.sum(np.abs(lin.coil_images) ** 2, axis=0))
    return crop_center(x.rho * rss, plan.image_size).astype(np.complex64)


Regularizer = Union[None, Estimate, Callable[[int], Optional[Estimate]]]


@dataclass
class FrameResult:
    frame_index: int
    image: np.ndarray
    estimate: Estimate
    cg_iterations: List[int]
    seconds: float
    sources: Dict[int, Optional[int]] = field(default_factory=dict)


def reconstruct_frame(
    z: np.ndarray,
    psf: PsfKernel,
    plan: ReconPlan,
    x_init: Optional[Estimate] = None,
    x_reg: Regularizer = None,
    group: Optional[WorkerGroup] = None,
    scale: float = 1.0,
    frame_index: int = 0,
) -> FrameResult:
    """
    Reconstruct one frame with ``plan.newton_steps`` Gauss-Newton steps.

    Args:
        z: Gridded data [J, G, G] in input units
        psf: Point-spread kernel of the frame's trajectory
        plan: Grid sizes and solver parameters
        x_init: Starting estimate; defaults to the step-0 regulariser, or to
            rho = 1, c_hat = 0 for the first frame of a chain
        x_reg: Regularisation target, either fixed or a callable evaluated at
            the start of every Newton step
        group: Compute workers for the channel decomposition
        scale: Data scaling of the chain; the image is returned in input units
        frame_index: Used in log lines and diagnostics

    Returns:
        Cropped output image and the final estimate for chaining
    """
    start = time.perf_counter()
    J = z.shape[0]
    if psf.G != plan.grid_size or z.shape[1:] != (plan.grid_size, plan.grid_size):
        raise ContractViolation(f"data {z.shape} / kernel {psf.G} do not match grid {plan.grid_size}")
    inv_w = WeightSpec.for_plan(plan).inverse(plan.coil_grid, plan.grid_size)  # type: ignore[arg-type]
    z_scaled = (z * np.float32(scale)).astype(np.complex64)
    fresh = initial_estimate(plan, J)

    def regularizer(m: int) -> Optional[Estimate]:
        return x_reg(m) if callable(x_reg) else x_reg

    reg0 = regularizer(0)
    if x_init is None:
        x_init = reg0 if reg0 is not None else fresh
    if x_init.coils.shape[0] != J:
        raise ContractViolation(f"initial estimate has {x_init.channels} channels, data {J}")
    state = NewtonState(frame_index, 0, x_init.copy(), plan.alpha(0), reg0 if reg0 is not None else fresh)
    for m in range(plan.newton_steps):
        if m > 0:
            reg = regularizer(m)
            state = replace(state, x_prev=reg if reg is not None else fresh)
        state = newton_step(state, z_scaled, psf, plan, group, inv_w=inv_w)
    image = output_image(state.x, plan, inv_w) / np.float32(scale)
    return FrameResult(
        frame_index=frame_index,
        image=image,
        estimate=state.x,
        cg_iterations=state.cg_iterations,
        seconds=time.perf_counter() - start,
    )
