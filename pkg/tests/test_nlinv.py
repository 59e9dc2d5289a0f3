"""Tests for the nonlinear inversion solver."""

import numpy as np
import pytest
from rtnlinv.decomp import WorkerGroup
from rtnlinv.errors import ContractViolation, SolverDivergenceError
from rtnlinv.fftops import FFT_COUNTER
from rtnlinv.nlinv import (
    Estimate,
    Linearization,
    NewtonState,
    WeightSpec,
    apply_normal,
    apply_W_inv,
    apply_W_invH,
    cg_solve,
    data_scale_factor,
    gradient_rhs,
    initial_estimate,
    newton_step,
    output_image,
    reconstruct_frame,
)
from rtnlinv.planner import ReconPlan
from rtnlinv.preproc import Preprocessor, build_psf
from rtnlinv.report import interior_mask, nrmse
from rtnlinv.seqsim import TrajectorySpec, frame_angles, reference_magnitude, simulate_frame

from .conftest import linearization, random_complex, random_estimate


def radial_psf(plan, spokes=5):
    spec = TrajectorySpec.for_image(plan.image_size, spokes=spokes, turns=1)
    return build_psf(frame_angles(spec, 0), spec.samples_per_spoke, plan)


def as_vector(x):
    return np.concatenate([x.rho.ravel(), x.coils.ravel()])


def from_vector(v, like):
    n = like.rho.size
    return Estimate(
        v[:n].reshape(like.rho.shape).astype(np.complex64),
        v[n:].reshape(like.coils.shape).astype(np.complex64),
    )


def gridded_series(phantom, spec, plan, frames):
    pre = Preprocessor(plan)
    out = []
    for n in range(frames):
        processed = pre.process(simulate_frame(phantom, spec, n))
        out.append((processed.data.z, processed.psf))
    return out


class TestWeights:
    """Test the coil weighting and its inverse operators."""

    def test_dc_weight(self):
        """Test w = 1 at k = 0 and growth away from it."""
        w = WeightSpec().weights(8, 32)
        assert w[4, 4] == 1.0
        assert w[0, 0] > w[2, 2] > w[4, 4]
        assert np.allclose(w, w.T)

    def test_k_in_full_grid_pixels(self):
        """Test that k counts cycles per pixel of the full grid, not of the coil grid."""
        w = WeightSpec().weights(8, 32)
        assert w[0, 4] == pytest.approx((1 + 880 * (4 / 32) ** 2) ** 16)
        assert WeightSpec().weights(8, 64)[0, 4] == pytest.approx((1 + 880 * (4 / 64) ** 2) ** 16)

    def test_inverse_dtype(self):
        """Test the stored single-precision inverse."""
        inv = WeightSpec().inverse(4, 16)
        assert inv.dtype == np.float32
        assert inv[2, 2] == 1.0

    def test_W_adjoint(self, rng):
        """Test <W^-1 c_hat, c> = <c_hat, W^-H c>."""
        inv_w = WeightSpec(a=10.0, b=2.0).inverse(4, 16)
        c_hat = random_complex(rng, (4, 4))
        c = random_complex(rng, (16, 16))
        lhs = np.vdot(c, apply_W_inv(c_hat, inv_w, 16))
        rhs = np.vdot(apply_W_invH(c, inv_w, 4), c_hat)
        assert abs(lhs - rhs) <= 1e-5 * abs(lhs)

    @pytest.mark.parametrize("G", [16, 32])
    def test_W_adjoint_default_weight(self, G, rng):
        """Test the adjoint pair under the default weight over 100 trials."""
        G_c = G // 4
        inv_w = WeightSpec().inverse(G_c, G)
        for _ in range(100):
            c_hat = random_complex(rng, (G_c, G_c))
            c = random_complex(rng, (G, G))
            decoded = apply_W_inv(c_hat, inv_w, G)
            lhs = np.vdot(c, decoded)
            rhs = np.vdot(apply_W_invH(c, inv_w, G_c), c_hat)
            assert abs(lhs - rhs) <= 1e-4 * np.linalg.norm(c) * np.linalg.norm(decoded)

    def test_dc_coil_is_flat(self):
        """Test that a DC component of G decodes to a unit profile."""
        inv_w = WeightSpec().inverse(4, 16)
        c_hat = np.zeros((4, 4), np.complex64)
        c_hat[2, 2] = 16
        assert np.allclose(apply_W_inv(c_hat, inv_w, 16), 1.0, atol=1e-6)


class TestEstimate:
    """Test Estimate arithmetic."""

    def test_axpy_and_norm(self, small_plan, rng):
        """Test in-place updates and the joint norm."""
        x = random_estimate(small_plan, 2, rng)
        y = x.copy()
        y.axpy(1.0, x)
        assert np.allclose(y.rho, 2 * x.rho)
        assert y.norm() == pytest.approx(2 * x.norm(), rel=1e-5)
        assert (x - x).norm() == 0.0

    def test_copy_is_independent(self, small_plan, rng):
        """Test that copies do not share buffers."""
        x = random_estimate(small_plan, 2, rng)
        y = x.copy()
        y.rho[0, 0] += 1
        assert y.rho[0, 0] != x.rho[0, 0]

    def test_initial_estimate(self, small_plan):
        """Test rho = 1 and zero coils."""
        x = initial_estimate(small_plan, 3)
        assert np.all(x.rho == 1) and np.all(x.coils == 0)
        assert x.coils.shape == (3, 4, 4)
        assert x.is_finite()

    def test_output_image(self, small_plan):
        """Test rho times the root-sum-of-squares of flat coils."""
        x = initial_estimate(small_plan, 4)
        x.coils[:, 2, 2] = 16
        image = output_image(x, small_plan)
        assert image.shape == (6, 6)
        assert np.allclose(np.abs(image), 2.0, atol=1e-5)
        assert FFT_COUNTER["output"] == 4


class TestNormalOperator:
    """Test apply_normal."""

    @pytest.mark.parametrize("G, N", [(16, 6), (32, 11)])
    @pytest.mark.parametrize("J", [1, 3])
    def test_hermitian(self, G, N, J, rng):
        """Test <A x, y> = <x, A y> over 100 random points and directions."""
        plan = ReconPlan(image_size=N, grid_size=G)
        psf = radial_psf(plan)
        for _ in range(100):
            lin = linearization(plan, J, rng)
            x = random_estimate(plan, J, rng)
            y = random_estimate(plan, J, rng)
            lhs = y.vdot(apply_normal(x, lin, psf))
            rhs = apply_normal(y, lin, psf).vdot(x)
            assert abs(lhs - rhs) <= 1e-4 * abs(lhs)

    def test_positive(self, small_plan, rng):
        """Test <x, A x> >= 0."""
        lin = linearization(small_plan, 2, rng)
        x = random_estimate(small_plan, 2, rng)
        assert x.vdot(apply_normal(x, lin, radial_psf(small_plan))).real >= 0

    def test_fft_count_per_channel(self, small_plan, rng):
        """Test four FFTs per channel and application."""
        lin = linearization(small_plan, 3, rng)
        psf = radial_psf(small_plan)
        FFT_COUNTER.reset()
        apply_normal(random_estimate(small_plan, 3, rng), lin, psf)
        assert FFT_COUNTER.snapshot() == {"normal": 12}

    def test_independent_of_group_size(self, small_plan, rng):
        """Test identical bits for A = 1, 2 and 4."""
        lin = linearization(small_plan, 4, rng)
        psf = radial_psf(small_plan)
        x = random_estimate(small_plan, 4, rng)
        outputs = []
        for A in (1, 2, 4):
            with WorkerGroup(A) as group:
                outputs.append(apply_normal(x, lin, psf, group))
        for other in outputs[1:]:
            assert np.array_equal(outputs[0].rho, other.rho)
            assert np.array_equal(outputs[0].coils, other.coils)

    def test_needs_decoded_point(self, small_plan, rng):
        """Test the decoded-linearisation contract."""
        lin = Linearization(random_estimate(small_plan, 2, rng), small_plan)
        with pytest.raises(ContractViolation):
            apply_normal(random_estimate(small_plan, 2, rng), lin, radial_psf(small_plan))


class TestConjugateGradient:
    """Test cg_solve."""

    def test_matches_dense_solve(self, small_plan, rng):
        """Test CG against a direct solve of the materialised system."""
        lin = linearization(small_plan, 2, rng)
        psf = radial_psf(small_plan)
        alpha = 1.0
        like = random_estimate(small_plan, 2, rng)
        dim = as_vector(like).size
        A = np.empty((dim, dim), dtype=np.complex128)
        for i in range(dim):
            e = np.zeros(dim, dtype=np.complex64)
            e[i] = 1
            A[:, i] = as_vector(apply_normal(from_vector(e, like), lin, psf)) + alpha * e
        b = as_vector(like)
        expected = np.linalg.solve(A, b)
        result = cg_solve(like, lin, alpha, psf, tol=1e-6, max_iter=500)
        got = as_vector(result.x)
        assert np.linalg.norm(got - expected) <= 1e-4 * np.linalg.norm(expected)
        assert result.residuals[-1] <= 1e-6 * result.residuals[0]

    def test_zero_rhs(self, small_plan, rng):
        """Test that a zero right-hand side needs no iterations."""
        lin = linearization(small_plan, 2, rng)
        rhs = random_estimate(small_plan, 2, rng).zeros_like()
        result = cg_solve(rhs, lin, 1.0, radial_psf(small_plan), 1e-3, 50)
        assert result.iterations == 0
        assert result.x.norm() == 0.0

    def test_iteration_cap(self, small_plan, rng):
        """Test that max_iter bounds the work."""
        lin = linearization(small_plan, 2, rng)
        rhs = random_estimate(small_plan, 2, rng)
        result = cg_solve(rhs, lin, 1.0, radial_psf(small_plan), 0.0, 3)
        assert result.iterations == 3
        assert len(result.residuals) == 4

    def test_residuals_never_increase(self, desk_phantom):
        """Test a monotone residual history on a badly conditioned system."""
        plan = ReconPlan(image_size=16, grid_size=48, cg_tol=0.0)
        spec = TrajectorySpec.for_image(16, spokes=5, turns=1)
        (z, psf), = gridded_series(desk_phantom, spec, plan, 1)
        z = (z * np.float32(data_scale_factor(z, plan))).astype(np.complex64)
        lin = Linearization(initial_estimate(plan, z.shape[0]), plan)
        lin.decode(range(z.shape[0]), "setup")
        grad, _ = gradient_rhs(lin, z, psf)
        result = cg_solve(grad, lin, 1e-3, psf, tol=0.0, max_iter=60)
        res = result.residuals
        assert result.iterations == 60
        for before, after in zip(res, res[1:]):
            assert after <= before * (1 + 1e-4)

    def test_large_alpha_scales_rhs(self, small_plan, rng):
        """Test dx -> rhs / alpha when alpha dominates the normal operator."""
        lin = linearization(small_plan, 2, rng)
        rhs = random_estimate(small_plan, 2, rng)
        alpha = 1e6
        result = cg_solve(rhs, lin, alpha, radial_psf(small_plan), 1e-3, 20)
        expected = rhs * (1 / alpha)
        assert (result.x - expected).norm() <= 1e-2 * expected.norm()

    def test_alpha_must_be_positive(self, small_plan, rng):
        """Test the alpha > 0 contract."""
        lin = linearization(small_plan, 1, rng)
        with pytest.raises(ContractViolation):
            cg_solve(random_estimate(small_plan, 1, rng), lin, 0.0, radial_psf(small_plan), 1e-3, 5)

    def test_divergence(self, small_plan, rng):
        """Test that a non-finite residual raises with diagnostics."""
        x = random_estimate(small_plan, 2, rng)
        x.rho[8, 8] = np.nan
        lin = Linearization(x, small_plan)
        lin.decode(range(2), "setup")
        with pytest.raises(SolverDivergenceError) as info:
            cg_solve(random_estimate(small_plan, 2, rng), lin, 1.0, radial_psf(small_plan), 1e-3, 10)
        assert info.value.diagnostics["iteration"] == 1
        assert info.value.exit_code == 4


class TestNewtonSteps:
    """Test Gauss-Newton updates and their operation counts."""

    def test_fft_count(self, rng):
        """Test 4 FFTs per channel and CG iteration: J=10 and 50 iterations give 2000."""
        plan = ReconPlan(image_size=6, grid_size=16, cg_tol=0.0)
        psf = radial_psf(plan)
        x = random_estimate(plan, 10, rng)
        z = random_complex(rng, (10, 16, 16))
        state = NewtonState(0, 0, x, plan.alpha(0), x.copy())
        caps = [9, 9, 8, 8, 8, 8]
        for cap in caps:
            state = newton_step(state, z, psf, plan, cg_max_iter=cap)
        assert state.cg_iterations == caps
        assert FFT_COUNTER["normal"] == 2000
        assert FFT_COUNTER["setup"] == 6 * 4 * 10

    def test_consistent_point_is_fixed(self, small_plan, rng):
        """Test that data generated by x with x_prev = x leaves x unchanged."""
        x = random_estimate(small_plan, 3, rng)
        psf = radial_psf(small_plan)
        lin = Linearization(x, small_plan)
        lin.decode(range(3), "setup")
        z = np.stack([psf.apply(x.rho * lin.coil_images[j], tag="setup") for j in range(3)])
        state = newton_step(NewtonState(0, 0, x, 1.0, x.copy()), z, psf, small_plan)
        assert state.cg_iterations == [0]
        assert state.residual == 0.0
        assert np.array_equal(state.x.rho, x.rho)
        assert np.array_equal(state.x.coils, x.coils)

    def test_alpha_reduction(self, small_plan, rng):
        """Test the geometric alpha schedule across steps."""
        x = random_estimate(small_plan, 2, rng)
        state = NewtonState(0, 0, x, 1.0, x.copy())
        z = random_complex(rng, (2, 16, 16))
        psf = radial_psf(small_plan)
        state = newton_step(state, z, psf, small_plan, cg_max_iter=2)
        state = newton_step(state, z, psf, small_plan, cg_max_iter=2)
        assert state.alpha == pytest.approx(0.25)
        assert state.step == 2

    def test_data_scale(self, small_plan):
        """Test scaling to the reference norm."""
        z = np.full((2, 16, 16), 0.5, dtype=np.complex64)
        assert data_scale_factor(z, small_plan) == pytest.approx(100.0 / 11.3137, rel=1e-4)
        assert data_scale_factor(np.zeros_like(z), small_plan) == 1.0


class TestReconstructFrame:
    """Test reconstruct_frame on simulated data."""

    def test_group_size_does_not_change_bits(self, desk_phantom):
        """Test identical images for A = 1, 2 and 4."""
        plan = ReconPlan(image_size=16, grid_size=48, newton_steps=3)
        spec = TrajectorySpec.for_image(16, spokes=9, turns=1)
        (z, psf), = gridded_series(desk_phantom, spec, plan, 1)
        scale = data_scale_factor(z, plan)
        images = []
        for A in (1, 2, 4):
            with WorkerGroup(A) as group:
                images.append(reconstruct_frame(z, psf, plan, group=group, scale=scale).image)
        for other in images[1:]:
            assert np.array_equal(images[0], other)

    def test_fully_sampled_phantom(self, desk_phantom):
        """Test recovery of a noiseless, fully sampled frame."""
        plan = ReconPlan(image_size=16, grid_size=48)
        spec = TrajectorySpec.for_image(16, spokes=41, turns=1)
        (z, psf), = gridded_series(desk_phantom, spec, plan, 1)
        result = reconstruct_frame(z, psf, plan, scale=data_scale_factor(z, plan))
        reference = reference_magnitude(desk_phantom, 0, 16)
        assert result.image.shape == (16, 16)
        assert len(result.cg_iterations) == plan.newton_steps
        assert nrmse(result.image, reference, interior_mask(16)) <= 0.05

    def test_cropped_coil_grid(self, desk_phantom):
        """Test that a quarter-size coil grid matches the full coil grid."""
        spec = TrajectorySpec.for_image(16, spokes=21, turns=1)
        images = []
        for coil_grid in (12, 48):
            plan = ReconPlan(image_size=16, grid_size=48, coil_grid=coil_grid)
            (z, psf), = gridded_series(desk_phantom, spec, plan, 1)
            images.append(reconstruct_frame(z, psf, plan, scale=data_scale_factor(z, plan)).image)
        assert nrmse(images[0], images[1]) <= 0.02

    def test_temporal_regularization_helps(self, desk_phantom, desk_trajectory):
        """Test that chaining beats independent reconstructions frame by frame at 11 spokes."""
        plan = ReconPlan(image_size=16, grid_size=48)
        series = gridded_series(desk_phantom, desk_trajectory, plan, 31)
        scale = data_scale_factor(series[0][0], plan)
        mask = interior_mask(16)
        wins = 0
        previous = None
        for n, (z, psf) in enumerate(series):
            result = reconstruct_frame(z, psf, plan, x_reg=previous, scale=scale, frame_index=n)
            previous = result.estimate
            if n < 6:
                continue
            alone = reconstruct_frame(z, psf, plan, scale=scale, frame_index=n)
            reference = reference_magnitude(desk_phantom, n, 16)
            wins += nrmse(result.image, reference, mask) < nrmse(alone.image, reference, mask)
        assert wins >= 0.9 * 25

    def test_scaled_data_scales_model_output(self, desk_phantom):
        """Test that multiplying the data by s multiplies F(x) and the image by s."""
        plan = ReconPlan(image_size=16, grid_size=48, newton_steps=3)
        spec = TrajectorySpec.for_image(16, spokes=9, turns=1)
        (z, psf), = gridded_series(desk_phantom, spec, plan, 1)
        s = np.float32(7.5)

        def run(data):
            scale = data_scale_factor(data, plan)
            result = reconstruct_frame(data, psf, plan, scale=scale)
            lin = Linearization(result.estimate, plan)
            lin.decode(range(data.shape[0]), "output")
            fx = np.stack([psf.apply(result.estimate.rho * c) for c in lin.coil_images]) / scale
            return fx, result.image

        base_fx, base_image = run(z)
        fx, image = run((z * s).astype(np.complex64))
        assert np.linalg.norm(fx - s * base_fx) <= 1e-2 * np.linalg.norm(s * base_fx)
        assert np.linalg.norm(image - s * base_image) <= 1e-2 * np.linalg.norm(s * base_image)

    def test_huge_alpha_keeps_previous_estimate(self, desk_phantom):
        """Test that one step with an overwhelming alpha stays at the regulariser."""
        spec = TrajectorySpec.for_image(16, spokes=9, turns=5)
        plan = ReconPlan(image_size=16, grid_size=48, newton_steps=2)
        series = gridded_series(desk_phantom, spec, plan, 2)
        scale = data_scale_factor(series[0][0], plan)
        previous = reconstruct_frame(*series[0], plan, scale=scale).estimate
        stiff = ReconPlan(image_size=16, grid_size=48, newton_steps=1, alpha0=1e8)
        result = reconstruct_frame(*series[1], stiff, x_reg=previous, scale=scale, frame_index=1)
        assert (result.estimate - previous).norm() <= 1e-3 * previous.norm()

    def test_shape_contract(self, small_plan, rng):
        """Test that data and kernel must match the plan grid."""
        psf = radial_psf(small_plan)
        with pytest.raises(ContractViolation):
            reconstruct_frame(random_complex(rng, (2, 8, 8)), psf, small_plan)
