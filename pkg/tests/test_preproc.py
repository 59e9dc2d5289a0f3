"""Tests for gridding, point-spread kernels and channel compression."""

import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.special import i0

from rtnlinv.errors import ContractViolation
from rtnlinv.nlinv import data_scale_factor, reconstruct_frame
from rtnlinv.planner import ReconPlan
from rtnlinv.preproc import (
    KB_BETA,
    Gridder,
    PsfCache,
    Preprocessor,
    build_psf,
    calibrate_compression,
    density_weights,
    fov_mask,
    kb_kernel,
    kb_transform,
    psf_from_samples,
)
from rtnlinv.report import nrmse
from rtnlinv.seqsim import (
    KSpaceFrame,
    TrajectorySpec,
    frame_angles,
    simulate_frame,
    spoke_coordinates,
)

from .conftest import random_complex


def nudft_matrix(kx, ky, G):
    """Exact encoding matrix from the field-of-view pixels to the samples."""
    mask = fov_mask(G)
    y, x = np.nonzero(mask)
    x = x - G // 2
    y = y - G // 2
    phase = np.outer(np.ravel(kx), x) + np.outer(np.ravel(ky), y)
    return np.exp(-2j * np.pi * phase), mask


def radial_samples(plan, spokes=5, turn=0):
    spec = TrajectorySpec.for_image(plan.image_size, spokes=spokes, turns=3)
    angles = frame_angles(spec, turn)
    kx, ky = spoke_coordinates(angles, spec.samples_per_spoke)
    w = np.broadcast_to(density_weights(spec.samples_per_spoke, spokes), kx.shape)
    return angles, spec.samples_per_spoke, kx, ky, w


class TestKaiserBessel:
    """Test the interpolation kernel."""

    def test_kernel(self):
        """Test peak and support."""
        assert kb_kernel(0.0) == pytest.approx(i0(KB_BETA))
        assert kb_kernel(2.0) == 0.0
        assert kb_kernel(-0.5) == pytest.approx(kb_kernel(0.5))

    def test_transform_at_zero(self):
        """Test the closed-form transform at DC."""
        assert kb_transform(0.0) == pytest.approx(4 * math.sinh(KB_BETA) / KB_BETA)

    def test_transform_matches_sum(self):
        """Test the closed form against numerical integration of the kernel."""
        t = np.linspace(-2, 2, 40001)
        f = 0.2
        numeric = trapezoid(kb_kernel(t) * np.cos(2 * np.pi * f * t), t)
        assert kb_transform(f) == pytest.approx(numeric, rel=1e-4)


class TestDensityWeights:
    """Test radial density compensation."""

    def test_ramp(self):
        """Test the ramp, the centre plateau and the unpaired first sample."""
        w = density_weights(16, 4)
        dk = 1 / 16
        assert w[0] == 0.0
        assert w[8] == pytest.approx(dk / 4 * dk * math.pi / 4)
        assert w[12] == pytest.approx(4 * dk * dk * math.pi / 4)
        assert np.allclose(w[1:8], w[9:][::-1])


class TestPointSpreadKernel:
    """Test the Toeplitz normal operator."""

    @pytest.mark.parametrize("G, N", [(16, 6), (32, 11)])
    @pytest.mark.parametrize("spokes", [1, 5, 11])
    def test_matches_direct_normal_operator(self, G, N, spokes, rng):
        """Test P against the brute-force weighted normal operator."""
        plan = ReconPlan(image_size=N, grid_size=G)
        angles, S, kx, ky, w = radial_samples(plan, spokes=spokes)
        psf = build_psf(angles, S, plan)
        E, mask = nudft_matrix(kx, ky, G)
        x = np.where(mask, random_complex(rng, (G, G)), 0)
        expected = np.zeros((G, G), dtype=np.complex128)
        expected[mask] = E.conj().T @ (np.ravel(w) * (E @ x[mask]))
        got = psf.apply(x)
        assert np.linalg.norm(got - expected) <= 1e-4 * np.linalg.norm(expected)

    def test_cartesian_is_identity(self, rng):
        """Test that a fully sampled Cartesian grid gives P = 1 and the identity on the FOV."""
        G = 16
        m = (np.arange(G // 2) - G // 4) / (G // 2)
        kx, ky = np.meshgrid(m, m)
        w = np.full(kx.shape, 1.0 / (G // 2) ** 2)
        psf = psf_from_samples(kx, ky, w, G)
        assert np.allclose(psf.P, 1.0, atol=1e-6)
        x = np.where(fov_mask(G), random_complex(rng, (G, G)), 0)
        assert np.allclose(psf.apply(x), x, atol=1e-5)

    def test_single_spoke_is_symmetric(self):
        """Test P(-k) = P(k) for one spoke through the centre."""
        plan = ReconPlan(image_size=6, grid_size=16)
        psf = build_psf(np.array([0.3]), 12, plan)
        inner = psf.P[1:, 1:]
        assert np.allclose(inner, inner[::-1, ::-1], atol=1e-5 * np.abs(inner).max())
        assert np.allclose(psf.P[0, 1:], psf.P[0, 1:][::-1], atol=1e-5 * np.abs(inner).max())

    def test_kernel_is_real(self, small_plan):
        """Test the stored kernel dtype and finiteness."""
        angles, S, *_ = radial_samples(small_plan)
        psf = build_psf(angles, S, small_plan)
        assert psf.P.dtype == np.float32
        assert psf.P.shape == (16, 16)
        assert np.all(np.isfinite(psf.P))

    def test_self_adjoint(self, small_plan, rng):
        """Test <Px, y> = <x, Py>."""
        angles, S, *_ = radial_samples(small_plan)
        psf = build_psf(angles, S, small_plan)
        x = random_complex(rng, (16, 16))
        y = random_complex(rng, (16, 16))
        lhs = np.vdot(y, psf.apply(x))
        rhs = np.vdot(psf.apply(y), x)
        assert abs(lhs - rhs) <= 1e-5 * abs(lhs)


class TestGridder:
    """Test Kaiser-Bessel gridding."""

    @pytest.mark.parametrize("G, N", [(16, 6), (32, 11)])
    def test_forward_is_adjoint(self, G, N, rng):
        """Test that forward and adjoint are a transpose pair over 100 trials."""
        plan = ReconPlan(image_size=N, grid_size=G)
        _, _, kx, ky, w = radial_samples(plan)
        gridder = Gridder(G, kx, ky, w)
        for _ in range(100):
            y = random_complex(rng, kx.size)
            x = np.where(gridder.mask, random_complex(rng, (G, G)), 0)
            adj = gridder.adjoint(y, weighted=False)
            lhs = np.vdot(x, adj)
            rhs = np.vdot(gridder.forward(x), y)
            assert abs(lhs - rhs) <= 1e-5 * np.linalg.norm(x) * np.linalg.norm(adj)

    def test_centre_sample_footprint(self):
        """Test that a unit sample at k = 0 spreads the kernel over the central 3 x 3 cells."""
        G, c = 16, 8
        gridder = Gridder(G, np.zeros(1), np.zeros(1), np.ones(1))
        grid = gridder.spread(np.ones(1), weighted=False)
        taps = kb_kernel(np.array([-1.0, 0.0, 1.0]))
        expected = np.zeros((G, G))
        expected[c - 1 : c + 2, c - 1 : c + 2] = np.outer(taps, taps)
        assert np.allclose(grid, expected, atol=1e-12 * taps.max() ** 2)
        assert grid.sum().real == pytest.approx(taps.sum() ** 2)
        image = gridder.adjoint(np.ones(1), weighted=False)
        assert image[c, c].real == pytest.approx(taps.sum() ** 2 / kb_transform(0.0) ** 2, rel=1e-5)

    def test_adjoint_approximates_nudft(self, rng):
        """Test gridding accuracy against the exact weighted adjoint."""
        plan = ReconPlan(image_size=16, grid_size=48)
        _, _, kx, ky, w = radial_samples(plan, spokes=9)
        gridder = Gridder(48, kx, ky, w)
        E, mask = nudft_matrix(kx, ky, 48)
        y = random_complex(rng, kx.size)
        expected = np.zeros((48, 48), dtype=np.complex128)
        expected[mask] = E.conj().T @ (np.ravel(w) * y)
        got = gridder.adjoint(y)
        assert np.linalg.norm(got - expected) <= 2e-2 * np.linalg.norm(expected)

    def test_output_confined_to_fov(self, small_plan, rng):
        """Test that the adjoint is zero outside the field of view."""
        _, _, kx, ky, w = radial_samples(small_plan)
        image = Gridder(16, kx, ky, w).adjoint(random_complex(rng, kx.size))
        assert image.dtype == np.complex64
        assert np.all(image[~fov_mask(16)] == 0)

    def test_coordinates_out_of_range(self):
        """Test the |k| <= 0.5 contract."""
        with pytest.raises(ContractViolation):
            Gridder(16, np.array([0.6]), np.array([0.0]), np.array([1.0]))


class TestCompression:
    """Test principal-component channel compression."""

    def frames(self, rng, J=4, count=2):
        return [
            KSpaceFrame(n, 0, random_complex(rng, (J, 3, 8)), np.zeros(3)) for n in range(count)
        ]

    def test_full_rank_keeps_energy(self, rng):
        """Test that keeping every channel keeps all energy."""
        cm = calibrate_compression(self.frames(rng), 4)
        assert cm.energy_fraction == pytest.approx(1.0)
        assert np.allclose(cm.matrix @ cm.matrix.conj().T, np.eye(4), atol=1e-5)

    def test_reduced(self, rng):
        """Test that fewer virtual channels keep orthonormal rows."""
        frames = self.frames(rng)
        cm = calibrate_compression(frames, 2)
        assert (cm.virtual_channels, cm.physical_channels) == (2, 4)
        assert 0 < cm.energy_fraction < 1
        assert np.allclose(cm.matrix @ cm.matrix.conj().T, np.eye(2), atol=1e-5)
        assert cm.apply(frames[0]).samples.shape == (2, 3, 8)

    def test_rank_deficient_warns(self, rng):
        """Test that identical channels warn and leave zero virtual channels."""
        base = random_complex(rng, (1, 3, 8))
        frame = KSpaceFrame(0, 0, np.repeat(base, 3, axis=0), np.zeros(3))
        with pytest.warns(RuntimeWarning):
            cm = calibrate_compression([frame], 2)
        assert np.all(cm.matrix[1] == 0)

    def test_contract(self, rng):
        """Test channel-count contracts."""
        frames = self.frames(rng)
        with pytest.raises(ContractViolation):
            calibrate_compression(frames, 5)
        with pytest.raises(ContractViolation):
            calibrate_compression([], 1)
        cm = calibrate_compression(frames, 2)
        with pytest.raises(ContractViolation):
            cm.apply(self.frames(rng, J=3)[0])


class TestPsfCache:
    """Test kernel reuse across frames."""

    def test_hits_by_turn(self, small_plan):
        """Test that frames sharing angles share one kernel."""
        spec = TrajectorySpec.for_image(6, spokes=5, turns=3)
        cache = PsfCache()
        kernels = [cache.kernel(frame_angles(spec, n), 12, small_plan) for n in range(6)]
        assert len(cache) == 3
        assert (cache.hits, cache.misses) == (3, 3)
        assert kernels[0] is kernels[3]

    def test_save_load(self, small_plan, tmp_path):
        """Test the kernel sidecar."""
        spec = TrajectorySpec.for_image(6, spokes=5, turns=2)
        cache = PsfCache()
        first = cache.kernel(frame_angles(spec, 0), 12, small_plan)
        cache.save(tmp_path / "psf.npz")
        fresh = PsfCache()
        assert fresh.load(tmp_path / "psf.npz") == 1
        again = fresh.kernel(frame_angles(spec, 0), 12, small_plan)
        assert fresh.hits == 1
        assert np.array_equal(again.P, first.P)

    def test_save_keeps_suffix(self, small_plan, tmp_path):
        """Test that a sidecar named without .npz is written and read at that exact path."""
        spec = TrajectorySpec.for_image(6, spokes=5, turns=2)
        cache = PsfCache()
        cache.kernel(frame_angles(spec, 0), 12, small_plan)
        cache.kernel(frame_angles(spec, 1), 12, small_plan)
        path = tmp_path / "psf.cache"
        cache.save(path)
        assert path.exists()
        assert not (tmp_path / "psf.cache.npz").exists()
        assert PsfCache().load(path) == 2


class TestPreprocessor:
    """Test the preprocessing stage."""

    def test_process(self, small_plan, rng):
        """Test compression, gridding and kernel lookup of one frame."""
        spec = TrajectorySpec.for_image(6, spokes=5, turns=1)
        frame = KSpaceFrame(0, 0, random_complex(rng, (3, 5, 12)), frame_angles(spec, 0))
        pre = Preprocessor(small_plan)
        pre.calibrate([frame], 2)
        out = pre.process(frame)
        assert out.data.z.shape == (2, 16, 16)
        assert out.data.channels == 2
        assert out.psf.G == 16

    def test_lossless_compression_keeps_reconstruction(self, desk_phantom):
        """Test that compressing J to J virtual channels leaves the image unchanged."""
        plan = ReconPlan(image_size=16, grid_size=48, newton_steps=2, cg_tol=0.0, cg_max_iter=6)
        spec = TrajectorySpec.for_image(16, spokes=9, turns=1)
        frame = simulate_frame(desk_phantom, spec, 0)
        images = []
        for compress in (False, True):
            pre = Preprocessor(plan)
            if compress:
                assert pre.calibrate([frame], frame.channels).energy_fraction == pytest.approx(1.0)
            out = pre.process(frame)
            scale = data_scale_factor(out.data.z, plan)
            images.append(reconstruct_frame(out.data.z, out.psf, plan, scale=scale).image)
        assert nrmse(images[1], images[0]) <= 1e-5
