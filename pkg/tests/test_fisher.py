import math

import numpy as np
import pytest

from range_rte.fisher import (
    InsufficientDataError,
    SingularFimError,
    SingularGeometryError,
    confidence_intervals,
    det_fim_geometric,
    det_fim_subproblem,
    fim,
    jacobian_matrix,
    range_jacobian,
    singularity_report,
)
from range_rte.geometry import Transform4DoF, heading_rotation
from range_rte.measurement import SyncedDataset, SyncedSample, true_range
from range_rte.simulation import ScenarioConfig, singular_scenario, trial_rng


def random_dataset(rng, k=8, sigma_r=0.1, spread=1.0, d0_offset=3.0):
    pa = rng.normal(0.0, spread, size=(k, 3))
    pb = rng.normal(0.0, spread, size=(k, 3))
    pb[:, 0] += d0_offset  # keep ranges bounded away from zero
    samples = tuple(
        SyncedSample(t=float(i), d=1.0 + rng.uniform(0, 2), pa=pa[i], pb=pb[i]) for i in range(k)
    )
    return SyncedDataset(samples=samples, sigma_r=sigma_r)


def finite_difference_row(T, pa, pb, h=1e-6):
    v0 = T.as_vector()
    g = np.zeros(4)
    for i in range(4):
        vp, vm = v0.copy(), v0.copy()
        vp[i] += h
        vm[i] -= h
        dp = true_range(Transform4DoF(t=vp[:3], theta=vp[3]), pa, pb)
        dm = true_range(Transform4DoF(t=vm[:3], theta=vm[3]), pa, pb)
        g[i] = (dp - dm) / (2 * h)
    return g


class TestRangeJacobian:
    def test_stationary_target_kills_heading_term(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            T = Transform4DoF(t=rng.normal(size=3) + 2.0, theta=rng.uniform(-math.pi, math.pi))
            J = range_jacobian(T, rng.normal(size=3), np.zeros(3))
            assert J.phi == 0.0

    def test_axis_aligned_example(self):
        T = Transform4DoF(t=[1.0, 0.0, 0.0], theta=0.0)
        J = range_jacobian(T, np.zeros(3), np.zeros(3))
        assert np.allclose(J.u, [1.0, 0.0, 0.0])
        assert J.phi == 0.0
        assert J.d == pytest.approx(1.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            T = Transform4DoF(t=rng.normal(size=3) * 2, theta=rng.uniform(-math.pi, math.pi))
            pa = rng.normal(size=3)
            pb = rng.normal(size=3) + np.array([3.0, 0, 0])
            J = range_jacobian(T, pa, pb)
            fd = finite_difference_row(T, pa, pb)
            assert np.allclose(J.row(), fd, atol=1e-5)

    def test_zero_range_raises(self):
        T = Transform4DoF(t=np.zeros(3), theta=0.0)
        with pytest.raises(SingularGeometryError):
            range_jacobian(T, np.zeros(3), np.zeros(3))


class TestFim:
    def test_rank_bound_with_three_samples(self):
        rng = np.random.default_rng(2)
        ds = random_dataset(rng, k=3)
        T = Transform4DoF(t=[3.0, 0.5, -0.2], theta=0.3)
        rep = fim(T, ds)
        assert rep.rank <= 3
        assert rep.crlb is None
        assert rep.crlb_t is None

    def test_invariant_under_common_world_offset(self):
        # translate the whole world (host trajectory and the target frame
        # origin) by one offset; local target coordinates are untouched
        rng = np.random.default_rng(3)
        ds = random_dataset(rng, k=8)
        T = Transform4DoF(t=[3.0, 0.5, -0.2], theta=0.3)
        rep1 = fim(T, ds)
        c = rng.normal(size=3)
        T2 = Transform4DoF(t=T.t + c, theta=T.theta)
        shifted = SyncedDataset(
            samples=tuple(
                SyncedSample(t=s.t, d=s.d, pa=s.pa + c, pb=s.pb) for s in ds.samples
            ),
            sigma_r=ds.sigma_r,
        )
        rep2 = fim(T2, shifted)
        assert np.allclose(rep1.F, rep2.F, rtol=1e-9, atol=1e-9)

    def test_noise_scaling(self):
        rng = np.random.default_rng(4)
        ds1 = random_dataset(rng, k=8, sigma_r=0.1)
        ds2 = SyncedDataset(samples=ds1.samples, sigma_r=0.2)
        T = Transform4DoF(t=[3.0, 0.5, -0.2], theta=0.3)
        rep1, rep2 = fim(T, ds1), fim(T, ds2)
        assert np.allclose(rep2.F, rep1.F / 4.0)
        assert rep2.crlb_t == pytest.approx(rep1.crlb_t * 4.0)
        assert rep2.crlb_theta == pytest.approx(rep1.crlb_theta * 4.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        ds = random_dataset(rng, k=7)
        T = Transform4DoF(t=[2.5, 0.0, 0.5], theta=-0.4)
        perm = rng.permutation(7)
        permuted = SyncedDataset(
            samples=tuple(
                SyncedSample(t=float(i), d=ds.samples[j].d, pa=ds.samples[j].pa, pb=ds.samples[j].pb)
                for i, j in enumerate(perm)
            ),
            sigma_r=ds.sigma_r,
        )
        assert np.allclose(fim(T, ds).F, fim(T, permuted).F, rtol=1e-12)

    def test_crlb_blocks(self):
        rng = np.random.default_rng(6)
        ds = random_dataset(rng, k=12)
        T = Transform4DoF(t=[3.0, 1.0, 0.2], theta=0.9)
        rep = fim(T, ds)
        inv = np.linalg.inv(rep.F)
        assert rep.crlb_t == pytest.approx(np.trace(inv[:3, :3]), rel=1e-9)
        assert rep.crlb_theta == pytest.approx(inv[3, 3], rel=1e-9)


class TestDetGeometric:
    def test_matches_direct_determinant(self):
        rng = np.random.default_rng(7)
        for k in range(4, 11):
            ds = random_dataset(rng, k=k)
            T = Transform4DoF(t=[3.0, -0.5, 0.7], theta=1.1)
            rep = fim(T, ds)
            det_geo = det_fim_geometric(T, ds)
            assert det_geo == pytest.approx(rep.det_f, rel=1e-8)

    def test_insufficient_data(self):
        rng = np.random.default_rng(8)
        ds = random_dataset(rng, k=3)
        with pytest.raises(InsufficientDataError):
            det_fim_geometric(Transform4DoF(t=[3, 0, 0], theta=0.0), ds)

    def test_parallel_motion_vanishes(self):
        cfg = ScenarioConfig(d0=3.0, D=1.0, n_poses=10, sigma_r=0.1, sigma_o=0.0, trials=1, seed=0)
        T, ds = singular_scenario("parallel", cfg, trial_rng(0, 0))
        rng = np.random.default_rng(9)
        baseline = det_fim_geometric(T, random_dataset(rng, k=10))
        assert det_fim_geometric(T, ds) <= 1e-10 * abs(baseline)

    def test_static_host_vanishes(self):
        cfg = ScenarioConfig(d0=3.0, D=1.0, n_poses=10, sigma_r=0.1, sigma_o=0.0, trials=1, seed=0)
        T, ds = singular_scenario("static_host", cfg, trial_rng(1, 0))
        rng = np.random.default_rng(10)
        baseline = det_fim_geometric(T, random_dataset(rng, k=10))
        assert det_fim_geometric(T, ds) <= 1e-10 * abs(baseline)

    def test_subsampling_cap(self):
        rng = np.random.default_rng(11)
        ds = random_dataset(rng, k=60)
        T = Transform4DoF(t=[3.0, 0.0, 0.0], theta=0.2)
        # capped evaluation must run and stay positive for observable data
        val = det_fim_geometric(T, ds, max_samples=20)
        assert val > 0


class TestDetSubproblems:
    def _reduced_det(self, variant, ds, T):
        """Oracle: determinant of the reduced J' J / sigma^2."""
        pa, pb = ds.pa.copy(), ds.pb.copy()
        if variant.startswith("2d"):
            pa[:, 2] = 0.0
            pb[:, 2] = 0.0
        W = T.t + pb @ T.rotation().T - pa
        if variant.startswith("2d"):
            W[:, 2] = 0.0
        d = np.linalg.norm(W, axis=1)
        U = W / d[:, None]
        rot_b = pb @ T.rotation().T
        phi = np.einsum("ij,ij->i", np.cross(np.broadcast_to([0.0, 0.0, 1.0], rot_b.shape), rot_b), U)
        if variant == "3d_known_theta":
            J = U
        elif variant == "2d_unknown_theta":
            J = np.column_stack([U[:, 0], U[:, 1], phi])
        else:
            J = U[:, :2]
        F = J.T @ J / ds.sigma_r**2
        return float(np.linalg.det(F))

    @pytest.mark.parametrize("variant", ["3d_known_theta", "2d_unknown_theta", "2d_known_theta"])
    def test_matches_reduced_jacobian_oracle(self, variant):
        rng = np.random.default_rng(12)
        for k in (4, 7, 10):
            ds = random_dataset(rng, k=k)
            T = Transform4DoF(t=[3.0, 0.5, 0.3], theta=0.6)
            got = det_fim_subproblem(variant, ds, T)
            assert got == pytest.approx(self._reduced_det(variant, ds, T), rel=1e-8)

    def test_planar_parallel_vanishes(self):
        # all relative vectors parallel in the plane: sin^2(alpha) = 0
        T = Transform4DoF(t=[2.0, 0.0, 0.0], theta=0.0)
        pa = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        pb = pa.copy()  # identical motion: relative vector fixed
        ds = SyncedDataset(
            samples=tuple(SyncedSample(t=float(i), d=2.0, pa=pa[i], pb=pb[i]) for i in range(3)),
            sigma_r=0.1,
        )
        assert det_fim_subproblem("2d_known_theta", ds, T) == pytest.approx(0.0, abs=1e-18)

    def test_static_target_vanishes(self):
        rng = np.random.default_rng(13)
        pa = rng.normal(size=(5, 3))
        samples = tuple(
            SyncedSample(t=float(i), d=3.0, pa=pa[i], pb=np.zeros(3)) for i in range(5)
        )
        ds = SyncedDataset(samples=samples, sigma_r=0.1)
        T = Transform4DoF(t=[3.0, 1.0, 0.0], theta=0.7)
        assert det_fim_subproblem("2d_unknown_theta", ds, T) == pytest.approx(0.0, abs=1e-18)

    def test_nonnegative(self):
        rng = np.random.default_rng(14)
        for variant in ("3d_known_theta", "2d_unknown_theta", "2d_known_theta"):
            for _ in range(5):
                ds = random_dataset(rng, k=6)
                T = Transform4DoF(t=[3.0, 0.0, 0.0], theta=0.1)
                assert det_fim_subproblem(variant, ds, T) >= 0.0

    def test_unknown_variant_rejected(self):
        rng = np.random.default_rng(15)
        ds = random_dataset(rng, k=5)
        with pytest.raises(ValueError):
            det_fim_subproblem("6dof", ds, Transform4DoF(t=[1, 0, 0], theta=0.0))


class TestSingularityReport:
    def test_identity_not_singular(self):
        flags = singularity_report(np.eye(4))
        assert flags.configuration_singular is False
        assert flags.per_param_unobservable == (False,) * 4

    def test_rank_deficient_flags_heading(self):
        flags = singularity_report(np.diag([1.0, 1.0, 1.0, 0.0]))
        assert flags.configuration_singular is True
        assert flags.per_param_unobservable[3] is True

    def test_planar_scenario_flagged(self):
        cfg = ScenarioConfig(d0=3.0, D=1.0, n_poses=20, sigma_r=0.1, sigma_o=0.0, trials=1, seed=0)
        T, ds = singular_scenario("planar_linear", cfg, trial_rng(2, 0))
        rep = fim(T, ds)
        flags = singularity_report(rep.F)
        assert flags.configuration_singular is True
        assert any(flags.per_param_unobservable[:3])

    def test_selective_flag_with_invertible_fim(self):
        # one parameter much worse than the rest, but still invertible
        F = np.diag([1.0, 1.0, 1.0, 1e-4])
        flags = singularity_report(F, kappa_threshold=1e6)
        assert flags.configuration_singular is False  # kappa = 1e4
        assert flags.per_param_unobservable == (False, False, False, True)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            singularity_report(np.diag([1.0, 1.0, 1.0, -0.5]))


class TestConfidenceIntervals:
    def test_scaled_identity(self):
        T = Transform4DoF(t=np.zeros(3), theta=0.0)
        ci = confidence_intervals(T, 4.0 * np.eye(4))
        assert np.allclose(ci[:, 0], -0.98)
        assert np.allclose(ci[:, 1], 0.98)

    def test_half_width(self):
        T = Transform4DoF(t=[1.0, 2.0, 3.0], theta=0.5)
        ci = confidence_intervals(T, 100.0 * np.eye(4))
        widths = ci[:, 1] - ci[:, 0]
        assert np.allclose(widths, 2 * 0.196)
        assert np.allclose(ci.mean(axis=1), T.as_vector())

    def test_singular_raises_with_flags(self):
        T = Transform4DoF(t=np.zeros(3), theta=0.0)
        with pytest.raises(SingularFimError) as err:
            confidence_intervals(T, np.diag([1.0, 1.0, 1.0, 0.0]))
        assert err.value.flags.configuration_singular is True


def test_jacobian_matrix_consistent_with_rows():
    rng = np.random.default_rng(16)
    ds = random_dataset(rng, k=6)
    T = Transform4DoF(t=[3.0, 0.2, -0.1], theta=0.8)
    J = jacobian_matrix(T, ds)
    for i, s in enumerate(ds.samples):
        assert np.allclose(J[i], range_jacobian(T, s.pa, s.pb).row(), atol=1e-12)
