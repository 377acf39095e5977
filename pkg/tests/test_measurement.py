import math

import numpy as np
import pytest

from range_rte.geometry import LeverArm, Pose, Transform4DoF, apply_transform, heading_rotation, yaw_quat
from range_rte.measurement import (
    NoOverlapError,
    RangeSample,
    SyncedDataset,
    SyncedSample,
    debias_squared,
    ingest_logs,
    motion_excitation_check,
    sliding_outlier_filter,
    squared_covariance,
    true_range,
)


def make_dataset(pa, pb, d, sigma_r=0.1, d0=None):
    samples = tuple(
        SyncedSample(t=float(i), d=float(di), pa=np.asarray(pai), pb=np.asarray(pbi))
        for i, (di, pai, pbi) in enumerate(zip(d, pa, pb))
    )
    return SyncedDataset(samples=samples, sigma_r=sigma_r, d0=d0)


class TestTrueRange:
    def test_pure_translation(self):
        T = Transform4DoF(t=[3.0, 0.0, 0.0], theta=0.0)
        assert true_range(T, np.zeros(3), np.zeros(3)) == pytest.approx(3.0)

    def test_rotation_preserves_norm(self):
        pb = np.array([1.0, 2.0, -0.5])
        for theta in np.linspace(-math.pi, math.pi, 9):
            T = Transform4DoF(t=np.zeros(3), theta=theta)
            assert true_range(T, np.zeros(3), pb) == pytest.approx(np.linalg.norm(pb))

    def test_matches_compose_then_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            T = Transform4DoF(t=rng.normal(size=3), theta=rng.uniform(-math.pi, math.pi))
            pa, pb = rng.normal(size=3), rng.normal(size=3)
            expected = np.linalg.norm(apply_transform(T, pb) - pa)
            assert true_range(T, pa, pb) == pytest.approx(expected, rel=1e-12)

    def test_invariant_under_common_rigid_motion(self):
        rng = np.random.default_rng(1)
        T = Transform4DoF(t=rng.normal(size=3), theta=0.4)
        pa, pb = rng.normal(size=3), rng.normal(size=3)
        d0 = true_range(T, pa, pb)
        # move the host frame: rotate by psi about the origin and shift
        psi, shift = 0.8, rng.normal(size=3)
        R = heading_rotation(psi)
        T2 = Transform4DoF(t=R @ T.t + shift, theta=T.theta + psi)
        assert true_range(T2, R @ pa + shift, pb) == pytest.approx(float(d0), rel=1e-12)


class TestIngest:
    def _odom(self, n, dt, offset=0.0, vel=(0.0, 0.0, 0.0)):
        return [
            Pose(t=offset + i * dt, p=np.asarray(vel) * (offset + i * dt), q=yaw_quat(0.0))
            for i in range(n)
        ]

    def test_range_on_odometry_timestamp_uses_pose(self):
        odom_a = self._odom(5, 1.0)
        odom_b = self._odom(5, 1.0)
        ranges = [RangeSample(t=2.0, d=5.0)]
        ds, dropped = ingest_logs(odom_a, odom_b, ranges, sigma_r=0.1)
        assert dropped == 0
        assert np.array_equal(ds.samples[0].pa, odom_a[2].p)

    def test_static_agents(self):
        odom_a = [Pose(t=float(i), p=[0.0, 0.0, 0.0]) for i in range(4)]
        odom_b = [Pose(t=float(i), p=[5.0, 0.0, 0.0]) for i in range(4)]
        ranges = [RangeSample(t=1.5, d=5.0)]
        ds, _ = ingest_logs(odom_a, odom_b, ranges)
        assert np.allclose(ds.samples[0].pa, [0.0, 0.0, 0.0])
        assert np.allclose(ds.samples[0].pb, [5.0, 0.0, 0.0])

    def test_37hz_against_200hz_over_10s(self):
        odom_a = self._odom(2001, 1.0 / 200.0)
        odom_b = self._odom(2001, 1.0 / 200.0)
        ranges = [RangeSample(t=i / 37.0, d=3.0) for i in range(1000) if i / 37.0 <= 12.0]
        ranges = [r for r in ranges if r.t < 10.5]
        ds, dropped = ingest_logs(odom_a, odom_b, ranges)
        # odometry covers [0, 10]; 37 Hz ranges land 370 +- 1 samples inside
        assert abs(len(ds) - 370) <= 1
        assert len(ds) + dropped == len(ranges)

    def test_uncovered_ranges_dropped(self):
        odom_a = self._odom(11, 1.0)
        odom_b = self._odom(11, 1.0, offset=2.0)  # covers [2, 12]
        ranges = [RangeSample(t=float(t), d=1.0) for t in [0.5, 1.5, 3.0, 9.0, 11.0]]
        ds, dropped = ingest_logs(odom_a, odom_b, ranges)
        assert dropped == 3  # 0.5, 1.5 before overlap; 11.0 after host coverage... host covers [0,10]
        assert [s.t for s in ds.samples] == [3.0, 9.0]

    def test_no_overlap_raises(self):
        odom_a = self._odom(5, 1.0)
        odom_b = self._odom(5, 1.0, offset=100.0)
        with pytest.raises(NoOverlapError):
            ingest_logs(odom_a, odom_b, [RangeSample(t=2.0, d=1.0)])

    def test_lever_arm_applied(self):
        pose = [Pose(t=float(i), p=[1.0, 0.0, 0.0], q=yaw_quat(math.pi / 2)) for i in range(3)]
        arm = LeverArm([0.1, 0.0, 0.0])
        ds, _ = ingest_logs(pose, pose, [RangeSample(t=1.0, d=1.0)], arm_a=arm, arm_b=LeverArm())
        # 90 degree yaw turns the +x arm into +y
        assert np.allclose(ds.samples[0].pa, [1.0, 0.1, 0.0], atol=1e-12)
        assert np.allclose(ds.samples[0].pb, [1.0, 0.0, 0.0])

    def test_output_timestamps_subset_of_input(self):
        odom = self._odom(20, 0.5)
        ranges = [RangeSample(t=0.3 + 0.7 * i, d=2.0) for i in range(12)]
        ds, dropped = ingest_logs(odom, odom, ranges)
        in_times = {r.t for r in ranges}
        assert all(s.t in in_times for s in ds.samples)

    def test_d0_defaults_to_first_range(self):
        odom = self._odom(5, 1.0)
        ds, _ = ingest_logs(odom, odom, [RangeSample(t=1.0, d=4.2), RangeSample(t=2.0, d=4.4)])
        assert ds.d0 == pytest.approx(4.2)


class TestDebias:
    def test_formulas_match_monte_carlo(self):
        # antithetic draws (eta, -eta) cancel the odd term of
        # nu = 2 d eta + eta^2 exactly, so the sample mean and variance
        # resolve the formulas well inside 1% at 10^6 draws
        rng = np.random.default_rng(2024)
        d, sigma = 1.0, 0.1
        half = rng.normal(0.0, sigma, size=5 * 10**5)
        eta = np.concatenate([half, -half])
        nu = 2 * d * eta + eta**2
        assert np.mean(nu) == pytest.approx(sigma**2, rel=0.01)
        assert np.var(nu) == pytest.approx(sigma**2 * (4 * d**2 + 2 * sigma**2), rel=0.01)

    def test_example_values(self):
        ds = make_dataset(pa=[np.zeros(3)], pb=[np.zeros(3) + 1], d=[1.0], sigma_r=0.1)
        stats = debias_squared(ds)
        assert stats.s[0] == pytest.approx(0.99)
        assert stats.sigma_s_diag[0] == pytest.approx(0.0402)

    def test_noiseless_limit(self):
        ds = make_dataset(pa=[np.zeros(3)], pb=[np.ones(3)], d=[2.0], sigma_r=1e-12)
        stats = debias_squared(ds)
        assert stats.s[0] == pytest.approx(4.0, abs=1e-12)
        assert stats.sigma_s_diag[0] < 1e-20

    def test_elementwise_independence(self):
        ds = make_dataset(pa=[np.zeros(3)] * 2, pb=[np.ones(3)] * 2, d=[3.0, 3.0], sigma_r=0.2)
        stats = debias_squared(ds)
        assert stats.s[0] == stats.s[1]
        assert stats.sigma_s_diag[0] == stats.sigma_s_diag[1]

    def test_debias_unbiased_under_model(self):
        # E[d~^2 - sigma^2] = d^2 within 3 standard errors
        rng = np.random.default_rng(55)
        d, sigma, n = 2.5, 0.3, 200_000
        d_tilde = d + rng.normal(0.0, sigma, size=n)
        s = d_tilde**2 - sigma**2
        se = np.std(s) / math.sqrt(n)
        assert abs(np.mean(s) - d**2) < 3 * se

    def test_full_covariance_off_diagonal(self):
        d = np.array([1.0, 2.0])
        Sr = np.array([[0.01, 0.004], [0.004, 0.01]])
        Ss = squared_covariance(d, Sr)
        assert Ss[0, 0] == pytest.approx(0.01 * (4 * 1.0 + 2 * 0.01))
        assert Ss[0, 1] == pytest.approx(0.004 * (4 * 1.0 * 2.0 + 2 * 0.004))
        assert Ss[0, 1] == Ss[1, 0]
        # diagonal Sigma_r reproduces the elementwise path
        ds = make_dataset(pa=[np.zeros(3)] * 2, pb=[np.ones(3)] * 2, d=d, sigma_r=0.1)
        stats = debias_squared(ds)
        full = squared_covariance(d, 0.01 * np.eye(2))
        assert np.allclose(np.diag(full), stats.sigma_s_diag)


class TestOutlierFilter:
    def test_constant_stream_accepted(self):
        stream = [RangeSample(t=float(i), d=3.0) for i in range(100)]
        out = sliding_outlier_filter(stream, window=20, threshold=0.005)
        assert len(out) == 100

    def test_spike_rejected(self):
        stream = [RangeSample(t=float(i), d=3.0) for i in range(40)]
        stream.insert(30, RangeSample(t=29.5, d=4.0))
        out = sliding_outlier_filter(stream, window=20, threshold=0.005)
        assert all(s.d == 3.0 for s in out)
        assert len(out) == 40

    def test_slow_ramp_accepted(self):
        stream = [RangeSample(t=float(i), d=3.0 + 0.001 * i) for i in range(200)]
        out = sliding_outlier_filter(stream, window=20, threshold=0.005)
        assert len(out) == 200

    def test_order_preserved_and_idempotent(self):
        rng = np.random.default_rng(3)
        stream = [RangeSample(t=float(i), d=3.0 + 0.03 * rng.standard_normal()) for i in range(150)]
        stream[60] = RangeSample(t=60.0, d=4.5)
        out = sliding_outlier_filter(stream, window=20, threshold=0.005)
        times = [s.t for s in out]
        assert times == sorted(times)
        again = sliding_outlier_filter(out, window=20, threshold=0.005)
        assert [s.d for s in again] == [s.d for s in out]

    def test_warmup_always_accepts(self):
        stream = [RangeSample(t=float(i), d=float(1 + 7 * (i % 2))) for i in range(15)]
        out = sliding_outlier_filter(stream, window=20, threshold=0.005)
        assert len(out) == 15

    def test_increase_mode(self):
        # alternative trigger: variance increment above threshold
        stream = [RangeSample(t=float(i), d=3.0) for i in range(30)]
        stream.append(RangeSample(t=30.0, d=3.2))
        out = sliding_outlier_filter(stream, window=20, threshold=0.001, mode="increase")
        assert len(out) == 30  # the step raises variance by ~0.002 > 0.001


class TestExcitation:
    def test_static_agents_false(self):
        pos = np.zeros((100, 3))
        assert motion_excitation_check(pos, pos) is False

    def test_target_z_only_false(self):
        rng = np.random.default_rng(4)
        host = rng.normal(0.0, 1.0, size=(100, 3))
        target = np.zeros((100, 3))
        target[:, 2] = rng.normal(0.0, 1.0, size=100)
        assert motion_excitation_check(host, target, var_threshold=0.05, n=100) is False

    def test_rich_motion_true(self):
        rng = np.random.default_rng(5)
        a = np.cumsum(rng.normal(0.0, 0.5, size=(100, 3)), axis=0)
        b = np.cumsum(rng.normal(0.0, 0.5, size=(100, 3)), axis=0)
        assert motion_excitation_check(a, b, var_threshold=0.05, n=100) is True

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            motion_excitation_check(np.zeros((0, 3)), np.zeros((5, 3)))


def test_dataset_requires_increasing_timestamps():
    s = [
        SyncedSample(t=0.0, d=1.0, pa=np.zeros(3), pb=np.ones(3)),
        SyncedSample(t=0.0, d=1.0, pa=np.zeros(3), pb=np.ones(3)),
    ]
    with pytest.raises(ValueError):
        SyncedDataset(samples=tuple(s), sigma_r=0.1)
