"""Range measurement model, data synchronization and sanity filters.

Covers: temporal alignment of ranges against both odometry streams
(with lever-arm compensation), the squared-distance debiasing used by
the weighted least-squares pipeline, a sliding-window variance filter
for UWB outliers, and the motion-excitation check run before estimation.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import LeverArm, Pose, Transform4DoF, antenna_world_position, interpolate_pose

# Floor keeps noiseless (sigma_r = 0) synthetic data usable: weights and
# information matrices need a strictly positive range variance.
SIGMA_R_FLOOR = 1e-9


class NoOverlapError(ValueError):
    """No range measurement is covered by both odometry streams."""


@dataclass(frozen=True)
class RangeSample:
    """One UWB range measurement: timestamp (s) and measured distance (m)."""

    t: float
    d: float

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise ValueError(f"range timestamp must be finite, got {self.t}")
        if not self.d > 0:
            raise ValueError(f"measured range must be positive, got {self.d}")


@dataclass(frozen=True)
class SyncedSample:
    """A range paired with interpolated antenna positions of both agents.

    pa is the host antenna position in the host local frame; pb is the
    target antenna position in the target's own local frame.
    """

    t: float
    d: float
    pa: np.ndarray
    pb: np.ndarray

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError(f"range must be positive, got {self.d}")
        object.__setattr__(self, "pa", np.asarray(self.pa, dtype=float))
        object.__setattr__(self, "pb", np.asarray(self.pb, dtype=float))
        if not (np.all(np.isfinite(self.pa)) and np.all(np.isfinite(self.pb))):
            raise ValueError("antenna positions must be finite")


@dataclass(frozen=True)
class SyncedDataset:
    """Time-ordered synced samples plus the range noise level.

    d0 is the (noisy) first inter-origin distance when available; it feeds
    the norm constraint of the lifted estimator and may be None.
    """

    samples: tuple
    sigma_r: float
    d0: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.sigma_r > 0:
            raise ValueError(f"sigma_r must be positive, got {self.sigma_r}")
        if self.d0 is not None and not self.d0 > 0:
            raise ValueError(f"d0 must be positive when present, got {self.d0}")
        times = [s.t for s in self.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("sample timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def t(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    @cached_property
    def d(self) -> np.ndarray:
        return np.array([s.d for s in self.samples])

    @cached_property
    def pa(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 3))
        return np.array([s.pa for s in self.samples])

    @cached_property
    def pb(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 3))
        return np.array([s.pb for s in self.samples])

    def window(self, start: int, stop: int, keep_d0: bool = False) -> "SyncedDataset":
        """Dataset restricted to samples[start:stop]."""
        return SyncedDataset(
            samples=self.samples[start:stop],
            sigma_r=self.sigma_r,
            d0=self.d0 if keep_d0 else None,
        )


@dataclass(frozen=True)
class SquaredStats:
    """Debiased squared distances and the diagonal of their covariance."""

    s: np.ndarray
    sigma_s_diag: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float))
        object.__setattr__(self, "sigma_s_diag", np.asarray(self.sigma_s_diag, dtype=float))
        if np.any(self.sigma_s_diag <= 0):
            raise ValueError("squared-distance variances must be strictly positive")


def true_range(T: Transform4DoF, pa, pb):
    """Inter-antenna distance ||t + C(theta) pb - pa|| under transform T.

    Accepts single points (3,) or batches (N, 3); broadcasting follows numpy.
    """
    pa = np.asarray(pa, dtype=float)
    pb = np.asarray(pb, dtype=float)
    w = T.t + pb @ T.rotation().T - pa
    return np.linalg.norm(w, axis=-1)


def ingest_logs(
    odom_a: Sequence[Pose],
    odom_b: Sequence[Pose],
    ranges: Iterable[RangeSample],
    arm_a: LeverArm = LeverArm(),
    arm_b: LeverArm = LeverArm(),
    sigma_r: float = 0.1,
    d0: Optional[float] = None,
    use_first_range_as_d0: bool = True,
) -> tuple[SyncedDataset, int]:
    """Synchronize range measurements against both odometry streams.

    Each surviving range gets the interpolated, lever-arm-compensated
    antenna positions of both agents at its timestamp. Ranges not
    bracketed by odometry on BOTH sides are dropped (no extrapolation).

    Returns (dataset, n_dropped). Raises NoOverlapError when no range
    falls inside the common odometry window.
    """
    odom_a = list(odom_a)
    odom_b = list(odom_b)
    if not odom_a or not odom_b:
        raise NoOverlapError("empty odometry stream")
    ta = np.array([p.t for p in odom_a])
    tb = np.array([p.t for p in odom_b])
    lo = max(ta[0], tb[0])
    hi = min(ta[-1], tb[-1])

    def interp(stream, times, t):
        j = int(np.searchsorted(times, t, side="right"))
        if j == 0:
            return stream[0] if times[0] == t else None
        if j == len(times):
            return stream[-1] if times[-1] == t else None
        if times[j - 1] == t:
            return stream[j - 1]
        return interpolate_pose(stream[j - 1], stream[j], t)

    samples = []
    dropped = 0
    for r in ranges:
        if r.t < lo or r.t > hi:
            dropped += 1
            continue
        pose_a = interp(odom_a, ta, r.t)
        pose_b = interp(odom_b, tb, r.t)
        if pose_a is None or pose_b is None:
            dropped += 1
            continue
        samples.append(
            SyncedSample(
                t=r.t,
                d=r.d,
                pa=antenna_world_position(pose_a, arm_a),
                pb=antenna_world_position(pose_b, arm_b),
            )
        )
    if not samples:
        raise NoOverlapError("no range measurement inside the common odometry window")
    if d0 is None and use_first_range_as_d0:
        d0 = samples[0].d
    return SyncedDataset(samples=tuple(samples), sigma_r=max(sigma_r, SIGMA_R_FLOOR), d0=d0), dropped


def debias_squared(dataset: SyncedDataset) -> SquaredStats:
    """Debiased squared distances with their (diagonal) covariance.

    The noise on d~^2 is nu = 2 d eta + eta^2 with mean sigma_r^2 and
    variance sigma_r^2 (4 d~^2 + 2 sigma_r^2); subtracting the mean gives
    an approximately Gaussian squared-distance error.
    """
    var_r = dataset.sigma_r**2
    d = dataset.d
    s = d**2 - var_r
    sigma_s = var_r * (4.0 * d**2 + 2.0 * var_r)
    return SquaredStats(s=s, sigma_s_diag=sigma_s)


def squared_covariance(d_tilde, sigma_r_matrix) -> np.ndarray:
    """Full covariance of the squared-distance noise for a general range
    covariance: (Sigma_s)_{ij} = (Sigma_r)_{ij} [4 d~_i d~_j + 2 (Sigma_r)_{ij}].

    Only needed when range noise is correlated; the i.i.d. pipeline uses
    debias_squared's diagonal.
    """
    d = np.asarray(d_tilde, dtype=float)
    Sr = np.asarray(sigma_r_matrix, dtype=float)
    return Sr * (4.0 * np.outer(d, d) + 2.0 * Sr)


def sliding_outlier_filter(
    ranges: Iterable[RangeSample],
    window: int = 20,
    threshold: float = 0.005,
    mode: str = "absolute",
) -> list[RangeSample]:
    """Reject range samples that inflate the sliding-window variance.

    A candidate is evaluated against the window of the latest `window`
    accepted samples (candidate included); it is discarded when the
    population variance exceeds `threshold` (m^2). The first `window`
    samples are always accepted so the filter can warm up.

    mode "increase" discards only when the variance *increase* over the
    previous window exceeds the threshold (alternative reading of the
    trigger; default is the absolute test).
    """
    if window < 2:
        raise ValueError(f"window must be >= 2, got {window}")
    if mode not in ("absolute", "increase"):
        raise ValueError(f"unknown mode {mode!r}")
    buf: deque[float] = deque(maxlen=window)
    out = []
    prev_var = 0.0
    for r in ranges:
        if len(buf) < window:
            buf.append(r.d)
            out.append(r)
            prev_var = float(np.var(buf))
            continue
        cand = np.array(list(buf)[1:] + [r.d])
        var = float(np.var(cand))
        trigger = var - prev_var if mode == "increase" else var
        if trigger > threshold:
            continue
        buf.append(r.d)
        out.append(r)
        prev_var = var
    return out


def motion_excitation_check(
    recent_positions_a,
    recent_positions_b,
    var_threshold: float = 0.05,
    n: int = 100,
) -> bool:
    """True when both agents show per-axis position variance above threshold.

    Uses the last `n` positions of each agent. Guards against singular
    configurations from insufficient motion (static agent, hovering,
    single-axis motion) before any estimation is attempted.
    """
    for positions in (recent_positions_a, recent_positions_b):
        arr = np.asarray(positions, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
            raise ValueError("positions must be a non-empty (N, 3) array")
        tail = arr[-n:]
        if np.any(np.var(tail, axis=0) <= var_threshold):
            return False
    return True
