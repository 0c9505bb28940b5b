"""Outlier-robust magnetic localization by importance-weighted sampling.

Each step draws ``M`` control samples ``tau = (a, omega)`` around the
previous estimate, pushes them through the kinematic model, scores every
propagated state with the truncated matching cost and returns the state
obtained from the softmax-weighted mean control::

    w_j = exp(-(S_j - S_min) / lambda) / sum_k exp(-(S_k - S_min) / lambda)

Sampling the 6-dim control instead of the 12-dim state keeps the per-step
cost at ``O(M N)`` map lookups.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import EstimatorError, InvalidInputError, StepFailure
from .mfmap import MagneticMap
from .sim import MeasurementFrame, SensorRig
from .so3 import exp_so3, log_so3
from .state import ControlSample, State

__all__ = [
    "State",
    "ControlSample",
    "EstimatorConfig",
    "StepDiagnostics",
    "sensor_pose",
    "matching_cost",
    "batch_cost",
    "propagate",
    "propagate_batch",
    "importance_weights",
    "estimate_step",
    "run_sequence",
]

DEFAULT_SAMPLING_STD = (2.0, 2.0, 0.05, 0.02, 0.02, 0.2)


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator parameters.

    ``c_squared`` is the per-sensor outlier ceiling in uT^2. When left as
    ``None`` it is derived from ``sigma_n`` as ``3 * (kappa * sigma_n)**2``
    (a ``kappa``-sigma bound on each of the three components).
    ``sampling_std`` holds the standard deviations of (ax, ay, az) in m/s^2
    and (wx, wy, wz) in rad/s.
    """

    M: int = 1024
    lam: float = 1.0
    c_squared: Optional[float] = None
    sigma_n: float = 0.5
    kappa: float = 3.0
    sampling_std: tuple = DEFAULT_SAMPLING_STD
    rng_seed: int = 0
    shift_costs: bool = True
    relocalize: Optional[Callable] = None
    prior_center: str = "turn"
    rate_memory: tuple = (0.0, 0.0, 1.0)
    damping: float = 0.0

    def __post_init__(self):
        if self.M < 1:
            raise InvalidInputError("M must be >= 1")
        if not self.lam > 0:
            raise InvalidInputError("lambda must be positive")
        if len(self.sampling_std) != 6 or any(s < 0 for s in self.sampling_std):
            raise InvalidInputError("sampling_std needs six non-negative entries")
        if not 0.0 <= self.damping < 1.0:
            raise InvalidInputError("damping must lie in [0, 1)")
        if self.c_squared is not None and not self.c_squared > 0:
            raise InvalidInputError("c_squared must be positive")

    @property
    def ceiling(self) -> float:
        if self.c_squared is not None:
            return float(self.c_squared)
        return 3.0 * (self.kappa * self.sigma_n) ** 2


@dataclass
class StepDiagnostics:
    s_min: float
    effective_sample_size: float
    inlier_fraction: float
    elapsed: float
    tau_hat: np.ndarray = field(default_factory=lambda: np.zeros(6))
    center: np.ndarray = field(default_factory=lambda: np.zeros(6))
    best_tau: np.ndarray = field(default_factory=lambda: np.zeros(6))
    inliers: int = 0
    discarded: int = 0
    failed: bool = False


_BLOCK_POINTS = 4096


def sensor_pose(x: State, rig: SensorRig, i: int):
    """World rotation and position of sensor ``i`` (0-based)."""
    R = x.R
    return R @ rig.rotations[i], R @ rig.translations[i] + x.p


def batch_cost(R: np.ndarray, p: np.ndarray, frame: MeasurementFrame, mfmap: MagneticMap, rig: SensorRig, c_squared: float):
    """Truncated matching cost for ``M`` body poses.

    A sensor is an outlier when its cell is unmapped or its squared residual
    reaches ``c_squared``; it then contributes exactly ``c_squared``.

    Returns:
        ``(costs, inlier_counts)``, both of shape ``(M,)``.
    """
    if len(frame) != len(rig):
        raise InvalidInputError("frame has %d readings but rig has %d sensors" % (len(frame), len(rig)))
    n = len(rig)
    q = np.einsum("nij,nj->ni", rig.rotations, frame.readings)
    body = np.concatenate([q, rig.translations]).T
    m = len(R)
    costs = np.empty(m)
    inliers = np.empty(m, dtype=np.int64)
    # blocking keeps temporaries under the allocator's mmap threshold, so
    # time stays linear in M*N instead of paying fresh page faults per call
    step = max(1, _BLOCK_POINTS // n)
    for lo in range(0, m, step):
        hi = min(m, lo + step)
        k = hi - lo
        # one flat matmul rotates readings and lever arms together
        both = (R[lo:hi].reshape(3 * k, 3) @ body).reshape(k, 3, 2 * n)
        rb = both[:, :, :n].transpose(0, 2, 1)
        ps = both[:, :, n:].transpose(0, 2, 1) + p[lo:hi, None, :]
        mvals, mapped = mfmap.query_many(ps)
        d = mvals - rb
        r2 = np.einsum("mni,mni->mn", d, d)
        inlier = mapped & (r2 < c_squared)
        costs[lo:hi] = np.where(inlier, r2, c_squared).sum(axis=1)
        inliers[lo:hi] = inlier.sum(axis=1)
    return costs, inliers


def matching_cost(x: State, frame: MeasurementFrame, mfmap: MagneticMap, rig: SensorRig, c_squared: float):
    """``(cost, inlier_count)`` of a single state."""
    c, n = batch_cost(x.R[None], x.p[None], frame, mfmap, rig, c_squared)
    return float(c[0]), int(n[0])


def propagate(x: State, tau: ControlSample, dt: float) -> State:
    """Constant-acceleration position update and left-multiplied rotation
    increment; velocity integrates ``a`` and angular velocity is replaced by
    the sampled ``omega``."""
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    p = x.p + x.v * dt + 0.5 * tau.a * dt * dt
    R = exp_so3(tau.omega * dt) @ x.R
    return State(p, log_so3(R, check=False), x.v + tau.a * dt, tau.omega, x.t + dt)


def propagate_batch(p, R, v, taus: np.ndarray, dt: float):
    """Vectorized :func:`propagate` of one state (``R`` a single 3x3) over ``taus`` of shape ``(M, 6)``.

    Returns ``(p, R, v)`` stacks; orientation stays a rotation matrix.
    """
    a = taus[:, :3]
    pn = p + v * dt + 0.5 * dt * dt * a
    inc = exp_so3(taus[:, 3:] * dt)
    Rn = (inc.reshape(-1, 3) @ R).reshape(inc.shape)
    vn = v + dt * a
    return pn, Rn, vn


def importance_weights(costs, lam: float, shift: bool = True) -> np.ndarray:
    """Normalized weights ``exp(-S/lambda)`` with non-finite costs dropped.

    With ``shift`` the minimum cost is subtracted first, so the best sample
    has exponent zero and the normalizer is at least one.
    """
    costs = np.asarray(costs, dtype=float)
    finite = np.isfinite(costs)
    if not np.any(finite):
        raise StepFailure("all sample costs are non-finite")
    lo = costs[finite].min() if shift else 0.0
    # dropped samples go to +inf so they map to zero weight without overflow
    s = np.where(finite, costs - lo, np.inf)
    e = np.exp(-s / lam)
    return e / e.sum()


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2, step)))


def draw_controls(center: np.ndarray, cfg: EstimatorConfig, step: int) -> np.ndarray:
    rng = _step_rng(cfg.rng_seed, step)
    return center + rng.standard_normal((cfg.M, 6)) * np.asarray(cfg.sampling_std, dtype=float)


def estimate_step(
    prev: State,
    frame: MeasurementFrame,
    mfmap: MagneticMap,
    rig: SensorRig,
    cfg: EstimatorConfig,
    step: int = 0,
    tau_prev=None,
    correction=None,
):
    """One importance-sampling update.

    Args:
        tau_prev: previous control estimate used as the sampling center;
            defaults to zero acceleration and ``prev.omega``.
        step: step index, mixed into the RNG stream for reproducibility.
        correction: previous ``tau_hat - center``; ``cfg.damping`` times
            this is subtracted from the sampling center.

    Returns:
        ``(state, diagnostics)``.

    Raises:
        EstimatorError: on an empty map.
        StepFailure: when every sample's cost is non-finite.
    """
    t0 = time.perf_counter()
    if len(mfmap) == 0:
        raise EstimatorError("map is empty")
    dt = frame.t - prev.t
    if not dt > 0:
        raise InvalidInputError("frame time must be after the previous state")
    if tau_prev is None:
        w = np.asarray(cfg.rate_memory, dtype=float) * prev.omega
        v = prev.v
        # w x v written out; np.cross is slow on single vectors
        center = np.array([w[1] * v[2] - w[2] * v[1], w[2] * v[0] - w[0] * v[2], w[0] * v[1] - w[1] * v[0],
                           w[0], w[1], w[2]])
    else:
        center = tau_prev.as_vector() if isinstance(tau_prev, ControlSample) else np.asarray(tau_prev, dtype=float)
    if correction is not None and cfg.damping > 0:
        center = center - cfg.damping * np.asarray(correction, dtype=float)

    taus = draw_controls(center, cfg, step)
    R0 = prev.R
    costs = np.empty(cfg.M)
    inliers = np.empty(cfg.M, dtype=np.int64)
    # propagate and score block by block so each block stays in cache
    step_m = max(1, _BLOCK_POINTS // len(rig))
    for lo in range(0, cfg.M, step_m):
        blk = slice(lo, min(cfg.M, lo + step_m))
        pn, Rn, _ = propagate_batch(prev.p, R0, prev.v, taus[blk], dt)
        costs[blk], inliers[blk] = batch_cost(Rn, pn, frame, mfmap, rig, cfg.ceiling)
    finite = np.isfinite(costs)
    w = importance_weights(costs, cfg.lam, shift=cfg.shift_costs)
    tau_hat = w @ taus

    best = int(np.argmin(np.where(finite, costs, np.inf)))
    state = propagate(prev, ControlSample.from_vector(tau_hat), dt)
    diag = StepDiagnostics(
        s_min=float(costs[best]),
        effective_sample_size=float(1.0 / np.sum(w * w)),
        inlier_fraction=float(inliers[best]) / len(rig),
        elapsed=time.perf_counter() - t0,
        tau_hat=tau_hat,
        center=center,
        best_tau=taus[best].copy(),
        inliers=int(inliers[best]),
        discarded=int(np.count_nonzero(~finite)),
    )
    return state, diag


def coast(x: State, dt: float) -> State:
    """Constant-velocity, constant-rate extrapolation."""
    return propagate(x, ControlSample(np.zeros(3), x.omega), dt)


def run_sequence(frames, initial: State, mfmap: MagneticMap, rig: SensorRig, cfg: EstimatorConfig):
    """Fold :func:`estimate_step` over time-ordered ``frames``.

    A failed step is recorded with ``diagnostics.failed = True`` and the
    state coasts at constant velocity; ``cfg.relocalize`` (if given) is
    called as ``relocalize(coasted_state, frame)`` and may return a
    replacement state.
    """
    frames = list(frames)
    if not frames:
        raise InvalidInputError("no frames to process")
    if not initial.t < frames[0].t:
        raise InvalidInputError("initial state must precede the first frame")
    out = []
    x = initial
    tau = ControlSample(np.zeros(3), initial.omega) if cfg.prior_center == "previous" else None
    corr = None
    for k, frame in enumerate(frames):
        try:
            x, diag = estimate_step(x, frame, mfmap, rig, cfg, step=k, tau_prev=tau, correction=corr)
            tau = ControlSample.from_vector(diag.tau_hat) if cfg.prior_center == "previous" else None
            corr = diag.tau_hat - diag.center
        except StepFailure:
            t0 = time.perf_counter()
            x = coast(x, frame.t - x.t)
            if cfg.relocalize is not None:
                x = cfg.relocalize(x, frame) or x
            tau = ControlSample(np.zeros(3), x.omega) if cfg.prior_center == "previous" else None
            corr = None
            diag = StepDiagnostics(np.inf, 0.0, 0.0, time.perf_counter() - t0, failed=True, discarded=cfg.M)
        out.append((x, diag))
    return out


def non_robust(cfg: EstimatorConfig) -> EstimatorConfig:
    """Ablation with truncation disabled (``c_squared = inf``)."""
    return replace(cfg, c_squared=np.inf)
