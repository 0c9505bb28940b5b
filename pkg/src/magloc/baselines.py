"""Reference localizers used for comparison.

``pf_*``  bootstrap particle filter with a Gaussian (untruncated) likelihood.
``gn_*``  Gauss-Newton alignment of one frame against the map.

Both share the frame, map and rig types of the main estimator. The
non-robust ablation of the main estimator lives in :func:`ablation_config`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError
from .estimator import EstimatorConfig, StepDiagnostics, non_robust
from .mfmap import MagneticMap
from .sim import MeasurementFrame, SensorRig
from .so3 import exp_so3, log_so3, skew
from .state import State


class Particle(NamedTuple):
    state: State
    weight: float


@dataclass(frozen=True)
class MotionNoise:
    """Per-step random acceleration (m/s^2) and angular-rate jitter (rad/s)."""

    accel_std: tuple = (1.0, 1.0, 0.05)
    gyro_std: tuple = (0.02, 0.02, 0.15)

    def __post_init__(self):
        if len(self.accel_std) != 3 or len(self.gyro_std) != 3:
            raise InvalidInputError("motion noise needs three accel and three gyro entries")
        if min(self.accel_std) < 0 or min(self.gyro_std) < 0:
            raise InvalidInputError("motion noise must be non-negative")


@dataclass(frozen=True)
class PfConfig:
    M: int = 1024
    sigma: float = 0.5
    motion: MotionNoise = field(default_factory=MotionNoise)
    init_std: tuple = (0.02, 0.02, 0.02, 0.01, 0.01, 0.01)
    rng_seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise InvalidInputError("particle count must be >= 1")
        if not self.sigma > 0:
            raise InvalidInputError("likelihood sigma must be positive")


@dataclass
class ParticleSet:
    """Particles stored as stacked arrays; ``weights`` sum to one."""

    p: np.ndarray
    R: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    weights: np.ndarray
    t: float

    def __len__(self):
        return len(self.p)

    @classmethod
    def around(cls, x: State, M: int, std=(0.0,) * 6, rng=None) -> "ParticleSet":
        """``M`` particles perturbed in position and orientation around ``x``."""
        if M < 1:
            raise InvalidInputError("particle count must be >= 1")
        rng = np.random.default_rng(rng)
        std = np.asarray(std, dtype=float)
        p = x.p + rng.standard_normal((M, 3)) * std[:3]
        R = exp_so3(rng.standard_normal((M, 3)) * std[3:]) @ x.R
        return cls(p, R, np.tile(x.v, (M, 1)), np.tile(x.omega, (M, 1)), np.full(M, 1.0 / M), x.t)

    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def mean_state(self) -> State:
        """Weighted mean; orientation is the chordal mean projected onto SO(3)."""
        w = self.weights
        S = np.einsum("m,mij->ij", w, self.R)
        u, _, vt = np.linalg.svd(S)
        d = np.sign(np.linalg.det(u @ vt))
        Rm = u @ np.diag([1.0, 1.0, d]) @ vt
        return State(w @ self.p, log_so3(Rm, tol=1e-6), w @ self.v, w @ self.omega, self.t)

    def particles(self) -> list[Particle]:
        return [
            Particle(State(self.p[j], log_so3(self.R[j], tol=1e-6), self.v[j], self.omega[j], self.t), float(self.weights[j]))
            for j in range(len(self))
        ]


def _sum_sq_residuals(R, p, frame: MeasurementFrame, mfmap: MagneticMap, rig: SensorRig):
    """Untruncated ``sum_i ||M(p_i) - R_i B_i||^2``; ``inf`` if any cell is unmapped."""
    q = np.einsum("nij,nj->ni", rig.rotations, frame.readings)
    rb = np.einsum("mij,nj->mni", R, q)
    ps = np.einsum("mij,nj->mni", R, rig.translations) + p[:, None, :]
    vals, mapped = mfmap.query_many(ps)
    r2 = np.where(mapped, np.sum((vals - rb) ** 2, axis=-1), np.inf)
    return r2.sum(axis=1)


def systematic_resample(weights: np.ndarray, rng) -> np.ndarray:
    M = len(weights)
    c = np.cumsum(weights)
    c[-1] = 1.0
    u = (rng.random() + np.arange(M)) / M
    return np.searchsorted(c, u, side="left")


def pf_step(ps: ParticleSet, frame: MeasurementFrame, mfmap: MagneticMap, rig: SensorRig, cfg: PfConfig, rng):
    """Propagate at constant velocity with noise, reweight, maybe resample.

    The likelihood ``exp(-S / (2 sigma^2))`` is evaluated in linear space.
    When it underflows to zero for every particle the step is degenerate:
    the propagated particles are kept with their previous weights.

    Returns:
        ``(particles, degenerate)``.
    """
    dt = frame.t - ps.t
    if not dt > 0:
        raise InvalidInputError("frame time must be after the particle time")
    M = len(ps)
    a = rng.standard_normal((M, 3)) * np.asarray(cfg.motion.accel_std)
    w_jit = rng.standard_normal((M, 3)) * np.asarray(cfg.motion.gyro_std)
    omega = ps.omega + w_jit
    p = ps.p + ps.v * dt + 0.5 * dt * dt * a
    v = ps.v + a * dt
    R = exp_so3(omega * dt) @ ps.R
    S = _sum_sq_residuals(R, p, frame, mfmap, rig)
    lik = np.exp(-S / (2.0 * cfg.sigma**2))
    w = ps.weights * lik
    total = w.sum()
    if not total > 0 or not np.isfinite(total):
        return ParticleSet(p, R, v, omega, ps.weights.copy(), frame.t), True
    w = w / total
    out = ParticleSet(p, R, v, omega, w, frame.t)
    if out.effective_sample_size() < M / 2:
        idx = systematic_resample(w, rng)
        out = ParticleSet(p[idx], R[idx], v[idx], omega[idx], np.full(M, 1.0 / M), frame.t)
    return out, False


def pf_run(frames, initial: State, mfmap: MagneticMap, rig: SensorRig, cfg: PfConfig):
    """Run the filter over ``frames``; returns ``(state, StepDiagnostics)`` pairs."""
    frames = list(frames)
    if not frames:
        raise InvalidInputError("no frames to process")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.rng_seed, spawn_key=(3,)))
    ps = ParticleSet.around(initial, cfg.M, cfg.init_std, rng)
    out = []
    for frame in frames:
        t0 = time.perf_counter()
        ps, degenerate = pf_step(ps, frame, mfmap, rig, cfg, rng)
        x = ps.mean_state()
        out.append((x, StepDiagnostics(
            s_min=np.nan, effective_sample_size=ps.effective_sample_size(), inlier_fraction=np.nan,
            elapsed=time.perf_counter() - t0, failed=degenerate)))
    return out


@dataclass(frozen=True)
class GnConfig:
    max_iters: int = 20
    convergence_tol: float = 1e-4
    step_damping: float = 1.0
    # relative eigenvalue floor of the normal matrix
    singular_rtol: float = 1e-9
    # weight of the newest finite-difference velocity in gn_run
    velocity_smoothing: float = 0.3

    def __post_init__(self):
        if self.max_iters < 1 or not self.convergence_tol > 0:
            raise InvalidInputError("GN needs max_iters >= 1 and tol > 0")
        if not 0 < self.step_damping <= 1:
            raise InvalidInputError("step_damping must lie in (0, 1]")
        if not 0 < self.velocity_smoothing <= 1:
            raise InvalidInputError("velocity_smoothing must lie in (0, 1]")


@dataclass
class GnResult:
    state: State
    converged: bool
    degenerate: bool
    iterations: int
    step_norm: float
    cost: float


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float)


def interpolate_field(mfmap: MagneticMap, pts: np.ndarray):
    """Trilinear interpolation between cell-center values.

    Returns ``(values, ok)`` where ``ok`` is False wherever one of the eight
    surrounding cells is unmapped.
    """
    h = mfmap.resolution
    u = np.asarray(pts, dtype=float) / h - 0.5
    i0 = np.floor(u)
    f = u - i0
    centers = (i0[:, None, :] + _CORNERS[None] + 0.5) * h
    vals, mapped = mfmap.query_many(centers.reshape(-1, 3))
    vals = vals.reshape(len(u), 8, 3)
    mapped = mapped.reshape(len(u), 8)
    wts = np.prod(np.where(_CORNERS[None] > 0, f[:, None, :], 1.0 - f[:, None, :]), axis=2)
    return np.einsum("mc,mcj->mj", wts, vals), mapped.all(axis=1)


def _gn_linearize(R, p, q, mfmap: MagneticMap, rig: SensorRig):
    """Residuals (3N,) and Jacobian (3N, 6) w.r.t. ``[dp, dtheta]`` with the
    left perturbation ``R <- exp(dtheta) R``. ``None`` if a needed cell is
    unmapped.

    The map is read through trilinear interpolation so the residual varies
    continuously with pose; its gradient is a central difference at the map
    resolution.
    """
    h = mfmap.resolution
    lever = rig.translations @ R.T
    ps = lever + p
    rq = q @ R.T
    offs = np.vstack([np.zeros(3), h * np.eye(3), -h * np.eye(3)])
    pts = ps[:, None, :] + offs[None, :, :]
    vals, ok = interpolate_field(mfmap, pts.reshape(-1, 3))
    if not np.all(ok):
        return None
    vals = vals.reshape(len(ps), 7, 3)
    r = vals[:, 0] - rq
    G = (vals[:, 1:4] - vals[:, 4:7]).transpose(0, 2, 1) / (2.0 * h)  # dM_i/dp_k
    Jt = -G @ skew(lever) + skew(rq)
    J = np.concatenate([G, Jt], axis=2)
    return r.reshape(-1), J.reshape(-1, 6)


def gn_solve(prev: State, frame: MeasurementFrame, mfmap: MagneticMap, rig: SensorRig, cfg: GnConfig) -> GnResult:
    """Gauss-Newton on ``sum ||M(p_i) - R_i B_i||^2`` over position and
    orientation, starting from ``prev``'s pose."""
    if len(frame) != len(rig):
        raise InvalidInputError("frame and rig sizes differ")
    q = np.einsum("nij,nj->ni", rig.rotations, frame.readings)
    R, p = prev.R, prev.p.copy()
    step = np.inf
    cost = np.inf
    for it in range(1, cfg.max_iters + 1):
        lin = _gn_linearize(R, p, q, mfmap, rig)
        if lin is None:
            return GnResult(_pose_state(prev, p, R), False, True, it, step, cost)
        r, J = lin
        cost = float(r @ r)
        H = J.T @ J
        ev = np.linalg.eigvalsh(H)
        if not ev[-1] > 0 or ev[0] <= cfg.singular_rtol * ev[-1]:
            return GnResult(_pose_state(prev, p, R), False, True, it, step, cost)
        # r(x + d) ~ r + J d
        d = -np.linalg.solve(H, J.T @ r) * cfg.step_damping
        p = p + d[:3]
        R = exp_so3(d[3:]) @ R
        step = float(np.linalg.norm(d[:3]))
        if step < cfg.convergence_tol:
            return GnResult(_pose_state(prev, p, R), True, False, it, step, cost)
    return GnResult(_pose_state(prev, p, R), False, False, cfg.max_iters, step, cost)


def _pose_state(prev: State, p, R) -> State:
    return State(p, log_so3(R, tol=1e-6), prev.v, prev.omega, prev.t)


def gn_step(prev: State, frame: MeasurementFrame, mfmap: MagneticMap, rig: SensorRig, cfg: GnConfig):
    """``(state, converged)`` for one frame; see :func:`gn_solve`."""
    res = gn_solve(prev, frame, mfmap, rig, cfg)
    return res.state, res.converged


def gn_run(frames, initial: State, mfmap: MagneticMap, rig: SensorRig, cfg: GnConfig):
    """Frame-by-frame GN seeded by a constant-velocity prediction.

    Velocities are exponentially smoothed finite differences of consecutive
    pose estimates. A step that does not converge keeps the prediction and
    is flagged failed.
    """
    frames = list(frames)
    if not frames:
        raise InvalidInputError("no frames to process")
    x = initial
    out = []
    for frame in frames:
        t0 = time.perf_counter()
        dt = frame.t - x.t
        guess_R = exp_so3(x.omega * dt) @ x.R
        guess = State(x.p + x.v * dt, log_so3(guess_R, tol=1e-6), x.v, x.omega, frame.t)
        res = gn_solve(guess, frame, mfmap, rig, cfg)
        if res.converged:
            new = res.state
            b = cfg.velocity_smoothing
            v = (1.0 - b) * x.v + b * (new.p - x.p) / dt
            w = (1.0 - b) * x.omega + b * log_so3(new.R @ x.R.T, tol=1e-6) / dt
            x = State(new.p, new.phi, v, w, frame.t)
        else:
            x = guess
        out.append((x, StepDiagnostics(
            s_min=res.cost, effective_sample_size=1.0, inlier_fraction=np.nan,
            elapsed=time.perf_counter() - t0, failed=not res.converged,
            discarded=int(res.degenerate))))
    return out


def ablation_config(cfg: EstimatorConfig) -> EstimatorConfig:
    """The main estimator with truncation disabled (``c_squared = inf``)."""
    return non_robust(cfg)
