"""Trajectory error and step-latency measurement."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

MATCH_TOL = 1e-3
ALIGNMENTS = ("none", "translation")


@dataclass(frozen=True)
class AteReport:
    """Absolute trajectory error in the shared map frame (no alignment)."""

    ate_rmse: float
    per_axis_rmse: tuple
    max_error: float
    velocity_rmse: float
    failure_steps: int = 0
    matched: int = 0

    def as_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "per_axis_rmse_x": self.per_axis_rmse[0],
            "per_axis_rmse_y": self.per_axis_rmse[1],
            "per_axis_rmse_z": self.per_axis_rmse[2],
            "max_error": self.max_error,
            "velocity_rmse": self.velocity_rmse,
            "failure_steps": self.failure_steps,
            "matched": self.matched,
        }


def _columns(traj):
    """``(t, p, v)`` arrays from a list of ``(t, State)`` or ``State``."""
    ts, ps, vs = [], [], []
    for item in traj:
        x = item[1] if isinstance(item, tuple) else item
        ts.append(x.t)
        ps.append(x.p)
        vs.append(x.v)
    return np.asarray(ts, dtype=float), np.asarray(ps, dtype=float).reshape(-1, 3), np.asarray(vs, dtype=float).reshape(-1, 3)


def match_timestamps(t_est, t_truth, tol: float = MATCH_TOL):
    """Indices pairing each estimate with the nearest truth sample within ``tol``.

    Estimates without a partner are dropped.
    """
    t_est = np.asarray(t_est, dtype=float)
    t_truth = np.asarray(t_truth, dtype=float)
    order = np.argsort(t_truth, kind="stable")
    ts = t_truth[order]
    j = np.clip(np.searchsorted(ts, t_est), 1, max(len(ts) - 1, 1))
    lo = np.clip(j - 1, 0, len(ts) - 1)
    hi = np.clip(j, 0, len(ts) - 1)
    pick = np.where(np.abs(ts[lo] - t_est) <= np.abs(ts[hi] - t_est), lo, hi)
    ok = np.abs(ts[pick] - t_est) <= tol
    return np.nonzero(ok)[0], order[pick[ok]]


def compute_ate(est, truth, failure_steps: int = 0, tol: float = MATCH_TOL, align: str = "none") -> AteReport:
    """Position and velocity RMSE over matched timestamps.

    Both trajectories live in the map frame, so by default nothing is
    aligned; a global offset is real error. ``align="translation"`` removes
    the mean position offset first, for comparison with odometry-style ATE.

    Raises:
        InvalidInputError: with fewer than two matched timestamps or an
            unknown ``align``.
    """
    if align not in ALIGNMENTS:
        raise InvalidInputError("unknown alignment %r (expected one of %s)" % (align, ", ".join(ALIGNMENTS)))
    te, pe, ve = _columns(est)
    tt, pt, vt = _columns(truth)
    if len(te) == 0 or len(tt) == 0:
        raise InvalidInputError("empty trajectory")
    ie, it = match_timestamps(te, tt, tol)
    if len(ie) < 2:
        raise InvalidInputError("fewer than 2 matched timestamps")
    d = pe[ie] - pt[it]
    if align == "translation":
        d = d - d.mean(axis=0)
    e2 = np.sum(d * d, axis=1)
    dv = ve[ie] - vt[it]
    return AteReport(
        ate_rmse=float(np.sqrt(np.mean(e2))),
        per_axis_rmse=tuple(float(x) for x in np.sqrt(np.mean(d * d, axis=0))),
        max_error=float(np.sqrt(e2.max())),
        velocity_rmse=float(np.sqrt(np.mean(np.sum(dv * dv, axis=1)))),
        failure_steps=int(failure_steps),
        matched=int(len(ie)),
    )


@dataclass
class BenchReport:
    """Per-(M, N) step latency in seconds plus linear-fit slopes."""

    rows: list = field(default_factory=list)
    slope_m: float = float("nan")
    slope_n: float = float("nan")
    r2_m: float = float("nan")
    r2_n: float = float("nan")

    def latency(self, M: int, N: int, stat: str = "mean") -> float:
        for r in self.rows:
            if r["M"] == M and r["N"] == N:
                return r[stat]
        raise KeyError((M, N))

    def scaling(self, axis: str, at: int, stat: str = "mean"):
        """Affine fit of latency along ``axis`` ("M" or "N") with the other held at ``at``.

        Returns ``(slope, r2, segment_error)`` where ``segment_error`` is the
        largest relative gap between a consecutive-point slope and the fitted
        slope.
        """
        other = "N" if axis == "M" else "M"
        sel = sorted((r for r in self.rows if r[other] == at), key=lambda r: r[axis])
        if len(sel) < 2:
            raise InvalidInputError("need at least two %s values at %s=%d" % (axis, other, at))
        x = np.array([r[axis] for r in sel], dtype=float)
        y = np.array([r[stat] for r in sel])
        slope, r2 = _linfit(x, y)
        seg = np.diff(y) / np.diff(x)
        return slope, r2, float(np.max(np.abs(seg - slope)) / abs(slope))


def _linfit(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - float(resid @ resid) / ss if ss > 0 else 1.0
    return float(coef[0]), r2


def bench_matrix(M_list, N_list, reps: int = 50, seed: int = 0, warmup: int = 3) -> BenchReport:
    """Time :func:`estimate_step` on a fixed synthetic scene for each (M, N).

    Slopes are fitted in M at the largest N and in N at the largest M.
    """
    from .estimator import EstimatorConfig, estimate_step
    from .mfmap import map_from_function
    from .sim import (DEFAULT_BASE_FIELD, NoiseModel, hex_rig, random_dipoles, synthesize_frame, world_field)
    from .state import State

    M_list = sorted(set(int(m) for m in M_list))
    N_list = sorted(set(int(n) for n in N_list))
    if not M_list or not N_list:
        raise InvalidInputError("bench needs non-empty M and N lists")
    src = random_dipoles(6, (-1.5, -1.5, -1.5, 1.5, 1.5, -1.0), (100.0, 300.0), rng=seed)
    fmap = map_from_function(lambda p: world_field(src, DEFAULT_BASE_FIELD, p),
                             (-1.0, -1.0, -0.1, 1.0, 1.0, 0.1), 0.05, DEFAULT_BASE_FIELD)
    cases = []
    x0 = State(p=(0.0, 0.0, 0.025), v=(0.5, 0.0, 0.0))
    truth = State(p=(0.05, 0.0, 0.025), v=(0.5, 0.0, 0.0), t=0.1)
    for N in N_list:
        rig = hex_rig(N, 0.08)
        frame = synthesize_frame(truth, rig, src, DEFAULT_BASE_FIELD, NoiseModel(0.5, 0.05), rng_seed=seed)
        for M in M_list:
            cases.append((M, N, rig, frame, EstimatorConfig(M=M, rng_seed=seed)))
    for M, N, rig, frame, cfg in cases:
        for k in range(warmup):
            estimate_step(x0, frame, fmap, rig, cfg, step=k)
    # round-robin over configurations so a transient slowdown of the host
    # is spread across all of them instead of biasing one
    lat = np.empty((len(cases), reps))
    for k in range(reps):
        for i, (M, N, rig, frame, cfg) in enumerate(cases):
            t0 = time.perf_counter()
            estimate_step(x0, frame, fmap, rig, cfg, step=k)
            lat[i, k] = time.perf_counter() - t0
    rows = [{"M": M, "N": N, "mean": float(l.mean()), "median": float(np.median(l)),
             "p99": float(np.percentile(l, 99)), "samples": reps} for (M, N, *_), l in zip(cases, lat)]
    rep = BenchReport(rows)
    if len(M_list) > 1:
        sel = [r for r in rows if r["N"] == N_list[-1]]
        rep.slope_m, rep.r2_m = _linfit([r["M"] for r in sel], [r["mean"] for r in sel])
    if len(N_list) > 1:
        sel = [r for r in rows if r["M"] == M_list[-1]]
        rep.slope_n, rep.r2_n = _linfit([r["N"] for r in sel], [r["mean"] for r in sel])
    return rep
