"""Synthetic magnetic world, trajectories and magnetometer measurements.

The world field is a uniform background (geomagnetic) field plus the
fields of point dipoles standing in for ferromagnetic structure. Sensor
readings follow the forward measurement model::

    R_i @ B_i = M(p_i) + o_i + n,    R_i = R @ bR_i,  p_i = R @ bp_i + p

with isotropic Gaussian noise ``n`` and sparse outlier offsets ``o_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, SingularityError
from .so3 import exp_so3, is_rotation
from .state import State

# mu0 / 4pi in uT * m / A
MU0_4PI_UT = 0.1
DEFAULT_BASE_FIELD = (20.0, 0.0, -45.0)


@dataclass(frozen=True)
class DipoleSource:
    position: tuple
    moment: tuple

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float)
        m = np.asarray(self.moment, dtype=float)
        if p.shape != (3,) or m.shape != (3,) or not (np.all(np.isfinite(p)) and np.all(np.isfinite(m))):
            raise InvalidInputError("dipole position and moment must be finite 3-vectors")
        if not np.linalg.norm(m) > 0:
            raise InvalidInputError("dipole moment must be non-zero")
        object.__setattr__(self, "position", tuple(float(x) for x in p))
        object.__setattr__(self, "moment", tuple(float(x) for x in m))


def world_field(sources: Sequence[DipoleSource], base, p) -> np.ndarray:
    """Background plus dipole fields (uT) at ``p`` (shape ``(..., 3)``, meters).

    Raises:
        SingularityError: if any point lies within 1e-6 m of a source.
    """
    p = np.asarray(p, dtype=float)
    out = np.broadcast_to(np.asarray(base, dtype=float), p.shape).copy()
    for s in sources:
        r = p - np.asarray(s.position)
        d2 = np.einsum("...i,...i->...", r, r)
        if np.any(d2 < 1e-12):
            raise SingularityError("field evaluated at a dipole position")
        d = np.sqrt(d2)
        m = np.asarray(s.moment)
        rhat = r / d[..., None]
        mr = rhat @ m
        out += MU0_4PI_UT * (3.0 * mr[..., None] * rhat - m) / (d2 * d)[..., None]
    return out


def random_dipoles(count: int, region, moment_range=(20.0, 150.0), rng=None) -> list[DipoleSource]:
    """Dipoles uniformly placed in ``region = (xmin, ymin, zmin, xmax, ymax, zmax)``
    with isotropic random orientation and magnitudes in ``moment_range``."""
    rng = np.random.default_rng(rng)
    region = np.asarray(region, dtype=float)
    pos = rng.uniform(region[:3], region[3:], size=(count, 3))
    dirs = rng.normal(size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    mags = rng.uniform(moment_range[0], moment_range[1], size=count)
    return [DipoleSource(tuple(p), tuple(d * m)) for p, d, m in zip(pos, dirs, mags)]


class SensorRig:
    """Extrinsics of ``N`` magnetometers in the body frame."""

    def __init__(self, rotations, translations):
        rot = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
        trans = np.asarray(translations, dtype=float).reshape(-1, 3)
        if len(rot) < 1 or len(rot) != len(trans):
            raise InvalidInputError("rig needs N >= 1 sensors with matching rotations and translations")
        for r in rot:
            if not is_rotation(r, 1e-9):
                raise InvalidInputError("sensor extrinsic rotation is not a rotation matrix")
        if not np.all(np.isfinite(trans)):
            raise InvalidInputError("non-finite sensor translation")
        self.rotations = rot
        self.translations = trans

    @classmethod
    def from_axis_angle(cls, rotvecs, translations) -> "SensorRig":
        return cls(exp_so3(np.asarray(rotvecs, dtype=float).reshape(-1, 3)), translations)

    def __len__(self):
        return len(self.rotations)

    def __eq__(self, other):
        return (
            isinstance(other, SensorRig)
            and np.array_equal(self.rotations, other.rotations)
            and np.array_equal(self.translations, other.translations)
        )

    def subset(self, n: int) -> "SensorRig":
        return SensorRig(self.rotations[:n], self.translations[:n])


def hex_rig(n: int = 7, radius: float = 0.15, rotvecs=None) -> SensorRig:
    """A center sensor surrounded by ``n - 1`` sensors on a circle, all in
    the body xy-plane. For ``n > 7`` further rings are added."""
    pts = [np.zeros(3)]
    ring = 1
    while len(pts) < n:
        per = 6 * ring
        for j in range(per):
            if len(pts) == n:
                break
            a = 2 * np.pi * j / per + (0.5 * np.pi / per if ring % 2 == 0 else 0.0)
            pts.append(ring * radius * np.array([np.cos(a), np.sin(a), 0.0]))
        ring += 1
    rot = np.zeros((n, 3)) if rotvecs is None else rotvecs
    return SensorRig.from_axis_angle(rot, np.array(pts))


@dataclass(frozen=True)
class NoiseModel:
    sigma_n: float = 0.5
    outlier_rate: float = 0.0
    outlier_magnitude: float = 30.0

    def __post_init__(self):
        if self.sigma_n < 0 or not 0.0 <= self.outlier_rate <= 1.0 or self.outlier_magnitude < 0:
            raise InvalidInputError("invalid noise model")


@dataclass(frozen=True, eq=False)
class MeasurementFrame:
    """Readings of all sensors at time ``t``, each in its own sensor frame (uT)."""

    t: float
    readings: np.ndarray
    truth_outlier_mask: np.ndarray = None

    def __post_init__(self):
        r = np.asarray(self.readings, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(r)):
            raise InvalidInputError("non-finite magnetometer reading")
        mask = np.zeros(len(r), dtype=bool) if self.truth_outlier_mask is None else np.asarray(self.truth_outlier_mask, dtype=bool)
        if mask.shape != (len(r),):
            raise InvalidInputError("outlier mask length must equal sensor count")
        object.__setattr__(self, "readings", r)
        object.__setattr__(self, "truth_outlier_mask", mask)
        object.__setattr__(self, "t", float(self.t))

    def __len__(self):
        return len(self.readings)

    def __eq__(self, other):
        return (
            isinstance(other, MeasurementFrame)
            and self.t == other.t
            and np.array_equal(self.readings, other.readings)
            and np.array_equal(self.truth_outlier_mask, other.truth_outlier_mask)
        )


def sensor_poses(R: np.ndarray, p: np.ndarray, rig: SensorRig):
    """World-frame sensor rotations and positions for body pose(s) ``(R, p)``.

    ``R`` may be ``(3, 3)`` or ``(M, 3, 3)``; results gain a sensor axis.
    """
    rs = np.einsum("...ij,njk->...nik", R, rig.rotations)
    ps = np.einsum("...ij,nj->...ni", R, rig.translations) + np.asarray(p)[..., None, :]
    return rs, ps


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def draw_outlier_offsets(rng, n: int, magnitude: float) -> np.ndarray:
    """Offsets uniform in direction with length ``U(0.5, 1.0) * magnitude``."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (rng.uniform(0.5, 1.0, size=n) * magnitude)[:, None]


def synthesize_frame(truth: State, rig: SensorRig, sources, base, noise: NoiseModel, rng_seed=None) -> MeasurementFrame:
    rng = _rng(rng_seed)
    rs, ps = sensor_poses(truth.R, truth.p, rig)
    n = len(rig)
    fields = world_field(sources, base, ps)
    fields = fields + rng.normal(scale=noise.sigma_n, size=(n, 3)) if noise.sigma_n > 0 else fields
    mask = rng.uniform(size=n) < noise.outlier_rate
    offsets = draw_outlier_offsets(rng, n, noise.outlier_magnitude)
    fields = fields + np.where(mask[:, None], offsets, 0.0)
    readings = np.einsum("nji,nj->ni", rs, fields)
    return MeasurementFrame(truth.t, readings, mask)


def frame_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Independent RNG stream per (experiment seed, frame index)."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(0, index))


def simulate_frames(trajectory, rig, sources, base, noise, seed: int = 0, skip_first: bool = True):
    """Frames for every trajectory state (the initial one is skipped by
    default, as it serves as the estimator's starting state)."""
    out = []
    for k, (t, x) in enumerate(trajectory):
        if skip_first and k == 0:
            continue
        out.append(synthesize_frame(x, rig, sources, base, noise, np.random.default_rng(frame_seed(seed, k))))
    return out


@dataclass(frozen=True)
class TrajectorySpec:
    """Parametric ground-truth trajectory.

    Families:
        ``line``: constant ``speed`` along ``heading`` (rad, about z).
        ``circle``: ``radius`` around ``origin`` at ``angular_rate`` (rad/s).
        ``lawnmower``: ``legs`` straight legs of ``leg_length`` alternating
            along +x/-x, ``spacing`` apart in +y, joined by U-turns whose
            curvature ramps smoothly in and out. The path ends after
            ``duration`` or at its end, whichever is first.
    """

    family: str = "line"
    duration: float = 10.0
    rate: float = 100.0
    speed: float = 1.0
    origin: tuple = (0.0, 0.0, 0.0)
    heading: float = 0.0
    radius: float = 2.0
    angular_rate: float = 0.5
    leg_length: float = 8.0
    spacing: float = 1.7
    legs: int = 4


FAMILIES = ("line", "circle", "lawnmower")


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)


def _turn_heading(u):
    """Heading change (0 -> pi) through a U-turn at normalized arc length u.

    Curvature is proportional to ``sin(pi u)**2``, so it rises from and
    returns to zero and the path stays three times differentiable.
    """
    return np.pi * (u - np.sin(2.0 * np.pi * u) / (2.0 * np.pi))


def _turn_rate(u):
    return np.pi * (1.0 - np.cos(2.0 * np.pi * u))


def _turn_integrals(u):
    """``int_0^u (cos, sin)(heading)`` by Gauss-Legendre quadrature."""
    u = np.asarray(u, dtype=float)
    x = 0.5 * u[:, None] * (_GL_NODES[None, :] + 1.0)
    h = _turn_heading(x)
    w = 0.5 * u[:, None] * _GL_WEIGHTS[None, :]
    return np.sum(w * np.cos(h), axis=1), np.sum(w * np.sin(h), axis=1)


_TURN_LATERAL = float(_turn_integrals(np.array([1.0]))[1][0])


def _lawnmower_segments(spec: TrajectorySpec):
    turn_len = spec.spacing / _TURN_LATERAL
    segs = []
    for k in range(spec.legs):
        segs.append(("line", k, spec.leg_length))
        if k < spec.legs - 1:
            segs.append(("turn", k, turn_len))
    return segs


def lawnmower_length(spec: TrajectorySpec) -> float:
    return float(sum(s[2] for s in _lawnmower_segments(spec)))


def _lawnmower_eval(spec: TrajectorySpec, t: np.ndarray):
    """Planar position, velocity, yaw and yaw rate along the sweep."""
    v = spec.speed
    L, sp = spec.leg_length, spec.spacing
    arc = v * t
    segs = _lawnmower_segments(spec)
    ends = np.cumsum([s[2] for s in segs])
    starts = np.concatenate([[0.0], ends[:-1]])
    idx = np.minimum(np.searchsorted(ends, arc, side="right"), len(segs) - 1)
    pos = np.zeros((len(t), 2))
    vel = np.zeros((len(t), 2))
    yaw = np.zeros(len(t))
    rate = np.zeros(len(t))
    for j, (kind, k, length) in enumerate(segs):
        sel = idx == j
        if not np.any(sel):
            continue
        s = arc[sel] - starts[j]
        forward = k % 2 == 0
        if kind == "line":
            x0 = 0.0 if forward else L
            d = 1.0 if forward else -1.0
            pos[sel] = np.column_stack([x0 + d * s, np.full(len(s), k * sp)])
            vel[sel] = [d * v, 0.0]
            yaw[sel] = 0.0 if forward else np.pi
        else:
            # even legs turn left (ccw) at x = L, odd legs turn right at x = 0
            u = s / length
            cx, sy = _turn_integrals(u)
            sgn = 1.0 if forward else -1.0
            h = _turn_heading(u)
            head0 = 0.0 if forward else np.pi
            heading = head0 + sgn * h
            x0 = L if forward else 0.0
            dx = cx if forward else -cx
            pos[sel] = np.column_stack([x0 + length * dx, k * sp + length * sy])
            vel[sel] = v * np.column_stack([np.cos(heading), np.sin(heading)])
            yaw[sel] = heading
            rate[sel] = sgn * v / length * _turn_rate(u)
    return pos, vel, yaw, rate


def generate_trajectory(spec: TrajectorySpec) -> list[tuple[float, State]]:
    """Sampled ground truth with analytically consistent velocities."""
    if spec.family not in FAMILIES:
        raise ConfigError("unknown trajectory family %r (expected one of %s)" % (spec.family, ", ".join(FAMILIES)))
    if not spec.duration > 0 or not spec.rate > 0:
        raise ConfigError("trajectory duration and rate must be positive")
    duration = spec.duration
    if spec.family == "lawnmower":
        duration = min(duration, lawnmower_length(spec) / spec.speed)
    n = int(np.floor(duration * spec.rate + 1e-9)) + 1
    t = np.arange(n) / spec.rate
    o = np.asarray(spec.origin, dtype=float)
    z = np.zeros(n)
    if spec.family == "line":
        d = np.array([np.cos(spec.heading), np.sin(spec.heading), 0.0])
        p = o + spec.speed * t[:, None] * d
        v = np.tile(spec.speed * d, (n, 1))
        yaw = np.full(n, spec.heading)
        w = z
    elif spec.family == "circle":
        a = spec.angular_rate * t
        p = o + spec.radius * np.column_stack([np.cos(a), np.sin(a), z])
        v = spec.radius * spec.angular_rate * np.column_stack([-np.sin(a), np.cos(a), z])
        yaw = a + np.sign(spec.angular_rate or 1.0) * 0.5 * np.pi
        w = np.full(n, spec.angular_rate)
    else:
        pos, vel, yaw, w = _lawnmower_eval(spec, t)
        p = o + np.column_stack([pos, z])
        v = np.column_stack([vel, z])
    out = []
    for k in range(n):
        phi = np.array([0.0, 0.0, np.arctan2(np.sin(yaw[k]), np.cos(yaw[k]))])
        out.append((float(t[k]), State(p[k], phi, v[k], (0.0, 0.0, w[k]), t[k])))
    return out


def trajectory_arrays(traj) -> dict:
    """Stack a list of ``(t, State)`` into arrays keyed like the truth CSV."""
    return {
        "t": np.array([t for t, _ in traj]),
        "p": np.array([x.p for _, x in traj]),
        "phi": np.array([x.phi for _, x in traj]),
        "v": np.array([x.v for _, x in traj]),
        "omega": np.array([x.omega for _, x in traj]),
    }


@dataclass
class SurveySpec:
    """Lattice of survey points used to build the map offline."""

    bounds: tuple = (0.0, 0.0, 0.3, 1.0, 1.0, 0.3)
    spacing: float = 0.1
    heights: tuple = ()

    def points(self) -> np.ndarray:
        b = np.asarray(self.bounds, dtype=float)
        xs = np.arange(b[0], b[3] + 0.5 * self.spacing, self.spacing)
        ys = np.arange(b[1], b[4] + 0.5 * self.spacing, self.spacing)
        zs = np.asarray(self.heights, dtype=float) if len(self.heights) else np.arange(b[2], b[5] + 0.5 * self.spacing, self.spacing)
        g = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([a.ravel() for a in g], axis=1)


def survey(sources, base, spec: SurveySpec, sigma: float = 0.0, seed: int = 0):
    """World-frame survey samples ``(positions, fields)`` with optional noise."""
    pts = spec.points()
    f = world_field(sources, base, pts)
    if sigma > 0:
        f = f + np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,))).normal(scale=sigma, size=f.shape)
    return pts, f


@dataclass
class World:
    """Everything needed to synthesize measurements and a survey."""

    sources: list = field(default_factory=list)
    base_field: tuple = DEFAULT_BASE_FIELD
    noise: NoiseModel = field(default_factory=NoiseModel)
    survey: SurveySpec = field(default_factory=SurveySpec)
    survey_sigma: float = 0.0
