"""Key-value configs and CSV formats shared by the command line and scripts.

Config files are INI-style ``key = value`` text. Sectionless files are
accepted; their keys land in the ``""`` section. Vector values are comma
separated. Every recognised key is listed in the ``*_KEYS`` tables below,
and unknown keys are rejected so typos surface as :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import csv
from pathlib import Path

import numpy as np

from .baselines import GnConfig, MotionNoise, PfConfig
from .errors import ConfigError, MapFormatError
from .estimator import EstimatorConfig, StepDiagnostics
from .mfmap import GpHyperparams
from .sim import (DEFAULT_BASE_FIELD, DipoleSource, MeasurementFrame, NoiseModel, SensorRig, SurveySpec,
                  TrajectorySpec, hex_rig, random_dipoles)
from .state import State

TRUTH_COLUMNS = ["t", "px", "py", "pz", "phix", "phiy", "phiz", "vx", "vy", "vz", "wx", "wy", "wz"]
EST_COLUMNS = TRUTH_COLUMNS + ["s_min", "ess", "inliers", "elapsed_us"]
FRAME_COLUMNS = ["t", "sensor_id", "bx", "by", "bz", "is_outlier"]
SAMPLE_COLUMNS = ["px", "py", "pz", "bx", "by", "bz"]

WORLD_KEYS = {
    "base_field": "background field, uT (3 values)",
    "dipole_count": "number of random dipoles",
    "dipole_region": "xmin, ymin, zmin, xmax, ymax, zmax in m",
    "dipole_moment_range": "min, max dipole moment in A m^2",
    "dipole_seed": "RNG seed for dipole placement",
    "dipole.<k>": "explicit dipole: x, y, z, mx, my, mz",
    "sigma_n": "measurement noise std, uT",
    "outlier_rate": "per-sensor outlier probability",
    "outlier_magnitude": "outlier offset scale, uT",
    "survey_bounds": "xmin, ymin, zmin, xmax, ymax, zmax of the mapping survey",
    "survey_spacing": "survey lattice spacing in x and y, m",
    "survey_heights": "survey heights, m",
    "survey_sigma": "noise std added to survey samples, uT",
}
TRAJ_KEYS = {k: "" for k in ("family", "duration", "rate", "speed", "origin", "heading", "radius",
                             "angular_rate", "leg_length", "spacing", "legs")}
RIG_KEYS = {
    "hex": "build a hexagonal rig with this many sensors",
    "hex_radius": "ring radius of the hexagonal rig, m",
    "sensor.<k>.rotvec": "extrinsic rotation of sensor k (axis-angle, rad)",
    "sensor.<k>.translation": "extrinsic translation of sensor k, m",
}
EST_KEYS = {
    "M": "", "lambda": "", "c_squared": "number or 'auto'", "sigma_n": "", "kappa": "",
    "sampling_std": "ax, ay, az, wx, wy, wz", "rng_seed": "", "shift_costs": "", "prior_center": "turn or previous",
    "rate_memory": "", "damping": "",
    "pf_M": "", "pf_sigma": "", "pf_accel_std": "", "pf_gyro_std": "", "pf_init_std": "",
    "gn_max_iters": "", "gn_tol": "", "gn_damping": "", "gn_velocity_smoothing": "",
}
MAP_KEYS = {"resolution": "", "length_scale": "", "sigma_f": "", "sigma_n": "", "support_radius": "",
            "min_neighbors": "", "max_neighbors": ""}


def read_kv(path) -> dict:
    """Sections of an INI-style file as ``{section: {key: value}}``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise MapFormatError("cannot read %s: %s" % (path, e)) from e
    return parse_kv(text, str(path))


def parse_kv(text: str, source: str = "<string>") -> dict:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    if not text.lstrip().startswith("["):
        text = "[__root__]\n" + text
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError("%s: %s" % (source, e)) from e
    out = {}
    for sec in cp.sections():
        out["" if sec == "__root__" else sec] = dict(cp.items(sec))
    return out


def write_kv(path, sections: dict) -> None:
    lines = []
    for sec, kv in sections.items():
        if sec:
            lines.append("[%s]" % sec)
        for k, v in kv.items():
            lines.append("%s = %s" % (k, format_value(v)))
        lines.append("")
    Path(path).write_text("\n".join(lines))


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list, np.ndarray)):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def _floats(kv, key, n=None, default=None):
    if key not in kv:
        if default is None:
            raise ConfigError("missing key '%s'" % key)
        return tuple(default)
    try:
        vals = tuple(float(x) for x in kv[key].split(","))
    except ValueError as e:
        raise ConfigError("key '%s': expected numbers, got %r" % (key, kv[key])) from e
    if n is not None and len(vals) != n:
        raise ConfigError("key '%s': expected %d values, got %d" % (key, n, len(vals)))
    return vals


def _float(kv, key, default):
    if key not in kv:
        return default
    try:
        return float(kv[key])
    except ValueError as e:
        raise ConfigError("key '%s': expected a number, got %r" % (key, kv[key])) from e


def _int(kv, key, default):
    if key not in kv:
        return default
    try:
        return int(kv[key])
    except ValueError as e:
        raise ConfigError("key '%s': expected an integer, got %r" % (key, kv[key])) from e


def _bool(kv, key, default):
    if key not in kv:
        return default
    s = kv[key].strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError("key '%s': expected a boolean, got %r" % (key, kv[key]))


def _check_keys(kv, allowed, what):
    for k in kv:
        base = k
        if k.startswith("dipole."):
            base = "dipole.<k>"
        elif k.startswith("sensor."):
            parts = k.split(".")
            base = "sensor.<k>." + parts[-1] if len(parts) == 3 else k
        if base not in allowed:
            raise ConfigError("unknown %s key '%s'" % (what, k))


def world_from_kv(kv: dict):
    """``(sources, base_field, noise, survey_spec, survey_sigma)``."""
    _check_keys(kv, WORLD_KEYS, "world")
    base = _floats(kv, "base_field", 3, DEFAULT_BASE_FIELD)
    sources = []
    count = _int(kv, "dipole_count", 0)
    if count:
        region = _floats(kv, "dipole_region", 6)
        mr = _floats(kv, "dipole_moment_range", 2, (20.0, 150.0))
        sources += random_dipoles(count, region, mr, rng=_int(kv, "dipole_seed", 0))
    for k in sorted((k for k in kv if k.startswith("dipole.")), key=lambda s: int(s.split(".")[1])):
        d = _floats(kv, k, 6)
        sources.append(DipoleSource(d[:3], d[3:]))
    noise = NoiseModel(_float(kv, "sigma_n", 0.5), _float(kv, "outlier_rate", 0.0), _float(kv, "outlier_magnitude", 30.0))
    survey = None
    if "survey_bounds" in kv:
        survey = SurveySpec(_floats(kv, "survey_bounds", 6), _float(kv, "survey_spacing", 0.1),
                            _floats(kv, "survey_heights", None, (0.0,)))
    return sources, base, noise, survey, _float(kv, "survey_sigma", 0.0)


def traj_from_kv(kv: dict) -> TrajectorySpec:
    _check_keys(kv, TRAJ_KEYS, "trajectory")
    if "family" not in kv:
        raise ConfigError("missing key 'family'")
    spec = TrajectorySpec(kv["family"].strip())
    args = {}
    for k in ("duration", "rate", "speed", "heading", "radius", "angular_rate", "leg_length", "spacing"):
        if k in kv:
            args[k] = _float(kv, k, None)
    if "legs" in kv:
        args["legs"] = _int(kv, "legs", None)
    if "origin" in kv:
        args["origin"] = _floats(kv, "origin", 3)
    from dataclasses import replace
    return replace(spec, **args)


def rig_from_kv(kv: dict) -> SensorRig:
    _check_keys(kv, RIG_KEYS, "rig")
    if "hex" in kv:
        return hex_rig(_int(kv, "hex", 7), _float(kv, "hex_radius", 0.15))
    ids = sorted({int(k.split(".")[1]) for k in kv if k.startswith("sensor.")})
    if not ids:
        raise ConfigError("rig config defines no sensors")
    if ids != list(range(len(ids))):
        raise ConfigError("rig sensor ids must be 0..N-1 without gaps")
    rot = [_floats(kv, "sensor.%d.rotvec" % i, 3, (0.0, 0.0, 0.0)) for i in ids]
    trans = [_floats(kv, "sensor.%d.translation" % i, 3) for i in ids]
    return SensorRig.from_axis_angle(rot, trans)


def rig_to_kv(rig: SensorRig) -> dict:
    from .so3 import log_so3
    kv = {}
    for i in range(len(rig)):
        kv["sensor.%d.rotvec" % i] = tuple(log_so3(rig.rotations[i], tol=1e-6))
        kv["sensor.%d.translation" % i] = tuple(rig.translations[i])
    return kv


def est_from_kv(kv: dict, seed=None):
    """``(EstimatorConfig, PfConfig, GnConfig)``; ``seed`` overrides ``rng_seed``."""
    _check_keys(kv, EST_KEYS, "estimator")
    c2 = kv.get("c_squared", "auto").strip()
    seed = _int(kv, "rng_seed", 0) if seed is None else int(seed)
    base = EstimatorConfig()
    prior = kv.get("prior_center", base.prior_center).strip()
    if prior not in ("turn", "previous"):
        raise ConfigError("key 'prior_center': expected 'turn' or 'previous', got %r" % prior)
    cfg = EstimatorConfig(
        M=_int(kv, "M", base.M),
        lam=_float(kv, "lambda", base.lam),
        c_squared=None if c2 == "auto" else _float(kv, "c_squared", None),
        sigma_n=_float(kv, "sigma_n", base.sigma_n),
        kappa=_float(kv, "kappa", base.kappa),
        sampling_std=_floats(kv, "sampling_std", 6, base.sampling_std),
        rng_seed=seed,
        shift_costs=_bool(kv, "shift_costs", True),
        prior_center=prior,
        rate_memory=_floats(kv, "rate_memory", 3, base.rate_memory),
        damping=_float(kv, "damping", base.damping),
    )
    mn = MotionNoise(_floats(kv, "pf_accel_std", 3, MotionNoise.accel_std), _floats(kv, "pf_gyro_std", 3, MotionNoise.gyro_std))
    pf = PfConfig(M=_int(kv, "pf_M", 1024), sigma=_float(kv, "pf_sigma", cfg.sigma_n), motion=mn,
                  init_std=_floats(kv, "pf_init_std", 6, PfConfig.init_std), rng_seed=seed)
    gn = GnConfig(max_iters=_int(kv, "gn_max_iters", 20), convergence_tol=_float(kv, "gn_tol", 1e-4),
                  step_damping=_float(kv, "gn_damping", 1.0),
                  velocity_smoothing=_float(kv, "gn_velocity_smoothing", GnConfig.velocity_smoothing))
    return cfg, pf, gn


def gp_from_kv(kv: dict):
    """``(resolution, GpHyperparams)``."""
    _check_keys(kv, MAP_KEYS, "map")
    d = GpHyperparams()
    gp = GpHyperparams(
        length_scale=_float(kv, "length_scale", d.length_scale),
        sigma_f=_float(kv, "sigma_f", d.sigma_f),
        sigma_n=_float(kv, "sigma_n", d.sigma_n),
        support_radius=_float(kv, "support_radius", d.support_radius),
        min_neighbors=_int(kv, "min_neighbors", d.min_neighbors),
        max_neighbors=_int(kv, "max_neighbors", d.max_neighbors),
    )
    return _float(kv, "resolution", 0.05), gp


# CSV --------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def _read_rows(path, columns):
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd, None)
            if header is None or [h.strip() for h in header] != columns:
                raise MapFormatError("%s: expected header %s" % (path, ",".join(columns)))
            rows = [r for r in rd if r]
    except OSError as e:
        raise MapFormatError("cannot read %s: %s" % (path, e)) from e
    try:
        return np.array(rows, dtype=float).reshape(-1, len(columns))
    except ValueError as e:
        raise MapFormatError("%s: malformed numeric row" % path) from e


def _write_rows(path, columns, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(r)


def write_frames(path, frames) -> None:
    rows = []
    for f in frames:
        for i in range(len(f)):
            b = f.readings[i]
            rows.append([_fmt(f.t), i, _fmt(b[0]), _fmt(b[1]), _fmt(b[2]), int(f.truth_outlier_mask[i])])
    _write_rows(path, FRAME_COLUMNS, rows)


def read_frames(path) -> list:
    a = _read_rows(path, FRAME_COLUMNS)
    frames = []
    if len(a) == 0:
        return frames
    # rows are grouped by timestamp in file order
    breaks = np.nonzero(np.diff(a[:, 0]) != 0)[0] + 1
    for blk in np.split(a, breaks):
        ids = blk[:, 1].astype(int)
        if not np.array_equal(ids, np.arange(len(blk))):
            raise MapFormatError("%s: sensor ids at t=%r must be 0..N-1 in order" % (path, blk[0, 0]))
        frames.append(MeasurementFrame(blk[0, 0], blk[:, 2:5], blk[:, 5] != 0))
    return frames


def _state_row(x: State):
    return [_fmt(v) for v in (x.t, *x.p, *x.phi, *x.v, *x.omega)]


def write_truth(path, traj) -> None:
    _write_rows(path, TRUTH_COLUMNS, [_state_row(x) for _, x in traj])


def read_truth(path) -> list:
    a = _read_rows(path, TRUTH_COLUMNS)
    return [(r[0], State(r[1:4], r[4:7], r[7:10], r[10:13], r[0])) for r in a]


def write_estimates(path, results) -> None:
    rows = []
    for x, d in results:
        # failure is encoded as s_min = inf; NaN means the method has no cost
        s_min = np.inf if d.failed else d.s_min
        rows.append(_state_row(x) + [_fmt(s_min), _fmt(d.effective_sample_size), int(d.inliers),
                                     _fmt(d.elapsed * 1e6)])
    _write_rows(path, EST_COLUMNS, rows)


def read_estimates(path) -> list:
    a = _read_rows(path, EST_COLUMNS)
    out = []
    for r in a:
        x = State(r[1:4], r[4:7], r[7:10], r[10:13], r[0])
        d = StepDiagnostics(s_min=r[13], effective_sample_size=r[14], inlier_fraction=np.nan,
                            elapsed=r[16] * 1e-6, inliers=int(r[15]), failed=bool(r[13] == np.inf))
        out.append((x, d))
    return out


def write_samples(path, positions, fields) -> None:
    P = np.asarray(positions, dtype=float).reshape(-1, 3)
    F = np.asarray(fields, dtype=float).reshape(-1, 3)
    _write_rows(path, SAMPLE_COLUMNS, [[_fmt(v) for v in (*p, *f)] for p, f in zip(P, F)])


def read_samples(path):
    a = _read_rows(path, SAMPLE_COLUMNS)
    return a[:, :3].copy(), a[:, 3:].copy()
