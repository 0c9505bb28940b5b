"""End-to-end pipeline: survey, map build, simulation, localization, scoring.

A scene file is an INI config with sections ``[experiment]``, ``[world]``,
``[map]``, ``[trajectory]``, ``[rig]`` and ``[estimator]``. Bundled scenes
live in ``magloc/data`` and can be referenced by bare name, e.g.
``warehouse.cfg``.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .baselines import ablation_config, gn_run, pf_run
from .errors import ConfigError, MaglocError
from .estimator import run_sequence
from .evaluation import AteReport, compute_ate
from .mfmap import build_map, load_map, save_map
from .sim import generate_trajectory, simulate_frames, survey

METHODS = ("idfmfl", "pf", "gn", "idfmfl-norobust")
EXPERIMENT_KEYS = {"methods": "", "seeds": "", "seed_count": "", "write_frames": "", "write_series": ""}


class StageError(MaglocError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__("stage '%s' failed: %s" % (stage, cause))
        self.stage = stage
        self.cause = cause


def bundled(name: str) -> Path:
    return Path(str(resources.files("magloc") / "data" / name))


def resolve_config(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    b = bundled(p.name)
    if b.exists():
        return b
    raise ConfigError("config file not found: %s" % path)


def section(kv: dict, name: str) -> dict:
    """Named section, falling back to the sectionless root of a single-purpose file."""
    if name in kv:
        return kv[name]
    return kv.get("", {})


@dataclass
class Scene:
    sources: list
    base: tuple
    noise: object
    survey_spec: object
    survey_sigma: float
    resolution: float
    gp: object
    traj_spec: object
    rig: object
    est_kv: dict
    methods: tuple
    seeds: tuple
    write_frames: bool = True
    write_series: bool = True

    def configs(self, seed: int):
        return io.est_from_kv(self.est_kv, seed=seed)


def load_scene(path, seed=None, methods=None) -> Scene:
    """Parse a scene file. ``seed`` shifts the seed list; ``methods`` overrides it."""
    kv = io.read_kv(resolve_config(path))
    exp = section(kv, "experiment") if "experiment" in kv else {}
    io._check_keys(exp, EXPERIMENT_KEYS, "experiment")
    if methods is None:
        methods = tuple(m.strip() for m in exp.get("methods", "idfmfl").split(",") if m.strip())
    for m in methods:
        if m not in METHODS:
            raise ConfigError("field 'methods': unknown method %r (expected one of %s)" % (m, ", ".join(METHODS)))
    sources, base, noise, sv, sv_sigma = io.world_from_kv(section(kv, "world"))
    res, gp = io.gp_from_kv(kv.get("map", {}))
    traj = io.traj_from_kv(section(kv, "trajectory"))
    rig = io.rig_from_kv(section(kv, "rig"))
    est_kv = kv.get("estimator", {})
    io.est_from_kv(est_kv)  # validate early
    base_seed = 0 if seed is None else int(seed)
    if "seeds" in exp:
        seeds = tuple(int(s) + base_seed for s in exp["seeds"].split(","))
    else:
        seeds = tuple(base_seed + k for k in range(io._int(exp, "seed_count", 1)))
    if sv is None:
        raise ConfigError("field 'survey_bounds': the world needs a survey to build its map")
    return Scene(sources, base, noise, sv, sv_sigma, res, gp, traj, rig, est_kv, methods, seeds,
                 io._bool(exp, "write_frames", True), io._bool(exp, "write_series", True))


def scene_map(scene: Scene, cache: Path | None = None):
    """Survey the world and build the map (loaded from ``cache`` if present)."""
    if cache is not None and cache.exists():
        return load_map(cache)
    pos, fld = survey(scene.sources, scene.base, scene.survey_spec, scene.survey_sigma, seed=0)
    m = build_map((pos, fld), scene.resolution, scene.gp, base_field=scene.base)
    if cache is not None:
        save_map(m, cache)
    return m


def localize(method: str, frames, initial, mfmap, rig, est_kv: dict, seed: int):
    """Dispatch to an estimator by CLI method name."""
    cfg, pf, gn = io.est_from_kv(est_kv, seed=seed)
    if method == "idfmfl":
        return run_sequence(frames, initial, mfmap, rig, cfg)
    if method == "idfmfl-norobust":
        return run_sequence(frames, initial, mfmap, rig, ablation_config(cfg))
    if method == "pf":
        return pf_run(frames, initial, mfmap, rig, pf)
    if method == "gn":
        return gn_run(frames, initial, mfmap, rig, gn)
    raise ConfigError("field 'method': unknown method %r" % method)


@dataclass
class RunRecord:
    method: str
    seed: int
    report: AteReport
    failures: int
    degeneracies: int
    mean_latency: float


@dataclass
class ExperimentResult:
    records: list = field(default_factory=list)
    out_dir: Path | None = None
    elapsed: float = 0.0

    def by_method(self, method: str) -> list:
        return [r for r in self.records if r.method == method]

    def median_ate(self, method: str) -> float:
        return float(np.median([r.report.ate_rmse for r in self.by_method(method)]))

    def median_velocity(self, method: str) -> float:
        return float(np.median([r.report.velocity_rmse for r in self.by_method(method)]))

    def total_failures(self, method: str) -> int:
        return int(sum(r.failures for r in self.by_method(method)))

    def summary(self) -> dict:
        out = {}
        for m in dict.fromkeys(r.method for r in self.records):
            out[m] = {"median_ate": self.median_ate(m), "median_velocity_rmse": self.median_velocity(m),
                      "failure_steps": self.total_failures(m),
                      "degeneracy_flags": int(sum(r.degeneracies for r in self.by_method(m)))}
        return out


def _series_rows(truth, est):
    rows = []
    for (_, xt), (xe, _) in zip(truth, est):
        rows.append([io._fmt(v) for v in (xt.t, *xt.p, *xe.p, *xt.v, *xe.v)])
    return rows


SERIES_COLUMNS = ["t", "px_true", "py_true", "pz_true", "px_est", "py_est", "pz_est",
                  "vx_true", "vy_true", "vz_true", "vx_est", "vy_est", "vz_est"]


def _one_seed(scene: Scene, mfmap, traj, seed: int, out_dir: Path | None):
    stage = "simulate"
    try:
        frames = simulate_frames(traj, scene.rig, scene.sources, scene.base, scene.noise, seed=seed)
        truth = traj[1:]
        if out_dir is not None and scene.write_frames:
            io.write_frames(out_dir / ("frames_s%d.csv" % seed), frames)
        recs = []
        for method in scene.methods:
            stage = "localize:%s" % method
            est = localize(method, frames, traj[0][1], mfmap, scene.rig, scene.est_kv, seed)
            stage = "evaluate:%s" % method
            failures = sum(1 for _, d in est if d.failed)
            degens = sum(1 for _, d in est if d.failed and d.discarded) if method == "gn" else failures
            rep = compute_ate([x for x, _ in est], [x for _, x in truth], failure_steps=failures)
            lat = float(np.mean([d.elapsed for _, d in est]))
            recs.append(RunRecord(method, seed, rep, failures, degens, lat))
            if out_dir is not None:
                io.write_estimates(out_dir / ("est_%s_s%d.csv" % (method, seed)), est)
                if scene.write_series:
                    io._write_rows(out_dir / ("series_%s_s%d.csv" % (method, seed)), SERIES_COLUMNS,
                                   _series_rows(truth, est))
        return recs
    except MaglocError as e:
        if isinstance(e, (StageError, ConfigError)):
            raise
        raise StageError(stage, e) from e


def run_experiment(config_path, out_dir=None, seed=None, methods=None, threads: int = 1) -> ExperimentResult:
    """Run every (method, seed) pair of a scene and write artifacts to ``out_dir``."""
    t0 = time.perf_counter()
    scene = load_scene(config_path, seed=seed, methods=methods)
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        mfmap = scene_map(scene)
        if out is not None:
            save_map(mfmap, out / "map.mfm")
    except MaglocError as e:
        raise StageError("build-map", e) from e
    try:
        traj = generate_trajectory(scene.traj_spec)
    except MaglocError as e:
        raise StageError("trajectory", e) from e
    if out is not None:
        io.write_truth(out / "truth.csv", traj)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            chunks = list(ex.map(lambda s: _one_seed(scene, mfmap, traj, s, out), scene.seeds))
    else:
        chunks = [_one_seed(scene, mfmap, traj, s, out) for s in scene.seeds]
    res = ExperimentResult([r for c in chunks for r in c], out, time.perf_counter() - t0)
    if out is not None:
        write_report(out / "report.txt", res)
    return res


def write_report(path, res: ExperimentResult) -> None:
    sections = {}
    for r in res.records:
        d = r.report.as_dict()
        d["degeneracy_flags"] = r.degeneracies
        sections["%s.seed%d" % (r.method, r.seed)] = d
    for m, s in res.summary().items():
        sections["summary.%s" % m] = s
    io.write_kv(path, sections)
    # wall-clock numbers are kept apart so report.txt stays reproducible
    timing = {"%s.seed%d" % (r.method, r.seed): {"mean_step_latency_s": r.mean_latency} for r in res.records}
    io.write_kv(Path(path).with_name("timing.txt"), timing)
