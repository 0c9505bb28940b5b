import time

import pytest

from magloc.errors import ConfigError
from magloc.experiment import load_scene, run_experiment


def test_quickstart_end_to_end(tmp_path):
    t0 = time.perf_counter()
    res = run_experiment("quickstart.cfg", out_dir=tmp_path / "a")
    elapsed = time.perf_counter() - t0
    print("quickstart finished in %.1f s" % elapsed)
    assert elapsed < 60
    s = res.summary()
    assert set(s) == {"idfmfl", "idfmfl-norobust", "pf", "gn"}
    for name in ("report.txt", "timing.txt", "map.mfm", "truth.csv", "frames_s0.csv", "est_idfmfl_s1.csv",
                 "series_pf_s0.csv"):
        assert (tmp_path / "a" / name).exists()
    assert s["idfmfl"]["failure_steps"] == 0


def test_rerun_is_bit_identical(tmp_path):
    run_experiment("quickstart.cfg", out_dir=tmp_path / "a", methods=("idfmfl", "gn"))
    run_experiment("quickstart.cfg", out_dir=tmp_path / "b", methods=("idfmfl", "gn"), threads=2)
    for name in ("report.txt", "truth.csv", "map.mfm", "frames_s0.csv", "series_idfmfl_s0.csv", "series_gn_s1.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    # est files end in a wall-clock latency column; everything before it matches
    for name in ("est_idfmfl_s0.csv", "est_gn_s1.csv"):
        a = [r.rsplit(",", 1)[0] for r in (tmp_path / "a" / name).read_text().splitlines()]
        b = [r.rsplit(",", 1)[0] for r in (tmp_path / "b" / name).read_text().splitlines()]
        assert a == b and len(a) == 61


def test_unknown_method_names_field(tmp_path):
    with pytest.raises(ConfigError, match="methods"):
        load_scene("quickstart.cfg", methods=("idfmfl", "ekf"))


def test_bundled_scenes_parse():
    for name in ("quickstart.cfg", "warehouse.cfg", "warehouse_outliers.cfg", "flat.cfg"):
        s = load_scene(name)
        assert s.seeds
    w = load_scene("warehouse.cfg")
    assert len(w.sources) == 20 and len(w.rig) == 7 and len(w.seeds) == 10
    assert w.noise.outlier_rate == 0.05 and w.noise.sigma_n == 0.5
    assert load_scene("warehouse_outliers.cfg").noise.outlier_rate == 0.2
