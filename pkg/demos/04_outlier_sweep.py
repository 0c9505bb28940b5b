"""How estimation error grows with the outlier rate.

The quickstart scene is rerun at increasing outlier rates, comparing the
truncated cost against the same estimator with truncation disabled and a
Gaussian-likelihood particle filter. Uses configparser to derive the
variant scene files.

Run: python demos/04_outlier_sweep.py
"""

import configparser
import tempfile
from pathlib import Path

from magloc.experiment import bundled, run_experiment

base = configparser.ConfigParser()
base.optionxform = str  # keep key case, e.g. M and pf_M
base.read(bundled("quickstart.cfg"))
base["experiment"]["methods"] = "idfmfl, idfmfl-norobust, pf"
base["experiment"]["seeds"] = "0, 1, 2"
base["trajectory"]["duration"] = "10"

work = Path(tempfile.mkdtemp(prefix="magloc_sweep_"))
rates = (0.0, 0.1, 0.2, 0.3)
print("%-8s %12s %14s %12s" % ("outliers", "idfmfl", "no truncation", "pf"))
for rate in rates:
    base["world"]["outlier_rate"] = str(rate)
    cfg = work / ("scene_%02d.cfg" % int(rate * 100))
    with open(cfg, "w") as fh:
        base.write(fh)
    res = run_experiment(cfg)
    cells = ["%10.3f m" % res.median_ate(m) for m in ("idfmfl", "idfmfl-norobust", "pf")]
    print("%-8s %12s %14s %12s" % ("%d%%" % (rate * 100), *cells))
