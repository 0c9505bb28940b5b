"""Build a magnetic map from a simulated survey and look at how well it
reproduces the true field.

Run: python demos/01_map_from_survey.py
"""

import numpy as np

from magloc.mfmap import GpHyperparams, build_map
from magloc.sim import DEFAULT_BASE_FIELD, SurveySpec, random_dipoles, survey, world_field

# a 3 m x 2 m floor patch with a handful of buried ferromagnetic sources
sources = random_dipoles(8, (0.0, 0.0, -1.0, 3.0, 2.0, -0.5), (100.0, 300.0), rng=1)

# survey on a 10 cm grid at three heights around the sensor plane
spec = SurveySpec(bounds=(0.0, 0.0, 0.2, 3.0, 2.0, 0.4), spacing=0.1, heights=(0.2, 0.3, 0.4))
pos, fld = survey(sources, DEFAULT_BASE_FIELD, spec, sigma=0.5, seed=0)
print("survey samples:", len(pos))

# densify to 5 cm cells with a local GP around the geomagnetic background
m = build_map((pos, fld), 0.05, GpHyperparams(), base_field=DEFAULT_BASE_FIELD)
print("map cells:", len(m), " resolution:", m.resolution)

# compare map values with the true field at random points inside the survey
rng = np.random.default_rng(0)
pts = rng.uniform((0.3, 0.3, 0.22), (2.7, 1.7, 0.38), size=(2000, 3))
vals, ok = m.query_many(pts)
truth = world_field(sources, DEFAULT_BASE_FIELD, pts)
err = np.linalg.norm(vals[ok] - truth[ok], axis=1)
anomaly = np.linalg.norm(truth - DEFAULT_BASE_FIELD, axis=1)
print("mapped: %.1f%% of query points" % (100 * ok.mean()))
print("field anomaly:  median %.2f uT, max %.2f uT" % (np.median(anomaly), anomaly.max()))
print("map error:      median %.2f uT, 95th pct %.2f uT" % (np.median(err), np.percentile(err, 95)))

# outside the surveyed volume there is nothing to look up
print("query far away:", m.query((10.0, 10.0, 0.3)))
