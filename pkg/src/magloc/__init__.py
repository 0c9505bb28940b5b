"""Magnetic-field map localization with outlier-robust importance sampling.

Submodules: ``so3`` (rotation numerics), ``mfmap`` (hash-indexed field map),
``sim`` (dipole worlds, trajectories, magnetometer frames), ``estimator``
(the sampling-based estimator), ``baselines`` (particle filter and
Gauss-Newton), ``evaluation`` and ``experiment`` (scoring and pipelines),
``io`` and ``cli``.
"""

from .errors import MaglocError
from .estimator import EstimatorConfig, estimate_step, run_sequence
from .mfmap import GpHyperparams, MagneticMap, build_map, load_map, save_map
from .state import ControlSample, State

__version__ = "0.1.0"

__all__ = [
    "ControlSample",
    "EstimatorConfig",
    "GpHyperparams",
    "MagneticMap",
    "MaglocError",
    "State",
    "build_map",
    "estimate_step",
    "load_map",
    "run_sequence",
    "save_map",
]
