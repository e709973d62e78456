"""Probabilistic NLoS indoor positioning from noisy AoA measurements.

Pipeline: reverse Monte Carlo ray launching through a triangle-mesh digital
twin produces a weighted crossing map per base station; a Gaussian mixture is
fitted to each map; the per-station densities are multiplied into a position
posterior whose argmax is the estimate.  An offline table mode precomputes
the mixtures over a discretized angle grid.
"""

from raypos.scene import (
    BaseStation,
    Scene,
    SceneGenConfig,
    generate_clutter_scene,
    load_scene,
    save_scene,
    validate_scene,
)
from raypos.sampling import Angle, MeasurementModel, PointMap, launch_map
from raypos.density import Gmm, fit_gmm, select_gmm, square_method
from raypos.fusion import PdfTable, build_table, posterior_grid, argmax_position

__all__ = [
    "Angle",
    "BaseStation",
    "Gmm",
    "MeasurementModel",
    "PdfTable",
    "PointMap",
    "Scene",
    "SceneGenConfig",
    "argmax_position",
    "build_table",
    "fit_gmm",
    "generate_clutter_scene",
    "launch_map",
    "load_scene",
    "posterior_grid",
    "save_scene",
    "select_gmm",
    "square_method",
    "validate_scene",
]
