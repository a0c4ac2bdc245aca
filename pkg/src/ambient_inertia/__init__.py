"""Inertia, damping and mechanical power estimation from ambient PMU data."""

__version__ = "0.1.0"

from .bdu import BduCase, BduProblem, BduSolution, solve_bdu
from .estimator import EstimatorConfig, Measurements, run_estimation, system_inertia
from .network import FdfModel, NetworkCase, build_fdf, load_bundled_case, parse_case
from .simulator import AmbientDataset, SimulationConfig, run_scenario

__all__ = [
    "AmbientDataset",
    "BduCase",
    "BduProblem",
    "BduSolution",
    "EstimatorConfig",
    "FdfModel",
    "Measurements",
    "NetworkCase",
    "SimulationConfig",
    "build_fdf",
    "load_bundled_case",
    "parse_case",
    "run_estimation",
    "run_scenario",
    "solve_bdu",
    "system_inertia",
]
