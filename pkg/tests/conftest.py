import numpy as np
import pytest

from ambient_inertia.network import load_bundled_case, parse_case_text
from ambient_inertia.simulator import SimulationConfig, run_scenario

NOISELESS = dict(freq_error_bound=0.0, pe_error_bound=0.0, param_perturb_bound=0.0)


@pytest.fixture(scope="session")
def case14():
    return load_bundled_case("ieee14")


@pytest.fixture(scope="session")
def case39():
    return load_bundled_case("ieee39")


@pytest.fixture(scope="session")
def clean14(case14):
    """Noiseless 14-bus scenario at the default protocol."""
    return run_scenario(case14, SimulationConfig(seed=0, **NOISELESS))


@pytest.fixture(scope="session")
def noisy14(case14):
    return run_scenario(case14, SimulationConfig(seed=0))


TOY_TWO_BUS = """
name: toy2
base_mva: 100
nominal_freq_hz: 60
buses:
  - {id: 1, is_poi: true}
  - {id: 2}
branches:
  - {from_bus: 1, to_bus: 2, reactance: 0.2}
generators:
  - {id: 1, poi_bus: 1, internal_reactance: 0.1, connector_reactance: 0.1, rated_mva: 100,
     true_h_s: 3.0, true_d_pu: 1.0}
loads:
  - {bus: 2, p: 0.5}
"""

SINGLE_BUS = """
name: smib
base_mva: 100
nominal_freq_hz: 60
buses:
  - {id: 1, is_poi: true}
branches: []
generators:
  - {id: 1, poi_bus: 1, internal_reactance: 0.2, rated_mva: 100, true_h_s: 3.0, true_d_pu: 1.0}
"""


@pytest.fixture
def toy2():
    return parse_case_text(TOY_TWO_BUS, "toy2")


@pytest.fixture
def single_bus():
    return parse_case_text(SINGLE_BUS, "smib")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
