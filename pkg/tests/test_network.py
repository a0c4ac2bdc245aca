import dataclasses

import numpy as np
import pytest

from ambient_inertia.errors import CaseParseError, CaseValidationError, ConfigurationError, ParameterError
from ambient_inertia.network import (
    build_fdf,
    bundled_case_path,
    case_to_dict,
    fdf_residual,
    parse_case,
    parse_case_text,
    partition_residual,
    perturb_parameters,
    rotor_to_bus,
)

from .conftest import TOY_TWO_BUS


def reference_susceptance(case):
    """Negated imaginary part of the complex admittance matrix, built from scratch."""
    ids = sorted(b.id for b in case.buses)
    k = {b: i for i, b in enumerate(ids)}
    Y = np.zeros((len(ids), len(ids)), dtype=complex)
    for br in case.branches:
        y = 1.0 / complex(0.0, br.reactance)
        i, j = k[br.from_bus], k[br.to_bus]
        Y[[i, j], [i, j]] += y
        Y[i, j] -= y
        Y[j, i] -= y
    return -Y.imag


def test_bundled_sizes(case14, case39):
    assert (len(case14.buses), len(case14.generators)) == (14, 5)
    assert (len(case39.buses), len(case39.generators)) == (39, 10)
    assert sorted(c.bus for c in case39.cigs) == [2, 29, 39]


def test_generator_at_missing_bus_is_rejected():
    text = TOY_TWO_BUS.replace("poi_bus: 1", "poi_bus: 7")
    with pytest.raises(CaseValidationError, match="poi_bus 7 does not exist"):
        parse_case_text(text)


@pytest.mark.parametrize(
    "old, new, match",
    [
        ("reactance: 0.2}", "reactance: 0.2, colour: red}", "unknown field 'colour'"),
        ("rated_mva: 100,", "rated_mva: big,", "expected float"),
        ("internal_reactance: 0.1, ", "", "missing field 'internal_reactance'"),
    ],
)
def test_schema_errors_name_field_and_line(old, new, match):
    with pytest.raises(CaseParseError, match=match) as info:
        parse_case_text(TOY_TWO_BUS.replace(old, new))
    assert "line" in str(info.value)


@pytest.mark.parametrize(
    "old, new, match",
    [
        ("internal_reactance: 0.1", "internal_reactance: 0.0", "internal_reactance must be > 0"),
        ("connector_reactance: 0.1", "connector_reactance: -0.1", "connector_reactance must be >= 0"),
        ("rated_mva: 100", "rated_mva: 0", "rated_mva must be > 0"),
        ("{id: 1, is_poi: true}", "{id: 1}", "not flagged is_poi"),
        ("to_bus: 2", "to_bus: 1", "self loop"),
    ],
)
def test_invariant_violations(old, new, match):
    with pytest.raises(CaseValidationError, match=match):
        parse_case_text(TOY_TWO_BUS.replace(old, new))


def test_disconnected_graph_rejected():
    text = TOY_TWO_BUS.replace("  - {id: 2}\n", "  - {id: 2}\n  - {id: 3}\n")
    with pytest.raises(CaseValidationError, match=r"unreachable buses \[3\]"):
        parse_case_text(text)


def test_missing_file():
    with pytest.raises(CaseParseError, match="nope.yaml"):
        parse_case("nope.yaml")


def test_toy_coupling_susceptance(toy2):
    fdf = build_fdf(toy2)
    np.testing.assert_allclose(fdf.diag_b_gb, [[5.0]])


def test_single_machine_single_bus_C_is_one(single_bus):
    fdf = build_fdf(single_bus)
    np.testing.assert_allclose(fdf.C, [[1.0]])


def test_susceptance_matches_complex_admittance(case14, case39):
    for case in (case14, case39):
        fdf = build_fdf(case)
        np.testing.assert_allclose(fdf.B_bus, reference_susceptance(case), atol=1e-12)
        np.testing.assert_array_equal(fdf.B_bus, fdf.B_bus.T)


def test_block_structure(case14):
    fdf = build_fdf(case14)
    assert fdf.E.shape == (5, 14)
    np.testing.assert_array_equal(fdf.E.sum(axis=1), np.ones(5))
    np.testing.assert_array_equal(fdf.E @ fdf.E.T, np.eye(5))
    np.testing.assert_allclose(fdf.B_bb, fdf.B_bus + fdf.B_gg)
    pos = {b: i for i, b in enumerate(fdf.bus_ids)}
    poi = {pos[g.poi_bus]: g for g in case14.generators}
    for i in range(fdf.N):
        if i in poi:
            assert fdf.B_gg[i, i] == pytest.approx(poi[i].coupling_susceptance)
        else:
            assert fdf.B_gg[i, i] == 0.0
    for j, g in enumerate(case14.sorted_generators):
        assert fdf.diag_b_gb[j, j] == pytest.approx(1.0 / (g.internal_reactance + g.connector_reactance))


@pytest.mark.parametrize("name, rank", [("ieee14", 5), ("ieee39", 10)])
def test_C_full_rank(name, rank, request):
    case = request.getfixturevalue("case" + name[4:])
    fdf = build_fdf(case)
    assert np.linalg.matrix_rank(fdf.C) == rank
    # a uniform frequency maps to the same uniform rotor speed
    np.testing.assert_allclose(fdf.C @ np.ones(fdf.L), np.ones(fdf.M), atol=1e-12)


def test_unmeasured_poi_is_configuration_error(case14):
    with pytest.raises(ConfigurationError, match="not measured"):
        build_fdf(case14, measured_buses=[1, 2, 3, 6])


def test_round_trip_on_forward_relation(case14, case39, rng):
    for case in (case14, case39):
        fdf = build_fdf(case)
        dw_G = rng.normal(scale=1e-3, size=(fdf.M, 50))
        # independent forward solve of the unpartitioned relation
        dw_B = np.linalg.solve(fdf.B_bus + fdf.B_gg, -fdf.B_bg @ dw_G)
        assert np.abs(fdf_residual(fdf, dw_G, dw_B)).max() < 1e-12
        assert np.abs(partition_residual(fdf, dw_G, dw_B)).max() < 1e-12
        meas = fdf.E @ dw_B
        assert np.abs(fdf.C @ meas - dw_G).max() < 1e-10
        np.testing.assert_allclose(rotor_to_bus(fdf) @ dw_G, dw_B, atol=1e-14)


def test_round_trip_on_simulator_output(clean14, case14):
    fdf = build_fdf(case14)
    pos = [clean14.bus_ids.index(b) for b in fdf.measured_buses]
    meas = clean14.bus_freq_meas[:, pos] / clean14.nominal_freq - 1.0
    assert np.abs(meas @ fdf.C.T - (clean14.omega_G - 1.0)).max() < 1e-10


def test_parsing_is_deterministic():
    a = build_fdf(parse_case(bundled_case_path("ieee39")))
    b = build_fdf(parse_case(bundled_case_path("ieee39")))
    for f in ("B_bus", "B_bb", "C"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_case_to_dict_round_trip(case39):
    import yaml

    again = parse_case_text(yaml.safe_dump(case_to_dict(case39)))
    assert again == case39


class TestPerturbation:
    def test_zero_bound_identity(self, case14):
        assert perturb_parameters(case14, 0.0, seed=3) == case14

    def test_bound_respected(self, case14):
        out = perturb_parameters(case14, 0.3, seed=7)
        for old, new in zip(case14.branches, out.branches):
            assert abs(new.reactance / old.reactance - 1) <= 0.3
        for old, new in zip(case14.generators, out.generators):
            assert abs(new.internal_reactance / old.internal_reactance - 1) <= 0.3
        assert out != case14

    def test_deterministic_and_pure(self, case14):
        snapshot = dataclasses.replace(case14)
        assert perturb_parameters(case14, 0.3, 7) == perturb_parameters(case14, 0.3, 7)
        assert case14 == snapshot

    @pytest.mark.parametrize("bound", [1.0, 1.5, -0.1])
    def test_bad_bound(self, case14, bound):
        with pytest.raises(ParameterError):
            perturb_parameters(case14, bound, 0)
