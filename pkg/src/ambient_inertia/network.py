"""Grid cases and the frequency-divider model.

Matrix ordering is fixed: buses ascending by id define rows/columns of
every N-sized block, generators ascending by id define every M-sized block.

Susceptances use the positive-diagonal convention (the negated imaginary
part of the bus admittance matrix): a series element of reactance ``x``
contributes ``+1/x`` to both diagonal entries and ``-1/x`` off-diagonal.
The frequency-divider relation is homogeneous, so the global sign does not
change any result, and this convention keeps the generator block
``B_gg`` positive.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import (
    CaseParseError,
    CaseValidationError,
    ConfigurationError,
    ModelError,
    NumericalRankError,
    ParameterError,
)

PINV_RTOL = 1e-10

DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class Bus:
    id: int
    is_poi: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    resistance: float
    reactance: float
    shunt_susceptance: float = 0.0


@dataclass(frozen=True)
class Generator:
    id: int
    poi_bus: int
    internal_reactance: float
    connector_reactance: float
    rated_mva: float
    true_H: float | None = None
    true_D: float | None = None

    @property
    def coupling_susceptance(self) -> float:
        return 1.0 / (self.internal_reactance + self.connector_reactance)


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float = 0.0


@dataclass(frozen=True)
class Cig:
    """Converter-interfaced injection; contributes power but no rotor."""

    bus: int
    p: float


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    nominal_freq: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...] = ()
    cigs: tuple[Cig, ...] = ()
    name: str = ""

    @property
    def bus_ids(self) -> list[int]:
        return sorted(b.id for b in self.buses)

    @property
    def sorted_generators(self) -> list[Generator]:
        return sorted(self.generators, key=lambda g: g.id)

    @property
    def gen_ids(self) -> list[int]:
        return [g.id for g in self.sorted_generators]

    @property
    def poi_buses(self) -> list[int]:
        return [g.poi_bus for g in self.sorted_generators]

    def validate(self) -> "NetworkCase":
        validate_case(self)
        return self


@dataclass(frozen=True)
class FdfModel:
    """Partitioned frequency-divider blocks for one case and PMU placement."""

    bus_ids: tuple[int, ...]
    gen_ids: tuple[int, ...]
    measured_buses: tuple[int, ...]
    nominal_freq: float
    B_bus: np.ndarray
    B_gg: np.ndarray
    B_bg: np.ndarray
    B_bb: np.ndarray
    diag_b_gb: np.ndarray
    B_Bb: np.ndarray
    B_Bl: np.ndarray
    E: np.ndarray
    C: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return len(self.bus_ids)

    @property
    def M(self) -> int:
        return len(self.gen_ids)

    @property
    def L(self) -> int:
        return len(self.measured_buses)


# ---------------------------------------------------------------------------
# Parsing


def _line(node) -> int:
    return node.start_mark.line + 1


def _mapping(node, where):
    if not isinstance(node, yaml.MappingNode):
        raise CaseParseError(f"{where}: expected a mapping (line {_line(node)})")
    out = {}
    for key_node, value_node in node.value:
        out[key_node.value] = value_node
    return out


def _sequence(node, where):
    if not isinstance(node, yaml.SequenceNode):
        raise CaseParseError(f"{where}: expected a list (line {_line(node)})")
    return node.value


def _scalar(node, where, kind):
    if not isinstance(node, yaml.ScalarNode):
        raise CaseParseError(f"{where}: expected a scalar (line {_line(node)})")
    value = yaml.safe_load(node.value) if node.style is None else node.value
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if isinstance(value, bool):
            raise TypeError
        return float(value)
    except (TypeError, ValueError):
        raise CaseParseError(
            f"{where}: expected {kind.__name__}, got {node.value!r} (line {_line(node)})"
        ) from None


def _fields(node, where, spec):
    """Convert a mapping node using ``spec = {name: (kind, required, default)}``."""
    items = _mapping(node, where)
    out = {}
    for name, (kind, required, default) in spec.items():
        if name not in items:
            if required:
                raise CaseParseError(f"{where}: missing field '{name}' (line {_line(node)})")
            out[name] = default
            continue
        out[name] = _scalar(items[name], f"{where}.{name}", kind)
    unknown = set(items) - set(spec)
    if unknown:
        key = sorted(unknown)[0]
        raise CaseParseError(f"{where}: unknown field '{key}' (line {_line(items[key])})")
    return out


_BUS = {"id": (int, True, None), "is_poi": (bool, False, False)}
_BRANCH = {
    "from_bus": (int, True, None),
    "to_bus": (int, True, None),
    "resistance": (float, False, 0.0),
    "reactance": (float, True, None),
    "shunt_susceptance": (float, False, 0.0),
}
_GEN = {
    "id": (int, True, None),
    "poi_bus": (int, True, None),
    "internal_reactance": (float, True, None),
    "connector_reactance": (float, False, 0.0),
    "rated_mva": (float, True, None),
    "true_h_s": (float, False, None),
    "true_d_pu": (float, False, None),
}
_LOAD = {"bus": (int, True, None), "p": (float, True, None), "q": (float, False, 0.0)}
_CIG = {"bus": (int, True, None), "p": (float, True, None)}


def parse_case_text(text: str, source: str = "<string>") -> NetworkCase:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise CaseParseError(f"{source}: not a valid document: {exc}") from None
    if root is None:
        raise CaseParseError(f"{source}: empty document")
    top = _mapping(root, source)
    for key in ("base_mva", "nominal_freq_hz", "buses", "branches", "generators"):
        if key not in top:
            raise CaseParseError(f"{source}: missing field '{key}' (line {_line(root)})")
    known = {"name", "base_mva", "nominal_freq_hz", "buses", "branches", "generators", "loads", "cigs"}
    for key, node in top.items():
        if key not in known:
            raise CaseParseError(f"{source}: unknown field '{key}' (line {_line(node)})")

    buses = tuple(Bus(**_fields(n, f"buses[{i}]", _BUS)) for i, n in enumerate(_sequence(top["buses"], "buses")))
    branches = tuple(
        Branch(**_fields(n, f"branches[{i}]", _BRANCH))
        for i, n in enumerate(_sequence(top["branches"], "branches"))
    )
    generators = []
    for i, n in enumerate(_sequence(top["generators"], "generators")):
        f = _fields(n, f"generators[{i}]", _GEN)
        f["true_H"] = f.pop("true_h_s")
        f["true_D"] = f.pop("true_d_pu")
        generators.append(Generator(**f))
    loads = ()
    if "loads" in top:
        loads = tuple(Load(**_fields(n, f"loads[{i}]", _LOAD)) for i, n in enumerate(_sequence(top["loads"], "loads")))
    cigs = ()
    if "cigs" in top:
        cigs = tuple(Cig(**_fields(n, f"cigs[{i}]", _CIG)) for i, n in enumerate(_sequence(top["cigs"], "cigs")))
    name = top["name"].value if "name" in top else Path(source).stem

    case = NetworkCase(
        base_mva=_scalar(top["base_mva"], "base_mva", float),
        nominal_freq=_scalar(top["nominal_freq_hz"], "nominal_freq_hz", float),
        buses=buses,
        branches=branches,
        generators=tuple(generators),
        loads=loads,
        cigs=cigs,
        name=name,
    )
    return validate_case(case)


def parse_case(path) -> NetworkCase:
    """Read and validate a case file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CaseParseError(f"cannot read case file {path}: {exc.strerror}") from None
    return parse_case_text(text, str(path))


def bundled_case_path(name: str) -> Path:
    """Path of a bundled case, ``'ieee14'`` or ``'ieee39'``."""
    path = DATA_DIR / f"{name}.yaml"
    if not path.exists():
        raise CaseParseError(f"no bundled case named {name!r}")
    return path


def load_bundled_case(name: str) -> NetworkCase:
    return parse_case(bundled_case_path(name))


def validate_case(case: NetworkCase) -> NetworkCase:
    ids = [b.id for b in case.buses]
    if not ids:
        raise CaseValidationError("case has no buses")
    if len(set(ids)) != len(ids):
        raise CaseValidationError("bus ids must be unique")
    poi = {b.id for b in case.buses if b.is_poi}
    known = set(ids)
    if case.base_mva <= 0 or case.nominal_freq <= 0:
        raise CaseValidationError("base_mva and nominal_freq_hz must be positive")

    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} is a self loop")
        if br.reactance == 0:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} has zero reactance")

    gen_ids = [g.id for g in case.generators]
    if len(set(gen_ids)) != len(gen_ids):
        raise CaseValidationError("generator ids must be unique")
    for g in case.generators:
        if g.poi_bus not in known:
            raise CaseValidationError(f"generator {g.id}: poi_bus {g.poi_bus} does not exist")
        if g.poi_bus not in poi:
            raise CaseValidationError(f"generator {g.id}: poi_bus {g.poi_bus} is not flagged is_poi")
        if not g.internal_reactance > 0:
            raise CaseValidationError(f"generator {g.id}: internal_reactance must be > 0")
        if not g.connector_reactance >= 0:
            raise CaseValidationError(f"generator {g.id}: connector_reactance must be >= 0")
        if not g.rated_mva > 0:
            raise CaseValidationError(f"generator {g.id}: rated_mva must be > 0")
    for ld in case.loads:
        if ld.bus not in known:
            raise CaseValidationError(f"load references unknown bus {ld.bus}")
    for cig in case.cigs:
        if cig.bus not in known:
            raise CaseValidationError(f"cig references unknown bus {cig.bus}")

    # connectivity of the branch graph
    adj = {i: set() for i in ids}
    for br in case.branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    seen = {ids[0]}
    stack = [ids[0]]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    if len(seen) != len(ids):
        missing = sorted(known - seen)
        raise CaseValidationError(f"branch graph is not connected; unreachable buses {missing}")
    return case


# ---------------------------------------------------------------------------
# Frequency-divider model


def susceptance_matrix(case: NetworkCase, include_shunts: bool = False) -> np.ndarray:
    """Series susceptance matrix, positive-diagonal convention, buses sorted."""
    ids = case.bus_ids
    pos = {b: i for i, b in enumerate(ids)}
    B = np.zeros((len(ids), len(ids)))
    for br in case.branches:
        i, j = pos[br.from_bus], pos[br.to_bus]
        y = 1.0 / br.reactance
        B[i, i] += y
        B[j, j] += y
        B[i, j] -= y
        B[j, i] -= y
        if include_shunts:
            B[i, i] -= br.shunt_susceptance / 2.0
            B[j, j] -= br.shunt_susceptance / 2.0
    return B


def build_fdf(case: NetworkCase, measured_buses=None, include_shunts: bool = False) -> FdfModel:
    """Assemble the frequency-divider blocks and the rotor-speed map ``C``.

    ``measured_buses`` defaults to the POI buses. Every POI bus must be
    measured, otherwise rotor speeds are not recoverable.
    """
    ids = case.bus_ids
    pos = {b: i for i, b in enumerate(ids)}
    gens = case.sorted_generators
    if measured_buses is None:
        measured_buses = case.poi_buses
    measured = sorted(set(int(b) for b in measured_buses))
    unknown = [b for b in measured if b not in pos]
    if unknown:
        raise ConfigurationError(f"measured buses {unknown} are not in the case")
    unmeasured = sorted({g.poi_bus for g in gens} - set(measured))
    if unmeasured:
        raise ConfigurationError(
            f"POI buses {unmeasured} are not measured; rotor speeds would be under-determined"
        )
    poi_list = [g.poi_bus for g in gens]
    if len(set(poi_list)) != len(poi_list):
        raise ConfigurationError("two generators share a POI bus; their rotor speeds are not separable")

    N, M, L = len(ids), len(gens), len(measured)
    B_bus = susceptance_matrix(case, include_shunts)
    b = np.array([g.coupling_susceptance for g in gens])

    B_gg = np.zeros((N, N))
    B_bg = np.zeros((N, M))
    for j, g in enumerate(gens):
        i = pos[g.poi_bus]
        B_gg[i, i] += b[j]
        B_bg[i, j] = -b[j]
    B_bb = B_bus + B_gg

    poi_rows = [pos[p] for p in poi_list]
    B_Bb = -B_bb[poi_rows, :]
    B_Bl = B_bb.copy()
    B_Bl[poi_rows, :] = 0.0

    E = np.zeros((L, N))
    for r, bus in enumerate(measured):
        E[r, pos[bus]] = 1.0

    model = FdfModel(
        bus_ids=tuple(ids),
        gen_ids=tuple(g.id for g in gens),
        measured_buses=tuple(measured),
        nominal_freq=case.nominal_freq,
        B_bus=B_bus,
        B_gg=B_gg,
        B_bg=B_bg,
        B_bb=B_bb,
        diag_b_gb=np.diag(b),
        B_Bb=B_Bb,
        B_Bl=B_Bl,
        E=E,
    )
    return dataclasses.replace(model, C=compute_C(model))


def pinv(a: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """SVD pseudo-inverse; singular values below ``rtol * s_max`` are dropped."""
    return np.linalg.pinv(a, rcond=rtol)


def compute_C(model: FdfModel) -> np.ndarray:
    """Map measured bus-frequency deviations to rotor-speed deviations."""
    stacked = np.vstack([model.E, model.B_Bl])
    s = np.linalg.svd(stacked, compute_uv=False)
    rank = int(np.sum(s > PINV_RTOL * s[0])) if s.size else 0
    if rank < model.N:
        cond = s[0] / s[-1] if s[-1] > 0 else np.inf
        raise NumericalRankError(
            f"stacked selection/network matrix has rank {rank} < {model.N} (condition number {cond:.3e})",
            condition_number=cond,
        )
    rhs = np.vstack([np.eye(model.L), np.zeros((model.N, model.L))])
    b_inv = 1.0 / np.diag(model.diag_b_gb)
    return -(b_inv[:, None] * model.B_Bb) @ pinv(stacked) @ rhs


def rotor_to_bus(model: FdfModel) -> np.ndarray:
    """N x M matrix K with ``dw_B = K @ dw_G`` from the unpartitioned relation."""
    try:
        return -np.linalg.solve(model.B_bb, model.B_bg)
    except np.linalg.LinAlgError:
        raise ModelError("bus susceptance block is singular (islanded bus?)") from None


def fdf_residual(model: FdfModel, dw_G: np.ndarray, dw_B: np.ndarray) -> np.ndarray:
    """Residual of ``B_BG dw_G + B_BB dw_B`` (columns may be time samples)."""
    return model.B_bg @ dw_G + model.B_bb @ dw_B


def partition_residual(model: FdfModel, dw_G: np.ndarray, dw_B: np.ndarray) -> np.ndarray:
    """Residual of the partitioned (M + N)-row form of the relation."""
    top = model.diag_b_gb @ dw_G + model.B_Bb @ dw_B
    bottom = model.B_Bl @ dw_B
    return np.concatenate([top, bottom], axis=0)


def perturb_parameters(case: NetworkCase, bound: float, seed: int) -> NetworkCase:
    """Scale every reactance/susceptance by an independent factor in ``[1-bound, 1+bound]``."""
    if not 0 <= bound < 1:
        raise ParameterError(f"perturbation bound must satisfy 0 <= bound < 1, got {bound}")
    if bound == 0:
        return case
    rng = np.random.default_rng(seed)

    def factor():
        return float(rng.uniform(1.0 - bound, 1.0 + bound))

    branches = tuple(
        dataclasses.replace(br, reactance=br.reactance * factor(), shunt_susceptance=br.shunt_susceptance * factor())
        for br in case.branches
    )
    generators = tuple(
        dataclasses.replace(
            g,
            internal_reactance=g.internal_reactance * factor(),
            connector_reactance=g.connector_reactance * factor(),
        )
        for g in case.generators
    )
    return dataclasses.replace(case, branches=branches, generators=generators)


def case_to_dict(case: NetworkCase) -> dict:
    """Inverse of the parser, for writing cases back out."""
    gens = []
    for g in case.generators:
        d = {
            "id": g.id,
            "poi_bus": g.poi_bus,
            "internal_reactance": g.internal_reactance,
            "connector_reactance": g.connector_reactance,
            "rated_mva": g.rated_mva,
        }
        if g.true_H is not None:
            d["true_h_s"] = g.true_H
        if g.true_D is not None:
            d["true_d_pu"] = g.true_D
        gens.append(d)
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "nominal_freq_hz": case.nominal_freq,
        "buses": [dataclasses.asdict(b) for b in case.buses],
        "branches": [dataclasses.asdict(b) for b in case.branches],
        "generators": gens,
        "loads": [dataclasses.asdict(x) for x in case.loads],
        "cigs": [dataclasses.asdict(x) for x in case.cigs],
    }
