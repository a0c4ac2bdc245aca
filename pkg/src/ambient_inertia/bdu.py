"""Least squares with norm-bounded data uncertainty.

Solves::

    min_x  max_{||dA|| <= eta, ||db|| <= eta_b}  ||(A + dA) x - (b + db)||_2

whose inner maximum has the closed form ``||Ax - b|| + eta ||x|| + eta_b``.
The minimiser is one of

* ``x = 0``                                  when ``eta >= tau2``,
* ``x = (A^T A + psi I)^{-1} A^T b``         when ``tau1 < eta < tau2``,
* ``x = A^+ b``                              when ``eta <= tau1``,

with ``psi > 0`` the root of the secular equation. When ``b`` has a
component outside the range of ``A`` the least-squares point is optimal
only for ``eta = 0``; ``tau1`` is then reported as 0 and the secular
equation carries the extra ``-eta^2 ||b_perp||^2 / psi^2`` term.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, SecularRootError

PINV_RTOL = 1e-10
EQUALITY_RTOL = 1e-12
RANGE_RTOL = 1e-10
MAX_DOUBLINGS = 200


class BduCase(str, enum.Enum):
    ETA_GE_TAU2 = "ETA_GE_TAU2"
    INTERIOR = "INTERIOR"
    ETA_LE_TAU1 = "ETA_LE_TAU1"
    DEGENERATE_FAMILY = "DEGENERATE_FAMILY"


@dataclass(frozen=True)
class BduProblem:
    A: np.ndarray
    b: np.ndarray
    eta: float = 0.0
    eta_b: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        m, n = A.shape
        if b.shape[0] != m:
            raise ParameterError(f"b has {b.shape[0]} entries, A has {m} rows")
        if m < n:
            raise ParameterError(f"A must have at least as many rows as columns, got {m}x{n}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ParameterError("A and b must be finite")
        if not (np.isfinite(self.eta) and self.eta >= 0):
            raise ParameterError(f"eta must be a finite nonnegative number, got {self.eta}")
        if not (np.isfinite(self.eta_b) and self.eta_b >= 0):
            raise ParameterError(f"eta_b must be a finite nonnegative number, got {self.eta_b}")


@dataclass(frozen=True)
class BduSolution:
    x: np.ndarray
    case_tag: BduCase
    psi_hat: float | None
    tau1: float
    tau2: float
    worst_case_objective: float


@dataclass(frozen=True)
class Svd:
    """Thin SVD truncated to the numerical rank of ``A``."""

    U: np.ndarray
    s: np.ndarray
    Vt: np.ndarray

    @classmethod
    def of(cls, A: np.ndarray, rtol: float = PINV_RTOL) -> "Svd":
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        keep = s > rtol * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
        return cls(U[:, keep], s[keep], Vt[keep, :])


def secular_value(psi, S, w, eta, perp_sq: float = 0.0) -> float:
    """Secular function ``sum_i w_i^2 (s_i^2 - eta^2) / (s_i^2 + psi)^2``.

    ``perp_sq`` is ``||b_perp||^2``, the squared part of the right side
    outside the range of ``A``; it adds ``-eta^2 perp_sq / psi^2``.
    """
    s2 = np.asarray(S, dtype=float) ** 2
    w2 = np.asarray(w, dtype=float) ** 2
    val = float(np.sum(w2 * (s2 - eta**2) / (s2 + psi) ** 2))
    if perp_sq:
        val -= eta**2 * perp_sq / psi**2
    return val


def _secular_derivative(psi, s2, w2, eta, perp_sq):
    val = float(np.sum(-2.0 * w2 * (s2 - eta**2) / (s2 + psi) ** 3))
    if perp_sq:
        val += 2.0 * eta**2 * perp_sq / psi**3
    return val


def find_psi_root(S, w, eta, perp_sq: float = 0.0) -> float:
    """Positive root of the secular equation (interior case only).

    Bracketing bisection with safeguarded Newton steps. The lower end of
    the bracket is ``1e-14 * s_max^2`` (lowered further when ``b`` has a
    component outside the range and the function is still positive there);
    the upper end is doubled until the function changes sign.
    """
    s = np.asarray(S, dtype=float)
    w = np.asarray(w, dtype=float)
    s2, w2 = s**2, w**2
    smax2 = float(s2.max())
    lo = 1e-14 * smax2
    g_lo = secular_value(lo, s, w, eta, perp_sq)
    # with b outside range(A) a tiny eta puts the root below the default
    # lower end; walk down until the sign is right
    shrinks = 0
    while g_lo > 0 and perp_sq and shrinks < MAX_DOUBLINGS and lo > 1e-300:
        lo *= 1e-4
        g_lo = secular_value(lo, s, w, eta, perp_sq)
        shrinks += 1
    hi = smax2
    g_hi = secular_value(hi, s, w, eta, perp_sq)
    doublings = 0
    while g_hi < 0 and doublings < MAX_DOUBLINGS:
        lo, g_lo = hi, g_hi
        hi *= 2.0
        g_hi = secular_value(hi, s, w, eta, perp_sq)
        doublings += 1
    if not (g_lo < 0 < g_hi):
        raise SecularRootError(
            f"no sign change of the secular function on [{lo:.3e}, {hi:.3e}]: "
            f"G(lo)={g_lo:.3e}, G(hi)={g_hi:.3e}"
        )
    if g_lo == 0:
        return lo

    # G is increasing through its positive root; keep G(lo) < 0 < G(hi).
    psi = 0.5 * (lo + hi)
    for _ in range(400):
        g = secular_value(psi, s, w, eta, perp_sq)
        if g == 0:
            return psi
        if g < 0:
            lo = psi
        else:
            hi = psi
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
        dg = _secular_derivative(psi, s2, w2, eta, perp_sq)
        step_ok = False
        if dg > 0:
            cand = psi - g / dg
            step_ok = lo < cand < hi
        psi = cand if step_ok else 0.5 * (lo + hi)
    return psi


def eq7_fixed_point_residual(psi, S, w, eta, perp_sq: float = 0.0) -> float:
    """Relative residual of ``psi = eta * ||r(psi)|| / ||x(psi)||``."""
    s = np.asarray(S, dtype=float)
    w = np.asarray(w, dtype=float)
    d = 1.0 / (s**2 + psi)
    r = np.sqrt(psi**2 * np.sum((d * w) ** 2) + perp_sq)
    xn = np.sqrt(np.sum((s * d * w) ** 2))
    return abs(psi - eta * r / xn) / psi


def _close(a, b):
    return abs(a - b) <= EQUALITY_RTOL * max(abs(a), abs(b))


def solve_bdu(problem: BduProblem, svd: Svd | None = None) -> BduSolution:
    """Closed-form BDU minimiser. Works in deviation variables."""
    A, b, eta, eta_b = problem.A, problem.b, float(problem.eta), float(problem.eta_b)
    n = A.shape[1]
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return BduSolution(np.zeros(n), BduCase.ETA_GE_TAU2, None, 0.0, 0.0, eta_b)
    if svd is None:
        svd = Svd.of(A)
    U, s, Vt = svd.U, svd.s, svd.Vt
    if s.size == 0:
        return BduSolution(np.zeros(n), BduCase.ETA_GE_TAU2, None, 0.0, 0.0, bnorm + eta_b)

    w = U.T @ b
    perp = b - U @ w
    perp_sq = float(perp @ perp)
    in_range = np.sqrt(perp_sq) <= RANGE_RTOL * bnorm
    if in_range:
        perp_sq = 0.0

    tau2 = float(np.linalg.norm(s * w)) / bnorm  # ||A^T b|| / ||b||
    if in_range:
        den = float(np.linalg.norm(w / s**2))
        tau1 = float(np.linalg.norm(w / s)) / den if den > 0 else 0.0
    else:
        tau1 = 0.0

    psi = None
    if in_range and _close(eta, tau1) and _close(eta, tau2):
        tag = BduCase.DEGENERATE_FAMILY
        x = Vt.T @ (w / s)
    elif eta >= tau2 or _close(eta, tau2):
        tag = BduCase.ETA_GE_TAU2
        x = np.zeros(n)
    elif eta <= tau1 or eta == 0.0 or _close(eta, tau1):
        tag = BduCase.ETA_LE_TAU1
        x = Vt.T @ (w / s)
    else:
        tag = BduCase.INTERIOR
        psi = find_psi_root(s, w, eta, perp_sq)
        x = Vt.T @ (s * w / (s**2 + psi))

    obj = float(np.linalg.norm(A @ x - b) + eta * np.linalg.norm(x) + eta_b)
    return BduSolution(x, tag, psi, tau1, tau2, obj)


def worst_case_objective(A, b, x, eta, eta_b=0.0) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    x = np.asarray(x, dtype=float)
    return float(np.linalg.norm(A @ x - np.asarray(b, dtype=float)) + eta * np.linalg.norm(x) + eta_b)


def read_problem_file(path) -> BduProblem:
    """Plain-text problem: ``eta``/``eta_b`` header lines, then rows ``a_1 ... a_n | b``.

    Lines starting with ``#`` are comments::

        eta 0.5
        eta_b 0.0
        1 0 | 1
        0 1 | 2
    """
    eta = eta_b = 0.0
    rows, rhs = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key = line.split()[0]
            try:
                if key == "eta":
                    eta = float(line.split()[1])
                elif key == "eta_b":
                    eta_b = float(line.split()[1])
                else:
                    left, right = line.split("|")
                    rows.append([float(v) for v in left.split()])
                    rhs.append(float(right))
            except (ValueError, IndexError):
                raise ParameterError(f"{path}:{lineno}: cannot parse {raw.strip()!r}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise ParameterError(f"{path}: matrix rows missing or of unequal length")
    return BduProblem(np.array(rows), np.array(rhs), eta, eta_b)
