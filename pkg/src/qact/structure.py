"""One-dimensional relations between ground states, classical and quantum potentials.

Quantum potentials are handled through the profile ``Q = 2 m~ (V~ - v~_min) / hbar^2``,
which equals ``U^2`` with ``U = psi'/psi`` the log-derivative of the ground
state.  The SUSY helpers work in ``hbar = 2m = 1`` units.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import terms as T
from .errors import DomainError
from .grid import Grid, GridFunction, PotentialSpec, eigensolve, hamiltonian_from_values
from .propagator import fmt

NODE_RTOL = 1e-6
BULK_RTOL = 1e-4
ANSATZ_RTOL = 1e-3
SUSY_MASS = 0.5
RICCATI_FLOOR = 1e-8


def _check_1d(f: GridFunction) -> Grid:
    if f.grid.dim != 1:
        raise DomainError("structure relations are one-dimensional")
    return f.grid


def _log_positive(psi: GridFunction) -> np.ndarray:
    v = psi.values
    if np.any(v <= 0):
        raise DomainError("ground state must be strictly positive on the interior")
    return np.log(v)


def _second_difference(v: np.ndarray, h: float) -> np.ndarray:
    out = np.full_like(v, np.nan)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
    return out


def _slope(v: np.ndarray, h: float) -> np.ndarray:
    """First derivative: five-point stencil inside, second order on the two outer nodes.

    Near a wall ``ln psi ~ lambda ln x`` and the three-point error ``h^2 / (3 x^2)``
    would dominate an inverse-power fit of ``Q``.
    """
    d = np.gradient(v, h, edge_order=2)
    d[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
    return d


def _curvature_ratio(psi: GridFunction) -> np.ndarray:
    """``psi''/psi`` at interior nodes (NaN at the two edge nodes)."""
    v = psi.values
    return _second_difference(v, psi.grid.spacing[0]) / v


def bulk_mask(psi: GridFunction, rtol: float = BULK_RTOL) -> np.ndarray:
    """Interior nodes where ``|psi|`` exceeds ``rtol`` of its maximum."""
    v = np.abs(psi.values)
    mask = v > rtol * v.max()
    mask[0] = mask[-1] = False
    return mask


def reconstruct_classical_potential(psi_gr: GridFunction, E_gr: float, mass: float = 1.0,
                                    hbar: float = 1.0) -> GridFunction:
    """``V = E_gr + (hbar^2/2m) psi''/psi``; the two edge nodes are masked out."""
    _check_1d(psi_gr)
    _log_positive(psi_gr)
    V = E_gr + hbar**2 / (2 * mass) * _curvature_ratio(psi_gr)
    mask = np.isfinite(V)
    return GridFunction(psi_gr.grid, np.where(mask, V, 0.0), mask)


@dataclass(frozen=True)
class MassEstimate:
    mass: float
    scatter: float  # relative standard deviation of the per-node estimates
    points: int
    consistent: bool


def reconstruct_mass(psi_gr: GridFunction, psi_ex: GridFunction, E_gr: float, E_ex: float,
                     hbar: float = 1.0, max_scatter: float = 1e-2) -> MassEstimate:
    if not E_ex > E_gr:
        raise DomainError("excited energy must exceed the ground energy")
    if psi_gr.grid != psi_ex.grid:
        raise DomainError("wave functions live on different grids")
    _check_1d(psi_gr)
    _log_positive(psi_gr)
    ex = psi_ex.values
    admissible = np.abs(ex) > NODE_RTOL * np.abs(ex).max()
    admissible[0] = admissible[-1] = False
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = _curvature_ratio(psi_ex) - _curvature_ratio(psi_gr)
    per_node = -hbar**2 * diff[admissible] / (2 * (E_ex - E_gr))
    if per_node.size == 0:
        raise DomainError("no admissible nodes for the mass estimate")
    mass = float(per_node.mean())
    scatter = float(per_node.std() / abs(mass))
    if scatter > max_scatter:
        warnings.warn(f"mass estimates scatter by {scatter:.1%}; inputs look inconsistent",
                      RuntimeWarning)
    return MassEstimate(mass, scatter, int(per_node.size), scatter <= max_scatter)


@dataclass(frozen=True)
class QuantumPotentialProfile:
    """``Q = U^2`` on a grid, with the ground-state maximum ``origin``.

    ``coefficients`` maps term names to fitted ``Q``-space coefficients
    (``2 m~ v~_k / hbar^2``); ``offset`` is the fitted constant.
    ``units`` records the ``(mass, hbar)`` convention of ``v_min``.
    """

    grid: Grid
    Q: GridFunction
    U: GridFunction | None
    v_min: float
    origin: float
    units: tuple[float, float] = (1.0, 1.0)
    coefficients: Mapping[str, float] = field(default_factory=dict)
    offset: float = 0.0
    fit_residual: float | None = None
    flags: tuple[str, ...] = ()

    @property
    def hbar(self) -> float:
        return self.units[1]

    def products(self) -> dict[str, float]:
        """``m~ v~_k`` recovered from the fitted coefficients."""
        return {k: c * self.hbar**2 / 2 for k, c in self.coefficients.items()}

    @classmethod
    def from_coefficients(cls, grid: Grid, coefficients: Mapping[str, float], offset: float,
                          v_min: float, units: tuple[float, float] = (1.0, 1.0)):
        """Exact profile ``Q = offset + sum c_k x^k`` sampled on ``grid``."""
        x = grid.x
        terms = {T.make_term(k, 1): c for k, c in coefficients.items()}
        T.check_domain(terms, (x,))
        Q = offset + T.evaluate(terms, (x,))
        if np.any(Q < -1e-12 * np.abs(Q).max()):
            raise DomainError("profile is negative somewhere; it cannot equal U^2")
        Q = np.maximum(Q, 0.0)
        origin = _profile_origin(x, Q)
        return cls(grid, GridFunction(grid, Q), None, v_min, origin, units,
                   dict(coefficients), offset, 0.0)

    def derivative(self) -> np.ndarray:
        """``dQ/dx``: analytic when built from coefficients, finite differences otherwise."""
        x = self.grid.x
        if self.coefficients and self.U is None:
            terms = {T.make_term(k, 1): c for k, c in self.coefficients.items()}
            return T.gradient(terms, (x,))[..., 0]
        return _slope(self.Q.values, self.grid.spacing[0])


def _profile_origin(x: np.ndarray, Q: np.ndarray) -> float:
    """Location of the minimum of ``Q`` refined by a parabola through three nodes."""
    i = int(np.argmin(Q))
    if 0 < i < len(x) - 1:
        # the root of U is smooth where Q ~ (x - x0)^2; fit sqrt-free on Q
        y0, y1, y2 = Q[i - 1], Q[i], Q[i + 1]
        den = y0 - 2 * y1 + y2
        if den > 0:
            return float(x[i] + 0.5 * (x[1] - x[0]) * (y0 - y2) / den)
    return float(x[i])


def _count_valleys(Q: np.ndarray, rtol: float = 1e-3) -> int:
    """Interior local minima of ``Q`` that reach down to (near) zero."""
    inner = (Q[1:-1] <= Q[:-2]) & (Q[1:-1] < Q[2:])
    low = Q[1:-1] <= rtol * Q.max()
    return int(np.count_nonzero(inner & low))


def quantum_potential_from_ground_state(psi_gr: GridFunction, E_gr: float, hbar: float = 1.0,
                                        ansatz: Sequence[str] = (), mass: float = 1.0,
                                        bulk: np.ndarray | None = None) -> QuantumPotentialProfile:
    """Profile ``Q = (psi'/psi)^2``; optionally a psi-weighted least-squares fit by ``ansatz`` terms.

    The fit always includes a constant column; its coefficient is ``offset``.
    ``mass`` and ``hbar`` only tag the unit convention of ``E_gr``.
    """
    grid = _check_1d(psi_gr)
    lp = _log_positive(psi_gr)
    h = grid.spacing[0]
    U = _slope(lp, h)
    Q = U**2
    x = grid.x
    zero = np.flatnonzero((U[:-1] > 0) & (U[1:] <= 0))
    if len(zero) == 1:
        k = zero[0]
        origin = float(x[k] + h * U[k] / (U[k] - U[k + 1]))
    else:
        origin = _profile_origin(x, Q)
    flags: list[str] = []
    coefficients: dict[str, float] = {}
    offset, residual = 0.0, None
    if ansatz:
        region = bulk_mask(psi_gr) if bulk is None else np.asarray(bulk, dtype=bool)
        names = list(ansatz)
        terms = [T.make_term(n, 1) for n in names]
        xs = x[region]
        T.check_domain(dict.fromkeys(terms, 1.0), (xs,))
        A = np.column_stack([np.ones_like(xs)] + [T.basis(t, (xs,)) for t in terms])
        # rows weighted by psi (the ground-state measure), so the steep inverse
        # powers near a wall do not swamp the rest; columns scaled to match
        w = np.abs(psi_gr.values[region]) / np.abs(psi_gr.values).max()
        Aw = A * w[:, None]
        scale = np.abs(Aw).max(axis=0)
        sol, *_ = np.linalg.lstsq(Aw / scale, Q[region] * w, rcond=None)
        sol = sol / scale
        offset = float(sol[0])
        coefficients = {n: float(c) for n, c in zip(names, sol[1:])}
        residual = float(np.linalg.norm((A @ sol - Q[region]) * w) / np.linalg.norm(Q[region] * w))
        if residual > ANSATZ_RTOL:
            flags.append("ansatz incomplete")
    return QuantumPotentialProfile(grid, GridFunction(grid, Q), GridFunction(grid, U), float(E_gr),
                                   origin, (mass, hbar), coefficients, offset, residual, tuple(flags))


def ground_state_from_quantum_potential(profile: QuantumPotentialProfile) -> GridFunction:
    """``psi = exp(-int_{x0}^{x} sgn(x'-x0) sqrt(Q) dx') / N`` by cumulative trapezoid."""
    Q = profile.Q.values
    if np.any(Q < 0):
        raise DomainError("profile must be non-negative")
    if _count_valleys(Q) > 1:
        raise DomainError("profile has several valleys; only single-minimum ground states are supported")
    x = profile.grid.x
    # signed root is smooth through the origin where sqrt(Q) has a kink
    slope = np.sign(x - profile.origin) * np.sqrt(Q)
    if profile.U is not None:
        slope = -profile.U.values
    i0 = int(np.argmin(np.abs(x - profile.origin)))
    phase = cumulative_trapezoid(slope, x, initial=0.0)
    phase -= phase[i0]
    log_psi = -phase
    log_psi -= log_psi.max()
    psi = np.exp(log_psi)
    psi /= np.sqrt(np.sum(psi**2) * profile.grid.cell_volume)
    return GridFunction(profile.grid, psi)


def transform_law_residual(spec: PotentialSpec, profile: QuantumPotentialProfile, E_gr: float,
                           window: int = 2) -> GridFunction:
    """Pointwise ``hbar^2 [Q - (1/2) Q' sgn(x - x0) / sqrt(Q)] - 2m (V - E_gr)``.

    ``x0`` is the ground-state maximum; nodes within ``window`` spacings of it
    and the edge nodes are masked.  The sign follows the side of ``x0``, so the
    law holds on half lines whose maximum sits away from the wall.
    """
    if spec.dim != 1:
        raise DomainError("transform law is one-dimensional")
    grid = profile.grid
    x = grid.x
    h = grid.spacing[0]
    Q = profile.Q.values
    dQ = profile.derivative()
    hbar = spec.hbar
    root = np.sqrt(Q)
    mask = np.abs(x - profile.origin) > window * h
    mask &= root > NODE_RTOL * root.max()
    mask[0] = mask[-1] = False
    if (~mask[1:-1]).sum() * h > 0.05 * (grid.upper[0] - grid.lower[0]):
        warnings.warn("exclusion window exceeds 5% of the domain", RuntimeWarning)
    with np.errstate(divide="ignore", invalid="ignore"):
        lhs = hbar**2 * (Q - 0.5 * dQ * np.sign(x - profile.origin) / root)
    if spec.singular:
        T.check_domain(spec.terms, (x,))
    rhs = 2 * spec.mass * (spec(x) - E_gr)
    res = np.where(mask, lhs - rhs, 0.0)
    return GridFunction(grid, res, mask)


@dataclass(frozen=True)
class RiccatiCheck:
    """Pointwise residual against a local truncation estimate.

    ``max_ratio`` is the largest ``|residual| / (estimate + floor)`` over the
    checked nodes; ``floor`` (``RICCATI_FLOOR`` times the largest
    ``|2m (V - E)| / hbar^2``) covers nodes where the leading error term
    happens to vanish.
    """

    residual: GridFunction
    estimate: np.ndarray
    error_estimate: float
    max_residual: float
    max_ratio: float

    @property
    def ok(self) -> bool:
        return self.max_ratio <= 10.0


def riccati_residual(psi_gr: GridFunction, spec: PotentialSpec, E_gr: float,
                     bulk: np.ndarray | None = None) -> RiccatiCheck:
    """``U^2 + U' - (2m/hbar^2)(V - E_gr)`` with a truncation-error estimate.

    ``U`` and ``U'`` are central differences of ``L = ln psi``.  The estimate
    sums the leading O(h^2) terms of those differences and of the three-point
    Laplacian that produced ``psi``:
    ``h^2 (|L' L'''| / 3 + |L''''| / 12 + |psi''''/psi| / 12)``.
    """
    grid = _check_1d(psi_gr)
    lp = _log_positive(psi_gr)
    h = grid.spacing[0]
    x = grid.x
    region = bulk_mask(psi_gr) if bulk is None else np.asarray(bulk, dtype=bool)
    U = np.full_like(lp, np.nan)
    U[1:-1] = (lp[2:] - lp[:-2]) / (2 * h)
    rhs = 2 * spec.mass / spec.hbar**2 * (spec(x) - E_gr)
    fine = U**2 + _second_difference(lp, h) - rhs

    d1 = np.gradient(lp, h, edge_order=2)
    d2 = np.gradient(d1, h, edge_order=2)
    d3 = np.gradient(d2, h, edge_order=2)
    d4 = np.gradient(d3, h, edge_order=2)
    fourth = d1**4 + 6 * d1**2 * d2 + 3 * d2**2 + 4 * d1 * d3 + d4
    local = h**2 * (np.abs(d1 * d3) / 3 + np.abs(d4) / 12 + np.abs(fourth) / 12)

    mask = region & np.isfinite(fine)
    floor = RICCATI_FLOOR * float(np.abs(rhs[mask]).max())
    ratio = np.abs(fine[mask]) / (local[mask] + floor)
    res = GridFunction(grid, np.where(mask, fine, 0.0), mask)
    return RiccatiCheck(res, np.where(mask, local, np.nan), float(local[mask].max()),
                        float(np.abs(fine[mask]).max()), float(ratio.max()))


# ------------------------------------------------------------------ SUSY

def to_susy_units(values: np.ndarray, mass: float, hbar: float) -> np.ndarray:
    """Energies in ``hbar = 2m = 1`` units (lengths unchanged)."""
    return np.asarray(values, dtype=float) * (2 * mass / hbar**2)


@dataclass(frozen=True)
class SusyPair:
    """``V_minus`` is shifted so that its ground energy is zero; ``shift`` is the removed ``E_gr``."""

    V_minus: GridFunction
    V_plus: GridFunction
    W: GridFunction
    shift: float
    psi_gr: GridFunction

    @property
    def grid(self) -> Grid:
        return self.V_minus.grid


def susy_partner(V_minus: GridFunction) -> SusyPair:
    """Partner potential ``V+ = -V- + 2 W^2`` with ``W = psi'/psi`` of ``H = -d^2 + V-``."""
    grid = _check_1d(V_minus)
    op = hamiltonian_from_values(grid, V_minus.values, mass=SUSY_MASS, hbar=1.0)
    spec = eigensolve(op, 1)
    E0 = float(spec.energies[0])
    log_psi = spec.log_ground if spec.log_ground is not None else _log_positive(spec.ground())
    W = _slope(log_psi, grid.spacing[0])
    Vm = V_minus.values - E0
    Vp = -Vm + 2 * W**2
    psi = GridFunction(grid, np.exp(log_psi))
    return SusyPair(GridFunction(grid, Vm), GridFunction(grid, Vp), GridFunction(grid, W), E0, psi)


def partner_spectra(pair: SusyPair, k: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Lowest ``k`` eigenvalues of ``H-`` and ``k - 1`` of ``H+`` (same units and shift)."""
    def energies(V, n):
        op = hamiltonian_from_values(pair.grid, V.values, mass=SUSY_MASS, hbar=1.0)
        return eigensolve(op, n).energies

    return energies(pair.V_minus, k), energies(pair.V_plus, k - 1)


@dataclass(frozen=True)
class EquivalenceReport:
    max_abs: float
    ok: bool
    tol: float


def susy_quantum_equivalence(pair: SusyPair, profile: QuantumPotentialProfile,
                             tol: float = 1e-6) -> EquivalenceReport:
    """Compare ``W^2`` with ``Q`` node by node; both must use ``hbar = 2m = 1`` units."""
    if profile.grid != pair.grid:
        raise DomainError("profile and SUSY pair live on different grids")
    if profile.units != (SUSY_MASS, 1.0):
        raise DomainError(f"profile units {profile.units} are not hbar = 2m = 1")
    if abs(profile.v_min - pair.shift) > 1e-6 * max(1.0, abs(pair.shift)):
        raise DomainError("profile and pair disagree on the ground energy")
    region = bulk_mask(pair.psi_gr)
    diff = np.abs(pair.W.values**2 - profile.Q.values)[region]
    worst = float(diff.max())
    return EquivalenceReport(worst, worst < tol, tol)


def write_profile_csv(path, psi: GridFunction, profile: QuantumPotentialProfile,
                      V_class: np.ndarray, V_plus: np.ndarray | None = None,
                      residual: GridFunction | None = None) -> None:
    x = psi.grid.x
    U = profile.U.values if profile.U is not None else np.full_like(x, np.nan)
    Vp = np.full_like(x, np.nan) if V_plus is None else np.asarray(V_plus)
    res = np.full_like(x, np.nan) if residual is None else np.where(residual.valid, residual.values,
                                                                     np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "psi", "U", "Q", "V_class", "V_plus", "residual"])
        for row in zip(x, psi.values, U, profile.Q.values, V_class, Vp, res):
            w.writerow([fmt(v) for v in row])
