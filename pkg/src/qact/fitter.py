"""Global fits of single-trajectory quantum actions to amplitude tables.

Parameters are optimized as ``(ln m, m*v_1, ..., m*v_K)``; the products are
what the long-time data pin down, while ``m`` alone becomes a flat direction
as ``T`` grows.  ``ln Z`` is eliminated in closed form at every evaluation.
The search runs a Nelder-Mead simplex on the log-amplitude residuals,
Levenberg-Marquardt on the same residuals, and a final Levenberg-Marquardt
polish on the relative amplitude residuals that define ``Sigma``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from . import terms as T
from .action import DEFAULT_STEPS, ActionParams, pair_actions
from .errors import DomainError, NumericalError
from .grid import Grid, PotentialSpec, discretize_hamiltonian
from .propagator import AmplitudeTable, BoundarySet, converged_spectral_amplitude, fmt, \
    stepping_amplitude


STEP_ATOL = 1e-7  # action change (units of hbar) accepted when choosing the step count
RESIDUAL_FLOOR = 1e-13  # rms relative residual treated as an exact fit


@dataclass(frozen=True)
class FitProblem:
    table: AmplitudeTable
    terms: Sequence
    initial: ActionParams
    max_iter: int = 200
    tol: float = 1e-9
    n_steps: int | None = None
    simplex: bool = True
    simplex_evals: int = 150

    def __post_init__(self):
        dim = self.initial.dim
        norm = tuple(T.make_term(t, dim) for t in self.terms)
        if not norm:
            raise DomainError("ansatz needs at least one potential term")
        extra = set(self.initial.terms) - set(norm)
        if extra:
            names = sorted(T.term_name(t, dim) for t in extra)
            raise DomainError(f"initial parameters contain terms outside the ansatz: {names}")
        if not np.all(self.table.G > 0):
            raise DomainError("reference table must be positive")
        object.__setattr__(self, "terms", norm)

    @property
    def hbar(self) -> float:
        return self.initial.hbar


@dataclass(frozen=True)
class FitResult:
    params: ActionParams
    sigma: float
    residuals: np.ndarray  # relative amplitude error per fitted pair
    iterations: int
    converged: bool
    n_steps: int
    covariance: np.ndarray | None = None
    singular_values: np.ndarray | None = None
    flags: tuple[str, ...] = ()
    history: Mapping[str, tuple[float, ...]] = field(default_factory=dict)

    def products(self) -> dict[str, float]:
        return self.params.products()


def _pair_arrays(table: AmplitudeTable):
    i, j = table.boundaries.pairs()
    return table.boundaries.sources[i], table.boundaries.sinks[j], table.G[i, j]


def relative_residuals(params: ActionParams, table: AmplitudeTable, n_steps: int = DEFAULT_STEPS,
                       extrapolate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """``(G_model - G) / G`` per distinct pair and the convergence mask."""
    a, b, G = _pair_arrays(table)
    if table.T not in params.log_z:
        raise DomainError(f"parameters carry no ln Z for T={table.T}")
    res = pair_actions(params, a, b, table.T, n_steps, extrapolate)
    with np.errstate(over="ignore", invalid="ignore"):
        rel = np.expm1(params.log_z[table.T] - res.action / params.hbar - np.log(G))
    return rel, res.ok


def global_error(params: ActionParams, table: AmplitudeTable, n_steps: int = DEFAULT_STEPS,
                 extrapolate: bool = True) -> float:
    """RMS over boundary pairs of the relative amplitude error."""
    rel, ok = relative_residuals(params, table, n_steps, extrapolate)
    if not ok.all():
        warnings.warn(f"{(~ok).sum()} of {ok.size} pairs failed and were excluded", RuntimeWarning)
    if not ok.any():
        raise NumericalError("no boundary pair could be evaluated")
    return float(np.sqrt(np.mean(rel[ok] ** 2)))


def _is_constant(term) -> bool:
    return all(e == 0 for mono in term for e in mono)


class _Model:
    """Maps the packed parameter vector to projected residuals and Jacobians."""

    def __init__(self, problem: FitProblem, n_steps: int):
        self.p = problem
        self.n_steps = n_steps
        self.a, self.b, G = _pair_arrays(problem.table)
        self.lnG = np.log(G)
        init = problem.initial
        # constants are indistinguishable from ln Z at fixed T: keep them pinned
        self.free = tuple(t for t in problem.terms if not _is_constant(t))
        self.pinned = {t: init.terms.get(t, 0.0) for t in problem.terms if t not in self.free}
        self.paths = None
        self.evals = 0

    def pack(self, params: ActionParams) -> np.ndarray:
        m = params.mass
        return np.array([np.log(m)] + [m * params.terms.get(t, 0.0) for t in self.free])

    def unpack(self, theta: np.ndarray, log_z: float | None = None) -> ActionParams:
        m = float(np.exp(theta[0]))
        terms = {t: float(c) / m for t, c in zip(self.free, theta[1:])}
        terms.update(self.pinned)
        terms = {t: terms[t] for t in self.p.terms}
        lz = {} if log_z is None else {self.p.table.T: log_z}
        return ActionParams(m, terms, lz, self.p.hbar, self.p.initial.dim)

    def actions(self, theta: np.ndarray):
        params = self.unpack(theta)
        res = pair_actions(params, self.a, self.b, self.p.table.T, self.n_steps, True,
                           terms=self.free, initial=self.paths)
        self.evals += 1
        if not res.ok.all():
            return None, params
        self.paths = res.paths
        hb = self.p.hbar
        s = -res.action / hb - self.lnG
        m = params.mass
        ds = np.empty((len(s), len(theta)))
        v = np.array([params.terms[t] for t in self.free])
        ds[:, 0] = -(m * res.d_mass - res.d_terms @ v) / hb
        ds[:, 1:] = -res.d_terms / (m * hb)
        return (s, ds), params

    def log_residuals(self, theta):
        out, _ = self.actions(theta)
        if out is None:
            return None
        s, ds = out
        return s - s.mean(), ds - ds.mean(axis=0)

    def rel_residuals(self, theta):
        out, _ = self.actions(theta)
        if out is None:
            return None
        s, ds = out
        a = np.exp(s - s.max())
        sa, saa = a.sum(), (a * a).sum()
        c = sa / saa
        da = a[:, None] * ds
        dc = da.sum(axis=0) / saa - sa * 2 * (a[:, None] * da).sum(axis=0) / saa**2
        return c * a - 1.0, c * da + a[:, None] * dc[None, :]

    def log_z(self, theta) -> float:
        out, _ = self.actions(theta)
        s, _ = out
        a = np.exp(s - s.max())
        return float(np.log(a.sum() / (a * a).sum()) - s.max())


def _lm(fun: Callable, theta: np.ndarray, max_iter: int, gtol: float,
        ftol: float = 1e-15) -> tuple[np.ndarray, list[float], bool, int]:
    """Levenberg-Marquardt with Marquardt scaling; only decreasing steps are accepted."""
    out = fun(theta)
    if out is None:
        raise NumericalError("objective not evaluable at the starting point")
    r, J = out
    f = float(r @ r)
    history = [f]
    mu = None
    nu = 2.0
    for it in range(max_iter + 1):
        g = J.T @ r
        norms = np.linalg.norm(J, axis=0)
        rn = np.sqrt(f)
        # residuals at round-off level carry no usable gradient direction
        if rn <= RESIDUAL_FLOOR * np.sqrt(len(r)) or np.all(np.abs(g) <= gtol * np.maximum(norms, 1e-300) * rn):
            return theta, history, True, it
        if it == max_iter:
            break
        A = J.T @ J
        D = np.maximum(np.diag(A), 1e-12 * max(np.diag(A).max(), 1e-300))
        if mu is None:
            mu = 1e-3
        while True:
            try:
                step = np.linalg.solve(A + mu * np.diag(D), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            pred = f - float(np.sum((r + J @ step) ** 2))
            trial = fun(theta + step)
            if trial is not None:
                r_t, J_t = trial
                f_t = float(r_t @ r_t)
                rho = (f - f_t) / pred if pred > 0 else -1.0
            else:
                f_t, rho = np.inf, -1.0
            if rho > 1e-4 and f_t < f:
                decrease = (f - f_t) / f
                theta, r, J, f = theta + step, r_t, J_t, f_t
                history.append(f)
                mu *= max(1 / 3, 1 - (2 * rho - 1) ** 3)
                nu = 2.0
                if decrease < ftol:
                    return theta, history, True, it + 1
                break
            mu *= nu
            nu *= 2
            if mu > 1e12:
                # no productive direction left at this precision
                return theta, history, bool(pred <= ftol * f), it + 1
    return theta, history, False, max_iter


def _choose_steps(problem: FitProblem, start: int = 128) -> int:
    a, b, _ = _pair_arrays(problem.table)
    params = replace(problem.initial, log_z={})
    n = start
    prev = pair_actions(params, a, b, problem.table.T, n, True).action
    while n < 4096:
        cur = pair_actions(params, a, b, problem.table.T, 2 * n, True).action
        if np.nanmax(np.abs(cur - prev)) < STEP_ATOL * problem.hbar:
            return n
        n, prev = 2 * n, cur
    return n


def fit(problem: FitProblem) -> FitResult:
    n_steps = problem.n_steps or _choose_steps(problem)
    model = _Model(problem, n_steps)
    theta0 = model.pack(problem.initial)
    flags: list[str] = []
    history: dict[str, tuple[float, ...]] = {}
    if model.pinned:
        flags.append("pinned:" + ",".join(T.term_name(t, problem.initial.dim) for t in model.pinned))

    start = model.rel_residuals(theta0)
    if start is None:
        raise NumericalError("trial action cannot be evaluated at the initial parameters")
    already = _lm(model.rel_residuals, theta0, 0, problem.tol)[2]
    iterations = 0
    if already:
        theta, converged = theta0, True
    else:
        theta = theta0
        if problem.simplex:
            best = [np.inf]
            trace: list[float] = []

            def objective(th):
                out = model.log_residuals(th)
                f = np.inf if out is None else float(out[0] @ out[0])
                best[0] = min(best[0], f)
                return f

            def callback(xk):
                trace.append(best[0])

            step = np.where(np.abs(theta0) > 1e-3, 0.05 * np.abs(theta0), 0.01)
            simplex = np.vstack([theta0] + [theta0 + np.eye(len(theta0))[k] * step[k]
                                            for k in range(len(theta0))])
            res = minimize(objective, theta0, method="Nelder-Mead", callback=callback,
                           options=dict(maxfev=problem.simplex_evals, initial_simplex=simplex,
                                        xatol=1e-10, fatol=1e-16))
            if np.isfinite(res.fun):
                theta = res.x
            history["simplex"] = tuple(trace)
            iterations += int(res.nit)
        theta, h_log, _, it1 = _lm(model.log_residuals, theta, problem.max_iter, problem.tol)
        theta, h_rel, converged, it2 = _lm(model.rel_residuals, theta, problem.max_iter, problem.tol)
        history["log"] = tuple(h_log)
        history["relative"] = tuple(h_rel)
        iterations += it1 + it2

    r, J = model.rel_residuals(theta)
    params = model.unpack(theta, model.log_z(theta))
    scaled = J / np.maximum(np.linalg.norm(J, axis=0), 1e-300)
    sv = np.linalg.svd(scaled, compute_uv=False)
    if sv.max() == 0.0 or sv.min() < 1e-6 * sv.max():
        flags.append("degenerate-direction")
    dof = max(len(r) - len(theta) - 1, 1)
    cov = np.linalg.pinv(J.T @ J, rcond=1e-12) * float(r @ r) / dof
    if not converged:
        flags.append("unconverged")
    sigma = global_error(params, problem.table, n_steps)
    return FitResult(params, sigma, r, iterations, converged, n_steps, cov, sv, tuple(flags), history)


def stationarity_gap(result: FitResult, table: AmplitudeTable, rel: float = 1e-6) -> float:
    """Largest drop of Sigma under +-rel perturbations of each fitted parameter."""
    base = result.sigma
    gap = 0.0
    p = result.params
    entries = [("mass", p.mass)] + [(t, c) for t, c in p.terms.items()] + [("log_z", p.log_z[table.T])]
    for key, val in entries:
        for sgn in (-1.0, 1.0):
            delta = sgn * rel * (abs(val) if val != 0 else 1.0)
            if key == "mass":
                q = replace(p, mass=val + delta)
            elif key == "log_z":
                q = p.with_log_z(table.T, val + delta)
            else:
                terms = dict(p.terms)
                terms[key] = val + delta
                q = p.with_terms(terms)
            gap = max(gap, base - global_error(q, table, result.n_steps))
    return gap


@dataclass(frozen=True)
class ParameterScan:
    times: tuple[float, ...]
    results: tuple[FitResult, ...]
    failures: Mapping[float, str] = field(default_factory=dict)

    def products(self, name: str) -> np.ndarray:
        return np.array([r.params.products().get(name, np.nan) for r in self.results])

    def sigmas(self) -> np.ndarray:
        return np.array([r.sigma for r in self.results])


def scan_T(template: FitProblem, times: Sequence[float],
           reference: Callable[[float], AmplitudeTable] | Mapping[float, AmplitudeTable]) -> ParameterScan:
    """Fit every ``T`` in increasing order, warm-starting from the previous fit."""
    times = tuple(float(t) for t in times)
    if len(times) < 3:
        raise DomainError("a scan needs at least three transition times")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise DomainError("transition times must increase strictly")
    get = reference if callable(reference) else (lambda t: reference[t])
    current = template.initial
    results, done, failures = [], [], {}
    for t in times:
        try:
            problem = replace(template, table=get(t), initial=replace(current, log_z={}))
            res = fit(problem)
        except (NumericalError, DomainError) as exc:
            failures[t] = str(exc)
            continue
        results.append(res)
        done.append(t)
        current = res.params
    return ParameterScan(tuple(done), tuple(results), failures)


def write_scan_csv(path, scan: ParameterScan) -> None:
    if not scan.results:
        names = []
    else:
        names = list(scan.results[0].params.products())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "m_tilde"] + names + [f"m{n}" for n in names] + ["lnZ", "Sigma", "converged"])
        for t, r in zip(scan.times, scan.results):
            p = r.params
            coeffs = [p.terms[T.make_term(n, p.dim)] for n in names]
            prods = [p.products()[n] for n in names]
            w.writerow([fmt(t), fmt(p.mass)] + [fmt(c) for c in coeffs] + [fmt(c) for c in prods]
                       + [fmt(p.log_z[t]), fmt(r.sigma), int(r.converged)])


# ---------------------------------------------------------------- 2D fits

def magnitude_ratios(params: ActionParams, scale: float) -> dict[str, float]:
    """``|v_k| R^deg`` relative to ``max(|v2| R^2, |v22| R^4)`` for every term."""
    ref = max(abs(params.coefficient("v2")) * scale**2, abs(params.coefficient("v22")) * scale**4)
    return {T.term_name(t, params.dim): abs(c) * scale ** T.term_degree(t) / ref
            for t, c in params.terms.items()}


def fit_2d(problem: FitProblem) -> tuple[FitResult, dict[str, float]]:
    if problem.initial.dim != 2:
        raise DomainError("fit_2d needs a 2D ansatz")
    result = fit(problem)
    pts = np.vstack([problem.table.boundaries.sources, problem.table.boundaries.sinks])
    scale = float(np.sqrt((pts**2).sum(axis=1)).max())
    return result, magnitude_ratios(result.params, scale)


# ------------------------------------------------------ defaults and tables

def default_points_1d() -> np.ndarray:
    return np.linspace(0.8, 2.4, 20)


def default_points_2d(radius: float = 1.5, count: int = 16, inner: float = 0.5) -> np.ndarray:
    """Ring of ``count`` points offset by half a step, plus four interior points.

    Chosen empirically: with twelve ring points (on or off the axes) the
    ``x^2 y^2`` and ``x^4 y^4`` couplings trade off against each other once the
    ground state dominates (T >= 2); the offset 16-point ring keeps them apart.
    """
    ang = 2 * np.pi * (np.arange(count) + 0.5) / count
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    core = inner * np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)
    return np.round(np.vstack([ring, core]), 15)


def aligned_grid(points: np.ndarray, target_spacing: float, lower: float, upper: float,
                 fixed_lower: bool = False) -> Grid:
    """1D grid whose nodes include every point of an equispaced set.

    With ``fixed_lower`` the Dirichlet wall stays exactly at ``lower`` (needed
    on the half line); otherwise it moves by less than one spacing.
    """
    pts = np.sort(np.asarray(points, dtype=float).ravel())
    gap = float(np.min(np.diff(pts))) if len(pts) > 1 else float(pts[0] - lower)
    q0 = max(1, int(np.ceil(gap / target_spacing)))
    for q in range(q0, q0 + 400):
        dx = gap / q
        k = (pts - pts[0]) / dx
        if not np.all(np.abs(k - np.round(k)) < 1e-7):
            continue
        offset = (pts[0] - lower) / dx
        if fixed_lower and abs(offset - round(offset)) > 1e-7:
            continue
        start = lower if fixed_lower else pts[0] - dx * round(offset)
        n = int(np.round((upper - start) / dx)) - 1
        return Grid.with_spacing(start, dx, n)
    raise DomainError("no grid spacing aligns with the boundary points")


def reference_table(spec: PotentialSpec, grid: Grid, boundaries: BoundarySet,
                    backend: str = "spectral", richardson: bool = True,
                    order: int = 1) -> AmplitudeTable:
    """Amplitude table for fitting, optionally extrapolated in the grid spacing.

    With ``richardson`` the table is also computed with half the spacing over
    the same box and combined as ``(4 G_fine - G) / 3``.  Boundary points off
    the nodes should use ``order=3`` so interpolation stays below the O(h^2)
    discretization error that the extrapolation removes.
    """
    def one(g):
        if backend == "spectral":
            op = discretize_hamiltonian(spec, g)
            if g.dim == 1:
                return converged_spectral_amplitude(op, boundaries, order)
            raise DomainError("2D references use the stepping backend")
        return stepping_amplitude(spec, g, boundaries, order=order)

    coarse = one(grid)
    if not richardson:
        return coarse
    fine = one(Grid(grid.lower, grid.upper, tuple(2 * n + 1 for n in grid.n)))
    G = (4.0 * fine.G - coarse.G) / 3.0
    return AmplitudeTable(boundaries, G, coarse.backend, float(np.abs(fine.G - coarse.G).max() / 3.0))
