"""Trial quantum actions and their Euclidean stationary trajectories.

The discrete action of a path ``x_0 .. x_N`` with ``dt = T / N`` is

    S = sum_k [ m |x_{k+1} - x_k|^2 / (2 dt) + dt * V((x_k + x_{k+1}) / 2) ]

and the trajectory is its minimizer with both endpoints clamped.  Many boundary
pairs are relaxed together: their block-tridiagonal Hessians are stacked into a
single banded matrix and solved with one Cholesky call per Newton iteration.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from . import terms as T
from .errors import DomainError, NumericalError

DEFAULT_STEPS = 256
REFINE_RTOL = 1e-4
NEWTON_TOL = 1e-10


@dataclass(frozen=True)
class ActionParams:
    """Quantum action: mass, potential coefficients and ``ln Z`` per transition time."""

    mass: float
    terms: Mapping
    log_z: Mapping[float, float] = field(default_factory=dict)
    hbar: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not self.mass > 0:
            raise DomainError("quantum mass must be positive")
        object.__setattr__(self, "terms", T.normalize_terms(self.terms, self.dim))
        object.__setattr__(self, "log_z", {float(k): float(v) for k, v in dict(self.log_z).items()})

    @classmethod
    def from_spec(cls, spec, log_z=None) -> "ActionParams":
        return cls(spec.mass, dict(spec.terms), log_z or {}, spec.hbar, spec.dim)

    @property
    def singular(self) -> bool:
        return T.is_singular(self.terms)

    def coefficient(self, name: str) -> float:
        return self.terms.get(T.make_term(name, self.dim), 0.0)

    def products(self) -> dict[str, float]:
        """``m * v_k`` for every term, keyed by term name."""
        return {T.term_name(t, self.dim): self.mass * c for t, c in self.terms.items()}

    def with_log_z(self, T_: float, value: float) -> "ActionParams":
        lz = dict(self.log_z)
        lz[float(T_)] = float(value)
        return replace(self, log_z=lz)

    def with_terms(self, terms: Mapping, mass: float | None = None) -> "ActionParams":
        return replace(self, terms=dict(terms), mass=self.mass if mass is None else mass)

    def __call__(self, *coords):
        return T.evaluate(self.terms, coords)

    def gradient(self, *coords):
        return T.gradient(self.terms, coords)

    def hessian(self, *coords):
        return T.hessian(self.terms, coords)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    positions: np.ndarray  # (n_steps + 1, dim)
    action: float
    residual: float
    converged: bool

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def x(self) -> np.ndarray:
        return self.positions[:, 0]

    def first_integral(self, params: ActionParams) -> np.ndarray:
        """``m v^2 / 2 - V`` on every segment (constant along an exact path)."""
        seg = np.diff(self.positions, axis=0)
        dt = self.times[1] - self.times[0]
        mid = 0.5 * (self.positions[1:] + self.positions[:-1])
        kin = 0.5 * params.mass * np.sum((seg / dt) ** 2, axis=-1)
        return kin - params(*mid.T)

    def energy_spread(self, params: ActionParams) -> float:
        e = self.first_integral(params)
        seg = np.diff(self.positions, axis=0)
        dt = self.times[1] - self.times[0]
        mid = 0.5 * (self.positions[1:] + self.positions[:-1])
        scale = max(np.abs(0.5 * params.mass * np.sum((seg / dt) ** 2, axis=-1)).max(),
                    np.abs(params(*mid.T)).max(), params.hbar / (self.times[-1]))
        return float((e.max() - e.min()) / scale)


@dataclass
class _Batch:
    """Relaxed paths for P boundary pairs at one resolution."""

    paths: np.ndarray  # (P, n + 1, D)
    action: np.ndarray
    residual: np.ndarray
    ok: np.ndarray
    kinetic: np.ndarray  # sum m |dx|^2 / (2 dt)
    dt: float


def _evaluate(params: ActionParams, X: np.ndarray, dt: float, order: int):
    """Action (and optionally gradient / Hessian blocks) of stacked paths."""
    m = params.mass
    seg = X[:, 1:] - X[:, :-1]
    mid = 0.5 * (X[:, 1:] + X[:, :-1])
    coords = tuple(np.moveaxis(mid, -1, 0))
    if params.singular and np.any(mid[..., 0] <= 0, axis=1).any():
        bad = np.any(mid[..., 0] <= 0, axis=1)
    else:
        bad = None
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        kinetic = 0.5 * m * np.sum(seg**2, axis=(1, 2)) / dt
        S = kinetic + dt * params(*coords).sum(axis=1)
    if bad is not None:
        S = np.where(bad, np.inf, S)
    S = np.where(np.isfinite(S), S, np.inf)
    if order == 0:
        return S, kinetic
    gV = params.gradient(*coords)  # (P, n, D)
    g = m * (2 * X[:, 1:-1] - X[:, :-2] - X[:, 2:]) / dt + 0.5 * dt * (gV[:, :-1] + gV[:, 1:])
    hV = params.hessian(*coords)  # (P, n, D, D)
    return S, kinetic, g, hV


def _banded_hessian(hV: np.ndarray, m: float, dt: float) -> np.ndarray:
    P, n, D, _ = hV.shape
    u = 2 * D - 1
    N = (n - 1) * D
    ab = np.zeros((P, u + 1, N))
    eye = np.eye(D)
    B = (2 * m / dt) * eye + 0.25 * dt * (hV[:, :-1] + hV[:, 1:])  # (P, n-1, D, D)
    C = -(m / dt) * eye + 0.25 * dt * hV[:, 1:-1]  # (P, n-2, D, D)
    for a in range(D):
        for b in range(D):
            if a <= b:
                ab[:, u + a - b, b::D] = B[:, :, a, b]
            ab[:, u - D + a - b, D + b::D] = C[:, :, a, b]
    return np.ascontiguousarray(ab.transpose(1, 0, 2).reshape(u + 1, P * N))


def _relax(params: ActionParams, a: np.ndarray, b: np.ndarray, T_: float, n: int,
           initial: np.ndarray | None = None, max_iter: int = 80) -> _Batch:
    P, D = a.shape
    dt = T_ / n
    s = np.linspace(0.0, 1.0, n + 1)[None, :, None]
    if initial is None:
        X = a[:, None, :] * (1 - s) + b[:, None, :] * s
    else:
        X = np.array(initial, dtype=float)
        X[:, 0], X[:, -1] = a, b
    active = np.ones(P, dtype=bool)
    failed = np.zeros(P, dtype=bool)
    resid = np.full(P, np.inf)
    S, _, g, hV = _evaluate(params, X, dt, 1)
    for _ in range(max_iter):
        scale = np.maximum(np.abs(S), params.hbar)
        resid = np.abs(g).max(axis=(1, 2))
        active &= ~(resid <= NEWTON_TOL * scale) & ~failed
        if not active.any():
            break
        if np.any(np.abs(X) > 1e8):
            failed |= np.any(np.abs(X) > 1e8, axis=(1, 2))
        ab = _banded_hessian(hV, params.mass, dt)
        rhs = g.reshape(P * (n - 1) * D)
        shift = 0.0
        while True:
            try:
                if shift:
                    ab_s = ab.copy()
                    ab_s[-1] += shift
                    step = solveh_banded(ab_s, rhs, check_finite=False)
                else:
                    step = solveh_banded(ab, rhs, check_finite=False)
                break
            except (LinAlgError, ValueError):
                shift = max(10 * shift, 1e-6 * np.abs(ab[-1]).max())
        step = -step.reshape(P, n - 1, D)
        step[~active] = 0.0
        slope = np.sum(g * step, axis=(1, 2))
        alpha = np.ones(P)
        accepted = ~active
        X_new = X.copy()
        S_new = S.copy()
        for _ in range(40):
            trial = X.copy()
            trial[:, 1:-1] += alpha[:, None, None] * step
            S_t, _ = _evaluate(params, trial, dt, 0)
            slack = 4e-15 * np.abs(S) + 1e-300
            ok = ~accepted & (S_t <= S + 1e-4 * alpha * slope + slack)
            X_new[ok] = trial[ok]
            S_new[ok] = S_t[ok]
            accepted |= ok
            if accepted.all():
                break
            alpha = np.where(accepted, alpha, 0.5 * alpha)
        stuck = ~accepted
        if stuck.any():
            # no descent possible: either converged to roundoff or a genuine failure
            near = resid <= 1e-6 * np.maximum(np.abs(S), params.hbar)
            active &= ~(stuck & near)
            failed |= stuck & ~near
        X = X_new
        if params.singular:
            failed |= np.any(X[..., 0] <= 0, axis=1)
        S, _, g, hV = _evaluate(params, X, dt, 1)
    scale = np.maximum(np.abs(S), params.hbar)
    resid = np.abs(g).max(axis=(1, 2))
    ok = ~failed & np.isfinite(S) & (resid <= 1e-8 * scale)
    _, kinetic = _evaluate(params, X, dt, 0)
    return _Batch(X, S, resid, ok, kinetic, dt)


def _as_points(p, dim: int) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    return arr.reshape(-1, dim)


def _refine_path(paths: np.ndarray) -> np.ndarray:
    """Linear interpolation of (P, n+1, D) paths onto 2n steps."""
    P, n1, D = paths.shape
    out = np.empty((P, 2 * (n1 - 1) + 1, D))
    out[:, ::2] = paths
    out[:, 1::2] = 0.5 * (paths[:, 1:] + paths[:, :-1])
    return out


def euclidean_trajectory(params: ActionParams, x_in, x_fi, T: float, n_steps: int | None = None,
                         max_steps: int = 1 << 14) -> Trajectory:
    """Stationary path of the discrete Euclidean action.

    Relaxation starts from the straight line.  With ``n_steps=None`` the
    resolution starts at 256 and doubles until the action changes by less than
    ``1e-4`` relative between resolutions.
    """
    a = _as_points(x_in, params.dim)
    b = _as_points(x_fi, params.dim)
    _check_request(params, a, b, T, n_steps)
    n = n_steps or DEFAULT_STEPS
    batch = _relax(params, a, b, T, n)
    if n_steps is None:
        while 2 * n <= max_steps:
            finer = _relax(params, a, b, T, 2 * n, initial=_refine_path(batch.paths))
            change = abs(finer.action[0] - batch.action[0])
            batch, n = finer, 2 * n
            if change <= REFINE_RTOL * max(abs(batch.action[0]), params.hbar):
                break
    if not np.isfinite(batch.action[0]) or np.abs(batch.paths).max() > 1e8:
        raise DomainError("action unbounded below along the path")
    if not batch.ok[0]:
        raise NumericalError(f"Newton relaxation did not converge (residual {batch.residual[0]:.1e})")
    times = np.linspace(0.0, T, n + 1)
    return Trajectory(times, batch.paths[0], float(batch.action[0]), float(batch.residual[0]), True)


def _check_request(params, a, b, T_, n_steps):
    if n_steps is not None and n_steps < 64:
        raise DomainError("need at least 64 time steps")
    if params.singular and (np.any(a[:, 0] <= 0) or np.any(b[:, 0] <= 0)):
        raise DomainError("boundary points must lie at x > 0 for inverse-power terms")
    if not T_ > 0:
        raise DomainError("transition time must be positive")


def model_amplitude(params: ActionParams, x_in, x_fi, T: float, n_steps: int | None = None,
                    log_z: float | None = None) -> float:
    """Single-trajectory amplitude ``exp(ln Z - S / hbar)``."""
    if log_z is None:
        if float(T) not in params.log_z:
            raise DomainError(f"no ln Z stored for T={T}")
        log_z = params.log_z[float(T)]
    traj = euclidean_trajectory(params, x_in, x_fi, T, n_steps)
    return float(np.exp(log_z - traj.action / params.hbar))


@dataclass(frozen=True)
class PairActions:
    """Actions of many boundary pairs plus envelope sensitivities.

    ``d_mass`` is dS/dm and ``d_terms[:, k]`` is dS/dv_k for ``terms[k]``; by
    stationarity of the path these are the explicit partial derivatives of
    the discrete action.
    """

    action: np.ndarray
    ok: np.ndarray
    d_mass: np.ndarray
    d_terms: np.ndarray
    terms: tuple
    paths: np.ndarray


def pair_actions(params: ActionParams, a, b, T: float, n_steps: int = DEFAULT_STEPS,
                 extrapolate: bool = True, terms=None, initial: np.ndarray | None = None) -> PairActions:
    """Relax all pairs ``a[p] -> b[p]`` together.

    With ``extrapolate`` the pairs are solved at ``n_steps`` and ``2 n_steps``
    and action and sensitivities are Richardson-combined (the midpoint rule
    error is even in ``dt``).
    """
    a = _as_points(a, params.dim)
    b = _as_points(b, params.dim)
    _check_request(params, a, b, T, n_steps)
    terms = tuple(params.terms) if terms is None else tuple(terms)
    coarse = _relax(params, a, b, T, n_steps, initial=initial)
    out = _sensitivities(params, coarse, terms)
    if not extrapolate:
        return PairActions(coarse.action, coarse.ok, *out, terms, coarse.paths)
    fine = _relax(params, a, b, T, 2 * n_steps, initial=_refine_path(coarse.paths))
    out_f = _sensitivities(params, fine, terms)
    comb = [(4 * f - c) / 3 for f, c in zip(out_f, out)]
    action = (4 * fine.action - coarse.action) / 3
    return PairActions(action, coarse.ok & fine.ok, comb[0], comb[1], terms, coarse.paths)


def _sensitivities(params: ActionParams, batch: _Batch, terms) -> tuple[np.ndarray, np.ndarray]:
    X = batch.paths
    mid = 0.5 * (X[:, 1:] + X[:, :-1])
    coords = tuple(np.moveaxis(mid, -1, 0))
    d_terms = np.empty((len(X), len(terms)))
    with np.errstate(all="ignore"):
        for k, term in enumerate(terms):
            d_terms[:, k] = batch.dt * T.basis(term, coords).sum(axis=1)
    return batch.kinetic / params.mass, d_terms


@dataclass(frozen=True)
class ActionMatrix:
    """``values[i, j]``: action from source i to sink j; ``ok`` flags converged pairs."""

    values: np.ndarray
    ok: np.ndarray


def action_scan(params: ActionParams, boundaries, n_steps: int | None = None,
                extrapolate: bool = False) -> ActionMatrix:
    """Actions for every (source, sink) combination; failures are flagged, not raised.

    With ``n_steps=None`` the resolution doubles from 256 until every
    converged pair changes by less than ``1e-4`` relative.
    """
    src, snk = boundaries.sources, boundaries.sinks
    i, j = np.meshgrid(np.arange(len(src)), np.arange(len(snk)), indexing="ij")
    a, b = src[i.ravel()], snk[j.ravel()]
    n = n_steps or DEFAULT_STEPS
    res = pair_actions(params, a, b, boundaries.T, n, extrapolate)
    if n_steps is None:
        while 2 * n <= (1 << 14):
            finer = pair_actions(params, a, b, boundaries.T, 2 * n, extrapolate,
                                 initial=_refine_path(res.paths))
            tol = REFINE_RTOL * np.maximum(np.abs(finer.action), params.hbar)
            ok = finer.ok & res.ok
            done = np.all(np.abs(finer.action - res.action)[ok] <= tol[ok])
            res, n = finer, 2 * n
            if done:
                break
    values = np.where(res.ok, res.action, np.nan).reshape(i.shape)
    return ActionMatrix(values, res.ok.reshape(i.shape))
