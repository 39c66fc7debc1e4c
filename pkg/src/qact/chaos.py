"""Real-time dynamics of 2D classical and quantum actions.

``H = |p|^2 / (2m) + V(x, y)`` is integrated with a fourth-order symplectic
composition of leapfrog steps, batched over initial conditions.  The tangent
map is propagated with the same splitting, so Lyapunov spectra come from the
exact linearization of the discrete flow.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from .errors import DomainError, NumericalError
from .propagator import fmt

ENERGY_RTOL = 1e-6
CONVERGENCE_RTOL = 0.2
CONVERGENCE_FLOOR = 0.01
THRESHOLD_FLOOR = 0.01
DISCARD_BUDGET = 0.1

# Forest-Ruth / Yoshida triple-jump weights
_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_W0 = 1.0 - 2.0 * _W1
_DRIFTS = (_W1 / 2, (_W0 + _W1) / 2, (_W0 + _W1) / 2, _W1 / 2)
_KICKS = (_W1, _W0, _W1)


class System:
    """Polynomial 2D Hamiltonian with cached monomial tables.

    Built from anything with ``mass``, ``terms`` (exponent-tuple keys) and
    ``dim == 2``: a :class:`~qact.grid.PotentialSpec` or fitted
    :class:`~qact.action.ActionParams`.
    """

    def __init__(self, source):
        if getattr(source, "dim", None) != 2:
            raise DomainError("dynamics needs a 2D potential")
        monos = [(c, mono) for term, c in source.terms.items() for mono in term if c != 0.0]
        if any(e < 0 for _, mono in monos for e in mono):
            raise DomainError("inverse powers are not supported in the dynamics")
        self.mass = float(source.mass)
        self.coef = np.array([c for c, _ in monos], dtype=float)
        self.ex = np.array([m[0] for _, m in monos], dtype=int)
        self.ey = np.array([m[1] for _, m in monos], dtype=int)
        self.degree = int(max(self.ex.max(initial=0), self.ey.max(initial=0)))
        self.terms = dict(source.terms)

    def _powers(self, q):
        n = len(q)
        px = np.empty((self.degree + 1, n))
        py = np.empty((self.degree + 1, n))
        px[0] = py[0] = 1.0
        for k in range(1, self.degree + 1):
            np.multiply(px[k - 1], q[:, 0], out=px[k])
            np.multiply(py[k - 1], q[:, 1], out=py[k])
        return px, py

    @staticmethod
    def _sum(weights, px, py, ix, iy, n):
        # per-sample accumulation in a fixed order, independent of the batch size
        total = np.zeros(n)
        for w, i, j in zip(weights, ix, iy):
            if w != 0.0:
                total += w * (px[i] * py[j])
        return total

    def potential(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(q)
        px, py = self._powers(q)
        return self._sum(self.coef, px, py, self.ex, self.ey, len(q))

    def force(self, q: np.ndarray, powers=None) -> np.ndarray:
        """``-grad V`` for positions of shape ``(n, 2)``."""
        n = len(q)
        out = np.zeros_like(q)
        px, py = powers or self._powers(q)
        ex, ey, c = self.ex, self.ey, self.coef
        out[:, 0] = -self._sum(c * ex, px, py, np.maximum(ex - 1, 0), ey, n)
        out[:, 1] = -self._sum(c * ey, px, py, ex, np.maximum(ey - 1, 0), n)
        return out

    def hessian(self, q: np.ndarray, powers=None) -> np.ndarray:
        n = len(q)
        out = np.zeros((n, 2, 2))
        px, py = powers or self._powers(q)
        ex, ey, c = self.ex, self.ey, self.coef
        lo = np.maximum
        out[:, 0, 0] = self._sum(c * ex * (ex - 1), px, py, lo(ex - 2, 0), ey, n)
        out[:, 1, 1] = self._sum(c * ey * (ey - 1), px, py, ex, lo(ey - 2, 0), n)
        out[:, 0, 1] = out[:, 1, 0] = self._sum(c * ex * ey, px, py, lo(ex - 1, 0), lo(ey - 1, 0), n)
        return out

    def energy(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        return (z[:, 2] ** 2 + z[:, 3] ** 2) / (2 * self.mass) + self.potential(z[:, :2])

    def shell_radius(self, E: float, limit: float = 1e6) -> float:
        """Radius of a disk holding the part of ``{V <= E}`` around the origin.

        Each of 720 rays is followed outward to its first node with ``V > E``,
        so a potential that turns over behind a barrier (a fitted negative
        quartic, say) yields its inner well.  Rays that never cross make the
        region unbounded.
        """
        ang = np.linspace(0, 2 * np.pi, 721)[:-1]
        ring = np.column_stack([np.cos(ang), np.sin(ang)])
        r_hi = 1.0
        while r_hi <= limit:
            rs = np.linspace(0.0, r_hi, 1025)[1:]
            V = self.potential((rs[:, None, None] * ring[None]).reshape(-1, 2)).reshape(len(rs), -1)
            above = V > E
            if above.any(axis=0).all():
                # one radial step of margin covers a crossing between nodes
                return float(rs[np.argmax(above, axis=0)].max() + rs[0])
            r_hi *= 2
        raise DomainError(f"accessible region at E={E} is unbounded")

    def frequency(self, E: float) -> float:
        """Largest small-oscillation frequency over the accessible disk."""
        R = self.shell_radius(E)
        g = np.linspace(-R, R, 41)
        X, Y = np.meshgrid(g, g)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        pts = pts[self.potential(pts) <= E]
        if len(pts) == 0:
            pts = np.zeros((1, 2))
        w2 = np.linalg.eigvalsh(self.hessian(pts)).max() / self.mass
        return float(np.sqrt(max(w2, 1e-12)))


def as_system(source) -> System:
    return source if isinstance(source, System) else System(source)


def default_dt(system: System, E: float, fraction: float = 2e-3) -> float:
    """``fraction`` of the shortest characteristic period on the energy shell."""
    return fraction * 2 * np.pi / system.frequency(E)


@dataclass(frozen=True)
class PhaseState:
    x: float
    y: float
    px: float
    py: float

    def array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.px, self.py], dtype=float)

    @classmethod
    def from_array(cls, z) -> "PhaseState":
        return cls(*(float(v) for v in z))

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.px, self.py])):
            raise DomainError("phase state has non-finite components")


def _states(states) -> np.ndarray:
    if isinstance(states, PhaseState):
        return states.array()[None, :]
    if isinstance(states, np.ndarray):
        return np.atleast_2d(states).astype(float)
    return np.array([s.array() if isinstance(s, PhaseState) else s for s in states], dtype=float)


def _step(sys_: System, z: np.ndarray, dt: float, tangent: np.ndarray | None = None) -> None:
    """One fourth-order step in place; ``tangent`` has shape ``(n, k, 4)``."""
    inv_m = 1.0 / sys_.mass
    for i in range(4):
        h = _DRIFTS[i] * dt
        z[:, :2] += h * inv_m * z[:, 2:]
        if tangent is not None:
            tangent[:, :, :2] += h * inv_m * tangent[:, :, 2:]
        if i < 3:
            k = _KICKS[i] * dt
            q = z[:, :2]
            powers = sys_._powers(q)
            if tangent is not None:
                H = sys_.hessian(q, powers)
                dx, dy = tangent[:, :, 0], tangent[:, :, 1]
                tangent[:, :, 2] -= k * (H[:, 0, 0, None] * dx + H[:, 0, 1, None] * dy)
                tangent[:, :, 3] -= k * (H[:, 1, 0, None] * dx + H[:, 1, 1, None] * dy)
            z[:, 2:] += k * sys_.force(q, powers)


@dataclass(frozen=True)
class Orbit:
    times: np.ndarray
    states: np.ndarray  # (n_records, 4)
    energy_drift: float


def integrate(source, state, t_max: float, dt: float | None = None, record_every: int = 1,
              check_energy: bool = True) -> Orbit:
    """Integrate one orbit; raises if the relative energy drift exceeds 1e-6."""
    sys_ = as_system(source)
    z = _states(state)
    if len(z) != 1:
        raise DomainError("integrate takes a single state")
    E0 = float(sys_.energy(z)[0])
    dt = dt or default_dt(sys_, E0)
    n = int(np.ceil(abs(t_max) / dt - 1e-9))
    h = np.sign(t_max) * abs(t_max) / n if n else 0.0
    rec = [z[0].copy()]
    times = [0.0]
    worst = 0.0
    for i in range(1, n + 1):
        _step(sys_, z, h)
        if i % record_every == 0 or i == n:
            rec.append(z[0].copy())
            times.append(i * h)
            worst = max(worst, abs(float(sys_.energy(z)[0]) - E0))
    drift = worst / max(abs(E0), 1e-300)
    if check_energy and drift > ENERGY_RTOL:
        raise NumericalError(f"energy drift {drift:.1e} exceeds {ENERGY_RTOL:.0e}; reduce dt")
    return Orbit(np.array(times), np.array(rec), drift)


# --------------------------------------------------------------- sections

@dataclass(frozen=True)
class SectionPoint:
    x: float
    px: float
    t: float
    y: float = 0.0


@dataclass(frozen=True)
class Section:
    points: tuple[SectionPoint, ...]
    energy_drift: float
    empty: bool

    def array(self) -> np.ndarray:
        return np.array([[p.x, p.px] for p in self.points]).reshape(-1, 2)


def poincare_section(source, E: float, states, t_max: float, dt: float | None = None,
                     shell_tol: float = 1e-10) -> list[Section]:
    """Crossings of ``y = 0`` with ``py > 0`` for each orbit, refined by root finding."""
    sys_ = as_system(source)
    z = _states(states)
    energies = sys_.energy(z)
    if np.any(np.abs(energies - E) > shell_tol * max(1.0, abs(E))):
        raise DomainError("initial states are not on the energy shell")
    dt = dt or default_dt(sys_, E)
    n = int(np.ceil(t_max / dt - 1e-9))
    found: list[list[SectionPoint]] = [[] for _ in range(len(z))]
    worst = np.zeros(len(z))
    for i in range(n):
        prev = z.copy()
        _step(sys_, z, dt)
        hit = np.flatnonzero((prev[:, 1] < 0) & (z[:, 1] >= 0) & (z[:, 3] > 0))
        for k in hit:
            found[k].append(_refine_crossing(sys_, prev[k], dt, i * dt))
        if i % 64 == 0 or i == n - 1:
            worst = np.maximum(worst, np.abs(sys_.energy(z) - energies) / np.maximum(np.abs(energies), 1e-300))
    return [Section(tuple(pts), float(d), not pts) for pts, d in zip(found, worst)]


def _refine_crossing(sys_: System, start: np.ndarray, dt: float, t0: float) -> SectionPoint:
    def y_after(tau):
        w = start[None, :].copy()
        if tau > 0:
            _step(sys_, w, tau)
        return w

    tau = brentq(lambda s: y_after(s)[0, 1], 0.0, dt, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    w = y_after(tau)[0]
    return SectionPoint(float(w[0]), float(w[2]), t0 + tau, float(w[1]))


def curve_residual(points: np.ndarray, k: int = 8) -> float:
    """Median local thickness of a point set: ~0 on a smooth curve, O(1) on an area.

    For each point the ``k`` nearest neighbours are fitted by a line (local
    PCA) and ``sqrt(lambda_min / lambda_max)`` is recorded.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) <= k:
        raise DomainError(f"need more than {k} section points")
    scale = pts.std(axis=0)
    pts = pts / np.where(scale > 0, scale, 1.0)
    _, idx = cKDTree(pts).query(pts, k + 1)
    nb = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    ev = np.linalg.eigvalsh(cov)
    ratio = np.sqrt(np.maximum(ev[:, 0], 0) / np.maximum(ev[:, 1], 1e-300))
    return float(np.median(ratio))


# -------------------------------------------------------------- Lyapunov

@dataclass(frozen=True)
class LyapunovResult:
    exponents: np.ndarray  # (4,), descending
    times: np.ndarray
    history: np.ndarray  # (len(times), 4) running estimates
    horizon: float
    energy_drift: float
    escaped: bool
    converged: bool

    @property
    def l1(self) -> float:
        return float(self.exponents[0])

    def pairing(self) -> tuple[float, float]:
        e = self.exponents
        return float(e[0] + e[3]), float(e[1] + e[2])


def _converged(times: np.ndarray, l1: np.ndarray) -> bool:
    late = l1[times >= 0.5 * times[-1]]
    spread = late.max() - late.min()
    return bool(spread <= CONVERGENCE_RTOL * abs(l1[-1]) + CONVERGENCE_FLOOR)


def lyapunov_batch(source, states, t_max: float, dt: float | None = None, renorm: float = 1.0,
                   bound: float | None = None) -> list[LyapunovResult]:
    """Benettin spectra for many initial states integrated together."""
    sys_ = as_system(source)
    z = _states(states)
    n = len(z)
    E = sys_.energy(z)
    dt = dt or default_dt(sys_, float(E.max()))
    if bound is None:
        bound = 10 * sys_.shell_radius(float(E.max()))
    per = max(1, int(round(renorm / dt)))
    blocks = int(np.ceil(t_max / (per * dt) - 1e-9))
    tangent = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
    sums = np.zeros((n, 4))
    hist = np.zeros((blocks, n, 4))
    times = np.zeros(blocks)
    drift = np.zeros(n)
    escaped = np.zeros(n, dtype=bool)
    for b in range(blocks):
        for _ in range(per):
            _step(sys_, z, dt, tangent)
        bad = ~np.all(np.isfinite(z), axis=1) | (np.abs(z[:, :2]).max(axis=1) > bound)
        escaped |= bad
        if bad.any():
            z[bad] = 0.0
            tangent[bad] = np.eye(4)
        # columns of tangent^T are the perturbation vectors
        q, r = np.linalg.qr(np.transpose(tangent, (0, 2, 1)))
        d = np.abs(np.diagonal(r, axis1=1, axis2=2))
        sums += np.log(np.maximum(d, 1e-300))
        tangent = np.transpose(q, (0, 2, 1)).copy()
        times[b] = (b + 1) * per * dt
        hist[b] = sums / times[b]
        drift = np.maximum(drift, np.abs(sys_.energy(z) - E) / np.maximum(np.abs(E), 1e-300))
    out = []
    for i in range(n):
        h = hist[:, i, :]
        # QR keeps the stretch factors ordered only on average; sort the finals
        exps = np.sort(h[-1])[::-1]
        conv = _converged(times, np.sort(h, axis=1)[:, -1])
        out.append(LyapunovResult(exps, times.copy(), h.copy(), float(times[-1]), float(drift[i]),
                                  bool(escaped[i]), conv and not escaped[i]))
    return out


def lyapunov_spectrum(source, state, t_max: float, dt: float | None = None,
                      renorm: float = 1.0) -> LyapunovResult:
    return lyapunov_batch(source, state, t_max, dt, renorm)[0]


# -------------------------------------------------------------- sampling

def _sample_stream(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def sample_energy_shell(source, E: float, n: int, seed: int, stream: int = 0) -> np.ndarray:
    """``n`` on-shell states ``(x, y, px, py)``: positions uniform on ``{V <= E}``.

    Sample ``i`` draws only from its own generator keyed by ``(seed, stream, i)``,
    so any subset or ordering of samples is reproducible on its own.
    """
    sys_ = as_system(source)
    if not n > 0:
        raise DomainError("sample count must be positive")
    R = sys_.shell_radius(E)
    g = np.linspace(-R, R, 201)
    X, Y = np.meshgrid(g, g)
    if sys_.potential(np.column_stack([X.ravel(), Y.ravel()])).min() >= E:
        raise DomainError(f"energy {E} lies below the potential minimum")
    out = np.empty((n, 4))
    for i in range(n):
        rng = _sample_stream(seed, stream, i)
        for _ in range(100000):
            q = rng.uniform(-R, R, size=2)
            if q @ q <= R * R and sys_.potential(q[None, :])[0] < E:
                break
        else:
            raise DomainError(f"energy shell at E={E} is empty or vanishingly small")
        V = sys_.potential(q[None, :])[0]
        speed = np.sqrt(2 * sys_.mass * (E - V))
        phi = rng.uniform(0, 2 * np.pi)
        out[i] = q[0], q[1], speed * np.cos(phi), speed * np.sin(phi)
    return out


# ---------------------------------------------------------------- fractions

@dataclass(frozen=True)
class FractionResult:
    energy: float
    samples: int  # accepted samples (on which the fraction is computed)
    chaotic: int
    threshold: float
    lambdas: np.ndarray  # lambda_1 per drawn sample, NaN where discarded
    discarded: int
    flagged: bool
    orbits: tuple = field(default=(), repr=False, compare=False)
    accepted: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def fraction(self) -> float:
        return self.chaotic / self.samples if self.samples else float("nan")

    @property
    def binomial_error(self) -> float:
        f = self.fraction
        return float(np.sqrt(max(f * (1 - f), 0.0) / max(self.samples, 1)))


def calibrate_threshold(baseline, E: float, n: int, t_max: float, seed: int, stream: int = 1,
                        dt: float | None = None) -> float:
    """``max(0.01, 10 * p95(lambda_1))`` over an integrable baseline at the same horizon."""
    states = sample_energy_shell(baseline, E, n, seed, stream)
    res = lyapunov_batch(baseline, states, t_max, dt)
    l1 = np.array([r.l1 for r in res if not r.escaped])
    return float(max(THRESHOLD_FLOOR, 10 * np.percentile(l1, 95)))


def chaotic_fraction(source, E: float, n: int, threshold: float, t_max: float, seed: int,
                     stream: int = 0, dt: float | None = None) -> FractionResult:
    sys_ = as_system(source)
    states = sample_energy_shell(sys_, E, n, seed, stream)
    res = lyapunov_batch(sys_, states, t_max, dt)
    keep = np.array([r.converged and r.energy_drift <= ENERGY_RTOL for r in res])
    l1 = np.array([r.l1 for r in res])
    chaotic = int(np.count_nonzero(keep & (l1 > threshold)))
    discarded = int(n - keep.sum())
    return FractionResult(float(E), int(keep.sum()), chaotic, float(threshold),
                          np.where(keep, l1, np.nan), discarded, discarded > DISCARD_BUDGET * n,
                          tuple(res), keep)


def write_section_csv(path, sections: Mapping[str, Sequence[Section]]) -> None:
    """One row per crossing; ``sections`` maps a system name to its orbits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "orbit_id", "t", "x", "px"])
        for name, secs in sections.items():
            for k, sec in enumerate(secs):
                for p in sec.points:
                    w.writerow([name, k, fmt(p.t), fmt(p.x), fmt(p.px)])


def write_lyapunov_csv(path, results: Mapping[str, LyapunovResult]) -> None:
    """Running exponent estimates (sorted descending) per system."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "t", "l1", "l2", "l3", "l4"])
        for name, res in results.items():
            for t, row in zip(res.times, np.sort(res.history, axis=1)[:, ::-1]):
                w.writerow([name, fmt(t)] + [fmt(v) for v in row])


def write_fraction_csv(path, rows: Sequence[tuple[str, FractionResult]], seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "energy", "n", "chaotic", "fraction", "binomial_error", "threshold",
                    "discarded", "flagged", "seed"])
        for name, r in rows:
            w.writerow([name, fmt(r.energy), r.samples, r.chaotic, fmt(r.fraction),
                        fmt(r.binomial_error), fmt(r.threshold), r.discarded, int(r.flagged), seed])
