"""Uniform Dirichlet grids, discretized Hamiltonians and grid calculus."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from . import terms as T
from .errors import DomainError, NumericalError

MIN_POINTS = 16


@dataclass(frozen=True)
class Grid:
    """Interior nodes of a box with zero Dirichlet data on its faces.

    Along each axis the nodes are ``lower + (i + 1) * h`` for ``i < n`` with
    ``h = (upper - lower) / (n + 1)``; ``lower`` and ``upper`` are the
    Dirichlet walls.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    n: tuple[int, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        if not (len(lo) == len(hi) == len(n)) or len(n) not in (1, 2):
            raise DomainError("grid must be 1D or 2D with matching bounds")
        if min(n) < MIN_POINTS:
            raise DomainError(f"need at least {MIN_POINTS} points per axis")
        if any(b <= a for a, b in zip(lo, hi)):
            raise DomainError("upper bound must exceed lower bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "n", n)

    @classmethod
    def line(cls, lower: float, upper: float, n: int) -> "Grid":
        return cls((lower,), (upper,), (n,))

    @classmethod
    def square(cls, lower: float, upper: float, n: int) -> "Grid":
        return cls((lower, lower), (upper, upper), (n, n))

    @classmethod
    def with_spacing(cls, lower: float, spacing: float, n: int) -> "Grid":
        """1D grid whose nodes sit exactly at ``lower + k * spacing``."""
        return cls((lower,), (lower + spacing * (n + 1),), (n,))

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((b - a) / (k + 1) for a, b, k in zip(self.lower, self.upper, self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def axes(self) -> list[np.ndarray]:
        return [a + h * np.arange(1, k + 1) for a, h, k in zip(self.lower, self.spacing, self.n)]

    def coords(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays of shape ``self.shape`` (``ij`` indexing)."""
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    @property
    def x(self) -> np.ndarray:
        return self.axes[0]

    def contains(self, point: Sequence[float]) -> bool:
        p = np.atleast_1d(point)
        return bool(np.all((p > np.array(self.lower)) & (p < np.array(self.upper))))


@dataclass(frozen=True)
class GridFunction:
    """One real value per grid node; ``mask`` marks nodes where the value is meaningful."""

    grid: Grid
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise DomainError("grid function has non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool).reshape(self.grid.shape)
            object.__setattr__(self, "mask", m)

    @property
    def valid(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.grid.shape, dtype=bool)
        return self.mask

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)


@dataclass(frozen=True)
class PotentialSpec:
    """Classical potential ``sum c_k * monomials_k`` with mass and hbar."""

    terms: Mapping
    mass: float = 1.0
    hbar: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise DomainError("dimension must be 1 or 2")
        if self.mass <= 0 or self.hbar <= 0:
            raise DomainError("mass and hbar must be positive")
        norm = T.normalize_terms(self.terms, self.dim)
        for term in norm:
            for mono in term:
                neg = [e for e in mono if e < 0]
                if neg and (self.dim != 1 or any(e % 2 for e in neg)):
                    raise DomainError("negative exponents must be even and 1D only")
        if self.dim == 1:
            _check_bounded_below_1d(norm)
        object.__setattr__(self, "terms", norm)

    @classmethod
    def harmonic(cls, omega: float = 1.0, mass: float = 1.0, hbar: float = 1.0, dim: int = 1):
        key = "v2"
        return cls({key: 0.5 * mass * omega**2}, mass, hbar, dim)

    @classmethod
    def isotonic(cls, v2: float = 0.5, v_m2: float = 5.0, mass: float = 1.0, hbar: float = 1.0):
        return cls({"v2": v2, "v-2": v_m2}, mass, hbar, 1)

    @classmethod
    def free(cls, dim: int = 1, mass: float = 1.0, hbar: float = 1.0):
        return cls({}, mass, hbar, dim)

    @classmethod
    def coupled(cls, v2: float = 0.5, v22: float = 0.05, mass: float = 1.0, hbar: float = 1.0):
        return cls({"v2": v2, "v22": v22}, mass, hbar, 2)

    @property
    def singular(self) -> bool:
        return T.is_singular(self.terms)

    def coefficient(self, name: str) -> float:
        return self.terms.get(T.make_term(name, self.dim), 0.0)

    def __call__(self, *coords):
        return T.evaluate(self.terms, coords)

    def gradient(self, *coords):
        return T.gradient(self.terms, coords)

    def hessian(self, *coords):
        return T.hessian(self.terms, coords)


def _check_bounded_below_1d(terms: Mapping) -> None:
    exps = {term[0][0]: c for term, c in terms.items() if c != 0.0}
    pos = [e for e in exps if e > 0]
    neg = [e for e in exps if e < 0]
    if pos and exps[max(pos)] < 0:
        raise DomainError("potential unbounded below at large |x|")
    if neg and exps[min(neg)] < 0:
        raise DomainError("potential unbounded below near x = 0")


def evaluate_potential(spec: PotentialSpec, point) -> float:
    """Potential energy at one point; rejects points on the singular axis."""
    coords = tuple(np.atleast_1d(np.asarray(point, dtype=float)))
    if len(coords) != spec.dim:
        raise DomainError(f"expected a {spec.dim}D point")
    T.check_domain(spec.terms, coords)
    return float(T.evaluate(spec.terms, coords))


@dataclass(frozen=True)
class DiscreteHamiltonian:
    grid: Grid
    matrix: sp.csr_matrix
    potential: np.ndarray
    mass: float
    hbar: float

    @property
    def kinetic_scale(self) -> tuple[float, ...]:
        """Off-diagonal stencil weight ``hbar^2 / (2 m h^2)`` per axis."""
        return tuple(self.hbar**2 / (2 * self.mass * h**2) for h in self.grid.spacing)


def _laplacian_1d(n: int, h: float) -> sp.csr_matrix:
    return sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="csr") / h**2


def dirichlet_laplacian(grid: Grid) -> sp.csr_matrix:
    if grid.dim == 1:
        return _laplacian_1d(grid.n[0], grid.spacing[0])
    lx = _laplacian_1d(grid.n[0], grid.spacing[0])
    ly = _laplacian_1d(grid.n[1], grid.spacing[1])
    return (sp.kron(lx, sp.identity(grid.n[1])) + sp.kron(sp.identity(grid.n[0]), ly)).tocsr()


def hamiltonian_from_values(grid: Grid, potential: np.ndarray, mass: float = 1.0,
                            hbar: float = 1.0) -> DiscreteHamiltonian:
    v = np.asarray(potential, dtype=float).reshape(grid.shape)
    if not np.all(np.isfinite(v)):
        raise DomainError("potential is not finite on the grid")
    h = -(hbar**2 / (2 * mass)) * dirichlet_laplacian(grid) + sp.diags(v.ravel())
    return DiscreteHamiltonian(grid, h.tocsr(), v, mass, hbar)


def discretize_hamiltonian(spec: PotentialSpec, grid: Grid) -> DiscreteHamiltonian:
    """``-(hbar^2/2m) Laplacian + V`` with three-point stencils and zero walls."""
    if grid.dim != spec.dim:
        raise DomainError("grid and potential dimensions differ")
    if spec.singular and grid.lower[0] < 0:
        raise DomainError("inverse-power potentials need a half-line grid (lower bound >= 0)")
    coords = grid.coords()
    T.check_domain(spec.terms, coords)
    return hamiltonian_from_values(grid, spec(*coords), spec.mass, spec.hbar)


@dataclass(frozen=True)
class SpectralData:
    """Lowest eigenpairs; ``vectors[n]`` has ``grid.shape`` and unit grid norm."""

    grid: Grid
    energies: np.ndarray
    vectors: np.ndarray
    hbar: float = 1.0
    log_ground: np.ndarray | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return len(self.energies)

    def state(self, n: int) -> GridFunction:
        return GridFunction(self.grid, self.vectors[n])

    @property
    def ground(self) -> GridFunction:
        return self.state(0)

    def overlap(self) -> np.ndarray:
        flat = self.vectors.reshape(self.count, -1)
        return flat @ flat.T * self.grid.cell_volume


def eigensolve(op: DiscreteHamiltonian, k: int) -> SpectralData:
    grid = op.grid
    if k < 1 or k > 0.2 * grid.size:
        raise DomainError(f"k={k} outside 1..{int(0.2 * grid.size)} (20% of grid points)")
    if grid.dim == 1:
        d = op.matrix.diagonal()
        e = op.matrix.diagonal(1)
        try:
            w, v = eigh_tridiagonal(d, e, select="i", select_range=(0, k - 1))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"tridiagonal eigensolver failed: {exc}") from exc
        vecs = v.T.copy()
    else:
        shift = float(op.potential.min()) - 1.0
        try:
            w, v = eigsh(op.matrix, k=k, sigma=shift, which="LM", tol=1e-12)
        except ArpackNoConvergence as exc:
            raise NumericalError(f"ARPACK did not converge ({len(exc.eigenvalues)} of {k})") from exc
        order = np.argsort(w)
        w, vecs = w[order], v[:, order].T.copy()

    vecs /= np.sqrt(grid.cell_volume)
    for n in range(k):
        vec = vecs[n]
        if n == 0:
            sign = np.sign(vec.sum())
        else:
            big = np.flatnonzero(np.abs(vec) > 1e-3 * np.abs(vec).max())[0]
            sign = np.sign(vec[big])
        vecs[n] = vec * (sign or 1.0)

    log_ground = None
    if grid.dim == 1:
        polished = _polish_ground_1d(op.matrix.diagonal(), op.matrix.diagonal(1)[0], w[0], vecs[0])
        if polished is not None:
            log_ground = polished - 0.5 * np.log(np.sum(np.exp(2 * polished)) * grid.cell_volume)
            vecs[0] = np.exp(log_ground)

    data = SpectralData(grid, np.asarray(w, dtype=float), vecs.reshape((k,) + grid.shape), op.hbar,
                        log_ground)
    err = np.abs(data.overlap() - np.eye(k)).max()
    if err > 1e-8:
        raise NumericalError(f"eigenvectors not orthonormal (max deviation {err:.2e})")
    return data


def _polish_ground_1d(diag: np.ndarray, off: float, energy: float, vec: np.ndarray):
    """Log of the ground state rebuilt from the three-term recurrence.

    Ratios are iterated inward from both walls, which is the stable direction
    for the decaying tails, and matched at the peak; the result is positive
    wherever the eigenvector itself is representable.  Returns None if a
    ratio turns non-positive (not a ground state).
    """
    n = len(diag)
    p = int(np.argmax(vec))
    a = diag - energy
    log_psi = np.zeros(n)
    rho = 0.0
    for i in range(n - 1, p, -1):  # rho_i = psi_i / psi_{i-1}
        rho = -off / (a[i] + off * rho)
        if not rho > 0:
            return None
        log_psi[i] = np.log(rho)
    sigma = 0.0
    for i in range(0, p):  # sigma_i = psi_i / psi_{i+1}
        sigma = -off / (a[i] + off * sigma)
        if not sigma > 0:
            return None
        log_psi[i] = np.log(sigma)
    out = np.zeros(n)
    out[p + 1:] = np.cumsum(log_psi[p + 1:])
    out[:p] = np.cumsum(log_psi[:p][::-1])[::-1]
    return out


def log_derivative(psi: GridFunction) -> GridFunction | tuple[GridFunction, ...]:
    """``grad(psi)/psi`` by central differences (second-order one-sided at the edges)."""
    v = psi.values
    if np.any(v <= 0):
        raise DomainError("log-derivative needs a strictly positive function")
    grads = np.gradient(v, *psi.grid.spacing, edge_order=2)
    if psi.grid.dim == 1:
        return GridFunction(psi.grid, grads / v)
    return tuple(GridFunction(psi.grid, g / v) for g in grads)


def dirichlet_second_difference(values: np.ndarray, h: float) -> np.ndarray:
    """1D three-point second difference with zero ghost values at both walls."""
    padded = np.concatenate([[0.0], values, [0.0]])
    return (padded[2:] - 2 * padded[1:-1] + padded[:-2]) / h**2


def _axis_weights(s: float, n: int, order: int) -> list[tuple[int, float]]:
    """Node indices and Lagrange weights for fractional node coordinate ``s``."""
    i0 = int(np.floor(s))
    t = s - i0
    if abs(t) < 1e-9:
        return [(i0, 1.0)]
    if abs(t - 1.0) < 1e-9:
        return [(i0 + 1, 1.0)]
    # cubic stencil needs nodes i0-1 .. i0+2; the wall ghost nodes (-1, n) are zero
    if order == 3 and i0 - 1 >= -1 and i0 + 2 <= n:
        return [(i0 - 1, -t * (t - 1) * (t - 2) / 6), (i0, (t + 1) * (t - 1) * (t - 2) / 2),
                (i0 + 1, -(t + 1) * t * (t - 2) / 2), (i0 + 2, (t + 1) * t * (t - 1) / 6)]
    return [(i0, 1.0 - t), (i0 + 1, t)]


def interpolation_matrix(grid: Grid, points, order: int = 1) -> sp.csr_matrix:
    """Sparse ``(n_points, grid.size)`` matrix of tensor-product Lagrange weights.

    ``order`` is 1 (hat functions) or 3 (four-node cubic, falling back to
    linear next to a wall).  Wall nodes carry zero (Dirichlet), so their
    weights are dropped.
    """
    if order not in (1, 3):
        raise DomainError("interpolation order must be 1 or 3")
    pts = np.asarray(points, dtype=float).reshape(-1, grid.dim)
    rows, cols, vals = [], [], []
    for r, p in enumerate(pts):
        if not grid.contains(p):
            raise DomainError(f"point {p} is not inside the grid domain")
        per_axis = [_axis_weights((p[a] - grid.lower[a]) / grid.spacing[a] - 1.0, grid.n[a], order)
                    for a in range(grid.dim)]
        if grid.dim == 1:
            combos = [((i,), w) for i, w in per_axis[0]]
        else:
            combos = [((i, j), wi * wj) for i, wi in per_axis[0] for j, wj in per_axis[1]]
        for idx, w in combos:
            if w == 0.0 or any(i < 0 or i >= n for i, n in zip(idx, grid.n)):
                continue
            rows.append(r)
            cols.append(int(np.ravel_multi_index(idx, grid.n)))
            vals.append(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), grid.size))
