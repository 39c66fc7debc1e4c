"""Euclidean transition amplitudes by eigen-expansion and by time stepping."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigvalsh_tridiagonal
from scipy.sparse.linalg import splu

from .errors import DomainError, NumericalError
from .grid import DiscreteHamiltonian, Grid, PotentialSpec, SpectralData, discretize_hamiltonian, \
    eigensolve, interpolation_matrix

TRUNCATION_RTOL = 1e-8
STEP_RTOL = 1e-4


@dataclass(frozen=True)
class BoundarySet:
    sources: np.ndarray
    sinks: np.ndarray
    T: float

    def __post_init__(self):
        src = np.asarray(self.sources, dtype=float)
        snk = np.asarray(self.sinks, dtype=float)
        src = src.reshape(-1, 1) if src.ndim == 1 else src
        snk = snk.reshape(-1, 1) if snk.ndim == 1 else snk
        if src.shape[1] != snk.shape[1]:
            raise DomainError("source and sink points differ in dimension")
        if not self.T > 0:
            raise DomainError("transition time must be positive")
        object.__setattr__(self, "sources", src)
        object.__setattr__(self, "sinks", snk)
        object.__setattr__(self, "T", float(self.T))

    @property
    def dim(self) -> int:
        return self.sources.shape[1]

    @property
    def coincident(self) -> bool:
        return self.sources.shape == self.sinks.shape and np.array_equal(self.sources, self.sinks)

    def at(self, T: float) -> "BoundarySet":
        return BoundarySet(self.sources, self.sinks, T)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Index arrays of the distinct pairs (upper triangle incl. diagonal when coincident)."""
        if self.coincident:
            return np.triu_indices(len(self.sources))
        i, j = np.meshgrid(np.arange(len(self.sources)), np.arange(len(self.sinks)), indexing="ij")
        return i.ravel(), j.ravel()


@dataclass(frozen=True)
class AmplitudeTable:
    """``G[i, j] = G(sink_j, T; source_i, 0)``."""

    boundaries: BoundarySet
    G: np.ndarray
    backend: str
    error: float = 0.0

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        if G.shape != (len(self.boundaries.sources), len(self.boundaries.sinks)):
            raise DomainError("amplitude matrix shape does not match the boundary set")
        if not np.all(G > 0):
            raise NumericalError("amplitude table has non-positive entries")
        object.__setattr__(self, "G", G)

    @property
    def T(self) -> float:
        return self.boundaries.T

    def scaled(self, factor: float) -> "AmplitudeTable":
        return AmplitudeTable(self.boundaries, self.G * factor, self.backend, self.error * factor)

    def rows(self):
        b = self.boundaries
        for i, src in enumerate(b.sources):
            for j, snk in enumerate(b.sinks):
                yield (b.T, *src, *snk, self.G[i, j], self.backend)


def table_header(dim: int) -> list[str]:
    if dim == 1:
        return ["T", "x_in", "x_fi", "G", "backend"]
    return ["T", "x_in", "y_in", "x_fi", "y_fi", "G", "backend"]


def write_tables_csv(path, tables: Sequence[AmplitudeTable]) -> None:
    dim = tables[0].boundaries.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table_header(dim))
        for t in tables:
            for row in t.rows():
                w.writerow([fmt(v) if isinstance(v, float) else v for v in row])


def fmt(v: float) -> str:
    return format(float(v), ".12e")


def spectral_amplitude(spectral: SpectralData, boundaries: BoundarySet,
                       order: int = 1) -> AmplitudeTable:
    grid = spectral.grid
    if boundaries.dim != grid.dim:
        raise DomainError("boundary points and grid differ in dimension")
    gap = spectral.energies[-1] - spectral.energies[0]
    hbar = spectral.hbar
    tail = np.exp(-gap * boundaries.T / hbar)
    if spectral.count < 2 or tail > TRUNCATION_RTOL:
        raise NumericalError(
            f"spectral sum truncated too early: last retained state weighs {tail:.1e} "
            f"relative at T={boundaries.T}; use more states or a longer time")
    flat = spectral.vectors.reshape(spectral.count, -1)
    a = interpolation_matrix(grid, boundaries.sources, order) @ flat.T
    b = interpolation_matrix(grid, boundaries.sinks, order) @ flat.T
    weights = np.exp(-(spectral.energies - spectral.energies[0]) * boundaries.T / hbar)
    G = (a * weights) @ b.T * np.exp(-spectral.energies[0] * boundaries.T / hbar)
    return AmplitudeTable(boundaries, G, "spectral", float(tail * np.abs(G).max()))


def spectral_states(op: DiscreteHamiltonian, T: float, rtol: float = TRUNCATION_RTOL) -> SpectralData:
    """Eigenpairs needed for a converged spectral sum at time ``T`` (1D)."""
    if op.grid.dim != 1:
        raise DomainError("automatic state counting is 1D only")
    d, e = op.matrix.diagonal(), op.matrix.diagonal(1)
    e0 = eigvalsh_tridiagonal(d, e, select="i", select_range=(0, 0))[0]
    cutoff = e0 - 1.05 * op.hbar * np.log(rtol) / T
    k = len(eigvalsh_tridiagonal(d, e, select="v", select_range=(-np.inf, cutoff))) + 1
    return eigensolve(op, min(max(k, 2), int(0.2 * op.grid.size)))


def converged_spectral_amplitude(op: DiscreteHamiltonian, boundaries: BoundarySet,
                                 order: int = 1) -> AmplitudeTable:
    """1D spectral table whose truncation is small relative to its smallest entry."""
    table = spectral_amplitude(spectral_states(op, boundaries.T), boundaries, order)
    ratio = float(table.G.min() / table.G.max())
    if ratio < 1e-2:
        states = spectral_states(op, boundaries.T, TRUNCATION_RTOL * ratio * 1e-2)
        table = spectral_amplitude(states, boundaries, order)
    return table


def stepping_amplitude(spec: PotentialSpec, grid: Grid, boundaries: BoundarySet,
                       n_steps: int | None = None, max_steps: int = 16000,
                       order: int = 1) -> AmplitudeTable:
    """Crank-Nicolson evolution of a grid delta at each source.

    The first step is replaced by two backward-Euler half steps (Rannacher
    start-up) to damp the stiff modes of the delta.  Each evaluation runs with
    ``n`` and ``2n`` steps; the returned amplitudes are the Richardson
    combination and the halving change must stay below ``STEP_RTOL``.  With
    ``n_steps=None`` the step count doubles from 250 until the check passes.
    """
    if n_steps is not None and n_steps < 100:
        raise DomainError("stepping backend needs at least 100 steps")
    op = discretize_hamiltonian(spec, grid)
    src = interpolation_matrix(grid, boundaries.sources, order)
    snk = interpolation_matrix(grid, boundaries.sinks, order)
    u0 = src.T.toarray() / grid.cell_volume

    n = n_steps or 250
    G1 = snk @ _crank_nicolson(op, u0, boundaries.T, n)
    while True:
        G2 = snk @ _crank_nicolson(op, u0, boundaries.T, 2 * n)
        change = float((np.abs(G2 - G1) / np.abs(G2)).max())
        if change <= STEP_RTOL:
            break
        if n_steps is not None or 4 * n > max_steps:
            raise NumericalError(
                f"step halving changed amplitudes by {change:.1e} (> {STEP_RTOL:.0e}) "
                f"at {2 * n} steps; increase n_steps")
        n, G1 = 2 * n, G2
    G = ((4.0 * G2 - G1) / 3.0).T
    return AmplitudeTable(boundaries, G, "stepping", float(np.abs(G2 - G1).max() / 3.0))


def _crank_nicolson(op: DiscreteHamiltonian, u0: np.ndarray, T: float, n_steps: int) -> np.ndarray:
    dt = T / n_steps
    half = (dt / (2.0 * op.hbar)) * op.matrix
    eye = sp.identity(op.grid.size, format="csc")
    lu = splu((eye + half).tocsc())
    explicit = (eye - half).tocsr()
    u = lu.solve(lu.solve(np.asarray(u0, dtype=float)))  # two BE half steps = first step
    for _ in range(n_steps - 1):
        u = lu.solve(explicit @ u)
    return u


@dataclass(frozen=True)
class FeynmanKacProfile:
    times: np.ndarray
    estimates: np.ndarray
    monotone: bool

    @property
    def energy(self) -> float:
        return float(self.estimates[-1])


def feynman_kac_diagnostics(tables: Sequence[AmplitudeTable], pair: tuple[int, int] = (0, 0),
                            hbar: float = 1.0, tol: float = 1e-9) -> FeynmanKacProfile:
    """Ground-energy estimates ``-hbar * d(ln G)/dT`` between successive times."""
    if len(tables) < 3:
        raise DomainError("need at least three transition times")
    ts = np.array([t.T for t in tables])
    if np.any(np.diff(ts) <= 0):
        raise DomainError("transition times must increase")
    lnG = np.log([t.G[pair] for t in tables])
    est = -hbar * np.diff(lnG) / np.diff(ts)
    steps = np.diff(est)
    tol_abs = tol * max(1.0, np.abs(est).max())
    monotone = bool(np.all(steps <= tol_abs) or np.all(steps >= -tol_abs))
    if len(steps) > 1:
        monotone = monotone and bool(np.all(np.abs(steps[1:]) <= np.abs(steps[:-1]) + tol_abs))
    return FeynmanKacProfile(0.5 * (ts[1:] + ts[:-1]), est, monotone)
