"""Polynomial-plus-inverse-power potentials keyed by exponent tuples.

A *term* is a tuple of monomial exponent tuples sharing one coefficient, e.g.
``((2, 0), (0, 2))`` is ``x**2 + y**2``.  1D terms look like ``((-2,),)``.
Coordinates are passed as a sequence of broadcastable arrays ``(x,)`` or
``(x, y)``.
"""
from __future__ import annotations

import re
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError

Monomial = tuple[int, ...]
Term = tuple[Monomial, ...]

# Named 2D groups of the coupled-oscillator ansatz.
NAMED_2D: dict[str, Term] = {
    "v0": ((0, 0),),
    "v11": ((1, 1),),
    "v2": ((0, 2), (2, 0)),
    "v22": ((2, 2),),
    "v13": ((1, 3), (3, 1)),
    "v4": ((0, 4), (4, 0)),
    "v24": ((2, 4), (4, 2)),
    "v44": ((4, 4),),
}
_NAMES_2D = {term: name for name, term in NAMED_2D.items()}

ANSATZ_1D = ("v-4", "v-2", "v2", "v4")
ANSATZ_2D = ("v0", "v11", "v2", "v22", "v13", "v4", "v24", "v44")


def make_term(key, dim: int) -> Term:
    """Normalize a user-facing term key to the canonical ``Term`` form.

    Accepted keys: a name (``"v-2"``, ``"v22"``), an int exponent (1D), a single
    exponent tuple, or a tuple of exponent tuples.
    """
    if isinstance(key, str):
        if dim == 2:
            if key not in NAMED_2D:
                raise DomainError(f"unknown 2D term name {key!r}")
            return NAMED_2D[key]
        m = re.fullmatch(r"v(-?\d+)", key)
        if m is None:
            raise DomainError(f"unknown 1D term name {key!r}")
        return ((int(m.group(1)),),)
    if isinstance(key, (int, np.integer)):
        if dim != 1:
            raise DomainError("bare integer exponents are 1D only")
        return ((int(key),),)
    key = tuple(key)
    if all(isinstance(k, (int, np.integer)) for k in key):
        monos: tuple = (tuple(int(k) for k in key),)
    else:
        monos = tuple(tuple(int(e) for e in mono) for mono in key)
    for mono in monos:
        if len(mono) != dim:
            raise DomainError(f"monomial {mono} does not match dimension {dim}")
    return tuple(sorted(monos))


def term_name(term: Term, dim: int) -> str:
    if dim == 1 and len(term) == 1:
        return f"v{term[0][0]}"
    if dim == 2 and term in _NAMES_2D:
        return _NAMES_2D[term]
    return "v[" + "+".join("x".join(str(e) for e in mono) for mono in term) + "]"


def term_degree(term: Term) -> int:
    return max(abs(sum(mono)) for mono in term)


def normalize_terms(terms: Mapping, dim: int) -> dict[Term, float]:
    out: dict[Term, float] = {}
    for key, value in terms.items():
        term = make_term(key, dim)
        if term in out:
            raise DomainError(f"duplicate term {term_name(term, dim)}")
        out[term] = float(value)
    return dict(sorted(out.items()))


def is_singular(terms: Mapping[Term, float]) -> bool:
    return any(e < 0 for term in terms for mono in term for e in mono)


def check_domain(terms: Mapping[Term, float], coords: Sequence[np.ndarray]) -> None:
    """Reject points on or across the singular axis of inverse-power terms."""
    for axis in range(len(coords)):
        if any(mono[axis] < 0 for term in terms for mono in term):
            if np.any(np.asarray(coords[axis]) <= 0):
                raise DomainError("point at or beyond the singular axis x <= 0")


def _power(x, e):
    if e == 0:
        return np.ones_like(np.asarray(x, dtype=float))
    return np.asarray(x, dtype=float) ** e


def basis(term: Term, coords: Sequence[np.ndarray]) -> np.ndarray:
    """Value of the coefficient-free term at ``coords``."""
    total = 0.0
    for mono in term:
        val = 1.0
        for x, e in zip(coords, mono):
            val = val * _power(x, e)
        total = total + val
    return np.broadcast_to(total, np.broadcast(*coords).shape).astype(float)


def basis_gradient(term: Term, coords: Sequence[np.ndarray]) -> list[np.ndarray]:
    shape = np.broadcast(*coords).shape
    grads = [np.zeros(shape) for _ in coords]
    for mono in term:
        for a, ea in enumerate(mono):
            if ea == 0:
                continue
            val = ea * _power(coords[a], ea - 1)
            for b, (x, e) in enumerate(zip(coords, mono)):
                if b != a:
                    val = val * _power(x, e)
            grads[a] = grads[a] + val
    return grads


def basis_hessian(term: Term, coords: Sequence[np.ndarray]) -> np.ndarray:
    """Hessian with shape ``coords_shape + (dim, dim)``."""
    dim = len(coords)
    shape = np.broadcast(*coords).shape
    hess = np.zeros(shape + (dim, dim))
    for mono in term:
        for a in range(dim):
            for b in range(a, dim):
                exps = list(mono)
                coef = exps[a]
                exps[a] -= 1
                coef *= exps[b]
                exps[b] -= 1
                if coef == 0:
                    continue
                val = float(coef)
                for x, e in zip(coords, exps):
                    val = val * _power(x, e)
                hess[..., a, b] += val
                if a != b:
                    hess[..., b, a] += val
    return hess


def evaluate(terms: Mapping[Term, float], coords: Sequence[np.ndarray]) -> np.ndarray:
    shape = np.broadcast(*coords).shape
    total = np.zeros(shape)
    for term, c in terms.items():
        if c != 0.0:
            total = total + c * basis(term, coords)
    return total


def gradient(terms: Mapping[Term, float], coords: Sequence[np.ndarray]) -> np.ndarray:
    """Gradient with shape ``coords_shape + (dim,)``."""
    shape = np.broadcast(*coords).shape
    out = np.zeros(shape + (len(coords),))
    for term, c in terms.items():
        if c != 0.0:
            for a, g in enumerate(basis_gradient(term, coords)):
                out[..., a] += c * g
    return out


def hessian(terms: Mapping[Term, float], coords: Sequence[np.ndarray]) -> np.ndarray:
    shape = np.broadcast(*coords).shape
    dim = len(coords)
    out = np.zeros(shape + (dim, dim))
    for term, c in terms.items():
        if c != 0.0:
            out += c * basis_hessian(term, coords)
    return out
