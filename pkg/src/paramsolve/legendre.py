"""Orthonormal Legendre recurrence and the bidiagonal parametric multiplication matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .indices import MultiIndex, kronecker_shift


def recurrence_coeff(n: int) -> float:
    """Coefficient p_n of y L_n = p_{n+1} L_{n+1} + p_n L_{n-1} for the uniform measure."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return 0.0
    return 1.0 / np.sqrt(4.0 - 1.0 / n**2)


@dataclass(frozen=True)
class RecurrenceTable:
    n_max: int
    p: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = np.arange(self.n_max + 1, dtype=float)
        p = np.zeros(self.n_max + 1)
        p[1:] = 1.0 / np.sqrt(4.0 - 1.0 / n[1:] ** 2)
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    def __getitem__(self, n: int) -> float:
        if n <= self.n_max:
            return float(self.p[n])
        return recurrence_coeff(n)


def legendre_values(n_max: int, y) -> np.ndarray:
    """Orthonormal Legendre polynomials L_0..L_{n_max} at points y, shape (n_max+1, len(y))."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    out = np.zeros((n_max + 1, y.size))
    out[0] = 1.0
    if n_max >= 1:
        out[1] = np.sqrt(3.0) * y
    for n in range(1, n_max):
        out[n + 1] = (y * out[n] - recurrence_coeff(n) * out[n - 1]) / recurrence_coeff(n + 1)
    return out


def mj_entry(j: int, nu: MultiIndex, nu2: MultiIndex) -> float:
    """Entry (nu, nu2) of M_j, i.e. the integral of y_j L_nu L_nu2 over the parameter box."""
    if j < 0:
        raise ValueError("j must be >= 0")
    if j == 0:
        return 1.0 if nu == nu2 else 0.0
    a, b = nu[j], nu2[j]
    if abs(a - b) != 1:
        return 0.0
    if kronecker_shift(nu, j, b - a) != nu2:
        return 0.0
    return recurrence_coeff(max(a, b))


def apply_mj(j: int, v: Mapping[MultiIndex, float]) -> dict[MultiIndex, float]:
    """Apply M_j to a finitely supported parametric vector."""
    if j == 0:
        return {nu: float(c) for nu, c in v.items() if c != 0}
    out: dict[MultiIndex, float] = {}
    for nu, c in v.items():
        n = nu[j]
        up = kronecker_shift(nu, j, 1)
        out[up] = out.get(up, 0.0) + recurrence_coeff(n + 1) * c
        if n > 0:
            down = kronecker_shift(nu, j, -1)
            out[down] = out.get(down, 0.0) + recurrence_coeff(n) * c
    return {nu: c for nu, c in out.items() if c != 0.0}


class IndexList:
    """Ordered list of multi-indices with position lookup; grows by appending."""

    def __init__(self, nus: Sequence[MultiIndex] = ()):
        self.items: list[MultiIndex] = []
        self.pos: dict[MultiIndex, int] = {}
        for nu in nus:
            self.add(nu)

    def add(self, nu: MultiIndex) -> int:
        i = self.pos.get(nu)
        if i is None:
            i = len(self.items)
            self.items.append(nu)
            self.pos[nu] = i
        return i

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i: int) -> MultiIndex:
        return self.items[i]

    def __contains__(self, nu) -> bool:
        return nu in self.pos

    def copy(self) -> "IndexList":
        other = IndexList()
        other.items = list(self.items)
        other.pos = dict(self.pos)
        return other


def mj_matrix(j: int, source: Sequence[MultiIndex], target: IndexList,
              grow: bool = True) -> sp.csr_matrix:
    """Sparse matrix of M_j mapping coefficients on ``source`` to positions in ``target``.

    With ``grow`` the missing neighbours nu +- e^j are appended to ``target``;
    otherwise they are dropped.
    """
    rows, cols, vals = [], [], []
    if j == 0:
        for c, nu in enumerate(source):
            r = target.add(nu) if grow else target.pos.get(nu)
            if r is not None:
                rows.append(r)
                cols.append(c)
                vals.append(1.0)
    else:
        for c, nu in enumerate(source):
            n = nu[j]
            for delta, coeff in ((1, recurrence_coeff(n + 1)), (-1, recurrence_coeff(n))):
                if delta < 0 and n == 0:
                    continue
                mu = kronecker_shift(nu, j, delta)
                r = target.add(mu) if grow else target.pos.get(mu)
                if r is not None:
                    rows.append(r)
                    cols.append(c)
                    vals.append(coeff)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(target), len(source)))


_shift = lru_cache(maxsize=1 << 20)(kronecker_shift)
_REC = RecurrenceTable(4096)


def mj_stack(M: int, source: Sequence[MultiIndex], target: IndexList) -> sp.csr_matrix:
    """Horizontal concatenation [M_0 | M_1 | ... | M_M] restricted to ``source`` columns.

    Column block j holds M_j; missing neighbours are appended to ``target``.
    """
    ns = len(source)
    rows, cols, vals = [], [], []
    for c, nu in enumerate(source):
        rows.append(target.add(nu))
        cols.append(c)
        vals.append(1.0)
    for j in range(1, M + 1):
        off = j * ns
        for c, nu in enumerate(source):
            n = nu[j]
            rows.append(target.add(_shift(nu, j, 1)))
            cols.append(off + c)
            vals.append(_REC[n + 1])
            if n > 0:
                rows.append(target.add(_shift(nu, j, -1)))
                cols.append(off + c)
                vals.append(_REC[n])
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(target), (M + 1) * ns))


def jacobi_matrix(n: int) -> np.ndarray:
    """Section of the one-dimensional M acting on degrees 0..n-1 (n+1 output rows)."""
    out = np.zeros((n + 1, n))
    for k in range(n):
        out[k + 1, k] = recurrence_coeff(k + 1)
        if k > 0:
            out[k - 1, k] = recurrence_coeff(k)
    return out
