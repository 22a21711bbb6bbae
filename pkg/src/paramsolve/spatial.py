"""Coefficient functions, exact stiffness assembly and level-cutoff compression."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .indices import SpatialIndex
from .wavelets import WaveletBasis, gauss_rule, local_legendre


@dataclass(frozen=True)
class ExpansionFunction:
    """One term of the coefficient expansion.

    kind is one of ``"hat"`` (multilevel Schauder hat of given level and
    translate, scaled by ``amplitude``), ``"indicator"`` (amplitude times the
    indicator of [left, right]), ``"sine"`` (amplitude * sin(freq * pi * x)) or
    ``"constant"`` (the mean field).
    """

    kind: str
    amplitude: float = 1.0
    level: int = 0
    translate: int = 0
    left: float = 0.0
    right: float = 1.0
    freq: int = 1

    def __post_init__(self):
        if self.kind not in ("hat", "indicator", "sine", "constant"):
            raise ValueError(f"unknown expansion kind {self.kind!r}")

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "hat":
            h = 2.0**-self.level
            return self.translate * h, (self.translate + 1) * h
        if self.kind == "indicator":
            return self.left, self.right
        return 0.0, 1.0

    @property
    def mu_level(self) -> int:
        """Level used by the compression cutoff (0 for globally supported terms)."""
        return self.level if self.kind == "hat" else 0

    def sup_norm(self) -> float:
        return abs(self.amplitude)

    def breakpoints(self) -> np.ndarray:
        if self.kind == "hat":
            a, b = self.support
            return np.array([a, 0.5 * (a + b), b])
        if self.kind == "indicator":
            return np.array([self.left, self.right])
        return np.array([])

    @property
    def poly_degree(self) -> int | None:
        return {"hat": 1, "indicator": 0, "constant": 0}.get(self.kind)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "hat":
            t = 2.0**self.level * x - self.translate
            return self.amplitude * np.clip(1.0 - np.abs(2.0 * t - 1.0), 0.0, None)
        if self.kind == "indicator":
            return self.amplitude * ((x >= self.left) & (x <= self.right)).astype(float)
        if self.kind == "sine":
            return self.amplitude * np.sin(self.freq * np.pi * x)
        return self.amplitude * np.ones_like(x)


# -- cell-wise weighted mass blocks -------------------------------------------


def cell_mass_blocks(theta: ExpansionFunction, order: int, level: int,
                     cells: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Blocks B[c, a, b] = integral over cell c of theta * P_a * P_b (orthonormal local Legendre).

    Only cells meeting the support of theta are returned, with their numbers.
    Piecewise polynomial terms are integrated exactly on the joint breakpoint
    partition; the sine kind uses a Gauss rule sized to its frequency.
    """
    ncell = 2**level
    h = 1.0 / ncell
    if cells is None:
        a, b = theta.support
        lo = max(int(math.floor(a * ncell)), 0)
        hi = min(int(math.ceil(b * ncell)), ncell)
        cells = np.arange(lo, hi)
    cells = np.asarray(cells, dtype=int)
    k = order
    if theta.poly_degree is not None:
        q = (2 * k - 2 + theta.poly_degree) // 2 + 1
    else:
        q = 2 * k + int(math.ceil(theta.freq * h * 2)) + 12
    t, w = gauss_rule(q)
    bp = theta.breakpoints()
    blocks = np.zeros((cells.size, k, k))
    # split points strictly inside a cell
    inner = [[] for _ in range(cells.size)]
    if bp.size:
        for p in bp:
            c = int(math.floor(p * ncell))
            frac = p * ncell - c
            if 1e-13 < frac < 1 - 1e-13:
                i = np.searchsorted(cells, c)
                if i < cells.size and cells[i] == c:
                    inner[i].append(frac)
    plain = np.array([not s for s in inner])
    if plain.any():
        idx = np.nonzero(plain)[0]
        x = (cells[idx, None] + t[None, :]) * h  # (n, q)
        vals = theta(x) * w[None, :]
        phi = local_legendre(k, t)  # (k, q)
        blocks[idx] = np.einsum("nq,aq,bq->nab", vals, phi, phi)
    for i in np.nonzero(~plain)[0]:
        edges = np.concatenate([[0.0], np.sort(inner[i]), [1.0]])
        for lo, hi in zip(edges[:-1], edges[1:]):
            ts = lo + (hi - lo) * t
            # evaluate theta at the sub-piece interior points; use midpoint side for kinks
            vals = theta((cells[i] + ts) * h) * w * (hi - lo)
            phi = local_legendre(k, ts)
            blocks[i] += np.einsum("q,aq,bq->ab", vals, phi, phi)
    return cells, blocks


def block_diag_matrix(cells: np.ndarray, blocks: np.ndarray, ncell: int) -> sp.csr_matrix:
    k = blocks.shape[1]
    base = cells[:, None, None] * k
    rows = np.broadcast_to(base + np.arange(k)[None, :, None], blocks.shape)
    cols = np.broadcast_to(base + np.arange(k)[None, None, :], blocks.shape)
    return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(ncell * k, ncell * k))


def assemble_window(basis: WaveletBasis, theta: ExpansionFunction, level: int | None = None,
                    prune: float = 1e-15) -> tuple[sp.csr_matrix, float]:
    """Matrix (theta psi_l', psi_m') over all ids with level <= ``level``.

    Entries below ``prune * sup|theta|`` are dropped (they are rounding noise on
    structurally vanishing moments); the Frobenius norm of what was dropped is
    returned as the second value.
    """
    level = basis.max_level if level is None else level
    basis.check_level(level)
    W = basis.synthesis_matrix(level)
    cells, blocks = cell_mass_blocks(theta, basis.order, level)
    k = basis.order
    cols = (cells[:, None] * k + np.arange(k)[None, :]).ravel()
    Wc = W[:, cols]
    Bd = block_diag_matrix(np.arange(cells.size), blocks, cells.size)
    A = (Wc @ Bd @ Wc.T).tocsr()[1:, 1:]
    A = 0.5 * (A + A.T)
    A = A.tocoo()
    tol = prune * max(theta.sup_norm(), 1e-300)
    small = np.abs(A.data) <= tol
    dropped = float(np.sqrt(np.sum(A.data[small] ** 2)))
    keep = ~small
    A = sp.csr_matrix((A.data[keep], (A.row[keep], A.col[keep])), shape=A.shape)
    return A, dropped


def stiffness_entry(basis: WaveletBasis, theta: ExpansionFunction,
                    lam: SpatialIndex, lam2: SpatialIndex) -> float:
    """Integral of theta times the product of the derivatives of two basis functions."""
    i, j = basis.id(lam), basis.id(lam2)
    level = max(lam.level, lam2.level)
    _, si = basis.single_scale_data(i)
    _, sj = basis.single_scale_data(j)
    si = refine_single_scale(basis, si, level)
    sj = refine_single_scale(basis, sj, level)
    cells = np.nonzero(np.any(si != 0, axis=1) & np.any(sj != 0, axis=1))[0]
    if cells.size == 0:
        return 0.0
    a, b = theta.support
    ncell = 2**level
    cells = cells[((cells + 1) / ncell > a) & (cells / ncell < b)]
    if cells.size == 0:
        return 0.0
    cells, blocks = cell_mass_blocks(theta, basis.order, level, cells)
    v = np.einsum("ca,cab,cb->", si[cells], blocks, sj[cells])
    return float(v)


def refine_single_scale(basis: WaveletBasis, s: np.ndarray, level: int) -> np.ndarray:
    while s.shape[0] < 2**level:
        out = np.empty((2 * s.shape[0], s.shape[1]))
        out[0::2] = s @ basis.H0
        out[1::2] = s @ basis.H1
        s = out
    return s


# -- compression ---------------------------------------------------------------


def level_distance(lev_a: np.ndarray, lev_b: np.ndarray, mu_level: int) -> np.ndarray:
    """max(|l|,|l'|) - max(|mu|, min(|l|,|l'|))."""
    hi = np.maximum(lev_a, lev_b)
    lo = np.minimum(lev_a, lev_b)
    return hi - np.maximum(mu_level, lo)


def cutoff(n: int, mu_level: int, gamma: float, m: int = 1) -> float:
    return n / m + math.log2(1 + mu_level) / gamma


def operator_norm_bound(M: sp.spmatrix) -> float:
    """Certified upper bound for the spectral norm: min of Frobenius and Schur test."""
    if M.nnz == 0:
        return 0.0
    M = M.tocsr()
    absM = abs(M)
    fro = float(np.sqrt((M.data**2).sum()))
    rows = np.asarray(absM.sum(axis=1)).ravel().max()
    cols = np.asarray(absM.sum(axis=0)).ravel().max()
    return min(fro, float(np.sqrt(rows * cols)))


@dataclass
class CompressedMatrix:
    """Level-cutoff section of A_j with a certified bound on the discarded part."""

    j: int
    n: int
    matrix: sp.csr_matrix
    est_err: float
    gamma: float
    mu_level: int

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def dump_csv(self, path, basis: WaveletBasis):
        write_matrix_csv(path, self.matrix, basis)


def compress(A: sp.spmatrix, levels: np.ndarray, mu_level: int, n: int, gamma: float,
             dropped: float = 0.0, j: int = 0) -> CompressedMatrix:
    A = A.tocoo()
    if n <= 0:
        keep = np.zeros(A.nnz, dtype=bool)
    else:
        d = level_distance(levels[A.row], levels[A.col], mu_level)
        keep = d <= cutoff(n, mu_level, gamma) + 1e-12
    kept = sp.csr_matrix((A.data[keep], (A.row[keep], A.col[keep])), shape=A.shape)
    rest = sp.csr_matrix((A.data[~keep], (A.row[~keep], A.col[~keep])), shape=A.shape)
    err = operator_norm_bound(rest) + dropped
    return CompressedMatrix(j, n, kept, err, gamma, mu_level)


def full_depth(levels_max: int, mu_level: int, gamma: float) -> int:
    """Smallest n for which the cutoff keeps every pair in a window of the given depth."""
    n = 0
    while cutoff(n, mu_level, gamma) < levels_max:
        n += 1
    return max(n, 1)


def write_matrix_csv(path, M: sp.spmatrix, basis: WaveletBasis):
    M = M.tocoo()
    order = np.lexsort((M.col, M.row))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["lambda_level", "lambda_translate", "comp",
                     "lambda'_level", "lambda'_translate", "comp'", "value"])
        for r, c, v in zip(M.row[order], M.col[order], M.data[order]):
            a, b = basis.index(int(r)), basis.index(int(c))
            wr.writerow([a.level, a.translate, a.component, b.level, b.translate, b.component, repr(float(v))])


def read_matrix_csv(path, basis: WaveletBasis, shape) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    with open(path) as fh:
        rd = csv.reader(fh)
        next(rd)
        for rec in rd:
            a = SpatialIndex(int(rec[0]), int(rec[1]), int(rec[2]))
            b = SpatialIndex(int(rec[3]), int(rec[4]), int(rec[5]))
            rows.append(basis.id(a))
            cols.append(basis.id(b))
            vals.append(float(rec[6]))
    return sp.csr_matrix((vals, (rows, cols)), shape=shape)


# -- ellipticity ---------------------------------------------------------------


class EllipticityError(ValueError):
    """Raised when the coefficient cannot be certified uniformly positive."""


def uniform_ellipticity_check(mean: float, terms: Sequence[ExpansionFunction],
                              tail_majorant: float = 0.0) -> tuple[float, float]:
    """Certified (r, R) with r <= mean - sum|theta_j| and R >= mean + sum|theta_j| pointwise.

    Hats of a common level have disjoint supports, so their sup norms are
    combined by a maximum per level; indicators with disjoint supports are
    treated the same way; other kinds are summed.
    """
    by_level: dict[tuple, float] = {}
    total = tail_majorant
    indicators = [t for t in terms if t.kind == "indicator"]
    disjoint = _disjoint([t.support for t in indicators])
    for t in terms:
        if t.kind == "hat":
            key = ("hat", t.level)
            by_level[key] = max(by_level.get(key, 0.0), t.sup_norm())
        elif t.kind == "indicator" and disjoint:
            by_level[("ind",)] = max(by_level.get(("ind",), 0.0), t.sup_norm())
        else:
            total += t.sup_norm()
    total += sum(by_level.values())
    r, R = mean - total, mean + total
    if r <= 0:
        raise EllipticityError(f"mean field {mean} minus fluctuation majorant {total} is not positive")
    return r, R


def _disjoint(intervals: Iterable[tuple[float, float]]) -> bool:
    iv = sorted(intervals)
    return all(a[1] < b[0] for a, b in zip(iv, iv[1:]))
