"""Piecewise polynomial multiwavelet basis of H^1_0(0,1).

The derivatives of the basis functions form an L2-orthonormal multiwavelet
system of order k (piecewise polynomials of degree k-1 with k vanishing
moments, extra moments on the higher components).  Integrating them from 0
gives functions vanishing at both end points whose H^1_0 Gram matrix is the
identity, so the basis is a Riesz basis with measured constants close to 1.

Coefficient vectors over the window of levels <= L are indexed by the
consecutive ids of :mod:`paramsolve.indices`.  Internally the "full"
coefficient vector has one extra leading entry for the constant function,
which is not part of the basis because its antiderivative violates the
boundary condition at 1.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre as npleg

from .indices import SpatialIndex, spatial_count, spatial_id, spatial_index, spatial_levels


def local_legendre(k: int, t) -> np.ndarray:
    """L2([0,1])-orthonormal Legendre polynomials of degree < k at t, shape (k, len(t))."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = 2.0 * t - 1.0
    out = np.empty((k, t.size))
    for a in range(k):
        c = np.zeros(a + 1)
        c[a] = 1.0
        out[a] = np.sqrt(2 * a + 1) * npleg.legval(x, c)
    return out


def gauss_rule(npts: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0,1]."""
    x, w = npleg.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


def _two_scale(k: int):
    t, w = gauss_rule(2 * k + 2)
    # parent functions restricted to each half, expanded in the child functions
    H = []
    for s in (0, 1):
        parent = local_legendre(k, 0.5 * (t + s))
        child = local_legendre(k, t) * np.sqrt(2.0)
        # integral over the half [s/2, (s+1)/2] of parent_a * child_b
        H.append(0.5 * (parent * w) @ child.T)
    H0, H1 = H
    P = np.hstack([H0, H1])  # k x 2k, orthonormal rows
    _, _, vt = np.linalg.svd(P)
    Z = vt[k:].T  # 2k x k, orthonormal complement

    # moments <z, x^(k+i)> in the child coordinates
    tm, wm = gauss_rule(2 * k + 2)
    mom = np.zeros((max(k - 1, 1), 2 * k))
    for s in (0, 1):
        xs = 0.5 * (tm + s)
        child = local_legendre(k, tm) * np.sqrt(2.0)
        for i in range(k - 1):
            mom[i, s * k : (s + 1) * k] = 0.5 * (child * wm) @ (xs ** (k + i))
    if k > 1:
        q, _ = np.linalg.qr((mom[: k - 1] @ Z).T, mode="complete")
    else:
        q = np.eye(1)
    G = (Z @ q).T  # row c has k + c vanishing moments
    G[np.abs(G) < 1e-14] = 0.0
    for M in (H0, H1):
        M[np.abs(M) < 1e-14] = 0.0
    for c in range(k):
        i = np.argmax(np.abs(G[c]) > np.abs(G[c]).max() * (1 - 1e-9))
        if G[c, i] < 0:
            G[c] = -G[c]
    return H0, H1, G[:, :k].copy(), G[:, k:].copy()


class WaveletBasis:
    """Multiwavelet Riesz basis of H^1_0(0,1) with a level cap.

    Parameters
    ----------
    order : int
        Number of vanishing moments k of the derivative wavelets; the basis
        functions are piecewise polynomials of degree k.
    max_level : int
        Largest level L_max available in the window.
    """

    def __init__(self, order: int = 2, max_level: int = 8):
        if order < 1:
            raise ValueError("order must be >= 1")
        if max_level < 0:
            raise ValueError("max_level must be >= 0")
        self.order = order
        self.max_level = max_level
        self.H0, self.H1, self.G0, self.G1 = _two_scale(order)

    def __repr__(self) -> str:
        return f"WaveletBasis(order={self.order}, max_level={self.max_level})"

    def size(self, level: int | None = None) -> int:
        return spatial_count(self.order, self.max_level if level is None else level)

    def id(self, index: SpatialIndex) -> int:
        if index.level > self.max_level:
            raise ValueError(f"level {index.level} exceeds cap {self.max_level}")
        return spatial_id(index, self.order)

    def index(self, i: int) -> SpatialIndex:
        return spatial_index(i, self.order)

    def levels(self, level: int | None = None) -> np.ndarray:
        return spatial_levels(self.order, self.max_level if level is None else level)

    def check_level(self, level: int):
        if level > self.max_level:
            raise ValueError(f"level {level} exceeds cap {self.max_level}")

    # -- transforms ---------------------------------------------------------

    def to_single_scale(self, coeffs: np.ndarray, level: int) -> np.ndarray:
        """Basis coefficients (ids, optional trailing columns) to cell-wise Legendre data.

        Returns an array of shape (2**level, k, ...) holding the orthonormal local
        Legendre coefficients of the derivative on each cell of width 2**-level.
        """
        k = self.order
        coeffs = np.asarray(coeffs, dtype=float)
        n = spatial_count(k, level)
        if coeffs.shape[0] != n:
            raise ValueError(f"expected {n} coefficients, got {coeffs.shape[0]}")
        tail = coeffs.shape[1:]
        s = np.zeros((1, k) + tail)
        s[0, 1:] = coeffs[: k - 1]
        for lev in range(1, level + 1):
            start = k * 2 ** (lev - 1) - 1
            w = coeffs[start : start + k * 2 ** (lev - 1)].reshape((2 ** (lev - 1), k) + tail)
            out = np.empty((2**lev, k) + tail)
            out[0::2] = np.einsum("ca,tc...->ta...", self.H0, s) + np.einsum("ca,tc...->ta...", self.G0, w)
            out[1::2] = np.einsum("ca,tc...->ta...", self.H1, s) + np.einsum("ca,tc...->ta...", self.G1, w)
            s = out
        return s

    def from_single_scale(self, s: np.ndarray, keep_constant: bool = False):
        """Inverse of :meth:`to_single_scale` (orthogonal projection onto the basis span).

        With ``keep_constant`` the coefficient of the constant function is
        returned as a second value.
        """
        s = np.asarray(s, dtype=float)
        level = int(np.log2(s.shape[0]))
        if 2**level != s.shape[0]:
            raise ValueError("number of cells must be a power of two")
        tail = s.shape[2:]
        parts = []
        for lev in range(level, 0, -1):
            left, right = s[0::2], s[1::2]
            w = np.einsum("ca,ta...->tc...", self.G0, left) + np.einsum("ca,ta...->tc...", self.G1, right)
            s = np.einsum("ca,ta...->tc...", self.H0, left) + np.einsum("ca,ta...->tc...", self.H1, right)
            parts.append(w.reshape((-1,) + tail))
        parts.append(s[0, 1:])
        out = np.concatenate(parts[::-1], axis=0)
        if keep_constant:
            return out, s[0, 0]
        return out

    @cached_property
    def _patterns(self) -> dict:
        return {}

    def refinement_pattern(self, level: int, component: int, target: int) -> np.ndarray:
        """Cell-wise Legendre data at ``target`` of a single basis function (translate 0).

        Level 0 includes the constant as component 0 here; for level >= 1 the
        pattern covers 2**(target-level+1) cells.
        """
        key = (level, component, target)
        pat = self._patterns.get(key)
        if pat is None:
            k = self.order
            if level == 0:
                s = np.zeros((1, k))
                s[0, component] = 1.0
                cur = 0
            else:
                s = np.zeros((2, k))
                s[0] = self.G0[component]
                s[1] = self.G1[component]
                cur = level
            while cur < target:
                out = np.empty((2 * s.shape[0], k))
                out[0::2] = s @ self.H0
                out[1::2] = s @ self.H1
                s = out
                cur += 1
            pat = s
            self._patterns[key] = pat
        return pat

    def synthesis_matrix(self, level: int) -> sp.csr_matrix:
        """Sparse orthogonal matrix W with rows = [constant, ids...], columns = (cell, degree).

        Row i of W holds the single-scale data of basis function i-1 (row 0 is the
        constant function) at the given level.
        """
        cache = self.__dict__.setdefault("_synth", {})
        if level in cache:
            return cache[level]
        k = self.order
        rows, cols, vals = [], [], []
        ncell = 2**level
        for c in range(k):
            pat = self.refinement_pattern(0, c, level).ravel()
            nz = np.nonzero(pat)[0]
            rows.append(np.full(nz.size, c))
            cols.append(nz)
            vals.append(pat[nz])
        for lev in range(1, level + 1):
            width = 2 ** (level - lev + 1)  # cells per function
            ntr = 2 ** (lev - 1)
            start = k * 2 ** (lev - 1)  # row of (lev, 0, 0), counting the constant
            for c in range(k):
                pat = self.refinement_pattern(lev, c, level).ravel()
                nz = np.nonzero(np.abs(pat) > 0)[0]
                t = np.arange(ntr)
                rows.append((start + k * t + c)[:, None].repeat(nz.size, 1).ravel())
                cols.append((t[:, None] * width * k + nz[None, :]).ravel())
                vals.append(np.tile(pat[nz], ntr))
        W = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(k * ncell, k * ncell),
        )
        cache[level] = W
        return W

    # -- evaluation ---------------------------------------------------------

    def single_scale_data(self, i: int) -> tuple[int, np.ndarray]:
        """(level, cell data) of the derivative of basis function i at its own level."""
        idx = self.index(i)
        if idx.level == 0:
            pat = self.refinement_pattern(0, idx.component + 1, 0)
            return 0, pat
        lev = idx.level
        pat = self.refinement_pattern(lev, idx.component, lev)
        s = np.zeros((2**lev, self.order))
        s[2 * idx.translate : 2 * idx.translate + 2] = pat
        return lev, s

    def derivative(self, i: int, x) -> np.ndarray:
        """Values of the derivative of basis function i (an L2-normalized multiwavelet)."""
        lev, s = self.single_scale_data(i)
        return eval_single_scale(s, x)

    def __call__(self, i: int, x) -> np.ndarray:
        """Values of basis function i."""
        lev, s = self.single_scale_data(i)
        return eval_single_scale_antiderivative(s, x)

    def support(self, i: int) -> tuple[float, float]:
        idx = self.index(i)
        if idx.level == 0:
            return 0.0, 1.0
        h = 2.0 ** (1 - idx.level)
        return idx.translate * h, (idx.translate + 1) * h


def eval_single_scale(s: np.ndarray, x) -> np.ndarray:
    """Evaluate cell-wise orthonormal Legendre data s (ncell, k) at points x in [0,1]."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ncell, k = s.shape[:2]
    cell = np.clip(np.floor(x * ncell).astype(int), 0, ncell - 1)
    t = x * ncell - cell
    basis = local_legendre(k, t) * np.sqrt(ncell)
    return np.einsum("ap,pa->p", basis, s[cell])


def eval_single_scale_antiderivative(s: np.ndarray, x) -> np.ndarray:
    """Evaluate the antiderivative from 0 of the cell-wise Legendre data s."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ncell, k = s.shape[:2]
    h = 1.0 / ncell
    # integral over a full cell only sees the degree-0 term
    full = np.concatenate([[0.0], np.cumsum(s[:, 0] * np.sqrt(h))])
    cell = np.clip(np.floor(x * ncell).astype(int), 0, ncell - 1)
    t = x * ncell - cell
    out = full[cell].copy()
    for a in range(k):
        c = np.zeros(a + 1)
        c[a] = 1.0
        anti = npleg.legint(c, lbnd=-1)
        # d/dx of P_a(2 t - 1) in x units: integral over [0,t] is h/2 * anti(2t-1)
        out += s[cell, a] * np.sqrt(2 * a + 1) * np.sqrt(ncell) * 0.5 * h * npleg.legval(2 * t - 1, anti)
    return out


def h1_gram(basis: WaveletBasis, level: int, npts: int | None = None) -> np.ndarray:
    """H^1_0 Gram matrix of the basis functions with level <= ``level`` by Gauss quadrature.

    Uses point values of the derivatives on the finest cells, independently of
    the two-scale transform.
    """
    basis.check_level(level)
    n = basis.size(level)
    ncell = 2**level
    q = npts or basis.order + 1
    t, w = gauss_rule(q)
    x = ((np.arange(ncell)[:, None] + t[None, :]) / ncell).ravel()
    wts = np.tile(w / ncell, ncell)
    vals = np.empty((n, x.size))
    for i in range(n):
        vals[i] = basis.derivative(i, x)
    return (vals * wts) @ vals.T


def estimate_riesz_constants(basis: WaveletBasis, level: int) -> tuple[float, float]:
    """Square roots of the extreme eigenvalues of the H^1_0 Gram matrix on the window."""
    if level < 2:
        raise ValueError("window must contain at least 2 levels")
    gram = h1_gram(basis, level)
    ev = np.linalg.eigvalsh(0.5 * (gram + gram.T))
    if ev[0] <= 1e-12 * ev[-1]:
        raise ValueError("singular Gram matrix: broken basis construction")
    return float(np.sqrt(ev[0])), float(np.sqrt(ev[-1]))
