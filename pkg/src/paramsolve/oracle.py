"""Reference Galerkin solutions on adaptively grown parametric boxes.

The spatial window is resolved exactly; the operator acts matrix-free in the
single-scale (cell-wise Legendre) representation, where every expansion term
is block diagonal.  The parametric index set grows by bulk marking of the
residual on its neighbours until the certified bound

    ||u - u_ref|| <= (||f - A u_ref|| + e_M ||u_ref||) / lambda

drops below the requested tolerance.  The residual is computed exactly on the
index set and all its neighbours, which is where it is supported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .indices import MultiIndex
from .legendre import IndexList, mj_matrix
from .problems import ProblemSpec
from .spatial import cell_mass_blocks
from .wavelets import WaveletBasis


class WindowModel:
    """The window operator sum_{j <= M} A_j (x) M_j in single-scale form.

    Coefficient arrays have shape (number of multi-indices, window size).
    """

    def __init__(self, problem: ProblemSpec, basis: WaveletBasis, M: int | None = None):
        self.problem = problem
        self.basis = basis
        self.level = basis.max_level
        self.nx = basis.size()
        if M is None:
            if problem.n_terms is None:
                raise ValueError("an expansion cutoff is needed for infinite expansions")
            M = problem.n_terms
        self.M = M
        self.tail = problem.tail_majorant(M)
        k = basis.order
        self.terms = []
        for j in range(1, M + 1):
            cells, blocks = cell_mass_blocks(problem.term(j), k, self.level)
            self.terms.append((j, cells, blocks))

    def _to_ss(self, U: np.ndarray) -> np.ndarray:
        return self.basis.to_single_scale(U.T, self.level)  # (ncell, k, n)

    def _from_ss(self, S: np.ndarray) -> np.ndarray:
        return self.basis.from_single_scale(S).T

    def apply(self, nus: list, U: np.ndarray, target: IndexList | None = None,
              grow: bool = True) -> tuple[IndexList, np.ndarray]:
        """A U with rows on ``target`` (defaults to ``nus`` grown by all neighbours)."""
        if target is None:
            target = IndexList(nus)
        mjs = [mj_matrix(j, nus, target, grow=grow) for j, _, _ in self.terms]
        S = self._to_ss(U)
        ncell, k, n = S.shape
        out = np.zeros((ncell, k, len(target)))
        base = np.array([target.pos[nu] for nu in nus]) if nus else np.zeros(0, dtype=int)
        out[:, :, base] += self.problem.mean * S
        for (j, cells, blocks), Mj in zip(self.terms, mjs):
            T = np.einsum("cab,cbn->can", blocks, S[cells])
            Mj = _pad(Mj, len(target))
            out[cells] += (Mj @ T.reshape(-1, n).T).T.reshape(cells.size, k, len(target))
        return target, self._from_ss(out)

    def residual_rows(self, nus: list, U: np.ndarray, f: np.ndarray,
                      chunk_bytes: float = 2e8) -> tuple[IndexList, np.ndarray]:
        """Row norms of f (x) e_0 - A U over ``nus`` and all neighbours, computed in row chunks."""
        target = IndexList(nus)
        mjs = [mj_matrix(j, nus, target) for j, _, _ in self.terms]
        S = self._to_ss(U)
        ncell, k, n = S.shape
        nt = len(target)
        Ts = [np.einsum("cab,cbn->can", blocks, S[cells]).reshape(-1, n).T
              for _, cells, blocks in self.terms]
        mjs = [_pad(Mj, nt) for Mj in mjs]
        fss = self.basis.to_single_scale(f[:, None], self.level)[:, :, 0]
        step = max(1, int(chunk_bytes // (8 * ncell * k)))
        norms = np.empty(nt)
        for a in range(0, nt, step):
            b = min(nt, a + step)
            out = np.zeros((ncell, k, b - a))
            if a < n:
                c = min(b, n)
                out[:, :, : c - a] -= self.problem.mean * S[:, :, a:c]
            if a == 0:
                out[:, :, 0] += fss
            for (_, cells, _), Mj, T in zip(self.terms, mjs, Ts):
                blk = Mj[a:b]
                if blk.nnz:
                    out[cells] -= (blk @ T).T.reshape(cells.size, k, b - a)
            norms[a:b] = np.linalg.norm(self._from_ss(out), axis=1)
        return target, norms

    def box_operator(self, nus: list):
        """Closure applying the Galerkin section on ``nus`` to (|nus|, nx) arrays."""
        idx = IndexList(nus)
        mjs = [mj_matrix(j, nus, idx, grow=False) for j, _, _ in self.terms]
        mean = self.problem.mean

        def op(U: np.ndarray) -> np.ndarray:
            S = self._to_ss(U)
            ncell, k, n = S.shape
            out = mean * S
            for (j, cells, blocks), Mj in zip(self.terms, mjs):
                T = np.einsum("cab,cbn->can", blocks, S[cells])
                out[cells] += (Mj @ T.reshape(-1, n).T).T.reshape(cells.size, k, n)
            return self._from_ss(out)

        return op

    def dense_apply(self, nus: list, U: np.ndarray):
        """Exact A U on the box and all neighbours: returns (multi-indices, rows)."""
        target, V = self.apply(nus, U)
        return target.items, V


def _pad(M: sp.csr_matrix, n: int) -> sp.csr_matrix:
    if M.shape[0] == n:
        return M
    M = M.tocoo()
    return sp.csr_matrix((M.data, (M.row, M.col)), shape=(n, M.shape[1]))


def cg(op, B: np.ndarray, X0: np.ndarray, tol: float, maxiter: int = 10_000) -> tuple[np.ndarray, float, int]:
    """Conjugate gradients for matrix-valued unknowns in the Frobenius inner product."""
    X = X0.copy()
    R = B - op(X)
    P = R.copy()
    rr = float(np.sum(R * R))
    it = 0
    while math.sqrt(rr) > tol and it < maxiter:
        AP = op(P)
        a = rr / float(np.sum(P * AP))
        X += a * P
        R -= a * AP
        rr_new = float(np.sum(R * R))
        P = R + (rr_new / rr) * P
        rr = rr_new
        it += 1
    return X, math.sqrt(rr), it


@dataclass
class ReferenceSolution:
    nus: list
    U: np.ndarray
    eps_ref: float
    residual: float
    tail: float
    rounds: int
    history: list = field(default_factory=list)

    def row(self, nu: MultiIndex) -> np.ndarray:
        pos = {n: i for i, n in enumerate(self.nus)}
        return self.U[pos[nu]] if nu in pos else np.zeros(self.U.shape[1])

    def error_to(self, nus: list, V: np.ndarray) -> float:
        """||u_ref - v|| for v given by rows V on ``nus``."""
        idx = IndexList(self.nus)
        for nu in nus:
            idx.add(nu)
        D = np.zeros((len(idx), self.U.shape[1]))
        D[: len(self.nus)] = self.U
        for i, nu in enumerate(nus):
            D[idx.pos[nu]] -= V[i]
        return float(np.linalg.norm(D))

    def error_to_coeffs(self, v) -> float:
        from .formats import HTuckerCoeffs

        if isinstance(v, HTuckerCoeffs):
            v = v.to_sparse()
        if hasattr(v, "to_sparse") and not hasattr(v, "mat"):
            v = v.to_sparse()
        return self.error_to(v.nus, v.mat.toarray())


def window_rhs(problem: ProblemSpec, basis: WaveletBasis) -> np.ndarray:
    from .solver import RhsSource

    return RhsSource(problem.rhs, basis).coeffs


def reference_solve(problem: ProblemSpec, basis: WaveletBasis, tol: float, M: int | None = None,
                    bulk: float = 0.7, max_indices: int = 200_000, min_indices: int = 0,
                    model: WindowModel | None = None) -> ReferenceSolution:
    """Galerkin solution on an adaptively grown index set with certified error <= tol.

    ``min_indices`` keeps enlarging the set (and tightening the inner solves)
    until at least that many multi-indices are retained.
    """
    model = model or WindowModel(problem, basis, M)
    lam = problem.r
    f = window_rhs(problem, basis)
    fnorm = float(np.linalg.norm(f))
    if model.tail * fnorm / lam > tol / 2:
        raise ValueError(f"expansion cutoff M={model.M} too small for tolerance {tol}")
    nus = [MultiIndex.zero()]
    U = np.zeros((1, model.nx))
    history = []
    rounds = 0
    while True:
        rounds += 1
        op = model.box_operator(nus)
        B = np.zeros_like(U)
        B[0] = f
        target_tol = 0.2 * tol * lam
        U, rres, _ = cg(op, B, U, target_tol)
        target, rown = model.residual_rows(nus, U, f)
        res = float(np.linalg.norm(rown))
        unorm = float(np.linalg.norm(U))
        eps_ref = (res + model.tail * unorm) / lam
        history.append({"indices": len(nus), "residual": res, "eps_ref": eps_ref})
        margin = np.arange(len(nus), len(target))
        if eps_ref <= tol and len(nus) >= min_indices:
            break
        if len(nus) >= max_indices:
            raise RuntimeError(f"index budget {max_indices} exhausted at bound {eps_ref:.3e}")
        if margin.size == 0:
            continue
        mvals = rown[margin]
        order = np.argsort(-mvals, kind="stable")
        cum = np.cumsum(mvals[order] ** 2)
        total = cum[-1]
        if total == 0:
            break
        nmark = int(np.searchsorted(cum, bulk**2 * total) + 1)
        new = [target.items[margin[i]] for i in order[:nmark]]
        nus = nus + new
        U = np.vstack([U, np.zeros((len(new), model.nx))])
    return ReferenceSolution(nus, U, eps_ref, res, model.tail, rounds, history)


# -- decay profiles -----------------------------------------------------------


def rank_profile(U: np.ndarray) -> dict:
    """Ordered contractions, singular values and entry magnitudes of a coefficient array."""
    py = np.sort(np.linalg.norm(U, axis=1))[::-1]
    px = np.sort(np.linalg.norm(U, axis=0))[::-1]
    sigma = np.linalg.svd(U, compute_uv=False)
    entries = np.sort(np.abs(U).ravel())[::-1]
    return {"pi_y": py, "pi_x": px, "sigma": sigma, "entries": entries}


def fit_decay(values: np.ndarray, n_lo: int = 1, n_hi: int | None = None,
               per_octave: int = 4) -> tuple[float, float, int]:
    """Least-squares fit of log2(value_n) against log2(n), n counted from 1.

    The fit uses points spaced evenly in log n over [n_lo, n_hi], so every
    octave carries the same weight.  Values below 1e-12 times the largest one
    count as rounding noise.  Returns (slope, rms residual, points).
    """
    v = np.asarray(values, dtype=float)
    if v.size:
        v = np.where(np.abs(v) > 1e-12 * np.max(np.abs(v)), v, 0.0)
    n_hi = v.size if n_hi is None else min(int(n_hi), v.size)
    if n_lo < 1 or n_hi <= n_lo:
        raise ValueError(f"fit window [{n_lo}, {n_hi}] too small")
    count = max(3, int(round(per_octave * math.log2(n_hi / n_lo))) + 1)
    n = np.unique(np.round(np.geomspace(n_lo, n_hi, count)).astype(int))
    y = v[n - 1]
    if n.size < 3 or np.any(y <= 0):
        raise ValueError("slope fit needs at least three values above the rounding floor")
    x, ly = np.log2(n), np.log2(y)
    coef = np.polyfit(x, ly, 1)
    res = float(np.sqrt(np.mean((np.polyval(coef, x) - ly) ** 2)))
    return float(coef[0]), res, int(n.size)


def fit_slope(values: np.ndarray, n_lo: int = 1, n_hi: int | None = None, per_octave: int = 4) -> float:
    return fit_decay(values, n_lo, n_hi, per_octave)[0]


def resolved_range(kind: str, n_terms: int) -> tuple[int, int]:
    """Index window of a decay profile not yet distorted by truncating the expansion.

    Each retained term carries roughly one leading singular value and
    contraction, and these profiles bend away from their asymptotic slope near
    half the number of terms.  Entry profiles stay resolved about sixteen times
    longer.
    """
    half = (int(n_terms) + 1) // 2
    if kind == "entries":
        return 16, 16 * half
    return 4, half
