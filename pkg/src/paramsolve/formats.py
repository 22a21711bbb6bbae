"""Coefficient formats for tensors over (spatial id) x (multi-index) and their reductions.

Three representations are provided:

* :class:`SparseCoeffs` - finitely many nonzero entries (rows are multi-indices).
* :class:`LowRankCoeffs` - truncated SVD  sum_k sigma_k Ux_k (x) Uy_k.
* :class:`HTuckerCoeffs` - hierarchical format on the linear dimension tree
  {x, 1..d}, {1, 2..d}, ..., {d-1, d} for finitely many parameters.

Coarsening keeps the largest contractions per mode; recompression truncates
(hierarchical) singular values.  Both honour ``||v - out|| <= eta``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .indices import MultiIndex
from .legendre import IndexList

FORMAT_VERSION = 1


# -- shared helpers ----------------------------------------------------------


def tail_norms(values: np.ndarray) -> np.ndarray:
    """t[n] = sqrt(sum_{i >= n} values[i]**2) for a sequence, with t[len] = 0."""
    sq = np.asarray(values, dtype=float) ** 2
    t = np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]])
    return np.sqrt(t)


def truncation_rank(sigma: np.ndarray, eta: float) -> int:
    """Smallest r with sqrt(sum_{k >= r} sigma_k**2) <= eta (sigma sorted descending)."""
    t = tail_norms(sigma)
    ok = np.nonzero(t <= eta)[0]
    return int(ok[0])


def coarsen_counts(pis: Sequence[np.ndarray], eta: float) -> tuple[list[int], list[np.ndarray], float]:
    """Minimal per-mode counts N_i of retained top contractions.

    Merges all modes into one list sorted by value (ties by mode, then rank)
    and keeps the shortest prefix whose discarded root-sum-square is <= eta.
    Returns the counts, per-mode index orders and the discarded norm.
    """
    orders, vals, modes = [], [], []
    for i, pi in enumerate(pis):
        pi = np.asarray(pi, dtype=float)
        o = np.lexsort((np.arange(pi.size), -pi))
        orders.append(o)
        vals.append(pi[o])
        modes.append(np.full(pi.size, i))
    if not orders:
        return [], [], 0.0
    allv = np.concatenate(vals)
    allm = np.concatenate(modes)
    rank = np.concatenate([np.arange(v.size) for v in vals])
    g = np.lexsort((rank, allm, -allv))
    t = tail_norms(allv[g])
    keep = int(np.nonzero(t <= eta)[0][0])
    counts = [0] * len(pis)
    for m in allm[g[:keep]]:
        counts[m] += 1
    # tails per mode, in case of ties the merged order is still a per-mode prefix
    err = float(np.sqrt(sum(np.sum(v[c:] ** 2) for v, c in zip(vals, counts))))
    return counts, orders, err


def orth_svd(X: np.ndarray, Y: np.ndarray, rtol: float = 0.0):
    """SVD of X @ Y.T from thin factors: returns (Ux, sigma, Uy, dropped_norm).

    Singular values <= rtol * sigma_1 (and exact zeros) are discarded; the
    Euclidean norm of the discarded ones is returned.
    """
    if X.shape[1] == 0 or X.shape[0] == 0 or Y.shape[0] == 0:
        return np.zeros((X.shape[0], 0)), np.zeros(0), np.zeros((Y.shape[0], 0)), 0.0
    qx, rx = np.linalg.qr(X)
    qy, ry = np.linalg.qr(Y)
    u, s, vt = np.linalg.svd(rx @ ry.T)
    cut = s > max(rtol * (s[0] if s.size else 0.0), 1e-300)
    # discard exact zeros and values below the relative floor
    r = int(np.count_nonzero(cut))
    dropped = float(np.sqrt(np.sum(s[r:] ** 2)))
    return qx @ u[:, :r], s[:r], qy @ vt[:r].T, dropped


# -- sparse ------------------------------------------------------------------


class SparseCoeffs:
    """Finitely supported coefficients; row i of ``mat`` belongs to ``nus[i]``."""

    kind = "asp"

    def __init__(self, nx: int, nus: Sequence[MultiIndex] = (), mat: sp.spmatrix | None = None):
        self.nx = int(nx)
        self.nus = list(nus)
        if mat is None:
            mat = sp.csr_matrix((len(self.nus), self.nx))
        mat = sp.csr_matrix(mat)
        if mat.shape != (len(self.nus), self.nx):
            raise ValueError(f"matrix shape {mat.shape} does not match {len(self.nus)} x {self.nx}")
        mat.eliminate_zeros()
        mat.sum_duplicates()
        self.mat = mat

    @classmethod
    def zero(cls, nx: int) -> "SparseCoeffs":
        return cls(nx)

    @classmethod
    def from_entries(cls, nx: int, entries: dict) -> "SparseCoeffs":
        """Build from {(spatial id, MultiIndex): value}."""
        idx = IndexList()
        rows, cols, vals = [], [], []
        for (i, nu), v in entries.items():
            rows.append(idx.add(nu))
            cols.append(int(i))
            vals.append(float(v))
        return cls(nx, idx.items, sp.csr_matrix((vals, (rows, cols)), shape=(len(idx), nx)))

    def entries(self) -> dict:
        coo = self.mat.tocoo()
        return {(int(c), self.nus[r]): float(v) for r, c, v in zip(coo.row, coo.col, coo.data)}

    def compact(self) -> "SparseCoeffs":
        """Drop rows without entries."""
        nnz_rows = np.nonzero(np.diff(self.mat.indptr))[0]
        if nnz_rows.size == len(self.nus):
            return self
        return SparseCoeffs(self.nx, [self.nus[i] for i in nnz_rows], self.mat[nnz_rows])

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.mat.data**2)))

    @property
    def nnz(self) -> int:
        return int(self.mat.nnz)

    def supp_x(self) -> np.ndarray:
        return np.unique(self.mat.indices)

    def supp_y(self) -> list[MultiIndex]:
        return [self.nus[i] for i in np.nonzero(np.diff(self.mat.indptr))[0]]

    def metrics(self) -> dict:
        return {"rank": None, "supp_x": int(self.supp_x().size), "supp_y": len(self.supp_y()), "dof": self.nnz}

    def scale(self, a: float) -> "SparseCoeffs":
        return SparseCoeffs(self.nx, self.nus, self.mat * a)

    def aligned(self, other: "SparseCoeffs"):
        idx = IndexList(self.nus)
        for nu in other.nus:
            idx.add(nu)
        pa = _row_embed(len(idx), range(len(self.nus)))
        pb = _row_embed(len(idx), [idx.pos[nu] for nu in other.nus])
        return idx, pa @ self.mat, pb @ other.mat

    def add(self, other: "SparseCoeffs", a: float = 1.0) -> "SparseCoeffs":
        _check_kind(self, other)
        idx, x, y = self.aligned(other)
        return SparseCoeffs(self.nx, idx.items, x + a * y)

    def __add__(self, other):
        return self.add(other)

    def __sub__(self, other):
        return self.add(other, -1.0)

    def densify(self, box: Sequence[MultiIndex], nx: int | None = None) -> np.ndarray:
        nx = self.nx if nx is None else nx
        pos = {nu: i for i, nu in enumerate(box)}
        out = np.zeros((len(box), nx))
        coo = self.mat.tocoo()
        for r, c, v in zip(coo.row, coo.col, coo.data):
            nu = self.nus[r]
            if nu not in pos or c >= nx:
                raise ValueError("box does not cover the support")
            out[pos[nu], c] += v
        return out

    def contractions(self) -> tuple[np.ndarray, np.ndarray]:
        """(pi_x over all nx ids, pi_y over self.nus)."""
        sq = self.mat.multiply(self.mat)
        px = np.sqrt(np.asarray(sq.sum(axis=0)).ravel())
        py = np.sqrt(np.asarray(sq.sum(axis=1)).ravel())
        return px, py

    def to_lowrank(self) -> "LowRankCoeffs":
        v = self.compact()
        if v.nnz == 0:
            return LowRankCoeffs.zero(self.nx)
        sx = v.supp_x()
        dense = v.mat[:, sx].toarray().T  # (|sx|, n_nu)
        u, s, vt = np.linalg.svd(dense, full_matrices=False)
        r = int(np.count_nonzero(s > 0))
        return LowRankCoeffs(self.nx, sx, u[:, :r], v.nus, vt[:r].T, s[:r])

    def copy(self) -> "SparseCoeffs":
        return SparseCoeffs(self.nx, self.nus, self.mat.copy())


def _row_embed(n: int, positions) -> sp.csr_matrix:
    positions = np.asarray(list(positions), dtype=int)
    return sp.csr_matrix((np.ones(positions.size), (positions, np.arange(positions.size))),
                         shape=(n, positions.size))


def _check_kind(a, b):
    if type(a) is not type(b):
        raise TypeError(f"format mismatch: {type(a).__name__} vs {type(b).__name__}")


def sparse_coarsen(v: SparseCoeffs, eta: float) -> SparseCoeffs:
    """Best N-term approximation: drop the smallest entries with root-sum-square <= eta."""
    if eta <= 0 or v.nnz == 0:
        return v
    data = v.mat.data
    order = np.lexsort((np.arange(data.size), -np.abs(data)))
    t = tail_norms(np.abs(data[order]))
    keep = int(np.nonzero(t <= eta)[0][0])
    mask = np.zeros(data.size, dtype=bool)
    mask[order[:keep]] = True
    m = v.mat.copy()
    m.data = np.where(mask, m.data, 0.0)
    return SparseCoeffs(v.nx, v.nus, m).compact()


def sparse_coarsen_product(v: SparseCoeffs, eta: float) -> SparseCoeffs:
    """Restriction to a product set of top contractions (two-mode rule)."""
    if eta <= 0 or v.nnz == 0:
        return v
    px, py = v.contractions()
    (nx_keep, ny_keep), (ox, oy), _ = coarsen_counts([px, py], eta)
    keep_x = np.zeros(v.nx, dtype=bool)
    keep_x[ox[:nx_keep]] = True
    rows = np.sort(oy[:ny_keep])
    m = v.mat[rows][:, np.nonzero(keep_x)[0]]
    full = sp.csr_matrix((m.tocoo().data, (m.tocoo().row, np.nonzero(keep_x)[0][m.tocoo().col])),
                         shape=(rows.size, v.nx))
    return SparseCoeffs(v.nx, [v.nus[i] for i in rows], full).compact()


# -- low rank -----------------------------------------------------------------


@dataclass
class LowRankCoeffs:
    """sum_k sigma_k Ux[:, k] (x) Uy[:, k] with orthonormal frames.

    ``sx`` lists the spatial ids of the rows of ``Ux``; ``nus`` the
    multi-indices of the rows of ``Uy``.
    """

    nx: int
    sx: np.ndarray
    Ux: np.ndarray
    nus: list
    Uy: np.ndarray
    sigma: np.ndarray

    kind = "lr"

    def __post_init__(self):
        self.sx = np.asarray(self.sx, dtype=np.int64)
        self.nus = list(self.nus)
        r = self.sigma.size
        if self.Ux.shape != (self.sx.size, r) or self.Uy.shape != (len(self.nus), r):
            raise ValueError("inconsistent low-rank factor shapes")

    @classmethod
    def zero(cls, nx: int) -> "LowRankCoeffs":
        return cls(nx, np.zeros(0, dtype=np.int64), np.zeros((0, 0)), [], np.zeros((0, 0)), np.zeros(0))

    @classmethod
    def from_factors(cls, nx: int, sx, X: np.ndarray, nus, Y: np.ndarray, rtol: float = 0.0):
        """Canonical SVD form of X @ Y.T; returns (coeffs, discarded norm)."""
        sx = np.asarray(sx, dtype=np.int64)
        nus = list(nus)
        # restrict to rows that carry data
        rx = np.nonzero(np.any(X != 0, axis=1))[0] if X.size else np.zeros(0, dtype=int)
        ry = np.nonzero(np.any(Y != 0, axis=1))[0] if Y.size else np.zeros(0, dtype=int)
        X, sx = X[rx], sx[rx]
        Y, nus = Y[ry], [nus[i] for i in ry]
        ux, s, uy, dropped = orth_svd(X, Y, rtol)
        if s.size == 0:
            return cls.zero(nx), dropped
        out = cls(nx, sx, ux, nus, uy, s)
        return out.trim(), dropped

    @property
    def rank(self) -> int:
        return int(self.sigma.size)

    def trim(self) -> "LowRankCoeffs":
        """Drop rows of the frames that vanish identically."""
        rx = np.nonzero(np.any(self.Ux != 0, axis=1))[0]
        ry = np.nonzero(np.any(self.Uy != 0, axis=1))[0]
        if rx.size == self.sx.size and ry.size == len(self.nus):
            return self
        return LowRankCoeffs(self.nx, self.sx[rx], self.Ux[rx], [self.nus[i] for i in ry],
                             self.Uy[ry], self.sigma)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.sigma**2)))

    def metrics(self) -> dict:
        return {"rank": self.rank, "supp_x": int(self.sx.size), "supp_y": len(self.nus),
                "dof": int(self.rank * (self.sx.size + len(self.nus) + 1))}

    def scale(self, a: float) -> "LowRankCoeffs":
        if a == 0:
            return LowRankCoeffs.zero(self.nx)
        return LowRankCoeffs(self.nx, self.sx, self.Ux * np.sign(a), self.nus, self.Uy, self.sigma * abs(a))

    def factors(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) with v = X @ Y.T on (sx, nus)."""
        return self.Ux * self.sigma, self.Uy

    def add(self, other: "LowRankCoeffs", a: float = 1.0) -> "LowRankCoeffs":
        """Exact sum, re-orthogonalized (ranks add at most)."""
        _check_kind(self, other)
        sx = np.union1d(self.sx, other.sx)
        idx = IndexList(self.nus)
        for nu in other.nus:
            idx.add(nu)
        X = np.zeros((sx.size, self.rank + other.rank))
        Y = np.zeros((len(idx), self.rank + other.rank))
        X[np.searchsorted(sx, self.sx), : self.rank] = self.Ux * self.sigma
        X[np.searchsorted(sx, other.sx), self.rank :] = other.Ux * other.sigma * a
        Y[: len(self.nus), : self.rank] = self.Uy
        Y[[idx.pos[nu] for nu in other.nus], self.rank :] = other.Uy
        out, _ = LowRankCoeffs.from_factors(self.nx, sx, X, idx.items, Y)
        return out

    def __add__(self, other):
        return self.add(other)

    def __sub__(self, other):
        return self.add(other, -1.0)

    def densify(self, box: Sequence[MultiIndex], nx: int | None = None) -> np.ndarray:
        nx = self.nx if nx is None else nx
        pos = {nu: i for i, nu in enumerate(box)}
        if any(nu not in pos for nu in self.nus) or (self.sx.size and self.sx.max() >= nx):
            raise ValueError("box does not cover the support")
        out = np.zeros((len(box), nx))
        if self.rank:
            rows = [pos[nu] for nu in self.nus]
            out[np.ix_(rows, self.sx)] = (self.Uy * self.sigma) @ self.Ux.T
        return out

    def contractions(self) -> tuple[np.ndarray, np.ndarray]:
        """(pi_x over sx, pi_y over nus)."""
        return (np.sqrt(np.sum((self.Ux * self.sigma) ** 2, axis=1)),
                np.sqrt(np.sum((self.Uy * self.sigma) ** 2, axis=1)))

    def restrict(self, keep_x: np.ndarray | None = None, keep_y: np.ndarray | None = None) -> "LowRankCoeffs":
        """Restriction to row subsets (positions into sx / nus), re-orthogonalized."""
        X, Y = self.factors()
        sx, nus = self.sx, self.nus
        if keep_x is not None:
            keep_x = np.sort(np.asarray(keep_x, dtype=int))
            X, sx = X[keep_x], sx[keep_x]
        if keep_y is not None:
            keep_y = np.sort(np.asarray(keep_y, dtype=int))
            Y, nus = Y[keep_y], [nus[i] for i in keep_y]
        out, _ = LowRankCoeffs.from_factors(self.nx, sx, X, nus, Y)
        return out

    def to_sparse(self) -> SparseCoeffs:
        dense = (self.Uy * self.sigma) @ self.Ux.T if self.rank else np.zeros((len(self.nus), 0))
        m = sp.csr_matrix((len(self.nus), self.nx))
        if self.rank:
            coo = sp.coo_matrix(dense)
            m = sp.csr_matrix((coo.data, (coo.row, self.sx[coo.col])), shape=(len(self.nus), self.nx))
        return SparseCoeffs(self.nx, self.nus, m).compact()

    def copy(self) -> "LowRankCoeffs":
        return LowRankCoeffs(self.nx, self.sx.copy(), self.Ux.copy(), list(self.nus), self.Uy.copy(),
                             self.sigma.copy())


def svd_truncate(v: LowRankCoeffs, eta: float) -> LowRankCoeffs:
    """Smallest rank whose discarded singular values have norm <= eta."""
    if eta <= 0 or v.rank == 0:
        return v
    r = truncation_rank(v.sigma, eta)
    if r == v.rank:
        return v
    return LowRankCoeffs(v.nx, v.sx, v.Ux[:, :r], v.nus, v.Uy[:, :r], v.sigma[:r]).trim()


def lowrank_coarsen(v: LowRankCoeffs, eta: float) -> LowRankCoeffs:
    """Restriction to the product of top contractions in both modes."""
    if eta <= 0 or v.rank == 0:
        return v
    px, py = v.contractions()
    (cx, cy), (ox, oy), _ = coarsen_counts([px, py], eta)
    if cx == px.size and cy == py.size:
        return v
    return v.restrict(ox[:cx], oy[:cy])


def coarsen_y(v: LowRankCoeffs, eta: float) -> LowRankCoeffs:
    """Restriction of the parametric mode only (spatial support is kept)."""
    if eta <= 0 or v.rank == 0:
        return v
    _, py = v.contractions()
    (cy,), (oy,), _ = coarsen_counts([py], eta)
    if cy == py.size:
        return v
    out = v.restrict(None, oy[:cy])
    if out.rank and out.sx.size != v.sx.size:
        # keep the spatial index set even where the restricted frame vanishes
        Ux = np.zeros((v.sx.size, out.rank))
        Ux[np.searchsorted(v.sx, out.sx)] = out.Ux
        out = LowRankCoeffs(v.nx, v.sx, Ux, out.nus, out.Uy, out.sigma)
    return out


# -- hierarchical -------------------------------------------------------------


class HTuckerCoeffs:
    """Hierarchical tensor on the linear tree with leaves x, 1, ..., d.

    Stored as orthonormal leaf frames ``frames[i]`` (rows ``supports[i]``) and a
    chain of cores ``cores[t]`` of shape (s_t, r_t, s_{t+1}) with s_0 = s_D = 1,
    D = d + 1.  Entry (i_0, ..., i_d) equals
    sum frames[0][i_0, k_0] ... frames[d][i_d, k_d] * cores[0][:, k_0, :] ... cores[d][:, k_d, :].
    Mode 0 is the spatial mode (supports are spatial ids), modes 1..d are the
    Legendre degrees of the parameters (supports 0..n_i-1).
    """

    kind = "ht"

    def __init__(self, nx: int, supports: list, frames: list, cores: list):
        if len(supports) != len(frames) or len(frames) != len(cores) or len(frames) < 2:
            raise ValueError("need matching supports, frames and cores for >= 2 modes")
        self.nx = int(nx)
        self.supports = [np.asarray(s, dtype=np.int64) for s in supports]
        self.frames = [np.asarray(f, dtype=float) for f in frames]
        self.cores = [np.asarray(c, dtype=float) for c in cores]
        for t, (s, f, c) in enumerate(zip(self.supports, self.frames, self.cores)):
            if f.shape[0] != s.size or f.shape[1] != c.shape[1]:
                raise ValueError(f"mode {t}: frame {f.shape} vs support {s.size} / core {c.shape}")
        for a, b in zip(self.cores, self.cores[1:]):
            if a.shape[2] != b.shape[0]:
                raise ValueError("core chain ranks do not match")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise ValueError("outer core ranks must be 1")

    @property
    def d(self) -> int:
        return len(self.frames) - 1

    @classmethod
    def zero(cls, nx: int, d: int) -> "HTuckerCoeffs":
        sup = [np.zeros(0, dtype=np.int64)] * (d + 1)
        fr = [np.zeros((0, 1))] * (d + 1)
        cores = [np.zeros((1, 1, 1)) for _ in range(d + 1)]
        return cls(nx, sup, fr, cores)

    @classmethod
    def elementary(cls, nx: int, supports: list, vectors: list, scale: float = 1.0) -> "HTuckerCoeffs":
        """scale * v_0 (x) v_1 (x) ... (x) v_d."""
        frames, cores = [], []
        s = scale
        for v in vectors:
            v = np.asarray(v, dtype=float)
            n = np.linalg.norm(v)
            s *= n
            frames.append((v / n if n else v)[:, None])
            cores.append(np.ones((1, 1, 1)))
        cores[0] = cores[0] * s
        return cls(nx, supports, frames, cores)

    @classmethod
    def from_dense(cls, nx: int, supports: list, T: np.ndarray) -> "HTuckerCoeffs":
        """Exact hierarchical SVD of a dense array over the given supports."""
        D = T.ndim
        frames = []
        core = T
        for i in range(D):
            mat = np.moveaxis(T, i, 0).reshape(T.shape[i], -1)
            u, s, _ = np.linalg.svd(mat, full_matrices=False)
            r = max(int(np.count_nonzero(s > s[0] * 1e-15)) if s.size and s[0] > 0 else 1, 1)
            frames.append(u[:, :r])
            core = np.moveaxis(np.tensordot(u[:, :r].T, np.moveaxis(core, i, 0), axes=1), 0, i)
        cores = _tt_from_full(core)
        return cls(nx, supports, frames, cores)

    def ranks(self) -> dict:
        """Leaf ranks and interface ranks of the chain."""
        return {"leaf": [f.shape[1] for f in self.frames],
                "interface": [c.shape[2] for c in self.cores[:-1]]}

    def rank_tuple(self) -> tuple[int, ...]:
        r = self.ranks()
        return tuple(r["leaf"]) + tuple(r["interface"][1:-1])

    def transfer_tensors(self) -> list[np.ndarray]:
        """Transfer tensors of the linear tree: the root matrix, then order-3 tensors."""
        cores = self.cores
        if self.d == 1:
            return [np.einsum("ak,kb->ab", cores[0][0], cores[1][:, :, 0])]
        out = [cores[0][0]]
        out.extend(cores[1:-2])
        out.append(np.einsum("akb,bl->akl", cores[-2], cores[-1][:, :, 0]))
        return out

    def core_full(self) -> np.ndarray:
        full = self.cores[0]
        for c in self.cores[1:]:
            full = np.tensordot(full, c, axes=(full.ndim - 1, 0))
        return full.reshape(full.shape[1:-1])

    def densify(self, boxes: list | None = None) -> np.ndarray:
        """Dense array over ``boxes`` (per-mode index lists; default: x window and supports)."""
        if boxes is None:
            boxes = [np.arange(self.nx)] + [np.arange(s.max() + 1 if s.size else 1) for s in self.supports[1:]]
        T = self.core_full()
        for i, (box, sup, fr) in enumerate(zip(boxes, self.supports, self.frames)):
            box = np.asarray(box)
            pos = {int(b): k for k, b in enumerate(box)}
            if any(int(s) not in pos for s in sup):
                raise ValueError("box does not cover the support")
            full_fr = np.zeros((box.size, fr.shape[1]))
            full_fr[[pos[int(s)] for s in sup]] = fr
            T = np.moveaxis(np.tensordot(full_fr, np.moveaxis(T, i, 0), axes=1), 0, i)
        return T

    def norm(self) -> float:
        cores = _left_orth(self.cores, self.frames_orthonormal())
        return float(np.linalg.norm(cores[-1]))

    def frames_orthonormal(self) -> bool:
        return all(np.allclose(f.T @ f, np.eye(f.shape[1]), atol=1e-10) for f in self.frames)

    def orthonormalize(self) -> "HTuckerCoeffs":
        """QR of every frame, factors absorbed into the cores."""
        frames, cores = [], []
        for f, c in zip(self.frames, self.cores):
            if f.shape[0] == 0:
                frames.append(np.zeros((0, 1)))
                cores.append(np.zeros((c.shape[0], 1, c.shape[2])))
                continue
            q, r = np.linalg.qr(f)
            frames.append(q)
            cores.append(np.einsum("ak,bkc->bac", r, c))
        return HTuckerCoeffs(self.nx, self.supports, frames, cores)

    def mode_matrices(self) -> list[np.ndarray]:
        """Per leaf i, the core matricization C_i (r_i x rest) in an orthonormal gauge."""
        cores = _right_orth(self.cores)
        out = []
        for i in range(len(cores)):
            c = cores[i]
            out.append(np.moveaxis(c, 1, 0).reshape(c.shape[1], -1))
            if i + 1 < len(cores):
                s0, r, s1 = c.shape
                q, rr = np.linalg.qr(c.reshape(s0 * r, s1))
                cores[i] = q.reshape(s0, r, q.shape[1])
                cores[i + 1] = np.tensordot(rr, cores[i + 1], axes=1)
        return out

    def contractions(self) -> list[np.ndarray]:
        """pi^(i) over supports[i] for every mode."""
        out = []
        for f, C in zip(self.frames, self.mode_matrices()):
            out.append(np.linalg.norm(f @ C, axis=1) if f.shape[0] else np.zeros(0))
        return out

    def metrics(self) -> dict:
        leaf = [f.shape[1] for f in self.frames]
        dof = sum(f.size for f in self.frames) + sum(c.size for c in self.cores)
        return {"rank": max(leaf + [c.shape[2] for c in self.cores[:-1]]),
                "ranks": self.rank_tuple(),
                "supp_x": int(self.supports[0].size),
                "supp_y": int(np.prod([max(s.size, 1) for s in self.supports[1:]])),
                "supp_modes": [int(s.size) for s in self.supports],
                "dof": int(dof)}

    def scale(self, a: float) -> "HTuckerCoeffs":
        cores = list(self.cores)
        cores[0] = cores[0] * a
        return HTuckerCoeffs(self.nx, self.supports, self.frames, cores)

    def add(self, other: "HTuckerCoeffs", a: float = 1.0) -> "HTuckerCoeffs":
        """Exact sum with concatenated frames (ranks add), frames re-orthonormalized."""
        return ht_sum([self, other], [1.0, a])

    def __add__(self, other):
        return self.add(other)

    def __sub__(self, other):
        return self.add(other, -1.0)

    def restrict(self, keep: list) -> "HTuckerCoeffs":
        """Restrict every mode to the given row positions (None keeps a mode)."""
        sup, fr = [], []
        for s, f, k in zip(self.supports, self.frames, keep):
            if k is None:
                sup.append(s)
                fr.append(f)
            else:
                k = np.sort(np.asarray(k, dtype=int))
                sup.append(s[k])
                fr.append(f[k])
        return HTuckerCoeffs(self.nx, sup, fr, self.cores).orthonormalize()

    def copy(self) -> "HTuckerCoeffs":
        return HTuckerCoeffs(self.nx, [s.copy() for s in self.supports], [f.copy() for f in self.frames],
                             [c.copy() for c in self.cores])

    def to_sparse(self) -> SparseCoeffs:
        boxes = [np.arange(self.nx)] + [np.arange(s.max() + 1 if s.size else 1) for s in self.supports[1:]]
        T = self.densify(boxes)
        mat = T.reshape(self.nx, -1).T
        nus = [MultiIndex.from_dense(ix) for ix in np.ndindex(*T.shape[1:])]
        return SparseCoeffs(self.nx, nus, sp.csr_matrix(mat)).compact()


def _tt_from_full(core: np.ndarray) -> list[np.ndarray]:
    D = core.ndim
    cores = []
    left = 1
    rest = core.reshape(1, *core.shape)
    for i in range(D - 1):
        n = core.shape[i]
        mat = rest.reshape(left * n, -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r = max(int(np.count_nonzero(s > (s[0] if s.size else 0) * 1e-15)), 1) if s.size and s[0] > 0 else 1
        cores.append(u[:, :r].reshape(left, n, r))
        rest = (s[:r, None] * vt[:r])
        left = r
    cores.append(rest.reshape(left, core.shape[-1], 1))
    return cores


def _left_orth(cores: list, frames_ok: bool = True) -> list:
    cores = [c.copy() for c in cores]
    for i in range(len(cores) - 1):
        s0, r, s1 = cores[i].shape
        q, rr = np.linalg.qr(cores[i].reshape(s0 * r, s1))
        cores[i] = q.reshape(s0, r, q.shape[1])
        cores[i + 1] = np.tensordot(rr, cores[i + 1], axes=1)
    return cores


def _right_orth(cores: list) -> list:
    cores = [c.copy() for c in cores]
    for i in range(len(cores) - 1, 0, -1):
        s0, r, s1 = cores[i].shape
        q, rr = np.linalg.qr(cores[i].reshape(s0, r * s1).T)
        cores[i] = q.T.reshape(q.shape[1], r, s1)
        cores[i - 1] = np.tensordot(cores[i - 1], rr.T, axes=1)
    return cores


def ht_sum(terms: list[HTuckerCoeffs], coeffs: Sequence[float]) -> HTuckerCoeffs:
    """Exact linear combination; frames concatenated, cores block-diagonal."""
    terms = [t for t in terms]
    D = len(terms[0].frames)
    nx = terms[0].nx
    supports, frames = [], []
    for i in range(D):
        sup = np.unique(np.concatenate([t.supports[i] for t in terms]))
        cols = sum(t.frames[i].shape[1] for t in terms)
        F = np.zeros((sup.size, cols))
        c0 = 0
        for t in terms:
            f = t.frames[i]
            F[np.searchsorted(sup, t.supports[i]), c0 : c0 + f.shape[1]] = f
            c0 += f.shape[1]
        supports.append(sup)
        frames.append(F)
    cores = []
    for i in range(D):
        s0 = 1 if i == 0 else sum(t.cores[i].shape[0] for t in terms)
        s1 = 1 if i == D - 1 else sum(t.cores[i].shape[2] for t in terms)
        r = sum(t.cores[i].shape[1] for t in terms)
        C = np.zeros((s0, r, s1))
        a = b = c = 0
        for t, w in zip(terms, coeffs):
            blk = t.cores[i] * (w if i == 0 else 1.0)
            p, q, s = blk.shape
            ra = 0 if i == 0 else a
            rc = 0 if i == D - 1 else c
            C[ra : ra + p, b : b + q, rc : rc + s] = blk
            a += p
            b += q
            c += s
        cores.append(C)
    return HTuckerCoeffs(nx, supports, frames, cores).orthonormalize().drop_empty()


def _drop_empty(self: HTuckerCoeffs) -> HTuckerCoeffs:
    """Remove frame rows that vanish identically."""
    sup, fr = [], []
    for s, f in zip(self.supports, self.frames):
        keep = np.any(f != 0, axis=1)
        sup.append(s[keep])
        fr.append(f[keep])
    return HTuckerCoeffs(self.nx, sup, fr, self.cores)


HTuckerCoeffs.drop_empty = _drop_empty


def hsvd_truncate(v: HTuckerCoeffs, eta: float, return_error: bool = False):
    """Hierarchical SVD truncation with error <= eta.

    The squared budget eta**2 is split evenly over the 2D - 3 distinct
    matricizations of the tree (D = d + 1 leaves): first every leaf is
    truncated with projections computed from the same tensor, then the
    interior edges {t, ..., d} are truncated in a right-to-left sweep.
    """
    v = v.orthonormalize()
    D = len(v.frames)
    n_trunc = 1 if D == 2 else 2 * D - 3
    b = eta / np.sqrt(n_trunc) if eta > 0 else 0.0
    err_sq = 0.0
    mats = v.mode_matrices()
    frames = list(v.frames)
    cores = list(v.cores)
    leaf_budget = [b] * D
    if D == 2:
        leaf_budget = [b, 0.0]
    for i in range(D):
        C = mats[i]
        u, s, _ = np.linalg.svd(C, full_matrices=False)
        r = truncation_rank(s, leaf_budget[i]) if leaf_budget[i] > 0 else int(np.count_nonzero(s > s[0] * 1e-14)) if s.size and s[0] > 0 else 0
        r = max(r, 1) if s.size and s[0] > 0 else max(r, 0)
        err_sq += float(np.sum(s[r:] ** 2))
        P = u[:, :r]
        frames[i] = frames[i] @ P
        cores[i] = np.einsum("ak,bac->bkc", P, cores[i])
    # interior edges: right-to-left sweep on a left-orthogonal chain
    cores = _left_orth(cores)
    for t in range(D - 1, 0, -1):
        s0, r, s1 = cores[t].shape
        mat = cores[t].reshape(s0, r * s1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        interior = 2 <= t <= D - 2
        if interior and b > 0:
            k = truncation_rank(s, b)
        else:
            k = int(np.count_nonzero(s > (s[0] if s.size else 0) * 1e-14))
        k = max(k, 1)
        err_sq += float(np.sum(s[k:] ** 2))
        cores[t] = vt[:k].reshape(k, r, s1)
        cores[t - 1] = np.tensordot(cores[t - 1], u[:, :k] * s[:k], axes=1)
    out = HTuckerCoeffs(v.nx, v.supports, frames, cores).drop_empty()
    if return_error:
        return out, float(np.sqrt(err_sq))
    return out


def ht_coarsen(v: HTuckerCoeffs, eta: float) -> HTuckerCoeffs:
    """Restriction to the product of top contractions over all modes."""
    if eta <= 0:
        return v
    pis = v.contractions()
    counts, orders, _ = coarsen_counts(pis, eta)
    if all(c == p.size for c, p in zip(counts, pis)):
        return v
    if any(c == 0 for c in counts):
        return HTuckerCoeffs.zero(v.nx, v.d)
    return v.restrict([o[:c] for o, c in zip(orders, counts)]).drop_empty()


# -- dispatch -----------------------------------------------------------------


def recompress(v, eta: float):
    if isinstance(v, LowRankCoeffs):
        return svd_truncate(v, eta)
    if isinstance(v, HTuckerCoeffs):
        return hsvd_truncate(v, eta)
    return v


def coarsen(v, eta: float):
    if isinstance(v, SparseCoeffs):
        return sparse_coarsen(v, eta)
    if isinstance(v, LowRankCoeffs):
        return lowrank_coarsen(v, eta)
    if isinstance(v, HTuckerCoeffs):
        return ht_coarsen(v, eta)
    raise TypeError(type(v).__name__)


def contractions(v):
    return v.contractions()


def norm(v) -> float:
    return v.norm()


# -- serialization -----------------------------------------------------------


def save(v, path):
    """Write a self-describing container (npz with a JSON header)."""
    header = {"version": FORMAT_VERSION, "format": v.kind, "nx": v.nx}
    arrays = {}
    if isinstance(v, SparseCoeffs):
        coo = v.mat.tocoo()
        header["nus"] = [nu.to_text() for nu in v.nus]
        arrays.update(row=coo.row, col=coo.col, val=coo.data)
    elif isinstance(v, LowRankCoeffs):
        header["nus"] = [nu.to_text() for nu in v.nus]
        arrays.update(sx=v.sx, Ux=v.Ux, Uy=v.Uy, sigma=v.sigma)
    elif isinstance(v, HTuckerCoeffs):
        header["modes"] = len(v.frames)
        for i, (s, f, c) in enumerate(zip(v.supports, v.frames, v.cores)):
            arrays[f"support{i}"] = s
            arrays[f"frame{i}"] = f
            arrays[f"core{i}"] = c
    else:
        raise TypeError(type(v).__name__)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load(path):
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported container version {header.get('version')}")
        kind, nx = header["format"], header["nx"]
        if kind == "asp":
            nus = [MultiIndex.from_text(t) for t in header["nus"]]
            m = sp.csr_matrix((z["val"], (z["row"], z["col"])), shape=(len(nus), nx))
            return SparseCoeffs(nx, nus, m)
        if kind == "lr":
            nus = [MultiIndex.from_text(t) for t in header["nus"]]
            return LowRankCoeffs(nx, z["sx"], z["Ux"], nus, z["Uy"], z["sigma"])
        if kind == "ht":
            D = header["modes"]
            return HTuckerCoeffs(nx, [z[f"support{i}"] for i in range(D)], [z[f"frame{i}"] for i in range(D)],
                                 [z[f"core{i}"] for i in range(D)])
    raise ValueError(f"unknown format tag {kind!r}")
