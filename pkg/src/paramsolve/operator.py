"""The parametric operator sum_j A_j (x) M_j and its adaptive application.

Every ``apply_*`` routine returns ``(w, bound)`` where ``bound`` is a certified
upper bound for ||A v - w|| computed from the tail majorant of the expansion,
the certified compression errors of the spatial sections and the norm bound
of the operator.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import zeta

from .formats import (
    HTuckerCoeffs,
    LowRankCoeffs,
    SparseCoeffs,
    coarsen_y,
    ht_sum,
    sparse_coarsen,
    svd_truncate,
)
from .legendre import IndexList, mj_matrix, mj_stack, recurrence_coeff
from .problems import ProblemSpec
from .spatial import (
    CompressedMatrix,
    ExpansionFunction,
    assemble_window,
    compress,
    full_depth,
    operator_norm_bound,
)
from .wavelets import WaveletBasis


class BudgetExhausted(RuntimeError):
    """The requested accuracy needs more expansion terms or levels than allowed."""


@dataclass
class WorkCounters:
    """Multiply-accumulate proxies per phase."""

    preprocess: int = 0
    gramians: int = 0
    mj_sweeps: int = 0
    spatial: int = 0

    def reset(self):
        self.preprocess = self.gramians = self.mj_sweeps = self.spatial = 0

    @property
    def total(self) -> int:
        return self.preprocess + self.gramians + self.mj_sweeps + self.spatial

    def as_dict(self) -> dict:
        return {"preprocess": self.preprocess, "gramians": self.gramians,
                "mj_sweeps": self.mj_sweeps, "spatial": self.spatial, "total": self.total}


@dataclass
class BlockRecord:
    """Diagnostics of one block of an APPLY call."""

    p: int
    q: int
    norm: float
    M: int
    eta_block: float
    depth: int
    bound: float


@dataclass
class ApplyDiagnostics:
    eta: float
    pre_error: float = 0.0
    blocks: list = field(default_factory=list)
    bound: float = 0.0

    def to_json(self) -> str:
        return json.dumps({"eta": self.eta, "pre_error": self.pre_error, "bound": self.bound,
                           "blocks": [b.__dict__ for b in self.blocks]}, sort_keys=True)


class CompressedOperator:
    """Windowed sections A_j of the stiffness operator with certified compression.

    Parameters
    ----------
    problem : ProblemSpec
    basis : WaveletBasis
        Fixes the spatial window (levels <= basis.max_level).
    gamma : float, optional
        Decay parameter of the level cutoff; defaults to the basis order.
    m_max : int, optional
        Largest expansion index the operator may use.  Defaults to the number
        of terms for finite expansions and 1023 otherwise.
    weight_exponent : float
        Exponent a of the block weights ((1+p)(1+q))**-a of the low-rank APPLY.
    """

    def __init__(self, problem: ProblemSpec, basis: WaveletBasis, gamma: float | None = None,
                 m_max: int | None = None, weight_exponent: float = 2.0, prune: float = 1e-15):
        self.problem = problem
        self.basis = basis
        self.level = basis.max_level
        self.nx = basis.size()
        self.levels = basis.levels()
        self.gamma = float(gamma if gamma is not None else basis.order)
        if problem.n_terms is not None:
            self.m_max = problem.n_terms if m_max is None else min(m_max, problem.n_terms)
        else:
            self.m_max = 1023 if m_max is None else int(m_max)
        self.weight_exponent = weight_exponent
        self.prune = prune
        # the derivatives of the basis are orthonormal, so c_psi = C_psi = 1
        self.riesz = (1.0, 1.0)
        c, C = self.riesz
        self.lambda_lb = problem.r * c**2
        self.norm_ub = problem.R * C**2
        self._full: dict[int, tuple[sp.csr_matrix, float]] = {}
        self._comp: dict[tuple[int, int], CompressedMatrix] = {}
        self._curves: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._shell: dict[tuple[int, int], float] = {}
        self._colnnz: dict[tuple[int, int], np.ndarray] = {}
        self._depth: dict[int, int] = {}
        self._stack: dict[int, tuple] = {}
        self.counters = WorkCounters()
        self.last_diagnostics: ApplyDiagnostics | None = None

    # -- sections -------------------------------------------------------------

    def theta(self, j: int) -> ExpansionFunction:
        if j == 0:
            return self.problem.mean_function()
        if j > self.m_max:
            raise BudgetExhausted(f"term {j} beyond the expansion cap {self.m_max}")
        return self.problem.term(j)

    def mu_level(self, j: int) -> int:
        return 0 if j == 0 else self.theta(j).mu_level

    def full(self, j: int) -> tuple[sp.csr_matrix, float]:
        """Windowed A_j and the norm of pruned round-off entries."""
        out = self._full.get(j)
        if out is None:
            if j == 0:
                out = (self.problem.mean * sp.identity(self.nx, format="csr"), 0.0)
            else:
                out = assemble_window(self.basis, self.theta(j), self.level, self.prune)
            self._full[j] = out
        return out

    def depth_max(self, j: int) -> int:
        if j == 0:
            return 1
        out = self._depth.get(j)
        if out is None:
            out = self._depth[j] = full_depth(self.level, self.mu_level(j), self.gamma)
        return out

    def max_depth_upto(self, M: int) -> int:
        return max(self.depth_max(j) for j in range(M + 1))

    def compressed(self, j: int, n: int) -> CompressedMatrix:
        n = max(int(n), 0)
        n = min(n, self.depth_max(j))
        key = (j, n)
        out = self._comp.get(key)
        if out is None:
            A, dropped = self.full(j)
            if j == 0:
                mat = A if n >= 1 else sp.csr_matrix(A.shape)
                out = CompressedMatrix(0, n, mat, 0.0 if n >= 1 else abs(self.problem.mean), self.gamma, 0)
            else:
                out = compress(A, self.levels, self.mu_level(j), n, self.gamma, dropped, j)
            self._comp[key] = out
        return out

    def _col_nnz(self, j: int, n: int) -> np.ndarray:
        cm = self.compressed(j, n)
        out = self._colnnz.get((j, cm.n))
        if out is None:
            out = np.bincount(cm.matrix.indices, minlength=self.nx)
            self._colnnz[(j, cm.n)] = out
        return out

    def stacked(self, M: int, m: int) -> tuple[sp.csr_matrix, np.ndarray]:
        """Vertical stack of the compressed sections j = 0..M at depth m, with column nnz."""
        have = self._stack.get(m)
        if have is None or have[0] < M:
            mats = [self.compressed(j, m).matrix for j in range(M + 1)]
            S = sp.vstack(mats, format="csr")
            cnz = np.array([np.bincount(A.indices, minlength=self.nx) for A in mats]).cumsum(axis=0)
            have = (M, S, cnz)
            self._stack[m] = have
        _, S, cnz = have
        if S.shape[0] != (M + 1) * self.nx:
            S = S[: (M + 1) * self.nx]
        return S, cnz[M]

    def est_err(self, j: int, n: int) -> float:
        return self.compressed(j, n).est_err

    def error_curve(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(est_err, nnz) for depths 0..depth_max(j)."""
        out = self._curves.get(j)
        if out is None:
            ns = range(self.depth_max(j) + 1)
            cms = [self.compressed(j, n) for n in ns]
            out = (np.array([c.est_err for c in cms]), np.array([c.nnz for c in cms]))
            self._curves[j] = out
        return out

    def compression_rate(self, js=None) -> tuple[float, dict[int, float]]:
        """Pooled exponential rate tau of est_err(j, n) ~ C_j 2**(-tau n), with log2 C_j per j.

        Fits depths n >= 1 above the round-off floor; sections with fewer than
        three such depths are skipped.  Defaults to all terms of the window.
        """
        if js is None:
            js = range(1, self.m_max + 1)
        xs, ys = {}, {}
        for j in js:
            if self.mu_level(j) >= self.level:
                break
            err, _ = self.error_curve(j)
            n = np.arange(1, err.size)
            keep = err[1:] > 1e-12 * err[0]
            if np.count_nonzero(keep) >= 3:
                xs[j], ys[j] = n[keep].astype(float), np.log2(err[1:][keep])
        if not xs:
            raise ValueError("no section has enough resolved depths for a rate fit")
        # common slope, separate intercepts: centre each section
        xc = np.concatenate([x - x.mean() for x in xs.values()])
        yc = np.concatenate([y - y.mean() for y in ys.values()])
        tau = -float(xc @ yc / (xc @ xc))
        consts = {j: float(ys[j].mean() + tau * xs[j].mean()) for j in xs}
        return tau, consts

    def section_norm(self, j: int) -> float:
        return operator_norm_bound(self.full(j)[0])

    # -- tails ----------------------------------------------------------------

    def tail_bound(self, M: int) -> float:
        """Certified bound for || sum_{j > M} A_j (x) M_j ||."""
        C = self.riesz[1]
        return C**2 * float(self.problem.tail_majorant(int(M)))

    def tail_table(self, upto: int | None = None) -> np.ndarray:
        upto = self.m_max if upto is None else upto
        return np.array([self.tail_bound(M) for M in range(upto + 1)])

    def smallest_M(self, norm: float, budget: float) -> int:
        """Smallest M <= m_max with tail_bound(M) * norm <= budget."""
        if norm == 0 or self.tail_bound(0) * norm <= budget:
            return 0
        if self.tail_bound(self.m_max) * norm > budget:
            raise BudgetExhausted(
                f"expansion cap {self.m_max} too small: tail {self.tail_bound(self.m_max):.3e} "
                f"x norm {norm:.3e} exceeds {budget:.3e}")
        lo, hi = 0, self.m_max
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self.tail_bound(mid) * norm <= budget:
                hi = mid
            else:
                lo = mid
        return hi

    def allocate_depths(self, M: int, budget: float) -> tuple[dict[int, int], float]:
        """Depths n_j for j <= M with sum_j est_err(j, n_j) <= budget and few nonzeros.

        Greedy on the error reduction per added nonzero; j = 0 is always exact.
        Returns the depths and the achieved error sum.
        """
        depth = {0: 1}
        total = 0.0
        heap = []
        curves = {}
        for j in range(1, M + 1):
            err, nnz = self.error_curve(j)
            curves[j] = (err, nnz)
            depth[j] = 0
            total += err[0]
            self._push_step(heap, j, 0, err, nnz)
        while total > budget and heap:
            _, j, n_from, n_to = heapq.heappop(heap)
            if depth[j] != n_from:
                continue
            err, nnz = curves[j]
            total += err[n_to] - err[n_from]
            depth[j] = n_to
            self._push_step(heap, j, n_to, err, nnz)
        return depth, max(total, 0.0)

    @staticmethod
    def _push_step(heap, j, n, err, nnz):
        best = None
        for m in range(n + 1, err.size):
            gain = err[n] - err[m]
            if gain <= 0:
                continue
            cost = nnz[m] - nnz[n]
            ratio = math.inf if cost <= 0 else gain / cost
            if best is None or ratio > best[0]:
                best = (ratio, m)
        if best is not None:
            heapq.heappush(heap, (-best[0], j, n, best[1]))

    # -- dense reference ------------------------------------------------------

    def dense_section(self, j: int, nus: list) -> np.ndarray:
        """Dense M_j restricted to ``nus`` (square section)."""
        idx = IndexList(nus)
        m = mj_matrix(j, nus, idx, grow=False)
        return m.toarray()

    # -- APPLY ----------------------------------------------------------------

    def apply(self, v, eta: float):
        if isinstance(v, SparseCoeffs):
            return self.apply_sparse(v, eta)
        if isinstance(v, LowRankCoeffs):
            return self.apply_lowrank(v, eta)
        if isinstance(v, HTuckerCoeffs):
            return self.apply_htucker(v, eta)
        raise TypeError(type(v).__name__)

    def apply_sparse(self, v: SparseCoeffs, eta: float) -> tuple[SparseCoeffs, float]:
        """Adaptive application to finitely supported coefficients.

        The input is split into dyadic magnitude blocks; block p gets an
        equal share of the budget, an expansion cutoff from the tail table and
        spatial depths from :meth:`allocate_depths`.
        """
        if eta <= 0:
            raise ValueError("eta must be positive")
        diag = ApplyDiagnostics(eta)
        self.last_diagnostics = diag
        v = v.compact()
        vn = v.norm()
        R = self.norm_ub
        if v.nnz == 0 or R * vn <= eta:
            diag.bound = R * vn
            return SparseCoeffs.zero(self.nx), R * vn
        v1 = sparse_coarsen(v, eta / (3 * R))
        pre = R * math.sqrt(max(vn**2 - v1.norm() ** 2, 0.0))
        diag.pre_error = pre
        mags = np.abs(v1.mat.data)
        block = np.floor(np.log2(mags.max() / mags)).astype(int)
        ids = np.unique(block)
        eta_b = (eta - pre) / ids.size
        plan = {}
        bound = pre
        for p in ids:
            bn = float(np.sqrt(np.sum(mags[block == p] ** 2)))
            M = self.smallest_M(bn, eta_b / 2)
            rest = eta_b / bn - self.tail_bound(M)
            depths, err = self.allocate_depths(M, rest)
            plan[p] = (M, depths)
            b = bn * (self.tail_bound(M) + err)
            bound += b
            diag.blocks.append(BlockRecord(int(p), 0, bn, M, eta_b, max(depths.values()), b))
        target = IndexList(v1.nus)
        rows, cols, vals = [], [], []
        Mtop = max(M for M, _ in plan.values())
        for j in range(Mtop + 1):
            groups: dict[int, list[int]] = {}
            for p, (M, depths) in plan.items():
                if j <= M:
                    groups.setdefault(depths[j], []).append(p)
            for n, ps in groups.items():
                if n <= 0:
                    continue
                mask = np.isin(block, ps)
                S = v1.mat.copy()
                S.data = np.where(mask, S.data, 0.0)
                S.eliminate_zeros()
                A = self.compressed(j, n).matrix
                row_nnz = np.diff(A.indptr)
                self.counters.spatial += int(row_nnz[S.indices].sum())
                AS = (S @ A).tocsr()  # A is symmetric
                if j == 0:
                    out = AS.tocoo()
                    r = out.row
                else:
                    Mj = mj_matrix(j, v1.nus, target)
                    self.counters.mj_sweeps += 2 * AS.nnz
                    out = (Mj @ AS).tocoo()
                    r = out.row
                rows.append(r)
                cols.append(out.col)
                vals.append(out.data)
        if rows:
            mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                shape=(len(target), self.nx))
        else:
            mat = sp.csr_matrix((len(target), self.nx))
        diag.bound = bound
        return SparseCoeffs(self.nx, target.items, mat).compact(), bound

    def block_weights(self, P: int, Q: int) -> np.ndarray:
        a = self.weight_exponent
        c = 1.0 / float(zeta(a)) ** 2
        p = np.arange(P)[:, None]
        q = np.arange(Q)[None, :]
        return c * ((1.0 + p) * (1.0 + q)) ** -a

    def block_contractions_x(self, Ux: np.ndarray, sig: np.ndarray, Yq: np.ndarray, p: int, q: int) -> np.ndarray:
        """pi^(x) of the block sum_k sig_k Ux_k (x) Yq_k.

        Gram route when q >= p, QR route otherwise.
        """
        K = sig.size
        nq = Yq.shape[0]
        if q >= p:
            G = (Yq * sig).T @ (Yq * sig)  # K x K
            self.counters.gramians += nq * K * K + Ux.shape[0] * K * K
            val = np.sum((Ux @ G) * Ux, axis=1)
            return np.sqrt(np.maximum(val, 0.0))
        _, Rf = np.linalg.qr(Yq * sig)  # (min(nq,K), K)
        self.counters.gramians += nq * nq * K + Ux.shape[0] * K * Rf.shape[0]
        return np.linalg.norm(Ux @ Rf.T, axis=1)

    def shell_error(self, M: int, m: int) -> float:
        """Bound for || sum_{j<=M} (A_j - A_j^m) (x) M_j || on one spatial shell."""
        if m <= 0:
            return self.norm_ub
        key = (M, m)
        out = self._shell.get(key)
        if out is None:
            # dropping the whole shell costs at most the norm bound
            out = min(sum(self.est_err(j, m) for j in range(M + 1)), self.norm_ub)
            self._shell[key] = out
        return out

    def apply_lowrank(self, v: LowRankCoeffs, eta: float) -> tuple[LowRankCoeffs, float]:
        """Adaptive application in SVD form with (p, q) blocks and spatial shells."""
        if eta <= 0:
            raise ValueError("eta must be positive")
        diag = ApplyDiagnostics(eta)
        self.last_diagnostics = diag
        R = self.norm_ub
        vn = v.norm()
        if v.rank == 0 or R * vn <= eta:
            diag.bound = R * vn
            return LowRankCoeffs.zero(self.nx), R * vn
        # (S1) preprocessing
        self.counters.preprocess += (v.sx.size + len(v.nus)) * v.rank**2
        v1 = svd_truncate(v, eta / (4 * R))
        v2 = coarsen_y(v1, eta / (4 * R))
        e_rc = math.sqrt(max(vn**2 - v1.norm() ** 2, 0.0))
        e_cy = math.sqrt(max(v1.norm() ** 2 - v2.norm() ** 2, 0.0))
        pre = R * (e_rc + e_cy)
        diag.pre_error = pre
        bound = pre
        if v2.rank == 0:
            diag.bound = bound + R * v2.norm()
            return LowRankCoeffs.zero(self.nx), diag.bound
        K = v2.rank
        _, py = v2.contractions()
        order_y = np.lexsort((np.arange(py.size), -py))
        P = int(math.floor(math.log2(K))) + 1
        Q = int(math.ceil(math.log2(py.size))) + 1 if py.size > 1 else 1
        alpha = self.block_weights(P, Q)
        target = IndexList()
        Xcols, Ycols = [], []
        for p in range(P):
            kp = np.arange(2**p - 1, min(K, 2 ** (p + 1) - 1))
            sig = v2.sigma[kp]
            Ux = v2.Ux[:, kp]
            for q in range(Q):
                ring = order_y[(0 if q == 0 else 2 ** (q - 1)) : 2**q]
                if ring.size == 0:
                    continue
                Yq = v2.Uy[ring][:, kp]
                bn = float(np.linalg.norm(Yq * sig))
                if bn == 0:
                    continue
                eta_pq = alpha[p, q] * eta / 4
                if R * bn <= 2 * eta_pq:
                    bound += R * bn
                    diag.blocks.append(BlockRecord(p, q, bn, -1, eta_pq, 0, R * bn))
                    continue
                # (S2) truncation of the expansion
                M = self.smallest_M(bn, eta_pq)
                # (S3) spatial shells of the block
                px = self.block_contractions_x(Ux, sig, Yq, p, q)
                order_x = np.lexsort((np.arange(px.size), -px))
                shells = []
                n = 0
                while True:
                    sl = order_x[(0 if n == 0 else 2 ** (n - 1)) : 2**n]
                    if sl.size == 0:
                        break
                    shells.append(sl)
                    n += 1
                snorm = np.array([np.linalg.norm(px[s]) for s in shells])
                N = 0
                cap = len(shells) + self.max_depth_upto(M)
                while True:
                    errs = np.array([self.shell_error(M, N - i) for i in range(len(shells))])
                    err = float(errs @ snorm)
                    if err <= eta_pq or N >= cap:
                        break
                    N += 1
                b = self.tail_bound(M) * bn + err
                bound += b
                diag.blocks.append(BlockRecord(p, q, bn, M, eta_pq, N, b))
                # assemble sum_j (A~_j Ux sig) (x) (M_j Yq)
                W = Ux * sig  # rows over v2.sx
                nus_q = [v2.nus[i] for i in ring]
                # shell rows scattered into the window, one dense block per shell
                Ws = []
                for i, sl in enumerate(shells):
                    if N - i > 0:
                        Wi = np.zeros((self.nx, kp.size))
                        Wi[v2.sx[sl]] = W[sl]
                        Ws.append((N - i, v2.sx[sl], Wi))
                Xall = np.zeros(((M + 1) * self.nx, kp.size))
                for m, cols, Wi in Ws:
                    S, cnz = self.stacked(M, m)
                    self.counters.spatial += int(cnz[cols].sum()) * kp.size
                    Xall += S @ Wi
                # columns ordered (j, k) on both sides
                Xb = Xall.reshape(M + 1, self.nx, kp.size).transpose(1, 0, 2).reshape(self.nx, -1)
                Ms = mj_stack(M, nus_q, target)
                self.counters.mj_sweeps += 2 * Ms.nnz * kp.size
                Xcols.append(Xb)
                Ycols.append((Ms, Yq, M + 1))
        diag.bound = bound
        if not Xcols:
            return LowRankCoeffs.zero(self.nx), bound
        n_target = len(target)
        X = np.hstack(Xcols)
        if X.shape[1] > X.shape[0]:
            # more terms than spatial rows: orthogonalize the spatial side first
            Qx, Rx = np.linalg.qr(X)
            Z = np.zeros((n_target, Qx.shape[1]))
            r = Rx.shape[0]
            c0 = 0
            for Ms, Yq, nj in Ycols:
                c1 = c0 + nj * Yq.shape[1]
                Rb = Rx[:, c0:c1].reshape(r, nj, Yq.shape[1])
                T = np.einsum("nk,rjk->jnr", Yq, Rb).reshape(-1, r)
                Z += _pad_rows(Ms, n_target) @ T
                c0 = c1
            X, Y = Qx, Z
        else:
            Y = np.hstack([(_pad_rows(Ms, n_target) @ sp.block_diag([Yq] * nj, format="csr")).toarray()
                           for Ms, Yq, nj in Ycols])
        w, _ = LowRankCoeffs.from_factors(self.nx, np.arange(self.nx), X, target.items, Y)
        return w, bound

    def apply_htucker(self, v: HTuckerCoeffs, eta: float) -> tuple[HTuckerCoeffs, float]:
        """Exact Kronecker application of the d + 1 terms with compressed A_j."""
        if eta <= 0:
            raise ValueError("eta must be positive")
        d = v.d
        if self.problem.n_terms is None or d != self.problem.n_terms:
            raise ValueError("hierarchical APPLY needs one mode per expansion term")
        diag = ApplyDiagnostics(eta)
        self.last_diagnostics = diag
        vn = v.norm()
        if vn == 0:
            return HTuckerCoeffs.zero(self.nx, d), 0.0
        per = eta / ((d + 1) * vn)
        terms = []
        bound = 0.0
        U0 = v.frames[0]
        for j in range(d + 1):
            err, _ = self.error_curve(j) if j else (np.array([self.problem.mean, 0.0]), None)
            n = int(np.nonzero(err <= per)[0][0]) if np.any(err <= per) else len(err) - 1
            bound += err[n] * vn
            diag.blocks.append(BlockRecord(0, j, vn, j, per * vn, n, err[n] * vn))
            if n == 0:
                continue
            A = self.compressed(j, n).matrix[:, v.supports[0]]
            self.counters.spatial += int(A.nnz) * U0.shape[1]
            X = A @ U0
            keep = np.nonzero(np.any(X != 0, axis=1))[0]
            supports = list(v.supports)
            frames = list(v.frames)
            supports[0] = keep
            frames[0] = X[keep]
            if j > 0:
                sup = v.supports[j]
                new_sup = np.arange((sup.max() + 2) if sup.size else 0)
                Mj = _degree_matrix(sup, new_sup)
                self.counters.mj_sweeps += 2 * int(np.count_nonzero(Mj)) * v.frames[j].shape[1]
                frames[j] = Mj @ v.frames[j]
                supports[j] = new_sup
            terms.append(HTuckerCoeffs(self.nx, supports, frames, v.cores))
        diag.bound = bound
        if not terms:
            return HTuckerCoeffs.zero(self.nx, d), bound
        return ht_sum(terms, [1.0] * len(terms)), bound


def _pad_rows(M: sp.csr_matrix, n: int) -> sp.csr_matrix:
    if M.shape[0] == n:
        return M
    M = M.tocoo()
    return sp.csr_matrix((M.data, (M.row, M.col)), shape=(n, M.shape[1]))


def _degree_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """One-dimensional three-term matrix from degrees ``src`` to degrees ``dst``."""
    pos = {int(n): i for i, n in enumerate(dst)}
    out = np.zeros((dst.size, src.size))
    for c, n in enumerate(src):
        n = int(n)
        out[pos[n + 1], c] = recurrence_coeff(n + 1)
        if n > 0:
            out[pos[n - 1], c] = recurrence_coeff(n)
    return out
