"""Acceptance suite: one PASS/FAIL line per criterion, asserted afterwards."""

import itertools
import math
import time

import numpy as np
import numpy.polynomial.legendre as npleg
import pytest

from paramsolve.formats import (
    HTuckerCoeffs,
    LowRankCoeffs,
    SparseCoeffs,
    coarsen,
    coarsen_counts,
    hsvd_truncate,
    recompress,
    svd_truncate,
)
from paramsolve.indices import MultiIndex
from paramsolve.legendre import legendre_values, mj_entry
from paramsolve.operator import CompressedOperator
from paramsolve.oracle import WindowModel, fit_slope, rank_profile, reference_solve, resolved_range
from paramsolve.problems import make_hat_expansion, make_inclusions, make_lowerbound_problem, make_sine_expansion
from paramsolve.solver import RhsSource, SolverConfig, solve
from paramsolve.wavelets import WaveletBasis

EPS = (1e-1, 1e-2, 1e-3)


def _solve(problem, basis, eps, fmt):
    op = CompressedOperator(problem, basis)
    return solve(op, RhsSource(problem.rhs, basis, problem.n_terms), SolverConfig(eps, fmt))


def _dense(v, nus):
    """Rows of v on the multi-indices ``nus`` (which must cover its support)."""
    s = v if isinstance(v, SparseCoeffs) else v.to_sparse()
    return s.densify(nus)


def _apply_error(model, v, w):
    v = v if isinstance(v, SparseCoeffs) else v.to_sparse()
    w = w if isinstance(w, SparseCoeffs) else w.to_sparse()
    rows = {}
    if v.nus:
        target, AV = model.apply(v.nus, v.mat.toarray())
        rows = {nu: AV[i].copy() for i, nu in enumerate(target.items)}
    W = w.mat.toarray()
    for i, nu in enumerate(w.nus):
        rows[nu] = rows.get(nu, np.zeros(model.nx)) - W[i]
    return math.sqrt(sum(float(r @ r) for r in rows.values()))


# -- 1 ------------------------------------------------------------------------


def test_solver_soundness(acceptance):
    cases = [
        ("inclusions d=2", make_inclusions(2, 0.5), 6, ("asp", "lr")),
        ("hat alpha=1", make_hat_expansion(1.0, levels=5), 7, ("asp", "lr")),
        ("hat alpha=0.5", make_hat_expansion(0.5, levels=5), 7, ("asp", "lr")),
        ("inclusions d=3", make_inclusions(3, 0.5), 6, ("ht",)),
    ]
    failures, worst, slowest = [], 0.0, 0.0
    for name, problem, L, formats in cases:
        basis = WaveletBasis(2, L)
        ref = reference_solve(problem, basis, min(EPS) / 10)
        assert ref.eps_ref <= min(EPS) / 10
        for fmt, eps in itertools.product(formats, EPS):
            t0 = time.perf_counter()
            u, rep = _solve(problem, basis, eps, fmt)
            slowest = max(slowest, time.perf_counter() - t0)
            err = ref.error_to_coeffs(u)
            worst = max(worst, err / (eps + ref.eps_ref))
            if not (err <= eps + ref.eps_ref and rep.final_bound <= eps):
                failures.append(f"{name}/{fmt}/{eps:g}: err={err:.3e}")
    ok = not failures and slowest <= 600
    acceptance(1, "solver soundness", ok,
               f"21 cells, max err/(eps+eps_ref)={worst:.3f}, slowest cell {slowest:.0f}s"
               + (f"; failed: {', '.join(failures)}" if failures else ""))
    assert ok


# -- 2 ------------------------------------------------------------------------


def test_rank_bound(acceptance):
    ratios = {}
    for d in (1, 2, 3, 4):
        L = max(3, math.ceil(math.log2(2 * d + 1)) + 1)
        ref = reference_solve(make_inclusions(d, 0.5), WaveletBasis(2, L), 1e-10)
        s = np.linalg.svd(ref.U, compute_uv=False)
        ratios[d] = s[4 * d + 1] / s[0] if s.size > 4 * d + 1 else 0.0
    ok = all(r <= 1e-9 for r in ratios.values())
    acceptance(2, "rank bound", ok, ", ".join(f"d={d}: {r:.1e}" for d, r in ratios.items()))
    assert ok


# -- 3 ------------------------------------------------------------------------


@pytest.mark.parametrize("alpha", [1.0, 0.5])
def test_decay_slopes(acceptance, alpha):
    problem = make_hat_expansion(alpha, levels=7)
    t0 = time.perf_counter()
    ref = reference_solve(problem, WaveletBasis(2, 8), 1e-5, min_indices=1000)
    elapsed = time.perf_counter() - t0
    prof = rank_profile(ref.U)
    targets = {"pi_y": -(alpha + 0.5), "pi_x": -(alpha + 0.5), "sigma": -(alpha + 0.5),
               "entries": -(2 * alpha / 3 + 0.5)}
    slopes = {k: fit_slope(prof[k], *resolved_range(k, problem.n_terms)) for k in targets}
    ok = (all(abs(slopes[k] - targets[k]) <= 0.15 for k in targets)
          and len(ref.nus) >= 1000 and elapsed <= 900)
    acceptance(3, f"decay slopes alpha={alpha:g}", ok,
               ", ".join(f"{k} {slopes[k]:+.3f} (target {targets[k]:+.3f})" for k in targets)
               + f"; {len(ref.nus)} indices, {elapsed:.0f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------

NUS = [MultiIndex.from_dense((a, b)) for a in range(4) for b in range(4)]


def _random_lowrank(rng):
    nx, ny = int(rng.integers(2, 12)), int(rng.integers(1, 16))
    r = int(rng.integers(1, 6))
    X = rng.standard_normal((nx, r)) * rng.uniform(0.1, 1.0) ** np.arange(r)
    Y = rng.standard_normal((ny, r)) * rng.uniform(0.2, 1.0) ** np.arange(ny)[:, None]
    v, _ = LowRankCoeffs.from_factors(nx, np.arange(nx), X, NUS[:ny], Y)
    return v, X @ Y.T


def _random_sparse(rng):
    nx = int(rng.integers(2, 12))
    entries = {(int(rng.integers(nx)), NUS[int(rng.integers(len(NUS)))]):
               float(rng.standard_normal() * 2.0 ** -rng.integers(0, 8)) for _ in range(int(rng.integers(1, 40)))}
    return SparseCoeffs.from_entries(nx, entries)


def _random_ht(rng, max_size=6):
    D = int(rng.integers(3, 5))
    shape = tuple(int(rng.integers(2, max_size + 1)) for _ in range(D))
    T = sum(np.einsum(",".join("abcd"[:D]) + "->" + "abcd"[:D], *[rng.standard_normal(n) for n in shape])
            * 0.5**k for k in range(int(rng.integers(1, 4))))
    T = T + rng.uniform(0, 0.1) * rng.standard_normal(shape)
    return HTuckerCoeffs.from_dense(shape[0], [np.arange(n) for n in shape], T), T


def _ht_dense(w, shape):
    return w.densify([np.arange(n) for n in shape])


def _edge_tail_lower_bound(T, w):
    """Largest matricization tail beyond w's rank on that tree edge: a lower bound on the best error."""
    D = T.ndim
    edges = [((i,), w.frames[i].shape[1]) for i in range(D)]
    edges += [(tuple(range(t, D)), w.cores[t].shape[0]) for t in range(2, D - 1)]
    best = 0.0
    for modes, r in edges:
        rest = [m for m in range(D) if m not in modes]
        M = np.transpose(T, list(modes) + rest).reshape(int(np.prod([T.shape[m] for m in modes])), -1)
        s = np.linalg.svd(M, compute_uv=False)
        best = max(best, float(np.sqrt(np.sum(s[r:] ** 2))))
    return best


def test_reduction_contracts(acceptance):
    rng = np.random.default_rng(4)
    N = 200
    stats = {}

    bad = 0
    for i in range(N):
        kind = i % 3
        if kind == 0:
            v = _random_sparse(rng)
            eta = rng.uniform(0, 1.2) * v.norm()
            bad += (v - coarsen(v, eta)).norm() > eta * (1 + 1e-12) + 1e-14
        elif kind == 1:
            v, _ = _random_lowrank(rng)
            eta = rng.uniform(0, 1.2) * v.norm()
            bad += (v - coarsen(v, eta)).norm() > eta * (1 + 1e-12) + 1e-14
        else:
            v, T = _random_ht(rng)
            eta = rng.uniform(0, 1.2) * v.norm()
            bad += np.linalg.norm(T - _ht_dense(coarsen(v, eta), T.shape)) > eta * (1 + 1e-12) + 1e-14
    stats["coarsen"] = bad

    bad = 0
    for i in range(N):
        if i % 2:
            v, _ = _random_lowrank(rng)
            eta = rng.uniform(0, 1.2) * v.norm()
            bad += (v - recompress(v, eta)).norm() > eta * (1 + 1e-12) + 1e-14
        else:
            v, T = _random_ht(rng)
            eta = rng.uniform(0, 1.2) * v.norm()
            bad += np.linalg.norm(T - _ht_dense(recompress(v, eta), T.shape)) > eta * (1 + 1e-12) + 1e-14
    stats["recompress"] = bad

    bad = 0
    for _ in range(N):
        v, D = _random_lowrank(rng)
        eta = rng.uniform(0, 1.2) * v.norm()
        w = svd_truncate(v, eta)
        s = np.linalg.svd(D, compute_uv=False)
        err = np.linalg.norm(_dense(w, v.nus).T - D) if w.rank else np.linalg.norm(D)
        best = np.sqrt(np.sum(s[w.rank:] ** 2))
        shorter = np.sqrt(np.sum(s[max(w.rank - 1, 0):] ** 2))
        bad += not (abs(err - best) <= 1e-10 * max(1.0, v.norm()) and err <= eta + 1e-12
                    and (w.rank == 0 or shorter > eta))
    stats["svd_truncate"] = bad

    bad, worst = 0, 0.0
    for _ in range(N):
        v, T = _random_ht(rng)
        eta = rng.uniform(0.01, 0.5) * v.norm()
        w = hsvd_truncate(v, eta)
        err = np.linalg.norm(T - _ht_dense(w, T.shape))
        lb = _edge_tail_lower_bound(T, w)
        factor = math.sqrt(2 * T.ndim - 3)
        if lb > 0:
            worst = max(worst, err / (factor * lb))
        bad += not (err <= eta * (1 + 1e-12) and err <= factor * lb * (1 + 1e-9) + 1e-13)
    stats["hsvd"] = bad

    bad = 0
    for _ in range(N):
        modes = int(rng.integers(1, 4))
        pis = [np.abs(rng.standard_normal(int(rng.integers(1, 6)))) for _ in range(modes)]
        total = math.sqrt(sum(float(p @ p) for p in pis))
        eta = rng.uniform(0, 1) * total
        counts, _, err = coarsen_counts(pis, eta)
        srt = [np.sort(p)[::-1] for p in pis]
        best = min(sum(c) for c in itertools.product(*[range(p.size + 1) for p in pis])
                   if math.sqrt(sum(float(np.sum(s[k:] ** 2)) for s, k in zip(srt, c))) <= eta)
        bad += not (sum(counts) == best and err <= eta * (1 + 1e-12))
    stats["coarsen_counts"] = bad

    ok = all(b == 0 for b in stats.values())
    acceptance(4, "reduction contracts", ok,
               ", ".join(f"{k} {N - b}/{N}" for k, b in stats.items())
               + f"; worst hsvd err/(sqrt(2D-3) lower bound)={worst:.3f}")
    assert ok


# -- 5 ------------------------------------------------------------------------


def test_apply_accuracy(acceptance):
    rng = np.random.default_rng(5)
    hat = make_hat_expansion(1.0, levels=3)
    incl = make_inclusions(3, 0.5)
    basis = WaveletBasis(2, 5)
    op_hat, model_hat = CompressedOperator(hat, basis), WindowModel(hat, basis)
    op_incl, model_incl = CompressedOperator(incl, basis), WindowModel(incl, basis)
    nx = op_hat.nx
    box = [MultiIndex.from_dense(t) for t in np.ndindex(4, 3)]

    def make(fmt):
        if fmt == "asp":
            entries = {(int(rng.integers(nx)), box[int(rng.integers(len(box)))]):
                       float(rng.standard_normal() * 2.0 ** -rng.integers(0, 6)) for _ in range(30)}
            return SparseCoeffs.from_entries(nx, entries)
        if fmt == "lr":
            r = int(rng.integers(1, 5))
            X = rng.standard_normal((nx, r)) * 2.0 ** -np.arange(r)
            Y = rng.standard_normal((len(box), r)) * 2.0 ** -np.arange(len(box))[:, None] / 2
            return LowRankCoeffs.from_factors(nx, np.arange(nx), X, box, Y)[0]
        vecs = [rng.standard_normal(nx)] + [rng.standard_normal(int(rng.integers(1, 4))) for _ in range(3)]
        return HTuckerCoeffs.elementary(nx, [np.arange(nx)] + [np.arange(v.size) for v in vecs[1:]], vecs, 1.0)

    counts, fails, worst = {}, [], 0.0
    for fmt in ("asp", "lr", "ht"):
        op, model = (op_incl, model_incl) if fmt == "ht" else (op_hat, model_hat)
        counts[fmt] = 0
        for case in range(50):
            v = make(fmt)
            for eta in EPS:
                w, bound = op.apply(v, eta)
                err = _apply_error(model, v, w)
                counts[fmt] += 1
                worst = max(worst, err / eta)
                if not (err <= eta and err <= bound * (1 + 1e-10) + 1e-15 and bound <= eta * (1 + 1e-12)):
                    fails.append(f"{fmt}#{case}@{eta:g}")
    ok = not fails and all(c >= 150 for c in counts.values())
    acceptance(5, "apply accuracy", ok,
               ", ".join(f"{k} {c} cases" for k, c in counts.items()) + f", max err/eta={worst:.3f}"
               + (f"; failed {fails[:5]}" if fails else ""))
    assert ok


# -- 6 ------------------------------------------------------------------------


def _compression_curve(op, tols):
    pts = []
    for tol in tols:
        M = op.smallest_M(1.0, tol / 2)
        depths, err = op.allocate_depths(M, tol / 2)
        nnz = sum(op.compressed(j, n).nnz for j, n in depths.items())
        pts.append((nnz, err + op.tail_bound(M)))
    return np.array(pts)


def test_operator_compression(acceptance):
    op = CompressedOperator(make_hat_expansion(1.0), WaveletBasis(2, 8))
    tau, _ = op.compression_rate()
    rates = {}
    for j in range(1, 8):  # hat levels 0, 1, 2
        A = op.full(j)[0].toarray()
        errs = np.array([np.linalg.norm(A - op.compressed(j, n).matrix.toarray(), 2)
                         for n in range(op.depth_max(j) + 1)])
        n = np.nonzero(errs > 1e-12 * errs[0])[0]
        n = n[n >= 1]
        rates[j] = -np.polyfit(n, np.log2(errs[n]), 1)[0]
    uniform = all(r >= 0.8 * tau for r in rates.values())

    tols = (1e-1, 3e-2, 1e-2, 3e-3)
    hat = _compression_curve(CompressedOperator(make_hat_expansion(1.0), WaveletBasis(2, 6)), tols)
    sine_op = CompressedOperator(make_sine_expansion(2.0, 0.3), WaveletBasis(2, 6))
    sine = _compression_curve(sine_op, tols)
    extra = 3e-3
    while sine[-1, 0] < hat[-1, 0]:
        extra /= 3
        sine = np.vstack([sine, _compression_curve(sine_op, (extra,))])
    nnz = hat[-1, 0]
    sine_err = 2 ** np.interp(np.log2(nnz), np.log2(sine[:, 0]), np.log2(sine[:, 1]))
    factor = sine_err / hat[-1, 1]
    ok = uniform and factor >= 2
    acceptance(6, "operator compression", ok,
               f"tau_meas={tau:.3f}, per-term rates {min(rates.values()):.3f}..{max(rates.values()):.3f}; "
               f"sine/hat error at {int(nnz)} nonzeros = {factor:.2f}")
    assert ok


# -- 7 ------------------------------------------------------------------------


def test_lower_bound_phenomenon(acceptance):
    ref = reference_solve(make_lowerbound_problem(64), WaveletBasis(2, 9), 1e-5)
    prof = rank_profile(ref.U)
    s_sigma = fit_slope(prof["sigma"], 4, 32)
    s_u = fit_slope(prof["pi_y"], 4, 32)
    ratio = s_sigma / s_u
    ok = 0.85 <= ratio <= 1.15
    acceptance(7, "lower-bound phenomenon", ok,
               f"slope sigma {s_sigma:.3f}, slope u* {s_u:.3f}, ratio {ratio:.3f}, {len(ref.nus)} indices")
    assert ok


# -- 8 ------------------------------------------------------------------------


def test_mj_sections(acceptance):
    x, w = npleg.leggauss(16)
    w = w / 2  # uniform probability measure on [-1, 1]
    nmax = 6
    L = legendre_values(nmax, x)
    worst = 0.0
    nus = [MultiIndex.from_dense(t) for t in np.ndindex(nmax, nmax)]
    for j in (0, 1, 2):
        for nu, mu in itertools.product(nus, nus):
            if j == 0:
                q = float(nu == mu)
            else:
                k = j - 1
                other = [i for i in range(2) if i != k]
                q = float(np.sum(w * x * L[nu.as_dense(2)[k]] * L[mu.as_dense(2)[k]]))
                q *= all(nu.as_dense(2)[i] == mu.as_dense(2)[i] for i in other)
            worst = max(worst, abs(mj_entry(j, nu, mu) - q))
    p1 = mj_entry(1, MultiIndex.zero(), MultiIndex.unit(1))
    ok = worst <= 1e-12 and abs(p1 - 1 / math.sqrt(3)) <= 1e-15
    acceptance(8, "M_j sections", ok, f"max deviation {worst:.1e}, p_1={p1:.15f}")
    assert ok


# -- 9 ------------------------------------------------------------------------


def test_determinism(acceptance):
    runs = [
        (make_inclusions(2, 0.5), 5, 1e-3, "lr"),
        (make_inclusions(3, 0.5), 5, 1e-3, "ht"),
        (make_hat_expansion(1.0, levels=4), 6, 1e-2, "asp"),
    ]
    same = []
    for problem, L, eps, fmt in runs:
        digests = [_solve(problem, WaveletBasis(2, L), eps, fmt)[1].digest() for _ in range(2)]
        same.append(digests[0] == digests[1])
    ok = all(same)
    acceptance(9, "determinism", ok, f"{sum(same)}/{len(same)} repeated runs hash-identical")
    assert ok
