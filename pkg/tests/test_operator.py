import json

import numpy as np
import pytest

from paramsolve.formats import HTuckerCoeffs, LowRankCoeffs, SparseCoeffs
from paramsolve.indices import MultiIndex
from paramsolve.operator import CompressedOperator
from paramsolve.oracle import WindowModel, fit_slope
from paramsolve.problems import hat_amplitude, make_hat_expansion, make_inclusions
from paramsolve.wavelets import WaveletBasis


def apply_error(model, v, w):
    """||A v - w|| with A v evaluated exactly by the window model."""
    v = v.to_sparse() if not isinstance(v, SparseCoeffs) else v
    w = w.to_sparse() if not isinstance(w, SparseCoeffs) else w
    rows = {}
    if v.nus:
        target, AV = model.apply(v.nus, v.mat.toarray())
        rows = {nu: AV[i].copy() for i, nu in enumerate(target.items)}
    W = w.mat.toarray()
    for i, nu in enumerate(w.nus):
        rows[nu] = rows.get(nu, np.zeros(model.nx)) - W[i]
    return float(np.sqrt(sum(float(r @ r) for r in rows.values())))


def box(n1, n2):
    return [MultiIndex.from_dense((a, b)) for a in range(n1) for b in range(n2)]


@pytest.fixture(scope="module")
def hat_setup():
    prob = make_hat_expansion(1.0, levels=3)
    basis = WaveletBasis(2, 5)
    return CompressedOperator(prob, basis), WindowModel(prob, basis)


@pytest.fixture(scope="module")
def incl_setup():
    prob = make_inclusions(3, 0.5)
    basis = WaveletBasis(2, 5)
    return CompressedOperator(prob, basis), WindowModel(prob, basis)


def random_sparse(rng, nx, nus, n=30):
    entries = {}
    for _ in range(n):
        i = int(rng.integers(nx))
        nu = nus[int(rng.integers(len(nus)))]
        entries[(i, nu)] = float(rng.standard_normal()) * 2.0 ** -rng.integers(0, 6)
    return SparseCoeffs.from_entries(nx, entries)


def random_lowrank(rng, nx, nus, r=3):
    X = rng.standard_normal((nx, r)) * 2.0 ** -np.arange(r)
    Y = rng.standard_normal((len(nus), r)) * 2.0 ** -np.arange(len(nus))[:, None] / 2
    v, _ = LowRankCoeffs.from_factors(nx, np.arange(nx), X, nus, Y)
    return v


# -- tail estimator -------------------------------------------------------------


def test_tail_bound_geometric_for_hats():
    op = CompressedOperator(make_hat_expansion(1.0), WaveletBasis(2, 3))
    c = hat_amplitude(1.0, 0.5)
    for L in range(1, 8):
        assert op.tail_bound(2**L - 1) == pytest.approx(c * 2.0**-L / (1 - 2.0**-1), rel=1e-12)
    table = op.tail_table(200)
    assert np.all(np.diff(table) <= 0)
    assert np.isfinite(table[0]) and table[0] > 0


def test_tail_bound_slope_for_hats():
    op = CompressedOperator(make_hat_expansion(1.0), WaveletBasis(2, 3))
    vals = np.array([op.tail_bound(M) for M in range(1, 1025)])
    assert fit_slope(vals, 8, 1024) == pytest.approx(-1.0, abs=0.2)


def test_tail_bound_dominates_windowed_tail(hat_setup):
    op, _ = hat_setup
    nus = box(4, 3)
    basis = op.basis
    for M in (0, 2, 4):
        # dense || sum_{M < j <= n_terms} A_j (x) M_j || on the window and a small parametric box
        T = 0
        for j in range(M + 1, op.m_max + 1):
            A = op.full(j)[0].toarray()
            Mj = op.dense_section(j, nus)
            T = T + np.kron(Mj, A)
        norm = 0.0 if np.isscalar(T) else np.linalg.norm(T, 2)
        assert norm <= op.tail_bound(M) + 1e-12
    assert basis.size() == op.nx


def test_dense_sections_spd_within_bounds(hat_setup):
    op, _ = hat_setup
    nus = box(3, 3)
    A = np.kron(np.eye(len(nus)), op.full(0)[0].toarray())
    for j in range(1, op.m_max + 1):
        A += np.kron(op.dense_section(j, nus), op.full(j)[0].toarray())
    assert np.allclose(A, A.T, atol=1e-13)
    ev = np.linalg.eigvalsh(A)
    assert ev[0] >= op.lambda_lb * (1 - 1e-10)
    assert ev[-1] <= op.norm_ub * (1 + 1e-10)


# -- APPLY ------------------------------------------------------------------------


@pytest.mark.parametrize("fmt", ["asp", "lr"])
def test_apply_zero(hat_setup, fmt):
    op, _ = hat_setup
    v = SparseCoeffs.zero(op.nx) if fmt == "asp" else LowRankCoeffs.zero(op.nx)
    w, bound = op.apply(v, 1e-3)
    assert w.norm() == 0 and bound == 0


def test_apply_zero_ht(incl_setup):
    op, _ = incl_setup
    w, bound = op.apply(HTuckerCoeffs.zero(op.nx, 3), 1e-3)
    assert w.norm() == 0 and bound == 0


def test_apply_rejects_nonpositive_eta(hat_setup):
    op, _ = hat_setup
    v = SparseCoeffs.from_entries(op.nx, {(0, MultiIndex.zero()): 1.0})
    for eta in (0.0, -1.0):
        with pytest.raises(ValueError):
            op.apply(v, eta)


def test_apply_sparse_single_entry(hat_setup):
    op, model = hat_setup
    v = SparseCoeffs.from_entries(op.nx, {(5, MultiIndex.zero()): 1.0})
    w, bound = op.apply(v, 1e-8)
    assert apply_error(model, v, w) <= 1e-8


@pytest.mark.parametrize("eta", [1e-1, 1e-2, 1e-3])
def test_apply_sparse_random(hat_setup, rng, eta):
    op, model = hat_setup
    for _ in range(5):
        v = random_sparse(rng, op.nx, box(4, 3))
        w, bound = op.apply(v, eta)
        err = apply_error(model, v, w)
        assert err <= bound * (1 + 1e-10) + 1e-14
        assert bound <= eta * (1 + 1e-12)


def test_apply_sparse_support_grows_slowly(hat_setup, rng):
    op, _ = hat_setup
    v = random_sparse(rng, op.nx, box(4, 3))
    sizes = [op.apply(v, eta)[0].nnz for eta in (1e-1, 1e-2, 1e-3)]
    assert sizes[0] <= sizes[1] <= sizes[2]
    assert sizes[2] < 100 * sizes[0]


def test_apply_lowrank_rank_one_on_zero_index(hat_setup, rng):
    op, model = hat_setup
    x = rng.standard_normal((op.nx, 1))
    v, _ = LowRankCoeffs.from_factors(op.nx, np.arange(op.nx), x, [MultiIndex.zero()], np.ones((1, 1)))
    for eta in (1e-2, 1e-4):
        w, bound = op.apply(v, eta)
        assert apply_error(model, v, w) <= min(bound * (1 + 1e-10), eta)


def test_apply_lowrank_bound_dominates(hat_setup, rng):
    op, model = hat_setup
    for _ in range(20):
        v = random_lowrank(rng, op.nx, box(4, 3))
        w, bound = op.apply(v, 1e-2)
        assert apply_error(model, v, w) <= bound * (1 + 1e-10)
        assert bound <= 1e-2 * (1 + 1e-12)


def test_apply_lowrank_block_bookkeeping(hat_setup, rng):
    op, _ = hat_setup
    v = random_lowrank(rng, op.nx, box(5, 4), r=5)
    eta = 1e-3
    op.apply(v, eta)
    diag = op.last_diagnostics
    assert diag.pre_error + sum(b.bound for b in diag.blocks) == pytest.approx(diag.bound, rel=1e-12)
    assert sum(b.bound for b in diag.blocks) <= eta / 2 * (1 + 1e-12)
    for b in diag.blocks:
        assert b.bound <= 2 * b.eta_block * (1 + 1e-12)
    doc = json.loads(diag.to_json())
    assert doc["eta"] == eta and len(doc["blocks"]) == len(diag.blocks)


@pytest.mark.parametrize("fmt", ["asp", "lr"])
def test_monotone_refinement(hat_setup, rng, fmt):
    op, _ = hat_setup
    v = random_sparse(rng, op.nx, box(4, 3))
    if fmt == "lr":
        v = v.to_lowrank()
    bounds = [op.apply(v, eta)[1] for eta in (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)]
    assert all(b1 <= b0 * (1 + 1e-12) for b0, b1 in zip(bounds, bounds[1:]))


def test_apply_htucker_elementary(incl_setup, rng):
    op, model = incl_setup
    d = 3
    for _ in range(5):
        vecs = [rng.standard_normal(op.nx)] + [rng.standard_normal(2) for _ in range(d)]
        sup = [np.arange(op.nx)] + [np.arange(2)] * d
        v = HTuckerCoeffs.elementary(op.nx, sup, vecs, 1.0)
        for eta in (1e-2, 1e-4):
            w, bound = op.apply(v, eta)
            assert apply_error(model, v, w) <= min(bound * (1 + 1e-10), eta)
            ranks_in, ranks_out = v.rank_tuple(), w.rank_tuple()
            assert all(ro <= (d + 1) * ri for ri, ro in zip(ranks_in, ranks_out))


def test_apply_htucker_one_parameter_matches_lowrank(rng):
    prob = make_inclusions(1, 0.5)
    basis = WaveletBasis(2, 4)
    op, model = CompressedOperator(prob, basis), WindowModel(prob, basis)
    x, y = rng.standard_normal(op.nx), rng.standard_normal(3)
    ht = HTuckerCoeffs.elementary(op.nx, [np.arange(op.nx), np.arange(3)], [x, y], 1.0)
    lr, _ = LowRankCoeffs.from_factors(op.nx, np.arange(op.nx), x[:, None],
                                       [MultiIndex.from_dense((k,)) for k in range(3)], y[:, None])
    w_ht, _ = op.apply(ht, 1e-9)
    w_lr, _ = op.apply(lr, 1e-9)
    nus = [MultiIndex.from_dense((k,)) for k in range(4)]
    assert w_ht.to_sparse().densify(nus) == pytest.approx(w_lr.densify(nus), abs=1e-8)
    assert apply_error(model, ht, w_ht) <= 1e-9


# -- work counters ----------------------------------------------------------------


def test_counters_zero_input(hat_setup):
    op, _ = hat_setup
    op.counters.reset()
    op.apply(LowRankCoeffs.zero(op.nx), 1e-3)
    assert op.counters.total == 0


def test_gramian_count_quadruples_with_rank(rng):
    op = CompressedOperator(make_hat_expansion(1.0, levels=3), WaveletBasis(2, 6))
    nus = box(8, 8)

    def count(r):
        X = rng.standard_normal((op.nx, r))
        Y = rng.standard_normal((len(nus), r))
        v, _ = LowRankCoeffs.from_factors(op.nx, np.arange(op.nx), X, nus, Y)
        op.counters.reset()
        counts = op.block_contractions_x(v.Ux, v.sigma, v.Uy, 0, 0)
        assert counts.size == op.nx
        return op.counters.gramians

    ratio = count(16) / count(8)
    assert 3.5 <= ratio <= 4.5


def test_preprocess_count_doubles_with_nx(rng):
    nus = box(2, 2)

    def count(L):
        op = CompressedOperator(make_hat_expansion(1.0, levels=2), WaveletBasis(2, L))
        X = rng.standard_normal((op.nx, 3))
        Y = rng.standard_normal((len(nus), 3))
        v, _ = LowRankCoeffs.from_factors(op.nx, np.arange(op.nx), X, nus, Y)
        op.counters.reset()
        op.apply(v, 1e-1)
        return op.counters.preprocess

    ratio = count(7) / count(6)
    assert 1.8 <= ratio <= 2.2
