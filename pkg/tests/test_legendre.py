import itertools
import math

import numpy as np
import pytest
from numpy.polynomial import legendre as npleg

from paramsolve.indices import MultiIndex
from paramsolve.legendre import (
    IndexList,
    RecurrenceTable,
    apply_mj,
    legendre_values,
    mj_entry,
    mj_matrix,
    mj_stack,
    recurrence_coeff,
)


def quad_entry(j, nu, nu2, d):
    """Integral of y_j L_nu L_nu2 over [-1, 1]^d with the uniform probability measure."""
    x, w = npleg.leggauss(12)
    w = w / 2
    val = 1.0
    for i in range(1, d + 1):
        a, b = nu[i], nu2[i]
        la = npleg.legval(x, [0] * a + [1]) * math.sqrt(2 * a + 1)
        lb = npleg.legval(x, [0] * b + [1]) * math.sqrt(2 * b + 1)
        f = la * lb * (x if i == j else 1.0)
        val *= float(np.sum(w * f))
    return val


@pytest.mark.parametrize("n, expected", [(0, 0.0), (1, 1 / math.sqrt(3)), (2, 2 / math.sqrt(15))])
def test_recurrence_examples(n, expected):
    assert recurrence_coeff(n) == pytest.approx(expected, abs=1e-15)


def test_recurrence_table_monotone():
    # p_n = 1/sqrt(4 - n**-2) decreases from 1/sqrt(3) toward 1/2
    t = RecurrenceTable(50)
    assert t[0] == 0.0
    assert np.all(np.diff(t.p[1:]) < 0) and np.all(t.p[1:] > 0.5)
    assert t[60] == pytest.approx(recurrence_coeff(60))


def test_legendre_values_orthonormal():
    x, w = npleg.leggauss(20)
    L = legendre_values(8, x)
    G = (L * (w / 2)) @ L.T
    assert np.allclose(G, np.eye(9), atol=1e-13)


def test_mj_entries_match_quadrature():
    d = 3
    box = [MultiIndex.from_dense(t) for t in itertools.product(range(4), repeat=d)]
    worst = 0.0
    for j in range(0, d + 1):
        for nu in box:
            for nu2 in box:
                q = (1.0 if nu == nu2 else 0.0) if j == 0 else quad_entry(j, nu, nu2, d)
                worst = max(worst, abs(mj_entry(j, nu, nu2) - q))
                assert mj_entry(j, nu, nu2) == mj_entry(j, nu2, nu)
    assert worst <= 1e-12


def test_mj_first_entry():
    assert mj_entry(1, MultiIndex.zero(), MultiIndex.unit(1)) == pytest.approx(1 / math.sqrt(3), abs=1e-15)
    assert apply_mj(1, {MultiIndex.zero(): 1.0}) == pytest.approx({MultiIndex.unit(1): 1 / math.sqrt(3)})
    v = {MultiIndex.unit(2): 2.0, MultiIndex.zero(): -1.0}
    assert apply_mj(0, v) == v


def test_apply_mj_matches_dense_section(rng):
    d = 3
    box = [MultiIndex.from_dense(t) for t in itertools.product(range(5), repeat=d)]
    pos = {nu: i for i, nu in enumerate(box)}
    for _ in range(10):
        supp = [box[i] for i in rng.choice(len(box), 6, replace=False) if max(box[i].as_dense(d)) < 4]
        v = {nu: float(rng.standard_normal()) for nu in supp}
        for j in range(d + 1):
            out = apply_mj(j, v)
            assert len(out) <= (2 if j else 1) * len(v)
            dense = np.zeros(len(box))
            for nu, c in v.items():
                for mu in box:
                    dense[pos[mu]] += mj_entry(j, mu, nu) * c
            got = np.zeros(len(box))
            for mu, c in out.items():
                got[pos[mu]] = c
            assert np.allclose(got, dense, atol=1e-14)


def test_mj_sections_contractive():
    d = 2
    box = [MultiIndex.from_dense(t) for t in itertools.product(range(6), repeat=d)]
    idx = IndexList(box)
    for j in range(1, d + 1):
        M = mj_matrix(j, box, idx, grow=False).toarray()
        assert np.allclose(M, M.T)
        assert np.linalg.norm(M, 2) <= 1.0


def test_mj_stack_blocks_equal_single_matrices():
    src = [MultiIndex.zero(), MultiIndex.unit(1), MultiIndex({1: 1, 3: 2})]
    t1, t2 = IndexList(), IndexList()
    S = mj_stack(3, src, t1)
    assert len(t1) > len(src)
    for j in range(4):
        Mj = mj_matrix(j, src, t2)
        for c in range(len(src)):
            col = S[:, j * len(src) + c].toarray().ravel()
            expect = {t2.items[r]: v for r, v in zip(Mj[:, c].tocoo().row, Mj[:, c].tocoo().data)}
            got = {t1.items[r]: col[r] for r in np.nonzero(col)[0]}
            assert got == pytest.approx(expect)
