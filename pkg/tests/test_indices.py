import pytest
from hypothesis import given
from hypothesis import strategies as st

from paramsolve.indices import (
    MultiIndex,
    SpatialIndex,
    enumerate_expansion,
    expansion_number,
    kronecker_shift,
    spatial_count,
    spatial_id,
    spatial_index,
)

multi_indices = st.dictionaries(st.integers(1, 12), st.integers(0, 5), max_size=6).map(MultiIndex)


@pytest.mark.parametrize("j, level, translate", [(1, 0, 0), (2, 1, 0), (7, 2, 3)])
def test_enumerate_expansion_examples(j, level, translate):
    e = enumerate_expansion(j)
    assert (e.mu_level, e.mu_translate) == (level, translate)


def test_enumerate_expansion_bijective_and_level_ordered():
    seen = set()
    prev = 0
    for j in range(1, 1025):
        e = enumerate_expansion(j)
        assert expansion_number(e.mu_level, e.mu_translate) == j
        assert e.mu_level >= prev
        prev = e.mu_level
        seen.add((e.mu_level, e.mu_translate))
    assert len(seen) == 1024
    with pytest.raises(ValueError):
        enumerate_expansion(0)


def test_kronecker_shift_examples():
    zero = MultiIndex.zero()
    assert kronecker_shift(zero, 3, 1) == MultiIndex.unit(3)
    assert kronecker_shift(MultiIndex.unit(3), 3, -1) == zero
    assert kronecker_shift(zero, 1, -1) is None


@given(multi_indices, st.integers(1, 12))
def test_shift_changes_degree_by_one(nu, j):
    up = kronecker_shift(nu, j, 1)
    assert up.degree() == nu.degree() + 1
    assert len(up.support()) in (len(nu.support()), len(nu.support()) + 1)
    assert kronecker_shift(up, j, -1) == nu


@given(multi_indices)
def test_multiindex_text_roundtrip_and_canonical(nu):
    assert MultiIndex.from_text(nu.to_text()) == nu
    assert hash(MultiIndex(dict(nu.items))) == hash(nu)
    assert all(n > 0 for _, n in nu.items)


def test_multiindex_text_form():
    assert MultiIndex({3: 1, 1: 2}).to_text() == "1:2,3:1"
    assert MultiIndex.zero().to_text() == ""
    assert MultiIndex({2: 0}) == MultiIndex.zero()


def test_spatial_index_validation_and_order():
    with pytest.raises(ValueError):
        SpatialIndex(2, 4)
    with pytest.raises(ValueError):
        SpatialIndex(-1, 0)
    a, b, c = SpatialIndex(1, 0, 1), SpatialIndex(2, 0, 0), SpatialIndex(1, 0, 0)
    assert sorted([a, b, c]) == [c, a, b]


@pytest.mark.parametrize("order, level", [(2, 0), (2, 5), (3, 4)])
def test_spatial_numbering_roundtrip(order, level):
    n = spatial_count(order, level)
    ids = [spatial_id(spatial_index(i, order), order) for i in range(n)]
    assert ids == list(range(n))
    keys = [spatial_index(i, order).key() for i in range(n)]
    assert keys == sorted(keys)
