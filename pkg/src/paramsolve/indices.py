"""Index sets: spatial wavelet indices, parametric multi-indices, expansion enumeration."""

from __future__ import annotations

from dataclasses import dataclass
from functools import total_ordering
from typing import Iterable, Mapping

import numpy as np


@total_ordering
@dataclass(frozen=True)
class SpatialIndex:
    """Wavelet index (level, translate, component).

    Level 0 holds the coarse polynomial functions (translate 0 only); a function
    on level ``L >= 1`` is piecewise polynomial on the dyadic cells of width
    ``2**-L`` and supported on the translate-th interval of width ``2**(1-L)``.
    """

    level: int
    translate: int
    component: int = 0

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"negative level {self.level}")
        if not 0 <= self.translate < 2**self.level:
            raise ValueError(f"translate {self.translate} out of range for level {self.level}")
        if self.component < 0:
            raise ValueError("negative component")

    def key(self) -> tuple[int, int, int]:
        return (self.level, self.translate, self.component)

    def __lt__(self, other: "SpatialIndex") -> bool:
        return self.key() < other.key()


@total_ordering
class MultiIndex:
    """Finitely supported sequence of nonnegative integers indexed by j >= 1.

    Zero entries are never stored, so equality and hashing are canonical.
    """

    __slots__ = ("_items", "_hash")

    def __init__(self, entries: Mapping[int, int] | Iterable[tuple[int, int]] = ()):
        if isinstance(entries, Mapping):
            entries = entries.items()
        items = []
        for j, n in entries:
            j, n = int(j), int(n)
            if j < 1:
                raise ValueError(f"parameter number must be >= 1, got {j}")
            if n < 0:
                raise ValueError(f"negative degree {n} for parameter {j}")
            if n:
                items.append((j, n))
        items.sort()
        for a, b in zip(items, items[1:]):
            if a[0] == b[0]:
                raise ValueError(f"duplicate parameter {a[0]}")
        self._items = tuple(items)
        self._hash = hash(self._items)

    @classmethod
    def zero(cls) -> "MultiIndex":
        return _ZERO

    @classmethod
    def unit(cls, j: int, n: int = 1) -> "MultiIndex":
        return cls(((j, n),))

    @classmethod
    def from_text(cls, text: str) -> "MultiIndex":
        text = text.strip()
        if not text:
            return _ZERO
        pairs = []
        for part in text.split(","):
            j, n = part.split(":")
            pairs.append((int(j), int(n)))
        return cls(pairs)

    @property
    def items(self) -> tuple[tuple[int, int], ...]:
        return self._items

    def __getitem__(self, j: int) -> int:
        for i, n in self._items:
            if i == j:
                return n
        return 0

    def support(self) -> tuple[int, ...]:
        return tuple(j for j, _ in self._items)

    def degree(self) -> int:
        return sum(n for _, n in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other) -> bool:
        return isinstance(other, MultiIndex) and self._items == other._items

    def __lt__(self, other: "MultiIndex") -> bool:
        return self._items < other._items

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        return f"MultiIndex({self.to_text()!r})"

    def to_text(self) -> str:
        return ",".join(f"{j}:{n}" for j, n in self._items)

    def as_dense(self, d: int) -> tuple[int, ...]:
        """Degrees (nu_1, ..., nu_d); raises if the support exceeds d."""
        out = [0] * d
        for j, n in self._items:
            if j > d:
                raise ValueError(f"parameter {j} outside dimension {d}")
            out[j - 1] = n
        return tuple(out)

    @classmethod
    def from_dense(cls, degrees: Iterable[int]) -> "MultiIndex":
        return cls((j + 1, n) for j, n in enumerate(degrees))


_ZERO = MultiIndex()


def kronecker_shift(nu: MultiIndex, j: int, delta: int) -> MultiIndex | None:
    """Return nu + delta * e^j, or None when that would make an entry negative."""
    if delta not in (1, -1):
        raise ValueError("delta must be +1 or -1")
    n = nu[j] + delta
    if n < 0:
        return None
    entries = dict(nu.items)
    entries[j] = n
    return MultiIndex(entries)


@dataclass(frozen=True)
class ExpansionIndex:
    """Position of the j-th expansion function in the dyadic hat tree."""

    j: int
    mu_level: int
    mu_translate: int


def enumerate_expansion(j: int) -> ExpansionIndex:
    """Map j >= 1 to (level, translate) with j = 2**level + translate."""
    if j < 1:
        raise ValueError(f"expansion index must be >= 1, got {j}")
    level = j.bit_length() - 1
    return ExpansionIndex(j, level, j - (1 << level))


def expansion_number(level: int, translate: int) -> int:
    """Inverse of :func:`enumerate_expansion`."""
    if not 0 <= translate < 2**level:
        raise ValueError("translate out of range")
    return (1 << level) + translate


# Spatial indices are numbered consecutively in (level, translate, component)
# order; the window of levels <= L then has k * 2**L - 1 functions.


def spatial_count(order: int, max_level: int) -> int:
    """Number of spatial basis functions with level <= max_level."""
    return order * 2**max_level - 1


def spatial_id(index: SpatialIndex, order: int) -> int:
    level, t, c = index.key()
    if level == 0:
        if c >= order - 1:
            raise ValueError("level-0 component out of range")
        return c
    if level > 0 and t >= 2 ** (level - 1):
        raise ValueError(f"translate {t} not used on level {level}")
    if c >= order:
        raise ValueError("component out of range")
    return order * 2 ** (level - 1) - 1 + order * t + c


def spatial_index(i: int, order: int) -> SpatialIndex:
    if i < 0:
        raise ValueError("negative id")
    if i < order - 1:
        return SpatialIndex(0, 0, i)
    rest = i - (order - 1)
    block = rest // order
    # level L >= 1 owns blocks [2**(L-1) - 1, 2**L - 1)
    level = (block + 1).bit_length()
    t = block - (2 ** (level - 1) - 1)
    return SpatialIndex(level, t, rest % order)


def spatial_levels(order: int, max_level: int):
    """Level of every id in the window, as a numpy array."""
    n = spatial_count(order, max_level)
    lev = np.zeros(n, dtype=np.int64)
    for level in range(1, max_level + 1):
        start = order * 2 ** (level - 1) - 1
        lev[start : start + order * 2 ** (level - 1)] = level
    return lev
