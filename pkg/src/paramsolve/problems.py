"""Benchmark parametric diffusion problems on (0,1).

Each problem is a(y) = mean + sum_j y_j theta_j with y uniform on [-1,1]^I and
a right-hand side f given through its flux g, i.e. <f, v> = integral of g v'.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import zeta

from .indices import enumerate_expansion
from .spatial import EllipticityError, ExpansionFunction, uniform_ellipticity_check


@dataclass(frozen=True)
class FluxPiece:
    """Polynomial sum_i coeffs[i] * x**i on [left, right]."""

    left: float
    right: float
    coeffs: tuple[float, ...]

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(x, self.coeffs)


@dataclass(frozen=True)
class RhsSpec:
    """Right-hand side descriptor.

    Either a piecewise polynomial flux (``pieces``) or a finite set of basis
    coefficients (``coefficients``: id -> value).
    """

    kind: str = "flux"
    pieces: tuple[FluxPiece, ...] = ()
    coefficients: tuple[tuple[int, float], ...] = ()
    label: str = ""

    @classmethod
    def one(cls) -> "RhsSpec":
        # integral of v equals -integral of x v' for v vanishing at 0 and 1
        return cls("flux", (FluxPiece(0.0, 1.0, (0.0, -1.0)),), label="one")

    @classmethod
    def zero(cls) -> "RhsSpec":
        return cls("flux", (), label="zero")

    @classmethod
    def basis_function(cls, i: int, value: float = 1.0) -> "RhsSpec":
        return cls("coefficients", coefficients=((int(i), float(value)),), label=f"psi{i}")

    def flux(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for p in self.pieces:
            m = (x >= p.left) & (x < p.right)
            out[m] += p(x[m])
        return out

    def breakpoints(self) -> np.ndarray:
        pts = set()
        for p in self.pieces:
            pts.update((p.left, p.right))
        return np.array(sorted(pts))

    @property
    def degree(self) -> int:
        return max((len(p.coeffs) - 1 for p in self.pieces), default=0)

    @property
    def is_zero(self) -> bool:
        if self.kind == "coefficients":
            return all(v == 0 for _, v in self.coefficients)
        return all(all(c == 0 for c in p.coeffs) for p in self.pieces)


@dataclass
class ProblemSpec:
    """Parametric coefficient and right-hand side.

    ``term(j)`` gives theta_j for 1 <= j <= n_terms (``None`` means countably
    many).  ``tail_majorant(M)`` bounds sup_x sum_{j>M} |theta_j(x)|.
    """

    family: str
    params: dict
    mean: float
    term: Callable[[int], ExpansionFunction]
    n_terms: int | None
    tail_majorant: Callable[[int], float]
    rhs: RhsSpec
    r: float = field(init=False)
    R: float = field(init=False)

    def __post_init__(self):
        if self.n_terms is not None:
            terms = [self.term(j) for j in range(1, self.n_terms + 1)]
            self.r, self.R = uniform_ellipticity_check(self.mean, terms)
        else:
            fluct = self.tail_majorant(0)
            if self.mean - fluct <= 0:
                raise EllipticityError(
                    f"mean field {self.mean} minus fluctuation majorant {fluct} is not positive")
            self.r, self.R = self.mean - fluct, self.mean + fluct

    def terms(self, M: int) -> list[ExpansionFunction]:
        M = M if self.n_terms is None else min(M, self.n_terms)
        return [self.term(j) for j in range(1, M + 1)]

    def mean_function(self) -> ExpansionFunction:
        return ExpansionFunction("constant", self.mean)

    def coefficient(self, x, y) -> np.ndarray:
        """a(x, y) for a parameter vector y (missing entries are zero)."""
        x = np.asarray(x, dtype=float)
        out = self.mean * np.ones_like(x)
        for j, yj in enumerate(np.atleast_1d(y), start=1):
            if yj != 0:
                out = out + yj * self.term(j)(x)
        return out

    def describe(self) -> dict:
        return {"family": self.family, **self.params, "r": self.r, "R": self.R}

    def to_json(self) -> str:
        return json.dumps({"family": self.family, "params": self.params}, sort_keys=True)

    def with_rhs(self, rhs: RhsSpec) -> "ProblemSpec":
        return ProblemSpec(self.family, dict(self.params), self.mean, self.term, self.n_terms,
                           self.tail_majorant, rhs)


def inclusion_intervals(d: int) -> list[tuple[float, float]]:
    """Disjoint closed intervals D_j with dyadic end points.

    D_j = [(2j-1) h, 2j h] with h = 2**-ceil(log2(2d+1)), so consecutive
    inclusions are separated by gaps of width h.
    """
    h = 2.0 ** -math.ceil(math.log2(2 * d + 1))
    return [((2 * j - 1) * h, 2 * j * h) for j in range(1, d + 1)]


def make_inclusions(d: int, xi: float | Sequence[float] = 0.5, rhs: RhsSpec | None = None) -> ProblemSpec:
    """Piecewise constant inclusions a(y) = 1 + sum_j y_j b_j chi_{D_j}."""
    if d < 1:
        raise ValueError("d must be >= 1")
    b = np.broadcast_to(np.asarray(xi, dtype=float), (d,)).copy()
    if np.any(b >= 1) or np.any(b < 0):
        raise EllipticityError("inclusion amplitudes must lie in [0, 1)")
    iv = inclusion_intervals(d)

    def term(j: int) -> ExpansionFunction:
        lo, hi = iv[j - 1]
        return ExpansionFunction("indicator", float(b[j - 1]), left=lo, right=hi)

    def tail(M: int) -> float:
        return float(b[M:].max()) if M < d else 0.0

    params = {"d": d, "xi": float(b[0]) if np.all(b == b[0]) else b.tolist()}
    return ProblemSpec("inclusions", params, 1.0, term, d, tail, rhs or RhsSpec.one())


def hat_amplitude(alpha: float, floor: float) -> float:
    """c_alpha with sum over levels of c_alpha 2**(-alpha l) equal to 1 - floor."""
    return (1.0 - floor) * (1.0 - 2.0**-alpha)


def make_hat_expansion(alpha: float, floor: float = 0.5, levels: int | None = None,
                       rhs: RhsSpec | None = None) -> ProblemSpec:
    """Schauder hat expansion theta_j = c_alpha 2**(-alpha l) h(2**l x - k), j = 2**l + k.

    ``levels`` truncates the expansion to hat levels 0..levels-1; ``None``
    keeps all of them (the majorant tail is then a geometric series).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not 0 < floor < 1:
        raise ValueError("floor must lie in (0, 1)")
    c = hat_amplitude(alpha, floor)

    def term(j: int) -> ExpansionFunction:
        e = enumerate_expansion(j)
        if levels is not None and e.mu_level >= levels:
            raise IndexError(f"term {j} beyond truncation at {levels} levels")
        return ExpansionFunction("hat", c * 2.0 ** (-alpha * e.mu_level), level=e.mu_level,
                                 translate=e.mu_translate)

    def level_sum(l0: int) -> float:
        # sum over l >= l0 (up to the truncation) of c 2**(-alpha l)
        full = c * 2.0 ** (-alpha * l0) / (1.0 - 2.0**-alpha)
        if levels is not None:
            full -= c * 2.0 ** (-alpha * max(levels, l0)) / (1.0 - 2.0**-alpha)
        return max(full, 0.0)

    def tail(M: int) -> float:
        if M <= 0:
            return level_sum(0)
        e = enumerate_expansion(M)
        if levels is not None and e.mu_level >= levels:
            return 0.0
        if e.mu_translate == 2**e.mu_level - 1:
            return level_sum(e.mu_level + 1)
        # rest of the current level plus all finer levels
        return c * 2.0 ** (-alpha * e.mu_level) + level_sum(e.mu_level + 1)

    n_terms = None if levels is None else 2**levels - 1
    params = {"alpha": alpha, "floor": floor, "levels": levels}
    return ProblemSpec("hat", params, 1.0, term, n_terms, tail, rhs or RhsSpec.one())


def make_sine_expansion(beta: float, delta: float, rhs: RhsSpec | None = None,
                        n_terms: int | None = None) -> ProblemSpec:
    """Global expansion theta_j = delta j**(-beta) sin(j pi x), requiring sum_j c_j <= 1/2."""
    if beta <= 1:
        raise ValueError("beta must exceed 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    total = delta * float(zeta(beta))
    if total > 0.5:
        raise EllipticityError(f"sum of amplitudes {total:.6f} exceeds 1/2")

    def term(j: int) -> ExpansionFunction:
        return ExpansionFunction("sine", delta * j**-beta, freq=j)

    def tail(M: int) -> float:
        if n_terms is not None and M >= n_terms:
            return 0.0
        full = delta * float(zeta(beta, M + 1))
        if n_terms is not None:
            full -= delta * float(zeta(beta, n_terms + 1))
        return max(full, 0.0)

    params = {"beta": beta, "delta": delta}
    return ProblemSpec("sine", params, 1.0, term, n_terms, tail, rhs or RhsSpec.one())


def lowerbound_amplitudes(d: int, q: float = 1.0, iota: float = 0.1, scale: float = 0.5) -> np.ndarray:
    """b_j = scale * j**(-1/q - iota)."""
    j = np.arange(1, d + 1, dtype=float)
    return scale * j ** (-1.0 / q - iota)


def make_lowerbound_f(spec: ProblemSpec, q: float = 1.0) -> RhsSpec:
    """f = -sum_j c_j h_j'' with hats h_j on D_j and c_j = b_j**(q/2) sqrt(|D_j|).

    The weak form is <f, v> = sum_j c_j integral of h_j' v', so the flux is
    piecewise constant: +-2 c_j / |D_j| on the two halves of D_j.
    """
    if spec.family != "inclusions":
        raise ValueError("the lower-bound right-hand side needs an inclusion problem")
    pieces = []
    for j in range(1, spec.n_terms + 1):
        t = spec.term(j)
        width = t.right - t.left
        c = t.amplitude ** (q / 2) * math.sqrt(width)
        mid = 0.5 * (t.left + t.right)
        pieces.append(FluxPiece(t.left, mid, (2 * c / width,)))
        pieces.append(FluxPiece(mid, t.right, (-2 * c / width,)))
    return RhsSpec("flux", tuple(pieces), label=f"lowerbound-q{q}")


def make_lowerbound_problem(d: int = 64, q: float = 1.0, iota: float = 0.1,
                            scale: float = 0.5) -> ProblemSpec:
    spec = make_inclusions(d, lowerbound_amplitudes(d, q, iota, scale))
    spec = spec.with_rhs(make_lowerbound_f(spec, q))
    spec.family = "inclusions"
    spec.params = {"d": d, "q": q, "iota": iota, "scale": scale, "rhs": "lowerbound"}
    return spec


def make_problem(name: str, **kw) -> ProblemSpec:
    """Build a problem from a family tag and keyword parameters."""
    if name in ("inclusions", "inclusions-1d"):
        return make_inclusions(int(kw.get("d", 2)), float(kw.get("xi", 0.5)))
    if name in ("hat", "hat-expansion"):
        lv = kw.get("levels")
        return make_hat_expansion(float(kw.get("alpha", 1.0)), float(kw.get("floor", 0.5)),
                                  None if lv in (None, "", "none") else int(lv))
    if name in ("sine", "sine-expansion"):
        nt = kw.get("terms")
        return make_sine_expansion(float(kw.get("beta", 2.0)), float(kw.get("delta", 0.3)),
                                   n_terms=None if nt in (None, "", "none") else int(nt))
    if name in ("lowerbound", "lowerbound-f"):
        return make_lowerbound_problem(int(kw.get("d", 64)), float(kw.get("q", 1.0)),
                                       float(kw.get("iota", 0.1)))
    raise ValueError(f"unknown problem family {name!r}")
