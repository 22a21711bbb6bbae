"""Perturbed Richardson iteration with recompression and coarsening, for any coefficient format."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .formats import (
    HTuckerCoeffs,
    LowRankCoeffs,
    SparseCoeffs,
    coarsen,
    recompress,
    sparse_coarsen,
)
from .indices import MultiIndex
from .operator import BudgetExhausted, CompressedOperator
from .problems import RhsSpec
from .wavelets import WaveletBasis, gauss_rule, local_legendre

FORMATS = ("asp", "lr", "ht")


def derive_iteration_params(op: CompressedOperator) -> tuple[float, float, float]:
    """(omega, rho, lambda) from the certified spectral bounds of the operator."""
    lam, Lam = op.lambda_lb, op.norm_ub
    if lam <= 0:
        raise ValueError("lower spectral bound must be positive")
    omega = 2.0 / (lam + Lam)
    rho = (Lam - lam) / (Lam + lam)
    return omega, rho, lam


def ht_kappa_defaults(d: int, alpha: float = 1.0) -> tuple[float, float, float]:
    """Error splitting for the hierarchical format with d tensor modes."""
    if d < 2:
        raise ValueError("d must be >= 2")
    s = math.sqrt(2 * d - 3)
    k1 = 1.0 / (1.0 + (1.0 + alpha) * (math.sqrt(d) + s + math.sqrt(d * (2 * d - 3))))
    return k1, s * (1.0 + alpha) * k1, math.sqrt(d) * (1.0 + s) * (1.0 + alpha) * k1


def inner_steps(rho: float, omega: float, beta: float, kappa1: float) -> int:
    """J = min{j : rho**j (1 + (omega + beta) j) <= kappa1 / 2}."""
    j = 0
    while rho**j * (1.0 + (omega + beta) * j) > 0.5 * kappa1:
        j += 1
        if j > 10**6:
            raise ValueError("no finite inner step count for these parameters")
    return j


@dataclass
class SolverConfig:
    eps: float
    format: str = "asp"
    omega: float | None = None
    rho: float | None = None
    lam: float | None = None
    kappa: tuple[float, float, float] | None = None
    beta: float | None = None
    weight_exponent: float = 2.0
    ht_alpha: float = 1.0
    max_outer: int = 60
    max_inner_total: int = 2000

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def resolve(self, op: CompressedOperator, d: int | None = None) -> "SolverConfig":
        """Fill unset parameters from the operator and format defaults, then validate."""
        omega, rho, lam = derive_iteration_params(op)
        cfg = SolverConfig(**{**asdict(self)})
        cfg.omega = omega if self.omega is None else self.omega
        cfg.rho = rho if self.rho is None else self.rho
        cfg.lam = lam if self.lam is None else self.lam
        if cfg.beta is None:
            cfg.beta = 0.0 if self.format == "asp" else 1.0
        if cfg.kappa is None:
            if self.format == "ht":
                cfg.kappa = ht_kappa_defaults(max((d or 1) + 1, 2), self.ht_alpha)
            else:
                cfg.kappa = (1 / 3, 1 / 3, 1 / 3)
        cfg.kappa = tuple(float(k) for k in cfg.kappa)
        if not all(0 < k < 1 for k in cfg.kappa) or sum(cfg.kappa) > 1 + 1e-12:
            raise ValueError("kappa values must lie in (0,1) with sum <= 1")
        if not 0 <= cfg.rho < 1 or cfg.omega <= 0 or cfg.lam <= 0 or cfg.beta < 0:
            raise ValueError("invalid iteration parameters")
        return cfg

    def inner_steps(self) -> int:
        return inner_steps(self.rho, self.omega, self.beta, self.kappa[0])


# -- right-hand side ----------------------------------------------------------


class RhsSource:
    """Wavelet coefficients of a y-independent right-hand side on the spatial window.

    The full window vector is computed once by exact Gauss integration of the
    piecewise polynomial flux; ``rhs(eta)`` returns its best N-term
    approximation with discarded norm <= eta, in the requested format.
    """

    def __init__(self, rhs: RhsSpec, basis: WaveletBasis, d: int | None = None):
        self.spec = rhs
        self.basis = basis
        self.d = d
        self.nx = basis.size()
        self.coeffs = self._window_coefficients()
        self.norm = float(np.linalg.norm(self.coeffs))
        self.outside_window = self._outside_norm()
        self._cache: dict = {}

    def _cell_moments(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Cell-wise Legendre moments of the flux and its squared L2 norm per cell."""
        k = self.basis.order
        ncell = 2**level
        h = 1.0 / ncell
        q = (self.spec.degree + k) // 2 + 2
        t, w = gauss_rule(q)
        s = np.zeros((ncell, k))
        sq = np.zeros(ncell)
        for piece in self.spec.pieces:
            lo = int(math.floor(piece.left * ncell + 1e-12))
            hi = int(math.ceil(piece.right * ncell - 1e-12))
            for c in range(max(lo, 0), min(hi, ncell)):
                a = max(piece.left, c * h)
                b = min(piece.right, (c + 1) * h)
                if b <= a:
                    continue
                x = a + (b - a) * t
                vals = piece(x)
                phi = local_legendre(k, x * ncell - c) * math.sqrt(ncell)
                s[c] += phi @ (vals * w * (b - a))
                sq[c] += np.sum(vals**2 * w * (b - a))
        return s, sq

    def _window_coefficients(self) -> np.ndarray:
        out = np.zeros(self.nx)
        if self.spec.kind == "coefficients":
            for i, v in self.spec.coefficients:
                if not 0 <= i < self.nx:
                    raise ValueError(f"coefficient id {i} outside the window")
                out[i] += v
            return out
        s, _ = self._cell_moments(self.basis.max_level)
        return self.basis.from_single_scale(s)

    def _outside_norm(self) -> float:
        """Norm of the flux part not represented on the window (constant part excluded)."""
        if self.spec.kind == "coefficients":
            return 0.0
        s, sq = self._cell_moments(self.basis.max_level)
        # the window plus the constant spans all cell-wise polynomials
        total, inside = float(sq.sum()), float(np.sum(s**2))
        return math.sqrt(max(total - inside, 0.0))

    def sparse(self, eta: float = 0.0) -> tuple[SparseCoeffs, float]:
        nz = np.nonzero(self.coeffs)[0]
        m = sp.csr_matrix((self.coeffs[nz], (np.zeros(nz.size, dtype=int), nz)), shape=(1, self.nx))
        full = SparseCoeffs(self.nx, [MultiIndex.zero()], m)
        out = sparse_coarsen(full, eta) if eta > 0 else full
        err = math.sqrt(max(full.norm() ** 2 - out.norm() ** 2, 0.0))
        return out, err

    def __call__(self, eta: float, fmt: str = "asp"):
        """(approximation in format ``fmt``, certified error)."""
        key = (fmt, eta)
        if key in self._cache:
            return self._cache[key]
        v, err = self.sparse(eta)
        if fmt == "lr":
            v = v.to_lowrank()
        elif fmt == "ht":
            v = self.as_htucker(v)
        self._cache[key] = (v, err)
        return v, err

    def as_htucker(self, v: SparseCoeffs) -> HTuckerCoeffs:
        if self.d is None:
            raise ValueError("hierarchical format needs a finite parameter count")
        x = np.asarray(v.mat.toarray()).ravel() if v.nnz else np.zeros(self.nx)
        sx = np.nonzero(x)[0]
        if sx.size == 0:
            return HTuckerCoeffs.zero(self.nx, self.d)
        supports = [sx] + [np.array([0])] * self.d
        vectors = [x[sx]] + [np.ones(1)] * self.d
        return HTuckerCoeffs.elementary(self.nx, supports, vectors)


# -- driver -------------------------------------------------------------------


@dataclass
class IterationRecord:
    k: int
    j: int
    eta_j: float
    res_norm: float
    bound: float
    rank: int | None
    supp_x: int
    supp_y: int
    macs: int


@dataclass
class OuterRecord:
    k: int
    delta_k: float
    inner: int
    exit_bound: float
    after_coarsen_bound: float
    rank: int | None
    supp_x: int
    supp_y: int


@dataclass
class RunReport:
    config: dict
    problem: dict
    iterations: list = field(default_factory=list)
    outer: list = field(default_factory=list)
    final_bound: float = 0.0
    status: str = "ok"
    delta: float = 0.0
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def records(self) -> list[dict]:
        return [asdict(r) for r in self.iterations]

    def to_dict(self, timing: bool = False) -> dict:
        out = {"config": self.config, "problem": self.problem, "iterations": self.records(),
               "outer": [asdict(o) for o in self.outer], "final_bound": self.final_bound,
               "status": self.status, "delta": self.delta, "metrics": self.metrics}
        if timing:
            out["wall_time"] = self.wall_time
        return out

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(self.to_dict(timing), sort_keys=True, default=_json_default)

    def digest(self) -> str:
        """Hash of the report without timing information."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def _metrics(v) -> dict:
    m = v.metrics()
    return {"rank": m.get("rank"), "supp_x": m["supp_x"], "supp_y": m["supp_y"], "dof": m["dof"]}


def _zero_like(fmt: str, nx: int, d: int | None):
    if fmt == "asp":
        return SparseCoeffs.zero(nx)
    if fmt == "lr":
        return LowRankCoeffs.zero(nx)
    return HTuckerCoeffs.zero(nx, d)


def solve(op: CompressedOperator, rhs: RhsSource, cfg: SolverConfig):
    """Run the adaptive iteration; returns (u_eps, RunReport).

    Raises :class:`BudgetExhausted` when the expansion cap is too small for
    the requested accuracy.
    """
    t0 = time.perf_counter()
    d = op.problem.n_terms
    if cfg.format == "ht" and d is None:
        raise ValueError("hierarchical format needs finitely many expansion terms")
    cfg = cfg.resolve(op, d)
    report = RunReport(config=_config_dict(cfg), problem=op.problem.describe())
    omega, rho, lam, beta = cfg.omega, cfg.rho, cfg.lam, cfg.beta
    k1, k2, k3 = cfg.kappa
    J = cfg.inner_steps()
    report.config["J"] = J
    u = _zero_like(cfg.format, op.nx, d)
    delta = rhs.norm / lam
    report.delta = delta
    bound_u = delta
    k = 0
    total_inner = 0
    op.counters.reset()
    while delta / 2**k > cfg.eps:
        if k >= cfg.max_outer or total_inner >= cfg.max_inner_total:
            report.status = "budget"
            raise BudgetExhausted("iteration budget exhausted")
        dk = delta / 2**k
        w = u
        j = 0
        exit_bound = math.inf
        while True:
            eta = rho ** (j + 1) * dk
            aw, _ = op.apply(w, 0.5 * eta)
            f, _ = rhs(0.5 * eta, cfg.format)
            r = aw.add(f, -1.0)
            rn = r.norm()
            w = recompress(w.add(r, -omega), beta * eta)
            j += 1
            total_inner += 1
            exit_bound = rho * rn / lam + (rho / lam + omega + beta) * eta
            m = _metrics(w)
            report.iterations.append(IterationRecord(k, j, eta, rn, exit_bound, m["rank"], m["supp_x"],
                                                     m["supp_y"], op.counters.total))
            if j >= J or exit_bound <= k1 * dk / 2:
                break
            if total_inner >= cfg.max_inner_total:
                report.status = "budget"
                raise BudgetExhausted("iteration budget exhausted")
        if exit_bound > k1 * dk / 2:
            # a priori guarantee of J steps
            exit_bound = rho**J * (1 + (omega + beta) * J) * dk
        u = coarsen(recompress(w, k2 * dk / 2), k3 * dk / 2)
        after = exit_bound + (k2 + k3) * dk / 2
        bound_u = after
        m = _metrics(u)
        report.outer.append(OuterRecord(k, dk, j, exit_bound, after, m["rank"], m["supp_x"], m["supp_y"]))
        k += 1
    report.final_bound = bound_u
    report.metrics = {**_metrics(u), "macs": op.counters.total, "outer": k, "inner": total_inner,
                      "counters": op.counters.as_dict()}
    report.wall_time = time.perf_counter() - t0
    return u, report


def _config_dict(cfg: SolverConfig) -> dict:
    d = asdict(cfg)
    d["kappa"] = list(cfg.kappa)
    return d


def check_report(report: dict, rtol: float = 1e-12) -> bool:
    """Re-derive every logged bound of a serialized report from its own records."""
    cfg = report["config"]
    omega, rho, lam, beta = cfg["omega"], cfg["rho"], cfg["lam"], cfg["beta"]
    k1, k2, k3 = cfg["kappa"]
    J = cfg["J"]
    delta = report["delta"]

    def close(a: float, b: float) -> bool:
        return abs(a - b) <= rtol * max(abs(a), abs(b), 1e-300)

    for it in report["iterations"]:
        dk = delta / 2 ** it["k"]
        if not close(it["eta_j"], rho ** it["j"] * dk):
            return False
        expect = rho * it["res_norm"] / lam + (rho / lam + omega + beta) * it["eta_j"]
        if not close(it["bound"], expect):
            return False
    last = delta
    for o in report["outer"]:
        dk = o["delta_k"]
        if not close(dk, delta / 2 ** o["k"]):
            return False
        steps = [it for it in report["iterations"] if it["k"] == o["k"]]
        if not steps or len(steps) != o["inner"]:
            return False
        tail = steps[-1]["bound"]
        if tail <= k1 * dk / 2:
            exit_ok = close(o["exit_bound"], tail)
        else:
            exit_ok = close(o["exit_bound"], rho**J * (1 + (omega + beta) * J) * dk) and o["inner"] >= J
        if not exit_ok or not close(o["after_coarsen_bound"], o["exit_bound"] + (k2 + k3) * dk / 2):
            return False
        last = o["after_coarsen_bound"]
    return close(report["final_bound"], last)
