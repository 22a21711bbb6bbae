"""Command-line harness: solve, decay, compare and oracle experiments.

Configuration is merged from built-in defaults, ``--config`` files (flat
``key = value`` lines, ``include <path>`` pulls in another file) and explicit
flags, in that order of precedence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .formats import save
from .indices import MultiIndex
from .operator import BudgetExhausted, CompressedOperator
from .oracle import ReferenceSolution, fit_decay, rank_profile, reference_solve, resolved_range
from .problems import ProblemSpec, RhsSpec, make_problem
from .solver import RhsSource, SolverConfig, check_report, solve
from .spatial import EllipticityError
from .svgplot import write_loglog
from .wavelets import WaveletBasis

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID, EXIT_BUDGET = 0, 1, 2, 3

DEFAULTS: dict[str, str] = {
    "problem": "hat",
    "alpha": "1.0",
    "floor": "0.5",
    "levels": "none",
    "beta": "2.0",
    "delta": "0.3",
    "terms": "none",
    "d": "2",
    "xi": "0.5",
    "q": "1.0",
    "iota": "0.1",
    "rhs": "one",
    "format": "asp",
    "formats": "asp,lr",
    "eps": "1e-2",
    "lmax": "7",
    "mmax": "none",
    "rank_cap": "none",
    "oracle_tol": "1e-5",
    "min_indices": "0",
    "max_indices": "200000",
    "out": "out",
    "seed": "0",
    "jobs": "1",
}


class ConfigError(ValueError):
    pass


def read_config(path: str | Path, seen: set | None = None) -> dict[str, str]:
    """Parse a key = value file; ``include other.cfg`` is resolved relative to the file."""
    path = Path(path).resolve()
    seen = set() if seen is None else seen
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    seen.add(path)
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include"):
            target = line[len("include"):].strip()
            if not target:
                raise ConfigError(f"{path}:{lineno}: include without a path")
            out.update(read_config(path.parent / target, seen))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _opt_int(text: str) -> int | None:
    return None if text.lower() in ("", "none") else int(text)


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.raw) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        self.raw = {**DEFAULTS, **self.raw}
        if self.format not in ("asp", "lr", "ht") or any(f not in ("asp", "lr", "ht") for f in self.formats):
            raise ConfigError("formats must be among asp, lr, ht")
        eps = self.eps
        if not eps or any(e <= 0 for e in eps):
            raise ConfigError("eps values must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("eps list must be strictly descending")
        for cap in ("lmax", "mmax", "rank_cap", "jobs"):
            v = _opt_int(self.raw[cap])
            if v is not None and v <= 0:
                raise ConfigError(f"{cap} must be positive")

    def __getattr__(self, key):
        if key == "raw":
            raise AttributeError(key)
        try:
            return self.raw[key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def eps(self) -> list[float]:
        return [float(e) for e in str(self.raw["eps"]).split(",") if e.strip()]

    @property
    def formats(self) -> list[str]:
        return [f.strip() for f in str(self.raw["formats"]).split(",") if f.strip()]

    @property
    def level(self) -> int:
        return int(self.raw["lmax"])

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out"])

    def problem_key(self) -> dict:
        keys = ("problem", "alpha", "floor", "levels", "beta", "delta", "terms", "d", "xi", "q", "iota", "rhs")
        return {k: self.raw[k] for k in keys}

    def build_problem(self) -> ProblemSpec:
        r = self.raw
        spec = make_problem(r["problem"], alpha=r["alpha"], floor=r["floor"], levels=r["levels"],
                            beta=r["beta"], delta=r["delta"], terms=r["terms"], d=r["d"], xi=r["xi"],
                            q=r["q"], iota=r["iota"])
        if r["rhs"] == "zero":
            spec = spec.with_rhs(RhsSpec.zero())
            spec.params["rhs"] = "zero"
        elif r["rhs"] != "one":
            raise ConfigError(f"unknown right-hand side {r['rhs']!r}")
        return spec

    def digest(self, *keys: str) -> str:
        sel = {k: self.raw[k] for k in keys} if keys else self.raw
        return hashlib.sha256(json.dumps(sel, sort_keys=True).encode()).hexdigest()[:16]


# -- running cells -------------------------------------------------------------


def _operator(cfg: ExperimentConfig, problem: ProblemSpec) -> CompressedOperator:
    return CompressedOperator(problem, WaveletBasis(2, cfg.level), m_max=_opt_int(cfg.raw["mmax"]))


def run_cell(raw: dict, fmt: str, eps: float) -> dict:
    """One (format, eps) solve; returns a summary row plus the serialized report."""
    cfg = ExperimentConfig(dict(raw))
    problem = cfg.build_problem()
    op = _operator(cfg, problem)
    rhs = RhsSource(problem.rhs, op.basis, problem.n_terms)
    t0 = time.perf_counter()
    u, report = solve(op, rhs, SolverConfig(eps, fmt))
    wall = time.perf_counter() - t0
    m = report.metrics
    cap = _opt_int(cfg.raw["rank_cap"])
    if cap is not None and m["rank"] is not None and max(np.atleast_1d(m["rank"])) > cap:
        raise BudgetExhausted(f"final rank {m['rank']} exceeds the rank cap {cap}")
    doc = report.to_dict()
    doc["experiment"] = {**cfg.raw, "format": fmt, "eps": repr(eps)}
    doc["version"] = __version__
    doc["chain_verified"] = check_report(doc)
    row = {"format": fmt, "eps": eps, "certified_bound": report.final_bound,
           "rank": "" if m["rank"] is None else json.dumps(m["rank"]),
           "supp_x": m["supp_x"], "supp_y": m["supp_y"], "dof": m["dof"], "macs": m["macs"],
           "wall_time": round(wall, 3)}
    return {"row": row, "report": doc, "u": u}


def _cells(cfg: ExperimentConfig, cells: list[tuple[str, float]]) -> list[dict]:
    jobs = int(cfg.raw["jobs"])
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(cfg.raw, f, e) for f, e in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futs = [pool.submit(run_cell, cfg.raw, f, e) for f, e in cells]
        return [f.result() for f in futs]


def _tag(fmt: str, eps: float) -> str:
    return f"{fmt}_eps{eps:.0e}".replace("+", "")


def cmd_solve(cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    for res in _cells(cfg, [(cfg.format, e) for e in cfg.eps]):
        row, doc = res["row"], res["report"]
        tag = _tag(row["format"], row["eps"])
        (out / f"report_{tag}.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        save(res["u"], out / f"u_{tag}.npz")
        counters = doc["metrics"]["counters"]
        print(f"{row['format']} eps={row['eps']:.1e} bound={row['certified_bound']:.4e} "
              f"rank={row['rank'] or '-'} supp_x={row['supp_x']} supp_y={row['supp_y']} dof={row['dof']} "
              f"macs={row['macs']} counters={json.dumps(counters, sort_keys=True)}")
    return EXIT_OK


COMPARE_COLUMNS = ("format", "eps", "certified_bound", "rank", "supp_x", "supp_y", "dof", "macs", "wall_time")


def cmd_compare(cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cells = [(f, e) for f in cfg.formats for e in cfg.eps]
    rows = [r["row"] for r in _cells(cfg, cells)]
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "eps": repr(r["eps"]), "certified_bound": repr(r["certified_bound"])})
    series = {}
    for f in cfg.formats:
        sel = [r for r in rows if r["format"] == f]
        series[f] = (np.array([max(r["macs"], 1) for r in sel]), np.array([r["certified_bound"] for r in sel]))
    write_loglog(out / "compare.svg", series, title="certified bound against work",
                 xlabel="multiply-adds", ylabel="certified bound")
    for r in rows:
        print(",".join(str(r[c]) for c in COMPARE_COLUMNS))
    return EXIT_OK


# -- oracle and decay ----------------------------------------------------------

ORACLE_KEYS = ("lmax", "mmax", "oracle_tol", "min_indices", "max_indices")


def oracle_reference(cfg: ExperimentConfig) -> tuple[ReferenceSolution, bool, Path]:
    """Reference solution for the configured problem, cached by configuration hash."""
    key = cfg.digest(*cfg.problem_key(), *ORACLE_KEYS)
    cache = cfg.out_dir / "cache" / f"oracle-{key}.npz"
    if cache.exists():
        with np.load(cache) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            nus = [MultiIndex.from_text(t) for t in meta["nus"]]
            ref = ReferenceSolution(nus, z["U"], meta["eps_ref"], meta["residual"], meta["tail"], meta["rounds"])
        return ref, True, cache
    problem = cfg.build_problem()
    ref = reference_solve(problem, WaveletBasis(2, cfg.level), float(cfg.raw["oracle_tol"]),
                          M=_opt_int(cfg.raw["mmax"]), min_indices=int(cfg.raw["min_indices"]),
                          max_indices=int(cfg.raw["max_indices"]))
    cache.parent.mkdir(parents=True, exist_ok=True)
    meta = {"nus": [nu.to_text() for nu in ref.nus], "eps_ref": ref.eps_ref, "residual": ref.residual,
            "tail": ref.tail, "rounds": ref.rounds, "config": {k: cfg.raw[k] for k in sorted(cfg.raw)}}
    with open(cache, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), U=ref.U)
    return ref, False, cache


DECAY_COLUMNS = ("n", "sigma_n", "pi_x_n", "pi_y_n", "entry_n")
_PROFILE_KEYS = {"sigma_n": "sigma", "pi_x_n": "pi_x", "pi_y_n": "pi_y", "entry_n": "entries"}


def decay_rows(profile: dict, per_octave: int = 32) -> list[dict]:
    """Rows n = 1..N for the short profiles, log-spaced n beyond that for the entries."""
    short = max(profile[k].size for k in ("sigma", "pi_x", "pi_y"))
    total = max(short, profile["entries"].size)
    ns = list(range(1, short + 1))
    if total > short:
        extra = np.unique(np.round(np.geomspace(short + 1, total, max(2, int(per_octave * np.log2(total / short))))))
        ns += [int(n) for n in extra if n > short]
    rows = []
    for n in ns:
        row = {"n": n}
        for col, key in _PROFILE_KEYS.items():
            v = profile[key]
            row[col] = repr(float(v[n - 1])) if n <= v.size else ""
        rows.append(row)
    return rows


def decay_fits(profile: dict, n_terms: int | None, targets: dict | None = None) -> list[dict]:
    """Slope fits over the resolved window of each profile; failed fits are flagged."""
    out = []
    for col, key in _PROFILE_KEYS.items():
        v = profile[key]
        if n_terms is not None:
            lo, hi = resolved_range(key, n_terms)
        else:
            lo, hi = 1, v.size
        row = {"quantity": col, "n_lo": lo, "n_hi": min(hi, v.size), "slope": "", "residual": "",
               "points": 0, "target": "" if not targets else repr(targets[key]), "status": "ok"}
        try:
            s, res, pts = fit_decay(v, lo, hi)
            row.update(slope=repr(s), residual=repr(res), points=pts)
        except ValueError as exc:
            row["status"] = f"degenerate: {exc}"
        out.append(row)
    return out


def _targets(problem: ProblemSpec) -> dict | None:
    if problem.family != "hat":
        return None
    a = float(problem.params["alpha"])
    return {"sigma": -(a + 0.5), "pi_x": -(a + 0.5), "pi_y": -(a + 0.5), "entries": -(2 * a / 3 + 0.5)}


def _write_profile(path: Path, profile: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DECAY_COLUMNS)
        w.writeheader()
        w.writerows(decay_rows(profile))


def cmd_oracle(cfg: ExperimentConfig) -> int:
    ref, hit, cache = oracle_reference(cfg)
    profile = rank_profile(ref.U)
    path = cfg.out_dir / f"oracle_profile_{cache.stem.split('-', 1)[1]}.csv"
    _write_profile(path, profile)
    print(f"oracle {'cache hit' if hit else 'computed'}: {cache} indices={len(ref.nus)} "
          f"eps_ref={ref.eps_ref:.3e} profile={path}")
    return EXIT_OK


def cmd_decay(cfg: ExperimentConfig) -> int:
    problem = cfg.build_problem()
    ref, _, cache = oracle_reference(cfg)
    profile = rank_profile(ref.U)
    key = cache.stem.split("-", 1)[1]
    out = cfg.out_dir
    _write_profile(out / f"decay_{key}.csv", profile)
    fits = decay_fits(profile, problem.n_terms, _targets(problem))
    with open(out / f"decay_fit_{key}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fits[0]))
        w.writeheader()
        w.writerows(fits)
    series = {col: (np.arange(1, profile[k].size + 1), profile[k]) for col, k in _PROFILE_KEYS.items()}
    write_loglog(out / f"decay_{key}.svg", series, title="ordered decay profiles", xlabel="n", ylabel="value")
    for f in fits:
        print(f"{f['quantity']}: slope={f['slope'] or '-'} window=[{f['n_lo']},{f['n_hi']}] "
              f"residual={f['residual'] or '-'} target={f['target'] or '-'} {f['status']}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "decay": cmd_decay, "compare": cmd_compare, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paramsolve", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", action="append", default=[], help="key = value file (repeatable)")
        p.add_argument("--problem", choices=["inclusions", "hat", "sine", "lowerbound"])
        for flag in ("alpha", "beta", "delta", "xi", "eps", "lmax", "mmax", "out", "seed", "jobs", "d",
                     "levels", "formats", "rhs", "oracle_tol", "min_indices"):
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag)
        p.add_argument("--format", choices=["asp", "lr", "ht"])
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict[str, str] = {}
    for path in args.config:
        raw.update(read_config(path))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = str(val)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        raw[k.replace("-", "_")] = v
    return ExperimentConfig(raw)


def _fail(code: int, reason: str, detail: str) -> int:
    print(json.dumps({"status": "error", "reason": reason, "detail": detail}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        cfg.build_problem()
    except EllipticityError as exc:
        return _fail(EXIT_INVALID, "ellipticity", str(exc))
    except (ConfigError, ValueError, OSError) as exc:
        return _fail(EXIT_INVALID, "invalid", str(exc))
    try:
        return COMMANDS[args.command](cfg)
    except BudgetExhausted as exc:
        return _fail(EXIT_BUDGET, "budget", str(exc))
    except RuntimeError as exc:
        if "budget" in str(exc):
            return _fail(EXIT_BUDGET, "budget", str(exc))
        traceback.print_exc()
        return _fail(EXIT_INTERNAL, "internal", str(exc))
    except Exception as exc:  # noqa: BLE001
        traceback.print_exc()
        return _fail(EXIT_INTERNAL, "internal", str(exc))


if __name__ == "__main__":
    sys.exit(main())
