"""Command line entry point: ``wkam <subcommand> [config.toml] [flags]``.

Exit status: 0 success, 1 verification failure or solver breakdown,
2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .core import FAMILIES, CouplingMatrix, ExpressionPotential, HamiltonianSpec, TablePotential, check_assumptions
from .evolve import (
    CFLError,
    ConvergenceError,
    DivergenceError,
    normalize_spec,
    solve_adjoint,
    solve_cauchy_regularized,
    solve_ergodic,
)
from .grid import PeriodicGrid, lipschitz_constant, mollify
from .io import (
    blob_sha1,
    measure_summary,
    write_json,
    write_measure_csv,
    write_slab_binary,
    write_slab_csv,
    write_table_csv,
)
from .mather import (
    LPError,
    TruncationError,
    VelocityGrid,
    assemble_lp,
    measure_from_adjoint,
    sample_optimal_face,
    solve_mather_lp,
    uniqueness_set,
)
from .verify import PreconditionError, check_comparison, eikonal_solutions, example_measure

SUBCOMMANDS = ("check", "ergodic", "cauchy", "adjoint", "mather-lp", "mather-adjoint", "compare",
               "uniqueness-set", "suite")

DEFAULTS = {
    "problem": {"family": "quadratic", "potential": "sin(pi*x)**2", "coupling": [[0.0, 1.0], [1.0, 0.0]],
                "d": 1, "m": 2, "shift": 0.0},
    "discretization": {"N": 64, "Nq": 17, "eps": [0.2, 0.1, 0.05], "dt_safety": 0.5},
    "solver": {"tol": 1e-9, "max_iter": 100, "lp_method": "highs-ds", "seed": 0, "x0": 0.0, "k": 0,
               "samples": 32, "mass_threshold": 1e-6, "sample_budget": 1000},
    "output": {"dir": "wkam-out", "formats": ["csv", "json"]},
    "compare": {"anchors1": [0.0, 0.5], "anchors2": [0.0], "values1": None, "values2": None, "shift2": 0.0},
}

KNOWN = {block: set(keys) | ({"potential_table", "A"} if block == "problem" else set()) | (
    {"Qmax"} if block == "discretization" else set()) for block, keys in DEFAULTS.items()}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def load_config(path: Path | None) -> tuple[dict, dict]:
    """Merged configuration and the raw text hashes of every input file."""
    raw = {}
    inputs = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        data = path.read_bytes()
        inputs[str(path)] = blob_sha1(data)
        try:
            raw = tomllib.loads(data.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = {}
    for block, defaults in DEFAULTS.items():
        given = raw.get(block, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{block}] must be a table")
        unknown = set(given) - KNOWN[block]
        if unknown:
            raise ConfigError(f"[{block}]: unknown field(s) {', '.join(sorted(unknown))}")
        cfg[block] = {**defaults, **given}
    extra = set(raw) - set(DEFAULTS)
    if extra:
        raise ConfigError(f"unknown block(s) {', '.join(sorted(extra))}")
    table = cfg["problem"].get("potential_table")
    if table is not None:
        tpath = Path(table)
        if not tpath.is_absolute() and path is not None:
            tpath = path.parent / tpath
        if not tpath.is_file():
            raise ConfigError(f"[problem].potential_table: file {tpath} does not exist")
        inputs[str(tpath)] = blob_sha1(tpath.read_bytes())
        cfg["problem"]["potential_table"] = str(tpath)
    return cfg, inputs


def apply_overrides(cfg: dict, args) -> dict:
    if args.grid is not None:
        cfg["discretization"]["N"] = args.grid
    if args.eps is not None:
        try:
            cfg["discretization"]["eps"] = [float(e) for e in args.eps.split(",") if e.strip()]
        except ValueError as exc:
            raise ConfigError(f"--eps: {exc}") from exc
    if args.tol is not None:
        cfg["solver"]["tol"] = args.tol
    if args.seed is not None:
        cfg["solver"]["seed"] = args.seed
    if args.out is not None:
        cfg["output"]["dir"] = args.out
    return cfg


def _load_table(path: str, d: int, m: int) -> np.ndarray:
    if path.endswith(".npy"):
        values = np.load(path)
    else:
        values = np.atleast_2d(np.loadtxt(path, delimiter=","))
    if values.ndim == d:
        values = values[None]
    if values.shape[0] != m or values.ndim != d + 1:
        raise ConfigError(f"[problem].potential_table: shape {values.shape} does not match d={d}, m={m}")
    return values


def build_problem(cfg: dict) -> tuple[HamiltonianSpec, CouplingMatrix]:
    p = cfg["problem"]
    try:
        d, m = int(p["d"]), int(p["m"])
        if p["family"] not in FAMILIES:
            raise ConfigError(f"[problem].family: {p['family']!r} not one of {FAMILIES}")
        c = CouplingMatrix(np.array(p["coupling"], dtype=float).reshape(m, m))
        if p.get("potential_table"):
            potential = TablePotential(_load_table(p["potential_table"], d, m), source=p["potential_table"])
        else:
            potential = ExpressionPotential(p["potential"], d=d, m=m)
        spec = HamiltonianSpec(p["family"], potential, d, m, float(p["shift"]), p.get("A"))
    except ConfigError:
        raise
    except (ValueError, TypeError, SyntaxError) as exc:
        raise ConfigError(f"[problem]: {exc}") from exc
    if not c.is_symmetric:
        warnings.warn("coupling matrix is not symmetric; run `check` for the assumption report", stacklevel=2)
    return spec, c


def _eps_list(cfg) -> list[float]:
    eps = cfg["discretization"]["eps"]
    eps = [float(eps)] if np.isscalar(eps) else [float(e) for e in eps]
    if not eps or any(not 0 < e <= 1 for e in eps):
        raise ConfigError(f"[discretization].eps: values must lie in (0, 1], got {eps}")
    return eps


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


class _Run:
    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = out
        self.formats = set(cfg["output"]["formats"])
        self.record = {"theta": {}, "dt": {}}
        self.spec, self.c = build_problem(cfg)
        disc = cfg["discretization"]
        try:
            self.grid = PeriodicGrid(self.spec.d, int(disc["N"]), self.spec.m)
            self.tol = float(cfg["solver"]["tol"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[discretization]: {exc}") from exc

    def json(self, name, payload):
        if "json" in self.formats:
            write_json(self.out / name, payload)

    def ergodic(self):
        if not hasattr(self, "_erg"):
            s = self.cfg["solver"]
            self._erg = solve_ergodic(self.spec, self.c, self.grid, self.tol, max_iter=int(s["max_iter"]))
            self.record["theta"]["ergodic"] = self._erg.meta["theta"]
        return self._erg

    def normalized(self):
        return normalize_spec(self.spec, self.ergodic().lam)

    def vgrid(self, lipschitz=None):
        disc = self.cfg["discretization"]
        qmax = disc.get("Qmax")
        if qmax is None:
            lip = lipschitz if lipschitz is not None else lipschitz_constant(self.ergodic().v, self.grid.h)
            qmax = float(np.ceil(lip + 1.0))
        return VelocityGrid(float(qmax), int(disc["Nq"]), self.spec.d)

    def cauchy(self, eps):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            v0 = mollify(self.ergodic().v, self.grid, eps**4)
        slab = solve_cauchy_regularized(self.normalized(), self.c, eps, v0, self.grid,
                                        safety=float(self.cfg["discretization"]["dt_safety"]))
        self.record["theta"][f"cauchy_eps{eps}"] = slab.meta["theta"]
        self.record["dt"][f"cauchy_eps{eps}"] = slab.dt
        return slab

    def write_slab(self, stem, slab):
        if "csv" in self.formats:
            write_slab_csv(self.out / f"{stem}.csv", slab)
        if "bin" in self.formats:
            write_slab_binary(self.out / f"{stem}.bin", slab)

    def write_measure(self, stem, mu, spec):
        if "csv" in self.formats:
            write_measure_csv(self.out / f"{stem}.csv", mu)
        summary = measure_summary(mu, spec, self.c)
        self.json(f"{stem}.json", summary)
        return summary

    def lp(self, spec):
        s = self.cfg["solver"]
        lp = assemble_lp(spec, self.c, self.grid, self.vgrid())
        mu, value = solve_mather_lp(lp, s["lp_method"])
        return lp, mu, value


def cmd_check(run: _Run) -> int:
    rep = check_assumptions(run.spec, run.c, int(run.cfg["solver"]["sample_budget"]), seed=int(run.cfg["solver"]["seed"]))
    run.json("assumptions.json", rep.as_dict())
    return 0 if rep.passed else 1


def cmd_ergodic(run: _Run) -> int:
    sol = run.ergodic()
    run.json("ergodic.json", {"lambda": sol.lam, "residual": sol.residual, **sol.meta})
    if "csv" in run.formats:
        coords = run.grid.points.reshape(-1, run.grid.d)
        vals = sol.v.reshape(run.grid.m, -1)
        rows = [list(x) + [i, vals[i, n]] for n, x in enumerate(coords) for i in range(run.grid.m)]
        write_table_csv(run.out / "v.csv", [f"x{k + 1}" for k in range(run.grid.d)] + ["component", "value"], rows)
    return 0 if sol.residual <= max(run.tol, 1e-6) else 1


def cmd_cauchy(run: _Run) -> int:
    v = run.ergodic().v
    rows = []
    for eps in _eps_list(run.cfg):
        slab = run.cauchy(eps)
        run.write_slab(f"cauchy_eps{eps}", slab)
        rows.append({"eps": eps, "dt": slab.dt, "theta": slab.meta["theta"], "steps": slab.n_steps,
                     "distance_to_v": float(np.abs(slab.frames - v).max())})
    run.json("cauchy.json", {"runs": rows})
    return 0


def _adjoint(run: _Run, eps):
    s = run.cfg["solver"]
    slab = run.cauchy(eps)
    sigma = solve_adjoint(run.normalized(), run.c, eps, slab, run.grid.nearest_node(s["x0"]), int(s["k"]))
    return slab, sigma


def cmd_adjoint(run: _Run) -> int:
    rows = []
    for eps in _eps_list(run.cfg):
        _, sigma = _adjoint(run, eps)
        run.write_slab(f"adjoint_eps{eps}", sigma.slab)
        rows.append({"eps": eps, "max_mass_error": sigma.max_mass_error, "min_preclip": sigma.min_preclip,
                     "clip_total": sigma.clip_total})
    run.json("adjoint.json", {"runs": rows})
    return 0 if all(r["max_mass_error"] <= 1e-10 and r["min_preclip"] >= -1e-12 for r in rows) else 1


def cmd_mather_lp(run: _Run) -> int:
    spec = run.normalized()
    _, mu, value = run.lp(spec)
    summary = run.write_measure("lp_measure", mu, spec)
    ok = -1e-9 <= value <= 5 * run.grid.h
    run.json("mather_lp.json", {"value": value, "value_window": [-1e-9, 5 * run.grid.h],
                                "lambda": run.ergodic().lam, **summary, "passed": ok})
    return 0 if ok else 1


def cmd_mather_adjoint(run: _Run) -> int:
    spec = run.normalized()
    rows = []
    for eps in _eps_list(run.cfg):
        slab, sigma = _adjoint(run, eps)
        lip = max(lipschitz_constant(f, run.grid.h) for f in slab.frames)
        mu = measure_from_adjoint(spec, slab, sigma, run.vgrid(lip))
        rows.append({"eps": eps, **run.write_measure(f"adjoint_measure_eps{eps}", mu, spec)})
    run.json("mather_adjoint.json", {"runs": rows})
    return 0


def _face_measures(run: _Run, spec):
    lp, mu, value = run.lp(spec)
    s = run.cfg["solver"]
    return [mu] + sample_optimal_face(lp, value, int(s["samples"]), int(s["seed"]), method=s["lp_method"])


def cmd_compare(run: _Run) -> int:
    cmp_cfg = run.cfg["compare"]
    spec = run.normalized()
    try:
        v1 = eikonal_solutions(spec.potential, cmp_cfg["anchors1"], run.grid, cmp_cfg["values1"] or None)
        v2 = eikonal_solutions(spec.potential, cmp_cfg["anchors2"], run.grid, cmp_cfg["values2"] or None)
    except PreconditionError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[compare]: {exc}") from exc
    v2 = v2 + float(cmp_cfg["shift2"])
    measures = _face_measures(run, spec)
    vg = measures[0].vgrid
    for a in sorted(set(cmp_cfg["anchors1"]) | set(cmp_cfg["anchors2"])):
        measures.append(example_measure(run.grid, vg, run.grid.nearest_node(a), spec.potential))
    rep = check_comparison(v1, v2, measures, tol_hyp=1e-3)
    run.json("compare.json", rep.as_dict())
    return 0 if rep.verdict else 1


def cmd_uniqueness_set(run: _Run) -> int:
    measures = _face_measures(run, run.normalized())
    M = uniqueness_set(measures, float(run.cfg["solver"]["mass_threshold"]))
    run.json("uniqueness_set.json", {"nodes": sorted([list(n) + [i] for n, i in M]), "size": len(M),
                                     "measures_sampled": len(measures)})
    return 0


def cmd_suite(run_cfg: dict, out: Path, log) -> tuple[int, dict]:
    from .suite import run_suite

    results = run_suite(out, int(run_cfg["solver"]["seed"]), log=log)
    return (0 if all(r.passed for r in results.values()) else 1), {
        str(n): r.passed for n, r in results.items()}


COMMANDS = {
    "check": cmd_check,
    "ergodic": cmd_ergodic,
    "cauchy": cmd_cauchy,
    "adjoint": cmd_adjoint,
    "mather-lp": cmd_mather_lp,
    "mather-adjoint": cmd_mather_adjoint,
    "compare": cmd_compare,
    "uniqueness-set": cmd_uniqueness_set,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wkam", description="Weak-KAM toolkit for weakly coupled Hamilton-Jacobi systems")
    ap.add_argument("--version", action="version", version=f"wkam {__version__}")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("config", nargs="?", type=Path, help="TOML configuration file")
    ap.add_argument("--grid", type=int, help="nodes per dimension N")
    ap.add_argument("--eps", help="comma-separated eps values")
    ap.add_argument("--tol", type=float, help="solver tolerance")
    ap.add_argument("--seed", type=int, help="random seed")
    ap.add_argument("--out", help="output directory")
    return ap


def _threads() -> int | None:
    raw = os.environ.get("WKAM_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"WKAM_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"WKAM_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg, inputs = load_config(args.config)
        cfg = apply_overrides(cfg, args)
        threads = _threads()
        out = Path(cfg["output"]["dir"])
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"wkam: configuration error: {exc}", file=sys.stderr)
        return 2

    manifest = {"command": args.subcommand, "version": __version__, "config": cfg, "inputs": inputs,
                "tolerances": {"solver_tol": cfg["solver"]["tol"], "adjoint_mass": 1e-10, "adjoint_sign": 1e-12,
                               "lp_face": 1e-8}}
    try:
        with threadpool_limits(threads):
            if args.subcommand == "suite":
                status, summary = cmd_suite(cfg, out, log=print)
                manifest["results"] = summary
            else:
                run = _Run(cfg, out)
                status = COMMANDS[args.subcommand](run)
                manifest["theta"] = run.record["theta"]
                manifest["dt"] = run.record["dt"]
                if hasattr(run, "_erg"):
                    manifest["lambda"] = run._erg.lam
    except ConfigError as exc:
        print(f"wkam: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError,) as exc:
        print(f"wkam: divergence at frame {exc.frame}: {exc}", file=sys.stderr)
        status = 1
        manifest["error"] = str(exc)
    except (CFLError, ConvergenceError, LPError, TruncationError, PreconditionError) as exc:
        print(f"wkam: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = 1
        manifest["error"] = str(exc)
    manifest["status"] = status
    manifest["wall_time_s"] = time.perf_counter() - t0
    write_json(out / "manifest.json", manifest)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
