"""The acceptance battery: twelve numbered checks with pinned tolerances.

Each check returns a :class:`CriterionResult`; ``run_suite`` writes one JSON
file per check plus measure CSVs into an output directory, so two runs can be
compared byte for byte.
"""

from __future__ import annotations

import filecmp
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CouplingMatrix, apply_coupling, quadratic_spec
from .evolve import (
    forward_linearized,
    pairing_history,
    solve_adjoint,
    solve_cauchy_regularized,
    solve_ergodic,
)
from .grid import PeriodicGrid, lipschitz_constant, mollify
from .io import write_json, write_measure_csv, write_table_csv
from .mather import (
    VelocityGrid,
    action,
    assemble_lp,
    holonomy_residual,
    measure_from_adjoint,
    sample_optimal_face,
    solve_mather_lp,
    uniqueness_set,
)
from .verify import (
    SILENT,
    check_comparison,
    duality_check,
    eikonal_solutions,
    example_measure,
    uniqueness_set_check,
)

SINGLE_WELL = "sin(pi*x)**2"
DOUBLE_WELL = "sin(2*pi*x)**2"
EPS_LADDER = (0.2, 0.1, 0.05)
# absolute level below which a swept quantity counts as zero when measuring variation
VARIATION_FLOOR = 1e-10


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"criterion {self.number:2d} [{'PASS' if self.passed else 'FAIL'}] {self.name}"


def relative_variation(values) -> float:
    """(max - min) / max over a sweep; zero when every value is below the floor."""
    v = np.abs(np.asarray(values, dtype=float))
    top = float(v.max())
    if top < VARIATION_FLOOR:
        return 0.0
    return (top - float(v.min())) / top


class _Context:
    """Lazily computed objects shared between checks."""

    def __init__(self, seed: int):
        self.seed = seed
        self.c2 = CouplingMatrix.uniform(2, 1.0)
        self.single = quadratic_spec(SINGLE_WELL, 1, 2)
        self.double = quadratic_spec(DOUBLE_WELL, 1, 2)
        self.vgrid = VelocityGrid(3.0, 17, 1)
        self._cache = {}
        self.adjoint_stats = []

    def memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def ergodic(self, N):
        return self.memo(("ergodic", N), lambda: solve_ergodic(self.single, self.c2, PeriodicGrid(1, N, 2)))

    def cauchy(self, N, eps):
        def run():
            g = PeriodicGrid(1, N, 2)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                v0 = mollify(self.ergodic(N).v, g, eps**4)
            return solve_cauchy_regularized(self.single, self.c2, eps, v0, g)
        return self.memo(("cauchy", N, eps), run)

    def adjoint(self, spec, slab, x0_node, k):
        sigma = solve_adjoint(spec, self.c2, slab.eps, slab, x0_node, k)
        self.adjoint_stats.append({"N": slab.grid.N, "eps": slab.eps, "max_mass_error": sigma.max_mass_error,
                                   "min_preclip": sigma.min_preclip, "clip_total": sigma.clip_total})
        return sigma

    def double_well_lp(self):
        def run():
            g = PeriodicGrid(1, 64, 2)
            lp = assemble_lp(self.double, self.c2, g, self.vgrid)
            mu, value = solve_mather_lp(lp)
            face = sample_optimal_face(lp, value, 32, seed=self.seed)
            return lp, mu, value, face
        return self.memo("double_lp", run)


def criterion_1(ctx: _Context) -> CriterionResult:
    rng = np.random.default_rng(ctx.seed)
    worst_sym = worst_col = 0.0
    for _ in range(100):
        a = rng.random((3, 3))
        c = CouplingMatrix(np.triu(a, 1) + np.triu(a, 1).T)
        f = rng.uniform(-1, 1, (3, 64))
        g = rng.uniform(-1, 1, (3, 64))
        lhs = np.sum(f * apply_coupling(c, g), axis=0)
        rhs = np.sum(g * apply_coupling(c, f), axis=0)
        worst_sym = max(worst_sym, float(np.abs(lhs - rhs).max()))
        worst_col = max(worst_col, float(np.abs(apply_coupling(c, f).sum(axis=0)).max()))
    ok = worst_sym <= 1e-12 and worst_col <= 1e-12
    return CriterionResult(1, "coupling self-adjointness and zero column sum", ok,
                           {"max_self_adjointness_gap": worst_sym, "max_column_sum": worst_col, "tol": 1e-12})


def criterion_2(ctx: _Context) -> CriterionResult:
    lam0 = ctx.ergodic(64).lam
    lam1 = solve_ergodic(quadratic_spec(SINGLE_WELL + "+1", 1, 2), ctx.c2, PeriodicGrid(1, 64, 2)).lam
    lam_ref = solve_ergodic(quadratic_spec("2+sin(2*pi*x)", 1, 1), CouplingMatrix(np.zeros((1, 1))),
                            PeriodicGrid(1, 512, 1)).lam
    ok = abs(lam0) <= 0.02 and abs(lam1 + 1) <= 0.02 and abs(lam_ref + 1) <= 0.02
    return CriterionResult(2, "ergodic constants", ok,
                           {"lambda_single_well": lam0, "lambda_shifted": lam1, "lambda_single_equation": lam_ref,
                            "tol": 0.02})


def criterion_3(ctx: _Context) -> CriterionResult:
    eps = 0.1
    u2 = ctx.cauchy(64, eps)
    sigma = ctx.adjoint(ctx.single, u2, (0,), 0)
    rng = np.random.default_rng(ctx.seed + 3)
    w0 = rng.uniform(-1, 1, (2, 64))
    pairing = pairing_history(forward_linearized(ctx.single, ctx.c2, eps, u2, w0), sigma)
    drift = float(np.abs(pairing - pairing[0]).max())
    stats = list(ctx.adjoint_stats)
    mass = max(s["max_mass_error"] for s in stats)
    pre = min(s["min_preclip"] for s in stats)
    ok = mass <= 1e-10 and pre >= -1e-12 and drift <= 1e-12
    return CriterionResult(3, "adjoint mass, positivity and pairing", ok,
                           {"max_mass_error": mass, "min_preclip": pre, "pairing_drift": drift,
                            "adjoint_solves": len(stats), "tol_mass": 1e-10, "tol_sign": 1e-12, "tol_pairing": 1e-12})


def _sweep(ctx: _Context):
    def run():
        v = ctx.ergodic(64).v
        rows = []
        for eps in EPS_LADDER:
            slab = ctx.cauchy(64, eps)
            F = slab.frames
            rows.append({
                "eps": eps,
                "lipschitz": max(lipschitz_constant(f, slab.grid.h) for f in F),
                "coupling": max(float(np.abs(apply_coupling(ctx.c2, f)).max()) for f in F),
                "eps_time_derivative": float(np.abs(eps * np.diff(F, axis=0) / slab.dt).max()),
                "distance_to_v": float(np.abs(F - v).max()),
                "dt": slab.dt,
                "theta": slab.meta["theta"],
            })
        return rows
    return ctx.memo("sweep", run)


def criterion_4(ctx: _Context) -> CriterionResult:
    rows = _sweep(ctx)
    details = {"sweep": rows, "max_relative_variation": 0.2}
    ok = True
    for key in ("lipschitz", "coupling", "eps_time_derivative"):
        vals = [r[key] for r in rows]
        var = relative_variation(vals)
        bound = 2.0 * max(vals) + VARIATION_FLOOR
        details[key] = {"variation": var, "recorded_bound": bound, "passed": var < 0.2}
        ok &= var < 0.2
    return CriterionResult(4, "uniform bounds across the eps ladder", ok, details)


def criterion_5(ctx: _Context) -> CriterionResult:
    dist = [r["distance_to_v"] for r in _sweep(ctx)]
    ok = all(b < a for a, b in zip(dist, dist[1:]))
    return CriterionResult(5, "regularised solution approaches v as eps decreases", ok,
                           {"eps": list(EPS_LADDER), "distance_to_v": dist})


def criterion_6(ctx: _Context, out: Path | None) -> CriterionResult:
    g = PeriodicGrid(1, 64, 2)
    lp = assemble_lp(ctx.single, ctx.c2, g, ctx.vgrid)
    mu, value = solve_mather_lp(lp)
    if out is not None:
        write_measure_csv(out / "lp_measure.csv", mu)
    xm = mu.x_marginal()
    dist = np.minimum(g.points[..., 0], 1 - g.points[..., 0])
    near = float(xm[dist <= 2 * g.h + 1e-12].sum())
    comp = mu.component_masses()
    qm = mu.q_marginal()
    slow = float(qm[np.abs(ctx.vgrid.points[:, 0]) <= ctx.vgrid.hq + 1e-12].sum())
    ok = (-1e-9 <= value <= 5 * g.h) and near >= 0.9 and bool(np.all(np.abs(comp - 0.5) <= 0.05)) and slow >= 0.9
    return CriterionResult(6, "action-minimising LP on the single-well example", ok,
                           {"value": value, "value_upper": 5 * g.h, "x_mass_near_zero": near,
                            "component_masses": comp, "q_mass_near_zero": slow})


def criterion_7(ctx: _Context) -> CriterionResult:
    g = PeriodicGrid(1, 64, 2)
    mu = example_measure(g, ctx.vgrid, (0,), ctx.single.potential)
    res = holonomy_residual(mu, ctx.single, ctx.c2)
    act = action(mu, ctx.single)
    skew = example_measure(g, ctx.vgrid, (0,), ctx.single.potential, weights=[0.75, 0.25])
    res_skew = holonomy_residual(skew, ctx.single, ctx.c2)
    ok = res <= 1e-12 and act == 0.0 and res_skew >= 0.4
    return CriterionResult(7, "explicit measure is holonomic with zero action", ok,
                           {"residual": res, "action": act, "residual_nonuniform": res_skew})


def criterion_8(ctx: _Context, out: Path | None) -> CriterionResult:
    rows = []
    for eps in (0.1, 0.05):
        for N in (64, 128):
            slab = ctx.cauchy(N, eps)
            sigma = ctx.adjoint(ctx.single, slab, (0,), 0)
            mu = measure_from_adjoint(ctx.single, slab, sigma, ctx.vgrid)
            rows.append({"eps": eps, "N": N, "action": action(mu, ctx.single),
                         "holonomy_residual": holonomy_residual(mu, ctx.single, ctx.c2)})
            if out is not None:
                write_measure_csv(out / f"adjoint_measure_eps{eps}_N{N}.csv", mu)
    coarse = next(r for r in rows if r["eps"] == 0.1 and r["N"] == 64)
    fine = next(r for r in rows if r["eps"] == 0.05 and r["N"] == 128)
    ok = (coarse["action"] <= 0.1 and coarse["holonomy_residual"] <= 0.1
          and fine["action"] < coarse["action"] and fine["holonomy_residual"] < coarse["holonomy_residual"])
    return CriterionResult(8, "adjoint-derived measure approaches the Mather set", ok, {"sweep": rows})


def criterion_9(ctx: _Context) -> CriterionResult:
    eps = 0.1
    reports = []
    for N in (64, 128):
        g = PeriodicGrid(1, N, 2)
        v1 = eikonal_solutions(ctx.double.potential, [0.0, 0.5], g)
        v2 = eikonal_solutions(ctx.double.potential, [0.0], g)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            w1, w2 = mollify(v1, g, eps**4), mollify(v2, g, eps**4)
        u1 = solve_cauchy_regularized(ctx.double, ctx.c2, eps, w1, g)
        u2 = solve_cauchy_regularized(ctx.double, ctx.c2, eps, w2, g, theta=u1.meta["theta"])
        sigma = ctx.adjoint(ctx.double, u2, g.nearest_node(0.5), 0)
        reports.append(duality_check(ctx.double, ctx.c2, eps, u1, u2, sigma))
    ratio = reports[1].bound / reports[0].bound if reports[0].bound > 0 else float("nan")
    ok = all(r.holds for r in reports) and 0.35 <= ratio <= 0.65
    return CriterionResult(9, "discrete duality inequality with O(h) slack", ok,
                           {"N64": reports[0].as_dict(), "N128": reports[1].as_dict(), "bound_ratio": ratio,
                            "ratio_window": [0.35, 0.65]})


def _anchored(ctx, g, rng):
    choices = ([0.0], [0.5], [0.0, 0.5])
    anchors = choices[int(rng.integers(len(choices)))]
    values = rng.uniform(0.0, 0.3, len(anchors))
    return eikonal_solutions(ctx.double.potential, anchors, g, values)


def criterion_10(ctx: _Context) -> CriterionResult:
    g = PeriodicGrid(1, 64, 2)
    _, mu, _, face = ctx.double_well_lp()
    measures = [mu] + face + [example_measure(g, ctx.vgrid, (0,), ctx.double.potential),
                              example_measure(g, ctx.vgrid, (32,), ctx.double.potential)]
    rng = np.random.default_rng(ctx.seed + 10)
    tol_hyp = 1e-3
    tol_con = tol_hyp + 4 * g.h
    instances = []
    for _ in range(20):
        v1 = _anchored(ctx, g, rng)
        v2 = _anchored(ctx, g, rng) + rng.uniform(-0.2, 0.2)
        rep = check_comparison(v1, v2, measures, tol_hyp, tol_con)
        instances.append({"hypothesis_margin": rep.hypothesis_margin, "conclusion_margin": rep.conclusion_margin,
                          "status": rep.status})
    violations = sum(1 for r in instances if r["status"] == "violation")
    applicable = sum(1 for r in instances if r["status"] != SILENT)
    return CriterionResult(10, "comparison principle on seeded instances", violations == 0,
                           {"instances": instances, "violations": violations, "hypothesis_held": applicable,
                            "tol_hyp": tol_hyp, "tol_con": tol_con, "n_measures": len(measures)})


def criterion_11(ctx: _Context) -> CriterionResult:
    g = PeriodicGrid(1, 64, 2)
    _, mu, _, face = ctx.double_well_lp()
    M = uniqueness_set([mu] + face, 1e-6)
    nodes = {(node[0], i) for node, i in M}

    def covered(x):
        target = g.nearest_node(x)[0]
        return all(any((k % g.N, i) in nodes for k in (target - 1, target, target + 1)) for i in range(g.m))

    both = covered(0.0) and covered(0.5)
    v = eikonal_solutions(ctx.double.potential, [0.0, 0.5], g, [0.1, 0.1])
    agree = uniqueness_set_check(v, v.copy(), M, g)
    v_alt = eikonal_solutions(ctx.double.potential, [0.5, 0.0], g, [0.1, 0.1])
    agree2 = uniqueness_set_check(v, v_alt, M, g)
    ok = both and bool(agree) and bool(agree2) and not agree2.vacuous
    return CriterionResult(11, "sampled uniqueness set covers both wells", ok,
                           {"set": sorted([list(node) + [i] for node, i in M]), "covers_0_and_half": both,
                            "identical_pair": bool(agree), "agreeing_pair": bool(agree2),
                            "agreeing_pair_global_gap": agree2.max_global})


CHECKS = (
    (1, lambda ctx, out: criterion_1(ctx)),
    (2, lambda ctx, out: criterion_2(ctx)),
    (4, lambda ctx, out: criterion_4(ctx)),
    (5, lambda ctx, out: criterion_5(ctx)),
    (6, criterion_6),
    (7, lambda ctx, out: criterion_7(ctx)),
    (8, criterion_8),
    (9, lambda ctx, out: criterion_9(ctx)),
    # runs after 8 and 9 so that every adjoint solve of the battery is audited
    (3, lambda ctx, out: criterion_3(ctx)),
    (10, lambda ctx, out: criterion_10(ctx)),
    (11, lambda ctx, out: criterion_11(ctx)),
)


def run_checks(out: Path | None = None, seed: int = 0, only=None, log=None) -> dict[int, CriterionResult]:
    """Criteria 1 to 11; artifacts go to ``out`` when given."""
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(seed)
    results = {}
    for number, fn in CHECKS:
        if only is not None and number not in only:
            continue
        res = fn(ctx, out)
        results[number] = res
        if log:
            log(res.line())
        if out is not None:
            write_json(out / f"criterion_{number:02d}.json",
                       {"number": number, "name": res.name, "passed": res.passed, "details": res.details})
    if out is not None:
        write_table_csv(out / "summary.csv", ["criterion", "name", "passed"],
                        [(n, results[n].name, results[n].passed) for n in sorted(results)])
    return dict(sorted(results.items()))


def compare_directories(a: Path, b: Path, ignore=("manifest.json",)) -> list[str]:
    """Names of files that differ (or exist on one side only)."""
    a, b = Path(a), Path(b)
    names = sorted({p.name for p in a.iterdir()} | {p.name for p in b.iterdir()})
    diffs = []
    for name in names:
        if name in ignore:
            continue
        pa, pb = a / name, b / name
        if not (pa.is_file() and pb.is_file()) or not filecmp.cmp(pa, pb, shallow=False):
            diffs.append(name)
    return diffs


def run_suite(out: Path, seed: int = 0, log=None) -> dict[int, CriterionResult]:
    """Run criteria 1-11 twice into ``out/run1`` and ``out/run2``; criterion 12 compares them."""
    out = Path(out)
    t0 = time.perf_counter()
    first = run_checks(out / "run1", seed, log=log)
    run_checks(out / "run2", seed)
    diffs = compare_directories(out / "run1", out / "run2")
    files = sorted(p.name for p in (out / "run1").iterdir())
    res12 = CriterionResult(12, "bit-identical artifacts across two runs", not diffs,
                            {"differing_files": diffs, "files_compared": files})
    if log:
        log(res12.line())
    first[12] = res12
    write_json(out / "suite.json", {str(n): {"name": r.name, "passed": r.passed, "details": r.details}
                                    for n, r in first.items()})
    first[12].details["wall_time_s"] = time.perf_counter() - t0
    return first
