"""Study runners behind the CLI: each writes its tables and returns a report dict."""

import logging
import platform
from dataclasses import replace

import numpy as np
import scipy

from . import __version__
from .config import ASSERTION_CHECKS, CHECKS
from .diagnostics import (TestFunction, aldous_modulus, cepa_report, check_pair_in_A, fit_majorant,
                          martingale_defect)
from .io import write_csv, write_json
from .monotone import graph_sample
from .solver import coupled_run, mollified_cascade, picard_solve, simulate

log = logging.getLogger(__name__)

DIAGNOSE_PARTICLE_CAP = 10_000
DEFAULT_TIME_PAIRS = [(0.0, 0.25), (0.0, 0.5), (0.25, 0.5), (0.5, 1.0), (0.25, 1.0), (0.0, 1.0)]


def emit_table(out, name, header, rows, fmt):
    rows = list(rows)
    if fmt == "json":
        return write_json(out / f"{name}.json", {"columns": list(header), "rows": rows})
    return write_csv(out / f"{name}.csv", header, rows)


def _law_rows(seed, ens):
    for k, t in enumerate(ens.grid):
        w2 = ens.w2_prev[k] if ens.w2_prev is not None else None
        yield [seed, t, *ens.law_mean[k], ens.law_m2[k] ** 2, w2]


def law_header(d):
    return ["seed", "t"] + [f"mean_{j}" for j in range(d)] + ["second_moment", "w2_prev"]


def _trajectory_rows(seed, ens, particles, stride):
    n = min(particles, ens.particles)
    if ens.full:
        tv = ens.tv_path()
        for i in range(n):
            for k in range(0, ens.grid.size, stride):
                yield [seed, i, ens.grid[k], *ens.X[k, i], tv[k, i]]
    else:
        for i in range(n):
            yield [seed, i, ens.grid[0], *ens.x0[i], 0.0]
            yield [seed, i, ens.grid[-1], *ens.x_final[i], ens.tv[i]]


def trajectory_header(d):
    return ["seed", "particle", "t"] + [f"x_{j}" for j in range(d)] + ["k_tv"]


def _write_paths(sc, out, fmt, results):
    d = sc.dim
    emit_table(out, "law", law_header(d), (r for seed, ens in results for r in _law_rows(seed, ens)), fmt)
    p = int(sc.output.get("trajectory_particles", 10))
    stride = int(sc.output.get("time_stride", 1))
    emit_table(out, "trajectory", trajectory_header(d),
               (r for seed, ens in results for r in _trajectory_rows(seed, ens, p, stride)), fmt)


def run_simulate(sc, out, fmt):
    results, per_seed = [], []
    for seed in sc.seeds:
        ens = simulate(sc.kernel, sc.operator, sc.levy, sc.scheme, seed)
        results.append((seed, ens))
        xf = ens.x_final
        per_seed.append({
            "seed": seed, "final_mean": xf.mean(axis=0), "final_mean_se": xf.std(axis=0, ddof=1) / np.sqrt(xf.shape[0])
            if xf.shape[0] > 1 else np.zeros(sc.dim),
            "final_second_moment": ens.law_m2[-1] ** 2, "moment_statistic": ens.moment_statistic(),
            "telescoped_residual": ens.telescoped_residual(), "jumps": int(ens.jumps["particle"].size)})
    _write_paths(sc, out, fmt, results)
    return {"study": "simulate", "seeds": per_seed}, {}


def run_picard(sc, out, fmt):
    st = sc.study
    results, per_seed, rows = [], [], []
    converged = True
    for seed in sc.seeds:
        res = picard_solve(sc.kernel, sc.operator, sc.levy, sc.scheme, seed, int(st.get("max_iters", 15)),
                           float(st.get("w2_tol", 1e-3)), st.get("w2_method"))
        results.append((seed, res.ensemble))
        converged &= res.converged
        rows.extend([seed, i + 1, g] for i, g in enumerate(res.gaps))
        per_seed.append({"seed": seed, "converged": res.converged, "iterations": res.iterations, "gaps": res.gaps,
                         "ratios": res.ratios})
    _write_paths(sc, out, fmt, results)
    emit_table(out, "picard", ["seed", "iteration", "sup_w2_gap"], rows, fmt)
    return {"study": "picard", "w2_tol": float(st.get("w2_tol", 1e-3)), "seeds": per_seed}, {"converged": converged}


def run_cascade(sc, out, fmt):
    levels = [int(v) for v in sc.study.get("levels", [2, 4, 8, 16])]
    per_seed, rows, curve_rows = [], [], []
    monotone_all = True
    for seed in sc.seeds:
        rep = mollified_cascade(sc.kernel, sc.operator, sc.levy, sc.scheme, levels, seed)
        seq = rep.sequence()
        mono = all(b <= a for a, b in zip(seq, seq[1:]))
        monotone_all &= mono
        fits = []
        for (m, n), g in sorted(rep.curves.items()):
            fit = fit_majorant(rep.grid, g, "linear_plus_log")
            fits.append({"m": m, "n": n, "e": rep.errors[(m, n)], "C": fit.C, "y0": fit.y0, "below": fit.below})
            rows.append([seed, m, n, rep.errors[(m, n)]])
        for k, t in enumerate(rep.grid):
            curve_rows.append([seed, t] + [rep.curves[p][k] for p in sorted(rep.curves)])
        per_seed.append({"seed": seed, "errors": seq, "nonincreasing": mono, "majorants": fits})
    emit_table(out, "cascade", ["seed", "m", "n", "e"], rows, fmt)
    pairs = list(zip(levels, levels[1:]))
    emit_table(out, "cascade_curves", ["seed", "t"] + [f"g_{m}_{n}" for m, n in pairs], curve_rows, fmt)
    return {"study": "cascade", "levels": levels, "seeds": per_seed}, {"nonincreasing": monotone_all}


def run_coupled(sc, out, fmt):
    st = sc.study
    per_seed, rows = [], []
    for seed in sc.seeds:
        rep = coupled_run(sc.kernel, sc.operator, sc.levy, sc.scheme, st["x0_a"], st["x0_b"], seed)
        rows.extend([seed, t, g] for t, g in zip(rep.grid, rep.g))
        per_seed.append({"seed": seed, "bit_exact": rep.bit_exact, "g0": rep.g[0], "g_final": rep.g[-1],
                         "max_step_rate": rep.max_step_rate})
    emit_table(out, "coupled", ["seed", "t", "g"], rows, fmt)
    return {"study": "coupled", "seeds": per_seed}, {}


def default_test_functions(sc):
    c = np.asarray(sc.operator.domain.interior_point(), dtype=np.float64)
    if not np.all(np.isfinite(c)):
        c = np.zeros(sc.dim)
    e = np.zeros(sc.dim)
    e[0] = 0.5
    pts = [tuple(float(v) for v in p) for p in (c, c + e, c - e)]
    return [TestFunction("bump", pts[0], 1.5), TestFunction("bump", pts[1], 1.0), TestFunction("bump", pts[2], 2.0),
            TestFunction("quadratic_window", pts[0], 2.0)]


def diagnose_one(sc, seed, ens):
    st = sc.study
    checks = list(st.get("checks", CHECKS))
    tol = float(st.get("tol", 1e-9))
    op = sc.operator
    out = []
    if "pair_in_A" in checks:
        center = op.domain.interior_point()
        radius = float(st.get("pair_radius", 2.0 + 2.0 * float(np.linalg.norm(center))))
        xs, xst = graph_sample(op, int(st.get("pairs", 50)), radius, seed)
        rep = check_pair_in_A(ens, xs, xst, tol)
        out.append({"name": "pair_in_A", "passed": rep.passed, "worst_margin": rep.worst_margin,
                    "worst_particle": rep.worst_particle, "worst_interval": list(rep.worst_interval),
                    "pairs": rep.pairs})
    if "confinement" in checks:
        dist = 0.0 if op.kind == "zero" else float(np.max(op.domain.distance(ens.X.reshape(-1, sc.dim))))
        out.append({"name": "confinement", "passed": dist <= 1e-9, "max_distance": dist})
    if "telescoped" in checks:
        res = ens.telescoped_residual()
        scale = 1.0 + float(np.max(np.abs(ens.X)))
        out.append({"name": "telescoped", "passed": res <= 1e-9 * scale, "residual": res})
    if "k_continuity" in checks:
        jd = ens.jumps["jump_dK"]
        worst = float(jd.max()) if jd.size else 0.0
        ok = worst == 0.0 or not sc.scheme.enforce_H4
        out.append({"name": "k_continuity", "passed": ok, "events": int(jd.size), "max_jump_dK": worst})
    if "moment" in checks:
        out.append({"name": "moment", "statistic": ens.moment_statistic()})
    if "cepa" in checks and op.kind in ("normal_cone", "sum"):
        a0 = np.asarray(st.get("a0", op.domain.interior_point()), dtype=np.float64)
        rep = cepa_report(ens, a0, op)
        out.append({"name": "cepa", "a0": a0, "kappa1": rep.kappa1, "kappa2": rep.kappa2, "kappa3": rep.kappa3,
                    "method": rep.method})
    if "aldous" in checks:
        rep = aldous_modulus(ens, st.get("deltas", [0.2, 0.1, 0.05, 0.02]), float(st.get("rho", 0.5)))
        out.append({"name": "aldous", "deltas": rep.deltas, "modulus": rep.modulus, "rho": rep.rho,
                    "levels": rep.levels, "tail": rep.tail})
    if "martingale" in checks:
        pairs = [tuple(p) for p in st.get("time_pairs", DEFAULT_TIME_PAIRS)]
        form = st.get("generator_form", "compensator")
        tab = martingale_defect(ens, default_test_functions(sc), sc.kernel, sc.levy, pairs,
                                generator_form=form)
        worst = max(tab.rows, key=lambda r: abs(r["defect"]) - 3 * r["se"])
        out.append({"name": "martingale", "generator_form": form, "entries": len(tab.rows),
                    "max_excess_over_3se": abs(worst["defect"]) - 3 * worst["se"], "worst": worst})
    for c in out:
        c["grade"] = "assertion" if c["name"] in ASSERTION_CHECKS else "reporting"
    return out


def diagnose_scheme(scheme, particles_fixed=False):
    """Diagnostics need per-step records; large summary-mode runs are cut to a capped ensemble."""
    n = scheme.particles
    if scheme.record != "full" and not particles_fixed and n > DIAGNOSE_PARTICLE_CAP:
        log.warning("diagnose: using %d of %d particles with full recording", DIAGNOSE_PARTICLE_CAP, n)
        n = DIAGNOSE_PARTICLE_CAP
    return replace(scheme, record="full", particles=n)


def run_diagnose(sc, out, fmt, particles_fixed=False):
    per_seed = []
    results = []
    passed = True
    scheme = diagnose_scheme(sc.scheme, particles_fixed)
    for seed in sc.seeds:
        ens = simulate(sc.kernel, sc.operator, sc.levy, scheme, seed)
        results.append((seed, ens))
        checks = diagnose_one(sc, seed, ens)
        ok = all(c["passed"] for c in checks if c["grade"] == "assertion")
        passed &= ok
        per_seed.append({"seed": seed, "passed": ok, "checks": checks})
    _write_paths(sc, out, fmt, results)
    return {"study": "diagnose", "passed": passed, "particles": scheme.particles, "seeds": per_seed}, {"diagnostics_passed": passed}


RUNNERS = {"simulate": run_simulate, "picard": run_picard, "cascade": run_cascade, "coupled": run_coupled,
           "diagnose": run_diagnose}


def versions():
    return {"mmvsde": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": ".".join(platform.python_version_tuple()[:2])}


def run_scenario(sc, out, fmt="csv", strict=False, particles_fixed=False):
    """Run the scenario's study into ``out``; returns ``(exit_status, report)``."""
    out.mkdir(parents=True, exist_ok=True)
    kind = sc.study["kind"]
    if kind == "diagnose":
        report, flags = run_diagnose(sc, out, fmt, particles_fixed)
    else:
        report, flags = RUNNERS[kind](sc, out, fmt)
    report["scenario"] = sc.name
    write_json(out / "report.json", report)
    status = 0
    if flags.get("diagnostics_passed") is False:
        status = 2
    elif strict and (flags.get("converged") is False):
        status = 3
    manifest = {"scenario": sc.name, "study": kind, "config_hash": sc.config_hash, "seeds": sc.seeds,
                "versions": versions(), "flags": {**flags, "strict": bool(strict)}, "format": fmt,
                "exit_status": status}
    write_json(out / "manifest.json", manifest)
    return status, report
