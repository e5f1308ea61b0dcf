"""Command-line entry point: scenario runs, benchmarks, and dumps.

Exit codes: 0 success, 2 assertion failure inside a run, 3 configuration
error.  Reports are JSON (summaries), JSON lines (per-stage history) and
CSV (field slices); meshes are Wavefront-style text.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_ASSERTION = 2
EXIT_CONFIG = 3


def _apply_thread_cap(threads):
    cap = threads or os.environ.get("ISOFLEX_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(cap))
    return cap


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return str(obj)


def _dump_json(payload, path):
    Path(path).write_text(json.dumps(payload, indent=2, default=_json_default) + "\n")


def _memory_estimate(resolution, depth):
    nodes = resolution[0] * resolution[1]
    # immersion + metric + scalars + scratch, float64, roughly 24 field copies
    return 24 * 8 * nodes


def cmd_run(args) -> int:
    from .corrugation import build_corrugation
    from .grid import check_short
    from .induction import run_global
    from .io import export_mesh
    from .scenario import ScenarioError, parse_scenario

    try:
        scenario = parse_scenario(args.scenario)
    except ScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth = args.depth if args.depth is not None else scenario.depth
    seed = args.seed if args.seed is not None else scenario.seed

    resolved = dict(scenario.resolved)
    resolved.update({"depth": depth, "seed": seed, "threads": args.threads})
    print(json.dumps({"scenario": resolved}, default=_json_default))

    if args.dry_run:
        from .induction import build_schedule, minimal_adequate_a

        a_min = minimal_adequate_a(scenario.theta, scenario.alpha, 0.125)
        sched = build_schedule(max(scenario.a_base, a_min), scenario.theta,
                               scenario.alpha, 0.125, depth=depth + 2)
        _dump_json({
            "dry_run": True, "scenario": resolved,
            "memory_bytes_estimate": _memory_estimate(scenario.resolution, depth),
            "exact_ladder": {"A": sched.A, "b": str(sched.b),
                             "lam": list(sched.lam), "delta": list(sched.delta)},
        }, out_dir / "summary.json")
        return EXIT_OK

    t0 = time.time()
    table = build_corrugation()
    g = scenario.metric()
    u0 = scenario.initial_map()
    export_mesh(u0, out_dir / "initial.obj")

    try:
        state, report = run_global(
            g, u0, scenario.theta, scenario.alpha, scenario.a_base, depth,
            table, skeleta=scenario.skeleta(),
            bootstrap_delta_star=scenario.delta_star)
    except Exception as exc:
        _dump_json({"scenario": resolved, "error": str(exc),
                    "wall_time": time.time() - t0}, out_dir / "summary.json")
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_ASSERTION

    export_mesh(state.u, out_dir / "final.obj")
    shortness = check_short(state.u, g, state.rho, state.h)

    with open(out_dir / "history.jsonl", "w") as fh:
        for p in report["passes"]:
            for stage in p.get("stages", []):
                fh.write(json.dumps({"level": p["level"], **stage},
                                    default=_json_default) + "\n")

    failed = []
    for p in report["passes"]:
        for stage in p.get("stages", []):
            if not stage.get("active"):
                continue
            if stage.get("factorization_residual", 0.0) > 1e-9:
                failed.append(f"(1)_q residual at level {p['level']} q {stage['q']}")
            for key in ("cond3_hess_ok", "cond3_grad_rho_ok"):
                if stage.get(key) is False:
                    failed.append(f"{key} at level {p['level']} q {stage['q']}")
        for lemma in p.get("rho_lemma", []):
            if not lemma["ok"]:
                failed.append(f"rho recursion at level {p['level']} q {lemma['q']}")
    if report["final"]["short_min_eig"] <= 0:
        failed.append("final shortness")

    summary = {
        "scenario": resolved,
        "wall_time": time.time() - t0,
        "bootstrap": report["bootstrap"],
        "schedules": report["schedules"],
        "passes": [{k: v for k, v in p.items() if k != "stages"}
                   for p in report["passes"]],
        "final": report["final"],
        "shortness": {"classification": shortness.classification,
                      "min_eigenvalue": shortness.min_eigenvalue,
                      "strong_short": shortness.strong_short},
        "failed_assertions": failed,
        "seed": seed,
    }
    _dump_json(summary, out_dir / "summary.json")
    print(json.dumps({"final": report["final"], "failed_assertions": failed},
                     default=_json_default))
    return EXIT_ASSERTION if failed else EXIT_OK


def cmd_step_bench(args) -> int:
    from .corrugation import build_corrugation
    from .decomposition import PhaseField
    from .grid import CLAMPED, GridChart, ImmersionField, ScalarField
    from .nash_step import StepParams, step

    table = build_corrugation()
    n = args.resolution
    chart = GridChart((1.0, 1.0), (n, n), CLAMPED)
    u = ImmersionField.flat(chart)
    eps = args.eps

    def bump(x, y):
        r2 = ((x - 0.5) ** 2 + (y - 0.5) ** 2) / 0.3 ** 2
        return np.sqrt(eps) * np.where(r2 < 1, (1 - r2) ** 3, 0.0)

    rho = ScalarField.from_function(chart, bump)
    phi = PhaseField.linear_phase(chart, (1.0, 0.0))
    records = []
    for lam in args.lambdas:
        p = StepParams(lam=lam, eps=eps, delta=eps, nu=6.0, nu_tilde=6.0,
                       M=4.0, gamma=4.0, c0=min(1.0, lam / 6.0))
        t0 = time.time()
        out = step(u, rho, phi, p, table)
        rec = {"lam": lam, "sup_defect": out.defect_sup, "c1_defect": out.defect_c1,
               "c2_norm": out.v_norms.c2_norm, "gamma_bar": out.gamma_bar,
               "support_ok": out.support_ok, "wall_time": time.time() - t0}
        records.append(rec)
        print(json.dumps(rec, default=_json_default))
    if len(records) >= 2:
        lams = np.log([r["lam"] for r in records])
        defs = np.log([r["sup_defect"] for r in records])
        slope = float(np.polyfit(lams, defs, 1)[0])
        print(json.dumps({"slope": slope}))
    return EXIT_OK


def cmd_stage_bench(args) -> int:
    from .corrugation import build_corrugation
    from .decomposition import solve_conformal
    from .grid import PERIODIC, GridChart, ImmersionField, MetricField, ScalarField
    from .nash_step import StageParams, StepParams, stage

    table = build_corrugation()
    n = args.resolution
    chart = GridChart((1.0, 1.0), (n, n), PERIODIC)
    u = ImmersionField.flat(chart)
    fac = solve_conformal(MetricField.constant(chart, args.eps * np.eye(2)))
    amp = ScalarField(chart, fac.theta.values)
    terms = [(amp, fac.phi1), (amp, fac.phi2)]
    lam1 = 2 * np.pi * args.base_waves
    for K in args.growth:
        p = StepParams(lam=lam1, eps=args.eps, delta=args.eps, nu=1.0,
                       nu_tilde=1.0, M=2.0, gamma=2.0, c0=1.0)
        t0 = time.time()
        out = stage(u, terms, p, StageParams(K=K, kappa=1.0, c1=1.0), table)
        print(json.dumps({"K": K, "sup_E": out.defect_sup,
                          "c1_E": out.defect_c1, "gamma_bar": out.gamma_bar,
                          "wall_time": time.time() - t0}, default=_json_default))
    return EXIT_OK


def cmd_conformal_check(args) -> int:
    from .decomposition import solve_conformal
    from .grid import PERIODIC, GridChart, MetricField

    rng = np.random.default_rng(args.seed)
    chart = GridChart((1.0, 1.0), (args.resolution, args.resolution), PERIODIC)
    x, y = chart.mesh()

    def trig(scale):
        acc = np.zeros_like(x)
        for _ in range(4):
            kx, ky = rng.integers(-3, 4, 2)
            ph = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(-1, 1) * np.cos(2 * np.pi * (kx * x + ky * y) + ph)
        return scale * acc / max(np.max(np.abs(acc)), 1e-12)

    h = MetricField.from_components(chart, 1.0 + trig(args.amplitude),
                                    trig(0.5 * args.amplitude),
                                    1.0 + trig(args.amplitude))
    fac = solve_conformal(h, residual_tol=np.inf)
    print(json.dumps({
        "resolution": args.resolution, "amplitude": args.amplitude,
        "residual_sup": fac.residual_sup,
        "residual_mean": float(np.mean(np.abs(fac.residual.values))),
        "iterations": fac.iterations, "contraction": fac.contraction,
        "min_det_jacobian": fac.min_det(), **fac.stats}, default=_json_default))
    return EXIT_OK


def cmd_corrugation_dump(args) -> int:
    from .corrugation import build_corrugation

    table = build_corrugation(s_max=args.s_max)
    t = table.t_vals
    rows = [t]
    header = ["t"]
    for s in args.amplitudes:
        for name in ("g1", "g2", "dt_g1", "dt_g2"):
            rows.append(table.eval(np.full_like(t, s), t, name))
            header.append(f"{name}_s{s:g}")
    out = Path(args.out) if args.out else None
    text = ",".join(header) + "\n"
    body = np.column_stack(rows)
    text += "\n".join(",".join(f"{v:.12g}" for v in row) for row in body) + "\n"
    if out:
        out.write_text(text)
        print(f"wrote {out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isoflex",
                                 description="staged corrugation engine")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario")
    run.add_argument("--scenario", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--depth", type=int, default=None)
    run.add_argument("--threads", type=int, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--dry-run", action="store_true")
    run.set_defaults(func=cmd_run)

    sb = sub.add_parser("step-bench", help="single-step frequency sweep")
    sb.add_argument("--lambdas", type=float, nargs="+", default=[64.0, 128.0, 256.0])
    sb.add_argument("--resolution", type=int, default=1024)
    sb.add_argument("--eps", type=float, default=0.01)
    sb.add_argument("--threads", type=int, default=None)
    sb.set_defaults(func=cmd_step_bench)

    gb = sub.add_parser("stage-bench", help="two-term stage growth sweep")
    gb.add_argument("--growth", type=float, nargs="+", default=[4.0, 8.0])
    gb.add_argument("--resolution", type=int, default=1024)
    gb.add_argument("--eps", type=float, default=0.1)
    gb.add_argument("--base-waves", type=int, default=5)
    gb.add_argument("--threads", type=int, default=None)
    gb.set_defaults(func=cmd_stage_bench)

    cc = sub.add_parser("conformal-check", help="random SPD Beltrami solve")
    cc.add_argument("--resolution", type=int, default=256)
    cc.add_argument("--amplitude", type=float, default=0.2)
    cc.add_argument("--seed", type=int, default=0)
    cc.add_argument("--threads", type=int, default=None)
    cc.set_defaults(func=cmd_conformal_check)

    cd = sub.add_parser("corrugation-dump", help="dump corrugation profiles as CSV")
    cd.add_argument("--amplitudes", type=float, nargs="+", default=[0.25, 0.5, 1.0])
    cd.add_argument("--s-max", type=float, default=1.0)
    cd.add_argument("--out", default=None)
    cd.set_defaults(func=cmd_corrugation_dump)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_thread_cap(getattr(args, "threads", None))
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
