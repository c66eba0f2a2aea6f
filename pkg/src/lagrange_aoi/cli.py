"""Command-line experiment runner.

    lagrange-aoi solve    --preset fig3-desk [--out duals.json]
    lagrange-aoi simulate --preset fig3-desk [--out runs.csv] [--jobs 4]
    lagrange-aoi sweep    --config my.ini --out runs.csv
    lagrange-aoi oracle   --config small.ini

``sweep`` solves and simulates in one go without writing the dual artifact.
Exit codes: 0 ok, 1 config error, 2 runtime/solver error, 3 failed check.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ConfigError, GridPoint, ScenarioConfig, grid_points, load_config
from .dual import artifact_from_dict, solve_lambda, to_artifact
from .oracle import (
    StateSpaceError,
    brute_force_threshold,
    joint_state_count,
    rvi_joint,
    rvi_single,
)
from .policies import make_policy
from .sim import SimConfig, batch_run, csv_row, write_csv
from .single_source import activation_fraction, bellman_residual, dominant_competitor, solve_threshold

SCENARIO_FORMAT = "lagrange-aoi/scenario-duals-v1"


class RuntimeFailure(RuntimeError):
    pass


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _solve_point(args):
    cfg, point = args
    dual = solve_lambda(point.system, config=cfg.solver)
    return dual, to_artifact(dual)


def cmd_solve(cfg: ScenarioConfig, out: str | None, jobs: int) -> int:
    points = grid_points(cfg)
    solved = _map(_solve_point, [(cfg, pt) for pt in points], jobs)
    doc = {
        "format": SCENARIO_FORMAT,
        "scenario": cfg.scenario_id,
        "points": [{"key": pt.key, "dual": art} for pt, (_, art) in zip(points, solved)],
    }
    path = out or cfg.artifact_path()
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    for pt, (dual, _) in zip(points, solved):
        lo, hi, s_lo, s_hi = dual.bracket
        print(f"[{pt.key}] lambda*={dual.lambda_star:.9g}  sum mu in [{s_hi:.6f}, {s_lo:.6f}]  lower bound={dual.lower_bound:.6g}")
        for s, mu in zip(dual.per_source, dual.mu):
            flag = "" if s.converged else "  (not converged)"
            print(f"  source {s.source_id}: L={s.L} alpha={s.source.alpha:g} T={s.T} theta={s.theta:.6g} mu={mu:.6f}{flag}")
    print(f"wrote {path}")
    return 0


def _load_duals(cfg: ScenarioConfig) -> dict:
    path = cfg.artifact_path()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise RuntimeFailure(f"dual artifact {path} not found; run `solve` first ({e.strerror})")
    except json.JSONDecodeError as e:
        raise RuntimeFailure(f"dual artifact {path} is not valid JSON: {e}")
    if doc.get("format") != SCENARIO_FORMAT:
        raise RuntimeFailure(f"{path} is not a scenario dual artifact")
    return {p["key"]: p["dual"] for p in doc["points"]}


def _simulate_point(args):
    cfg, point, dual = args
    rows, summary = [], []
    base = SimConfig(cfg.horizon, cfg.warmup, cfg.seed)
    sid = cfg.scenario_id if point.sweep_value is None else f"{cfg.scenario_id}/{point.key.rsplit(',p=', 1)[0]}"
    for name in cfg.policies:
        policy = make_policy(name, point.system, dual=dual, budget=cfg.randomized, seed=cfg.seed)
        b = batch_run(point.system, policy, base, cfg.seeds)
        rows += [csv_row(sid, name, point.system, cfg.horizon, r) for r in b.results]
        summary.append((point.key, name, b.mean, b.half_width))
    return rows, summary


def _run_simulations(cfg, duals_by_key, jobs, out):
    points = grid_points(cfg)
    tasks = []
    for pt in points:
        dual = duals_by_key.get(pt.key) if duals_by_key is not None else None
        if "lagrange" in cfg.policies and dual is None:
            raise RuntimeFailure(f"no dual solution for grid point {pt.key}")
        tasks.append((cfg, pt, dual))
    done = _map(_simulate_point, tasks, jobs)
    rows = [r for rs, _ in done for r in rs]
    path = out or f"{cfg.scenario_id}.csv"
    write_csv(path, rows)
    print(f"{'point':<28} {'policy':<34} {'mean':>14} {'ci95 +/-':>10}")
    for _, summ in done:
        for key, name, mean, hw in summ:
            print(f"{key:<28} {name:<34} {mean:>14.6f} {hw:>10.4f}")
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_simulate(cfg: ScenarioConfig, out: str | None, jobs: int) -> int:
    duals = None
    if "lagrange" in cfg.policies:
        duals = {k: artifact_from_dict(d) for k, d in _load_duals(cfg).items()}
    return _run_simulations(cfg, duals, jobs, out)


def cmd_sweep(cfg: ScenarioConfig, out: str | None, jobs: int) -> int:
    duals = None
    if "lagrange" in cfg.policies:
        points = grid_points(cfg)
        solved = _map(_solve_point, [(cfg, pt) for pt in points], jobs)
        duals = {pt.key: artifact_from_dict(art) for pt, (_, art) in zip(points, solved)}
    return _run_simulations(cfg, duals, jobs, out)


@dataclasses.dataclass
class Check:
    name: str
    passed: bool
    detail: str


def oracle_checks(cfg: ScenarioConfig, point: GridPoint) -> list[Check]:
    """Cross-checks of the solver against the exact oracles on one small system."""
    oc = cfg.oracle
    system = point.system
    n = joint_state_count(system, oc.v_cap)
    if n > oc.state_limit:
        raise StateSpaceError(f"[{point.key}] joint state space has {n} states, above the limit {oc.state_limit}")
    checks = []
    seen = set()
    for i, s in enumerate(system.sources):
        comp = system.sources[dominant_competitor(system, i)]
        if (s.L, s.alpha, comp.L) in seen:
            continue
        seen.add((s.L, s.alpha, comp.L))
        for lam in oc.lambdas:
            tag = f"source {i} lambda={lam:g}"
            sol = solve_threshold(s, comp, system.p, lam, beta=cfg.solver.beta, eps=cfg.solver.eps_theta,
                                  max_iter=cfg.solver.max_iter, tail_eps=cfg.solver.tail_eps)
            o = rvi_single(s, comp, system.p, lam, tol=oc.tol)
            rel = abs(sol.theta - o.theta_star) / max(abs(o.theta_star), 1e-300)
            checks.append(Check(f"{tag}: oracle residual", o.residual <= oc.tol, f"residual={o.residual:.3e}"))
            checks.append(Check(f"{tag}: threshold-type optimum", o.is_threshold_type(), f"T_oracle={o.threshold()}"))
            checks.append(Check(f"{tag}: theta vs value iteration", rel <= 1e-3, f"rel={rel:.3e}"))
            checks.append(Check(f"{tag}: T vs value iteration", sol.T == o.threshold(), f"T={sol.T} oracle={o.threshold()}"))
            res = float(np.abs(bellman_residual(sol)).max())
            checks.append(Check(f"{tag}: solver Bellman residual", res <= max(oc.tol, 1e-8), f"residual={res:.3e}"))
            T_hi = int(s.L + 2 * sol.theta / s.alpha) + 5
            v_cap = int(T_hi + 40 / system.p + 20)
            bT, _ = brute_force_threshold(s, comp, system.p, lam, range(s.L, T_hi + 1), v_cap, cfg.solver.tail_eps)
            checks.append(Check(f"{tag}: T vs exhaustive search", bT == sol.T, f"T={sol.T} best={bT}"))
            mu = activation_fraction(sol).mu
            checks.append(Check(f"{tag}: activation in [0, 1]", 0.0 <= mu <= 1.0, f"mu={mu:.6f}"))
    dual = solve_lambda(system, config=cfg.solver)
    joint = rvi_joint(system, oc.v_cap, tol=oc.tol, state_limit=oc.state_limit)
    checks.append(Check("joint oracle residual", joint.residual <= oc.tol, f"residual={joint.residual:.3e}"))
    # a cap that is too small clamps ages and biases the optimum low
    big = int(1.5 * oc.v_cap)
    if joint_state_count(system, big) <= oc.state_limit:
        wide = rvi_joint(system, big, tol=oc.tol, state_limit=oc.state_limit)
        drift = abs(wide.theta_star - joint.theta_star) / wide.theta_star
        checks.append(Check("joint optimum insensitive to v_cap", drift <= 1e-6,
                            f"v_cap {oc.v_cap}: {joint.theta_star:.6f}, v_cap {big}: {wide.theta_star:.6f}"))
    lb = dual.lower_bound
    checks.append(Check("dual lower bound <= joint optimum", lb <= joint.theta_star * (1 + 1e-9),
                        f"bound={lb:.6f} optimum={joint.theta_star:.6f} (v_cap={oc.v_cap})"))
    return checks


def cmd_oracle(cfg: ScenarioConfig, out: str | None, jobs: int) -> int:
    failed = 0
    lines = []
    for pt in grid_points(cfg):
        for c in oracle_checks(cfg, pt):
            failed += not c.passed
            line = f"{'PASS' if c.passed else 'FAIL'} [{pt.key}] {c.name}: {c.detail}"
            lines.append(line)
            print(line)
    if out:
        with open(out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    print(f"{len(lines) - failed} passed, {failed} failed")
    return 3 if failed else 0


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "sweep": cmd_sweep, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lagrange-aoi", description="Lagrange index scheduling experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="scenario INI file")
        src.add_argument("--preset", help="bundled scenario: fig3-desk, fig4-desk, fig5-desk, fig6-desk")
        sp.add_argument("--seed", type=int, default=None, help="override the base seed")
        sp.add_argument("--out", default=None, help="output path")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg, args.out, args.jobs)
    except (RuntimeFailure, StateSpaceError, RuntimeError, FloatingPointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
