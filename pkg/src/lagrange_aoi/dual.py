"""Outer search on the multiplier and the Lagrange index tables built from it.

The relaxed problem splits into one single-source problem per source.  Its
total activation ``sum_i mu_i(lam)`` is nonincreasing in ``lam`` but only
piecewise constant, so bisection stops on bracket width rather than on an
exact root.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import DEFAULT_TAIL_EPS, SourceSpec, SystemSpec, stage_overhead, validate_system
from .single_source import (
    ActivationSolution,
    ThresholdSolution,
    activation_fraction,
    dominant_competitor,
    index_values,
    solve_threshold,
)

ARTIFACT_FORMAT = "lagrange-aoi/dual-v1"
MAX_DOUBLINGS = 60


@dataclass(frozen=True)
class SolverConfig:
    beta: float = 0.5
    eps_theta: float = 1e-9
    eps_lambda: float = 1e-6
    tail_eps: float = DEFAULT_TAIL_EPS
    max_iter: int = 500


@dataclass
class SourceResult:
    solution: ThresholdSolution
    activation: ActivationSolution
    retried: bool = False

    @property
    def mu(self) -> float:
        return self.activation.mu

    @property
    def converged(self) -> bool:
        return self.solution.converged


class _Memo:
    """Single-source results keyed by the parameters that determine them."""

    def __init__(self, config: SolverConfig):
        self.config = config
        self.store: dict[tuple, SourceResult] = {}

    def get(self, source: SourceSpec, competitor: SourceSpec, p: float, lam: float) -> SourceResult:
        key = (source.L, source.alpha, competitor.L, p, lam)
        if key not in self.store:
            self.store[key] = _solve_one(SourceSpec(0, source.L, source.alpha), SourceSpec(1, competitor.L, competitor.alpha), p, lam, self.config)
        res = self.store[key]
        sol = dataclasses.replace(res.solution, source=source, competitor=competitor)
        act = dataclasses.replace(res.activation, source_id=source.id)
        return SourceResult(sol, act, res.retried)


def _solve_one(source, competitor, p, lam, config: SolverConfig) -> SourceResult:
    kw = dict(eps=config.eps_theta, max_iter=config.max_iter, tail_eps=config.tail_eps)
    sol = solve_threshold(source, competitor, p, lam, beta=config.beta, **kw)
    retried = False
    if not sol.converged:
        retried = True
        sol = solve_threshold(source, competitor, p, lam, beta=config.beta / 2, **kw)
    return SourceResult(sol, activation_fraction(sol), retried)


def sum_activation(system: SystemSpec, lam: float, config: SolverConfig | None = None, memo: _Memo | None = None):
    """``(sum_i mu_i(lam), per-source results)``; non-converged solves are kept and flagged."""
    config = config or SolverConfig()
    memo = memo or _Memo(config)
    p = system.p
    results = []
    for i, s in enumerate(system.sources):
        comp = system.sources[dominant_competitor(system, i)]
        results.append(memo.get(s, comp, p, lam))
    return math.fsum(r.mu for r in results), results


@dataclass
class DualSolution:
    system: SystemSpec
    lambda_star: float
    per_source: list[ThresholdSolution]
    mu: list[float]
    bracket: tuple[float, float, float, float]
    tolerance: float
    config: SolverConfig = field(default_factory=SolverConfig)
    bisection_steps: int = 0
    infeasible_steps: int = 0
    degenerate: bool = False

    @property
    def sum_mu(self) -> float:
        return math.fsum(self.mu)

    @property
    def lower_bound(self) -> float:
        """Dual value ``sum_i theta_i(lam) - lam``, a lower bound on any admissible cost."""
        return math.fsum(s.theta for s in self.per_source) - self.lambda_star

    @property
    def thresholds(self) -> list[int]:
        return [s.T for s in self.per_source]


def default_lambda_hi(system: SystemSpec) -> float:
    p = system.p
    return max(s.alpha * (s.L + stage_overhead(s.L, p)) for s in system.sources) * system.N


def solve_lambda(
    system: SystemSpec,
    lambda_lo: float = 0.0,
    lambda_hi: float | None = None,
    eps_lambda: float | None = None,
    config: SolverConfig | None = None,
) -> DualSolution:
    """Bisection on the sign of ``sum mu(lam) - 1`` until the bracket is narrower than ``eps_lambda``.

    The upper end is doubled until the total activation drops to one or below.
    If it is already below one at ``lambda_lo`` (floored at zero), that point
    is returned and the solution is marked degenerate.
    """
    validate_system(system)
    config = config or SolverConfig()
    eps = config.eps_lambda if eps_lambda is None else eps_lambda
    if not eps > 0:
        raise ValueError("eps_lambda must be positive")
    memo = _Memo(config)

    def total(lam):
        s, res = sum_activation(system, lam, config, memo)
        ok = all(r.converged for r in res)
        return s, res, ok

    lo = max(float(lambda_lo), 0.0)
    s_lo, res, _ = total(lo)
    if s_lo < 1.0:
        return _finish(system, lo, res, (lo, lo, s_lo, s_lo), eps, config, 0, 0, True)
    hi = default_lambda_hi(system) if lambda_hi is None else float(lambda_hi)
    hi = max(hi, lo + eps)
    s_hi, _, _ = total(hi)
    n = 0
    while s_hi > 1.0 and n < MAX_DOUBLINGS:
        hi = lo + 2.0 * (hi - lo)
        s_hi, _, _ = total(hi)
        n += 1
    if s_hi > 1.0:
        raise RuntimeError(f"no upper bracket found after {MAX_DOUBLINGS} doublings (sum mu={s_hi})")

    steps = bad = 0
    while hi - lo >= eps:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        s_mid, _, ok = total(mid)
        steps += 1
        if not ok:
            bad += 1
            hi, s_hi = mid, s_mid
        elif s_mid >= 1.0:
            lo, s_lo = mid, s_mid
        else:
            hi, s_hi = mid, s_mid
    lam = 0.5 * (lo + hi)
    _, res, _ = total(lam)
    return _finish(system, lam, res, (lo, hi, s_lo, s_hi), eps, config, steps, bad, False)


def _finish(system, lam, res, bracket, eps, config, steps, bad, degenerate) -> DualSolution:
    return DualSolution(
        system=system,
        lambda_star=lam,
        per_source=[r.solution for r in res],
        mu=[r.mu for r in res],
        bracket=tuple(float(x) for x in bracket),
        tolerance=eps,
        config=config,
        bisection_steps=steps,
        infeasible_steps=bad,
        degenerate=degenerate,
    )


def lagrange_index(dual: DualSolution, i: int, v):
    """``Q_ii(v) - Q_im(v)`` for source ``i`` at the multiplier of ``dual``; ages below ``L_i`` are clamped."""
    if np.any(np.asarray(v) < 1):
        raise ValueError("ages must be >= 1")
    return index_values(dual.per_source[i], v)


def index_table(dual: DualSolution, v_max: int | None = None) -> np.ndarray:
    """Indices for ages ``1 .. v_max`` of every source, shape ``(N, v_max)``.

    The default range reaches past every threshold, where the index is affine
    in the age, so extending the last two entries linearly is exact.
    """
    if v_max is None:
        v_max = max(s.v_max for s in dual.per_source)
    v = np.arange(1, v_max + 1)
    return np.vstack([np.asarray(lagrange_index(dual, i, v), dtype=float) for i in range(dual.system.N)])


def to_artifact(dual: DualSolution, v_max: int | None = None) -> dict:
    table = index_table(dual, v_max)
    return {
        "format": ARTIFACT_FORMAT,
        "system": {"L": dual.system.L, "alpha": dual.system.alpha, "p": dual.system.p},
        "solver": dataclasses.asdict(dual.config),
        "lambda_star": dual.lambda_star,
        "bracket": list(dual.bracket),
        "tolerance": dual.tolerance,
        "degenerate": dual.degenerate,
        "lower_bound": dual.lower_bound,
        "sources": [
            {
                "id": s.source_id,
                "competitor": s.competitor_id,
                "T": s.T,
                "theta": s.theta,
                "mu": mu,
                "converged": s.converged,
                "oscillated": s.oscillated,
            }
            for s, mu in zip(dual.per_source, dual.mu)
        ],
        "index": {"v_min": 1, "v_max": int(table.shape[1]), "values": table.tolist()},
    }


def write_artifact(path, dual: DualSolution, v_max: int | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(to_artifact(dual, v_max), fh, sort_keys=True, indent=1)
        fh.write("\n")


@dataclass
class IndexArtifact:
    """Index tables read back from disk, enough to drive the Lagrange policy."""

    system: SystemSpec
    lambda_star: float
    thresholds: list[int]
    table: np.ndarray
    lower_bound: float
    raw: dict = field(repr=False, default_factory=dict)


def read_artifact(path) -> IndexArtifact:
    with open(path) as fh:
        return artifact_from_dict(json.load(fh))


def artifact_from_dict(d: dict) -> IndexArtifact:
    if d.get("format") != ARTIFACT_FORMAT:
        raise ValueError("not a dual artifact")
    sysd = d["system"]
    system = SystemSpec.from_lists(sysd["L"], sysd["alpha"], sysd["p"])
    return IndexArtifact(
        system,
        d["lambda_star"],
        [s["T"] for s in d["sources"]],
        np.array(d["index"]["values"], dtype=float),
        d["lower_bound"],
        d,
    )
