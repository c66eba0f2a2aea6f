"""Scheduling policies sharing one contract: ``decide(ages, rng) -> source id``.

Every policy also exports a flat parameter bundle so the compiled simulator
can run it without calling back into Python.  Ties always go to the smallest
source index.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .model import SystemSpec

KIND_INDEX, KIND_SCALED, KIND_RANDOM, KIND_TABLE = 0, 1, 2, 3


@dataclass(frozen=True)
class KernelParams:
    kind: int
    weights: np.ndarray  # (N,) float, for argmax of weights * ages
    table: np.ndarray  # (N, V) float index tables for ages 1..V
    slopes: np.ndarray  # (N,) float, linear extension beyond the table
    cdf: np.ndarray  # (N,) float, randomized choice
    jtable: np.ndarray  # flat int64 joint policy table
    joffset: np.ndarray  # (N,) int64, smallest age on each axis
    jshape: np.ndarray  # (N,) int64


def _params(N, kind, weights=None, table=None, slopes=None, cdf=None, jtable=None, joffset=None, jshape=None):
    return KernelParams(
        kind,
        np.ones(N) if weights is None else np.asarray(weights, dtype=float),
        np.zeros((N, 1)) if table is None else np.ascontiguousarray(table, dtype=float),
        np.zeros(N) if slopes is None else np.asarray(slopes, dtype=float),
        np.ones(N) if cdf is None else np.asarray(cdf, dtype=float),
        np.zeros(1, dtype=np.int64) if jtable is None else np.ascontiguousarray(jtable, dtype=np.int64).ravel(),
        np.ones(N, dtype=np.int64) if joffset is None else np.asarray(joffset, dtype=np.int64),
        np.ones(N, dtype=np.int64) if jshape is None else np.asarray(jshape, dtype=np.int64),
    )


class Policy:
    name = "policy"

    def decide(self, ages, rng=None) -> int:
        raise NotImplementedError

    def kernel_params(self) -> KernelParams:
        raise NotImplementedError


class LagrangePolicy(Policy):
    """Serve the source with the smallest Lagrange index at its current age."""

    name = "lagrange"

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=float)
        if table.ndim != 2 or table.shape[1] < 2:
            raise ValueError("index table must have shape (N, V) with V >= 2")
        self.table = table
        self.slopes = table[:, -1] - table[:, -2]

    @classmethod
    def from_dual(cls, dual, v_max: int | None = None) -> "LagrangePolicy":
        from .dual import index_table

        return cls(index_table(dual, v_max))

    @classmethod
    def from_artifact(cls, artifact) -> "LagrangePolicy":
        return cls(artifact.table)

    @property
    def N(self) -> int:
        return self.table.shape[0]

    def index(self, i: int, v: int) -> float:
        V = self.table.shape[1]
        if v <= V:
            return float(self.table[i, v - 1])
        return float(self.table[i, V - 1] + self.slopes[i] * (v - V))

    def decide(self, ages, rng=None) -> int:
        best, best_g = 0, math.inf
        for i, v in enumerate(ages):
            g = self.index(i, int(v))
            if g < best_g:
                best, best_g = i, g
        return best

    def kernel_params(self) -> KernelParams:
        return _params(self.N, KIND_INDEX, table=self.table, slopes=self.slopes)


class ScaledGreedyPolicy(Policy):
    """Serve ``argmax_i alpha_i v_i``."""

    name = "scaled-greedy"

    def __init__(self, alpha):
        self.weights = np.asarray(alpha, dtype=float)

    def decide(self, ages, rng=None) -> int:
        return int(np.argmax(self.weights * np.asarray(ages, dtype=float)))

    def kernel_params(self) -> KernelParams:
        return _params(len(self.weights), KIND_SCALED, weights=self.weights)


class GreedyPolicy(ScaledGreedyPolicy):
    """Serve the oldest source."""

    name = "greedy"

    def __init__(self, N: int):
        super().__init__(np.ones(N))


class RandomizedPolicy(Policy):
    """Pick a source from a fixed pmf at every decision instant, ignoring ages."""

    def __init__(self, pmf, name: str = "fixed-randomized"):
        pmf = np.asarray(pmf, dtype=float)
        if pmf.ndim != 1 or len(pmf) < 1 or np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
            raise ValueError(f"invalid pmf {pmf.tolist()}")
        if abs(pmf.sum() - 1.0) > 1e-9:
            raise ValueError(f"pmf sums to {pmf.sum()}, not 1")
        self.pmf = pmf
        self.cdf = np.cumsum(pmf)
        self.cdf[-1] = 1.0
        self.name = name

    def decide(self, ages, rng=None) -> int:
        u = rng.random()
        return int(np.searchsorted(self.cdf, u, side="right"))

    def kernel_params(self) -> KernelParams:
        return _params(len(self.pmf), KIND_RANDOM, cdf=self.cdf)


class TablePolicy(Policy):
    """Lookup policy over clamped joint ages, e.g. the exact optimum from the joint oracle."""

    name = "oracle-optimal"

    def __init__(self, policy: np.ndarray, offsets):
        self.policy = np.asarray(policy, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        if self.policy.ndim != len(self.offsets):
            raise ValueError("policy table rank must equal the number of sources")

    @classmethod
    def from_oracle(cls, sol) -> "TablePolicy":
        return cls(sol.policy, sol.offsets)

    def decide(self, ages, rng=None) -> int:
        shape = self.policy.shape
        idx = tuple(min(max(int(v) - o, 0), n - 1) for v, o, n in zip(ages, self.offsets, shape))
        return int(self.policy[idx])

    def kernel_params(self) -> KernelParams:
        N = len(self.offsets)
        return _params(N, KIND_TABLE, jtable=self.policy, joffset=self.offsets, jshape=np.array(self.policy.shape))


@dataclass(frozen=True)
class RandomizedBudget:
    horizon: int = 100_000
    seeds: int = 2
    rounds: int = 3
    refine: float = 2.0


def source_classes(system: SystemSpec) -> list[list[int]]:
    """Groups of source ids with identical ``(L, alpha)``, in order of first appearance."""
    groups: dict[tuple, list[int]] = {}
    for s in system.sources:
        groups.setdefault((s.L, s.alpha), []).append(s.id)
    return list(groups.values())


def optimize_randomized(system: SystemSpec, budget: RandomizedBudget | None = None, seed: int = 0) -> np.ndarray:
    """Best state-independent randomized pmf found by coordinate descent on simulated cost.

    Sources with identical parameters share one probability.  The search
    runs over per-class log-weights (the first class pinned at 0), which
    normalise onto the interior of the simplex, so no candidate has a zero
    entry.  Steps start at 1 and shrink by ``budget.refine`` after each of
    ``budget.rounds`` rounds; within a round moves repeat while they help.
    All candidates are simulated on the same seeds.
    """
    from .sim import SimConfig, run

    budget = budget or RandomizedBudget()
    classes = source_classes(system)
    K = len(classes)
    counts = np.array([len(c) for c in classes], dtype=float)

    def to_pmf(u):
        mass = counts * np.exp(u - u.max())
        pmf = np.empty(system.N)
        for k, ids in enumerate(classes):
            pmf[ids] = mass[k] / counts[k]
        return pmf / pmf.sum()

    u = np.zeros(K)
    if K == 1:
        return to_pmf(u)

    cache: dict[tuple, float] = {}

    def cost(u):
        key = tuple(np.round(u, 9))
        if key not in cache:
            pol = RandomizedPolicy(to_pmf(u))
            vals = [
                run(system, pol, SimConfig(budget.horizon, seed=seed ^ k)).avg_weighted_aoi
                for k in range(budget.seeds)
            ]
            cache[key] = math.fsum(vals) / len(vals)
        return cache[key]

    best = cost(u)
    step = 1.0
    for _ in range(budget.rounds):
        improved = True
        moves = 0
        while improved and moves < 100:
            improved = False
            for k in range(1, K):
                for sgn in (1.0, -1.0):
                    cand = u.copy()
                    cand[k] += sgn * step
                    c = cost(cand)
                    if c < best:
                        best, u, improved = c, cand, True
                        moves += 1
        step /= budget.refine
    return to_pmf(u)


_FIXED = re.compile(r"^fixed-randomized\(pmf=([^)]*)\)$")
POLICY_NAMES = ("lagrange", "greedy", "scaled-greedy", "randomized-opt")


def parse_policy_name(name: str):
    """Return ``(kind, pmf or None)``; raises ValueError on unknown names."""
    name = name.strip()
    if name in POLICY_NAMES:
        return name, None
    m = _FIXED.match(name)
    if m:
        pmf = [float(x) for x in re.split(r"[,;]", m.group(1)) if x.strip()]
        return "fixed-randomized", pmf
    raise ValueError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)} or fixed-randomized(pmf=...)")


def make_policy(name: str, system: SystemSpec, dual=None, budget: RandomizedBudget | None = None, seed: int = 0) -> Policy:
    kind, pmf = parse_policy_name(name)
    if kind == "lagrange":
        if dual is None:
            raise ValueError("the lagrange policy needs a dual solution or artifact")
        if hasattr(dual, "table"):
            return LagrangePolicy.from_artifact(dual)
        return LagrangePolicy.from_dual(dual)
    if kind == "greedy":
        return GreedyPolicy(system.N)
    if kind == "scaled-greedy":
        return ScaledGreedyPolicy(system.alpha)
    if kind == "randomized-opt":
        return RandomizedPolicy(optimize_randomized(system, budget, seed), name="randomized-opt")
    if len(pmf) != system.N:
        raise ValueError(f"pmf has {len(pmf)} entries for {system.N} sources")
    return RandomizedPolicy(pmf, name=name.strip())
