"""Slot-level simulator of the shared uplink.

At each decision instant the policy picks a source, a stage is drawn from
the channel, and every source's age grows by one per slot of the stage.  Cost
is accumulated slot by slot, so the simulator does not reuse the closed-form
stage costs.  Per stage the random stream is consumed in a fixed order (the
policy's draw, if any, then the stage draws), which lets the compiled kernel
and the pure-Python reference produce identical runs.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy import stats

from .model import SystemSpec, sample_stage

CSV_COLUMNS = [
    "scenario_id",
    "policy",
    "p",
    "N",
    "seed",
    "horizon",
    "avg_weighted_aoi",
    "activations",
    "decision_stages",
]


@dataclass(frozen=True)
class SimConfig:
    horizon: int
    warmup: int | None = None  # default: 10% of horizon
    seed: int = 0
    initial_ages: tuple[int, ...] | None = None  # default: L_i

    def resolved_warmup(self) -> int:
        return self.horizon // 10 if self.warmup is None else int(self.warmup)


@dataclass
class SimResult:
    avg_weighted_aoi: float
    per_source_avg: list[float]
    decision_stages: int
    per_source_activation: list[float]
    seed: int
    per_source_mean_stage: list[float] = field(default_factory=list)


def _check(system: SystemSpec, config: SimConfig) -> tuple[int, np.ndarray]:
    warmup = config.resolved_warmup()
    if not (0 <= warmup < config.horizon):
        raise ValueError("warmup must lie in [0, horizon)")
    if config.horizon < 10 * max(system.L):
        raise ValueError("horizon must be at least 10 * max L")
    ages = np.array(system.L if config.initial_ages is None else config.initial_ages, dtype=np.int64)
    if len(ages) != system.N or np.any(ages < 1):
        raise ValueError("initial ages must be N integers >= 1")
    return warmup, ages


@njit(cache=True)
def _decide(kind, ages, weights, table, slopes, cdf, jtable, joffset, jshape, rng):
    N = ages.shape[0]
    if kind == 0:
        V = table.shape[1]
        best, best_g = 0, np.inf
        for i in range(N):
            v = ages[i]
            if v <= V:
                g = table[i, v - 1]
            else:
                g = table[i, V - 1] + slopes[i] * (v - V)
            if g < best_g:
                best, best_g = i, g
        return best
    if kind == 1:
        best, best_s = 0, -np.inf
        for i in range(N):
            s = weights[i] * ages[i]
            if s > best_s:
                best, best_s = i, s
        return best
    if kind == 2:
        u = rng.random()
        for i in range(N):
            if u < cdf[i]:
                return i
        return N - 1
    flat = 0
    for i in range(N):
        k = ages[i] - joffset[i]
        k = min(max(k, 0), jshape[i] - 1)
        flat = flat * jshape[i] + k
    return jtable[flat]


@njit(cache=True)
def _kernel(L, alpha, p, ages, horizon, warmup, kind, weights, table, slopes, cdf, jtable, joffset, jshape, rng):
    N = L.shape[0]
    age_sum = np.zeros(N)
    busy = np.zeros(N, dtype=np.int64)
    stage_n = np.zeros(N, dtype=np.int64)
    stage_len = np.zeros(N, dtype=np.int64)
    t = 0
    stages = 0
    while t < horizon:
        i = _decide(kind, ages, weights, table, slopes, cdf, jtable, joffset, jshape, rng)
        if rng.random() >= p:
            delta, delivered = 1, False
        else:
            delta, delivered = 1, True
            for _ in range(L[i] - 1):
                delta += rng.geometric(p)
        stages += 1
        stage_n[i] += 1
        stage_len[i] += delta
        # slots t .. t+delta-1; the age of source j in slot t+s is ages[j] + s
        s0 = max(t, warmup) - t
        s1 = min(t + delta, horizon) - t
        for s in range(s0, s1):
            for j in range(N):
                age_sum[j] += ages[j] + s
        if s1 > s0:
            busy[i] += s1 - s0
        for j in range(N):
            if j == i:
                ages[j] = delta if delivered else ages[j] + 1
            else:
                ages[j] += delta
        t += delta
    return age_sum, busy, stages, stage_n, stage_len


def _result(system, config, warmup, age_sum, busy, stages, stage_n, stage_len) -> SimResult:
    n = config.horizon - warmup
    alpha = np.array(system.alpha, dtype=float)
    per = age_sum / n
    act = busy / n
    if act.sum() > 1.0 + 1e-9:
        raise AssertionError("more than one source held the channel in a slot")
    mean_stage = [float(stage_len[i] / stage_n[i]) if stage_n[i] else math.nan for i in range(system.N)]
    return SimResult(
        float(np.dot(alpha, per)), per.tolist(), int(stages), act.tolist(), int(config.seed), mean_stage
    )


def run(system: SystemSpec, policy, config: SimConfig) -> SimResult:
    """Simulate ``policy`` for ``config.horizon`` slots; deterministic given the seed."""
    warmup, ages = _check(system, config)
    kp = policy.kernel_params()
    if kp.table.shape[0] != system.N and kp.kind == 0:
        raise ValueError("index table does not match the system size")
    rng = np.random.default_rng(config.seed)
    out = _kernel(
        np.array(system.L, dtype=np.int64),
        np.array(system.alpha, dtype=float),
        float(system.p),
        ages,
        int(config.horizon),
        int(warmup),
        kp.kind,
        kp.weights,
        kp.table,
        kp.slopes,
        kp.cdf,
        kp.jtable,
        kp.joffset,
        kp.jshape,
        rng,
    )
    return _result(system, config, warmup, *out)


def run_reference(system: SystemSpec, policy, config: SimConfig, trace: bool = False):
    """Plain-Python twin of :func:`run` using ``policy.decide`` and ``sample_stage``.

    With ``trace=True`` also returns the list of ``(ages, choice, delta, delivered)`` per stage.
    """
    warmup, ages = _check(system, config)
    ages = [int(a) for a in ages]
    rng = np.random.default_rng(config.seed)
    N = system.N
    age_sum = np.zeros(N)
    busy = np.zeros(N, dtype=np.int64)
    stage_n = np.zeros(N, dtype=np.int64)
    stage_len = np.zeros(N, dtype=np.int64)
    t = stages = 0
    log = []
    while t < config.horizon:
        i = policy.decide(ages, rng)
        delta, delivered = sample_stage(rng, system.L[i], system.p)
        if trace:
            log.append((tuple(ages), i, delta, delivered))
        stages += 1
        stage_n[i] += 1
        stage_len[i] += delta
        s0 = max(t, warmup) - t
        s1 = min(t + delta, config.horizon) - t
        for s in range(s0, s1):
            for j in range(N):
                age_sum[j] += ages[j] + s
        if s1 > s0:
            busy[i] += s1 - s0
        ages = [(delta if delivered else v + 1) if j == i else v + delta for j, v in enumerate(ages)]
        t += delta
    res = _result(system, config, warmup, age_sum, busy, stages, stage_n, stage_len)
    return (res, log) if trace else res


@dataclass
class BatchSummary:
    mean: float
    std: float
    ci95: tuple[float, float]
    results: list[SimResult]

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci95[1] - self.ci95[0])


def replica_seed(base: int, k: int) -> int:
    return int(base) ^ int(k)


def _run_job(args):
    system, policy, config = args
    return run(system, policy, config)


def summarize(results: list[SimResult]) -> BatchSummary:
    x = np.array([r.avg_weighted_aoi for r in results])
    n = len(x)
    mean = math.fsum(x) / n
    std = float(np.std(x, ddof=1)) if n > 1 else 0.0
    half = float(stats.t.ppf(0.975, n - 1)) * std / math.sqrt(n) if n > 1 else 0.0
    return BatchSummary(mean, std, (mean - half, mean + half), results)


def batch_run(system: SystemSpec, policy, base: SimConfig, n_seeds: int, jobs: int = 1) -> BatchSummary:
    """Independent replicas with seeds ``base.seed ^ k``; results do not depend on ``jobs``."""
    if n_seeds < 2:
        raise ValueError("n_seeds must be at least 2")
    configs = [replace(base, seed=replica_seed(base.seed, k)) for k in range(n_seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_job, [(system, policy, c) for c in configs]))
    else:
        results = [run(system, policy, c) for c in configs]
    return summarize(results)


@njit(cache=True)
def _threshold_kernel(L_i, L_m, p, T, horizon, rng, trace_n):
    v = L_i
    served = 0
    t = 0
    n = 0
    tv = np.zeros(trace_n, dtype=np.int64)
    tnext = np.zeros(trace_n, dtype=np.int64)
    while t < horizon:
        own = v >= T
        L = L_i if own else L_m
        if rng.random() >= p:
            delta, delivered = 1, False
        else:
            delta, delivered = 1, True
            for _ in range(L - 1):
                delta += rng.geometric(p)
        if own:
            served += min(delta, horizon - t)
            nv = delta if delivered else v + 1
        else:
            nv = v + delta if delivered else v + 1
        if n < trace_n:
            tv[n] = v
            tnext[n] = nv
        n += 1
        v = nv
        t += delta
    return served, n, tv[: min(n, trace_n)], tnext[: min(n, trace_n)]


def simulate_threshold_chain(L_i: int, L_m: int, p: float, T: int, horizon: int, seed: int = 0, trace: int = 0):
    """Monte Carlo of the single-source threshold policy: serve the tagged source iff its age is at least ``T``.

    Returns the fraction of slots the tagged source held the channel, and
    with ``trace > 0`` also the first ``trace`` age transitions ``(v, v')``.
    """
    rng = np.random.default_rng(seed)
    served, n, tv, tn = _threshold_kernel(int(L_i), int(L_m), float(p), int(T), int(horizon), rng, int(trace))
    frac = served / horizon
    return (frac, tv, tn) if trace else frac


def write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def csv_row(scenario_id: str, policy_name: str, system: SystemSpec, horizon: int, res: SimResult) -> dict:
    return {
        "scenario_id": scenario_id,
        "policy": policy_name,
        "p": repr(float(system.p)),
        "N": system.N,
        "seed": res.seed,
        "horizon": horizon,
        "avg_weighted_aoi": repr(res.avg_weighted_aoi),
        "activations": ";".join(repr(a) for a in res.per_source_activation),
        "decision_stages": res.decision_stages,
    }
