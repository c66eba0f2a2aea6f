"""Exact small-instance ground truth on truncated state spaces.

Nothing here uses the threshold structure, the affine bias or the closed-form
average cost.  Stage costs and mean sojourns come from numerical moments of
the stage-length pmf, and ages are clamped at ``v_cap``.

Average-cost problems are solved by nested bisection on the average cost:
for a trial ``theta`` the stage operator ``min_a [g - theta * tau + P h]`` is
value-iterated in relative form, and the spread of ``T h - h`` brackets the
per-stage gain, whose sign says on which side of the optimum ``theta`` lies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .model import DEFAULT_TAIL_EPS, SourceSpec, SystemSpec, stage_length_pmf, update_duration_pmf

DEFAULT_STATE_LIMIT = 4_000_000
TIE_REL = 1e-8  # action values this close (relative) count as tied


class StateSpaceError(RuntimeError):
    pass


@dataclass
class OracleSolution:
    theta_star: float
    h: np.ndarray
    policy: np.ndarray
    v_cap: int
    residual: float
    offsets: tuple[int, ...] = ()
    sweeps: int = 0
    converged: bool = True
    theta_bracket: tuple[float, float] = (math.nan, math.nan)
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def ages(self) -> np.ndarray:
        """Ages of the single-source state axis (first axis in general)."""
        return np.arange(self.offsets[0], self.offsets[0] + self.h.shape[0])

    def threshold(self) -> int | None:
        """Smallest age from which the tagged source is always served (single-source only)."""
        serve = self.policy == 0
        if not serve[-1]:
            return None
        k = len(serve) - 1
        while k > 0 and serve[k - 1]:
            k -= 1
        return int(self.ages[k])

    def is_threshold_type(self) -> bool:
        T = self.threshold()
        if T is None:
            return False
        return bool(np.all((self.policy == 0) == (self.ages >= T)))


@dataclass(frozen=True)
class _Action:
    rate_fail: float
    succ_lengths: np.ndarray  # delivery durations l
    succ_probs: np.ndarray  # p * P(X = l), renormalised
    tau: float  # mean stage length
    w: float  # mean of D(D-1)/2


def _action(L: int, p: float, tail_eps: float) -> _Action:
    upd = update_duration_pmf(L, p, tail_eps)
    q = upd.probs / upd.probs.sum()
    stage = stage_length_pmf(L, p, tail_eps)
    s = stage.probs / stage.probs.sum()
    d = stage.support.astype(float)
    return _Action(1.0 - p, upd.support, p * q, float(s @ d), float(s @ (d * (d - 1) / 2)))


def _nested_bisection(bellman, h, tau_min, tau_max, theta_lo, tol, max_sweeps, kappa=0.5):
    """Average cost and bias of an SMDP by bisection on the average cost.

    ``bellman(h, theta)`` returns ``T h`` for the stage
    operator with cost ``g - theta * tau``.  Iterates are damped by ``kappa``
    so periodic chains still converge.
    """
    ref = 0
    lo, hi = theta_lo, math.inf
    theta = theta_lo
    sweeps = 0
    # |gain| <= tau_max * |theta - theta*|, so this keeps the final residual near tol
    tol_theta = 0.25 * tol / tau_max
    while True:
        while True:
            Th = bellman(h, theta)
            sweeps += 1
            d = Th - h
            dlo, dhi = float(d.min()), float(d.max())
            span = dhi - dlo
            decided = (dlo > 0 or dhi < 0) and span <= 0.5 * max(abs(dlo), abs(dhi))
            if decided or span <= tol or sweeps >= max_sweeps:
                break
            h = h + kappa * d
            h = h - h.flat[ref]
        # the gain is concave in theta with slope between -tau_max and -tau_min
        lo = max(lo, theta + (dlo / tau_max if dlo >= 0 else dlo / tau_min))
        hi = min(hi, theta + (dhi / tau_min if dhi >= 0 else dhi / tau_max))
        at_root = span <= tol and max(abs(dlo), abs(dhi)) <= tol
        if at_root or hi - lo <= tol_theta or sweeps >= max_sweeps:
            break
        h = h + kappa * d
        h = h - h.flat[ref]
        theta = 0.5 * (lo + hi)
    if not at_root:
        theta = 0.5 * (lo + hi) if math.isfinite(hi) else theta
        # polish the bias at the final average cost
        while sweeps < max_sweeps:
            Th = bellman(h, theta)
            sweeps += 1
            d = Th - h
            if float(d.max() - d.min()) <= 0.5 * tol:
                break
            h = h + kappa * d
            h = h - h.flat[ref]
    d = bellman(h, theta) - h
    residual = float(np.abs(d).max())
    return theta, h - h.flat[ref], residual, sweeps, (lo, hi), sweeps < max_sweeps


def _tie_break(q: np.ndarray) -> np.ndarray:
    """Lowest action index among those within TIE_REL of the minimum."""
    best = q.min(axis=0)
    tol = TIE_REL * np.maximum(np.abs(q).max(axis=0), 1.0)
    return np.argmax(q <= best + tol, axis=0)


def _single_chain(source, competitors, p, lam, v_cap, tail_eps):
    """Actions ``[(P, cost, tau)]``: serve the tagged source first, then each competitor."""
    if isinstance(competitors, SourceSpec):
        competitors = [competitors]
    L_i = source.L
    ages = np.arange(L_i, v_cap + 1)
    S = len(ages)
    out = []
    for src, to_reset in [(source, True)] + [(c, False) for c in competitors]:
        act = _action(src.L, p, tail_eps)
        rows, cols, vals = [], [], []
        k = np.arange(S)
        rows.append(k)
        cols.append(np.minimum(k + 1, S - 1))
        vals.append(np.full(S, act.rate_fail))
        for l, q in zip(act.succ_lengths, act.succ_probs):
            nxt = np.full(S, min(l, v_cap) - L_i) if to_reset else np.minimum(ages + l, v_cap) - L_i
            rows.append(k)
            cols.append(nxt)
            vals.append(np.full(S, q))
        P = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(S, S)
        )
        cost = source.alpha * (ages * act.tau + act.w)
        if to_reset:
            cost = cost + lam * act.tau
        out.append((P, cost, act.tau))
    return ages, out


def rvi_single(
    source: SourceSpec,
    competitor,
    p: float,
    lam: float,
    v_cap: int | None = None,
    tol: float = 1e-9,
    max_sweeps: int = 500_000,
    tail_eps: float = DEFAULT_TAIL_EPS,
) -> OracleSolution:
    """Optimal average cost and bias of the single-source problem.

    ``competitor`` is one source or a sequence of them.  Policy entries are 0
    for serving the tagged source and ``k`` for the ``k``-th competitor; the
    final action values are kept in ``extra["q"]``.
    """
    if v_cap is None:
        v_cap = int(math.ceil(50 * source.L / p))
    ages, actions = _single_chain(source, competitor, p, lam, v_cap, tail_eps)
    taus = [a[2] for a in actions]

    def qvals(h, theta):
        return np.stack([c - theta * t + P @ h for P, c, t in actions])

    theta, h, res, sweeps, br, ok = _nested_bisection(
        lambda h, th: qvals(h, th).min(axis=0),
        np.zeros(len(ages)), min(taus), max(taus), min(lam, 0.0), tol, max_sweeps,
    )
    q = qvals(h, theta)
    return OracleSolution(theta, h, _tie_break(q), v_cap, res, (source.L,), sweeps, ok, br, {"q": q})


@dataclass
class ThresholdEvaluation:
    T: int
    theta: float
    mu: float
    h: np.ndarray
    greedy_consistent: bool


def _evaluate(source, competitor, p, lam, T, v_cap, tail_eps, with_bias=False):
    ages, ((P0, c0, t0), (P1, c1, t1)) = _single_chain(source, competitor, p, lam, v_cap, tail_eps)
    serve = ages >= T
    D0, D1 = sp.diags(serve.astype(float)), sp.diags((~serve).astype(float))
    P = (D0 @ P0 + D1 @ P1).tocsr()
    c = np.where(serve, c0, c1)
    tau = np.where(serve, t0, t1)
    S = len(ages)
    I = sp.identity(S, format="csr")
    # stationary law of the embedded chain: pi (P - I) = 0, sum(pi) = 1
    A = (P.T - I).tolil()
    A[S - 1, :] = np.ones(S)
    b = np.zeros(S)
    b[-1] = 1.0
    pi = spsolve(A.tocsc(), b)
    slots = float(pi @ tau)
    theta = float(pi @ c) / slots
    mu = float(pi[serve] @ tau[serve]) / slots
    if not with_bias:
        return ThresholdEvaluation(int(T), theta, mu, np.empty(0), False)
    # bias of the policy, pinned at h(L_i) = 0 (age L_i is recurrent)
    B = (I - P).tolil()
    B[0, :] = 0.0
    B[0, 0] = 1.0
    rhs = c - theta * tau
    rhs[0] = 0.0
    h = spsolve(B.tocsc(), rhs)
    q = np.stack([c0 - theta * t0 + P0 @ h, c1 - theta * t1 + P1 @ h])
    consistent = bool(np.all((_tie_break(q) == 0) == serve))
    return ThresholdEvaluation(int(T), theta, mu, h, consistent)


def evaluate_threshold_policy(
    source: SourceSpec,
    competitor: SourceSpec,
    p: float,
    lam: float,
    T: int,
    v_cap: int,
    tail_eps: float = DEFAULT_TAIL_EPS,
) -> tuple[float, float]:
    """Exact ``(average cost, activation fraction)`` of threshold ``T`` on the truncated chain."""
    ev = _evaluate(source, competitor, p, lam, T, v_cap, tail_eps)
    return ev.theta, ev.mu


def brute_force_threshold(
    source: SourceSpec,
    competitor: SourceSpec,
    p: float,
    lam: float,
    T_range,
    v_cap: int | None = None,
    tail_eps: float = DEFAULT_TAIL_EPS,
    rel_tie: float = 1e-9,
) -> tuple[int, dict[int, float]]:
    """Best threshold over ``T_range`` by exact evaluation of every candidate.

    Candidates within ``rel_tie`` of the minimum cost are tied.  Thresholds
    that differ only on ages the chain never visits have equal cost, so among
    tied candidates the smallest one whose own bias makes it greedy on every
    age wins; if none is, the smallest tied candidate is returned.
    """
    T_range = sorted(int(T) for T in T_range)
    if v_cap is None:
        v_cap = int(math.ceil(50 * source.L / p))
    if T_range[-1] > v_cap:
        raise ValueError("T_range exceeds v_cap")
    costs = {T: _evaluate(source, competitor, p, lam, T, v_cap, tail_eps).theta for T in T_range}
    best = min(costs.values())
    tied = [T for T in T_range if costs[T] <= best + rel_tie * abs(best)]
    for T in tied:
        if _evaluate(source, competitor, p, lam, T, v_cap, tail_eps, with_bias=True).greedy_consistent:
            return T, costs
    return tied[0], costs


class _JointModel:
    def __init__(self, system: SystemSpec, v_cap: int, tail_eps: float):
        self.system = system
        self.v_cap = v_cap
        p = system.p
        self.L = np.array(system.L)
        self.alpha = np.array(system.alpha, dtype=float)
        self.shape = tuple(int(v_cap - l + 1) for l in self.L)
        self.N = len(self.L)
        self.actions = [_action(int(l), p, tail_eps) for l in self.L]
        grids = np.meshgrid(*[np.arange(l, v_cap + 1) for l in self.L], indexing="ij")
        weighted_age = sum(a * g for a, g in zip(self.alpha, grids))
        self.costs = [act.tau * weighted_age + act.w * self.alpha.sum() for act in self.actions]
        self.fail_index = np.ix_(*[np.minimum(np.arange(n) + 1, n - 1) for n in self.shape])

    def continuation(self, h, j):
        act = self.actions[j]
        acc = act.rate_fail * h[self.fail_index]
        succ = 0.0
        others = [i for i in range(self.N) if i != j]
        for l, q in zip(act.succ_lengths, act.succ_probs):
            kj = min(int(l), self.v_cap) - self.L[j]
            sub = np.take(h, kj, axis=j)
            idx = [np.minimum(np.arange(self.shape[i]) + l, self.shape[i] - 1) for i in others]
            succ = succ + q * (sub[np.ix_(*idx)] if idx else sub)
        return acc + np.expand_dims(succ, axis=j)

    def qvals(self, h, theta):
        return np.stack([self.costs[j] - theta * self.actions[j].tau + self.continuation(h, j) for j in range(self.N)])

    def bellman(self, h, theta):
        return self.qvals(h, theta).min(axis=0)


def joint_state_count(system: SystemSpec, v_cap: int) -> int:
    return int(np.prod([v_cap - l + 1 for l in system.L], dtype=float))


def rvi_joint(
    system: SystemSpec,
    v_cap: int,
    tol: float = 1e-8,
    max_sweeps: int = 200_000,
    state_limit: int = DEFAULT_STATE_LIMIT,
    tail_eps: float = DEFAULT_TAIL_EPS,
) -> OracleSolution:
    """Optimal average weighted age and policy of the unrelaxed problem.

    Policy entries are the index of the source to serve, over the array of
    ages ``L_i .. v_cap`` on each axis.
    """
    n = joint_state_count(system, v_cap)
    if n > state_limit:
        raise StateSpaceError(f"joint state space has {n} states, above the limit {state_limit}")
    if v_cap < max(system.L):
        raise ValueError("v_cap must be at least max L")
    model = _JointModel(system, v_cap, tail_eps)
    taus = [a.tau for a in model.actions]
    theta, h, res, sweeps, br, ok = _nested_bisection(
        model.bellman, np.zeros(model.shape), min(taus), max(taus), 0.0, tol, max_sweeps
    )
    q = model.qvals(h, theta)
    return OracleSolution(theta, h, _tie_break(q), v_cap, res, tuple(int(l) for l in system.L), sweeps, ok, br, {"q": q})
