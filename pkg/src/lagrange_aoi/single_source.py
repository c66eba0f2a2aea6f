"""Decoupled single-source problem for a fixed multiplier.

For a tagged source ``i`` and multiplier ``lam`` the relaxed problem reduces to
a two-action semi-Markov decision process: serve ``i`` (paying ``lam`` per
slot of service) or serve the dominant competitor ``m``.  The optimal policy
serves ``i`` once its age reaches a threshold ``T``.  Above the threshold the
bias is affine; below it the bias is filled in by a backward recursion, and
the bias splits as ``h = f1 - theta * f2`` with ``f1, f2`` free of the unknown
average cost ``theta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .model import (
    DEFAULT_TAIL_EPS,
    SourceSpec,
    StagePmf,
    SystemSpec,
    stage_overhead,
    update_duration_pmf,
)

TABLE_SLACK = 10
# relative tolerance for treating the threshold argument as an exact integer
_SNAP_TOL = 1e-9


@njit(cache=True)
def _backward_fill(values, cost, stop, p, offset, pmf):
    """Fill rows ``stop-1 .. 0`` of ``values`` in place, latest row first.

    ``values[k] = cost[k] + (1-p) values[k+1] + p * sum_j pmf[j] values[k+offset+j]``
    """
    ncol = values.shape[1]
    for k in range(stop - 1, -1, -1):
        for c in range(ncol):
            acc = 0.0
            for j in range(pmf.shape[0]):
                acc += pmf[j] * values[k + offset + j, c]
            values[k, c] = cost[k, c] + (1.0 - p) * values[k + 1, c] + p * acc


def dominant_competitor(system: SystemSpec, i: int) -> int:
    """Index of the shortest other source (smallest index on ties)."""
    best = None
    for j, s in enumerate(system.sources):
        if j == i:
            continue
        if best is None or s.L < system.sources[best].L:
            best = j
    return best


def threshold_argument(theta: float, alpha_i: float, L_i: int, L_m: int, p: float) -> float:
    return theta / alpha_i - (L_m - 1) / (2.0 * p) - L_i / p


def threshold_from_theta(theta: float, alpha_i: float, L_i: int, L_m: int, p: float) -> int:
    """Threshold implied by an average cost, clamped to at least ``L_i``.

    Arguments within floating-point noise of an integer are taken as that
    integer: at an exact tie both actions are optimal and the smaller
    threshold is kept.
    """
    x = threshold_argument(theta, alpha_i, L_i, L_m, p)
    r = round(x)
    if abs(x - r) <= _SNAP_TOL * max(1.0, abs(x)):
        x = r
    return max(int(L_i), int(math.ceil(x)))


def _affine_f(source: SourceSpec, p: float, v):
    v = np.asarray(v, dtype=float)
    return source.alpha * source.L * v / p, np.full_like(v, source.L / p)


def min_table_horizon(T: int, own_pmf: StagePmf, comp_pmf: StagePmf) -> int:
    """Smallest table end that resolves every lookup made below ``T``."""
    return max(T - 1 + comp_pmf.support_max, own_pmf.support_max, T)


def compute_f_tables(
    source: SourceSpec,
    competitor: SourceSpec,
    p: float,
    T: int,
    v_max: int | None = None,
    tail_eps: float = DEFAULT_TAIL_EPS,
    comp_pmf: StagePmf | None = None,
):
    """Tables ``f1, f2`` over ages ``L_i .. v_max`` for threshold ``T``.

    Rows at or above ``T`` hold the affine forms ``alpha L_i v / p`` and
    ``L_i / p``.  Below ``T`` the competitor is served, so each row is the
    stage cost plus the failure continuation plus the delivery continuation,
    with every lookup ``v + l`` read back from the table.
    """
    L_i = source.L
    if T < L_i:
        raise ValueError(f"threshold T={T} below L_i={L_i}")
    if comp_pmf is None:
        comp_pmf = update_duration_pmf(competitor.L, p, tail_eps, competitor.id)
    need = T - 1 + comp_pmf.support_max
    if v_max is None:
        v_max = max(need, T) + TABLE_SLACK
    if v_max < need or v_max < T:
        raise ValueError(f"v_max={v_max} too small: lookups below T={T} reach age {need}")
    v = np.arange(L_i, v_max + 1, dtype=float)
    f = np.empty((len(v), 2))
    f[:, 0], f[:, 1] = _affine_f(source, p, v)
    stop = T - L_i
    if stop > 0:
        a, L_m = source.alpha, competitor.L
        cost = np.empty((stop, 2))
        cost[:, 0] = a * v[:stop] * L_m + a * stage_overhead(L_m, p)
        cost[:, 1] = L_m
        _backward_fill(f, cost, stop, p, comp_pmf.support_min, np.ascontiguousarray(comp_pmf.probs))
    return f[:, 0].copy(), f[:, 1].copy()


def theta_from_tables(source: SourceSpec, lam: float, p: float, f1, f2, update_pmf: StagePmf) -> float:
    """Average cost consistent with tables ``f1, f2`` (indexed from age ``L_i``)."""
    n = len(update_pmf.probs)
    off = update_pmf.support_min - source.L
    if off < 0 or off + n > len(f1):
        raise ValueError("tables do not cover the update-duration support")
    s1 = float(np.dot(update_pmf.probs, f1[off : off + n]))
    s2 = float(np.dot(update_pmf.probs, f2[off : off + n]))
    denom = p * p * s2
    assert denom > 0.0, "f2 must be positive"
    a, L = source.alpha, source.L
    num = p * (lam * L + p * s1 + a * stage_overhead(L, p)) + a * L * (1.0 - p)
    return num / denom


@dataclass
class ThresholdSolution:
    source: SourceSpec
    competitor: SourceSpec
    p: float
    lam: float
    theta: float
    T: int
    f1: np.ndarray
    f2: np.ndarray
    v_max: int
    iterations: int
    converged: bool
    tail_eps: float = DEFAULT_TAIL_EPS
    oscillated: bool = False
    own_pmf: StagePmf | None = field(default=None, repr=False)
    comp_pmf: StagePmf | None = field(default=None, repr=False)

    @property
    def source_id(self) -> int:
        return self.source.id

    @property
    def competitor_id(self) -> int:
        return self.competitor.id

    @property
    def L(self) -> int:
        return self.source.L

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.L, self.v_max + 1)

    def f_at(self, v):
        """``(f1, f2)`` at ages ``v``; ages past the table use the affine forms."""
        scalar = np.ndim(v) == 0
        v = np.maximum(np.atleast_1d(np.asarray(v, dtype=int)), self.L)
        f1, f2 = _affine_f(self.source, self.p, v)
        inside = v <= self.v_max
        k = v[inside] - self.L
        f1[inside] = self.f1[k]
        f2[inside] = self.f2[k]
        if scalar:
            return float(f1[0]), float(f2[0])
        return f1, f2

    def h(self, v):
        f1, f2 = self.f_at(v)
        return f1 - self.theta * f2


def _evaluate(source, competitor, p, lam, T, tail_eps, own_pmf, comp_pmf):
    v_max = min_table_horizon(T, own_pmf, comp_pmf) + TABLE_SLACK
    f1, f2 = compute_f_tables(source, competitor, p, T, v_max, tail_eps, comp_pmf)
    return theta_from_tables(source, lam, p, f1, f2, own_pmf), f1, f2, v_max


def initial_theta(source: SourceSpec, p: float, lam: float) -> float:
    return source.alpha * (source.L + stage_overhead(source.L, p)) + max(lam, 0.0)


def solve_threshold(
    source: SourceSpec,
    competitor: SourceSpec,
    p: float,
    lam: float,
    beta: float = 0.5,
    theta0: float | None = None,
    eps: float = 1e-9,
    max_iter: int = 500,
    tail_eps: float = DEFAULT_TAIL_EPS,
) -> ThresholdSolution:
    """Damped fixed-point iteration between the threshold and the average cost.

    Each step maps ``theta`` to a threshold, evaluates the threshold policy's
    average cost from its tables and moves ``theta`` part of the way there.
    Tables are cached per threshold.  If the thresholds start alternating
    between two values the cheaper of the two is returned.
    """
    if not (0.0 < beta < 1.0):
        raise ValueError("beta must lie in (0, 1)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    own_pmf = update_duration_pmf(source.L, p, tail_eps, source.id)
    comp_pmf = update_duration_pmf(competitor.L, p, tail_eps, competitor.id)
    args = (source.alpha, source.L, competitor.L, p)
    cache: dict[int, tuple] = {}

    def evaluate(T):
        if T not in cache:
            cache[T] = _evaluate(source, competitor, p, lam, T, tail_eps, own_pmf, comp_pmf)
        return cache[T]

    theta = initial_theta(source, p, lam) if theta0 is None else float(theta0)
    history: list[int] = []
    converged = oscillated = False
    it = 0
    for it in range(1, max_iter + 1):
        T = threshold_from_theta(theta, *args)
        history.append(T)
        theta_bar = evaluate(T)[0]
        nxt = beta * theta + (1.0 - beta) * theta_bar
        if abs(nxt - theta) <= eps:
            theta = nxt
            converged = True
            break
        theta = nxt
        if len(history) >= 4 and history[-1] == history[-3] != history[-2] == history[-4]:
            oscillated = converged = True
            break

    if oscillated:
        T = min(history[-2:], key=lambda t: (evaluate(t)[0], t))
    else:
        T = threshold_from_theta(theta, *args) if converged else history[-1]
        # the converged theta may sit exactly on a tie; keep a self-consistent pair
        if converged and threshold_from_theta(evaluate(T)[0], *args) != T:
            T = history[-1]
    theta_bar, f1, f2, v_max = evaluate(T)
    return ThresholdSolution(
        source=source,
        competitor=competitor,
        p=p,
        lam=lam,
        theta=theta_bar,
        T=T,
        f1=f1,
        f2=f2,
        v_max=v_max,
        iterations=it,
        converged=converged,
        tail_eps=tail_eps,
        oscillated=oscillated,
        own_pmf=own_pmf,
        comp_pmf=comp_pmf,
    )


def q_value_against(sol: ThresholdSolution, v, other: SourceSpec, other_pmf: StagePmf | None = None):
    """Q-value of serving a non-tagged source ``other`` at tagged age ``v``."""
    p, a, th = sol.p, sol.source.alpha, sol.theta
    if other_pmf is None:
        other_pmf = update_duration_pmf(other.L, p, sol.tail_eps, other.id)
    v = np.maximum(np.atleast_1d(np.asarray(v, dtype=int)), sol.L)
    ls = other_pmf.support
    cont = sol.h(v[:, None] + ls[None, :]) @ other_pmf.probs
    return a * (v * other.L + stage_overhead(other.L, p)) - th * other.L + p * cont


def q_values(sol: ThresholdSolution, v):
    """``(Q_ii, Q_im)`` at tagged age(s) ``v``; ages below ``L_i`` are clamped up."""
    p, a, th, L = sol.p, sol.source.alpha, sol.theta, sol.L
    v_arr = np.maximum(np.atleast_1d(np.asarray(v, dtype=int)), L)
    reset = float(sol.h(sol.own_pmf.support) @ sol.own_pmf.probs)
    q_ii = a * (v_arr * L + stage_overhead(L, p)) + (sol.lam - th) * L + p * reset
    q_im = q_value_against(sol, v_arr, sol.competitor, sol.comp_pmf)
    if np.ndim(v) == 0:
        return float(q_ii[0]), float(q_im[0])
    return q_ii, q_im


def index_values(sol: ThresholdSolution, v):
    """``Q_ii - Q_im``: nonpositive exactly where serving the tagged source is optimal."""
    q_ii, q_im = q_values(sol, v)
    return q_ii - q_im


def bellman_residual(sol: ThresholdSolution, v=None) -> np.ndarray:
    """Residual of the two-action optimality equation at ages ``v`` (default: whole table)."""
    if v is None:
        v = sol.ages
    v = np.asarray(v, dtype=int)
    q_ii, q_im = q_values(sol, v)
    return sol.h(v) - (1.0 - sol.p) * sol.h(v + 1) - np.minimum(q_ii, q_im)


@dataclass
class ActivationSolution:
    source_id: int
    lam: float
    mu: float
    A1: np.ndarray
    A2: np.ndarray
    T: int


def activation_tables(sol: ThresholdSolution, T: int | None = None):
    """Tables ``A1, A2`` for the threshold policy ``T`` (default: the solution's)."""
    T = sol.T if T is None else T
    L_i, L_m, p = sol.L, sol.competitor.L, sol.p
    v_max = max(sol.v_max, min_table_horizon(T, sol.own_pmf, sol.comp_pmf))
    n = v_max - L_i + 1
    A = np.full((n, 2), L_i / p)
    stop = T - L_i
    if stop > 0:
        cost = np.zeros((stop, 2))
        cost[:, 1] = L_m
        _backward_fill(A, cost, stop, p, sol.comp_pmf.support_min, np.ascontiguousarray(sol.comp_pmf.probs))
    return A[:, 0].copy(), A[:, 1].copy()


def activation_fraction(sol: ThresholdSolution, T: int | None = None) -> ActivationSolution:
    """Long-run fraction of slots the tagged source holds the channel under its threshold policy."""
    A1, A2 = activation_tables(sol, T)
    pmf = sol.own_pmf
    off = pmf.support_min - sol.L
    n = len(pmf.probs)
    num = float(np.dot(pmf.probs, A1[off : off + n]))
    den = float(np.dot(pmf.probs, A2[off : off + n]))
    mu = num / den
    if not (np.all(np.isfinite(A1)) and np.all(np.isfinite(A2)) and math.isfinite(mu)):
        raise FloatingPointError("non-finite activation tables")
    return ActivationSolution(sol.source_id, sol.lam, min(max(mu, 0.0), 1.0), A1, A2, sol.T if T is None else T)


def write_tables(path, sol: ThresholdSolution, act: ActivationSolution | None = None) -> None:
    """Columnar dump ``v f1 f2 A1 A2`` with a header naming the solution."""
    if act is None:
        act = activation_fraction(sol)
    n = min(len(sol.f1), len(act.A1))
    with open(path, "w") as fh:
        fh.write(
            f"# id={sol.source_id} lambda={sol.lam!r} T={sol.T} theta={sol.theta!r} mu={act.mu!r}\n"
        )
        fh.write("v f1 f2 A1 A2\n")
        for k in range(n):
            fh.write(f"{sol.L + k} {sol.f1[k]!r} {sol.f2[k]!r} {act.A1[k]!r} {act.A2[k]!r}\n")
