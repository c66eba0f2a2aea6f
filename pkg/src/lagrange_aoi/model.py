"""Physical model of the uplink: sources, channel, stage-length laws and stage costs.

A source with update length ``L`` needs ``L`` successful packet slots to deliver
an update; every slot succeeds independently with probability ``p``.  A
decision stage ends either when the first packet of an update fails (one slot)
or when the whole update is delivered.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln
from scipy.stats import nbinom

DEFAULT_TAIL_EPS = 1e-10


class ModelError(ValueError):
    """Raised when a system description violates a model invariant."""


@dataclass(frozen=True)
class SourceSpec:
    id: int
    L: int
    alpha: float


@dataclass(frozen=True)
class ChannelSpec:
    p: float


@dataclass(frozen=True)
class SystemSpec:
    sources: tuple[SourceSpec, ...]
    channel: ChannelSpec

    @property
    def N(self) -> int:
        return len(self.sources)

    @property
    def p(self) -> float:
        return self.channel.p

    @property
    def L(self) -> list[int]:
        return [s.L for s in self.sources]

    @property
    def alpha(self) -> list[float]:
        return [s.alpha for s in self.sources]

    @classmethod
    def from_lists(cls, L, alpha, p) -> "SystemSpec":
        if len(L) != len(alpha):
            raise ModelError("L and alpha must have the same length")
        sources = tuple(SourceSpec(i, int(l), float(a)) for i, (l, a) in enumerate(zip(L, alpha)))
        return cls(sources, ChannelSpec(float(p)))

    @classmethod
    def from_classes(cls, L, alpha, count, p) -> "SystemSpec":
        """Expand per-class parameters ``count[k]`` times each, class by class."""
        Ls, alphas = [], []
        for l, a, c in zip(L, alpha, count):
            Ls += [l] * int(c)
            alphas += [a] * int(c)
        return cls.from_lists(Ls, alphas, p)


def _check_p(p: float) -> None:
    if not (0.0 < p <= 1.0) or math.isnan(p):
        raise ModelError(f"channel success probability p={p} must lie in (0, 1]")


def validate_system(spec: SystemSpec) -> SystemSpec:
    """Return ``spec`` unchanged or raise ModelError naming the first violation."""
    if spec.N < 2:
        raise ModelError(f"N={spec.N}: at least two sources are required (N < 2)")
    _check_p(spec.channel.p)
    seen = set()
    for k, s in enumerate(spec.sources):
        if s.id in seen:
            raise ModelError(f"duplicate source id {s.id}")
        seen.add(s.id)
        if s.id != k:
            raise ModelError(f"source ids must be 0..N-1 in order; position {k} has id {s.id}")
        if int(s.L) != s.L or s.L < 1:
            raise ModelError(f"source {s.id}: update length L={s.L} must be an integer (L < 1 not allowed)")
        if not (s.alpha > 0) or math.isinf(s.alpha):
            raise ModelError(f"source {s.id}: weight alpha={s.alpha} must be positive and finite")
    return spec


@dataclass(frozen=True)
class StagePmf:
    """Truncated pmf on ``support_min, support_min + 1, ...``.

    ``probs[k]`` is the probability of length ``support_min + k``; ``tail_mass``
    is the mass beyond the last tabulated length.
    """

    source_id: int
    support_min: int
    probs: np.ndarray
    tail_mass: float
    tail_eps: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.probs.setflags(write=False)

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.support_min, self.support_min + len(self.probs))

    @property
    def support_max(self) -> int:
        return self.support_min + len(self.probs) - 1

    def as_dict(self) -> dict[int, float]:
        return {int(l): float(q) for l, q in zip(self.support, self.probs) if q > 0}

    def mean(self) -> float:
        return float(np.dot(self.support, self.probs))

    def moment(self, fn) -> float:
        return float(np.dot(fn(self.support.astype(float)), self.probs))

    def total_mass(self) -> float:
        return math.fsum(self.probs) + self.tail_mass


def _check_pmf_args(L: int, p: float, tail_eps: float) -> None:
    if int(L) != L or L < 1:
        raise ModelError(f"L={L} must be an integer >= 1")
    _check_p(p)
    if not (0.0 < tail_eps < 1.0):
        raise ModelError(f"tail_eps={tail_eps} must lie in (0, 1)")


def update_duration_pmf(L: int, p: float, tail_eps: float = DEFAULT_TAIL_EPS, source_id: int = -1) -> StagePmf:
    """Law of the number of slots needed to deliver one update of ``L`` packets.

    After the first packet, the remaining ``L - 1`` successes take a negative
    binomial number of slots, so ``P(X = l) = C(l-2, L-2) p^(L-1) (1-p)^(l-L)``
    for ``l >= L``.  The support is cut at the first ``l`` leaving at most
    ``tail_eps`` of mass behind.
    """
    _check_pmf_args(L, p, tail_eps)
    if L == 1 or p == 1.0:
        return StagePmf(source_id, int(L), np.array([1.0]), 0.0, tail_eps)
    n = L - 1
    log_p, log_q = math.log(p), math.log1p(-p)
    # mean + generous spread; extended below if the tail is still too heavy
    mean = (L - (1 - p)) / p
    sd = math.sqrt(n * (1 - p)) / p
    l_hi = int(mean + 12 * sd + 50)
    while True:
        l = np.arange(L, l_hi + 1, dtype=float)
        k = l - L  # failures among the remaining packets
        logc = gammaln(l - 1) - gammaln(L - 1) - gammaln(k + 1)
        probs = np.exp(logc + n * log_p + k * log_q)
        cum = np.cumsum(probs)
        hit = np.nonzero(1.0 - cum <= tail_eps)[0]
        if len(hit):
            probs = probs[: hit[0] + 1].copy()
            break
        l_hi *= 2
    k_last = L + len(probs) - 1 - L
    tail = float(nbinom.sf(k_last, n, p))
    return StagePmf(source_id, int(L), probs, tail, tail_eps)


def stage_length_pmf(L: int, p: float, tail_eps: float = DEFAULT_TAIL_EPS, source_id: int = -1) -> StagePmf:
    """Law of the gap between decision instants when a source of length ``L`` is served.

    Mass ``1 - p`` sits at one slot (first packet lost); the rest is ``p`` times
    the update-duration law.
    """
    upd = update_duration_pmf(L, p, tail_eps, source_id)
    probs = np.zeros(upd.support_max)
    probs[upd.support_min - 1 :] = p * upd.probs
    probs[0] += 1.0 - p
    return StagePmf(source_id, 1, probs, p * upd.tail_mass, tail_eps)


def stage_overhead(L: int, p: float) -> float:
    """Expected ``D(D-1)/2`` of the stage length ``D`` when a length-``L`` source is served."""
    if int(L) != L or L < 1:
        raise ModelError(f"L={L} must be an integer >= 1")
    _check_p(p)
    return L * (L - 1) / (2.0 * p)


def stage_cost(v: int, scheduled: SourceSpec, tagged: SourceSpec, p: float) -> float:
    """Expected weighted age accrued by ``tagged`` over one stage in which ``scheduled`` is served."""
    if v < 1:
        raise ModelError(f"age v={v} must be >= 1")
    return tagged.alpha * (v * scheduled.L + stage_overhead(scheduled.L, p))


def sample_stage(rng: np.random.Generator, L: int, p: float) -> tuple[int, bool]:
    """Draw one decision stage exactly: returns (slots used, update delivered).

    The first packet succeeds with probability ``p``; on success each of the
    remaining ``L - 1`` packets takes a geometric number of slots.
    """
    if rng.random() >= p:
        return 1, False
    delta = 1
    for _ in range(L - 1):
        delta += int(rng.geometric(p))
    return delta, True
