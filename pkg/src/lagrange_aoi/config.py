"""Scenario files: INI sections for the system, sweep, solver, simulation and policies.

Grammar (lists are whitespace separated, class indices start at 0)::

    [scenario]  id, artifact (dual artifact path, optional)
    [system]    L, alpha, count (one entry per class), p (one or more values)
    [sweep]     param = none | N | L.k | alpha.k | count.k ; values
    [solver]    beta, eps_theta, eps_lambda, tail_eps, max_iter
    [sim]       horizon, warmup (optional), seeds, seed
    [policies]  names (lagrange, greedy, scaled-greedy, randomized-opt,
                fixed-randomized(pmf=a,b,...))
    [randomized] horizon, seeds, rounds
    [oracle]    v_cap, tol, state_limit, lambdas
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass, field
from importlib import resources

from .dual import SolverConfig
from .model import ModelError, SystemSpec, validate_system
from .policies import RandomizedBudget, parse_policy_name

PRESETS = ("fig3-desk", "fig4-desk", "fig5-desk", "fig6-desk")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    v_cap: int = 80
    tol: float = 1e-8
    state_limit: int = 4_000_000
    lambdas: tuple[float, ...] = (0.0, 2.0, 5.0)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    L: tuple[int, ...]
    alpha: tuple[float, ...]
    count: tuple[int, ...]
    p_values: tuple[float, ...]
    policies: tuple[str, ...]
    horizon: int = 200_000
    warmup: int | None = None
    seeds: int = 5
    seed: int = 0
    sweep_param: str = "none"
    sweep_values: tuple[float, ...] = ()
    solver: SolverConfig = field(default_factory=SolverConfig)
    randomized: RandomizedBudget = field(default_factory=RandomizedBudget)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    artifact: str = ""

    def artifact_path(self) -> str:
        return self.artifact or f"{self.scenario_id}.dual.json"


@dataclass(frozen=True)
class GridPoint:
    key: str
    system: SystemSpec
    sweep_value: float | None


def _num(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() and abs(x) < 2**53 else repr(float(x))


def _floats(sec, key, raw) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in raw.split())
    except ValueError:
        raise ConfigError(f"{sec}.{key}: expected numbers, got {raw!r}")
    return vals


def _ints(sec, key, raw) -> tuple[int, ...]:
    vals = _floats(sec, key, raw)
    if any(not v.is_integer() for v in vals):
        raise ConfigError(f"{sec}.{key}: expected integers, got {raw!r}")
    return tuple(int(v) for v in vals)


def _get(cp, sec, key, conv, default=None, required=False):
    if not cp.has_option(sec, key):
        if required:
            raise ConfigError(f"{sec}.{key}: missing")
        return default
    raw = cp.get(sec, key).strip()
    try:
        return conv(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError):
        raise ConfigError(f"{sec}.{key}: cannot parse {raw!r}")


def parse_config(text: str) -> ScenarioConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}")
    for sec in ("scenario", "system", "policies"):
        if not cp.has_section(sec):
            raise ConfigError(f"[{sec}] section missing")
    sid = _get(cp, "scenario", "id", str, required=True)
    if not re.fullmatch(r"[A-Za-z0-9_.\-]+", sid):
        raise ConfigError(f"scenario.id: {sid!r} may only contain letters, digits, '.', '_' and '-'")
    L = _get(cp, "system", "L", lambda r: _ints("system", "L", r), required=True)
    alpha = _get(cp, "system", "alpha", lambda r: _floats("system", "alpha", r), required=True)
    count = _get(cp, "system", "count", lambda r: _ints("system", "count", r), tuple(1 for _ in L))
    p_values = _get(cp, "system", "p", lambda r: _floats("system", "p", r), required=True)
    names = tuple(_get(cp, "policies", "names", str, "").split())

    def opt(sec, key, conv, default):
        return _get(cp, sec, key, conv, default) if cp.has_section(sec) else default

    d = SolverConfig()
    solver = SolverConfig(
        beta=opt("solver", "beta", float, d.beta),
        eps_theta=opt("solver", "eps_theta", float, d.eps_theta),
        eps_lambda=opt("solver", "eps_lambda", float, d.eps_lambda),
        tail_eps=opt("solver", "tail_eps", float, d.tail_eps),
        max_iter=opt("solver", "max_iter", int, d.max_iter),
    )
    rb = RandomizedBudget()
    randomized = RandomizedBudget(
        horizon=opt("randomized", "horizon", int, rb.horizon),
        seeds=opt("randomized", "seeds", int, rb.seeds),
        rounds=opt("randomized", "rounds", int, rb.rounds),
    )
    oc = OracleConfig()
    oracle = OracleConfig(
        v_cap=opt("oracle", "v_cap", int, oc.v_cap),
        tol=opt("oracle", "tol", float, oc.tol),
        state_limit=opt("oracle", "state_limit", int, oc.state_limit),
        lambdas=opt("oracle", "lambdas", lambda r: _floats("oracle", "lambdas", r), oc.lambdas),
    )
    warmup_raw = opt("sim", "warmup", str, "")
    cfg = ScenarioConfig(
        scenario_id=sid,
        L=L,
        alpha=alpha,
        count=count,
        p_values=p_values,
        policies=names,
        horizon=opt("sim", "horizon", int, 200_000),
        warmup=int(warmup_raw) if warmup_raw else None,
        seeds=opt("sim", "seeds", int, 5),
        seed=opt("sim", "seed", int, 0),
        sweep_param=opt("sweep", "param", str, "none"),
        sweep_values=opt("sweep", "values", lambda r: _floats("sweep", "values", r), ()),
        solver=solver,
        randomized=randomized,
        oracle=oracle,
        artifact=opt("scenario", "artifact", str, ""),
    )
    validate_config(cfg)
    return cfg


_SWEEP = re.compile(r"^(none|N|(L|alpha|count)\.(\d+))$")


def validate_config(cfg: ScenarioConfig) -> None:
    if not (len(cfg.L) == len(cfg.alpha) == len(cfg.count)) or not cfg.L:
        raise ConfigError("system.L, system.alpha and system.count must have one entry per class")
    for a in cfg.alpha:
        if not a > 0:
            raise ConfigError(f"system.alpha: weight {a} must be positive")
    for l in cfg.L:
        if l < 1:
            raise ConfigError(f"system.L: update length {l} must be >= 1")
    for c in cfg.count:
        if c < 0:
            raise ConfigError(f"system.count: class size {c} must be >= 0")
    if not cfg.p_values:
        raise ConfigError("system.p: at least one value is required")
    for p in cfg.p_values:
        if not (0 < p <= 1):
            raise ConfigError(f"system.p: {p} must lie in (0, 1]")
    if not cfg.policies:
        raise ConfigError("policies.names: at least one policy is required")
    for name in cfg.policies:
        try:
            parse_policy_name(name)
        except ValueError as e:
            raise ConfigError(f"policies.names: {e}")
    m = _SWEEP.match(cfg.sweep_param)
    if not m:
        raise ConfigError(f"sweep.param: {cfg.sweep_param!r} must be none, N, L.k, alpha.k or count.k")
    if m.group(3) is not None and int(m.group(3)) >= len(cfg.L):
        raise ConfigError(f"sweep.param: class index {m.group(3)} out of range")
    if cfg.sweep_param != "none" and not cfg.sweep_values:
        raise ConfigError("sweep.values: required when sweep.param is set")
    if cfg.seeds < 2:
        raise ConfigError("sim.seeds: at least 2 seeds are required")
    if cfg.horizon < 1 or (cfg.warmup is not None and not 0 <= cfg.warmup < cfg.horizon):
        raise ConfigError("sim.warmup: must lie in [0, horizon)")
    if not (0 < cfg.solver.beta < 1):
        raise ConfigError("solver.beta: must lie in (0, 1)")
    for k in ("eps_theta", "eps_lambda", "tail_eps"):
        if not getattr(cfg.solver, k) > 0:
            raise ConfigError(f"solver.{k}: must be positive")
    if cfg.oracle.tol <= 0:
        raise ConfigError("oracle.tol: must be positive")
    try:
        grid_points(cfg)
    except ModelError as e:
        raise ConfigError(f"system: {e}")


def _apply(cfg: ScenarioConfig, value):
    L, alpha, count = list(cfg.L), list(cfg.alpha), list(cfg.count)
    param = cfg.sweep_param
    if param == "N":
        K = len(count)
        if value % K:
            raise ModelError(f"N={value} is not divisible by the {K} classes")
        count = [int(value) // K] * K
    elif param != "none":
        what, k = param.split(".")
        k = int(k)
        if what == "L":
            if not float(value).is_integer():
                raise ModelError(f"L={value} must be an integer")
            L[k] = int(value)
        elif what == "alpha":
            alpha[k] = float(value)
        else:
            count[k] = int(value)
    return L, alpha, count


def grid_points(cfg: ScenarioConfig) -> list[GridPoint]:
    """All (sweep value, p) systems in file order: sweep values outer, p inner."""
    values = cfg.sweep_values if cfg.sweep_param != "none" else (None,)
    out = []
    for val in values:
        L, alpha, count = _apply(cfg, val)
        for p in cfg.p_values:
            system = validate_system(SystemSpec.from_classes(L, alpha, count, p))
            key = f"p={_num(p)}" if val is None else f"{cfg.sweep_param}={_num(val)},p={_num(p)}"
            out.append(GridPoint(key, system, val))
    return out


def serialize_config(cfg: ScenarioConfig) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    join = lambda xs: " ".join(_num(x) for x in xs)
    cp["scenario"] = {"id": cfg.scenario_id}
    if cfg.artifact:
        cp["scenario"]["artifact"] = cfg.artifact
    cp["system"] = {"L": join(cfg.L), "alpha": join(cfg.alpha), "count": join(cfg.count), "p": join(cfg.p_values)}
    cp["sweep"] = {"param": cfg.sweep_param, "values": join(cfg.sweep_values)}
    cp["solver"] = {k: repr(v) for k, v in dataclasses.asdict(cfg.solver).items()}
    sim = {"horizon": str(cfg.horizon), "seeds": str(cfg.seeds), "seed": str(cfg.seed)}
    if cfg.warmup is not None:
        sim["warmup"] = str(cfg.warmup)
    cp["sim"] = sim
    cp["policies"] = {"names": " ".join(cfg.policies)}
    r = cfg.randomized
    cp["randomized"] = {"horizon": str(r.horizon), "seeds": str(r.seeds), "rounds": str(r.rounds)}
    o = cfg.oracle
    cp["oracle"] = {"v_cap": str(o.v_cap), "tol": repr(o.tol), "state_limit": str(o.state_limit), "lambdas": join(o.lambdas)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return resources.files("lagrange_aoi").joinpath("presets", f"{name}.ini").read_text()


def load_config(path: str | None = None, preset: str | None = None) -> ScenarioConfig:
    if (path is None) == (preset is None):
        raise ConfigError("give exactly one of --config or --preset")
    if preset is not None:
        return parse_config(preset_text(preset))
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    return parse_config(text)
