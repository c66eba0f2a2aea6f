import pytest

from lagrange_aoi.cli import main
from lagrange_aoi.config import PRESETS, ConfigError, grid_points, parse_config, preset_text, serialize_config

SMALL = """
[scenario]
id = small
artifact = {artifact}

[system]
L = 2 3
alpha = 1 1
count = 1 1
p = 0.8

[sweep]
param = none

[sim]
horizon = 20000
seeds = 3
seed = 7

[policies]
names = lagrange greedy scaled-greedy randomized-opt

[randomized]
horizon = 10000
seeds = 2

[oracle]
v_cap = 60
tol = 1e-8
lambdas = 0 2 5
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL.format(artifact=tmp_path / "small.dual.json"))
    return path


@pytest.mark.parametrize("name", PRESETS)
def test_preset_round_trip(name):
    cfg = parse_config(preset_text(name))
    assert parse_config(serialize_config(cfg)) == cfg
    assert serialize_config(parse_config(serialize_config(cfg))) == serialize_config(cfg)


def test_preset_grids():
    grids = {n: grid_points(parse_config(preset_text(n))) for n in PRESETS}
    assert len(grids["fig3-desk"]) == 7 and all(g.system.N == 10 for g in grids["fig3-desk"])
    fig4 = grids["fig4-desk"]
    assert sorted({g.system.L[1] for g in fig4}) == [2, 10, 50, 100, 150]
    assert {g.system.p for g in fig4} == {0.5, 1.0}
    assert [g.system.N for g in grids["fig5-desk"]][::2] == [2, 10, 20, 30]
    fig6 = grids["fig6-desk"]
    assert sorted({g.system.alpha[-1] for g in fig6}) == [1, 3, 5, 7, 9]
    assert all(g.system.alpha[0] == 12 and g.system.L == [2] * 5 + [15] * 5 for g in fig6)


@pytest.mark.parametrize(
    "edit, field",
    [
        (("alpha = 1 1", "alpha = 1 -1"), "system.alpha"),
        (("p = 0.8", "p = 1.5"), "system.p"),
        (("names = lagrange", "names = whittle"), "policies.names"),
        (("L = 2 3", "L = 2 x"), "system.L"),
        (("param = none", "param = L.5\nvalues = 1"), "sweep.param"),
        (("seeds = 3", "seeds = 1"), "sim.seeds"),
    ],
)
def test_malformed_config_exit_1(tmp_path, capsys, edit, field):
    path = tmp_path / "bad.ini"
    path.write_text(SMALL.format(artifact="x").replace(*edit, 1))
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        parse_config(path.read_text())
    assert main(["solve", "--config", str(path)]) == 1
    assert field in capsys.readouterr().err


def test_missing_artifact_exit_2(small, capsys):
    assert main(["simulate", "--config", str(small), "--out", str(small.with_suffix(".csv"))]) == 2
    assert "solve" in capsys.readouterr().err


def test_solve_then_simulate_deterministic(small, tmp_path):
    art = tmp_path / "small.dual.json"
    assert main(["solve", "--config", str(small)]) == 0
    first = art.read_bytes()
    assert main(["solve", "--config", str(small), "--jobs", "2"]) == 0
    assert art.read_bytes() == first
    outs = []
    for jobs in ("1", "2", "1"):
        out = tmp_path / f"run{len(outs)}.csv"
        assert main(["simulate", "--config", str(small), "--out", str(out), "--jobs", jobs]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]
    lines = outs[0].decode().splitlines()
    assert lines[0] == "scenario_id,policy,p,N,seed,horizon,avg_weighted_aoi,activations,decision_stages"
    assert len(lines) == 1 + 4 * 3


def test_sweep_matches_simulate(small, tmp_path):
    assert main(["solve", "--config", str(small)]) == 0
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--config", str(small), "--out", str(a)]) == 0
    assert main(["sweep", "--config", str(small), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_seed_override_changes_rows(small, tmp_path):
    assert main(["solve", "--config", str(small)]) == 0
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["simulate", "--config", str(small), "--out", str(a), "--seed", "7"])
    main(["simulate", "--config", str(small), "--out", str(b), "--seed", "8"])
    assert a.read_bytes() != b.read_bytes()
    assert main(["simulate", "--config", str(small), "--seed", "-1"]) == 1


def test_oracle_default_suite_passes(small, capsys):
    assert main(["oracle", "--config", str(small)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS" in out


def test_oracle_tight_tolerance_reports(small, capsys):
    small.write_text(small.read_text().replace("tol = 1e-8", "tol = 1e-9"))
    code = main(["oracle", "--config", str(small)])
    out = capsys.readouterr().out
    assert "residual=" in out
    assert code == (3 if "FAIL" in out else 0)


def test_oracle_state_overflow_exit_2(small, capsys):
    small.write_text(small.read_text().replace("v_cap = 60", "v_cap = 60\nstate_limit = 100"))
    assert main(["oracle", "--config", str(small)]) == 2
    assert "limit" in capsys.readouterr().err


def test_unknown_preset_exit_1(capsys):
    assert main(["solve", "--preset", "fig9-desk"]) == 1
