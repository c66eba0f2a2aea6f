import itertools

import pytest

from lagrange_aoi.model import SourceSpec

# (L_i, L_m) x alpha x p x lambda grid used by the cross-checks
PAIRS = [(2, 2), (2, 3), (5, 2)]
ALPHAS = [1.0, 5.0]
PS = [0.5, 0.7, 1.0]
LAMS = [0.0, 2.0, 5.0]
GRID = list(itertools.product(PAIRS, ALPHAS, PS, LAMS))


def grid_id(case):
    (Li, Lm), a, p, lam = case
    return f"Li{Li}-Lm{Lm}-a{a:g}-p{p:g}-lam{lam:g}"


def make_pair(Li, Lm, a):
    return SourceSpec(0, Li, a), SourceSpec(1, Lm, a)


@pytest.fixture(params=GRID, ids=grid_id)
def grid_case(request):
    return request.param


# criterion -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
