import numpy as np
import pytest

from pnmcts.board import from_intervals, from_scenario
from pnmcts.geometry import Platoon, default_layout


def crossing_platoons():
    """Four platoons where 1 and 4 meet in area A and 3 and 4 in area D."""
    lay = default_layout()
    return [
        Platoon(1, lay.movement("W-straight"), 5.0, 0.0, 3),
        Platoon(2, lay.movement("S-left"), 5.0, 0.0, 1),
        Platoon(3, lay.movement("E-straight"), 4.0, 4.0, 2),
        Platoon(4, lay.movement("S-straight"), 5.0, 10.0, 2),
    ]


@pytest.fixture
def layout():
    return default_layout()


@pytest.fixture
def crossing_board():
    return from_scenario(crossing_platoons(), default_layout())


def two_row_board(a, b, area="A"):
    return from_intervals([{area: a}, {area: b}], default_layout().area_ids)


def random_board(rng: np.random.Generator, n_rows=None, kinds=None, step_count=0, t_hi=25.0, quantum=None):
    """Random board on the default layout with 1-8 rows of 1-3 cells each."""
    lay = default_layout()
    n = n_rows if n_rows is not None else int(rng.integers(1, 9))
    rows = []
    for _ in range(n):
        k = int(rng.integers(1, 4))
        cells = {}
        for a in rng.choice(lay.area_ids, size=k, replace=False):
            t0 = float(rng.uniform(0, t_hi - 3))
            t1 = t0 + float(rng.uniform(0.5, 3))
            if quantum:
                t0, t1 = round(t0 / quantum) * quantum, max(round(t1 / quantum) * quantum, round(t0 / quantum) * quantum + quantum)
            cells[str(a)] = (t0, t1)
        rows.append(cells)
    return from_intervals(rows, lay.area_ids, kinds=kinds, step_count=step_count)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
