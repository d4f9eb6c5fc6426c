from datetime import datetime

import numpy as np
import pytest

from builders import scenario, station, timeline, vehicle
from evflex import flex
from evflex.flex import ENVELOPE_COLUMNS, compute_envelope, hour_steps, read_envelope_csv
from evflex.scenario import make_scenario

PRICES = (0.0, 50.0, 200.0)
EIGHT = datetime(2024, 3, 1, 8)


@pytest.fixture(scope="module")
def small():
    sc = make_scenario(2, 2, 8, seed=5, pv_kw_per_charger=5.0, start=EIGHT)
    return sc, compute_envelope(sc, prices=PRICES, hours=[8])


def test_hour_steps_cover_full_hours():
    sc = make_scenario(1, 1, 10, seed=0, start=EIGHT)
    steps = hour_steps(sc)
    # 08:00 start, quarter-hour steps: hours 8 and 9 complete, 10 only half covered
    assert sorted(steps) == [8, 9]
    np.testing.assert_array_equal(steps[9], [4, 5, 6, 7])


def test_zero_price_is_baseline(small):
    sc, env = small
    for d in flex.DIRECTIONS:
        c = env.get(8, 0.0, d)
        assert c.deviation_mw == 0.0 and c.track_revenue == 0.0
        assert c.total_cost == pytest.approx(env.baseline_costs["total"], rel=1e-9)


def test_deviation_grows_with_price(small):
    _, env = small
    top = []
    for d in flex.DIRECTIONS:
        _, dev = env.series(8, d)
        assert np.all(dev >= 0)
        assert np.all(np.diff(dev) >= -0.01 * max(dev.max(), 1e-12))
        top.append(dev[-1])
    # the baseline already exports at full discharge here, so only one direction may respond
    assert max(top) > 0


def test_cost_identity(small):
    _, env = small
    for c in env.cells:
        assert c.charge_cost + c.soc_penalty - c.track_revenue == pytest.approx(c.total_cost, rel=1e-9, abs=1e-12)


def test_csv_columns(small, tmp_path):
    _, env = small
    env.to_csv(tmp_path / "env.csv")
    header = (tmp_path / "env.csv").read_text().splitlines()[0]
    assert header.split(",") == ENVELOPE_COLUMNS
    back = read_envelope_csv(tmp_path / "env.csv")
    assert [(c.hour, c.price, c.direction, c.deviation_mw) for c in back] == \
           [(c.hour, c.price, c.direction, c.deviation_mw) for c in env.cells]


def test_worker_count_does_not_change_cells(small):
    sc, env = small
    par = compute_envelope(sc, prices=PRICES, hours=[8], workers=3)
    assert [c.row() for c in par.cells] == [c.row() for c in env.cells]


def test_invalid_requests():
    sc = make_scenario(1, 1, 4, seed=0)
    with pytest.raises(ValueError):
        compute_envelope(sc, prices=[10.0], hours=[3])
    with pytest.raises(ValueError):
        compute_envelope(sc, prices=[-1.0], hours=[0])
    with pytest.raises(ValueError):
        compute_envelope(sc, prices=[10.0], hours=[0], directions=["sideways"])


def test_full_fleet_has_no_upward_room_in_first_hour():
    # full batteries that must stay full through hour 0, free afterwards
    T = 8
    cap = 40.0
    fleet = [vehicle(f"v{i}", cap=cap, x0=cap) for i in range(2)]
    e = np.zeros((T, 2))
    e[:5] = cap
    sc = scenario(fleet, [station(T=T, sell=0.0)], timeline(T, 2, e=e))
    env = compute_envelope(sc, prices=(100.0, 377.5), hours=[0, 1], directions=["up"])
    for p in (100.0, 377.5):
        first, later = env.get(0, p, "up").deviation_mw, env.get(1, p, "up").deviation_mw
        assert later > 0.01
        assert first <= 1e-3 * later
