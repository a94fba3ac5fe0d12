import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from beltfield.panel import (EventKind, IngestReport, JourneyEvent, PanelError, aggregate_journeys,
                             boundary_adjust, compliance_frame, correlation_screen, load_panel,
                             panel_from_arrays, read_events_csv, read_panel_dir, save_panel,
                             write_events_csv)

JAN = 1641081600000  # 2022-01-01T00:00:00Z


def ev(j, r, t, k):
    return JourneyEvent(j, r, JAN + t, EventKind(k))


def test_latch_window_rules():
    events = [
        ev("a", "1", 0, "engine_on"), ev("a", "1", 30_000, "seatbelt_latch"),
        ev("b", "1", 0, "engine_on"), ev("b", "1", -5_000, "seatbelt_latch"),   # before ignition
        ev("c", "1", 0, "engine_on"), ev("c", "1", 700_000, "seatbelt_latch"),  # after window
        ev("d", "1", 0, "seatbelt_latch"),                                       # no engine_on
        ev("e", "2", 600_000, "engine_on"), ev("e", "2", 1_200_000, "seatbelt_latch"),  # window edge
    ]
    rep = IngestReport()
    counts = aggregate_journeys(events, report=rep)
    assert counts == {("1", 1): (1, 3), ("2", 1): (1, 1)}
    assert rep.n_dropped_no_engine_on == 1 and rep.n_journeys == 4


def test_first_engine_on_fixes_region_and_month():
    events = [ev("a", "5", 0, "engine_on"), ev("a", "6", 10, "engine_on"),
              ev("a", "6", 20, "seatbelt_latch")]
    assert aggregate_journeys(events) == {("5", 1): (1, 1)}


def test_empty_stream_warns():
    with pytest.warns(UserWarning):
        assert aggregate_journeys([]) == {}
    with pytest.raises(ValueError):
        aggregate_journeys([ev("a", "1", 0, "engine_on")], latch_window_s=0)


def test_events_csv_round_trip_and_malformed(tmp_path):
    events = [ev("a", "1", 0, "engine_on"), ev("a", "1", 5, "seatbelt_latch")]
    p = tmp_path / "e.csv"
    write_events_csv(events, p)
    with open(p, "a") as fh:
        fh.write("b,1,notatime,engine_on\nc,1,5,teleport\n")
    rep = IngestReport()
    back = read_events_csv(p, rep)
    assert back == events
    assert rep.n_malformed == 2 and rep.n_records == 4


def test_boundary_adjust():
    assert boundary_adjust(0.0, 1000) == pytest.approx(0.5 / 1000)
    assert boundary_adjust(1.0, 1000) == pytest.approx(999.5 / 1000)
    assert np.isnan(boundary_adjust(0.3, 0))
    with pytest.raises(ValueError):
        boundary_adjust(1.2, 5)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5000), st.floats(0, 1), st.floats(0, 1))
def test_boundary_adjust_inside_and_monotone(n, a, b):
    ya, yb = boundary_adjust(a, n), boundary_adjust(b, n)
    assert 0 < ya < 1 and 0 < yb < 1
    if a <= b:
        assert ya <= yb


def write_tables(tmp_path, rows, cov):
    c = tmp_path / "comp.csv"
    v = tmp_path / "cov.csv"
    pd.DataFrame(rows, columns=["region_id", "month", "rate", "n_journeys"]).to_csv(c, index=False)
    pd.DataFrame(cov).to_csv(v, index=False)
    return c, v


def test_load_panel_sorted_dense_grid(tmp_path):
    rows = [("b", 2, 0.5, 10), ("a", 1, 0.8, 20), ("b", 1, 1.0, 4)]
    cov = {"region_id": ["a", "b"], "inc": [3.0, 4.0], "vmt": [1.0, 2.0]}
    c, v = write_tables(tmp_path, rows, cov)
    p = load_panel(c, v, center=True)
    assert p.region_ids == ("a", "b") and p.months == (1, 2)
    assert np.isnan(p.y[0, 1]) and p.n_observed == 3
    assert p.y[1, 0] == pytest.approx((1.0 * 3 + 0.5) / 4)
    assert p.covariate_scaling["inc"]["center"] == pytest.approx(3.5)
    np.testing.assert_allclose(p.X[:, 0, 0], [-0.5, 0.5])


@pytest.mark.parametrize("rows,cov,msg", [
    ([("a", 1, 0.5, 10), ("a", 1, 0.6, 10)], {"region_id": ["a"], "x": [1.0]}, "duplicate"),
    ([("a", 1, 0.5, 10), ("z", 1, 0.6, 10)], {"region_id": ["a"], "x": [1.0]}, "z"),
    ([("a", 1, 1.5, 10)], {"region_id": ["a"], "x": [1.0]}, "rate"),
])
def test_load_panel_errors(tmp_path, rows, cov, msg):
    c, v = write_tables(tmp_path, rows, cov)
    with pytest.raises(PanelError, match=msg):
        load_panel(c, v)


def test_save_and_read_round_trip(tmp_path, small_panel):
    save_panel(small_panel, tmp_path / "p")
    back = read_panel_dir(tmp_path / "p")
    np.testing.assert_array_equal(back.raw_rate, small_panel.raw_rate)
    np.testing.assert_array_equal(back.X, small_panel.X)
    assert back.checksum() == read_panel_dir(tmp_path / "p").checksum()


def test_unadjusted_panel_requires_open_interval():
    with pytest.raises(PanelError):
        panel_from_arrays([[0.0, 0.5]], [[1, 1]], adjust=False)
    p = panel_from_arrays([[0.2, 0.5]], [[1, 1]], adjust=False)
    np.testing.assert_array_equal(p.y, [[0.2, 0.5]])


def test_correlation_screen_flags_only():
    rng = np.random.default_rng(0)
    a = rng.normal(size=50)
    df = pd.DataFrame({"region_id": range(50), "a": a, "b": a + 0.01 * rng.normal(size=50),
                       "c": rng.normal(size=50)})
    rep = correlation_screen(df)
    assert rep["flagged"] == [["a", "b"]]
    assert len(rep["pairs"]) == 3


def test_compliance_frame_from_counts():
    df = compliance_frame({("2", 3): (1, 4), ("1", 1): (3, 3)})
    assert df.to_dict("records")[0] == {"region_id": "1", "month": 1, "rate": 1.0, "n_journeys": 3}
