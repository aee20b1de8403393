import datetime as dt
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdmnowcast.data import (
    AccessLoggingTriangle,
    CensoredTriangle,
    EventRecord,
    ReportingTriangle,
    build_triangle,
    censor_at,
    cumulative_reported,
    read_records,
    write_long_csv,
)

D0 = dt.date(2021, 1, 1)


def day(i):
    return D0 + dt.timedelta(days=i)


def random_records(rng, n, n_days=20, regions=("A", "B", "C"), max_delay=20):
    out = []
    for _ in range(n):
        t = int(rng.integers(n_days))
        out.append(EventRecord(str(rng.choice(regions)), day(t), day(t + int(rng.integers(max_delay))),
                               int(rng.integers(0, 9))))
    return out


def test_single_record_lands_in_first_delay():
    tri = build_triangle([EventRecord("A", day(4), day(4), 3)], d_max=2)
    assert tri.z.shape == (1, 1, 2)
    assert tri.z[0, 0, 0] == 3 and tri.z.sum() == 3
    assert tri.y[0, 0] == 3


def test_empty_records_with_explicit_grid():
    tri = build_triangle([], d_max=4, regions=["A"], n_times=3, time_origin=D0)
    assert tri.z.shape == (3, 1, 4)
    assert np.all(tri.y == 0)


def test_empty_records_without_grid_rejected():
    with pytest.raises(ValueError):
        build_triangle([], d_max=3)


def test_totals_match_groupby_oracle(rng):
    recs = random_records(rng, 200)
    tri = build_triangle(recs, d_max=14)
    oracle = defaultdict(int)
    for r in recs:
        oracle[(r.region, r.event_date)] += r.count  # late reports fold into the last delay
    for (reg, ev), total in oracle.items():
        t = (ev - tri.time_origin).days
        assert tri.y[t, tri.regions.index(reg)] == total
    assert tri.y.sum() == sum(oracle.values())


def test_delay_placement_and_drop_policy(rng):
    recs = random_records(rng, 200)
    fold = build_triangle(recs, d_max=5)
    drop = build_triangle(recs, d_max=5, late_policy="drop")
    late = sum(r.count for r in recs if r.delay > 5)
    assert fold.y.sum() - drop.y.sum() == late
    np.testing.assert_array_equal(fold.z[..., :4], drop.z[..., :4])


def test_report_before_event_rejected_with_index():
    recs = [EventRecord("A", day(1), day(1), 1), EventRecord("A", day(3), day(2), 1)]
    with pytest.raises(ValueError, match="record 1"):
        build_triangle(recs, d_max=3)


def test_unknown_region_rejected():
    with pytest.raises(ValueError, match="unknown region"):
        build_triangle([EventRecord("Z", day(0), day(0), 1)], d_max=2, regions=["A"])


def test_invalid_arguments():
    with pytest.raises(ValueError):
        build_triangle([EventRecord("A", day(0), day(0), 1)], d_max=0)
    with pytest.raises(ValueError):
        build_triangle([EventRecord("A", day(0), day(0), 1)], d_max=2, late_policy="keep")
    with pytest.raises(ValueError):
        ReportingTriangle(-np.ones((2, 1, 2)), D0, ("A",))


def test_calendar_gap_becomes_zero_row():
    tri = build_triangle([EventRecord("A", day(0), day(0), 2), EventRecord("A", day(3), day(4), 5)], d_max=3)
    assert tri.n_times == 4
    np.testing.assert_array_equal(tri.y[:, 0], [2, 0, 0, 5])


def test_missing_cells_are_flagged_not_zero():
    tri = build_triangle([EventRecord("A", day(0), day(0), 2), EventRecord("A", day(0), day(1), None)], d_max=3,
                         n_times=3)
    assert tri.missing[0, 0, 1] and not tri.missing[0, 0, 0]
    ct = CensoredTriangle(tri, 2)
    assert not ct.visible[0, 0, 1]


def test_round_trip_preserves_mass(rng, tmp_path):
    tri = build_triangle(random_records(rng, 150), d_max=6)
    path = tmp_path / "long.csv"
    write_long_csv(tri, path)
    back = build_triangle(read_records(path), d_max=6, regions=tri.regions, time_origin=tri.time_origin,
                          n_times=tri.n_times)
    np.testing.assert_array_equal(back.z, tri.z)


def test_wide_format(tmp_path):
    p = tmp_path / "wide.csv"
    p.write_text("region,event_date,d1,d2,d3\nA,2021-01-01,1,2,3\nA,2021-01-02,4,0,NA\n")
    tri = build_triangle(read_records(p), d_max=3)
    np.testing.assert_array_equal(tri.z[:, 0], [[1, 2, 3], [4, 0, 0]])
    assert tri.missing[1, 0, 2]


def test_bad_file_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("region,event_date,report_date,count\nA,2021-01-01,2021-01-01,1\nA,notadate,2021-01-02,1\n")
    with pytest.raises(ValueError, match=":3:"):
        read_records(p)


# censoring -----------------------------------------------------------------


def _tri(rng, T=12, S=2, D=4):
    return ReportingTriangle(rng.integers(0, 10, (T, S, D)), D0, tuple("AB"[:S]))


def test_censor_last_row_sees_first_delay(rng):
    tri = _tri(rng)
    ct = censor_at(tri, tri.n_times - 1)
    assert ct.observed[-1, 0].tolist() == [True, False, False, False]
    assert ct.observed[-2, 0].tolist() == [True, True, False, False]


def test_single_delay_fully_observed(rng):
    tri = _tri(rng, D=1)
    assert censor_at(tri, tri.n_times - 1).observed.all()


def test_observed_count_per_row_matches_loop_oracle(rng):
    tri = _tri(rng, T=15, D=5)
    t0 = tri.n_times - 5
    ct = censor_at(tri, t0)
    for t in range(tri.n_times):
        expect = max(0, min(tri.d_max, t0 - t + 1))
        assert ct.observed[t, 0].sum() == expect
        assert ct.n_visible_delays()[t, 0] == expect
    full = ct.fully_observed[:, 0]
    np.testing.assert_array_equal(full, np.arange(tri.n_times) + tri.d_max - 1 <= t0)


def test_censor_out_of_range(rng):
    tri = _tri(rng)
    for bad in (-1, tri.n_times):
        with pytest.raises(ValueError):
            censor_at(tri, bad)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10), st.integers(0, 10))
def test_censoring_monotone(a, b):
    tri = _tri(np.random.default_rng(0))
    lo, hi = sorted((min(a, tri.n_times - 1), min(b, tri.n_times - 1)))
    assert not np.any(censor_at(tri, lo).observed & ~censor_at(tri, hi).observed)


def test_fully_observed_rows_equal_final_totals(rng):
    tri = _tri(rng)
    ct = censor_at(tri, 8)
    tot = ct.observed_totals()
    for t in range(0, 8 - tri.d_max + 2):
        np.testing.assert_array_equal(tot[t], tri.y[t])
    assert np.all(tot[8 - tri.d_max + 2:] == -1)


def test_cumulative_reported():
    z = np.zeros((3, 1, 3), dtype=int)
    z[0, 0] = [2, 1, 0]
    tri = ReportingTriangle(z, D0, ("A",))
    ct = censor_at(tri, 2)
    np.testing.assert_array_equal(cumulative_reported(ct, 0, 0), [2, 3, 3])
    ct0 = censor_at(tri, 0)
    assert cumulative_reported(ct0, 1, 0).size == 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=6), st.integers(0, 8))
def test_cumulative_reported_fold_oracle(row, t0):
    D = len(row)
    z = np.zeros((3, 1, D), dtype=int)
    z[0, 0] = row
    tri = ReportingTriangle(z, D0, ("A",))
    ct = censor_at(tri, min(t0, 2))
    out = cumulative_reported(ct, 0, 0)
    k = min(D, min(t0, 2) + 1)
    acc, expect = 0, []
    for v in row[:k]:
        acc += v
        expect.append(acc)
    assert out.tolist() == expect


def test_access_logging_flags_future_reads(rng):
    tri = _tri(rng)
    logged = AccessLoggingTriangle(tri, 6)
    logged.visible_z()
    logged.partial_sums()
    assert len(logged.leaked_cells()) == 0
    _ = logged.triangle.z  # a direct read of the full array touches future cells
    assert len(logged.leaked_cells()) > 0
