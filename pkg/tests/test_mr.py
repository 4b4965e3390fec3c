import pytest
from hypothesis import given, settings, strategies as st

from tloc.mr import (MR_HEADER, BaseStationId, MRFormatError, MRSample, NeighborEntry, StationRecord,
                     asu_check, parse_mr_csv, parse_station_csv, segment_trajectories, sort_entries,
                     split_series, write_mr_csv, write_station_csv)

station_ids = st.builds(BaseStationId, st.integers(0, 999), st.integers(0, 65535))
entries = st.builds(NeighborEntry, station_ids, st.integers(-113, -43).map(float),
                    st.integers(0, 31), st.integers(0, 4))
labels = st.one_of(st.none(), st.tuples(st.floats(-179, 179), st.floats(-89, 89)))
samples = st.builds(lambda ts, dev, ents, lab: MRSample(ts, dev, sort_entries(ents), lab),
                    st.integers(0, 2**31).map(float), st.sampled_from(["a", "b", "dev9"]),
                    st.lists(entries, min_size=1, max_size=7), labels)


@settings(max_examples=60, deadline=None)
@given(st.lists(samples, max_size=8))
def test_csv_round_trip(tmp_path_factory, batch):
    path = tmp_path_factory.mktemp("mr") / "mr.csv"
    write_mr_csv(path, batch)
    assert parse_mr_csv(path) == batch


def test_parse_sorts_entries_by_descending_rssi(tmp_path):
    path = tmp_path / "mr.csv"
    row = {h: "" for h in MR_HEADER}
    row.update(timestamp="5", device_id="d", rnc1="1", cell1="2", rssi1="-90", asu1="11", sig1="3",
               rnc2="1", cell2="3", rssi2="-60", asu2="26", sig2="4")
    path.write_text(",".join(MR_HEADER) + "\n" + ",".join(row[h] for h in MR_HEADER) + "\n")
    (s,) = parse_mr_csv(path)
    assert [e.rssi for e in s.entries] == [-60.0, -90.0]
    assert s.serving == BaseStationId(1, 3)
    assert s.label is None


def test_malformed_rows_are_all_reported(tmp_path):
    path = tmp_path / "mr.csv"
    good = {h: "" for h in MR_HEADER}
    good.update(timestamp="1", device_id="d", rnc1="1", cell1="1", rssi1="-70", asu1="21", sig1="4")
    bad_num = dict(good, rssi1="loud")
    bad_id = dict(good, cell1="")
    lines = [",".join(MR_HEADER)] + [",".join(r[h] for h in MR_HEADER) for r in (good, bad_num, bad_id)]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MRFormatError) as exc:
        parse_mr_csv(path)
    msg = str(exc.value)
    assert "line 3" in msg and "line 4" in msg


def test_missing_columns_rejected(tmp_path):
    path = tmp_path / "mr.csv"
    path.write_text("timestamp,device_id\n1,d\n")
    with pytest.raises(MRFormatError, match="header"):
        parse_mr_csv(path)


def test_station_csv_round_trip_and_validation(tmp_path):
    reg = {BaseStationId(1, 2): StationRecord(BaseStationId(1, 2), 121.123456789, 31.5),
           BaseStationId(1, 3): StationRecord(BaseStationId(1, 3), -0.1, -45.25)}
    path = tmp_path / "st.csv"
    write_station_csv(path, reg)
    assert parse_station_csv(path) == reg
    path.write_text("rnc,cell,lon,lat\n1,2,200,0\n")
    with pytest.raises(MRFormatError, match="line 2"):
        parse_station_csv(path)
    path.write_text("rnc,cell,lon,lat\n1,2,0,0\n1,2,1,1\n")
    with pytest.raises(MRFormatError, match="duplicate"):
        parse_station_csv(path)


def test_sample_invariants():
    with pytest.raises(ValueError):
        MRSample(0.0, "d", ())
    with pytest.raises(ValueError):
        MRSample(0.0, "d", (NeighborEntry(None, -70.0, 21, 4),))
    ent = NeighborEntry(BaseStationId(1, 1), -70.0, 21, 4)
    with pytest.raises(ValueError):
        MRSample(0.0, "d", (ent,) * 8)


def test_asu_check_flags_disagreeing_entries():
    s = MRSample(0.0, "d", (NeighborEntry(BaseStationId(1, 1), -71.0, 21, 4),
                            NeighborEntry(BaseStationId(1, 2), -91.0, 3, 2)))
    assert asu_check(s) == [False, True]


@given(st.lists(st.integers(0, 10_000), max_size=40).map(sorted), st.integers(1, 500))
def test_split_series_partitions_at_large_gaps(times, gap):
    parts = split_series(times, gap)
    flat = [i for sl in parts for i in range(len(times))[sl]]
    assert flat == list(range(len(times)))
    for sl in parts:
        chunk = times[sl]
        assert all(b - a <= gap for a, b in zip(chunk, chunk[1:]))
    for a, b in zip(parts, parts[1:]):
        assert times[b.start] - times[a.stop - 1] > gap


def test_segment_trajectories_per_device_and_gap():
    sid = BaseStationId(1, 1)
    ent = (NeighborEntry(sid, -70.0, 21, 4),)
    mk = lambda t, dev, lab=(0.0, 0.0): MRSample(float(t), dev, ent, lab)
    data = [mk(0, "b"), mk(10, "b"), mk(10, "b"), mk(9000, "b"), mk(5, "a"), mk(6, "a", None)]
    trajs = segment_trajectories(data, gap_threshold=3600)
    assert [(t.device_id, t.times) for t in trajs] == [("a", (5.0,)), ("b", (0.0, 10.0)), ("b", (9000.0,))]
    with pytest.raises(ValueError):
        segment_trajectories(data, gap_threshold=0)
