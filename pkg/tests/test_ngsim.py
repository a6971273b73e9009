import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from miat.data import DatasetSplit, GridSpec, Lateral, Longitudinal, VehicleRecord
from miat.ngsim import (DatasetFormatError, build_samples, cap_lane_id, dataset_stats, dumps_dataset,
                        grid_assign, group_tracks, label_lateral, label_longitudinal, load_dataset,
                        loads_dataset, normalize_records, parse_records, save_dataset, split_by_vehicle,
                        valid_anchors, write_records_csv)

HEADER = "Vehicle_ID,Frame_ID,Total_Frames,Local_X,Local_Y,Lane_ID,v_Vel,v_Acc\n"


def _csv_fixture(n_vehicles=3, n_frames=100, shuffle_seed=0):
    rows = []
    for v in range(1, n_vehicles + 1):
        for f in range(n_frames):
            rows.append(f"{v},{f + 10},{n_frames},{6.0 * v},{50.0 * f},{v},{40.0},{0.5}\n")
    np.random.default_rng(shuffle_seed).shuffle(rows)
    return HEADER + "".join(rows)


def _count_by_hand(text):
    lines = [ln for ln in text.splitlines()[1:] if ln.strip()]
    return len(lines), len({ln.split(",")[0] for ln in lines})


def test_parse_counts_match_line_count_oracle():
    text = _csv_fixture()
    records = parse_records(io.StringIO(text))
    n_rows, n_vehicles = _count_by_hand(text)
    assert (n_rows, n_vehicles) == (300, 3)
    assert len(records) == n_rows
    assert len(group_tracks(records)) == n_vehicles


def test_parse_converts_feet_and_sorts_frames():
    text = HEADER + "1,5,2,6.0,10.0,2,10.0,0\n1,3,2,6.0,0.0,2,10.0,0\n"
    records = parse_records(io.StringIO(text))
    assert [r.frame_id for r in records] == [3, 5]
    assert records[0].local_x == pytest.approx(1.8288)
    assert records[1].local_y == pytest.approx(3.048)
    assert records[0].velocity == pytest.approx(3.048)


def test_parse_skips_and_tallies_malformed_rows():
    text = HEADER + "1,1,2,6.0,0.0,2,10.0,0\n1,2,2,abc,0.0,2,10.0,0\n1,3,2,6.0,,2,10.0,0\n"
    skipped = []
    records = parse_records(io.StringIO(text), skipped)
    assert len(records) == 1
    assert [line for line, _ in skipped] == [3, 4]


def test_parse_missing_column_names_it():
    text = "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel\n1,1,0,0,0\n"
    with pytest.raises(ValueError, match="Lane_ID"):
        parse_records(io.StringIO(text))


def test_csv_round_trip():
    records = parse_records(io.StringIO(_csv_fixture(2, 5)))
    buf = io.StringIO()
    write_records_csv(records, buf)
    again = parse_records(io.StringIO(buf.getvalue()))
    assert len(again) == len(records)
    for a, b in zip(records, again):
        assert (a.vehicle_id, a.frame_id, a.lane_id) == (b.vehicle_id, b.frame_id, b.lane_id)
        assert a.local_x == pytest.approx(b.local_x, abs=1e-12)
        assert a.velocity == pytest.approx(b.velocity, abs=1e-12)


@pytest.mark.parametrize("lane, expected", [(8, 6), (3, 3), (6, 6), (1, 1)])
def test_cap_lane_id(lane, expected):
    assert cap_lane_id(lane) == expected


def test_cap_lane_id_rejects_nonpositive():
    with pytest.raises(ValueError):
        cap_lane_id(0)


def test_normalize_caps_lanes():
    out = normalize_records([VehicleRecord(1, 0, 0.0, 0.0, 7, 1.0)])
    assert out[0].lane_id == 6


def _track(lanes, velocities=None, start=0, vid=1):
    n = len(lanes)
    velocities = np.full(n, 10.0) if velocities is None else velocities
    return [VehicleRecord(vid, start + i, 0.0, float(i), int(lanes[i]), float(velocities[i])) for i in range(n)]


def test_label_lateral_examples():
    anchor = 50
    assert label_lateral(_track([4] * 101), anchor) == Lateral.LK
    assert label_lateral(_track([4] * 50 + [3] * 51), anchor) == Lateral.CLL
    assert label_lateral(_track([2] * 50 + [3] * 51), anchor) == Lateral.CLR


def test_label_lateral_clips_at_track_end():
    assert label_lateral(_track([2] * 30 + [1] * 30), 40) == Lateral.CLL


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=3, max_size=90), st.integers(0, 89))
def test_label_lateral_mirror_antisymmetry(lanes, anchor):
    anchor = anchor % len(lanes)
    original = label_lateral(_track(lanes), anchor)
    mirrored = label_lateral(_track([7 - lane for lane in lanes]), anchor)
    swap = {Lateral.LK: Lateral.LK, Lateral.CLL: Lateral.CLR, Lateral.CLR: Lateral.CLL}
    assert mirrored == swap[original]


@pytest.mark.parametrize("v_h, v_f, expected", [
    (10.0, 10.0, Longitudinal.CON), (10.0, 12.0, Longitudinal.ACC), (10.0, 9.0, Longitudinal.DEC),
    (0.0, 1.0, Longitudinal.ACC), (0.0, 0.0, Longitudinal.CON),
    (10.0, 10.4, Longitudinal.CON), (10.0, 9.6, Longitudinal.CON),
])
def test_label_longitudinal_examples(v_h, v_f, expected):
    # past window covers frames 0..40, future window 40..80; the shared anchor
    # frame carries v_f so the past mean is (40 v_h + v_f) / 41
    vel = np.array([v_h] * 40 + [v_f] * 41)
    track = _track([3] * 81, vel)
    past_mean = vel[:41].mean()
    fut_mean = vel[40:].mean()
    if past_mean == 0:
        oracle = Longitudinal.ACC if fut_mean > 0 else Longitudinal.CON
    elif fut_mean > 1.05 * past_mean:
        oracle = Longitudinal.ACC
    elif fut_mean < 0.95 * past_mean:
        oracle = Longitudinal.DEC
    else:
        oracle = Longitudinal.CON
    assert oracle == expected
    assert label_longitudinal(track, 40) == expected


def test_label_longitudinal_threshold_configurable():
    vel = np.array([10.0] * 40 + [10.4] * 41)
    assert label_longitudinal(_track([3] * 81, vel), 40, eps=0.01) == Longitudinal.ACC


def _rec(vid, lane, y):
    return VehicleRecord(vid, 0, 0.0, y, lane, 20.0)


def test_grid_assign_examples():
    spec = GridSpec()
    assert grid_assign(_rec(1, 3, 100.0), _rec(2, 3, 100.0), spec) == 19
    assert grid_assign(_rec(1, 3, 100.0), _rec(2, 2, 109.144), spec) == 8
    assert grid_assign(_rec(1, 3, 100.0), _rec(2, 3, 140.0), spec) is None
    assert grid_assign(_rec(1, 3, 100.0), _rec(2, 5, 100.0), spec) is None
    assert grid_assign(_rec(1, 3, 100.0), _rec(1, 3, 100.0), spec) is None


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-40, 40), st.floats(0, 500))
def test_grid_assign_mirror_consistency(lane_a, lane_b, dy, y):
    spec = GridSpec()
    a, b = _rec(1, lane_a, y), _rec(2, lane_b, y + dy)
    ab, ba = grid_assign(a, b, spec), grid_assign(b, a, spec)
    if ab is not None and ba is not None:
        c, r = divmod(ab, spec.cells)
        assert ba == spec.cell(2 - c, 12 - r)


def _brute_force_anchor_count(frames, T, F, stride):
    present = set(frames)
    first = min(frames) + 2 * (T - 1)
    count = 0
    for a in frames:
        if a < first or (a - first) % (2 * stride):
            continue
        if all(a - 2 * k in present for k in range(T)) and all(a + 2 * k in present for k in range(1, F + 1)):
            count += 1
    return count


def _straight_track(n_frames, vid=1, lane=3, start=0, gaps=()):
    return [VehicleRecord(vid, start + f, 3.7 * (lane - 1), 20.0 * 0.1 * f, lane, 20.0)
            for f in range(n_frames) if f not in gaps]


def test_short_vehicle_yields_no_samples():
    assert build_samples(_straight_track(20), T=16, F=25) == []


def test_exact_length_vehicle_matches_brute_force():
    records = _straight_track(31 + 50)
    samples = build_samples(records, T=16, F=25, stride=1)
    assert len(samples) == _brute_force_anchor_count([r.frame_id for r in records], 16, 25, 1) == 1


@pytest.mark.parametrize("n_frames, gaps, stride", [(120, (), 1), (140, (90, 91), 1), (160, (), 3), (97, (5,), 2)])
def test_anchor_enumeration_matches_brute_force(n_frames, gaps, stride):
    records = _straight_track(n_frames, gaps=gaps)
    track = group_tracks(records)[1]
    anchors = valid_anchors(track, 16, 25, stride)
    assert len(anchors) == _brute_force_anchor_count([r.frame_id for r in records], 16, 25, stride)
    assert len(build_samples(records, T=16, F=25, stride=stride)) == len(anchors)


def test_lonely_vehicle_has_empty_mask():
    samples = build_samples(_straight_track(100), T=16, F=25)
    assert samples
    for s in samples:
        assert not s.neighbor_mask.any()
        s.validate()


def test_neighbors_are_gridded_relative_to_anchor():
    ego = _straight_track(100, vid=1, lane=3)
    left = [VehicleRecord(2, r.frame_id, r.local_x - 3.7, r.local_y + 9.144, 2, 20.0) for r in ego]
    samples = build_samples(ego + left, T=16, F=25, target_ids=[1])
    s = samples[0]
    s.validate()
    assert s.neighbor_mask[8].all()
    assert s.neighbor_mask.sum() == 16
    np.testing.assert_allclose(s.neighbor_histories[8, -1], [-3.7, 9.144], atol=1e-5)
    np.testing.assert_allclose(s.future[0], [0.0, 4.0], atol=1e-5)


def test_parallel_build_matches_serial():
    records = []
    for v in range(1, 6):
        records += _straight_track(90 + 3 * v, vid=v, lane=1 + v % 3, start=v)
    serial = build_samples(records, T=16, F=25)
    parallel = build_samples(records, T=16, F=25, workers=2)
    assert len(serial) == len(parallel) > 0
    assert all(a.equals(b) for a, b in zip(serial, parallel))


def _fake_samples(counts, sample_factory):
    rng = np.random.default_rng(0)
    out = []
    for vid, n in enumerate(counts, start=1):
        for _ in range(n):
            s = sample_factory(rng, T=2, F=1)
            s.ego_id = vid
            out.append(s)
    return out


def test_split_equal_counts(sample_factory):
    split = split_by_vehicle(_fake_samples([4] * 10, sample_factory), seed=3)
    assert [len({s.ego_id for s in p}) for _, p in split.parts()] == [7, 1, 2]


def test_split_deterministic_and_needs_three_vehicles(sample_factory):
    samples = _fake_samples([3, 5, 2, 7, 1, 4], sample_factory)
    a, b = split_by_vehicle(samples, seed=11), split_by_vehicle(samples, seed=11)
    assert a.equals(b)
    with pytest.raises(ValueError):
        split_by_vehicle(_fake_samples([3, 4], sample_factory))


def _best_deviation(counts, fractions=(0.7, 0.1, 0.2)):
    total = sum(counts)
    best = np.inf
    for assign in itertools.product(range(3), repeat=len(counts)):
        sums = [sum(c for c, a in zip(counts, assign) if a == j) for j in range(3)]
        best = min(best, max(abs(s / total - f) for s, f in zip(sums, fractions)))
    return best


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=3, max_size=8), st.integers(0, 1000))
def test_split_matches_exhaustive_oracle_when_achievable(counts, seed):
    from conftest import make_sample
    samples = _fake_samples(counts, make_sample)
    split = split_by_vehicle(samples, seed=seed)
    total = len(samples)
    dev = max(abs(len(p) / total - f) for (_, p), f in zip(split.parts(), (0.7, 0.1, 0.2)))
    if _best_deviation(counts) <= 0.02:
        assert dev <= 0.02 + 1e-12
    ids = [split.vehicle_ids(n) for n, _ in split.parts()]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_dataset_round_trip_and_corruption(tmp_path, sample_factory):
    rng = np.random.default_rng(5)
    empty = DatasetSplit()
    assert loads_dataset(dumps_dataset(empty)).equals(empty)
    split = DatasetSplit([sample_factory(rng) for _ in range(70)], [sample_factory(rng) for _ in range(10)],
                         [sample_factory(rng) for _ in range(20)])
    path = tmp_path / "d.bin"
    save_dataset(split, path)
    assert load_dataset(path).equals(split)
    blob = bytearray(path.read_bytes())
    for pos in (0, 9, 20):
        bad = bytearray(blob)
        bad[pos] ^= 0xFF
        with pytest.raises(DatasetFormatError):
            loads_dataset(bytes(bad))
    with pytest.raises(DatasetFormatError):
        loads_dataset(bytes(blob[:-10]))
    bad = bytearray(blob)
    bad[8] = 99
    with pytest.raises(DatasetFormatError, match="version"):
        loads_dataset(bytes(bad))


def test_dataset_stats(sample_factory):
    rng = np.random.default_rng(1)
    split = DatasetSplit([sample_factory(rng) for _ in range(5)], [], [sample_factory(rng)])
    stats = dataset_stats(split)
    assert stats["splits"]["train"]["samples"] == 5
    assert sum(stats["splits"]["train"]["classes"].values()) == 5
    assert len(stats["splits"]["test"]["classes"]) == 9
