import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fetrack.boxes import BBox, box_iou
from fetrack.errors import BoxError, GeometryError, NotFound, ParseError, RangeError
from fetrack.events import (
    EventStream,
    GroundTruth,
    FrameRecord,
    load_sequence,
    read_events_csv,
    read_events_evt,
    slice_stream,
    validate,
    write_events_csv,
    write_events_evt,
    write_sequence,
)
from fetrack.simulator import SceneSpec, simulate

from oracles import random_stream_columns


def stream_of(t, x=None, y=None, p=None, width=10, height=10):
    n = len(t)
    return EventStream(width, height, t, x if x is not None else [0] * n, y if y is not None else [0] * n,
                       p if p is not None else [1] * n)


def write_minimal_sequence(d, events_text, frames=2, fps=40.0):
    (d / "frames").mkdir(parents=True)
    (d / "meta.json").write_text(json.dumps({"width": 8, "height": 6, "fps": fps}))
    from fetrack.events import write_pgm
    for j in range(frames):
        write_pgm(d / "frames" / f"{j:06d}.pgm", np.full((6, 8), 10 * j, dtype=np.uint8))
    (d / "events.csv").write_text(events_text)
    (d / "gt.txt").write_text("0,1.0,1.0,3.0,2.0\n")


class TestBoxes:
    def test_center_and_area(self):
        b = BBox(1, 2, 4, 6)
        assert b.center == (3.0, 5.0)
        assert b.area == 24

    def test_degenerate_box_rejected(self):
        with pytest.raises(BoxError):
            BBox(0, 0, 0, 3).validate()

    def test_clamp_keeps_box_inside(self):
        b = BBox(-5, 8, 30, 4).clamp(20, 10)
        assert b.x >= 0 and b.y >= 0 and b.x + b.w <= 20 and b.y + b.h <= 10

    def test_vectorised_iou(self):
        assert box_iou(np.array([0, 0, 2, 2.0]), np.array([1, 1, 2, 2.0])) == pytest.approx(1 / 7)


class TestLoadSequence:
    def test_contract_example(self, tmp_path):
        write_minimal_sequence(tmp_path, "t_us,x,y,p\n-0,0,0,1\n100,1,1,-1\n25000,2,2,1\n")
        seq = load_sequence(tmp_path)
        stream, frames, gt = seq
        assert len(stream) == 3 and len(frames) == 2
        assert [f.T for f in frames] == [0, 25000]
        assert gt[0] == BBox(1.0, 1.0, 3.0, 2.0)

    def test_zero_polarity_reports_line(self, tmp_path):
        body = "".join(f"{10 * i},0,0,1\n" for i in range(5)) + "60,0,0,0\n"
        write_minimal_sequence(tmp_path, "t_us,x,y,p\n" + body)
        with pytest.raises(ParseError) as exc:
            load_sequence(tmp_path)
        assert exc.value.line == 7

    def test_missing_file(self, tmp_path):
        write_minimal_sequence(tmp_path, "t_us,x,y,p\n")
        (tmp_path / "gt.txt").unlink()
        with pytest.raises(NotFound):
            load_sequence(tmp_path)

    def test_geometry_mismatch(self, tmp_path):
        write_minimal_sequence(tmp_path, "t_us,x,y,p\n5,9,0,1\n")
        with pytest.raises(GeometryError):
            load_sequence(tmp_path)

    def test_out_of_window_events_dropped(self, tmp_path):
        # frame times 25000 and 50000 via explicit timestamps; window is [0, 50000]
        write_minimal_sequence(tmp_path, "t_us,x,y,p\n0,0,0,1\n50000,0,0,1\n50001,0,0,1\n")
        meta = json.loads((tmp_path / "meta.json").read_text())
        meta["timestamps_us"] = [25000, 50000]
        (tmp_path / "meta.json").write_text(json.dumps(meta))
        assert list(load_sequence(tmp_path).stream.t) == [0, 50000]

    @pytest.mark.parametrize("fmt", ["evt", "csv"])
    def test_simulated_round_trip(self, tmp_path, fmt):
        spec = SceneSpec(width=48, height=40, num_frames=4, substeps=4, noise_rate=50.0, seed=3)
        spec.objects[0].trajectory.waypoints = [[0.0, 20.0, 20.0, 12.0, 10.0], [0.1, 28.0, 22.0, 12.0, 10.0]]
        sim = simulate(spec)
        write_sequence(tmp_path / "s", sim.stream, sim.frames, sim.gt, sim.meta, fmt)
        back = load_sequence(tmp_path / "s")
        assert back.stream == sim.stream
        assert len(back.frames) == len(sim.frames)
        for a, b in zip(back.frames, sim.frames):
            assert a.T == b.T and np.array_equal(a.image, b.image)
        assert back.gt.boxes == sim.gt.boxes


class TestEventFiles:
    def test_evt_layout(self, tmp_path):
        s = EventStream(346, 260, [1, 2**40], [3, 345], [4, 259], [1, -1])
        write_events_evt(tmp_path / "e.evt", s)
        raw = (tmp_path / "e.evt").read_bytes()
        assert raw[:4] == b"FE01" and len(raw) == 12 + 2 * 13
        assert int.from_bytes(raw[4:8], "little") == 346
        assert read_events_evt(tmp_path / "e.evt") == s

    def test_evt_bad_magic(self, tmp_path):
        (tmp_path / "e.evt").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(ParseError):
            read_events_evt(tmp_path / "e.evt")

    def test_csv_round_trip(self, tmp_path, rng):
        cols = random_stream_columns(rng, 50, 20, 10, 1000)
        s = EventStream(20, 10, *cols)
        write_events_csv(tmp_path / "e.csv", s)
        back = read_events_csv(tmp_path / "e.csv", 20, 10)
        assert back == s


class TestValidate:
    def test_sorted_in_bounds_is_empty(self):
        assert validate(stream_of([1, 2, 2, 5])).is_empty

    def test_single_descent(self):
        assert validate(stream_of([5, 3])).sortedness == [1]

    def test_shuffled_descents_match_scan(self, rng):
        cols = random_stream_columns(rng, 1000, 32, 32, 10**6)
        order = rng.permutation(1000)
        s = EventStream(32, 32, *(c[order] for c in cols))
        t = s.t
        descents = [i for i in range(1, len(t)) if t[i] < t[i - 1]]
        report = validate(s)
        assert report.sortedness == descents
        assert not report.out_of_bounds and not report.polarity

    def test_out_of_bounds_and_polarity(self):
        s = EventStream(4, 4, [0, 1, 2], [0, 4, 1], [0, 0, -1], [1, 1, 0])
        r = validate(s)
        assert r.out_of_bounds == [1, 2] and r.polarity == [2]


class TestSlice:
    def test_half_open(self):
        s = stream_of([0, 10, 20, 29])
        assert list(slice_stream(s, 10, 20).t) == [10]

    def test_closed_point(self):
        assert len(slice_stream(stream_of([0]), 0, 0, closed_end=True)) == 1

    def test_reversed_range(self):
        with pytest.raises(RangeError):
            slice_stream(stream_of([0]), 5, 1)

    def test_geometry_copied(self):
        s = stream_of([1, 2], width=7, height=3)
        part = slice_stream(s, 0, 10)
        assert (part.width, part.height) == (7, 3)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6), closed=st.booleans(), sort=st.booleans())
    def test_matches_filter_oracle_and_is_idempotent(self, seed, closed, sort):
        rng = np.random.default_rng(seed)
        cols = random_stream_columns(rng, 200, 16, 16, 500, sorted_=sort)
        s = EventStream(16, 16, *cols)
        a, b = sorted(rng.integers(0, 520, 2))
        got = slice_stream(s, a, b, closed)
        keep = [i for i in range(len(s)) if a <= s.t[i] and (s.t[i] <= b if closed else s.t[i] < b)]
        assert got == s.select(np.array(keep, dtype=np.int64))
        assert slice_stream(got, a, b, closed) == got


def test_stream_is_immutable():
    s = stream_of([1, 2])
    with pytest.raises(ValueError):
        s.t[0] = 5


def test_ground_truth_indices():
    gt = GroundTruth({3: BBox(0, 0, 1, 1), 1: BBox(0, 0, 2, 2)})
    assert gt.indices() == [1, 3] and 3 in gt and len(gt) == 2


def test_frame_record_fields():
    f = FrameRecord(0, 25000, np.zeros((2, 2), dtype=np.uint8))
    assert f.T == 25000
