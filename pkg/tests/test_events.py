"""Tests for event IO, frame stacking, annotations and the synthetic scene generator."""
import json

import numpy as np
import pytest

from mvheat.events import (EVENT_DTYPE, Annotation, AnnotationError, EventFormatError, EventValidationError,
                           frames_to_input, load_annotations, load_events, make_stream, save_annotations,
                           save_events, stack_events)
from mvheat.synth import SHAPES, SceneObject, SyntheticSceneConfig, frame_window_us, make_dataset, synth_generate
from mvheat.tensor import ConfigError


@pytest.fixture
def stream():
    return make_stream(t=[0, 5, 10, 15], x=[0, 1, 2, 3], y=[0, 0, 1, 1], p=[1, 0, 1, 1], width=4, height=2)


class TestStacking:
    def test_four_events_two_bins(self, stream):
        frames = stack_events(stream, 0, 20, 2, 2, 4)
        c = frames.counts
        assert c.shape == (4, 2, 4)
        assert c[1, 0, 0] == 1      # t=0, bin 0, p=1
        assert c[0, 0, 1] == 1      # t=5, bin 0, p=0
        assert c[3, 1, 2] == 1      # t=10, bin 1, p=1
        assert c[3, 1, 3] == 1      # t=15, bin 1, p=1
        assert frames.total == 4 and frames.dropped == 0

    def test_window_is_half_open(self, stream):
        frames = stack_events(stream, 5, 15, 1, 2, 4)
        assert frames.total == 2 and frames.dropped == 2

    def test_out_of_frame_events_are_dropped(self, stream):
        frames = stack_events(stream, 0, 20, 1, 1, 2)
        assert frames.total == 2 and frames.dropped == 2

    def test_count_conservation(self, rng):
        n = 5000
        s = make_stream(np.sort(rng.integers(0, 1000, n)), rng.integers(0, 16, n), rng.integers(0, 8, n),
                        rng.integers(0, 2, n), 16, 8)
        assert stack_events(s, 0, 1000, 7, 8, 16).total == n

    def test_empty_stream(self):
        s = make_stream([], [], [], [], 4, 4)
        frames = stack_events(s, 0, 10, 3, 4, 4)
        assert frames.counts.shape == (6, 4, 4) and frames.total == 0

    @pytest.mark.parametrize("t0,t1,bins", [(5, 5, 1), (10, 0, 1), (0, 10, 0)])
    def test_bad_windows(self, stream, t0, t1, bins):
        with pytest.raises(ValueError):
            stack_events(stream, t0, t1, bins, 2, 4)

    def test_clip_and_scale(self):
        out = frames_to_input(np.array([0, 4, 8, 20]), 8.0)
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0, 1.0])


class TestStreams:
    def test_out_of_order_events_are_sorted_and_counted(self):
        s = make_stream([10, 5, 20, 15], [0, 1, 2, 3], [0, 0, 0, 0], [0, 1, 0, 1], 4, 1)
        np.testing.assert_array_equal(s.t, [5, 10, 15, 20])
        np.testing.assert_array_equal(s.x, [1, 0, 3, 2])
        assert s.reordered == 4

    def test_sorted_stream_reports_no_reordering(self, stream):
        assert stream.reordered == 0

    def test_out_of_bounds_names_the_event(self):
        with pytest.raises(EventValidationError, match="event 1"):
            make_stream([0, 1], [0, 9], [0, 0], [0, 0], 4, 4)

    def test_bad_polarity(self):
        with pytest.raises(EventValidationError, match="polarity"):
            make_stream([0], [0], [0], [2], 4, 4)


class TestFiles:
    @pytest.mark.parametrize("fmt,name", [("packed", "ev.evs"), ("csv", "ev.csv")])
    def test_round_trip(self, tmp_path, stream, fmt, name):
        save_events(stream, tmp_path / name, fmt)
        back = load_events(tmp_path / name, width=4, height=2)
        assert back == stream

    def test_empty_files(self, tmp_path):
        (tmp_path / "a.evs").write_bytes(b"")
        (tmp_path / "b.csv").write_text("")
        assert len(load_events(tmp_path / "a.evs")) == 0
        assert len(load_events(tmp_path / "b.csv")) == 0

    def test_truncated_packed_file(self, tmp_path, stream):
        save_events(stream, tmp_path / "ev.evs")
        blob = (tmp_path / "ev.evs").read_bytes()
        (tmp_path / "cut.evs").write_bytes(blob[:-3])
        with pytest.raises(EventFormatError, match="expected"):
            load_events(tmp_path / "cut.evs")
        (tmp_path / "head.evs").write_bytes(blob[:5])
        with pytest.raises(EventFormatError, match="truncated header"):
            load_events(tmp_path / "head.evs")

    def test_bad_magic(self, tmp_path, stream):
        save_events(stream, tmp_path / "ev.evs")
        blob = bytearray((tmp_path / "ev.evs").read_bytes())
        blob[:4] = b"XXXX"
        (tmp_path / "ev.evs").write_bytes(bytes(blob))
        with pytest.raises(EventFormatError, match="magic"):
            load_events(tmp_path / "ev.evs")

    def test_geometry_mismatch(self, tmp_path, stream):
        save_events(stream, tmp_path / "ev.evs")
        with pytest.raises(EventValidationError):
            load_events(tmp_path / "ev.evs", width=8, height=8)

    @pytest.mark.parametrize("line", ["1,2,3", "a,1,1,0", "1,2,3,-1"])
    def test_malformed_csv_names_the_line(self, tmp_path, line):
        (tmp_path / "ev.csv").write_text("0,0,0,1\n" + line + "\n")
        with pytest.raises(EventFormatError, match=":2:"):
            load_events(tmp_path / "ev.csv")

    def test_csv_bounds(self, tmp_path):
        (tmp_path / "ev.csv").write_text("0,1300,0,1\n")
        with pytest.raises(EventValidationError):
            load_events(tmp_path / "ev.csv")

    def test_record_layout(self):
        assert EVENT_DTYPE.itemsize == 13


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        frames = [("0", [Annotation(1.0, 2.0, 5.0, 6.0, 0)]), ("7", [])]
        save_annotations(frames, tmp_path / "a.json")
        back = load_annotations(tmp_path / "a.json")
        assert back == frames

    def test_empty_list_file(self, tmp_path):
        (tmp_path / "a.json").write_text("[]")
        assert load_annotations(tmp_path / "a.json") == []

    @pytest.mark.parametrize("records,match", [
        ([[1, 2, 3, 4]], "expected"),
        ([[1, 2, 3, 4, 0.5]], "class"),
        ([["a", 2, 3, 4, 0]], "numbers"),
        ([[5, 2, 3, 4, 0]], "empty box"),
    ])
    def test_bad_records_name_frame_and_index(self, tmp_path, records, match):
        (tmp_path / "a.json").write_text(json.dumps({"3": records}))
        with pytest.raises(AnnotationError, match=match) as exc:
            load_annotations(tmp_path / "a.json")
        assert "'3'" in str(exc.value)

    def test_top_level_must_be_object(self, tmp_path):
        (tmp_path / "a.json").write_text("[1]")
        with pytest.raises(AnnotationError):
            load_annotations(tmp_path / "a.json")


class TestSynthetic:
    def test_deterministic_per_seed(self):
        cfg = SyntheticSceneConfig(seed=4)
        a, la = synth_generate(cfg)
        b, lb = synth_generate(cfg)
        assert a == b and la == lb
        c, _ = synth_generate(cfg.with_seed(5))
        assert c != a

    def test_labels_inside_canvas_and_valid(self):
        for seed in range(20):
            cfg = SyntheticSceneConfig(seed=seed, frames=2)
            stream, labels = synth_generate(cfg)
            assert [fid for fid, _ in labels] == ["0", "1"]
            for _, anns in labels:
                assert cfg.min_objects <= len(anns) <= cfg.max_objects
                for a in anns:
                    assert 0 <= a.x1 < a.x2 <= cfg.width and 0 <= a.y1 < a.y2 <= cfg.height
                    assert 0 <= a.cls < len(SHAPES)
            assert np.all(np.diff(stream.t.astype(np.int64)) >= 0)
            assert stream.t.max() < cfg.duration_ms * 1000

    def test_edges_emit_by_direction(self):
        # a square moving right: the right edge brightens and the left edge darkens
        obj = SceneObject("rectangle", 1, np.array([20.0, 32.0]), np.array([0.1, 0.0]), np.array([8.0, 8.0]))
        cfg = SyntheticSceneConfig(noise_rate=0.0, edge_rate=20.0, seed=1)
        stream, labels = synth_generate(cfg, [obj])
        assert len(stream) > 100
        # over 50 ms the left edge sweeps x in [12, 17] and the right edge x in [28, 33]
        right = stream.x >= 22
        assert np.all(stream.p[right] == 1) and np.all(stream.p[~right] == 0)
        assert np.all(((stream.x >= 12) & (stream.x <= 17)) | ((stream.x >= 28) & (stream.x <= 33)))
        np.testing.assert_allclose(labels[0][1][0].box, [17.0, 24.0, 33.0, 40.0])

    def test_static_scene_is_pure_noise(self):
        obj = SceneObject("disc", 0, np.array([32.0, 32.0]), np.zeros(2), np.array([8.0, 8.0]))
        cfg = SyntheticSceneConfig(noise_rate=2.0, seed=3)
        stream, _ = synth_generate(cfg, [obj])
        expected = 2.0 * 64 * 64 * 0.05
        assert abs(len(stream) - expected) < 5 * np.sqrt(expected)
        assert 0.4 < stream.p.mean() < 0.6

    def test_ring_has_inner_boundary(self):
        ring = SceneObject("ring", 2, np.zeros(2), np.zeros(2), np.array([8.0, 8.0]))
        pts, normals, _ = ring.boundary()
        radii = np.hypot(pts[:, 0], pts[:, 1])
        np.testing.assert_allclose(np.unique(np.round(radii, 6)), [4.0, 8.0])
        outward = np.sum(pts * normals, axis=1) > 0
        assert np.all(outward[radii > 6]) and not np.any(outward[radii < 6])

    def test_frame_windows(self):
        cfg = SyntheticSceneConfig(duration_ms=60, frames=3)
        assert [frame_window_us(cfg, f) for f in range(3)] == [(0, 20000), (20000, 40000), (40000, 60000)]

    def test_make_dataset(self):
        cfg = SyntheticSceneConfig()
        x, boxes, classes = make_dataset(cfg, 3, 10, bins=4, count_clip=8.0)
        assert x.shape == (3, 8, 64, 64) and 0.0 <= x.min() and x.max() <= 1.0
        assert len(boxes) == len(classes) == 3 and all(b.shape[1] == 4 for b in boxes)

    @pytest.mark.parametrize("kwargs", [
        {"min_objects": 3, "max_objects": 2},
        {"classes": ("disc", "triangle")},
        {"duration_ms": 0},
        {"edge_rate": -1.0},
        {"size_range": (6, 40)},
    ])
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            SyntheticSceneConfig(**kwargs)
