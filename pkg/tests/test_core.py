import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sitsr.core import (
    DatasetManifest,
    DomainError,
    ManifestRecord,
    ParseError,
    Raster,
    SRSample,
    TimedSeries,
    Timestamp,
    ValueRange,
    load_sample,
    load_series,
    save_sample,
    validate_sample,
    write_npz,
)


def make_sample(T=8, lr=74, scale=4, seed=0, hr_shape=None):
    rng = np.random.default_rng(seed)
    stack = rng.random((T, 3, lr, lr)).astype(np.float32)
    days = 17000 + np.arange(T) * 5
    series = TimedSeries.from_arrays(stack, days, int(days[T // 2]))
    hr = Raster(rng.random(hr_shape or (3, lr * scale, lr * scale)).astype(np.float32))
    return SRSample(series, hr, block_id=3, scale=scale)


class TestTimestamp:
    def test_date_round_trip(self):
        t = Timestamp.from_date("2018-04-01")
        assert t.epoch_day == (dt.date(2018, 4, 1) - dt.date(1970, 1, 1)).days
        assert t.to_date() == dt.date(2018, 4, 1)
        assert str(t) == "2018-04-01"

    def test_arithmetic_is_exact(self):
        a, b = Timestamp(100), Timestamp(137)
        assert b - a == 37
        assert a + 37 == b
        assert b - 37 == a
        assert sorted([b, a]) == [a, b]

    def test_sub_day_rejected(self):
        with pytest.raises(DomainError):
            Timestamp(1.5)
        with pytest.raises(DomainError):
            Timestamp.parse("2018-04-01T12:00:00")
        assert Timestamp.parse("2018-04-01T00:00:00") == Timestamp.from_date("2018-04-01")
        with pytest.raises(ParseError):
            Timestamp.parse("April first")

    def test_parse_variants(self):
        assert Timestamp.parse(5) == Timestamp(5)
        assert Timestamp.parse(dt.date(1970, 1, 6)) == Timestamp(5)
        assert Timestamp.parse("1970-01-06") == Timestamp(5)


class TestRaster:
    def test_read_only_copy(self):
        a = np.zeros((3, 4, 4), np.float32)
        r = Raster(a)
        a[0, 0, 0] = 1
        assert r.data[0, 0, 0] == 0
        with pytest.raises(ValueError):
            r.data[0, 0, 0] = 1

    def test_byte_scale_clips(self):
        r = Raster(np.array([[[-0.5, 0.5, 1.5]]], np.float32))
        np.testing.assert_array_equal(r.to_byte_scale(), [[[0.0, 127.5, 255.0]]])

    def test_nonfinite_is_reported_not_raised(self):
        r = Raster(np.full((1, 2, 2), np.nan, np.float32))
        assert np.isnan(r.data).all()

    def test_value_range_enum(self):
        assert Raster(np.zeros((1, 1, 1))).value_range is ValueRange.UNIT


class TestSeries:
    def test_unsorted_frames_allowed(self):
        s = TimedSeries.from_arrays(np.zeros((3, 3, 2, 2), np.float32), [30, 10, 20], 15)
        assert list(s.gaps) == [15, -5, 5]

    def test_slack_violation_reported(self):
        s = TimedSeries.from_arrays(np.zeros((2, 3, 2, 2), np.float32), [0, 10], 100)
        assert any("t_ref" in v for v in s.violations())
        assert TimedSeries.from_arrays(np.zeros((2, 3, 2, 2), np.float32), [0, 10], 70).violations() == []

    def test_shifted_keeps_gaps(self):
        s = TimedSeries.from_arrays(np.zeros((2, 3, 2, 2), np.float32), [0, 10], 4)
        np.testing.assert_array_equal(s.shifted(37).gaps, s.gaps)


class TestValidate:
    def test_well_formed(self):
        assert validate_sample(make_sample()) == []

    def test_bad_hr_shape(self):
        v = validate_sample(make_sample(hr_shape=(3, 295, 296)))
        assert len(v) == 1 and "hr" in v[0]

    def test_nan_pixel_single_violation(self):
        s = make_sample(T=2, lr=4)
        data = s.hr.data.copy()
        data[0, 0, 0] = np.nan
        bad = SRSample(s.lr_series, Raster(data), 0, 4)
        v = validate_sample(bad)
        assert len(v) == 1 and "finite" in v[0]

    def test_never_throws(self):
        assert validate_sample(object())


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        s = make_sample(T=5, lr=6, seed=3)
        s = SRSample(s.lr_series, s.hr, 7, 4, {"rate": np.ones((3, 24, 24), np.float32)})
        save_sample(s, tmp_path / "x")
        back = load_sample(tmp_path / "x")
        np.testing.assert_array_equal(back.lr_series.stack(), s.lr_series.stack())
        np.testing.assert_array_equal(back.hr.data, s.hr.data)
        assert back.lr_series.timestamps == s.lr_series.timestamps
        assert back.lr_series.t_ref == s.lr_series.t_ref
        assert (back.block_id, back.scale) == (7, 4)
        np.testing.assert_array_equal(back.extras["rate"], s.extras["rate"])
        np.testing.assert_array_equal(load_series(tmp_path / "x").stack(), s.lr_series.stack())

    def test_sidecar_keys(self, tmp_path):
        import json

        save_sample(make_sample(T=2, lr=4), tmp_path / "x")
        meta = json.loads((tmp_path / "x" / "meta.json").read_text())
        assert {"timestamps", "t_ref", "block_id", "scale"} <= set(meta)

    def test_files_are_byte_identical(self, tmp_path):
        s = make_sample(T=2, lr=4)
        save_sample(s, tmp_path / "a")
        save_sample(s, tmp_path / "b")
        for f in ("arrays.npz", "meta.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_missing_is_parse_error(self, tmp_path):
        with pytest.raises(ParseError):
            load_sample(tmp_path / "nothing")

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                      elements=st.floats(-1e6, 1e6, width=32)))
    def test_npz_round_trip(self, arr):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as d:
            p = write_npz(Path(d) / "a.npz", {"x": arr})
            with np.load(p) as z:
                np.testing.assert_array_equal(z["x"], arr)


def test_manifest_json_round_trip():
    recs = (ManifestRecord("a", 1, 10, (1, 2), "train"), ManifestRecord("b", 2, 11, (3,), "test"))
    m = DatasetManifest(recs, 5, (("train", 0.7), ("test", 0.3)))
    back = DatasetManifest.from_json(m.to_json())
    assert back == m
    assert back.blocks("train") == {1}
    with pytest.raises(ParseError):
        DatasetManifest.from_json("{}")
