"""Tabular records: construction invariants, CSV round-trips, manifests."""

import json
import math
from dataclasses import FrozenInstanceError

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transmon_lab.errors import InvalidParameterError, SchemaError
from transmon_lab.params import TAU
from transmon_lab.records import (
    TimeSeriesRecord,
    format_value,
    read_manifest,
    read_table,
    write_manifest,
    write_table,
)


def simple_record(n=5, k=2):
    times = np.arange(n, dtype=float)
    values = np.arange(n * k, dtype=float).reshape(n, k)
    cols = tuple(f"c{j}" for j in range(k))
    return TimeSeriesRecord(times=times, columns=cols, values=values, meta={})


class TestFormatValue:
    def test_seventeen_significant_digits(self):
        s = format_value(math.pi)
        assert s == "3.1415926535897931e+00"
        assert float(s) == math.pi

    def test_round_trip_exact(self):
        for x in (1.0, -1.0 / 3.0, 1e-300, 2.5e17, 0.1):
            assert float(format_value(x)) == x

    def test_rejects_non_finite(self):
        for bad in (math.nan, math.inf, -math.inf):
            with pytest.raises(InvalidParameterError):
                format_value(bad)

    @given(st.floats(allow_nan=False, allow_infinity=False))
    @settings(max_examples=200)
    def test_round_trip_property(self, x):
        assert float(format_value(x)) == x


class TestTimeSeriesRecord:
    def test_basic_accessors(self):
        rec = simple_record(4, 3)
        assert rec.n_samples == 4
        assert rec.columns == ("c0", "c1", "c2")
        np.testing.assert_array_equal(rec.column("c1"), [1.0, 4.0, 7.0, 10.0])

    def test_unknown_column(self):
        with pytest.raises(SchemaError, match="c9"):
            simple_record().column("c9")

    def test_frozen(self):
        rec = simple_record()
        with pytest.raises(FrozenInstanceError):
            rec.columns = ("x",)

    def test_times_must_increase(self):
        with pytest.raises(InvalidParameterError):
            TimeSeriesRecord(
                times=np.array([0.0, 1.0, 1.0]),
                columns=("a",),
                values=np.zeros((3, 1)),
                meta={},
            )

    def test_values_shape_must_match(self):
        with pytest.raises(InvalidParameterError):
            TimeSeriesRecord(
                times=np.array([0.0, 1.0]),
                columns=("a",),
                values=np.zeros((3, 1)),
                meta={},
            )

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidParameterError):
            TimeSeriesRecord(
                times=np.array([0.0, 1.0]),
                columns=("a",),
                values=np.array([[0.0], [math.nan]]),
                meta={},
            )

    def test_duplicate_columns_rejected(self):
        with pytest.raises(InvalidParameterError):
            TimeSeriesRecord(
                times=np.array([0.0, 1.0]),
                columns=("a", "a"),
                values=np.zeros((2, 2)),
                meta={},
            )

    def test_strobes_picks_period_multiples(self):
        times = np.arange(0, 41) * (TAU / 4)
        values = times[:, None].copy()
        rec = TimeSeriesRecord(times=times, columns=("v",), values=values, meta={})
        s = rec.strobes(TAU)
        assert s.n_samples == 11
        np.testing.assert_allclose(s.times, np.arange(11) * TAU)

    def test_strobes_none_found(self):
        times = np.array([0.3, 0.7, 1.1])
        rec = TimeSeriesRecord(times=times, columns=("v",), values=np.zeros((3, 1)), meta={})
        with pytest.raises(SchemaError):
            rec.strobes(TAU)

    def test_csv_round_trip(self, tmp_path):
        rec = TimeSeriesRecord(
            times=np.array([0.0, 0.5, 1.25]),
            columns=("sz", "sx"),
            values=np.array([[1.0, 0.0], [0.9, -1.0 / 3.0], [0.8, 1e-17]]),
            meta={"model": "test"},
        )
        path = tmp_path / "trace.csv"
        rec.write_csv(path)
        back = TimeSeriesRecord.read_csv(path)
        np.testing.assert_array_equal(back.times, rec.times)
        np.testing.assert_array_equal(back.values, rec.values)
        assert back.columns == rec.columns

    def test_read_csv_requires_time_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y\n1.0,2.0\n")
        with pytest.raises(SchemaError, match="t"):
            TimeSeriesRecord.read_csv(path)


class TestTables:
    def test_write_read_round_trip(self, tmp_path):
        path = tmp_path / "table.csv"
        a = np.array([1.0, 2.0, 3.0])
        b = np.array([-1.0 / 7.0, 0.0, 5e-200])
        write_table(path, ["alpha", "beta"], [a, b])
        names, cols = read_table(path)
        assert names == ["alpha", "beta"]
        np.testing.assert_array_equal(cols[0], a)
        np.testing.assert_array_equal(cols[1], b)

    def test_header_only_table_round_trips_empty(self, tmp_path):
        path = tmp_path / "empty.csv"
        write_table(path, ["a"], [np.array([])])
        names, cols = read_table(path)
        assert names == ["a"]
        assert cols[0].size == 0

    def test_ragged_row_is_schema_error_with_line(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("a,b\n1.0,2.0\n3.0\n")
        with pytest.raises(SchemaError, match=r"ragged\.csv:3: row has 1 cell"):
            read_table(path)

    def test_non_numeric_cell_is_schema_error(self, tmp_path):
        path = tmp_path / "text.csv"
        path.write_text("a\n1.0\nhello\n")
        with pytest.raises(SchemaError, match="hello"):
            read_table(path)

    def test_empty_file_is_schema_error(self, tmp_path):
        path = tmp_path / "none.csv"
        path.write_text("")
        with pytest.raises(SchemaError):
            read_table(path)

    def test_mismatched_lengths_rejected_on_write(self, tmp_path):
        with pytest.raises(InvalidParameterError):
            write_table(tmp_path / "x.csv", ["a", "b"],
                        [np.array([1.0]), np.array([1.0, 2.0])])

    def test_comma_in_name_rejected(self, tmp_path):
        with pytest.raises(InvalidParameterError):
            write_table(tmp_path / "x.csv", ["a,b"], [np.array([1.0])])


class TestManifest:
    def test_round_trip_and_sorted_keys(self, tmp_path):
        payload = {"zeta": 1, "alpha": [1, 2], "numpy": np.float64(0.5)}
        path = write_manifest(tmp_path, payload)
        assert path.name == "manifest.json"
        text = path.read_text()
        assert text.index('"alpha"') < text.index('"zeta"')
        back = read_manifest(tmp_path)
        assert back["alpha"] == [1, 2]
        assert back["numpy"] == 0.5

    def test_deterministic_bytes(self, tmp_path):
        payload = {"b": 2, "a": np.arange(3)}
        (tmp_path / "one").mkdir()
        (tmp_path / "two").mkdir()
        p1 = write_manifest(tmp_path / "one", payload)
        p2 = write_manifest(tmp_path / "two", payload)
        assert p1.read_bytes() == p2.read_bytes()

    def test_json_is_valid(self, tmp_path):
        path = write_manifest(tmp_path, {"x": 1.5})
        json.loads(path.read_text())
