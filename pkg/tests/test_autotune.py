"""Tests for the autotuning database."""

import pytest
from rtnlinv.autotune import (
    ProtocolKey,
    TuningDatabase,
    TuningRecord,
    bucket_label,
    frames_bucket,
    learn_step,
    legal_configs,
    select,
    steady_state_runtime,
    tune_report,
)
from rtnlinv.config import ImagingMode
from rtnlinv.errors import ConfigurationError

# frames -> ((worst T, A, fps), (best T, A, fps)) at N=160
MEASURED = {
    ImagingMode.SINGLE_SLICE: {
        5: ((2, 4, 1.9), (1, 2, 3.7)),
        10: ((2, 4, 3.0), (1, 2, 5.0)),
        25: ((1, 1, 4.7), (2, 2, 7.7)),
        50: ((1, 1, 4.9), (3, 2, 11.0)),
        200: ((1, 1, 4.9), (3, 2, 18.1)),
    },
    ImagingMode.MULTI_SLICE: {
        5: ((2, 4, 3.2), (2, 1, 5.9)),
        10: ((1, 1, 4.6), (2, 2, 8.0)),
        25: ((1, 1, 5.0), (4, 2, 12.3)),
        50: ((1, 1, 5.1), (4, 2, 18.4)),
        200: ((1, 1, 5.1), (4, 2, 28.1)),
    },
    ImagingMode.FLOW: {
        5: ((2, 4, 1.6), (2, 1, 2.6)),
        10: ((1, 1, 1.8), (2, 2, 3.6)),
        25: ((1, 1, 1.9), (4, 2, 5.8)),
        50: ((1, 1, 1.9), (4, 2, 7.5)),
        200: ((1, 1, 1.9), (4, 2, 10.7)),
    },
}


def measured_db(path=None, channels=10):
    db = TuningDatabase(path)
    for mode, rows in MEASURED.items():
        for frames, ((wt, wa, wfps), (bt, ba, bfps)) in rows.items():
            key = ProtocolKey.for_run(mode, 160, frames, channels)
            db.append(TuningRecord(key, wt, wa, 1000.0 / wfps))
            db.append(TuningRecord(key, bt, ba, 1000.0 / bfps))
    return db


class TestLegalConfigs:
    """Test the enumeration of (T, A)."""

    def test_eight_workers(self):
        """Test the 16 configurations for eight workers."""
        assert legal_configs(8) == [
            (1, 1), (2, 1), (3, 1), (4, 1), (5, 1), (6, 1), (7, 1), (8, 1),
            (1, 2), (2, 2), (3, 2), (4, 2),
            (1, 3), (2, 3),
            (1, 4), (2, 4),
        ]

    def test_small_budgets(self):
        """Test fewer workers."""
        assert len(legal_configs(4)) == 8
        assert legal_configs(1) == [(1, 1)]
        with pytest.raises(ConfigurationError):
            legal_configs(0)

    def test_channel_cap(self):
        """Test that A never exceeds the channel count."""
        assert legal_configs(8, 2) == legal_configs(8)[:12]
        assert legal_configs(8, 1) == [(T, 1) for T in range(1, 9)]
        assert legal_configs(8, 10) == legal_configs(8)
        with pytest.raises(ConfigurationError):
            legal_configs(8, 0)


class TestProtocolKey:
    """Test protocol keys and frame buckets."""

    @pytest.mark.parametrize(
        "frames,bucket", [(1, 0), (5, 0), (6, 1), (10, 1), (25, 2), (50, 3), (200, 4), (201, 5)]
    )
    def test_buckets(self, frames, bucket):
        """Test bucket boundaries."""
        assert frames_bucket(frames) == bucket

    def test_labels(self):
        """Test printable bucket labels."""
        assert bucket_label(0) == "<=5"
        assert bucket_label(5) == ">200"

    def test_distance(self):
        """Test the lexicographic distance and the mode barrier."""
        a = ProtocolKey.for_run(ImagingMode.FLOW, 160, 30, 10)
        b = ProtocolKey.for_run(ImagingMode.FLOW, 128, 30, 8)
        c = ProtocolKey.for_run(ImagingMode.SINGLE_SLICE, 160, 30, 10)
        assert a.distance(b) == (32, 0, 2)
        assert a.distance(c) is None


class TestSelection:
    """Test select and learn_step."""

    def test_single_slice_long_run(self):
        """Test that 200 single-slice frames pick T=3, A=2."""
        key = ProtocolKey.for_run(ImagingMode.SINGLE_SLICE, 160, 200, 10)
        assert select(key, measured_db()) == (3, 2)

    def test_dual_slice_long_run(self):
        """Test that 200 dual-slice frames pick T=4, A=2."""
        key = ProtocolKey.for_run(ImagingMode.MULTI_SLICE, 160, 200, 10)
        assert select(key, measured_db()) == (4, 2)

    @pytest.mark.parametrize("mode", list(MEASURED))
    def test_every_measured_protocol(self, mode):
        """Test that each recorded protocol returns its fastest configuration."""
        db = measured_db()
        for frames, (_, (bt, ba, _)) in MEASURED[mode].items():
            assert select(ProtocolKey.for_run(mode, 160, frames, 10), db) == (bt, ba)

    def test_empty_database(self):
        """Test the (1, 1) fallback."""
        key = ProtocolKey.for_run(ImagingMode.FLOW, 160, 30, 10)
        assert select(key, TuningDatabase()) == (1, 1)

    def test_nearest_protocol(self):
        """Test the nearest recorded key of the same mode."""
        key = ProtocolKey.for_run(ImagingMode.SINGLE_SLICE, 144, 180, 10)
        assert select(key, measured_db()) == (3, 2)

    def test_illegal_record_ignored(self):
        """Test that configurations outside the budget are not selected."""
        db = measured_db()
        key = ProtocolKey.for_run(ImagingMode.MULTI_SLICE, 160, 200, 10)
        assert select(key, db, total_workers=4) == (1, 1)

    def test_learning_sweep(self):
        """Test that learning measures every legal configuration once, then selects."""
        key = ProtocolKey.for_run(ImagingMode.SINGLE_SLICE, 64, 30, 4)
        db = TuningDatabase()
        tried = []
        for _ in range(16):
            T, A = learn_step(key, db)
            tried.append((T, A))
            db.append(TuningRecord(key, T, A, 100.0 / (T * A) + 10 * A))
        assert sorted(tried) == sorted(legal_configs(8))
        best = min(tried, key=lambda c: 100.0 / (c[0] * c[1]) + 10 * c[1])
        assert learn_step(key, db) == best == select(key, db)

    def test_learning_respects_channels(self):
        """Test that two channels never get more than two workers per group."""
        key = ProtocolKey.for_run(ImagingMode.SINGLE_SLICE, 64, 30, 2)
        db = TuningDatabase()
        tried = []
        for _ in range(len(legal_configs(8, 2))):
            T, A = learn_step(key, db)
            tried.append((T, A))
            db.append(TuningRecord(key, T, A, 100.0 / (T * A)))
        assert max(A for _, A in tried) == 2
        assert sorted(tried) == sorted(legal_configs(8, 2))
        assert len(legal_configs(8)) == 16

    def test_select_skips_configs_above_channels(self):
        """Test that a fast A=4 record is not chosen for a two-channel protocol."""
        key = ProtocolKey.for_run(ImagingMode.SINGLE_SLICE, 64, 30, 2)
        db = TuningDatabase()
        db.append(TuningRecord(key, 2, 4, 10.0))
        db.append(TuningRecord(key, 2, 2, 50.0))
        assert select(key, db) == (2, 2)


class TestTuningDatabase:
    """Test the TSV store."""

    def test_round_trip(self, tmp_path):
        """Test persistence of appended records."""
        path = tmp_path / "tune.tsv"
        db = measured_db(path)
        again = TuningDatabase(path)
        assert len(again) == len(db) == 30
        assert again.keys() == db.keys()
        assert path.read_text().startswith("# mode\t")

    def test_malformed_line_skipped(self, tmp_path, caplog):
        """Test that a torn line is skipped with a warning."""
        path = tmp_path / "tune.tsv"
        key = ProtocolKey.for_run(ImagingMode.FLOW, 160, 30, 10)
        TuningDatabase(path).append(TuningRecord(key, 2, 2, 140.0))
        with open(path, "a") as fh:
            fh.write("flow\t160\t<=50\t10\t2")
        with caplog.at_level("WARNING", logger="rtnlinv.autotune"):
            db = TuningDatabase(path)
        assert len(db) == 1
        assert "malformed" in caplog.text

    def test_record_validation(self):
        """Test rejection of impossible records."""
        key = ProtocolKey.for_run(ImagingMode.FLOW, 160, 30, 10)
        with pytest.raises(ConfigurationError):
            TuningRecord(key, 1, 5, 10.0)
        with pytest.raises(ConfigurationError):
            TuningRecord(key, 1, 1, 0.0)

    def test_line_format(self):
        """Test the tab-separated line layout."""
        key = ProtocolKey.for_run(ImagingMode.MULTI_SLICE, 160, 30, 10)
        line = TuningRecord(key, 4, 2, 81.3, "2024-01-01T00:00:00+00:00").to_line()
        assert line.split("\t")[:7] == ["multi_slice", "160", "<=50", "10", "4", "2", "81.3"]
        assert TuningRecord.from_line(line).config == (4, 2)

    def test_report(self):
        """Test best and worst configurations in the report."""
        report = tune_report(measured_db())
        lines = report.splitlines()
        assert lines[0].startswith("mode\tN")
        assert len(lines) == 16
        assert "single_slice\t160\t<=200\t10\t1/1\t204.1\t3/2\t55.2" in lines


class TestSteadyState:
    """Test runtime measurement from sink times."""

    def test_median_interval(self):
        """Test that prologue and epilogue intervals are ignored."""
        times = [0.0, 1.0, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0, 2.1, 2.2, 2.3, 5.0]
        assert steady_state_runtime(times) == pytest.approx(100.0)

    def test_short_runs(self):
        """Test short runs and single frames."""
        assert steady_state_runtime([0.0, 0.2, 0.3]) == pytest.approx(150.0)
        assert steady_state_runtime([1.0]) is None
