import numpy as np
import pytest

from hemotriage.annotation import (
    ChangepointResult, SeverityClass, find_changepoints,
    find_changepoints_decimated, label_segments, map_class, snap_level,
    step_targets, write_labels_csv,
)
from hemotriage.errors import DataError
from hemotriage.waveform import LBNP_REF, PPG, Session, Waveform, segment

from oracles import brute_force_changepoints


def ref_wave(samples, fs=1000.0):
    return Waveform(samples=np.asarray(samples, dtype=np.float64),
                    sample_rate_hz=fs, channel=LBNP_REF)


class TestFindChangepoints:
    def test_noiseless_three_level_trace(self):
        x = np.concatenate([np.zeros(1000), np.full(1000, -20.0), np.full(1000, -40.0)])
        result = find_changepoints(ref_wave(x), n=2)
        assert result.breakpoints == (1000, 2000)
        assert result.cost == pytest.approx(0.0, abs=1e-9)
        assert result.interval_means == pytest.approx((0.0, -20.0, -40.0))

    def test_noisy_three_level_trace(self):
        rng = np.random.default_rng(11)
        x = np.concatenate([np.zeros(1000), np.full(1000, -20.0), np.full(1000, -40.0)])
        x = x + rng.normal(0.0, 1.0, size=x.size)
        result = find_changepoints(ref_wave(x), n=2)
        assert abs(result.breakpoints[0] - 1000) <= 50
        assert abs(result.breakpoints[1] - 2000) <= 50

    def test_constant_trace_earliest_tiebreak(self):
        result = find_changepoints(ref_wave(np.full(50, -10.0)), n=1)
        assert result.breakpoints == (1,)
        assert result.cost == pytest.approx(0.0, abs=1e-12)

    def test_n_too_large_rejected(self):
        with pytest.raises(ValueError):
            find_changepoints(ref_wave(np.zeros(5)), n=5)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            find_changepoints(np.array([0.0, np.inf, 1.0]), n=1)

    def test_matches_exhaustive_enumeration(self):
        # Exact DP must agree with brute force on short random traces.
        rng = np.random.default_rng(42)
        for _ in range(25):
            t = int(rng.integers(10, 61))
            n = int(rng.integers(1, 4))
            x = rng.normal(size=t) + np.repeat(rng.normal(0, 5, size=n + 1),
                                               np.diff(np.sort(np.concatenate(
                                                   ([0, t], rng.choice(np.arange(1, t), n, replace=False))))))
            expected_bps, expected_cost = brute_force_changepoints(x, n)
            result = find_changepoints(x, n)
            assert result.cost == pytest.approx(expected_cost, rel=1e-9, abs=1e-9)
            assert result.breakpoints == expected_bps

    def test_cost_nonincreasing_in_n(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=120)
        costs = [find_changepoints(x, n).cost for n in range(1, 6)]
        assert all(c2 <= c1 + 1e-9 for c1, c2 in zip(costs, costs[1:]))

    def test_decimated_matches_plain_on_short_trace(self):
        rng = np.random.default_rng(5)
        x = np.concatenate([np.zeros(500), np.full(700, -30.0)]) + rng.normal(0, 0.5, 1200)
        w = ref_wave(x)
        assert find_changepoints_decimated(w, 1, max_dp_len=4096).breakpoints == \
            find_changepoints(w, 1).breakpoints

    def test_decimated_recovers_noiseless_boundary_exactly(self):
        x = np.concatenate([np.zeros(4000), np.full(7000, -30.0)])
        w = ref_wave(x)
        result = find_changepoints_decimated(w, 1, max_dp_len=512)
        assert result.breakpoints == (4000,)


class TestStepTargets:
    def test_snap_examples(self):
        assert snap_level(-19.4) == -20.0
        assert snap_level(-2.1) == 0.0
        assert snap_level(-84.0) == -80.0
        assert snap_level(3.0) == 0.0

    def test_noiseless_trace_reproduced_exactly(self):
        x = np.concatenate([np.zeros(300), np.full(400, -20.0), np.full(300, -40.0)])
        w = ref_wave(x)
        cp = find_changepoints(w, 2)
        np.testing.assert_array_equal(step_targets(w, cp), x)

    def test_output_length_matches_trace(self):
        x = np.concatenate([np.zeros(100), np.full(150, -52.0)])
        w = ref_wave(x)
        levels = step_targets(w, find_changepoints(w, 1))
        assert levels.size == 250
        assert set(np.unique(levels)) == {0.0, -50.0}


class TestMapClass:
    def test_table_values(self):
        assert map_class(0.0) == SeverityClass.MILD
        assert map_class(-10.0) == SeverityClass.MILD
        assert map_class(-20.0) == SeverityClass.MODERATE
        assert map_class(-30.0) == SeverityClass.MODERATE
        assert map_class(-40.0) == SeverityClass.SEVERE
        assert map_class(-60.0) == SeverityClass.SEVERE
        assert map_class(-80.0) == SeverityClass.SEVERE

    def test_positive_level_rejected(self):
        with pytest.raises(ValueError, match="invalid LBNP level"):
            map_class(5.0)

    def test_monotone_in_severity(self):
        levels = np.arange(0.0, -80.5, -0.5)
        classes = [int(map_class(lv)) for lv in levels]
        assert all(c2 >= c1 for c1, c2 in zip(classes, classes[1:]))


class TestLabelSegments:
    def _session(self, level_blocks, fs=1000.0):
        levels = np.concatenate([np.full(int(d * fs), lv) for lv, d in level_blocks])
        rng = np.random.default_rng(1)
        channels = {
            PPG: Waveform(rng.normal(size=levels.size), fs, PPG),
            LBNP_REF: Waveform(levels, fs, LBNP_REF),
        }
        return Session(subject_id="s1", trial_id="t1", channels=channels,
                       meta={"n_changepoints": len(level_blocks) - 1}), levels

    def test_midpoint_rule(self):
        session, levels = self._session([(0.0, 20.0), (-40.0, 20.0)])
        segs = segment(session.channel(PPG), mode="test", subject_id="s1", trial_id="t1")
        labeled = label_segments(session, segs, levels=levels)
        # Midpoints at 7.5, 22.5 s -> first mild, second severe.
        assert labeled[0].label == SeverityClass.MILD
        assert labeled[1].label == SeverityClass.SEVERE

    def test_straddling_segment_uses_midpoint(self):
        session, levels = self._session([(-10.0, 16.0), (-20.0, 16.0)])
        segs = segment(session.channel(PPG), mode="test", subject_id="s1", trial_id="t1")
        # Second segment covers 15..30 s, midpoint 22.5 s -> in the -20 block.
        labeled = label_segments(session, segs, levels=levels)
        assert labeled[0].label == SeverityClass.MILD
        assert labeled[1].label == SeverityClass.MODERATE

    def test_changepoint_path_recovers_schedule(self):
        session, _ = self._session([(0.0, 30.0), (-30.0, 30.0), (-60.0, 30.0)])
        segs = segment(session.channel(PPG), mode="test", subject_id="s1", trial_id="t1")
        labeled = label_segments(session, segs)
        expected = [SeverityClass.MILD] * 2 + [SeverityClass.MODERATE] * 2 + [SeverityClass.SEVERE] * 2
        assert [item.label for item in labeled] == expected

    def test_missing_reference_channel(self):
        fs = 1000.0
        session = Session(subject_id="s1", trial_id="t1",
                          channels={PPG: Waveform(np.ones(int(20 * fs)), fs, PPG)})
        segs = segment(session.channel(PPG), mode="test", subject_id="s1", trial_id="t1")
        with pytest.raises(DataError):
            label_segments(session, segs, n_changepoints=1)

    def test_csv_export(self, tmp_path):
        session, levels = self._session([(0.0, 16.0), (-40.0, 16.0)])
        segs = segment(session.channel(PPG), mode="test", subject_id="s1", trial_id="t1")
        labeled = label_segments(session, segs, levels=levels)
        path = tmp_path / "labels.csv"
        write_labels_csv(path, labeled)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "subject_id,trial_id,channel,start_time_s,lbnp_level_mmHg,class"
        assert len(lines) == 3
        assert lines[1].endswith(",1")
        assert lines[2].endswith(",3")


class TestChangepointResultValidation:
    def test_rejects_decreasing_breakpoints(self):
        with pytest.raises(ValueError):
            ChangepointResult(breakpoints=(10, 5), interval_means=(0.0, 1.0, 2.0),
                              cost=0.0, n_samples=20)

    def test_rejects_out_of_bounds(self):
        with pytest.raises(ValueError):
            ChangepointResult(breakpoints=(25,), interval_means=(0.0, 1.0),
                              cost=0.0, n_samples=20)
