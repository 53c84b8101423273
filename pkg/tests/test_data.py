"""Ingestion, cohort selection, synthesis, and unit scaling."""

import io
import itertools
import statistics

import numpy as np
import pytest

from gapfill.data import (
    CSV_HEADER,
    Cohort,
    RawRecord,
    RoadSegment,
    SegmentSeries,
    apply_normalization,
    denormalize,
    fit_norm_params,
    ingest_csv,
    normalize,
    read_cohort_csv,
    select_cohort,
    subset_cohort,
    synthesize_cohort,
    truncate_cohort,
    write_cohort_csv,
)
from gapfill.errors import (
    DegenerateStreamError,
    EmptyCohortError,
    PreconditionError,
    RowError,
    SchemaError,
)


def _segment(seg_id="s1", length=1.0):
    return RoadSegment(id=seg_id, start=(43.7, -79.4), end=(43.71, -79.41), length=length)


def _row(seg="a", ts=0, speed=50.0, tt=72.0, conf=99.0):
    return f"{seg},43.7,-79.4,43.71,-79.41,1.0,{ts},{speed},{tt},{conf}"


def _csv(rows):
    return io.StringIO(CSV_HEADER + "\n" + "\n".join(rows) + "\n")


class TestTypes:
    def test_segment_rejects_nonpositive_length(self):
        with pytest.raises(PreconditionError):
            _segment(length=0.0)

    def test_segment_rejects_bad_latitude(self):
        with pytest.raises(PreconditionError):
            RoadSegment(id="x", start=(91.0, 0.0), end=(0.0, 0.0), length=1.0)

    def test_record_rejects_negative_speed(self):
        with pytest.raises(PreconditionError):
            RawRecord(segment_id="a", timestamp=0, speed=-1.0, travel_time=10.0, confidence=99.0)

    def test_series_requires_ascending_timestamps(self):
        with pytest.raises(PreconditionError):
            SegmentSeries(
                segment=_segment(),
                timestamps=[3, 2],
                values=[[1.0, 2.0]],
                observed=[[True, True]],
            )

    def test_series_rejects_nonfinite_observed_value(self):
        with pytest.raises(PreconditionError):
            SegmentSeries(
                segment=_segment(),
                timestamps=[0, 1],
                values=[[1.0, np.nan]],
                observed=[[True, True]],
            )

    def test_series_allows_nonfinite_where_missing(self):
        s = SegmentSeries(
            segment=_segment(),
            timestamps=[0, 1],
            values=[[1.0, np.nan]],
            observed=[[True, False]],
        )
        assert s.length == 2

    def test_cohort_requires_shared_grid(self):
        a = SegmentSeries(_segment("a"), [0, 1], [[1.0, 2.0]], [[True, True]])
        b = SegmentSeries(_segment("b"), [0, 2], [[1.0, 2.0]], [[True, True]])
        with pytest.raises(PreconditionError):
            Cohort(segments=(a, b), stream_names=("speed_kmh",))


class TestIngest:
    def test_confidence_filter_drops_and_counts(self):
        src = _csv([_row(ts=0, conf=94.0), _row(ts=1, conf=95.0)])
        result = ingest_csv(src, min_confidence=95.0)
        assert len(result.records) == 1
        assert result.dropped_low_confidence == 1

    def test_zero_threshold_keeps_everything(self):
        rows = [_row(ts=t, conf=c) for t, c in enumerate((10.0, 50.0, 99.0))]
        result = ingest_csv(_csv(rows), min_confidence=0.0)
        assert len(result.records) == 3
        assert result.dropped_low_confidence == 0

    def test_bad_field_reports_line_number(self):
        rows = [_row(ts=t) for t in range(5)]
        rows.append(_row(ts=5).replace("50.0", "abc"))
        with pytest.raises(RowError, match="line 7"):
            ingest_csv(_csv(rows), min_confidence=0.0)

    def test_malformed_header_names_missing_column(self):
        src = io.StringIO("segment_id,start_lat\n")
        with pytest.raises(SchemaError, match="start_lon"):
            ingest_csv(src, min_confidence=0.0)

    def test_empty_file_is_schema_error(self):
        with pytest.raises(SchemaError):
            ingest_csv(io.StringIO(""), min_confidence=0.0)

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(7)
        rows = [_row(ts=t, conf=float(rng.integers(0, 101))) for t in range(40)]
        src = _csv(rows).getvalue()
        previous = None
        for cutoff in (90.0, 70.0, 30.0, 0.0):
            kept = {
                (r.segment_id, r.timestamp)
                for r in ingest_csv(io.StringIO(src), min_confidence=cutoff).records
            }
            if previous is not None:
                assert previous <= kept
            previous = kept

    def test_records_keep_file_order(self):
        rows = [_row(ts=t) for t in (5, 1, 9)]
        result = ingest_csv(_csv(rows), min_confidence=0.0)
        assert [r.timestamp for r in result.records] == [5, 1, 9]


def _records_for(spec: dict[str, range]):
    records, segments = [], []
    for seg_id, timestamps in spec.items():
        segments.append(_segment(seg_id))
        for t in timestamps:
            records.append(
                RawRecord(segment_id=seg_id, timestamp=t, speed=50.0, travel_time=72.0, confidence=99.0)
            )
    return records, segments


def _brute_force_select(spec: dict[str, range], min_length: int):
    """Oracle: enumerate every nonempty segment subset and apply the rules."""
    best = None
    ids = sorted(spec)
    for size in range(1, len(ids) + 1):
        for combo in itertools.combinations(ids, size):
            mutual = set.intersection(*(set(spec[s]) for s in combo))
            run_len, best_run = 0, 0
            ordered = sorted(mutual)
            current = 0
            for i, t in enumerate(ordered):
                current = current + 1 if i > 0 and ordered[i - 1] == t - 1 else 1
                best_run = max(best_run, current)
            if best_run < min_length:
                continue
            key = (-len(combo), -best_run, tuple(combo))
            if best is None or key < best[0]:
                best = (key, combo, best_run)
    return best


class TestSelectCohort:
    def test_three_segment_example_matches_subset_enumeration(self):
        spec = {"a": range(1, 11), "b": range(1, 11), "c": range(6, 11)}
        oracle = _brute_force_select(spec, min_length=10)
        assert oracle is not None
        _, combo, run = oracle
        assert combo == ("a", "b") and run == 10  # frozen oracle outcome

        records, segments = _records_for(spec)
        cohort = select_cohort(records, segments, min_length=10)
        assert sorted(s.segment.id for s in cohort.segments) == ["a", "b"]
        assert cohort.length == 10

    def test_singleton(self):
        records, segments = _records_for({"only": range(3, 8)})
        cohort = select_cohort(records, segments, min_length=1)
        assert cohort.n_segments == 1
        assert list(cohort.timestamps) == [3, 4, 5, 6, 7]

    def test_infeasible_bound_raises(self):
        records, segments = _records_for({"a": range(4)})
        with pytest.raises(EmptyCohortError):
            select_cohort(records, segments, min_length=5)

    def test_random_instances_match_enumeration(self):
        rng = np.random.default_rng(0)
        for trial in range(25):
            spec = {}
            for i in range(int(rng.integers(1, 5))):
                start = int(rng.integers(0, 8))
                length = int(rng.integers(1, 10))
                spec[f"s{i}"] = range(start, start + length)
            min_length = int(rng.integers(1, 6))
            records, segments = _records_for(spec)
            oracle = _brute_force_select(spec, min_length)
            if oracle is None:
                with pytest.raises(EmptyCohortError):
                    select_cohort(records, segments, min_length)
                continue
            cohort = select_cohort(records, segments, min_length)
            _, combo, run = oracle
            assert tuple(sorted(s.segment.id for s in cohort.segments)) == combo
            assert cohort.length == run

    def test_output_only_contains_input_pairs(self):
        spec = {"a": range(0, 14), "b": range(3, 12)}
        records, segments = _records_for(spec)
        pairs = {(r.segment_id, r.timestamp) for r in records}
        cohort = select_cohort(records, segments, min_length=2)
        for s in cohort.segments:
            for t in s.timestamps:
                assert (s.segment.id, int(t)) in pairs

    def test_tie_breaks_prefer_longer_grid(self):
        # Both pairs {a,b} and {c,d} share 5 mutual minutes at min_length 5,
        # but {c,d} extends to 7.
        spec = {"a": range(0, 5), "b": range(0, 5), "c": range(10, 17), "d": range(10, 17)}
        records, segments = _records_for(spec)
        cohort = select_cohort(records, segments, min_length=5)
        assert sorted(s.segment.id for s in cohort.segments) == ["c", "d"]
        assert cohort.length == 7


class TestSynthesize:
    def test_noiseless_reciprocal_relation(self):
        cohort = synthesize_cohort(n_segments=5, length=30, noise_sd=0.0, seed=3)
        for s in cohort.segments:
            product = s.values[1] * s.values[0]
            np.testing.assert_allclose(product, 3600.0 * s.segment.length, rtol=1e-12)

    def test_same_seed_is_bit_identical(self):
        a = synthesize_cohort(n_segments=6, length=20, noise_sd=0.07, seed=9)
        b = synthesize_cohort(n_segments=6, length=20, noise_sd=0.07, seed=9)
        for sa, sb in zip(a.segments, b.segments):
            assert np.array_equal(sa.values, sb.values)
            assert sa.segment == sb.segment

    def test_streams_are_strongly_anticorrelated(self):
        cohort = synthesize_cohort(n_segments=50, length=85, noise_sd=0.05, seed=4)
        for s in cohort.segments:
            r = statistics.correlation(list(s.values[0]), list(s.values[1]))
            assert r < -0.8

    def test_speed_floor_and_determinism_of_ids(self):
        cohort = synthesize_cohort(n_segments=12, length=40, noise_sd=0.0, seed=2)
        ids = [s.segment.id for s in cohort.segments]
        assert ids == sorted(ids)
        for s in cohort.segments:
            assert np.all(s.values[0] >= 5.0)

    def test_rejects_bad_arguments(self):
        with pytest.raises(PreconditionError):
            synthesize_cohort(n_segments=0, length=10, noise_sd=0.0, seed=0)
        with pytest.raises(PreconditionError):
            synthesize_cohort(n_segments=1, length=0, noise_sd=0.0, seed=0)
        with pytest.raises(PreconditionError):
            synthesize_cohort(n_segments=1, length=10, noise_sd=-0.1, seed=0)


class TestNormalize:
    def _cohort_with_values(self, values):
        values = np.asarray(values, dtype=float)
        series = SegmentSeries(
            segment=_segment(),
            timestamps=np.arange(values.shape[1]),
            values=values,
            observed=np.ones_like(values, dtype=bool),
        )
        return Cohort(segments=(series,), stream_names=tuple(f"d{i}" for i in range(values.shape[0])))

    def test_affine_endpoints(self):
        cohort = self._cohort_with_values([[40.0, 70.0, 100.0]])
        scaled = normalize(cohort)
        np.testing.assert_allclose(scaled.segments[0].values[0], [0.0, 0.5, 1.0])
        assert scaled.norm_params == ((40.0, 100.0),)

    def test_round_trip_identity(self):
        cohort = synthesize_cohort(n_segments=8, length=25, noise_sd=0.05, seed=21)
        back = denormalize(normalize(cohort))
        for a, b in zip(back.segments, cohort.segments):
            np.testing.assert_allclose(a.values, b.values, atol=1e-12)
        assert back.norm_params is None

    def test_constant_stream_raises_naming_it(self):
        cohort = self._cohort_with_values([[7.0, 7.0, 7.0]])
        with pytest.raises(DegenerateStreamError, match="d0"):
            normalize(cohort)

    def test_observed_values_land_in_unit_interval(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            cohort = synthesize_cohort(
                n_segments=int(rng.integers(1, 6)), length=int(rng.integers(2, 30)),
                noise_sd=0.1, seed=trial,
            )
            scaled = normalize(cohort)
            for s in scaled.segments:
                assert np.all(s.values[s.observed] >= 0.0)
                assert np.all(s.values[s.observed] <= 1.0)

    def test_normalize_uses_observed_entries_only(self):
        values = np.array([[10.0, 20.0, 1e9]])
        observed = np.array([[True, True, False]])
        series = SegmentSeries(_segment(), np.arange(3), values, observed)
        cohort = Cohort(segments=(series,), stream_names=("d0",))
        scaled = normalize(cohort)
        assert scaled.norm_params == ((10.0, 20.0),)
        # missing placeholder is untouched
        assert scaled.segments[0].values[0, 2] == 1e9

    def test_apply_normalization_requires_range(self):
        cohort = self._cohort_with_values([[1.0, 2.0]])
        with pytest.raises(DegenerateStreamError):
            apply_normalization(cohort, ((3.0, 3.0),))


class TestCohortCsv:
    def test_round_trip_complete(self, tmp_path):
        cohort = synthesize_cohort(n_segments=4, length=9, noise_sd=0.03, seed=13)
        path = tmp_path / "cohort.csv"
        write_cohort_csv(cohort, path)
        back = read_cohort_csv(path)
        assert back.n_segments == cohort.n_segments
        for a, b in zip(back.segments, cohort.segments):
            assert np.array_equal(a.values, b.values)
            assert np.array_equal(a.timestamps, b.timestamps)

    def test_round_trip_masked_preserves_observed(self, tmp_path):
        from gapfill.masking import MaskSpec, apply_mask

        cohort = synthesize_cohort(n_segments=3, length=11, noise_sd=0.0, seed=1)
        masked, _ = apply_mask(cohort, MaskSpec(tau=0.4, seed=8))
        path = tmp_path / "masked.csv"
        write_cohort_csv(masked, path)
        back = read_cohort_csv(path)
        for a, b in zip(back.segments, masked.segments):
            assert np.array_equal(a.observed, b.observed)
            assert np.array_equal(a.values, b.values)

    def test_written_file_is_ingestible(self, tmp_path):
        cohort = synthesize_cohort(n_segments=3, length=8, noise_sd=0.0, seed=6)
        path = tmp_path / "cohort.csv"
        write_cohort_csv(cohort, path)
        result = ingest_csv(path, min_confidence=95.0)
        assert len(result.records) == 3 * 8
        assert len(result.segments) == 3


class TestSubsetTruncate:
    def test_subset_keeps_order(self):
        cohort = synthesize_cohort(n_segments=5, length=6, noise_sd=0.0, seed=0)
        sub = subset_cohort(cohort, [3, 1])
        assert [s.segment.id for s in sub.segments] == [
            cohort.segments[3].segment.id,
            cohort.segments[1].segment.id,
        ]

    def test_truncate_prefix(self):
        cohort = synthesize_cohort(n_segments=2, length=10, noise_sd=0.0, seed=0)
        short = truncate_cohort(cohort, 4)
        assert short.length == 4
        np.testing.assert_array_equal(short.timestamps, cohort.timestamps[:4])
        with pytest.raises(PreconditionError):
            truncate_cohort(cohort, 11)
