import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from jensen_effect.basis import eval_basis, trapezoid_weights
from jensen_effect.errors import EmptyDatasetError, InvalidArgumentError, OutOfSupportError, SchemaError
from jensen_effect.fsim import FsimBases
from jensen_effect.ingest import (
    HISTORY_LAMBDA_BETA,
    HISTORY_LAMBDA_G,
    IrregularSeries,
    assemble_by_site,
    assemble_dataset,
    build_responses,
    dataset_beta_basis,
    extract_histories,
    history_beta_basis,
    pair_sites,
    project_histories,
    read_dataset,
    read_series_csv,
    smooth_series,
    split_segments,
    window_offsets,
    write_dataset,
)
from jensen_effect.jensen import jensen_test_fsim

from .conftest import make_site_frames


def _sine_series(times, site_id="S"):
    times = np.asarray(times, dtype=float)
    return IrregularSeries(site_id, times, 10.0 * np.sin(2 * np.pi * times / 365.0))


def _sites(density_path, env_path):
    return pair_sites(read_series_csv(density_path, "density"), read_series_csv(env_path, "temperature"))


class TestSeries:
    def test_rejects_unsorted_times(self):
        with pytest.raises(InvalidArgumentError):
            IrregularSeries("S", [0.0, 2.0, 1.0], [1.0, 2.0, 3.0])

    def test_split_at_long_gaps(self):
        s = _sine_series(np.concatenate([np.arange(0, 100, 5), np.arange(400, 500, 5)]))
        segments = split_segments(s, 180.0)
        assert [len(t) for t, _ in segments] == [20, 20]
        assert segments[1][0][0] == 400.0


class TestSmoothing:
    def test_noiseless_sinusoid(self):
        s = _sine_series(np.arange(0.0, 730.0, 5.0))
        smoothed = smooth_series(s)
        t = np.linspace(30.0, 690.0, 500)
        assert np.abs(smoothed(t) - 10.0 * np.sin(2 * np.pi * t / 365.0)).max() < 0.1

    def test_gap_is_outside_support(self):
        s = _sine_series(np.concatenate([np.arange(0, 100, 5), np.arange(400, 500, 5)]))
        smoothed = smooth_series(s)
        assert smoothed.support == [(0.0, 95.0), (400.0, 495.0)]
        assert not smoothed.covers(50.0, 420.0)
        with pytest.raises(OutOfSupportError):
            smoothed([250.0])

    def test_single_point_segment_is_skipped(self):
        s = _sine_series(np.concatenate([np.arange(0, 100, 5), [400.0]]))
        smoothed = smooth_series(s)
        assert len(smoothed.segments) == 1
        assert len(smoothed.skipped) == 1

    def test_two_point_segment_is_a_line(self):
        s = IrregularSeries("S", [0.0, 10.0], [1.0, 3.0])
        smoothed = smooth_series(s)
        assert_allclose(smoothed([0.0, 5.0, 10.0]), [1.0, 2.0, 3.0], atol=1e-6)


class TestResponses:
    def test_per_day_change_between_close_visits(self):
        density = IrregularSeries("S", [0.0, 10.0, 150.0, 160.0], [1.0, 2.0, 3.0, 5.0])
        assert build_responses(density, 100.0) == [(0.0, 0.1), (150.0, 0.2)]

    def test_log_density(self):
        density = IrregularSeries("S", [0.0, 10.0], [1.0, np.e])
        [(s, y)] = build_responses(density, 100.0, log_density=True)
        assert y == pytest.approx(0.1)

    def test_log_density_needs_positive_values(self):
        density = IrregularSeries("S", [0.0, 10.0], [0.0, 1.0])
        with pytest.raises(InvalidArgumentError):
            build_responses(density, 100.0, log_density=True)

    def test_gap_of_exactly_max_gap_is_excluded(self):
        density = IrregularSeries("S", [0.0, 100.0, 150.0], [1.0, 2.0, 3.0])
        assert build_responses(density, 100.0) == [(100.0, 0.02)]

    def test_responses_follow_a_time_shift(self):
        density = IrregularSeries("S", [0.0, 10.0, 150.0, 160.0], [1.0, 2.0, 3.0, 5.0])
        shifted = IrregularSeries("S", density.times + 1000.0, density.values)
        assert build_responses(shifted, 100.0) == [(s + 1000.0, y) for s, y in build_responses(density, 100.0)]


class TestHistories:
    def test_window_rows(self):
        smoothed = smooth_series(_sine_series(np.arange(0.0, 400.0, 3.0)))
        H, kept = extract_histories(smoothed, [30.0, 100.0, 200.0], 60.0)
        assert H.shape == (2, 61)
        assert list(kept) == [1, 2]
        assert_allclose(H[0, -1], smoothed([100.0])[0])
        assert_allclose(H[0, 0], smoothed([40.0])[0])

    def test_projection_keeps_lines(self):
        t = np.arange(0.0, 61.0)
        rows = np.vstack([2.0 + 0.1 * t, -t])
        assert_allclose(project_histories(rows, t, history_beta_basis(60.0)), rows, atol=1e-8)

    def test_constant_series_gives_constant_handle(self):
        smoothed = smooth_series(IrregularSeries("S", np.arange(0.0, 200.0, 5.0), np.full(40, 4.2)))
        assert_allclose(smoothed(np.linspace(0.0, 195.0, 101)), 4.2, atol=1e-8)

    def test_linear_trend_spans_slope_times_window(self):
        times = np.arange(0.0, 400.0, 3.0)
        smoothed = smooth_series(IrregularSeries("S", times, 0.1 * times))
        H, kept = extract_histories(smoothed, [100.0, 200.0], 60.0)
        assert list(kept) == [0, 1]
        assert_allclose(np.ptp(H, axis=1), 6.0, atol=1e-6)

    def test_histories_follow_a_time_shift(self):
        rng = np.random.default_rng(4)
        times = np.arange(0.0, 400.0, 3.0)
        values = 10.0 * np.sin(2 * np.pi * times / 365.0) + 0.3 * rng.standard_normal(len(times))
        H, _ = extract_histories(smooth_series(IrregularSeries("S", times, values)), [100.0, 200.0], 60.0)
        moved = smooth_series(IrregularSeries("S", times + 1000.0, values))
        H_moved, _ = extract_histories(moved, [1100.0, 1200.0], 60.0)
        assert_allclose(H_moved, H, atol=1e-8)

    def test_projection_does_not_grow_the_norm(self):
        t = np.arange(0.0, 61.0)
        rows = np.random.default_rng(0).standard_normal((5, 61))
        w = trapezoid_weights(t)
        projected = project_histories(rows, t, history_beta_basis(60.0))
        assert np.all((projected ** 2) @ w <= (rows ** 2) @ w + 1e-8)

    def test_fractional_window_needs_matching_step(self):
        with pytest.raises(InvalidArgumentError):
            window_offsets(60.5)
        smoothed = smooth_series(_sine_series(np.arange(0.0, 400.0, 3.0)))
        with pytest.raises(InvalidArgumentError):
            extract_histories(smoothed, [100.0], 60.5)
        H, _ = extract_histories(smoothed, [100.0], 60.5, grid_step=0.5)
        assert H.shape == (1, 122)
        assert_allclose(H[0, 0], smoothed([39.5])[0])
        assert_allclose(H[0, -1], smoothed([100.0])[0])

    def test_offsets_end_at_the_window(self):
        offsets = window_offsets(60.0, 0.25)
        assert len(offsets) == 241
        assert offsets[-1] == 60.0
        assert_allclose(np.diff(offsets), 0.25)


class TestCsv:
    def test_reads_one_series_per_site(self, site_csvs):
        density_path, env_path = site_csvs
        series = read_series_csv(env_path, "temperature")
        assert [s.site_id for s in series] == ["A", "B"]
        assert np.all(np.diff(series[0].times) > 0)

    def test_reports_bad_rows(self, tmp_path):
        path = tmp_path / "density.csv"
        path.write_text("site_id,time_days,density\nA,abc,1.0\nA,10,2.0\nA,10,3.0\n,20,nan\n",
                        encoding="utf-8")
        with pytest.raises(SchemaError) as info:
            read_series_csv(path, "density")
        problems = info.value.problems
        assert any(p.startswith("row 2, column time_days") for p in problems)
        assert any(p.startswith("row 4, column time_days") and "duplicate" in p for p in problems)
        assert any(p.startswith("row 5, column density") for p in problems)
        assert any(p.startswith("row 5, column site_id") for p in problems)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "density.csv"
        path.write_text("site_id,time_days\nA,1\n", encoding="utf-8")
        with pytest.raises(SchemaError) as info:
            read_series_csv(path, "density")
        assert info.value.problems == ["column density: required but absent"]


class TestAssembly:
    def test_pools_sites(self, site_csvs):
        assembled = assemble_dataset(_sites(*site_csvs))
        ds = assembled.dataset
        assert ds.n == 100
        assert ds.X.shape == (100, 61)
        assert sorted(set(assembled.history.site_ids)) == ["A", "B"]
        assert assembled.beta_basis.n_basis == 12
        assert np.all(assembled.history.obs_times >= 60.0)

    def test_per_site(self, site_csvs):
        by_site = assemble_by_site(_sites(*site_csvs))
        assert sorted(by_site) == ["A", "B"]
        assert by_site["A"].dataset.n == 50

    def test_no_close_visits(self):
        dens, env = make_site_frames("A", visit_every=150)
        density = IrregularSeries("A", dens["time_days"], dens["density"])
        environment = IrregularSeries("A", env["time_days"], env["temperature"])
        with pytest.raises(EmptyDatasetError):
            assemble_dataset([(density, environment)])

    def test_unpaired_site_is_dropped(self):
        density = IrregularSeries("A", [0.0, 10.0], [1.0, 2.0])
        assert pair_sites([density], []) == []


class TestDatasetFile:
    def test_write_then_read(self, site_csvs, tmp_path):
        assembled = assemble_dataset(_sites(*site_csvs))
        path = tmp_path / "dataset.json"
        write_dataset(path, assembled)
        ds, record = read_dataset(path)
        assert_allclose(ds.X, assembled.dataset.X)
        assert record.site_ids == assembled.history.site_ids
        assert record.notes["window_days"] == 60.0
        assert dataset_beta_basis(record) == assembled.beta_basis

    def test_default_beta_basis_spans_the_grid(self, tmp_path):
        path = tmp_path / "dataset.json"
        t = list(np.linspace(10.0, 40.0, 7))
        X = np.random.default_rng(0).standard_normal((12, 7)).tolist()
        path.write_text(json.dumps({"t_grid": t, "X": X, "Y": list(range(12))}), encoding="utf-8")
        ds, record = read_dataset(path)
        basis = dataset_beta_basis(record)
        assert basis.domain == (10.0, 40.0)
        assert eval_basis(basis, ds.t_grid).shape == (7, 12)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "dataset.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(SchemaError):
            read_dataset(path)

    def test_ragged_rows(self, tmp_path):
        path = tmp_path / "dataset.json"
        path.write_text(json.dumps({"t_grid": [0, 1, 2], "X": [[1, 2, 3], [1, 2]], "Y": [0, 1]}),
                        encoding="utf-8")
        with pytest.raises(SchemaError) as info:
            read_dataset(path)
        assert info.value.problems


@pytest.mark.slow
def test_convex_site_response_is_detected(site_csvs):
    assembled = assemble_dataset(_sites(*site_csvs))
    bases = FsimBases(beta=assembled.beta_basis, g_n_basis=25, g_order=4)
    surface = jensen_test_fsim(assembled.dataset, bases, HISTORY_LAMBDA_G.values(), HISTORY_LAMBDA_BETA.values(),
                               seed=0)
    assert surface.reject
    assert surface.sign_summary == "all-positive"
