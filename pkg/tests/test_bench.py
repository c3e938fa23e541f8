import pytest

from ledetr.bench import LatencyReport, read_csv, run_bench, time_fn, write_csv
from ledetr.errors import ConfigError, ParameterError


class TestTimeFn:
    def test_reps_precondition(self):
        with pytest.raises(ParameterError):
            time_fn(lambda: None, reps=1, warmup=3)

    def test_warmup_precondition(self):
        with pytest.raises(ParameterError):
            time_fn(lambda: None, reps=10, warmup=0)

    def test_median_within_band(self):
        median, p5, p95 = time_fn(lambda: sum(range(2000)), reps=20, warmup=3)
        assert p5 <= median <= p95
        assert median >= 0.0


class TestRunBench:
    def test_unknown_target(self):
        with pytest.raises(ConfigError):
            run_bench(["warp_drive"], (8, 8), 10, 3)

    def test_na_and_dense_rows(self):
        report = run_bench(["na_forward", "dense_attention_oracle"], (8, 8), 10, 3, k=3)
        assert len(report.rows) == 2
        na_row, dense_row = report.rows
        assert na_row.target == "na_forward" and na_row.k == 3
        assert dense_row.k == 0
        for row in report.rows:
            assert row.p5_ms <= row.median_ms <= row.p95_ms

    def test_naifi_row_reports_shrunk_kernel(self):
        report = run_bench(["naifi"], (6, 6), 10, 3)
        assert report.rows[0].k == 5  # 63 shrunk to fit a 6x6 map

    def test_full_target_requires_enough_tokens(self):
        with pytest.raises(ConfigError):
            run_bench(["full"], (64, 64), 10, 3)

    def test_threads_recorded(self):
        report = run_bench(["na_forward"], (8, 8), 10, 3, threads=2)
        assert report.rows[0].threads == 2


class TestScalingSteps:
    def test_per_step_growth_envelopes(self):
        """Quadrupling tokens at k=7: NA stays near-linear (<= 6x per step),
        dense attention grows near-quadratically (>= 10x per step).
        Thresholds are loose envelopes for a desk machine."""
        na = {}
        dense = {}
        for hw in (16, 32, 64):
            na[hw] = run_bench(["na_forward"], (hw, hw), 10, 3, threads=1, k=7).rows[0].median_ms
            dense[hw] = run_bench(
                ["dense_attention_oracle"], (hw, hw), 10, 3, threads=1
            ).rows[0].median_ms
        assert na[32] / na[16] <= 6.0
        assert na[64] / na[32] <= 6.0
        assert dense[32] / dense[16] >= 10.0
        assert dense[64] / dense[32] >= 10.0


class TestCsv:
    def test_round_trip_equal_report(self, tmp_path):
        report = run_bench(["na_forward", "dense_attention_oracle"], (8, 8), 10, 3, k=3)
        path = str(tmp_path / "bench.csv")
        write_csv(report, path)
        back = read_csv(path)
        assert back == report

    def test_header_columns(self, tmp_path):
        report = run_bench(["na_forward"], (8, 8), 10, 3)
        path = str(tmp_path / "bench.csv")
        write_csv(report, path)
        lines = (tmp_path / "bench.csv").read_text().splitlines()
        assert lines[0].startswith("# reps=10 warmup=3")
        assert lines[1] == "target,hw,k,threads,median_ms,p5_ms,p95_ms"

    def test_reject_foreign_file(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("hello\n")
        with pytest.raises(ConfigError):
            read_csv(str(path))

    def test_format_states_thread_count(self):
        report = LatencyReport(rows=[], reps=10, warmup=3)
        assert "threads" in run_bench(["na_forward"], (8, 8), 10, 3).format()
        assert "reps=10" in report.format()
