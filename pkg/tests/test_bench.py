import io
import warnings

import pytest

from pconvlab import bench
from pconvlab.bench import (CANONICAL_DIMS, CANONICAL_OPERATORS, CSV_HEADER, BenchConfig, BenchRecord,
                            MeasurementWarning, bench_suite, check_operator, emit_csv, operator_spec,
                            ordering_report, read_csv, run_bench, stack_flops, write_csv)
from pconvlab.errors import ConfigError

FAST = dict(layers=2, warmup=1, iters=5)


def fake_record(op="conv", flops=1000, latency=0.5):
    return BenchRecord(op, 4, 8, 8, 1, 1, flops, latency, latency * 0.9, latency * 1.1,
                       1 / latency, flops / latency)


class TestOperatorSpec:
    def test_names(self):
        assert operator_spec("conv", 8).kind == "regular"
        assert operator_spec("dwconv", 8).kind == "depthwise"
        assert operator_spec("gconv:4", 8).groups == 4
        assert operator_spec("pconv:1/4", 8).partial_channels == 2
        assert operator_spec("pconv", 8).ratio == 0.25
        assert operator_spec("pwconv", 8).kernel == 1

    @pytest.mark.parametrize("op", ["gconv:3", "pconv:2"])
    def test_incompatible(self, op):
        with pytest.raises(ConfigError):
            operator_spec(op, 8)

    @pytest.mark.parametrize("op", ["fft", "gconv:x", "pconv:0", "conv:3", "pconv:1/0"])
    def test_check_rejects(self, op):
        with pytest.raises(ConfigError):
            check_operator(op)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(iters=4), dict(warmup=0), dict(layers=0),
                                        dict(threads="many"), dict(dim=(8, 8))])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            BenchConfig("conv", **kwargs)


def test_canonical_pconv_stack_flops():
    assert stack_flops("pconv:0.25", CANONICAL_DIMS[0]) == 162_570_240
    assert stack_flops("conv", CANONICAL_DIMS[0]) / stack_flops("pconv:0.25", CANONICAL_DIMS[0]) == 16


class TestRunBench:
    def test_record_consistency(self):
        rec = run_bench(BenchConfig("pconv:0.25", (8, 8, 8), batch=2, **FAST))
        assert rec.flops == stack_flops("pconv:0.25", (8, 8, 8), 2)
        assert rec.flops_total == 2 * rec.flops
        assert rec.effective_flops * rec.latency_median == pytest.approx(rec.flops_total, rel=1e-12)
        assert rec.latency_p10 <= rec.latency_median <= rec.latency_p90
        assert rec.throughput_fps == pytest.approx(2 / rec.latency_median)

    def test_non_timing_fields_deterministic(self):
        a = run_bench(BenchConfig("dwconv", (8, 8, 8), **FAST))
        b = run_bench(BenchConfig("dwconv", (8, 8, 8), **FAST))
        assert (a.operator, a.c, a.h, a.w, a.flops, a.batch) == (b.operator, b.c, b.h, b.w, b.flops, b.batch)

    def test_coarse_clock_warns(self, monkeypatch):
        class Coarse:
            resolution = 1.0

        monkeypatch.setattr(bench.time, "get_clock_info", lambda name: Coarse)
        with pytest.warns(MeasurementWarning):
            rec = run_bench(BenchConfig("conv", (4, 4, 4), **FAST))
        assert rec.warning


class TestSuite:
    def test_cardinality_and_averages(self):
        ops = ["conv", "dwconv"]
        dims = [(8, 8, 8), (16, 4, 4)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MeasurementWarning)
            table = bench_suite(ops, dims, **FAST)
        assert len(table.records) == 4 and set(table.averages) == set(ops)
        for op in ops:
            vals = [r.effective_flops for r in table.by_operator(op)]
            assert table.averages[op] == pytest.approx(sum(vals) / len(vals), rel=1e-9)
        assert [(r.operator, r.c) for r in table.records] == [("conv", 8), ("conv", 16), ("dwconv", 8), ("dwconv", 16)]

    def test_bad_cell_recorded(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MeasurementWarning)
            table = bench_suite(["gconv:16"], [(8, 8, 8), (16, 4, 4)], **FAST)
        assert len(table.records) == 1 and len(table.errors) == 1

    def test_unknown_operator_fails_fast(self):
        with pytest.raises(ConfigError):
            bench_suite(["conv", "nope"], [(4, 4, 4)], **FAST)

    def test_ordering_report_is_informational(self):
        table = bench.BenchTable(averages={"conv": 4.0, "pconv:0.25": 3.0, "gconv:16": 2.0, "dwconv": 1.0})
        rep = ordering_report(table)
        assert rep["conv>pconv>gconv>dwconv"] is True and rep["pconv>dwconv"] is True
        assert rep["flops_vs_dwconv"]["conv"] == 4.0


def test_canonical_operator_defaults():
    assert CANONICAL_OPERATORS == ("conv", "gconv:16", "dwconv", "pconv:0.25")
    assert CANONICAL_DIMS == ((96, 56, 56), (192, 28, 28), (384, 14, 14), (768, 7, 7))


class TestCsv:
    def test_header_only(self, tmp_path):
        path = emit_csv([], tmp_path / "e.csv")
        assert path.read_text() == ",".join(CSV_HEADER) + "\n"

    def test_one_record_two_lines(self):
        buf = io.StringIO()
        write_csv([fake_record()], buf)
        assert len(buf.getvalue().splitlines()) == 2

    def test_round_trip_exact(self, tmp_path):
        recs = [fake_record("conv", 2_601_123_840, 0.123456789), fake_record("pconv:0.25", 162_570_240, 1 / 3)]
        rows = read_csv(emit_csv(recs, tmp_path / "r.csv"))
        for rec, row in zip(recs, rows):
            assert row["operator"] == rec.operator
            assert (row["c"], row["h"], row["w"], row["layers"], row["batch"]) == (4, 8, 8, 1, 1)
            assert row["flops_m"] == rec.flops_m
            assert row["latency_ms_median"] == rec.latency_median * 1e3
            assert row["throughput_fps"] == rec.throughput_fps
            assert row["flops_gs"] == rec.flops_gs
