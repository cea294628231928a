from __future__ import annotations

import csv

import pytest

from dfmnet.bench import MB, ThroughputRun, latency_ms, repeat_throughput, run_bench, size_report, throughput, time_forwards
from dfmnet.errors import InvalidConfig
from dfmnet.model import DFMNet, ModelConfig


@pytest.fixture(scope="module")
def model():
    return DFMNet().eval()


def test_throughput_arithmetic():
    assert throughput(100, 1, 5.0) == 20.0
    assert throughput(100, 32, 10.0) == 320.0
    assert ThroughputRun(50, 8, 2.0).fps == 200.0


@pytest.mark.parametrize("args", [(0, 1, 1.0), (1, 0, 1.0), (1, 1, 0.0), (1, 1, -1.0)])
def test_throughput_rejects_bad_arguments(args):
    with pytest.raises(InvalidConfig):
        throughput(*args)


def test_forward_timing_validation(model):
    with pytest.raises(InvalidConfig):
        time_forwards(model, 0, n=1, size=32)
    with pytest.raises(InvalidConfig):
        time_forwards(model, 1, n=1, size=40)
    with pytest.raises(InvalidConfig):
        time_forwards(model, 1, n=0, size=32)
    with pytest.raises(InvalidConfig):
        latency_ms(model, 32, repeats=0)


def test_timed_run_reports_its_parameters(model):
    run = time_forwards(model, 2, n=3, size=32, warmup=1)
    assert run.n == 3 and run.batch == 2 and run.seconds > 0
    assert run.fps == pytest.approx(6 / run.seconds)


def test_interleaved_repeats_each_cover_n_forwards(model):
    runs = repeat_throughput(model, 2, repeats=3, n=7, size=32, chunk=3, warmup=0)
    assert len(runs) == 3
    assert all(r.n == 7 and r.batch == 2 and r.seconds > 0 for r in runs)
    with pytest.raises(InvalidConfig):
        repeat_throughput(model, 1, repeats=0, n=1, size=32)
    with pytest.raises(InvalidConfig):
        repeat_throughput(model, 1, repeats=1, n=1, size=32, chunk=0)


def test_throughput_does_not_rise_with_resolution(model):
    small = time_forwards(model, 1, n=3, size=128, warmup=1).fps
    large = time_forwards(model, 1, n=3, size=256, warmup=1).fps
    assert large <= small


def test_size_report_budget():
    rep = size_report(DFMNet())
    assert set(rep.counts) == {"rgb_branch", "tdb", "dqw", "dha", "decoder", "heads"}
    assert 8.5 * 0.85 <= rep.total_mb <= 8.5 * 1.15
    assert 0.9 * 0.85 <= rep.mb("tdb") <= 0.9 * 1.15
    assert rep.total_bytes == 4 * rep.total_count
    assert rep.table()[-1] == ("total", rep.total_count, rep.total_bytes)
    assert "total" in rep.format()


def test_gate_modules_cost():
    full = size_report(DFMNet()).total_mb
    base = size_report(DFMNet(ModelConfig(use_dqw=False, use_dha=False))).total_mb
    assert 0.02 <= full - base <= 0.10


def test_megabyte_is_decimal():
    assert MB == 10**6


def test_run_bench_small(model, tmp_path):
    res = run_bench(model, batches=(1, 2), n=2, size=32, threads=1)
    assert set(res.s_fps) == {1, 2}
    assert res.t_cpu_ms > 0 and res.threads >= 1
    path = tmp_path / "b.csv"
    res.write_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert [int(r["batch"]) for r in rows] == [1, 2]
    assert float(rows[0]["param_mb"]) == pytest.approx(res.sizes.total_mb, rel=1e-6)
    with pytest.raises(InvalidConfig):
        run_bench(model, batches=())
