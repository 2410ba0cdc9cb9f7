"""Tests for the throughput benchmark."""

import itertools

import pytest

from src.benchmark import BenchRow, bench_throughput, read_bench_csv, write_bench_csv
from src.convnova_model import ConvNova, ModelConfig, param_count
from src.errors import PreconditionError

TINY = ModelConfig(hidden_dim=4, n_gcb=2, kernel_size=3)


def counting_timer():
    ticks = itertools.count()
    return lambda: float(next(ticks))


def test_bench_reports_median_per_length():
    rows = bench_throughput(TINY, [16, 32, 64], repeats=5, progress=False, timer=counting_timer())
    assert [row.sequence_length for row in rows] == [16, 32, 64]
    for row in rows:
        assert row.median_seconds == 1.0
        assert row.repeats == 5 and row.batch_size == 1
        assert row.param_count == param_count(TINY)
        assert row.status == "ok"


def test_bench_rejects_bad_arguments():
    with pytest.raises(PreconditionError):
        bench_throughput(TINY, [16], repeats=1, progress=False)
    with pytest.raises(PreconditionError):
        bench_throughput(TINY, [32, 16], progress=False)
    with pytest.raises(PreconditionError):
        bench_throughput(TINY, [], progress=False)


def test_out_of_memory_length_is_marked_failed(monkeypatch):
    original = ConvNova.logits

    def logits(self, x):
        if x.shape[-2] > 32:
            raise MemoryError("simulated")
        return original(self, x)

    monkeypatch.setattr(ConvNova, "logits", logits)
    rows = bench_throughput(TINY, [16, 64], progress=False, timer=counting_timer())
    assert rows[0].status == "ok"
    assert rows[1].status == "failed" and rows[1].median_seconds is None


def test_bench_csv_roundtrip(tmp_path):
    rows = [BenchRow(16, 0.25, 1, 5, 100), BenchRow(32, None, 1, 5, 100, status="failed")]
    path = tmp_path / "bench.csv"
    write_bench_csv(rows, path)
    assert path.read_text().splitlines()[0] == "sequence_length,median_seconds,batch_size,repeats,param_count,status"
    assert read_bench_csv(path) == rows


@pytest.mark.slow
def test_forward_time_scales_linearly_with_length():
    config = ModelConfig(hidden_dim=32, n_gcb=5, kernel_size=9)
    lengths = [2 ** 12, 2 ** 13, 2 ** 14, 2 ** 15, 2 ** 16]
    rows = bench_throughput(config, lengths, repeats=5, progress=False)
    medians = [row.median_seconds for row in rows]
    for short, long in zip(medians, medians[1:]):
        assert 1.6 <= long / short <= 2.6
