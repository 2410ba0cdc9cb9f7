"""
Throughput Benchmark

Forward-pass wall time against input length at batch size 1. Each length
gets one discarded warmup run followed by ``repeats`` timed runs; the median
is reported. Timing is pinned to a single worker.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from src.convnova_model import ConvNova, ModelConfig
from src.errors import PreconditionError
from src.genome_data import one_hot_codes
from src.settings import single_worker
from src.tensor_engine import Rng, Tensor

logger = logging.getLogger(__name__)

MIN_REPEATS = 5
BATCH_SIZE = 1


@dataclass
class BenchRow:
    sequence_length: int
    median_seconds: Optional[float]
    batch_size: int
    repeats: int
    param_count: int
    status: str = "ok"


def bench_throughput(config: ModelConfig, lengths: Sequence[int], repeats: int = MIN_REPEATS,
                     seed: int = 0, progress: bool = True,
                     timer: Callable[[], float] = time.perf_counter) -> List[BenchRow]:
    """
    Time the forward pass for each length.

    Args:
        config: Architecture to time
        lengths: Strictly ascending input lengths
        repeats: Timed runs per length (at least 5)
        seed: Seed for parameters and inputs
        progress: Show a progress bar
        timer: Monotonic clock

    Returns:
        One BenchRow per length; a length that runs out of memory is marked failed
    """
    if repeats < MIN_REPEATS:
        raise PreconditionError(f"repeats must be >= {MIN_REPEATS}, got {repeats}")
    lengths = [int(length) for length in lengths]
    if not lengths or any(length < 1 for length in lengths):
        raise PreconditionError(f"lengths must be positive, got {lengths}")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise PreconditionError(f"lengths must be strictly ascending, got {lengths}")

    model = ConvNova(config, seed=seed)
    count = model.param_count()
    rows: List[BenchRow] = []
    with single_worker():
        for length in tqdm(lengths, desc="bench", unit="length", disable=None if progress else True):
            try:
                codes = Rng(seed, stream=length).integers(0, 4, size=(BATCH_SIZE, length))
                x = Tensor(one_hot_codes(codes))
                model.logits(x)
                times = []
                for _ in range(repeats):
                    start = timer()
                    model.logits(x)
                    times.append(timer() - start)
                row = BenchRow(length, float(np.median(times)), BATCH_SIZE, repeats, count)
                logger.info("Length %d: median %.6f s over %d runs", length, row.median_seconds, repeats)
            except MemoryError:
                logger.warning("Length %d ran out of memory; row marked failed", length)
                row = BenchRow(length, None, BATCH_SIZE, repeats, count, status="failed")
            rows.append(row)
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path: Union[str, Path]) -> None:
    """Write rows as CSV with a header line; failed rows leave the median empty."""
    columns = [f.name for f in fields(BenchRow)]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            values = asdict(row)
            if values["median_seconds"] is None:
                values["median_seconds"] = ""
            writer.writerow(values)


def read_bench_csv(path: Union[str, Path]) -> List[BenchRow]:
    with open(path, newline="", encoding="utf-8") as handle:
        return [
            BenchRow(
                sequence_length=int(record["sequence_length"]),
                median_seconds=float(record["median_seconds"]) if record["median_seconds"] else None,
                batch_size=int(record["batch_size"]),
                repeats=int(record["repeats"]),
                param_count=int(record["param_count"]),
                status=record["status"],
            )
            for record in csv.DictReader(handle)
        ]
