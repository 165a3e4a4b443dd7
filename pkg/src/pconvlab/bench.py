"""Micro-benchmarks: stacks of one convolution operator, timed on the CPU.

Each measurement runs ``layers`` copies of a single operator back to back on
a seeded input, records per-iteration wall time, and converts the median
latency into effective FLOPS (multiply-adds per second).
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cost import effective_flops
from .errors import ConfigError, MeasurementError, SpecError
from .operators import ConvSpec, conv_flops_actual, conv_forward, init_conv_weights
from .tensor import tensor_new
from .threads import thread_mode

CANONICAL_DIMS = ((96, 56, 56), (192, 28, 28), (384, 14, 14), (768, 7, 7))
CANONICAL_OPERATORS = ("conv", "gconv:16", "dwconv", "pconv:0.25")

CSV_HEADER = ["operator", "c", "h", "w", "layers", "batch", "flops_m",
              "latency_ms_median", "throughput_fps", "flops_gs"]

# the clock must resolve at least this many ticks per median iteration
MIN_TICKS = 100


class MeasurementWarning(UserWarning):
    pass


def operator_spec(op: str, channels: int, kernel: int = 3) -> ConvSpec:
    """Spec for an operator name: ``conv``, ``dwconv``, ``gconv:G``, ``pconv:R`` or ``pwconv``."""
    name, _, arg = op.partition(":")
    try:
        if name == "conv":
            return ConvSpec.regular(channels, channels, kernel)
        if name == "dwconv":
            return ConvSpec.depthwise(channels, kernel)
        if name == "gconv":
            return ConvSpec.group(channels, channels, int(arg), kernel)
        if name == "pconv":
            return ConvSpec.partial(channels, _parse_ratio(arg or "0.25"), kernel)
        if name == "pwconv":
            return ConvSpec.pointwise(channels, channels)
    except (SpecError, ValueError) as exc:
        raise ConfigError(f"operator {op!r} cannot run with {channels} channels: {exc}") from exc
    raise ConfigError(f"unknown operator {op!r}")


def check_operator(op: str) -> None:
    """Reject unknown operator names and malformed arguments before any cell runs."""
    name, _, arg = op.partition(":")
    try:
        if name in ("conv", "dwconv", "pwconv") and not arg:
            return
        if name == "gconv" and int(arg) >= 1:
            return
        if name == "pconv" and 0 < _parse_ratio(arg or "0.25") <= 1:
            return
    except (ValueError, ZeroDivisionError):
        pass
    raise ConfigError(f"unknown or malformed operator {op!r}")


def _parse_ratio(text: str) -> float:
    if "/" in text:
        num, den = text.split("/")
        return int(num) / int(den)
    return float(text)


def operator_label(op: str) -> str:
    name, _, arg = op.partition(":")
    return {
        "conv": "Conv 3x3",
        "dwconv": "DWConv 3x3",
        "gconv": f"GConv 3x3 ({arg} groups)",
        "pconv": f"PConv 3x3 (r={arg})",
        "pwconv": "PWConv 1x1",
    }.get(name, op)


@dataclass
class BenchConfig:
    op: str
    dim: tuple = CANONICAL_DIMS[0]
    layers: int = 10
    batch: int = 1
    warmup: int = 10
    iters: int = 50
    threads: str = "single"
    seed: int = 0
    kernel: int = 3

    def __post_init__(self):
        self.dim = tuple(int(d) for d in self.dim)
        if len(self.dim) != 3 or min(self.dim) < 1:
            raise ConfigError(f"dims must be CxHxW with positive entries, got {self.dim}")
        if self.iters < 5:
            raise ConfigError("at least 5 measured iterations are required")
        if self.warmup < 1:
            raise ConfigError("at least 1 warmup iteration is required")
        if self.layers < 1 or self.batch < 1:
            raise ConfigError("layers and batch must be positive")
        if self.threads not in ("single", "auto"):
            raise ConfigError(f"threads must be 'single' or 'auto', got {self.threads!r}")


@dataclass
class BenchRecord:
    operator: str
    c: int
    h: int
    w: int
    layers: int
    batch: int
    flops: int
    latency_median: float
    latency_p10: float
    latency_p90: float
    throughput_fps: float
    effective_flops: float
    threads: str = "single"
    warning: bool = False

    @property
    def flops_total(self) -> int:
        """Multiply-adds executed per iteration (all layers, whole batch)."""
        return self.flops * self.batch

    @property
    def flops_m(self) -> float:
        return self.flops / 1e6

    @property
    def flops_gs(self) -> float:
        return self.effective_flops / 1e9

    def csv_row(self) -> list:
        return [self.operator, self.c, self.h, self.w, self.layers, self.batch,
                repr(self.flops_m), repr(self.latency_median * 1e3),
                repr(self.throughput_fps), repr(self.flops_gs)]


def stack_flops(op: str, dim, layers: int = 10, kernel: int = 3) -> int:
    """Per-image multiply-adds of ``layers`` stacked copies of ``op`` at ``dim``."""
    c, h, w = dim
    spec = operator_spec(op, c, kernel)
    ho, wo = spec.output_hw(h, w)
    return conv_flops_actual(spec, ho, wo) * layers


def run_bench(cfg: BenchConfig) -> BenchRecord:
    c, h, w = cfg.dim
    spec = operator_spec(cfg.op, c, cfg.kernel)
    if spec.output_hw(h, w) != (h, w):
        raise ConfigError(f"{cfg.op} does not preserve the {h}x{w} feature map")
    weights = [init_conv_weights(spec, cfg.seed * 1000 + i) for i in range(cfg.layers)]
    x = tensor_new((cfg.batch, c, h, w), "uniform", seed=cfg.seed, low=-1.0, high=1.0)

    def run():
        y = x
        for wt in weights:
            y = conv_forward(spec, wt, y)
        return y

    times = np.empty(cfg.iters)
    with thread_mode(cfg.threads):
        for _ in range(cfg.warmup):
            run()
        for i in range(cfg.iters):
            t0 = time.perf_counter()
            run()
            times[i] = time.perf_counter() - t0

    median = float(np.median(times))
    p10, p90 = (float(v) for v in np.percentile(times, [10, 90]))
    if median <= 0:
        raise MeasurementError("median latency is zero; clock too coarse")
    flops = stack_flops(cfg.op, cfg.dim, cfg.layers, cfg.kernel)
    resolution = time.get_clock_info("perf_counter").resolution
    coarse = median < MIN_TICKS * resolution
    if coarse:
        warnings.warn(f"{cfg.op} at {c}x{h}x{w}: median {median:.3e}s is under {MIN_TICKS} clock ticks "
                      f"({resolution:.1e}s)", MeasurementWarning, stacklevel=2)
    return BenchRecord(
        operator=cfg.op, c=c, h=h, w=w, layers=cfg.layers, batch=cfg.batch, flops=flops,
        latency_median=median, latency_p10=p10, latency_p90=p90,
        throughput_fps=cfg.batch / median,
        effective_flops=effective_flops(flops * cfg.batch, median),
        threads=cfg.threads, warning=coarse,
    )


@dataclass
class BenchTable:
    records: list = field(default_factory=list)
    averages: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    def by_operator(self, op: str) -> list:
        return [r for r in self.records if r.operator == op]


def bench_suite(operators=CANONICAL_OPERATORS, dims=CANONICAL_DIMS, **options) -> BenchTable:
    """Benchmark every operator at every dim; failed cells are recorded, not raised.

    Unknown operator names and invalid shared options raise
    :class:`ConfigError` before anything runs.

    ``averages`` maps each operator to the arithmetic mean of its per-dim
    effective FLOPS.
    """
    for op in operators:
        check_operator(op)
    BenchConfig("conv", (1, 1, 1), **options)  # shared options fail once, not per cell
    table = BenchTable()
    for op in operators:
        flops = []
        for dim in dims:
            try:
                rec = run_bench(BenchConfig(op, dim, **options))
            except (ConfigError, MeasurementError) as exc:
                table.errors.append((op, tuple(dim), str(exc)))
                continue
            table.records.append(rec)
            flops.append(rec.effective_flops)
        if flops:
            table.averages[op] = sum(flops) / len(flops)
    return table


def ordering_report(table: BenchTable) -> dict:
    """Hardware-dependent comparisons, reported but never asserted."""
    avg = table.averages
    report = {"averages_gs": {op: v / 1e9 for op, v in avg.items()}}
    dw = next((op for op in avg if op.startswith("dwconv")), None)
    if dw:
        report["flops_vs_dwconv"] = {op: v / avg[dw] for op, v in avg.items() if op != dw}
    order = [next((op for op in avg if op.startswith(p)), None) for p in ("conv", "pconv", "gconv", "dwconv")]
    if all(order):
        vals = [avg[op] for op in order]
        report["conv>pconv>gconv>dwconv"] = all(a > b for a, b in zip(vals, vals[1:]))
    if dw:
        pc = next((op for op in avg if op.startswith("pconv")), None)
        if pc:
            report["pconv>dwconv"] = avg[pc] > avg[dw]
    return report


def write_csv(records, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow(rec.csv_row())


def emit_csv(records, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        write_csv(records, fh)
    return path


def read_csv(path) -> list:
    """Parse a file written by :func:`emit_csv` back into dicts of numbers."""
    ints = {"c", "h", "w", "layers", "batch"}
    rows = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (v if k == "operator" else int(v) if k in ints else float(v))
                         for k, v in row.items()})
    return rows
