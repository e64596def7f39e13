"""Micro-benchmark harness for the pooling variants.

Times a single pooling layer forward on a fixed input, and the deep
network's forward and forward+backward passes, under each pooling
variant. Medians over >= 30 post-warmup repetitions are the reported
statistic; before any timing the harness asserts that the stacked and
multi-kernel variants agree bitwise on the benchmark input, so the
comparison is between equivalent computations.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import networks
from .pooling import PoolSpec, apply_pool, stacked_spec_for
from .seeding import stream_rng
from .tensor import Tensor, mse_loss

MIN_REPS = 30
MIN_WARMUPS = 5


@dataclass
class BenchRow:
    variant: str
    scenario: str                     # layer-forward | net-forward | net-backward
    extents: str
    repetitions: int
    warmups: int
    median_ms: float
    iqr_ms: float


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def row(self, variant, scenario):
        for r in self.rows:
            if r.variant == variant and r.scenario == scenario:
                return r
        raise KeyError(f"no row for ({variant}, {scenario})")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["variant", "scenario", "extents", "repetitions",
                             "warmups", "median_ms", "iqr_ms"])
            for r in self.rows:
                writer.writerow([r.variant, r.scenario, r.extents,
                                 r.repetitions, r.warmups,
                                 repr(r.median_ms), repr(r.iqr_ms)])

    def to_json(self) -> dict:
        return {"meta": self.meta, "rows": [asdict(r) for r in self.rows]}

    def write(self, out_dir, stem="bench") -> None:
        out_dir = Path(out_dir)
        self.to_csv(out_dir / f"{stem}.csv")
        (out_dir / f"{stem}.json").write_text(
            json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def _time_once(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1000.0


def _measure(fn, reps: int, warmups: int):
    """(median_ms, iqr_ms) from post-warmup runs on a monotonic clock."""
    if reps < 1:
        raise ValueError(f"repetitions must be >= 1, got {reps}")
    for _ in range(warmups):
        fn()
    times = np.array([_time_once(fn) for _ in range(reps)])
    q1, med, q3 = np.percentile(times, [25, 50, 75])
    return float(med), float(q3 - q1)


def _assert_equivalent_on(x: Tensor, specs) -> None:
    """Bitwise stacked/multi agreement on the benchmark input, if both apply."""
    multi = [s for s in specs if s.variant == "multi_kernel"]
    for ms in multi:
        ya = apply_pool(x, ms)
        yb = apply_pool(x, stacked_spec_for(ms))
        if not np.array_equal(ya.data, yb.data):
            raise AssertionError(
                f"stacked form of {ms} disagrees with multi-kernel on the "
                f"benchmark input; timings would compare unequal computations")


def default_specs(stride: int = 2):
    multi = PoolSpec("multi_kernel", (2, 4, 8), stride)
    return [PoolSpec("vanilla", (2,), stride), stacked_spec_for(multi), multi]


def bench_pool_layer(specs=None, extents=(256, 256), reps: int = MIN_REPS,
                     warmups: int = MIN_WARMUPS, seed: int = 0,
                     dtype: str = "float32") -> BenchReport:
    """Time a single pooling layer forward per variant on one shared input."""
    _check_protocol(reps, warmups)
    specs = list(specs) if specs is not None else default_specs()
    rng = stream_rng(seed, "bench/layer")
    x = Tensor(rng.standard_normal((1, 1) + tuple(extents)).astype(dtype))
    _assert_equivalent_on(x, specs)
    report = BenchReport(meta={"scenario": "layer-forward",
                               "extents": f"{extents[0]}x{extents[1]}",
                               "reps": reps, "warmups": warmups,
                               "dtype": dtype})
    for spec in specs:
        med, iqr = _measure(lambda s=spec: apply_pool(x, s), reps, warmups)
        report.rows.append(BenchRow(spec.variant, "layer-forward",
                                    f"{extents[0]}x{extents[1]}",
                                    reps, warmups, med, iqr))
    return report


def bench_network(specs=None, arch: str = "deep", extents=(64, 64),
                  reps: int = MIN_REPS, warmups: int = MIN_WARMUPS,
                  seed: int = 0, dtype: str = "float32") -> BenchReport:
    """Time full-network forward and forward+backward per pooling variant."""
    _check_protocol(reps, warmups)
    specs = list(specs) if specs is not None else default_specs()
    rng = stream_rng(seed, "bench/network")
    x_data = rng.standard_normal((1, 1) + tuple(extents)).astype(dtype)
    _assert_equivalent_on(Tensor(x_data), specs)
    report = BenchReport(meta={"scenario": "network", "arch": arch,
                               "extents": f"{extents[0]}x{extents[1]}",
                               "reps": reps, "warmups": warmups,
                               "dtype": dtype})
    for spec in specs:
        config = networks.NetworkConfig(arch, spec, dtype=dtype)
        net = networks.build(config, seed)
        target = Tensor(np.zeros(
            (1, 1, extents[0] // config.downsample_factor,
             extents[1] // config.downsample_factor), dtype=dtype))

        def fwd():
            networks.forward(net, Tensor(x_data))

        def fwd_bwd():
            loss = mse_loss(networks.forward(net, Tensor(x_data)), target)
            loss.backward()
            for p in net.parameters.values():
                p.zero_grad()

        med_f, iqr_f = _measure(fwd, reps, warmups)
        med_b, iqr_b = _measure(fwd_bwd, reps, warmups)
        ext = f"{extents[0]}x{extents[1]}"
        report.rows.append(BenchRow(spec.variant, "net-forward", ext,
                                    reps, warmups, med_f, iqr_f))
        report.rows.append(BenchRow(spec.variant, "net-backward", ext,
                                    reps, warmups, med_b, iqr_b))
    return report


def _check_protocol(reps, warmups):
    if reps < 1:
        raise ValueError(f"repetitions must be >= 1, got {reps}")
    if reps < MIN_REPS:
        raise ValueError(f"protocol requires >= {MIN_REPS} repetitions, "
                         f"got {reps}")
    if warmups < MIN_WARMUPS:
        raise ValueError(f"protocol requires >= {MIN_WARMUPS} warmups, "
                         f"got {warmups}")


def ordering_checks(layer_report: BenchReport, net_report: BenchReport) -> dict:
    """The three cost-ordering claims, evaluated on report medians."""
    lf = {r.variant: r.median_ms for r in layer_report.rows
          if r.scenario == "layer-forward"}
    nf = {r.variant: r.median_ms for r in net_report.rows
          if r.scenario == "net-forward"}
    nb = {r.variant: r.median_ms for r in net_report.rows
          if r.scenario == "net-backward"}
    return {
        "layer_forward_vanilla_lt_stacked_lt_multi":
            lf["vanilla"] < lf["stacked"] < lf["multi_kernel"],
        "net_forward_stacked_overhead_lt_multi":
            nf["stacked"] - nf["vanilla"] < nf["multi_kernel"] - nf["vanilla"],
        "net_backward_gt_forward_per_variant":
            all(nb[v] > nf[v] for v in nf),
    }


def compare_to_baseline(current: dict, baseline: dict) -> dict:
    """Flag ordering regressions against a stored prior report's checks."""
    out = {}
    for key, ok in current.items():
        was = baseline.get(key)
        out[key] = {"current": ok, "baseline": was,
                    "regressed": bool(was) and not ok}
    return out
