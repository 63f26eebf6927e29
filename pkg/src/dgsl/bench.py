"""Scaling benchmark: seconds per training epoch as the graph grows.

The timed region is one ``Trainer.step`` (forward, backward, Adam update) after
a warm-up epoch; graph generation, neighborhood precomputation and I/O are
outside it.  Memory is the process-level peak resident set, so it only grows
across trials of one process.
"""

from __future__ import annotations

import csv
import gc
import math
import resource
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ExperimentConfig
from .dyngraph import generate_synthetic
from .trainer import Trainer

AXES = ("nodes", "length")
BASELINES = ("kernelized", "exact_attention")
BASE_NODES = 64
BASE_LENGTH = 4  # training snapshots at scale 1


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class BenchSpec:
    axis: str = "length"
    scale_factors: tuple = (1, 2, 4, 8)
    repeats: int = 3
    baseline: str = "kernelized"
    budget: float = 60.0  # seconds per timed epoch before the trial is abandoned

    def __post_init__(self):
        if self.axis not in AXES:
            raise BenchError(f"axis must be one of {AXES}, got {self.axis!r}")
        if self.baseline not in BASELINES:
            raise BenchError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        f = list(self.scale_factors)
        if len(f) < 3:
            raise BenchError(f"need at least 3 scale factors, got {len(f)}")
        if any(x <= 0 for x in f) or any(b <= a for a, b in zip(f, f[1:])):
            raise BenchError(f"scale factors must be positive and strictly increasing, got {f}")
        if self.repeats < 1:
            raise BenchError(f"repeats must be >= 1, got {self.repeats}")
        if not self.budget > 0:
            raise BenchError(f"budget must be > 0, got {self.budget}")


@dataclass
class BenchRecord:
    scale: float
    seconds: float  # median seconds per epoch; nan when not completed
    peak_rss_bytes: int
    variant: str
    n_nodes: int
    T: int
    status: str = "ok"  # "ok", "budget_exceeded" or "skipped"


@dataclass
class FitReport:
    n_points: int
    slope: float  # seconds per unit scale
    intercept: float
    r2: float
    loglog_slope: float
    flagged: list = field(default_factory=list)  # scales left out of the fit

    def as_dict(self) -> dict:
        return asdict(self)


def peak_rss_bytes() -> int:
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(rss if sys.platform == "darwin" else rss * 1024)  # bytes on macOS, KiB on Linux


def scaled_problem(axis: str, factor, base: ExperimentConfig, seed: int = 0):
    """Synthetic graph and matching config at one scale factor.

    Node scaling keeps community size and expected degree fixed, so edges grow
    linearly with nodes.  Length scaling adds training snapshots.
    """
    f = int(factor)
    if axis == "nodes":
        n, C, T, train = BASE_NODES * f, 4 * f, BASE_LENGTH + 2, BASE_LENGTH
        p_inter = 0.02 / f
    else:
        n, C, T, train = BASE_NODES, 4, BASE_LENGTH * f + 2, BASE_LENGTH * f
        p_inter = 0.02
    dg = generate_synthetic(n_nodes=n, n_communities=C, T=T, p_intra=0.3, p_inter=p_inter, seed=seed)
    cfg = base.with_(train_len=train, val_len=1, test_len=1, seed=seed)
    return dg, cfg


def time_epoch(trainer: Trainer, repeats: int, budget: float):
    """Median wall-clock of ``repeats`` steps after one warm-up; None past the budget.

    The garbage collector is paused inside the timed region, as ``timeit`` does.
    """
    trainer.step(0)
    times = []
    for i in range(repeats):
        gc.collect()
        gc.disable()
        try:
            t0 = time.perf_counter()
            trainer.step(i + 1)
            dt = time.perf_counter() - t0
        finally:
            gc.enable()
        if dt > budget:
            return None
        times.append(dt)
    return statistics.median(times)


def run_bench(spec: BenchSpec, base: ExperimentConfig = None, log=None):
    """Records for every scale factor plus the linear fit over completed trials."""
    base = base or ExperimentConfig()
    variant = spec.baseline
    base = base.with_(attention="exact" if variant == "exact_attention" else "kernel")
    records, over = [], False
    for f in spec.scale_factors:
        dg, cfg = scaled_problem(spec.axis, f, base, seed=base.seed)
        if over:
            rec = BenchRecord(float(f), math.nan, peak_rss_bytes(), variant, dg.n_nodes, dg.T, "skipped")
        else:
            sec = time_epoch(Trainer(dg, cfg), spec.repeats, spec.budget)
            status = "ok" if sec is not None else "budget_exceeded"
            over = sec is None
            rec = BenchRecord(float(f), math.nan if sec is None else sec, peak_rss_bytes(), variant, dg.n_nodes, dg.T, status)
        records.append(rec)
        if log is not None:
            log(rec)
    return records, fit(records)


def fit(records) -> FitReport:
    """Least-squares line of seconds on scale, its R^2 and the log-log slope."""
    ok = [r for r in records if r.status == "ok"]
    flagged = [r.scale for r in records if r.status != "ok"]
    if len(ok) < 3:
        raise BenchError(f"need at least 3 completed trials to fit, got {len(ok)} (flagged: {flagged})")
    x = np.array([r.scale for r in ok])
    y = np.array([r.seconds for r in ok])
    if np.any(y <= 0):
        raise BenchError("non-positive timing")
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    loglog = float(np.polyfit(np.log(x), np.log(y), 1)[0])
    return FitReport(len(ok), float(slope), float(intercept), r2, loglog, flagged)


CSV_FIELDS = ("scale", "seconds", "peak_rss_bytes", "variant", "n_nodes", "T", "status")


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            BenchRecord(float(row["scale"]), float(row["seconds"]), int(row["peak_rss_bytes"]), row["variant"],
                        int(row["n_nodes"]), int(row["T"]), row["status"])
            for row in csv.DictReader(fh)
        ]
