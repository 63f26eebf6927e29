"""Epoch time vs sequence length and node count for both attention variants.

Writes one CSV and one fit JSON per sweep under --out, and prints the fits.

    python3 scripts/scaling_benchmark.py --out bench_out
"""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from dgsl import bench

SWEEPS = [
    ("length", "kernelized", (1, 2, 3, 4, 5, 6, 7, 8)),
    ("nodes", "kernelized", (1, 2, 4, 8, 16)),
    ("nodes", "exact_attention", (4, 8, 16, 24)),
    ("length", "exact_attention", (1, 2, 4, 8)),
]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="bench_out")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--budget", type=float, default=60.0)
    a = p.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for axis, variant, factors in SWEEPS:
        spec = bench.BenchSpec(axis, factors, a.repeats, variant, a.budget)
        records, fit = bench.run_bench(spec, log=lambda r: print(f"  {r.variant} {axis} x{r.scale:g}: N={r.n_nodes} T={r.T} {r.seconds:.4f}s", flush=True))
        stem = f"{variant}_{axis}"
        bench.write_csv(records, out / f"{stem}.csv")
        (out / f"{stem}_fit.json").write_text(json.dumps({"spec": asdict(spec), **fit.as_dict()}, indent=2))
        print(f"{stem}: R^2 {fit.r2:.4f}, log-log slope {fit.loglog_slope:.3f}, flagged {fit.flagged}", flush=True)


if __name__ == "__main__":
    main()
