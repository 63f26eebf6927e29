"""Command-line entry point: ``python -m dgsl <command>``.

Exit codes: 0 success, 1 domain error (bad data, config, checkpoint, failed
self-check), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import bench
from . import trainer as tr
from .config import SEED_ENV, ConfigError, ExperimentConfig, apply_seed_override, load_config, save_config
from .dyngraph import DatasetParseError, GraphValidationError, generate_synthetic, load_dataset, save_dataset
from .numerics import Rng

DOMAIN_ERRORS = (
    ConfigError, DatasetParseError, GraphValidationError, tr.CheckpointMismatchError, tr.TrainingError,
    bench.BenchError, ValueError, OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# config and run directories ------------------------------------------------------------------

def resolve_config(path=None, seed=None, env=None) -> ExperimentConfig:
    """Config file (or defaults), then $DGSL_SEED, then --seed."""
    cfg = load_config(path) if path else ExperimentConfig()
    cfg = apply_seed_override(cfg, env)
    return cfg if seed is None else cfg.with_(seed=int(seed))


def make_run_dir(cfg: ExperimentConfig, root="runs", out=None) -> Path:
    if out is not None:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path
    stamp = time.strftime("%Y%m%dT%H%M%S")
    base = Path(root) / f"{cfg.hash()}-{stamp}"
    path, k = base, 1
    while path.exists():
        path, k = Path(f"{base}.{k}"), k + 1
    path.mkdir(parents=True)
    return path


def read_metrics(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# commands ----------------------------------------------------------------------------------------

def cmd_generate(a) -> int:
    dg = generate_synthetic(
        n_nodes=a.nodes, n_communities=a.communities, T=a.T, p_intra=a.p_intra, p_inter=a.p_inter,
        persistence=a.persistence, noise_fraction=a.noise, seed=a.seed, identity_dim=a.identity_dim,
    )
    save_dataset(dg, a.out)
    print(f"wrote {a.out}: N={dg.n_nodes} T={dg.T} d={dg.feature_dim} edges={sum(s.n_edges for s in dg.snapshots)}")
    return 0


def _train_one(cfg: ExperimentConfig, data, root, out):
    dg = load_dataset(data)
    run = make_run_dir(cfg, root, out)
    save_config(cfg, run / "config.json")
    with open(run / "metrics.jsonl", "w") as fh:
        state, history = tr.train(dg, cfg, log=lambda rec: fh.write(json.dumps(rec) + "\n"))
    tr.save_checkpoint(state, run / "checkpoint.json")
    test = tr.evaluate(state, dg, "test")
    summary = {"config_hash": cfg.hash(), "seed": cfg.seed, "epochs": len(history), **state.best, "test_auc": test}
    (run / "summary.json").write_text(json.dumps(summary, indent=2))
    return str(run), summary


def cmd_train(a) -> int:
    cfg = resolve_config(a.config, a.seed)
    if not a.seeds:
        run, summary = _train_one(cfg, a.data, a.runs_root, a.out)
        print(json.dumps({"run_dir": run, **summary}))
        return 0
    if a.out is not None:
        raise UsageError("train: --out names one run directory and cannot be combined with --seeds")
    cfgs = [cfg.with_(seed=s) for s in a.seeds]
    if a.jobs > 1:
        with ProcessPoolExecutor(a.jobs) as pool:
            results = list(pool.map(_train_one, cfgs, [a.data] * len(cfgs), [a.runs_root] * len(cfgs), [None] * len(cfgs)))
    else:
        results = [_train_one(c, a.data, a.runs_root, None) for c in cfgs]
    for run, summary in results:
        print(json.dumps({"run_dir": run, **summary}))
    aucs = [s["test_auc"] for _, s in results]
    print(json.dumps({"median_test_auc": float(np.median(aucs)), "seeds": a.seeds}))
    return 0


def cmd_eval(a) -> int:
    state = tr.load_checkpoint(a.checkpoint)
    dg = load_dataset(a.data)
    tr.check_compatible(state, dg)
    value = tr.evaluate(state, dg, a.part)
    print(json.dumps({"part": a.part, "auc": value, "config_hash": state.cfg.hash()}))
    if a.weights:
        out = tr.forward(dg, state)
        with open(a.weights, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "t", "kind", "u", "v", "weight"])
            for layer, est in enumerate(out.structures):
                for row in est.rows():
                    w.writerow([layer, *row])
    return 0


def cmd_attack(a) -> int:
    dg = load_dataset(a.data)
    rng = Rng(a.seed)
    if a.kind == "feature":
        out, man = atk.feature_attack(dg, a.lambda_attack, rng)
    elif a.kind == "structure":
        if a.removed_type is None:
            raise UsageError("attack: structure attacks need --removed-type")
        cfg = resolve_config(a.config) if a.config else None
        split = tr.split_of(cfg) if cfg else _split_arg(a.split)
        out, man = atk.structure_attack(dg, a.removed_type, split, rng, type_feature_dims=atk.type_columns(dg, a.removed_type))
    else:
        if a.checkpoint is None:
            raise UsageError("attack: targeted attacks need --checkpoint (the surrogate)")
        surrogate = tr.load_checkpoint(a.checkpoint)
        tr.check_compatible(surrogate, dg)
        split = tr.split_of(surrogate.cfg)
        target_t = split.test_range.start
        pos = dg[target_t].pairs()
        pick = rng.child(0).gen.permutation(len(pos))[: a.targets]
        out, man = atk.targeted_attack(dg, pos[np.sort(pick)], a.n, a.mode, surrogate, rng, target_t=target_t)
    save_dataset(out, a.out)
    man.save(a.manifest)
    report = {"out": a.out, "manifest": a.manifest, "kind": a.kind, "perturbations": len(man.perturbations)}
    if "removed_edges" in man.details:
        report["removed_edges"] = man.details["removed_edges"]
    print(json.dumps(report))
    return 0


def _split_arg(text):
    from .dyngraph import TemporalSplit

    parts = _ints(text or "")
    if len(parts) != 3:
        raise UsageError("attack: structure attacks need --config or --split TRAIN,VAL,TEST")
    return TemporalSplit(*parts)


def cmd_bench(a) -> int:
    spec = bench.BenchSpec(a.axis, tuple(a.factors), a.repeats, a.baseline, a.budget)
    base = resolve_config(a.config, a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    records, report = bench.run_bench(
        spec, base, log=lambda r: print(f"scale {r.scale:g}: N={r.n_nodes} T={r.T} {r.seconds:.4f}s {r.status}", flush=True)
    )
    bench.write_csv(records, out / "bench.csv")
    (out / "fit.json").write_text(json.dumps({"spec": asdict(spec), **report.as_dict()}, indent=2))
    print(json.dumps(report.as_dict()))
    return 0


def cmd_selfcheck(a) -> int:
    from .checks import run_all

    checks = run_all(fast=a.fast)
    for c in checks:
        print(c.line(), flush=True)
    failed = [c.name for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


# parser ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dgsl", description="Dynamic graph structure learning with kernelized message passing and selective scans.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a planted-partition synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--nodes", type=int, default=64)
    g.add_argument("--communities", type=int, default=4)
    g.add_argument("--T", type=int, default=8)
    g.add_argument("--p-intra", type=float, default=0.3)
    g.add_argument("--p-inter", type=float, default=0.02)
    g.add_argument("--persistence", type=float, default=0.8)
    g.add_argument("--noise", type=float, default=0.0, help="fraction of edges that are cross-community noise")
    g.add_argument("--identity-dim", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train on a dataset; writes config.json, metrics.jsonl, checkpoint.json")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--seed", type=int, help=f"overrides ${SEED_ENV} and the config")
    t.add_argument("--seeds", type=_ints, help="comma-separated seed sweep, one run directory each")
    t.add_argument("--jobs", type=int, default=1, help="concurrent runs for --seeds")
    t.add_argument("--runs-root", default="runs")
    t.add_argument("--out", help="run directory (default <runs-root>/<config hash>-<timestamp>)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="AUC of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--part", choices=("val", "test"), default="test")
    e.add_argument("--weights", help="also write learned structure weights to this CSV")
    e.set_defaults(fn=cmd_eval)

    k = sub.add_parser("attack", help="write a perturbed dataset and its manifest")
    k.add_argument("--data", required=True)
    k.add_argument("--kind", choices=atk.KINDS, required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--manifest", required=True)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--lambda-attack", type=float, default=1.0)
    k.add_argument("--removed-type", type=int)
    k.add_argument("--config", help="config whose split bounds a structure attack")
    k.add_argument("--split", help="TRAIN,VAL,TEST snapshot counts for a structure attack")
    k.add_argument("--checkpoint", help="surrogate for targeted attacks")
    k.add_argument("--n", type=int, default=1, help="perturbations per target")
    k.add_argument("--mode", choices=atk.MODES, default="evasion")
    k.add_argument("--targets", type=int, default=5, help="number of test positives to attack")
    k.set_defaults(fn=cmd_attack)

    b = sub.add_parser("bench", help="epoch time vs scale; writes bench.csv and fit.json")
    b.add_argument("--axis", choices=bench.AXES, default="length")
    b.add_argument("--factors", type=_ints, default=[1, 2, 4, 8])
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--baseline", choices=bench.BASELINES, default="kernelized")
    b.add_argument("--budget", type=float, default=60.0, help="seconds per timed epoch")
    b.add_argument("--config")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", default="bench_out")
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("selfcheck", help="run the numerical oracle suite")
    s.add_argument("--fast", action="store_true", help="fewer Monte-Carlo draws")
    s.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 2
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
