"""Test AUC under structure, feature and targeted attacks on the planted synthetic graph.

Three communities give five edge types (three intra, one planted cross, one
noise), so the structure attack removes one of five types.  Results go to
stdout as JSON lines.

    python3 scripts/robustness_sweep.py --seeds 0,1,2 --epochs 300
"""

import argparse
import json

import numpy as np

from dgsl import attacks as atk
from dgsl import trainer as tr
from dgsl.config import ExperimentConfig
from dgsl.dyngraph import generate_synthetic
from dgsl.numerics import Rng


def test_auc(dg, cfg, state=None):
    if state is None:
        state, _ = tr.train(dg, cfg)
    return tr.evaluate(state, dg, "test"), state


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--targets", type=int, default=10)
    a = p.parse_args()
    for seed in [int(s) for s in a.seeds.split(",")]:
        dg = generate_synthetic(n_nodes=64, n_communities=3, T=8, noise_fraction=0.2, seed=seed)
        cfg = ExperimentConfig(seed=seed, max_epochs=a.epochs)
        split = tr.split_of(cfg)
        rng = Rng(seed).child(99)
        row = {"seed": seed}
        row["clean"], clean = test_auc(dg, cfg)

        k = int(rng.child(0).integers(0, dg.n_types))
        cut, _ = atk.structure_attack(dg, k, split, type_feature_dims=atk.type_columns(dg, k))
        row[f"structure_type{k}"] = test_auc(cut, cfg)[0]

        for lam in (0.5, 1.0, 1.5):
            noisy, _ = atk.feature_attack(dg, lam, rng.child(1))
            row[f"feature_{lam}"] = test_auc(noisy, cfg)[0]

        surrogate, _ = tr.train(dg, cfg.with_(lambda_merge=0.0))
        t = split.test_range.start
        pos = dg[t].pairs()
        targets = pos[np.sort(rng.child(2).gen.permutation(len(pos))[: a.targets])]
        for n in (1, 2, 3):
            attacked, man = atk.targeted_attack(dg, targets, n, "evasion", surrogate, target_t=t)
            row[f"evasion_n{n}"] = test_auc(attacked, cfg, clean)[0]
            attacked, man = atk.targeted_attack(dg, targets, n, "poisoning", surrogate, target_t=t)
            row[f"poisoning_n{n}"] = test_auc(attacked, cfg)[0]
            row[f"flips_n{n}"] = man.details["applied"]
        print(json.dumps(row), flush=True)


if __name__ == "__main__":
    main()
