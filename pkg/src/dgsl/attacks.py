"""Adversarial perturbations of dynamic graphs.

Three kinds: removal of one edge type from the train and validation snapshots,
Gaussian feature noise scaled by the clean per-dimension spread, and a greedy
edge-flip attack on chosen target pairs guided by a trained surrogate model.
Every attack returns the perturbed graph and a manifest that is enough to
rebuild it from the clean graph.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dyngraph import DynamicGraph, TemporalSplit
from .numerics import Rng

KINDS = ("structure", "feature", "targeted")
MODES = ("evasion", "poisoning")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    lambda_attack: float = 0.0
    removed_type: int = -1
    n_perturbations: int = 0
    mode: str = "evasion"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        if self.mode not in MODES:
            raise ValueError(f"attack mode must be one of {MODES}, got {self.mode!r}")
        if not self.lambda_attack >= 0:
            raise ValueError(f"lambda_attack must be >= 0, got {self.lambda_attack}")
        if self.n_perturbations < 0:
            raise ValueError(f"n_perturbations must be >= 0, got {self.n_perturbations}")


@dataclass
class Manifest:
    spec: AttackSpec
    perturbations: list = field(default_factory=list)  # [t, u, v, "add" | "remove"]
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"spec": asdict(self.spec), "perturbations": [list(p) for p in self.perturbations], "details": self.details}

    @classmethod
    def from_dict(cls, doc) -> "Manifest":
        return cls(AttackSpec(**doc["spec"]), [tuple(p) for p in doc["perturbations"]], dict(doc.get("details", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _held_in(dg: DynamicGraph, split: TemporalSplit) -> int:
    if split.total != dg.T:
        raise ValueError(f"split {split.train_len}/{split.val_len}/{split.test_len} does not match T={dg.T}")
    return split.train_len + split.val_len


# structure --------------------------------------------------------------------------------

def type_columns(dg: DynamicGraph, edge_type: int) -> list:
    """Feature columns that reveal ``edge_type``.

    For planted-partition graphs intra edges of community c carry type c and
    column c of the features is the community one-hot, so that column goes
    with the type.  Other graphs carry no such mapping.
    """
    comm = dg.meta.get("communities") if dg.meta else None
    if comm is None or "generator" not in dg.meta:
        return []
    n_comm = int(np.max(comm)) + 1
    return [int(edge_type)] if 0 <= edge_type < n_comm else []


def structure_attack(dg: DynamicGraph, removed_type: int, split: TemporalSplit, rng=None, type_feature_dims=()):
    """Delete every edge of ``removed_type`` from the train and validation snapshots.

    Feature columns listed in ``type_feature_dims`` (those that reveal the type)
    are zeroed in the same snapshots.  Test snapshots are returned as-is.
    ``rng`` is accepted for a uniform attack signature; the removal is deterministic.
    """
    if not 0 <= removed_type < dg.n_types:
        raise ValueError(f"removed_type {removed_type} outside [0, {dg.n_types})")
    stop = _held_in(dg, split)
    cols = np.asarray(type_feature_dims, dtype=np.int64)
    snaps, removed = [], 0
    for i, s in enumerate(dg.snapshots):
        if i >= stop:
            snaps.append(s)
            continue
        keep = s.edges[:, 2] != removed_type
        removed += int((~keep).sum())
        s = s.with_edges(s.edges[keep])
        if cols.size:
            x = s.features.copy()
            x[:, cols] = 0.0
            s = s.with_features(x)
        snaps.append(s)
    out = dg.replace(snapshots=snaps)
    spec = AttackSpec("structure", removed_type=removed_type)
    return out, Manifest(spec, details={"removed_edges": removed, "type_feature_dims": cols.tolist()})


# features ----------------------------------------------------------------------------------

def feature_scale(dg: DynamicGraph) -> np.ndarray:
    """Per-dimension std of the clean features over all nodes and snapshots."""
    return dg.features().reshape(-1, dg.feature_dim).std(axis=0)


def feature_attack(dg: DynamicGraph, lambda_attack: float, rng: Rng, r=None):
    """X' = X + lambda * r * eps with eps ~ N(0, I).

    Draws are keyed by each snapshot's own t, so attacking a split view gives
    the same noise as attacking the whole graph and splitting afterwards when
    ``r`` is fixed.
    """
    if not lambda_attack >= 0:
        raise ValueError(f"lambda_attack must be >= 0, got {lambda_attack}")
    r = feature_scale(dg) if r is None else np.asarray(r, dtype=np.float64)
    snaps = []
    for s in dg.snapshots:
        if lambda_attack == 0:
            snaps.append(s)
            continue
        eps = rng.child(int(s.t)).normal(s.features.shape)
        snaps.append(s.with_features(s.features + lambda_attack * r * eps))
    spec = AttackSpec("feature", lambda_attack=float(lambda_attack), seed=int(rng.seed))
    details = {"r": r.tolist(), "rng_keys": list(rng.keys)}
    return dg.replace(snapshots=snaps), Manifest(spec, details=details)


# targeted -----------------------------------------------------------------------------------

def _flip(snapshot, u, v):
    a, b = min(u, v), max(u, v)
    hit = (snapshot.edges[:, 0] == a) & (snapshot.edges[:, 1] == b)
    if hit.any():
        return snapshot.with_edges(snapshot.edges[~hit]), "remove"
    edges = np.concatenate([snapshot.edges, [[a, b, 0]]])
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return snapshot.with_edges(edges[order]), "add"


def _two_hop(snapshot, node, n_nodes):
    adj = [[] for _ in range(n_nodes)]
    for a, b in snapshot.edges[:, :2]:
        adj[a].append(int(b))
        adj[b].append(int(a))
    near = set(adj[node])
    for w in list(near):
        near.update(adj[w])
    near.discard(node)
    return sorted(near)


def candidate_flips(snapshot, pair, n_nodes):
    """Flips (a, w) with a an endpoint of ``pair`` and w within two hops of a; the pair itself excluded."""
    u, v = int(pair[0]), int(pair[1])
    out = []
    for a in (u, v):
        for w in _two_hop(snapshot, a, n_nodes):
            key = (min(a, w), max(a, w))
            if key != (min(u, v), max(u, v)) and key not in out:
                out.append(key)
    return out


def _with_snapshot(dg, i, snapshot):
    snaps = list(dg.snapshots)
    snaps[i] = snapshot
    return dg.replace(snapshots=snaps)


def targeted_attack(
    dg: DynamicGraph, target_pairs, n: int, mode: str, surrogate, rng=None, target_t=None, split=None, attack_t=None
):
    """Greedy edge flips that lower the surrogate's score for each target pair.

    Targets belong to snapshot ``target_t`` (default: the first test snapshot).
    Flips go into snapshot ``attack_t``: by default ``target_t - 1`` for
    evasion (the input that scores the targets at test time) and the last
    training snapshot for poisoning (so the victim trains on them).  Poisoning
    must perturb train or validation data.  A pair's score is the surrogate's
    link probability from the embeddings of the attacked snapshot; a one-layer
    surrogate without the scan branch cannot see edges of any other snapshot.
    Each round applies the candidate flip with the lowest resulting score, and
    only if it is strictly below the current score; otherwise the attack stops.
    """
    from . import trainer as tr  # the surrogate lives in the trainer module

    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if mode not in MODES:
        raise ValueError(f"attack mode must be one of {MODES}, got {mode!r}")
    split = tr.split_of(surrogate.cfg) if split is None else split
    held_in = _held_in(dg, split)
    target_t = held_in if target_t is None else int(target_t)
    if not 1 <= target_t < dg.T:
        raise ValueError(f"target snapshot {target_t} has no predecessor in a graph of T={dg.T}")
    if attack_t is None:
        attack_t = min(split.train_len, target_t) - 1 if mode == "poisoning" else target_t - 1
    at = int(attack_t)
    if not 0 <= at < target_t:
        raise ValueError(f"attacked snapshot {at} must precede the target snapshot {target_t}")
    if mode == "poisoning" and at >= held_in:
        raise ValueError(f"poisoning must perturb train/val data, but snapshot {at} is a test snapshot")
    pairs = np.asarray(target_pairs, dtype=np.int64).reshape(-1, 2)

    def score(graph, pair):
        ctx = tr.GraphContext.build(graph.view(0, at + 1), surrogate.cfg)
        out = tr.forward(ctx, surrogate, train_mode=False)
        return float(tr.predict_links(out.Z_hat[at], pair[None]).item())

    applied, trace = [], []
    current = dg
    for pair in pairs:
        s0 = score(current, pair)
        record = {"pair": [int(pair[0]), int(pair[1])], "scores": [s0]}
        for _ in range(n):
            best = None
            for a, b in candidate_flips(current[at], pair, dg.n_nodes):
                snap, op = _flip(current[at], a, b)
                trial = _with_snapshot(current, at, snap)
                s = score(trial, pair)
                if best is None or s < best[0]:
                    best = (s, a, b, op, trial)
            if best is None or not best[0] < record["scores"][-1]:
                break
            s, a, b, op, current = best
            applied.append((int(dg[at].t), a, b, op))
            record["scores"].append(s)
        trace.append(record)
    spec = AttackSpec("targeted", n_perturbations=int(n), mode=mode, seed=int(rng.seed) if rng is not None else 0)
    details = {"target_t": int(dg[target_t].t), "attacked_t": int(dg[at].t), "targets": trace, "applied": len(applied)}
    return current, Manifest(spec, applied, details)


# replay ---------------------------------------------------------------------------------------

def apply_manifest(dg: DynamicGraph, manifest: Manifest, split: TemporalSplit = None) -> DynamicGraph:
    """Rebuild an attacked graph from the clean one."""
    spec = manifest.spec
    if spec.kind == "structure":
        if split is None:
            raise ValueError("replaying a structure attack needs the split")
        return structure_attack(dg, spec.removed_type, split, type_feature_dims=manifest.details.get("type_feature_dims", ()))[0]
    if spec.kind == "feature":
        rng = Rng(spec.seed, manifest.details.get("rng_keys", ()))
        return feature_attack(dg, spec.lambda_attack, rng, r=manifest.details["r"])[0]
    index = {int(s.t): i for i, s in enumerate(dg.snapshots)}
    out = dg
    for t, u, v, op in manifest.perturbations:
        i = index[int(t)]
        snap, done = _flip(out[i], int(u), int(v))
        if done != op:
            raise ValueError(f"manifest says {op} ({u}, {v}) at t={t}, but the graph calls for {done}")
        out = _with_snapshot(out, i, snap)
    return out
