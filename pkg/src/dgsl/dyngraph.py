"""Dynamic graph data model, dataset files, planted-partition generator, splits,
negative sampling and sinusoidal time encoding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng


class GraphValidationError(ValueError):
    pass


class DatasetParseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Snapshot:
    t: int
    features: np.ndarray  # (N, d)
    edges: np.ndarray  # (E, 3) int: u < v, type

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def pairs(self) -> np.ndarray:
        return self.edges[:, :2]

    def edge_set(self) -> set:
        return {(int(u), int(v)) for u, v in self.edges[:, :2]}

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def with_edges(self, edges) -> "Snapshot":
        return Snapshot(self.t, self.features, _as_edge_array(edges))

    def with_features(self, features) -> "Snapshot":
        return Snapshot(self.t, np.asarray(features, dtype=np.float64), self.edges)


def _as_edge_array(edges) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GraphValidationError(f"edges must be (E, 3) [u, v, type], got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class DynamicGraph:
    snapshots: tuple
    n_nodes: int
    n_types: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "snapshots", tuple(self.snapshots))

    @property
    def T(self) -> int:
        return len(self.snapshots)

    @property
    def feature_dim(self) -> int:
        return self.snapshots[0].features.shape[1]

    def __len__(self):
        return self.T

    def __getitem__(self, i) -> Snapshot:
        return self.snapshots[i]

    def features(self) -> np.ndarray:
        return np.stack([s.features for s in self.snapshots])

    def replace(self, snapshots=None, meta=None) -> "DynamicGraph":
        return DynamicGraph(
            tuple(self.snapshots if snapshots is None else snapshots),
            self.n_nodes,
            self.n_types,
            dict(self.meta if meta is None else meta),
        )

    def view(self, start: int, stop: int) -> "DynamicGraph":
        return self.replace(snapshots=self.snapshots[start:stop])

    def validate(self) -> "DynamicGraph":
        if self.T == 0:
            raise GraphValidationError("dynamic graph has no snapshots")
        d = self.feature_dim
        prev_t = None
        for s in self.snapshots:
            if s.features.shape != (self.n_nodes, d):
                raise GraphValidationError(
                    f"snapshot t={s.t}: features shape {s.features.shape}, expected {(self.n_nodes, d)}"
                )
            if not np.all(np.isfinite(s.features)):
                raise GraphValidationError(f"snapshot t={s.t}: non-finite features")
            if prev_t is not None and s.t <= prev_t:
                raise GraphValidationError(f"snapshot t={s.t} out of order after t={prev_t}")
            prev_t = s.t
            seen = set()
            for u, v, k in s.edges:
                where = f"snapshot t={s.t}, edge ({u}, {v}, {k})"
                if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
                    raise GraphValidationError(f"{where}: endpoint outside [0, {self.n_nodes})")
                if u == v:
                    raise GraphValidationError(f"{where}: self-loop")
                if u > v:
                    raise GraphValidationError(f"{where}: undirected edges must be stored with u < v")
                if not 0 <= k < self.n_types:
                    raise GraphValidationError(f"{where}: type outside [0, {self.n_types})")
                if (u, v) in seen:
                    raise GraphValidationError(f"{where}: duplicate edge")
                seen.add((u, v))
        return self


def make_graph(features, edge_lists, n_types=1, times=None, meta=None) -> DynamicGraph:
    """Build and validate a graph from per-snapshot feature arrays and edge lists.

    Edges may be given as (u, v) or (u, v, type); they are canonicalized to u < v.
    """
    snaps = []
    for i, (x, edges) in enumerate(zip(features, edge_lists)):
        rows = []
        for e in edges:
            u, v = int(e[0]), int(e[1])
            k = int(e[2]) if len(e) > 2 else 0
            rows.append((min(u, v), max(u, v), k))
        snaps.append(Snapshot(i if times is None else times[i], np.asarray(x, dtype=np.float64), _as_edge_array(rows)))
    n = snaps[0].features.shape[0]
    return DynamicGraph(tuple(snaps), n, n_types, dict(meta or {})).validate()


# dataset files -----------------------------------------------------------------

_TOP_KEYS = {"n_nodes", "n_types", "feature_dim", "snapshots"}
_OPTIONAL_KEYS = {"meta"}


def to_json_dict(dg: DynamicGraph) -> dict:
    doc = {
        "n_nodes": dg.n_nodes,
        "n_types": dg.n_types,
        "feature_dim": dg.feature_dim,
        "snapshots": [
            {"t": int(s.t), "features": s.features.tolist(), "edges": s.edges.tolist()} for s in dg.snapshots
        ],
    }
    if dg.meta:
        doc["meta"] = dg.meta
    return doc


def save_dataset(dg: DynamicGraph, path) -> None:
    Path(path).write_text(json.dumps(to_json_dict(dg)))


def from_json_dict(doc) -> DynamicGraph:
    if not isinstance(doc, dict):
        raise DatasetParseError("dataset must be a JSON object")
    unknown = set(doc) - _TOP_KEYS - _OPTIONAL_KEYS
    if unknown:
        raise DatasetParseError(f"unknown top-level keys: {sorted(unknown)}")
    missing = _TOP_KEYS - set(doc)
    if missing:
        raise DatasetParseError(f"missing top-level keys: {sorted(missing)}")
    n, d = int(doc["n_nodes"]), int(doc["feature_dim"])
    snaps = []
    for i, s in enumerate(doc["snapshots"]):
        try:
            x = np.asarray(s["features"], dtype=np.float64)
            edges = _as_edge_array(s.get("edges", []))
            t = int(s["t"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(f"snapshot {i}: {exc}") from None
        if x.shape != (n, d):
            raise GraphValidationError(f"snapshot t={t}: features shape {x.shape}, expected {(n, d)}")
        snaps.append(Snapshot(t, x, edges))
    return DynamicGraph(tuple(snaps), n, int(doc["n_types"]), dict(doc.get("meta", {}))).validate()


def load_dataset(path) -> DynamicGraph:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1][max(0, exc.colno - 40) : exc.colno + 40] if lines else ""
        raise DatasetParseError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}: {context!r}") from None
    return from_json_dict(doc)


# synthetic generator ----------------------------------------------------------

def generate_synthetic(
    n_nodes=64,
    n_communities=4,
    T=8,
    p_intra=0.3,
    p_inter=0.02,
    persistence=0.8,
    noise_fraction=0.0,
    seed=0,
    identity_dim=16,
    jitter=0.1,
) -> DynamicGraph:
    """Planted-partition dynamic graph.

    Each unordered pair is a Markov chain across snapshots: with probability
    ``persistence`` it copies its state from t, otherwise it is redrawn as
    Bernoulli(p_intra or p_inter).  On top of the planted edges, cross-community
    noise edges are drawn fresh per snapshot so that they make up
    ``noise_fraction`` of all edges.

    Edge types: community c for intra edges, ``n_communities`` for planted cross
    edges, ``n_communities + 1`` for noise.  Features are the community one-hot
    plus a fixed per-node Gaussian identity block (``identity_dim`` columns),
    with fresh N(0, jitter^2) noise per snapshot.
    """
    if not 0.0 <= p_inter < p_intra <= 1.0:
        raise ValueError(f"need 0 <= p_inter < p_intra <= 1, got p_inter={p_inter}, p_intra={p_intra}")
    if not 0.0 <= persistence <= 1.0:
        raise ValueError(f"persistence must be in [0, 1], got {persistence}")
    if not 0.0 <= noise_fraction <= 1.0:
        raise ValueError(f"noise_fraction must be in [0, 1], got {noise_fraction}")
    if n_communities < 1 or n_nodes < n_communities or T < 1:
        raise ValueError("need T >= 1 and n_nodes >= n_communities >= 1")
    rng = Rng(seed)
    comm = np.sort(np.arange(n_nodes) % n_communities)[rng.child(1).permutation(n_nodes)]
    iu, iv = np.triu_indices(n_nodes, k=1)
    same = comm[iu] == comm[iv]
    p = np.where(same, p_intra, p_inter)
    pair_type = np.where(same, comm[iu], n_communities)
    noise_type = n_communities + 1
    cross_idx = np.flatnonzero(~same)

    identity = rng.child(2).normal((n_nodes, identity_dim))
    onehot = np.eye(n_communities)[comm]
    base = np.concatenate([onehot, identity], axis=1)

    state = rng.child(3).random(len(p)) < p
    snaps = []
    for t in range(T):
        step = rng.child(4, t)
        if t > 0:
            keep = step.random(len(p)) < persistence
            fresh = step.random(len(p)) < p
            state = np.where(keep, state, fresh)
        planted = np.flatnonzero(state)
        n_noise = 0
        if noise_fraction > 0:
            if noise_fraction >= 1.0:
                n_noise, planted = len(planted), planted[:0]
            else:
                n_noise = int(round(noise_fraction / (1.0 - noise_fraction) * len(planted)))
        free = cross_idx[~state[cross_idx]]
        n_noise = min(n_noise, len(free))
        noise = np.sort(step.gen.choice(free, size=n_noise, replace=False)) if n_noise else np.zeros(0, np.int64)
        rows = np.concatenate(
            [
                np.stack([iu[planted], iv[planted], pair_type[planted]], axis=1),
                np.stack([iu[noise], iv[noise], np.full(len(noise), noise_type)], axis=1),
            ]
        ).astype(np.int64)
        rows = rows[np.lexsort((rows[:, 1], rows[:, 0]))]
        x = base + jitter * step.normal(base.shape)
        snaps.append(Snapshot(t, x, rows))
    meta = {
        "communities": comm.tolist(),
        "noise_type": int(noise_type),
        "generator": {
            "n_nodes": n_nodes,
            "n_communities": n_communities,
            "T": T,
            "p_intra": p_intra,
            "p_inter": p_inter,
            "persistence": persistence,
            "noise_fraction": noise_fraction,
            "seed": seed,
            "identity_dim": identity_dim,
            "jitter": jitter,
        },
    }
    return DynamicGraph(tuple(snaps), n_nodes, n_communities + 2, meta).validate()


# splits -------------------------------------------------------------------------

@dataclass(frozen=True)
class TemporalSplit:
    train_len: int
    val_len: int
    test_len: int

    def __post_init__(self):
        if min(self.train_len, self.val_len, self.test_len) < 1:
            raise ValueError(f"every split part needs >= 1 snapshot, got {self}")

    @property
    def total(self) -> int:
        return self.train_len + self.val_len + self.test_len

    @property
    def val_range(self) -> range:
        return range(self.train_len, self.train_len + self.val_len)

    @property
    def test_range(self) -> range:
        return range(self.train_len + self.val_len, self.total)


def temporal_split(dg: DynamicGraph, split: TemporalSplit):
    if split.total != dg.T:
        raise ValueError(f"split {split.train_len}/{split.val_len}/{split.test_len} sums to {split.total}, graph has T={dg.T}")
    a, b = split.train_len, split.train_len + split.val_len
    return dg.view(0, a), dg.view(a, b), dg.view(b, dg.T)


# negative sampling ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EdgeSample:
    pairs: np.ndarray  # (2P, 2), positives first
    labels: np.ndarray  # (2P,)

    @property
    def positives(self):
        return self.pairs[self.labels == 1]

    @property
    def negatives(self):
        return self.pairs[self.labels == 0]


def sample_negative_edges(snapshot: Snapshot, rng: Rng, max_tries_factor: int = 100) -> EdgeSample:
    n, pos = snapshot.n_nodes, snapshot.pairs()
    if len(pos) == 0:
        raise ValueError(f"snapshot t={snapshot.t} has no edges to sample against")
    if n < 3:
        raise ValueError("negative sampling needs at least 3 nodes")
    need = len(pos)
    budget = max_tries_factor * need
    lo, hi = np.minimum(pos[:, 0], pos[:, 1]), np.maximum(pos[:, 0], pos[:, 1])
    taken = lo.astype(np.int64) * n + hi
    neg = np.zeros(0, dtype=np.int64)
    tries = 0
    while len(neg) < need:
        if tries >= budget:
            raise ValueError(
                f"snapshot t={snapshot.t}: found {len(neg)}/{need} negatives in {budget} tries; graph too dense"
            )
        batch = rng.integers(0, n, size=(max(need, 16), 2))[: budget - tries]
        u, v = batch.min(axis=1).astype(np.int64), batch.max(axis=1).astype(np.int64)
        key = u * n + v
        ok = (u != v) & ~np.isin(key, taken) & ~np.isin(key, neg)
        first = np.zeros(len(key), dtype=bool)
        first[np.unique(key, return_index=True)[1]] = True
        ok &= first
        hits = np.flatnonzero(ok)[: need - len(neg)]
        tries += int(hits[-1]) + 1 if len(neg) + len(hits) == need else len(batch)
        neg = np.concatenate([neg, key[hits]])
    neg = np.stack([neg // n, neg % n], axis=1)
    pairs = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(need), np.zeros(need)])
    return EdgeSample(pairs, labels)


# time encoding ---------------------------------------------------------------------

def time_encoding(t, dim: int) -> np.ndarray:
    """Sinusoidal encoding [sin(t w_0), cos(t w_0), ...] with w_k = 10000^(-2k/dim)."""
    if dim % 2:
        raise ValueError(f"encoding_dim must be even, got {dim}")
    freqs = 1.0 / 10000 ** (np.arange(dim // 2) * 2.0 / dim)
    enc = np.empty(dim)
    enc[0::2] = np.sin(t * freqs)
    enc[1::2] = np.cos(t * freqs)
    return enc


def relative_time_encode(dg_or_len, encoding_dim: int, reference=None) -> np.ndarray:
    """(T, encoding_dim) table, added to every node's projected features at step t.

    For a graph the snapshots' own time indices are used, so a view of a longer
    sequence gets the same rows as the full sequence.  With ``reference`` the
    encoded quantity is the lag ``reference - t`` instead of t itself.
    """
    times = range(dg_or_len) if isinstance(dg_or_len, (int, np.integer)) else [s.t for s in dg_or_len.snapshots]
    if reference is not None:
        times = [reference - t for t in times]
    return np.stack([time_encoding(t, encoding_dim) for t in times]).reshape(-1, encoding_dim)
