"""Positive-random-feature kernel message passing.

Attention weights over a node's spatio-temporal neighborhood (its edges in
snapshot t, a self-loop, its inter-snapshot routes into t-1) are estimated
with positive random features

    phi(x)_i = exp(w_i . x - |x|^2 / 2) / sqrt(m),     E[phi(x) . phi(y)] = exp(x . y)

so softmax(<Wz_u, Wz_v> / tau) becomes phi(Wz_u / sqrt tau) . phi(Wz_v / sqrt tau)
normalized over the neighborhood.  Optional Gumbel noise multiplies each key
by exp(g_v / tau).

The kernel is evaluated per incidence in log space (a log-sum-exp over the m
features, then a segment softmax over each destination's incidences), which
costs O(|E| m) per snapshot and never under- or overflows.  ``factored_aggregate``
keeps the textbook form with per-node stored sums for reference.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

INTRA, SELF, INTER = 0, 1, 2
KIND_NAMES = {INTRA: "intra", SELF: "self", INTER: "inter"}


class NumericUnderflowError(FloatingPointError):
    pass


class NotANeighborError(KeyError):
    pass


# random feature map -----------------------------------------------------------

@dataclass
class PRFMap:
    omega: np.ndarray  # (m, D0), i.i.d. N(0, 1)

    @classmethod
    def sample(cls, m: int, dim: int, rng: Rng) -> "PRFMap":
        return cls(rng.normal((m, dim)))

    @property
    def m(self) -> int:
        return self.omega.shape[0]


def prf_log_features(x, omega) -> Tensor:
    """log phi(x): rows of ``x`` mapped to (n, m) log-features."""
    x = nx.as_tensor(x)
    m = omega.shape[0]
    return x @ Tensor(omega.T) - 0.5 * nx.square(x).sum(axis=-1, keepdims=True) - 0.5 * math.log(m)


def prf_map(x, prf: PRFMap) -> Tensor:
    """phi(x); accepts a single vector or a stack of row vectors."""
    return nx.exp(prf_log_features(x, prf.omega))


def kernel_estimate(x, y, prf: PRFMap) -> float:
    return float(prf_map(x, prf).value @ prf_map(y, prf).value)


# neighborhoods ------------------------------------------------------------------

@dataclass
class Neighborhood:
    """Directed incidences into snapshot t.

    ``src`` indexes a key pool: [0, N) are nodes of snapshot t, [N, 2N) nodes of
    snapshot t-1.
    """

    t: int
    n_nodes: int
    dst: np.ndarray
    src: np.ndarray
    kind: np.ndarray
    has_prev: bool

    @property
    def pool_size(self) -> int:
        return self.n_nodes * (2 if self.has_prev else 1)

    def __len__(self):
        return len(self.dst)

    def lookup(self) -> dict:
        return {(int(u), int(s)): i for i, (u, s) in enumerate(zip(self.dst, self.src))}


def make_neighborhood(t, n_nodes, edges, inter_pairs=(), has_prev=False, self_loops="isolated", temporal_self=True) -> Neighborhood:
    """Assemble incidences; duplicates are dropped, first occurrence wins.

    ``self_loops``: True adds u -> u for every node, "isolated" only for nodes
    that would otherwise have an empty neighborhood, False never.
    """
    if self_loops not in (True, False, "isolated"):
        raise ValueError(f"self_loops must be True, False or 'isolated', got {self_loops!r}")
    seen, dst, src, kind = set(), [], [], []

    def push(u, s, k):
        if (u, s) not in seen:
            seen.add((u, s))
            dst.append(u)
            src.append(s)
            kind.append(k)

    arr = np.asarray(edges, dtype=np.int64)
    arr = arr.reshape(len(arr), -1)[:, :2] if arr.size else np.zeros((0, 2), np.int64)
    for u, v in arr:
        u, v = int(u), int(v)
        push(u, v, INTRA)
        push(v, u, INTRA)
    if self_loops is True:
        for u in range(n_nodes):
            push(u, u, SELF)
    if has_prev:
        for u, v in np.asarray(inter_pairs, dtype=np.int64).reshape(-1, 2):
            push(int(u), n_nodes + int(v), INTER)
        if temporal_self:
            for u in range(n_nodes):
                push(u, n_nodes + u, INTER)
    if self_loops == "isolated":
        covered = set(dst)
        for u in range(n_nodes):
            if u not in covered:
                push(u, u, SELF)
    return Neighborhood(
        t,
        n_nodes,
        np.asarray(dst, dtype=np.intp),
        np.asarray(src, dtype=np.intp),
        np.asarray(kind, dtype=np.int8),
        has_prev,
    )


def select_inter_pairs(prev_feats, cur_feats, k: int) -> np.ndarray:
    """Top-k (u in t, v in t-1) pairs by cosine similarity; ties go to lower flat index."""
    a = np.asarray(cur_feats, dtype=np.float64)
    b = np.asarray(prev_feats, dtype=np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    cos = (a @ b.T).ravel()
    k = int(min(max(k, 0), cos.size))
    if k == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.argsort(-cos, kind="stable")[:k]
    n = b.shape[0]
    return np.stack([order // n, order % n], axis=1).astype(np.int64)


def initial_inter_pairs(dg, features=None, k_inter=None) -> list:
    """Cross-snapshot routes from the initial embeddings (raw features by default).

    k defaults to the edge count of the earlier snapshot.
    """
    feats = dg.features() if features is None else np.asarray(features)
    out = [np.zeros((0, 2), dtype=np.int64)]
    for t in range(1, dg.T):
        k = dg[t - 1].n_edges if k_inter is None else k_inter
        out.append(select_inter_pairs(feats[t - 1], feats[t], k))
    return out


def build_neighborhoods(dg, inter_pairs=None, self_loops="isolated", temporal_self=True) -> list:
    if inter_pairs is None:
        inter_pairs = initial_inter_pairs(dg)
    return [
        make_neighborhood(
            t,
            dg.n_nodes,
            dg[t].edges[:, :2],
            inter_pairs[t] if t > 0 else (),
            has_prev=t > 0,
            self_loops=self_loops,
            temporal_self=temporal_self,
        )
        for t in range(dg.T)
    ]


# layer ----------------------------------------------------------------------------

@dataclass
class KernelMPLayer:
    W: Tensor  # (D0, D0); messages are W z
    prf: PRFMap
    tau: float = 0.25
    gumbel_enabled: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @classmethod
    def init(cls, dim, m, rng: Rng, tau=0.25, gumbel_enabled=True, scale=None) -> "KernelMPLayer":
        scale = 1.0 / math.sqrt(dim) if scale is None else scale
        W = Tensor(rng.child(0).normal((dim, dim)) * scale, requires_grad=True, name="mp.W")
        return cls(W, PRFMap.sample(m, dim, rng.child(1)), tau, gumbel_enabled)


def segment_softmax(scores: Tensor, segments, n_segments) -> Tensor:
    shift = np.full(n_segments, -np.inf)
    np.maximum.at(shift, segments, scores.value)
    e = nx.exp(scores - Tensor(shift[segments]))
    den = nx.segment_sum(e, segments, n_segments)
    return e / nx.take_rows(den, segments)


def logsumexp_rows(x: Tensor) -> Tensor:
    shift = Tensor(x.value.max(axis=1, keepdims=True))
    return nx.log(nx.exp(x - shift).sum(axis=1)) + shift.reshape(-1)


@dataclass
class SnapshotCache:
    """Per-snapshot results kept for structure queries: weights of every incidence."""

    nbr: Neighborhood
    alpha: Tensor  # (E,)
    log_den: np.ndarray  # (N,) log of the per-node normalizer
    _index: tuple = field(default=None, repr=False)  # (sorted route keys, their incidence order)

    def positions(self, u, v, lag: int = 0) -> np.ndarray:
        """Incidence indices of routes v[i] -> u[i]; raises on the first missing one."""
        pool = self.nbr.pool_size
        if self._index is None:
            keys = self.nbr.dst.astype(np.int64) * pool + self.nbr.src
            order = np.argsort(keys, kind="stable")
            self._index = (keys[order], order)
        sorted_keys, order = self._index
        u = np.asarray(u, dtype=np.int64)
        want = u * pool + np.asarray(v, dtype=np.int64) + lag * self.nbr.n_nodes
        at = np.minimum(np.searchsorted(sorted_keys, want), max(len(sorted_keys) - 1, 0))
        hit = sorted_keys[at] == want if len(sorted_keys) else np.zeros(len(want), dtype=bool)
        if not hit.all():
            i = int(np.flatnonzero(~hit)[0])
            raise NotANeighborError(f"no weight for route ({int(u[i])}, {int(want[i] - u[i] * pool - lag * self.nbr.n_nodes)}) at t={self.nbr.t}")
        return order[at]

    def query(self, u: int, v: int, lag: int = 0) -> Tensor:
        """Weight of route v -> u; ``lag=1`` means v lives in snapshot t-1."""
        try:
            j = self.positions([u], [v], lag)[0]
        except NotANeighborError:
            raise NotANeighborError(f"node {v} (lag {lag}) is not in the neighborhood of node {u} at t={self.nbr.t}") from None
        return self.alpha[int(j)]


def _key_pool(WZ_t: Tensor, WZ_prev) -> Tensor:
    return WZ_t if WZ_prev is None else nx.concat([WZ_t, WZ_prev], axis=0)


def kernelized_aggregate(Z_t, Z_prev, nbr: Neighborhood, layer: KernelMPLayer, gumbel=None):
    """One snapshot of kernelized attention.

    ``gumbel`` holds one Gumbel draw per key-pool node (or None for g = 0) and
    is shared by numerator and denominator.  Returns (Z_MP for snapshot t, cache).
    """
    Z_t = nx.as_tensor(Z_t)
    WZ_t = Z_t @ layer.W.T
    WZ_prev = None if Z_prev is None or not nbr.has_prev else nx.as_tensor(Z_prev) @ layer.W.T
    return aggregate_projected(WZ_t, WZ_prev, nbr, layer, gumbel)


def aggregate_projected(WZ_t: Tensor, WZ_prev, nbr: Neighborhood, layer: KernelMPLayer, gumbel=None):
    pool = _key_pool(WZ_t, WZ_prev)
    if pool.shape[0] != nbr.pool_size:
        raise ValueError(f"t={nbr.t}: key pool has {pool.shape[0]} rows, neighborhood expects {nbr.pool_size}")
    scale = 1.0 / math.sqrt(layer.tau)
    omega = layer.prf.omega
    qlog = prf_log_features(WZ_t * scale, omega)
    klog = prf_log_features(pool * scale, omega)
    if gumbel is not None:
        klog = klog + Tensor(np.asarray(gumbel, dtype=np.float64).reshape(-1, 1) / layer.tau)
    pair = nx.take_rows(qlog, nbr.dst) + nx.take_rows(klog, nbr.src)
    log_kernel = logsumexp_rows(pair)
    n = nbr.n_nodes
    counts = np.bincount(nbr.dst, minlength=n)
    if np.any(counts == 0):
        u = int(np.flatnonzero(counts == 0)[0])
        raise NumericUnderflowError(f"t={nbr.t}: node {u} has an empty neighborhood (denominator 0)")
    lk = log_kernel.value
    if not np.all(np.isfinite(lk)):
        bad = int(nbr.dst[np.flatnonzero(~np.isfinite(lk))[0]])
        raise NumericUnderflowError(f"t={nbr.t}: non-finite kernel value for node {bad}")
    log_den = np.full(n, -np.inf)
    np.logaddexp.at(log_den, nbr.dst, lk)
    alpha = segment_softmax(log_kernel, nbr.dst, n)
    msgs = nx.take_rows(pool, nbr.src) * alpha.reshape(-1, 1)
    out = nx.segment_sum(msgs, nbr.dst, n)
    return out, SnapshotCache(nbr, alpha, log_den)


def factored_aggregate(WZ_t, WZ_prev, nbr: Neighborhood, prf: PRFMap, tau=1.0, gumbel=None):
    """Reference numpy evaluation with per-node stored sums.

    s_u = sum_v k_v phi_v,  S_u = sum_v k_v phi_v (Wz_v)^T,  z_u = phi_u^T S_u / phi_u^T s_u
    with k_v = exp(g_v / tau).  Unshifted, so only for well-conditioned inputs.
    """
    WZ_t = np.asarray(WZ_t, dtype=np.float64)
    pool = WZ_t if WZ_prev is None else np.concatenate([WZ_t, np.asarray(WZ_prev, dtype=np.float64)])
    s = 1.0 / math.sqrt(tau)
    phi_q = prf_map(WZ_t * s, prf).value
    phi_k = prf_map(pool * s, prf).value
    if gumbel is not None:
        phi_k = phi_k * np.exp(np.asarray(gumbel) / tau)[:, None]
    n, m = WZ_t.shape[0], prf.m
    sums = np.zeros((n, m))
    outer = np.zeros((n, m, pool.shape[1]))
    np.add.at(sums, nbr.dst, phi_k[nbr.src])
    np.add.at(outer, nbr.dst, phi_k[nbr.src][:, :, None] * pool[nbr.src][:, None, :])
    den = np.einsum("um,um->u", phi_q, sums)
    if np.any(den < 1e-30):
        u = int(np.flatnonzero(den < 1e-30)[0])
        raise NumericUnderflowError(f"t={nbr.t}: denominator below 1e-30 for node {u}")
    return np.einsum("um,umd->ud", phi_q, outer) / den[:, None]


def exact_softmax_aggregate(Z_t, Z_prev, nbr: Neighborhood, W, tau=1.0, return_weights=False):
    """Dense softmax attention restricted to the neighborhood: O(N^2) per snapshot.

    Logits (Wz_u . Wz_v) / tau are formed for every (u, pool node) pair and
    masked, the way a dense attention layer does it.
    """
    W = nx.as_tensor(W)
    WZ_t = nx.as_tensor(Z_t) @ W.T
    pool = WZ_t if Z_prev is None or not nbr.has_prev else nx.concat([WZ_t, nx.as_tensor(Z_prev) @ W.T], axis=0)
    logits = (WZ_t @ pool.T) / tau
    mask = np.zeros(logits.shape, dtype=bool)
    mask[nbr.dst, nbr.src] = True
    masked = nx.where(mask, logits, Tensor(np.full(logits.shape, -1e300)))
    weights = nx.softmax(masked, axis=1)
    out = weights @ pool
    if return_weights:
        return out, weights
    return out


def exact_weights(Z_t, Z_prev, nbr: Neighborhood, W, tau=1.0) -> np.ndarray:
    """Softmax weight of every incidence in ``nbr`` (same order as nbr.dst)."""
    _, w = exact_softmax_aggregate(Z_t, Z_prev, nbr, W, tau, return_weights=True)
    return w.value[nbr.dst, nbr.src]


# structure estimate ---------------------------------------------------------------

@dataclass
class StructureEstimate:
    caches: list  # SnapshotCache per snapshot (None where skipped)
    warnings: list = field(default_factory=list)

    @property
    def T(self):
        return len(self.caches)

    def _select(self, t, kinds):
        c = self.caches[t]
        if c is None:
            return np.zeros(0, np.intp), np.zeros(0, np.intp), c
        sel = np.flatnonzero(np.isin(c.nbr.kind, kinds))
        return sel, c.nbr.src[sel] % c.nbr.n_nodes, c

    def intra(self, t):
        """(dst, src, weights Tensor) over both directions of every stored edge."""
        sel, src, c = self._select(t, [INTRA])
        if c is None:
            return sel, src, Tensor(np.zeros(0))
        return c.nbr.dst[sel], src, c.alpha[sel]

    def inter(self, t):
        sel, src, c = self._select(t, [INTER])
        if c is None:
            return sel, src, Tensor(np.zeros(0))
        return c.nbr.dst[sel], src, c.alpha[sel]

    def intra_map(self, t) -> dict:
        u, v, w = self.intra(t)
        return {(int(a), int(b)): float(x) for a, b, x in zip(u, v, w.value)}

    def inter_map(self, t) -> dict:
        u, v, w = self.inter(t)
        return {(int(a), int(b)): float(x) for a, b, x in zip(u, v, w.value)}

    def dense_inter(self, t, n_nodes) -> Tensor:
        """(N, N) matrix with rows = nodes at t, cols = nodes at t-1; identity at t = 0."""
        if t == 0 or self.caches[t] is None:
            return Tensor(np.eye(n_nodes))
        u, v, w = self.inter(t)
        flat = nx.segment_sum(w, u * n_nodes + v, n_nodes * n_nodes)
        return flat.reshape(n_nodes, n_nodes)

    def sparse_inter(self, t, n_nodes):
        """(u, v, w) triplets of ``dense_inter(t)``; identity routes at t = 0."""
        if t == 0 or self.caches[t] is None:
            ids = np.arange(n_nodes)
            return ids, ids, Tensor(np.ones(n_nodes))
        return self.inter(t)

    def rows(self):
        for t, c in enumerate(self.caches):
            if c is None:
                continue
            n = c.nbr.n_nodes
            for u, s, k, a in zip(c.nbr.dst, c.nbr.src, c.nbr.kind, c.alpha.value):
                if k == SELF:
                    continue
                yield t, KIND_NAMES[int(k)], int(u), int(s % n), float(a)


def build_structure_estimate(dg, Z, layer: KernelMPLayer, k_inter=None, inter_pairs=None, gumbel=None) -> StructureEstimate:
    """Query intra weights on every stored edge and inter weights on top-k cross pairs.

    ``Z`` is (T, N, D0).  Inter pairs default to the top-k cosine pairs of Z.
    """
    Zv = Z.value if isinstance(Z, Tensor) else np.asarray(Z)
    if inter_pairs is None:
        inter_pairs = initial_inter_pairs(dg, Zv, k_inter)
    nbrs = build_neighborhoods(dg, inter_pairs)
    caches, warnings = [], []
    for t in range(dg.T):
        if dg[t].n_edges == 0:
            warnings.append(f"snapshot t={t} has no edges; skipped")
            caches.append(None)
            continue
        g = None if gumbel is None else gumbel[t]
        _, cache = kernelized_aggregate(Zv[t], Zv[t - 1] if t > 0 else None, nbrs[t], layer, g)
        caches.append(cache)
    return StructureEstimate(caches, warnings)


def save_structure_csv(estimate: StructureEstimate, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "kind", "u", "v", "weight"])
        for row in estimate.rows():
            w.writerow(row)


def load_structure_csv(path) -> list:
    with open(path, newline="") as fh:
        return [(int(r["t"]), r["kind"], int(r["u"]), int(r["v"]), float(r["weight"])) for r in csv.DictReader(fh)]


# error bound ---------------------------------------------------------------------

def error_bound(r, tau, m, eps) -> float:
    """Chebyshev bound on P(|phi.phi - k| >= eps): exp(6 r / tau) / (m eps^2)."""
    return math.exp(6.0 * r / tau) / (m * eps**2)


def _sample_ball(rng: Rng, n, dim, r):
    d = rng.normal((n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radius = r * rng.uniform(size=(n, 1)) ** (1.0 / dim)
    return d * radius


def verify_error_bound(r, tau, m, eps, trials, rng: Rng, dim=3, batch=64) -> float:
    """Fraction of trials whose PRF kernel estimate misses exp(x.y / tau) by >= eps.

    Each trial draws x, y uniformly from the radius-r ball and a fresh omega.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    s = 1.0 / math.sqrt(tau)
    failures, done = 0, 0
    while done < trials:
        b = min(batch, trials - done)
        x = _sample_ball(rng, b, dim, r) * s
        y = _sample_ball(rng, b, dim, r) * s
        omega = rng.normal((b, m, dim))
        lx = np.einsum("bmd,bd->bm", omega, x) - 0.5 * (x * x).sum(1, keepdims=True)
        ly = np.einsum("bmd,bd->bm", omega, y) - 0.5 * (y * y).sum(1, keepdims=True)
        est = np.exp(lx + ly).mean(axis=1)
        exact = np.exp((x * y).sum(1))
        failures += int(np.sum(np.abs(est - exact) >= eps))
        done += b
    return failures / trials
