"""Model assembly, link prediction, AUC and the training loop.

forward:  X -> X W_in + b + RTE(t) -> L x [kernel MP -> pool -> structure -> discretize -> scan -> merge]

Snapshot t's embeddings score the pairs of snapshot t + 1 by sigmoid(z_u . z_v).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import pri
from .config import ExperimentConfig
from .dyngraph import DynamicGraph, TemporalSplit, relative_time_encode, sample_negative_edges
from .kernel_mp import (
    KernelMPLayer,
    PRFMap,
    SnapshotCache,
    StructureEstimate,
    build_neighborhoods,
    exact_softmax_aggregate,
    initial_inter_pairs,
    kernelized_aggregate,
)
from .numerics import Adam, Rng, Tensor
from .selective_scan import SSMParams, avg_pool, discretize, merge, scan_chunked, scan_sequential

KEY_INIT, KEY_TRAIN, KEY_EVAL = 0, 1, 2
CHECKPOINT_FORMAT = "dgsl-checkpoint"


class TrainingError(FloatingPointError):
    pass


class CheckpointMismatchError(ValueError):
    pass


# model state ----------------------------------------------------------------------

@dataclass
class ModelState:
    cfg: ExperimentConfig
    n_nodes: int
    feature_dim: int
    W_in: Tensor
    b_in: Tensor
    layers: list  # KernelMPLayer per layer
    ssm: list  # SSMParams per layer
    optimizer: Adam = None
    epoch: int = 0
    best: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ExperimentConfig, n_nodes: int, feature_dim: int) -> "ModelState":
        rng = Rng(cfg.seed).child(KEY_INIT)
        D0 = cfg.hidden_dim
        W_in = Tensor(rng.child(0).normal((feature_dim, D0)) / math.sqrt(feature_dim), requires_grad=True, name="W_in")
        b_in = Tensor(np.zeros(D0), requires_grad=True, name="b_in")
        layers, ssm = [], []
        for l in range(cfg.n_layers):
            layer = KernelMPLayer.init(D0, cfg.n_features, rng.child(1, l), tau=cfg.tau, gumbel_enabled=cfg.gumbel)
            layer.W.name = f"mp{l}.W"
            layers.append(layer)
            p = SSMParams.init(n_nodes, cfg.state_dim, rng.child(2, l))
            for t in p.tensors():
                t.name = t.name.replace("ssm.", f"ssm{l}.")
            ssm.append(p)
        state = cls(cfg, n_nodes, feature_dim, W_in, b_in, layers, ssm)
        state.optimizer = Adam(state.params(), lr=cfg.lr)
        return state

    def params(self) -> list:
        out = [self.W_in, self.b_in]
        for layer, p in zip(self.layers, self.ssm):
            out.append(layer.W)
            out.extend(p.tensors())
        return out

    def named_arrays(self) -> dict:
        d = {p.name: p.value for p in self.params()}
        for l, layer in enumerate(self.layers):
            d[f"mp{l}.omega"] = layer.prf.omega
        return d

    def snapshot_values(self) -> list:
        return [p.value.copy() for p in self.params()]

    def restore_values(self, values) -> None:
        for p, v in zip(self.params(), values):
            p.value[...] = v


# graph context -----------------------------------------------------------------------

def _time_table(dg: DynamicGraph, cfg: ExperimentConfig):
    if cfg.time_encoding == "none":
        return None
    ref = dg[dg.T - 1].t if cfg.time_encoding == "relative" else None
    return relative_time_encode(dg, cfg.hidden_dim, reference=ref)


@dataclass
class GraphContext:
    """Per-graph precomputation: neighborhoods (with top-k inter pairs) and time encodings."""

    dg: DynamicGraph
    nbrs: list
    rte: np.ndarray  # (T, D0) or None
    cfg: ExperimentConfig = None

    @classmethod
    def build(cls, dg: DynamicGraph, cfg: ExperimentConfig) -> "GraphContext":
        k = None if cfg.k_inter < 0 else cfg.k_inter
        nbrs = build_neighborhoods(dg, initial_inter_pairs(dg, k_inter=k))
        return cls(dg, nbrs, _time_table(dg, cfg), cfg)

    def prefix(self, stop: int) -> "GraphContext":
        """The first ``stop`` snapshots; relative encodings are re-anchored at the new end."""
        view = self.dg.view(0, stop)
        return GraphContext(view, self.nbrs[:stop], _time_table(view, self.cfg), self.cfg)


@dataclass
class ForwardOutput:
    Z_hat: Tensor  # (T, N, D0)
    structure: StructureEstimate  # from the last layer
    Z_Seq: Tensor  # (T, N), last layer
    Zbar_MP: Tensor  # (T, N), last layer
    structures: list  # one StructureEstimate per layer


def _aggregate(Z_t, Z_prev, nbr, layer, gumbel, attention):
    if attention == "exact":
        out, w = exact_softmax_aggregate(Z_t, Z_prev, nbr, layer.W, layer.tau, return_weights=True)
        return out, SnapshotCache(nbr, nx.index(w, (nbr.dst, nbr.src)), None)
    return kernelized_aggregate(Z_t, Z_prev, nbr, layer, gumbel)


def forward(dg_or_ctx, state: ModelState, rng: Rng = None, train_mode: bool = False) -> ForwardOutput:
    """Full pass over every snapshot of the graph.  Gumbel noise only in train mode."""
    ctx = dg_or_ctx if isinstance(dg_or_ctx, GraphContext) else GraphContext.build(dg_or_ctx, state.cfg)
    cfg, dg = state.cfg, ctx.dg
    if dg.n_nodes != state.n_nodes or dg.feature_dim != state.feature_dim:
        raise CheckpointMismatchError(
            f"model expects N={state.n_nodes}, d={state.feature_dim}; graph has N={dg.n_nodes}, d={dg.feature_dim}"
        )
    T, N = dg.T, dg.n_nodes
    noisy = train_mode and cfg.gumbel and rng is not None
    Z = Tensor(dg.features()) @ state.W_in + state.b_in
    if ctx.rte is not None:
        Z = Z + Tensor(ctx.rte[:, None, :])
    structures = []
    for l, (layer, ssm) in enumerate(zip(state.layers, state.ssm)):
        outs, caches = [], []
        for t in range(T):
            nbr = ctx.nbrs[t]
            g = rng.child(l, t).gumbel(nbr.pool_size) if noisy else None
            out, cache = _aggregate(Z[t], Z[t - 1] if t > 0 else None, nbr, layer, g, cfg.attention)
            outs.append(out)
            caches.append(cache)
        Z_MP = nx.stack(outs, axis=0)
        structure = StructureEstimate(caches)
        structures.append(structure)
        Zbar = avg_pool(Z_MP)
        inter = [structure.sparse_inter(t, N) for t in range(T)]
        disc = discretize(Zbar, inter, ssm)
        Z_Seq = scan_chunked(disc, Zbar, cfg.chunk_size) if cfg.chunk_size else scan_sequential(disc, Zbar)
        Z = merge(Z_MP, Z_Seq, cfg.lambda_merge)
    return ForwardOutput(Z, structures[-1], Z_Seq, Zbar, structures)


# prediction and AUC ---------------------------------------------------------------------

def predict_links(Z_last, pairs) -> Tensor:
    """sigmoid(z_u . z_v) for each row (u, v) of ``pairs``, clamped to [1e-7, 1 - 1e-7]."""
    Z_last = nx.as_tensor(Z_last)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n = Z_last.shape[0]
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        bad = pairs[(pairs < 0).any(axis=1) | (pairs >= n).any(axis=1)][0]
        raise IndexError(f"pair ({bad[0]}, {bad[1]}) out of range for {n} nodes")
    logits = (nx.take_rows(Z_last, pairs[:, 0]) * nx.take_rows(Z_last, pairs[:, 1])).sum(axis=1)
    return nx.sigmoid(logits)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if len(s) != len(y):
        raise ValueError(f"auc: {len(s)} scores vs {len(y)} labels")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# evaluation ---------------------------------------------------------------------------------

def split_of(cfg: ExperimentConfig) -> TemporalSplit:
    return TemporalSplit(cfg.train_len, cfg.val_len, cfg.test_len)


def eval_samples(dg: DynamicGraph, snapshots, seed: int) -> dict:
    """Fixed negatives per evaluation snapshot, pinned to ``seed`` and the absolute t."""
    return {t: sample_negative_edges(dg[t], Rng(seed).child(KEY_EVAL, dg[t].t)) for t in snapshots if dg[t].n_edges}


def evaluate(state: ModelState, dg_or_ctx, part: str = "test", samples: dict = None, return_scores=False):
    """AUC over the val or test snapshots, each scored from the previous snapshot's embeddings."""
    ctx = dg_or_ctx if isinstance(dg_or_ctx, GraphContext) else GraphContext.build(dg_or_ctx, state.cfg)
    split = split_of(state.cfg)
    if split.total != ctx.dg.T:
        raise ValueError(f"split {split.train_len}/{split.val_len}/{split.test_len} does not match T={ctx.dg.T}")
    targets = {"val": split.val_range, "test": split.test_range}[part]
    samples = eval_samples(ctx.dg, targets, state.cfg.seed) if samples is None else samples
    if not samples:
        raise ValueError(f"no edges in the {part} snapshots")
    out = forward(ctx.prefix(max(targets)), state, train_mode=False)
    scores, labels = [], []
    for t, smp in samples.items():
        scores.append(predict_links(out.Z_hat[t - 1], smp.pairs).value)
        labels.append(smp.labels)
    scores, labels = np.concatenate(scores), np.concatenate(labels)
    value = auc(scores, labels)
    return (value, scores, labels) if return_scores else value


# training -----------------------------------------------------------------------------------

class Trainer:
    """One training run: holds the state, the graph context and the fixed val negatives."""

    def __init__(self, dg: DynamicGraph, cfg: ExperimentConfig, state: ModelState = None):
        split = split_of(cfg)
        if split.total != dg.T:
            raise ValueError(f"split {split.train_len}/{split.val_len}/{split.test_len} does not match T={dg.T}")
        self.dg, self.cfg, self.split = dg, cfg, split
        self.ctx = GraphContext.build(dg, cfg)
        self.train_ctx = self.ctx.prefix(cfg.train_len)
        self.state = ModelState.init(cfg, dg.n_nodes, dg.feature_dim) if state is None else state
        self.pri_cfg = pri.PriConfig(cfg.beta1, cfg.beta2, cfg.mu)
        self.val_samples = eval_samples(dg, split.val_range, cfg.seed)

    def loss(self, epoch: int, train_mode: bool = True):
        """Objective on the training window; returns (L, record of its parts)."""
        cfg, ctx = self.cfg, self.train_ctx
        rng = Rng(cfg.seed).child(KEY_TRAIN, epoch)
        out = forward(ctx, self.state, rng.child(0), train_mode=train_mode)
        probs, labels = [], []
        for t in range(cfg.train_len - 1):
            nxt = ctx.dg[t + 1]
            if nxt.n_edges == 0:
                continue
            smp = sample_negative_edges(nxt, rng.child(1, t))
            probs.append(predict_links(out.Z_hat[t], smp.pairs))
            labels.append(smp.labels)
        if not probs:
            raise TrainingError("no training snapshot after the first has edges")
        if cfg.mu > 0:
            terms = pri.pri_terms(out.structure, out.Z_Seq, out.Zbar_MP, ctx.dg, self.pri_cfg)
            L_PRI, parts = terms.total, terms.as_dict()
        else:
            L_PRI, parts = Tensor(0.0), {"H_intra": 0.0, "L_edge": 0.0, "H_seq": 0.0, "KL": 0.0}
        L, L_LP = pri.total_loss(nx.concat(probs), np.concatenate(labels), L_PRI, cfg.mu)
        rec = {"L": L.item(), "L_LP": L_LP.item(), "L_PRI": float(L_PRI.value), **parts}
        return L, rec

    def step(self, epoch: int) -> dict:
        """Forward, backward and one Adam update."""
        try:
            L, rec = self.loss(epoch)
        except TrainingError:
            raise
        except FloatingPointError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}") from None
        if not np.isfinite(rec["L"]):
            raise TrainingError(f"epoch {epoch}: non-finite loss {rec}")
        opt = self.state.optimizer
        opt.zero_grad()
        L.backward()
        try:
            opt.step()
        except nx.NonFiniteError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}; loss parts {rec}") from None
        self.state.epoch = epoch
        return rec

    def validate(self) -> float:
        return evaluate(self.state, self.ctx, "val", self.val_samples)

    def run(self, log=None, val_fn=None):
        """Train with early stopping; restores the best-validation parameters.

        ``log`` receives each epoch record; ``val_fn`` replaces the validation AUC.
        """
        cfg, state = self.cfg, self.state
        history, best_vals, wait = [], None, 0
        best_auc = -math.inf
        for epoch in range(1, cfg.max_epochs + 1):
            rec = {"epoch": epoch, **self.step(epoch)}
            rec["val_auc"] = float(val_fn(epoch) if val_fn else self.validate())
            history.append(rec)
            if log is not None:
                log(rec)
            if rec["val_auc"] > best_auc:
                best_auc, best_vals, wait = rec["val_auc"], state.snapshot_values(), 0
                state.best = {"epoch": epoch, "val_auc": best_auc}
            else:
                wait += 1
                if wait >= cfg.patience:
                    break
        if best_vals is not None:
            state.restore_values(best_vals)
        return state, history


def train(dg: DynamicGraph, cfg: ExperimentConfig, log=None, val_fn=None):
    """Returns (best-val ModelState, per-epoch metric history)."""
    return Trainer(dg, cfg).run(log=log, val_fn=val_fn)


# checkpoints ------------------------------------------------------------------------------

def save_checkpoint(state: ModelState, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.hash(),
        "n_nodes": state.n_nodes,
        "feature_dim": state.feature_dim,
        "epoch": state.epoch,
        "best": state.best,
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in state.named_arrays().items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> ModelState:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path}: not a checkpoint file")
    cfg = ExperimentConfig.from_dict(doc["config"])
    if cfg.hash() != doc["config_hash"]:
        raise CheckpointMismatchError(f"{path}: config hash {doc['config_hash']} does not match its config ({cfg.hash()})")
    state = ModelState.init(cfg, int(doc["n_nodes"]), int(doc["feature_dim"]))
    arrays = state.named_arrays()
    for name, rec in doc["params"].items():
        if name not in arrays:
            raise CheckpointMismatchError(f"{path}: unexpected parameter {name}")
        value = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        if value.shape != arrays[name].shape:
            raise CheckpointMismatchError(f"{path}: {name} has shape {value.shape}, model expects {arrays[name].shape}")
        arrays[name][...] = value
    missing = set(arrays) - set(doc["params"])
    if missing:
        raise CheckpointMismatchError(f"{path}: missing parameters {sorted(missing)}")
    state.epoch, state.best = int(doc.get("epoch", 0)), dict(doc.get("best", {}))
    return state


def check_compatible(state: ModelState, dg: DynamicGraph) -> None:
    if dg.n_nodes != state.n_nodes or dg.feature_dim != state.feature_dim:
        raise CheckpointMismatchError(
            f"checkpoint (config {state.cfg.hash()}) expects N={state.n_nodes}, d={state.feature_dim}; "
            f"dataset has N={dg.n_nodes}, d={dg.feature_dim}"
        )
    if split_of(state.cfg).total != dg.T:
        raise CheckpointMismatchError(f"checkpoint (config {state.cfg.hash()}) split needs T={split_of(state.cfg).total}; dataset has T={dg.T}")


# reference predictor ---------------------------------------------------------------------------

def bayes_oracle_scores(dg: DynamicGraph, t: int, pairs) -> np.ndarray:
    """True edge probability of the planted generator for snapshot t given snapshot t - 1.

    Needs the generator metadata; noise edges carry no information and are ignored.
    """
    gen = dg.meta.get("generator") if dg.meta else None
    if gen is None:
        raise ValueError("graph has no generator metadata")
    comm = np.asarray(dg.meta["communities"])
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    same = comm[pairs[:, 0]] == comm[pairs[:, 1]]
    p = np.where(same, gen["p_intra"], gen["p_inter"])
    if t == 0:
        return p
    prev = dg[t - 1]
    planted = {(int(u), int(v)) for u, v, k in prev.edges if k != dg.meta["noise_type"]}
    was = np.array([(min(u, v), max(u, v)) in planted for u, v in pairs.tolist()], dtype=bool)
    keep = gen["persistence"]
    return np.where(was, keep + (1 - keep) * p, (1 - keep) * p)
