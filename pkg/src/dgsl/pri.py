"""Relevant-information regularizers and the training objective.

    L_PRI = [H(A_intra) + beta1 * L_edge] + [H(Z_Seq) + beta2 * KL(Z_Seq || Zbar_MP)]
    L     = BCE(link predictions) + mu * L_PRI

Entropies use natural logs.  Real-valued embeddings become distributions
through a softmax over the node axis, one distribution per snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

PROB_CLAMP = 1e-7


class MissingWeightError(KeyError):
    pass


@dataclass(frozen=True)
class PriConfig:
    beta1: float = 0.25
    beta2: float = 50.0
    mu: float = 1.0

    def __post_init__(self):
        for k in ("beta1", "beta2", "mu"):
            if not getattr(self, k) >= 0:
                raise ValueError(f"{k} must be >= 0, got {getattr(self, k)}")


@dataclass
class PriTerms:
    H_intra: Tensor
    L_edge: Tensor
    H_seq: Tensor
    KL: Tensor
    total: Tensor

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k).value) for k in ("H_intra", "L_edge", "H_seq", "KL")}


def structure_entropy(weights) -> Tensor:
    """Shannon entropy of the weights after normalizing them to sum to one."""
    w = nx.as_tensor(weights)
    if w.size == 0:
        raise ValueError("structure_entropy: no weights")
    total = w.sum()
    if not total.value > 0:
        raise ValueError("structure_entropy: weights sum to zero")
    p = w / total
    return -(p * nx.log(p)).sum()


def mean_structure_entropy(structure, T=None) -> Tensor:
    """Per-snapshot entropy of the intra weights, summed and divided by T."""
    T = structure.T if T is None else T
    terms = []
    for t in range(structure.T):
        _, _, w = structure.intra(t)
        if w.size:
            terms.append(structure_entropy(w))
    if not terms:
        return Tensor(0.0)
    return nx.stack(terms).sum() / T


def edge_nll(structure, dg) -> Tensor:
    """-(1/NT) sum_t sum_(u,v) (1/d(u)) log alpha(u, v) over directed incidences of stored edges."""
    N, T = dg.n_nodes, dg.T
    terms = []
    for t in range(T):
        snap = dg[t]
        if snap.n_edges == 0:
            continue
        cache = structure.caches[t] if t < structure.T else None
        pairs = snap.pairs()
        u = np.concatenate([pairs[:, 0], pairs[:, 1]])
        v = np.concatenate([pairs[:, 1], pairs[:, 0]])
        if cache is None:
            raise MissingWeightError(f"no structure weights for snapshot t={t}, edge ({u[0]}, {v[0]})")
        try:
            idx = cache.positions(u, v)
        except KeyError as exc:
            raise MissingWeightError(f"t={t}: {exc.args[0]}") from None
        inv_deg = 1.0 / snap.degrees()[u]
        terms.append((nx.log(nx.take_rows(cache.alpha, idx)) * Tensor(inv_deg)).sum())
    if not terms:
        return Tensor(0.0)
    return -nx.stack(terms).sum() / (N * T)


def embedding_entropy(Z_Seq) -> Tensor:
    """Entropy of softmax over nodes, averaged over snapshots.  Z_Seq is (T, N)."""
    lp = nx.log_softmax(nx.as_tensor(Z_Seq), axis=1)
    return -(nx.exp(lp) * lp).sum(axis=1).mean()


def kl_divergence(P_source, Q_source) -> Tensor:
    """KL(softmax P || softmax Q) over nodes, averaged over snapshots."""
    P, Q = nx.as_tensor(P_source), nx.as_tensor(Q_source)
    if P.shape != Q.shape:
        raise ShapeError(f"kl_divergence: {P.shape} vs {Q.shape}")
    lp, lq = nx.log_softmax(P, axis=1), nx.log_softmax(Q, axis=1)
    return (nx.exp(lp) * (lp - lq)).sum(axis=1).mean()


def pri_terms(structure, Z_Seq, Zbar_MP, dg, cfg: PriConfig) -> PriTerms:
    H_intra = mean_structure_entropy(structure, dg.T)
    L_edge = edge_nll(structure, dg)
    H_seq = embedding_entropy(Z_Seq)
    KL = kl_divergence(Z_Seq, Zbar_MP)
    total = H_intra + cfg.beta1 * L_edge + H_seq + cfg.beta2 * KL
    return PriTerms(H_intra, L_edge, H_seq, KL, total)


def pri_loss(structure, Z_Seq, Zbar_MP, dg, cfg: PriConfig) -> Tensor:
    return pri_terms(structure, Z_Seq, Zbar_MP, dg, cfg).total


def binary_cross_entropy(predictions, labels) -> Tensor:
    p = nx.clamp(nx.as_tensor(predictions), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"binary_cross_entropy: {p.shape[0] if p.ndim else 0} predictions vs {len(y)} labels")
    return -(Tensor(y) * nx.log(p) + Tensor(1.0 - y) * nx.log(1.0 - p)).mean()


def total_loss(predictions, labels, L_PRI, mu: float):
    """Returns (L, L_LP) with L = BCE + mu * L_PRI."""
    L_LP = binary_cross_entropy(predictions, labels)
    if mu == 0:
        return L_LP, L_LP
    return L_LP + mu * nx.as_tensor(L_PRI), L_LP
