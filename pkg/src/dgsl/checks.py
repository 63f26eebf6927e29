"""Numerical self-checks shared by the ``selfcheck`` command and the test suite.

Each check returns a ``Check`` carrying the measured quantity next to its
threshold, so callers can print or assert on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel_mp as km
from . import numerics as nx
from . import pri
from . import selective_scan as ss
from .config import ExperimentConfig
from .numerics import Rng, Tensor

EB_GRID = ((4096, 0.5), (8192, 0.5), (4096, 1.0))  # (m, eps) at r = 0.5, tau = 1
CHUNKS = (1, 2, 5, 7, 16, 64)


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.value:.4g} (limit {self.threshold:.4g}) {self.detail}".rstrip()


# kernel ------------------------------------------------------------------------------------

def prf_unbiasedness(n_pairs=20, draws=1000, m=64, dim=4, seed=0) -> Check:
    """Largest |mean - exp(x.y)| / standard error over random pairs on the unit ball."""
    rng = Rng(seed)
    worst = 0.0
    for i in range(n_pairs):
        r = rng.child(i)
        x, y = km._sample_ball(r, 2, dim, 1.0)
        omega = r.child(1).normal((draws, m, dim))
        lx = omega @ x - 0.5 * x @ x
        ly = omega @ y - 0.5 * y @ y
        est = np.exp(lx + ly).mean(axis=1)
        z = abs(est.mean() - math.exp(x @ y)) / (est.std(ddof=1) / math.sqrt(draws))
        worst = max(worst, z)
    return Check("prf_unbiasedness", worst, 3.0, worst < 3.0, f"max z over {n_pairs} pairs")


def error_bound_checks(trials=10_000, seed=0, r=0.5, tau=1.0) -> list:
    """Empirical failure rate against the bound plus three standard errors of slack."""
    out = []
    for i, (m, eps) in enumerate(EB_GRID):
        bound = km.error_bound(r, tau, m, eps)
        rate = km.verify_error_bound(r, tau, m, eps, trials, Rng(seed).child(i))
        slack = 3.0 * math.sqrt(max(bound * (1 - bound), 1e-12) / trials)
        limit = min(bound, 1.0) + slack
        out.append(Check(f"error_bound m={m} eps={eps}", rate, limit, rate <= limit, f"bound {bound:.5f}"))
    return out


def agreement_instance(seed, n, dim=4, m=8192, zscale=0.3, with_prev=True, p=0.4):
    """Random graph with small nonnegative embeddings and a Gumbel-free layer at tau = 1."""
    r = Rng(seed)
    iu, iv = np.triu_indices(n, 1)
    keep = r.random(len(iu)) < p
    edges = np.stack([iu[keep], iv[keep]], 1)
    pairs = np.stack([r.integers(0, n, 3), r.integers(0, n, 3)], 1) if with_prev else ()
    nbr = km.make_neighborhood(1 if with_prev else 0, n, edges, pairs, has_prev=with_prev)
    Z_t = r.uniform((n, dim), 0, zscale)
    Z_prev = r.uniform((n, dim), 0, zscale) if with_prev else None
    W = r.normal((dim, dim)) / math.sqrt(dim)
    layer = km.KernelMPLayer(Tensor(W), km.PRFMap.sample(m, dim, r.child(9)), tau=1.0, gumbel_enabled=False)
    return nbr, Z_t, Z_prev, layer


def kernel_agreement(n_graphs=10, seed=0) -> list:
    out_err, alpha_err = 0.0, 0.0
    for g in range(n_graphs):
        n = 5 + g % 6
        nbr, Z_t, Z_prev, layer = agreement_instance(seed * 1000 + g, n, with_prev=g % 2 == 0)
        out, cache = km.kernelized_aggregate(Z_t, Z_prev, nbr, layer)
        ex = km.exact_softmax_aggregate(Z_t, Z_prev, nbr, layer.W, tau=1.0).value
        rel = np.linalg.norm(out.value - ex, axis=1) / np.linalg.norm(ex, axis=1)
        out_err = max(out_err, float(rel.max()))
        w = km.exact_weights(Z_t, Z_prev, nbr, layer.W, tau=1.0)
        alpha_err = max(alpha_err, float(np.abs(cache.alpha.value - w).max()))
    return [
        Check("kernel_vs_exact_output", out_err, 0.05, out_err < 0.05, "max per-node relative L2"),
        Check("kernel_vs_exact_weights", alpha_err, 0.02, alpha_err < 0.02, "max absolute"),
    ]


# scan ---------------------------------------------------------------------------------------

def _series_gain(d, a, terms=256):
    from decimal import Decimal, localcontext

    with localcontext() as ctx:
        ctx.prec = 60
        dd = Decimal(float(d))
        x = dd * Decimal(float(a))
        term, acc = Decimal(1), Decimal(0)
        for k in range(terms):
            acc += term
            term *= x / (k + 2)
        return float(dd * acc)


def scan_equivalence(T=64, n_instances=3, seed=0) -> list:
    worst = 0.0
    for i in range(n_instances):
        r = Rng(seed).child(i)
        disc = ss.DiscretizedParams(
            Tensor(r.uniform((T, 5, 3), 0.2, 0.99)), Tensor(r.normal((T, 5, 3))), Tensor(r.normal((T, 3))), Tensor(np.ones((T, 5)))
        )
        x = r.normal((T, 5))
        ref = ss.scan_sequential(disc, x).value
        for c in CHUNKS:
            worst = max(worst, float(np.abs(ss.scan_chunked(disc, x, min(c, T)).value - ref).max()))
    r = Rng(seed).child(99)
    d = np.exp(r.uniform(100, -14, 1.5))
    a = -np.exp(r.uniform(100, -3, 1.0))
    want = np.array([_series_gain(p, q) for p, q in zip(d, a)])
    zoh = float(np.max(np.abs(ss.zoh_gain(d, a).value - want) / np.abs(want)))
    return [
        Check("chunked_vs_sequential_scan", worst, 1e-12, worst < 1e-12, "max abs"),
        Check("zoh_vs_series", zoh, 1e-12, zoh < 1e-12, "max relative"),
    ]


# end-to-end gradients ------------------------------------------------------------------------

def gradient_instance(seed=0):
    """6 nodes, 3 snapshots, small model; some SSM channels sit on the small-step series branch."""
    from . import trainer as tr
    from .dyngraph import generate_synthetic, sample_negative_edges

    dg = generate_synthetic(n_nodes=6, n_communities=2, T=3, p_intra=0.7, p_inter=0.1, identity_dim=2, seed=seed)
    cfg = ExperimentConfig(
        seed=seed, hidden_dim=4, state_dim=2, n_features=8, tau=1.0, beta1=0.5, beta2=2.0, mu=1.0, lambda_merge=0.5,
        chunk_size=2, train_len=2, val_len=1, test_len=1,
    )
    state = tr.ModelState.init(cfg, dg.n_nodes, dg.feature_dim)
    state.ssm[0].A_log.value[:, 0] = -13.0
    ctx = tr.GraphContext.build(dg, cfg)
    rng = Rng(seed).child(7)
    samples = [sample_negative_edges(dg[t + 1], rng.child(t)) for t in range(dg.T - 1)]
    pcfg = pri.PriConfig(cfg.beta1, cfg.beta2, cfg.mu)

    def loss():
        out = tr.forward(ctx, state, rng.child(0), train_mode=True)
        probs = nx.concat([tr.predict_links(out.Z_hat[t], s.pairs) for t, s in enumerate(samples)])
        labels = np.concatenate([s.labels for s in samples])
        L_PRI = pri.pri_loss(out.structure, out.Z_Seq, out.Zbar_MP, dg, pcfg)
        return pri.total_loss(probs, labels, L_PRI, cfg.mu)[0]

    return state, ctx, loss


def end_to_end_gradients(seed=0, h=1e-5) -> list:
    from . import trainer as tr

    state, ctx, loss = gradient_instance(seed)
    out = tr.forward(ctx, state)
    disc = ss.discretize(out.Zbar_MP.value, [out.structure.dense_inter(t, ctx.dg.n_nodes).value for t in range(ctx.dg.T)], state.ssm[0])
    x = np.abs(disc.Delta_bar.value[:, :, None] * state.ssm[0].A.value[None])
    series = bool(np.any(x < ss.SERIES_CUTOFF))
    errs = nx.param_group_errors(loss, state.params(), h=h, scale="group")
    checks = [Check(f"gradient {k}", v, 1e-4, v < 1e-4) for k, v in errs.items()]
    checks.append(Check("gradient series branch exercised", float(series), 1.0, series))
    return checks


def run_all(fast=False) -> list:
    checks = [prf_unbiasedness(draws=300 if fast else 1000)]
    checks += error_bound_checks(trials=2000 if fast else 10_000)
    checks += kernel_agreement()
    checks += scan_equivalence()
    checks += end_to_end_gradients()
    return checks
