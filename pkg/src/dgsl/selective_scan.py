"""Snapshot sequence as a diagonal selective state-space model.

Per step t, node (state row) n and channel d:

    H[t, n, d] = A_bar[t, n, d] * H[t-1, n, d] + B_bar[t, n, d] * x[t, n]
    y[t, n]    = sum_d C[t, d] * H[t, n, d]

A_bar and B_bar come from zero-order hold with a step size that mixes the
learned inter-snapshot weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Rng, ShapeError, Tensor

SERIES_CUTOFF = 1e-6


@dataclass
class SSMParams:
    A_log: Tensor  # (N, D); A = -exp(A_log) < 0
    W_B: Tensor  # (N, D)
    b_B: Tensor  # (D,)
    W_C: Tensor  # (N, D)
    b_C: Tensor  # (D,)
    W_delta: Tensor  # (N, N)
    b_delta: Tensor  # (N,)
    w_struct_log: Tensor  # (N,); structure mixing weights exp(w_struct_log) > 0

    @classmethod
    def init(cls, n_nodes: int, state_dim: int, rng: Rng) -> "SSMParams":
        s = 1.0 / math.sqrt(n_nodes)

        def p(name, value):
            return Tensor(value, requires_grad=True, name=f"ssm.{name}")

        return cls(
            A_log=p("A_log", rng.child(0).uniform((n_nodes, state_dim), -2.0, 0.0)),
            W_B=p("W_B", rng.child(1).normal((n_nodes, state_dim)) * s),
            b_B=p("b_B", np.zeros(state_dim)),
            W_C=p("W_C", rng.child(2).normal((n_nodes, state_dim)) * s),
            b_C=p("b_C", np.zeros(state_dim)),
            W_delta=p("W_delta", rng.child(3).normal((n_nodes, n_nodes)) * s),
            b_delta=p("b_delta", np.zeros(n_nodes)),
            w_struct_log=p("w_struct_log", np.zeros(n_nodes)),
        )

    def tensors(self) -> list:
        return [self.A_log, self.W_B, self.b_B, self.W_C, self.b_C, self.W_delta, self.b_delta, self.w_struct_log]

    @property
    def A(self) -> Tensor:
        return -nx.exp(self.A_log)


@dataclass
class DiscretizedParams:
    A_bar: Tensor  # (T, N, D)
    B_bar: Tensor  # (T, N, D)
    C: Tensor  # (T, D)
    Delta_bar: Tensor  # (T, N)


def avg_pool(Z_MP) -> Tensor:
    """(T, N, D0) -> (T, N): mean over the feature axis."""
    return nx.mean(nx.as_tensor(Z_MP), axis=-1)


def zoh_gain(delta_bar, A) -> Tensor:
    """(exp(delta_bar * A) - 1) / A, elementwise with broadcasting.

    This is B_bar / B after cancelling delta_bar analytically; below
    |delta_bar * A| < 1e-6 the series delta_bar * (1 + delta_bar * A / 2) is used.
    """
    delta_bar, A = nx.as_tensor(delta_bar), nx.as_tensor(A)
    d, a = np.broadcast_arrays(delta_bar.value, A.value)
    x = d * a
    small = np.abs(x) < SERIES_CUTOFF
    a_safe = np.where(small, 1.0, a)
    ex = np.exp(x)
    out = np.where(small, d * (1.0 + 0.5 * x), np.expm1(x) / a_safe)
    d_delta = np.where(small, 1.0 + x, ex)
    d_A = np.where(small, 0.5 * d * d, (d * ex - out) / a_safe)

    def vjp(g):
        return nx._unbroadcast(g * d_delta, delta_bar.shape), nx._unbroadcast(g * d_A, A.shape)

    return nx.make_op(out, (delta_bar, A), vjp, "zoh_gain")


def discretize(Zbar, inter_weights, params: SSMParams) -> DiscretizedParams:
    """Input-dependent ZOH discretization.

    ``inter_weights`` is a (T, N, N) tensor (or list of (N, N) tensors) whose
    row u / column v is the weight of the route from node v at t-1 into node u
    at t; slot 0 is conventionally the identity.  It may also be a list of
    sparse ``(u, v, w)`` triplets, one per snapshot, which costs O(routes)
    instead of O(N^2) per step.
    """
    Zbar = nx.as_tensor(Zbar)
    T, N = Zbar.shape
    B = Zbar @ params.W_B + params.b_B
    C = Zbar @ params.W_C + params.b_C
    delta = nx.softplus(Zbar @ params.W_delta + params.b_delta)
    scaled = delta * nx.exp(params.w_struct_log)
    if isinstance(inter_weights, (list, tuple)) and inter_weights and isinstance(inter_weights[0], tuple):
        if len(inter_weights) != T:
            raise ShapeError(f"discretize: {len(inter_weights)} sparse inter structures for T={T}")
        delta_bar = nx.stack([_sparse_step(scaled[t], *uvw, N) for t, uvw in enumerate(inter_weights)], axis=0)
    else:
        if isinstance(inter_weights, (list, tuple)):
            inter_weights = nx.stack(inter_weights, axis=0)
        inter_weights = nx.as_tensor(inter_weights)
        if inter_weights.shape != (T, N, N):
            raise ShapeError(f"discretize: inter weights {inter_weights.shape}, expected {(T, N, N)}")
        delta_bar = (scaled.reshape(T, 1, N) @ inter_weights).reshape(T, N)
    bad = ~np.isfinite(delta_bar.value).all(axis=1)
    if bad.any():
        raise FloatingPointError(f"discretize: non-finite step size at t={int(np.flatnonzero(bad)[0])}")
    A = params.A
    db = delta_bar.reshape(T, N, 1)
    A_bar = nx.exp(db * A)
    B_bar = zoh_gain(db, A) * B.reshape(T, 1, -1)
    return DiscretizedParams(A_bar, B_bar, C, delta_bar)


def _sparse_step(scaled_t, u, v, w, n):
    """Column sums of diag(scaled_t) @ A over the listed routes: out[v] = sum_u scaled_t[u] * w_uv."""
    u = np.asarray(u, dtype=np.intp)
    return nx.segment_sum(nx.take_rows(scaled_t, u) * w, v, n)


def discretize_values(delta_bar, A, B):
    """Plain numpy ZOH for given step sizes: returns (A_bar, B_bar)."""
    db = np.asarray(delta_bar, dtype=np.float64)[..., None]
    A = np.asarray(A, dtype=np.float64)
    return np.exp(db * A), zoh_gain(db, A).value * np.asarray(B, dtype=np.float64)[..., None, :]


# scans --------------------------------------------------------------------------

def scan_states(A_bar, B_bar, x) -> np.ndarray:
    """All hidden states H[0..T-1] (H_{-1} = 0), shape (T, N, D)."""
    A_bar, B_bar, x = (np.asarray(a, dtype=np.float64) for a in (A_bar, B_bar, x))
    H = np.empty_like(B_bar)
    h = np.zeros(B_bar.shape[1:])
    for t in range(len(B_bar)):
        h = A_bar[t] * h + B_bar[t] * x[t][:, None]
        H[t] = h
    return H


def _scan_vjp(A_bar, B_bar, C, x, H):
    """Reverse traversal over stored states."""

    def vjp(gy):
        T = len(A_bar)
        gA, gB, gC, gx = np.zeros_like(A_bar), np.zeros_like(B_bar), np.zeros_like(C), np.zeros_like(x)
        gh = np.zeros(A_bar.shape[1:])
        for t in range(T - 1, -1, -1):
            gh = gh + gy[t][:, None] * C[t][None, :]
            gC[t] = gy[t] @ H[t]
            gB[t] = gh * x[t][:, None]
            gx[t] = (gh * B_bar[t]).sum(axis=1)
            gA[t] = gh * (H[t - 1] if t > 0 else 0.0)
            gh = gh * A_bar[t]
        return gA, gB, gC, gx

    return vjp


def _unpack(disc: DiscretizedParams, x):
    return nx.as_tensor(disc.A_bar), nx.as_tensor(disc.B_bar), nx.as_tensor(disc.C), nx.as_tensor(x)


def scan_sequential(disc: DiscretizedParams, Zbar) -> Tensor:
    """Left-to-right recurrence from H = 0 over all T steps; returns Z_Seq (T, N)."""
    A_bar, B_bar, C, x = _unpack(disc, Zbar)
    H = scan_states(A_bar.value, B_bar.value, x.value)
    y = np.einsum("tnd,td->tn", H, C.value)
    return nx.make_op(y, (A_bar, B_bar, C, x), _scan_vjp(A_bar.value, B_bar.value, C.value, x.value, H), "scan")


def _chunk_forward(A_bar, B_bar, C, x, chunk):
    T = len(A_bar)
    y = np.empty((T, A_bar.shape[1]))
    H = np.empty_like(B_bar)
    h = np.zeros(A_bar.shape[1:])
    for start in range(0, T, chunk):
        a = A_bar[start : start + chunk]
        u = B_bar[start : start + chunk] * x[start : start + chunk][:, :, None]
        L = len(a)
        # decay[i, j] = prod_{r=j+1..i} a[r] for j <= i
        decay = np.zeros((L, L) + a.shape[1:])
        for i in range(L):
            decay[i, i] = 1.0
            if i:
                decay[i, :i] = decay[i - 1, :i] * a[i]
        carry = np.cumprod(a, axis=0)  # prod_{r<=i} a[r]
        states = np.einsum("ijnd,jnd->ind", decay, u) + carry * h
        y[start : start + L] = np.einsum("ind,id->in", states, C[start : start + L])
        H[start : start + L] = states
        h = states[-1]
    return y, H


def scan_chunked(disc: DiscretizedParams, Zbar, chunk_size: int) -> Tensor:
    """Scan in chunks: intra-chunk closed form, state carried across chunk boundaries.

    The per-step states of each chunk are kept for the reverse traversal.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    A_bar, B_bar, C, x = _unpack(disc, Zbar)
    y, H = _chunk_forward(A_bar.value, B_bar.value, C.value, x.value, int(chunk_size))
    return nx.make_op(y, (A_bar, B_bar, C, x), _scan_vjp(A_bar.value, B_bar.value, C.value, x.value, H), "scan_chunked")


def merge(Z_MP, Z_Seq, lambda_merge: float) -> Tensor:
    """Z_MP + lambda * Z_Seq broadcast over the feature axis."""
    Z_MP, Z_Seq = nx.as_tensor(Z_MP), nx.as_tensor(Z_Seq)
    if Z_MP.shape[:-1] != Z_Seq.shape:
        raise ShapeError(f"merge: Z_MP {Z_MP.shape} and Z_Seq {Z_Seq.shape} do not align")
    return Z_MP + lambda_merge * nx.expand_dims(Z_Seq, -1)
