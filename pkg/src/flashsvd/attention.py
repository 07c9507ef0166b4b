"""Low-rank streaming attention and its dense baselines.

All kernels process every (batch, head) slice of a tile in one broadcast
``gemm`` call; per-element arithmetic is the same as a per-head loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .factorizer import AttentionFactorSet, FactorizedLinear
from .memtier import EXCLUDED, TRANSIENT, MemoryMeter, TilePlan, nbytes, validate_tile_plan
from .tensor import gemm, softmax_row


def _check_input(x, d_model):
    if x.ndim != 3 or x.shape[-1] != d_model:
        raise ShapeError(f"expected input of shape (B, M, {d_model}), got {x.shape}")


@dataclass
class ProjectedFactors:
    """``P_a = X @ U_a`` per unit for a in q, k, v; each array is ``B x M x r``."""

    p_q: list
    p_k: list
    p_v: list
    handles: list = field(default_factory=list)

    @property
    def shape(self):
        return self.p_q[0].shape

    def release(self, meter: MemoryMeter) -> None:
        for h in self.handles:
            meter.free(h)
        self.handles = []


def project_factors(x, fset: AttentionFactorSet, meter: MemoryMeter) -> ProjectedFactors:
    """Project ``x`` into every unit's rank space; the caller owns the release."""
    x = np.asarray(x)
    _check_input(x, fset.d_model)
    b, m, _ = x.shape
    out = {"q": [], "k": [], "v": []}
    handles = []
    for name in "qkv":
        for g, f in enumerate(getattr(fset, name)):
            handles.append(meter.alloc(f"attn.p_{name}.{g}", TRANSIENT, nbytes((b, m, f.rank))))
            out[name].append(gemm(x, f.u.astype(x.dtype, copy=False)))
    return ProjectedFactors(out["q"], out["k"], out["v"], handles)


def padded_rank(rank: int, block_r: int) -> int:
    return -(-rank // block_r) * block_r


def load_tile(p_block, v_a, b_a, block_r: int):
    """Rebuild ``p_block @ v_a + b_a`` one rank block at a time.

    ``p_block`` is ``... x B_M x r`` and ``v_a`` is ``... x r x d``.  The rank
    axis is zero-padded to a multiple of ``block_r``; partial products are
    chained through ``gemm``'s accumulator, so the result is bit-identical to
    the unblocked product, and the bias is added once at the end.
    """
    p_block = np.asarray(p_block)
    v_a = np.asarray(v_a)
    r = p_block.shape[-1]
    if v_a.shape[-2] != r:
        raise ShapeError(f"factor block rank {r} != V_a rows {v_a.shape[-2]}")
    rp = padded_rank(r, block_r)
    if rp != r:
        pad_p = [(0, 0)] * (p_block.ndim - 1) + [(0, rp - r)]
        pad_v = [(0, 0)] * (v_a.ndim - 2) + [(0, rp - r), (0, 0)]
        p_block = np.pad(p_block, pad_p)
        v_a = np.pad(v_a, pad_v)
    acc = None
    for s in range(0, rp, block_r):
        acc = gemm(p_block[..., s:s + block_r], v_a[..., s:s + block_r, :], c_init=acc)
    return acc + b_a


@dataclass
class SoftmaxState:
    """Running max, running sum and unnormalised accumulator for one query tile."""

    m: np.ndarray
    l: np.ndarray
    acc: np.ndarray

    @classmethod
    def empty(cls, lead_shape, rows: int, width: int, dtype):
        return cls(np.full(lead_shape + (rows, 1), -np.inf, dtype=dtype),
                   np.zeros(lead_shape + (rows, 1), dtype=dtype),
                   np.zeros(lead_shape + (rows, width), dtype=dtype))

    def update(self, scores, v_tile) -> None:
        m_new = np.maximum(self.m, scores.max(axis=-1, keepdims=True))
        alpha = np.exp(self.m - m_new)
        e = np.exp(scores - m_new)
        self.l = self.l * alpha + e.sum(axis=-1, keepdims=True)
        self.acc = gemm(e, v_tile, c_init=self.acc * alpha)
        self.m = m_new

    def output(self):
        return self.acc / self.l


def _head_layout(fset: AttentionFactorSet, factors: ProjectedFactors, name: str, dtype):
    """Per-head views: P (B x H x M x r), V_a slice (H x r x d_h), bias (H x 1 x d_h)."""
    units = getattr(fset, name)
    ps = getattr(factors, "p_" + name)
    p_heads, v_heads, b_heads = [], [], []
    for h in range(fset.heads):
        u, cols = fset.head_slice(h)
        p_heads.append(ps[u])
        v_heads.append(units[u].v[:, cols])
        b_heads.append(units[u].bias[cols])
    p = np.stack(p_heads, axis=1)
    v = np.stack(v_heads).astype(dtype, copy=False)
    b = np.stack(b_heads)[:, None, :].astype(dtype, copy=False)
    return p, v, b


def _stream(load_q, load_k, load_v, seqlen: int, block_m: int, head_dim: int, out):
    """Online-softmax loop over query tiles (outer) and key/value tiles (inner).

    ``load_*`` map a row slice to a ``B x H x rows x d_h`` tile; ``out`` is the
    ``B x M x H x d_h`` view of the layer output.
    """
    scale = 1.0 / math.sqrt(head_dim)
    for i0 in range(0, seqlen, block_m):
        rows = slice(i0, min(i0 + block_m, seqlen))
        q = load_q(rows)
        scale_t = q.dtype.type(scale)
        state = SoftmaxState.empty(q.shape[:-2], q.shape[-2], head_dim, q.dtype)
        for j0 in range(0, seqlen, block_m):
            cols = slice(j0, min(j0 + block_m, seqlen))
            k = load_k(cols)
            v = load_v(cols)
            scores = gemm(q, np.swapaxes(k, -1, -2)) * scale_t
            state.update(scores, v)
        out[:, rows] = np.swapaxes(state.output(), 1, 2)


def flash_svd_attention(factors: ProjectedFactors, fset: AttentionFactorSet, plan: TilePlan,
                        meter: MemoryMeter):
    """Streaming attention over low-rank factors; returns ``B x M x D_A`` (excluded)."""
    b, m, r = factors.shape
    dh = fset.head_dim
    if r != fset.rank:
        raise ShapeError(f"projected rank {r} != factor set rank {fset.rank}")
    validate_tile_plan(plan, "attention", {"head_dim": dh})
    dtype = factors.p_q[0].dtype
    with meter.region("flash_svd_attention"):
        meter.resident([f.v for name in "qkv" for f in getattr(fset, name)], "attn.V")
        pq, vq, bq = _head_layout(fset, factors, "q", dtype)
        pk, vk, bk = _head_layout(fset, factors, "k", dtype)
        pv, vv, bv = _head_layout(fset, factors, "v", dtype)
        out = np.empty((b, m, fset.d_model), dtype=dtype)
        meter.alloc("attn.out", EXCLUDED, nbytes(out))
        _stream(lambda s: load_tile(pq[:, :, s], vq, bq, plan.block_r),
                lambda s: load_tile(pk[:, :, s], vk, bk, plan.block_r),
                lambda s: load_tile(pv[:, :, s], vv, bv, plan.block_r),
                m, plan.block_m, dh, out.reshape(b, m, fset.heads, dh))
    return out


def flash_svd_attention_forward(x, fset: AttentionFactorSet, plan: TilePlan, meter: MemoryMeter):
    """Project, stream and release: the full low-rank attention core."""
    with meter.region("flash_svd_attention_forward"):
        factors = project_factors(x, fset, meter)
        try:
            out = flash_svd_attention(factors, fset, plan, meter)
        finally:
            factors.release(meter)
    return out


def _split_heads(t, heads):
    b, m, d = t.shape
    return np.swapaxes(t.reshape(b, m, heads, d // heads), 1, 2)


def dense_attention_oracle(q, k, v, heads: int, meter: MemoryMeter):
    """Materialised softmax attention on full Q, K, V (``B x M x D_A`` each).

    The meter sees Q, K, V and the ``B x H x M x M`` score matrix as
    transient buffers.  Passing float64 arrays gives the 64-bit reference.
    """
    q, k, v = (np.asarray(t) for t in (q, k, v))
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"Q/K/V shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    b, m, d = q.shape
    if d % heads:
        raise ShapeError(f"heads={heads} must divide width {d}")
    dh = d // heads
    with meter.region("dense_attention"):
        qkv = [meter.alloc(f"attn.{n}", TRANSIENT, nbytes(q)) for n in "QKV"]
        s_h = meter.alloc("attn.scores", TRANSIENT, nbytes((b, heads, m, m)))
        qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
        scores = gemm(qh, np.swapaxes(kh, -1, -2)) * q.dtype.type(1.0 / math.sqrt(dh))
        probs = softmax_row(scores)
        out = np.ascontiguousarray(np.swapaxes(gemm(probs, vh), 1, 2)).reshape(b, m, d)
        meter.alloc("attn.out", EXCLUDED, nbytes(out))
        meter.free(s_h)
        for h in qkv:
            meter.free(h)
    return out


def attention_weights(q, k, heads: int):
    """Row-stochastic attention weights ``B x H x M x M`` (unmetered helper)."""
    qh, kh = _split_heads(np.asarray(q), heads), _split_heads(np.asarray(k), heads)
    scores = gemm(qh, np.swapaxes(kh, -1, -2)) * q.dtype.type(1.0 / math.sqrt(q.shape[-1] // heads))
    return softmax_row(scores)


def dense_attention(x, weights: dict, heads: int, meter: MemoryMeter):
    """Dense projections then the dense oracle.  ``weights[a] = (W_a, b_a)``."""
    x = np.asarray(x)
    _check_input(x, weights["q"][0].shape[0])
    meter.resident([weights[a][0] for a in "qkv"], "attn.W")
    q, k, v = (gemm(x, weights[a][0].astype(x.dtype, copy=False)) + weights[a][1] for a in "qkv")
    return dense_attention_oracle(q, k, v, heads, meter)


def reconstruct_qkv(x, fset: AttentionFactorSet, block_m: int = 16):
    """``(X U_a) V_a + b_a`` for every unit, with the rank-space product kept tile-local."""
    x = np.asarray(x)
    _check_input(x, fset.d_model)
    b, m, d = x.shape
    out = []
    for name in "qkv":
        full = np.empty((b, m, d), dtype=x.dtype)
        width = d // fset.units
        for g, f in enumerate(getattr(fset, name)):
            u, vf = f.u.astype(x.dtype, copy=False), f.v.astype(x.dtype, copy=False)
            for i0 in range(0, m, block_m):
                rows = slice(i0, min(i0 + block_m, m))
                full[:, rows, g * width:(g + 1) * width] = gemm(gemm(x[:, rows], u), vf) + f.bias
        out.append(full)
    return out


def naive_lowrank_attention(x, fset: AttentionFactorSet, meter: MemoryMeter, block_m: int = 16):
    """Rebuild full Q, K, V from the factors, then run dense attention.

    Same peak as the dense path: low-rank weights alone do not shrink the
    activation footprint.
    """
    with meter.region("naive_lowrank_attention"):
        meter.resident([f.v for name in "qkv" for f in getattr(fset, name)], "attn.V")
        q, k, v = reconstruct_qkv(x, fset, block_m)
        return dense_attention_oracle(q, k, v, fset.heads, meter)


def flash_attention_dense_qkv(x, weights: dict, heads: int, plan: TilePlan, meter: MemoryMeter):
    """Baseline: dense Q, K, V materialised off-chip, streamed with online softmax."""
    x = np.asarray(x)
    b, m, d = x.shape
    dh = d // heads
    validate_tile_plan(plan, "attention", {"head_dim": dh})
    with meter.region("flash_attention_dense_qkv"):
        handles = [meter.alloc(f"attn.{a}", TRANSIENT, nbytes(x)) for a in "QKV"]
        q, k, v = (_split_heads(gemm(x, weights[a][0].astype(x.dtype, copy=False)) + weights[a][1], heads)
                   for a in "qkv")
        out = np.empty_like(x)
        meter.alloc("attn.out", EXCLUDED, nbytes(out))
        _stream(lambda s: q[:, :, s], lambda s: k[:, :, s], lambda s: v[:, :, s],
                m, plan.block_m, dh, out.reshape(b, m, heads, dh))
        for h in handles:
            meter.free(h)
    return out


def attention_output_projection(o, proj: FactorizedLinear, meter: MemoryMeter):
    """``(O U) V + b`` through an off-chip ``B x M x r`` rank-space buffer."""
    o = np.asarray(o)
    if o.ndim != 3 or o.shape[-1] != proj.d_in:
        raise ShapeError(f"output projection expects (B, M, {proj.d_in}), got {o.shape}")
    b, m, _ = o.shape
    with meter.region("attention_output_projection"):
        meter.resident([proj.u, proj.v], "attn.o")
        h = meter.alloc("attn.o.rank", TRANSIENT, nbytes((b, m, proj.rank)))
        t = gemm(o, proj.u.astype(o.dtype, copy=False))
        out = gemm(t, proj.v.astype(o.dtype, copy=False)) + proj.bias
        meter.alloc("attn.o.out", EXCLUDED, nbytes(out))
        meter.free(h)
    return out
