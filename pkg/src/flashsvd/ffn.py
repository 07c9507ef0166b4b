"""Low-rank FFN kernels (rank-space streaming V1, fully fused V2) and baselines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankError, ShapeError
from .factorizer import FactorizedLinear, factorize_linear
from .memtier import EXCLUDED, TRANSIENT, MemoryMeter, TilePlan, nbytes, validate_tile_plan
from .tensor import gemm, get_activation


@dataclass(frozen=True)
class FfnFactors:
    up: FactorizedLinear    # D_A -> D_F
    down: FactorizedLinear  # D_F -> D_A
    activation: str = "gelu"

    def __post_init__(self):
        if self.up.d_out != self.down.d_in or self.up.d_in != self.down.d_out:
            raise ShapeError(f"up {self.up.d_in}->{self.up.d_out} and down "
                             f"{self.down.d_in}->{self.down.d_out} do not chain")
        get_activation(self.activation)

    @property
    def d_model(self) -> int:
        return self.up.d_in

    @property
    def d_ff(self) -> int:
        return self.up.d_out

    @property
    def rank(self) -> int:
        if self.up.rank != self.down.rank:
            raise RankError(f"kernels need one shared rank, got {self.up.rank}/{self.down.rank}")
        return self.up.rank

    def weights(self):
        return [self.up.u, self.up.v, self.down.u, self.down.v]


@dataclass(frozen=True)
class DenseFfn:
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    activation: str = "gelu"

    @property
    def d_model(self) -> int:
        return self.w_in.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w_in.shape[1]


def factorize_ffn(dense: DenseFfn, rank: int, rank_down: int | None = None) -> FfnFactors:
    up = factorize_linear(dense.w_in, dense.b_in, rank)
    down = factorize_linear(dense.w_out, dense.b_out, rank if rank_down is None else rank_down)
    return FfnFactors(up, down, dense.activation)


def reconstruct_ffn(f: FfnFactors) -> DenseFfn:
    return DenseFfn(f.up.weight(), f.up.bias, f.down.weight(), f.down.bias, f.activation)


def _prep(x, f: FfnFactors):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[-1] != f.d_model:
        raise ShapeError(f"expected input of shape (B, M, {f.d_model}), got {x.shape}")
    dt = x.dtype
    cast = [w.astype(dt, copy=False) for w in f.weights()]
    return x, cast, f.up.bias.astype(dt, copy=False), f.down.bias.astype(dt, copy=False)


def _feature_blocks(d_ff: int, block_df: int):
    return [slice(d0, min(d0 + block_df, d_ff)) for d0 in range(0, d_ff, block_df)]


def _stream_features(p_tile, v_i, b_i, u_o, phi, block_df, z_tile=None):
    # Y lives only on-chip: one B x B_M x B_DF block at a time
    for d in _feature_blocks(v_i.shape[1], block_df):
        y = phi(gemm(p_tile, v_i[:, d]) + b_i[d])
        z_tile = gemm(y, u_o[d], c_init=z_tile)
    return z_tile


def ffn_v1(x, f: FfnFactors, plan: TilePlan, meter: MemoryMeter):
    """P = X U_i off-chip, stream the FFN width per sequence tile into Z, then Z V_o."""
    x, (u_i, v_i, u_o, v_o), b_i, b_o = _prep(x, f)
    b, m, _ = x.shape
    r = f.rank
    validate_tile_plan(plan, "ffn_v1", {"batch": b, "rank": r})
    phi = get_activation(f.activation)
    with meter.region("ffn_v1"):
        meter.resident(f.weights(), "ffn")
        hp = meter.alloc("ffn.P", TRANSIENT, nbytes((b, m, r)))
        p = gemm(x, u_i)
        hz = meter.alloc("ffn.Z", TRANSIENT, nbytes((b, m, r)))
        z = np.zeros((b, m, r), dtype=x.dtype)
        for i0 in range(0, m, plan.block_m):
            rows = slice(i0, min(i0 + plan.block_m, m))
            z[:, rows] = _stream_features(p[:, rows], v_i, b_i, u_o, phi, plan.block_df)
        out = gemm(z, v_o) + b_o
        meter.alloc("ffn.out", EXCLUDED, nbytes(out))
        meter.free(hz)
        meter.free(hp)
    return out


def ffn_v2(x, f: FfnFactors, plan: TilePlan, meter: MemoryMeter):
    """Fully fused: every intermediate stays tile-local; only X and O touch off-chip."""
    x, (u_i, v_i, u_o, v_o), b_i, b_o = _prep(x, f)
    b, m, d_model = x.shape
    validate_tile_plan(plan, "ffn_v2", {"batch": b, "rank": f.rank})
    phi = get_activation(f.activation)
    with meter.region("ffn_v2"):
        meter.resident(f.weights(), "ffn")
        out = np.empty((b, m, d_model), dtype=x.dtype)
        meter.alloc("ffn.out", EXCLUDED, nbytes(out))
        for i0 in range(0, m, plan.block_m):
            rows = slice(i0, min(i0 + plan.block_m, m))
            p_tile = gemm(x[:, rows], u_i)
            z_tile = _stream_features(p_tile, v_i, b_i, u_o, phi, plan.block_df)
            out[:, rows] = gemm(z_tile, v_o) + b_o
    return out


def ffn_dense_oracle(x, w_in, b_in, w_out, b_out, activation: str, meter: MemoryMeter):
    """Materialise ``Y = phi(X W_i + b_i)`` (``B x M x D_F``) then project down."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[-1] != w_in.shape[0] or w_in.shape[1] != w_out.shape[0]:
        raise ShapeError(f"dense FFN shapes disagree: {x.shape}, {w_in.shape}, {w_out.shape}")
    phi = get_activation(activation)
    dt = x.dtype
    b, m, _ = x.shape
    with meter.region("ffn_dense"):
        hy = meter.alloc("ffn.Y", TRANSIENT, nbytes((b, m, w_in.shape[1])))
        y = phi(gemm(x, w_in.astype(dt, copy=False)) + b_in.astype(dt, copy=False))
        out = gemm(y, w_out.astype(dt, copy=False)) + b_out.astype(dt, copy=False)
        meter.alloc("ffn.out", EXCLUDED, nbytes(out))
        meter.free(hy)
    return out


def ffn_dense(x, dense: DenseFfn, meter: MemoryMeter):
    meter.resident([dense.w_in, dense.w_out], "ffn.W")
    return ffn_dense_oracle(x, dense.w_in, dense.b_in, dense.w_out, dense.b_out, dense.activation, meter)


def ffn_naive_lowrank(x, f: FfnFactors, meter: MemoryMeter, block_m: int = 16):
    """Low-rank weights with the full ``B x M x D_F`` activation materialised.

    The rank-space products on either side are formed per sequence tile, so
    the only off-chip intermediate is Y: the peak equals the dense FFN's.
    """
    x, (u_i, v_i, u_o, v_o), b_i, b_o = _prep(x, f)
    b, m, d_model = x.shape
    phi = get_activation(f.activation)
    with meter.region("ffn_naive_lowrank"):
        meter.resident(f.weights(), "ffn")
        hy = meter.alloc("ffn.Y", TRANSIENT, nbytes((b, m, f.d_ff)))
        y = np.empty((b, m, f.d_ff), dtype=x.dtype)
        tiles = [slice(i0, min(i0 + block_m, m)) for i0 in range(0, m, block_m)]
        for rows in tiles:
            y[:, rows] = phi(gemm(gemm(x[:, rows], u_i), v_i) + b_i)
        out = np.empty((b, m, d_model), dtype=x.dtype)
        meter.alloc("ffn.out", EXCLUDED, nbytes(out))
        for rows in tiles:
            out[:, rows] = gemm(gemm(y[:, rows], u_o), v_o) + b_o
        meter.free(hy)
    return out
