"""Closed-form analytics: thresholds, FLOPs, I/O volume, roofline and memory deltas.

Byte formulas use the same counting rules as the meter (4 bytes per element,
explicit q/k/v factor of 3), so tests can compare them exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError, RankError
from .memtier import BYTES_PER_ELEMENT, TilePlan

E = BYTES_PER_ELEMENT

MODES = ("dense", "naive", "flash-v1", "flash-v2")
_MODE_ALIASES = {
    "dense": "dense", "naive": "naive", "naivelowrank": "naive", "naive-lowrank": "naive",
    "flash-v1": "flash-v1", "flashv1": "flash-v1", "v1": "flash-v1",
    "flash-v2": "flash-v2", "flashv2": "flash-v2", "v2": "flash-v2",
}


def normalize_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode.lower().replace("_", "-")]
    except KeyError:
        raise ConfigError(f"unknown execution mode {mode!r}; choose from {MODES}") from None


@dataclass(frozen=True)
class Geometry:
    """Problem size.  ``groups=None`` means one factor unit per head."""

    batch: int
    seqlen: int
    d_model: int
    d_ff: int
    heads: int
    rank: int
    groups: int | None = None
    layers: int = 1

    def __post_init__(self):
        for name in ("batch", "seqlen", "d_model", "d_ff", "heads", "rank", "layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"geometry field {name} must be positive")
        if self.d_model % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d_model={self.d_model}")
        if self.groups is not None and (self.groups < 1 or self.heads % self.groups):
            raise ConfigError(f"groups={self.groups} must divide heads={self.heads}")

    @property
    def bm(self) -> int:
        return self.batch * self.seqlen

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def units(self) -> int:
        return self.heads if self.groups is None else self.groups

    def dims(self) -> dict:
        """Keyword form accepted by ``memtier.expected_bytes``."""
        return {"batch": self.batch, "seqlen": self.seqlen, "d_model": self.d_model,
                "d_ff": self.d_ff, "heads": self.heads, "rank": self.rank,
                "groups": self.units}


@dataclass(frozen=True)
class HardwareModel:
    peak_flops: float
    beta: float  # bytes per second
    bytes_per_element: int = 4

    def __post_init__(self):
        if not (self.peak_flops > 0 and self.beta > 0 and self.bytes_per_element > 0):
            raise ConfigError("hardware rates must be positive")


def memory_threshold(geom: Geometry, mode: str) -> Fraction:
    """Largest rank (exclusive) at which factor storage beats dense Q/K/V."""
    bm, d = geom.bm, geom.d_model
    units = {"single": 1, "multi": geom.heads, "grouped": geom.units}.get(mode)
    if units is None:
        raise ConfigError(f"unknown threshold mode {mode!r}")
    return Fraction(bm * d, units * bm + d)


# -- FLOPs ---------------------------------------------------------------------------

def _attention_core_flops(g: Geometry) -> int:
    # scores Q K^T and weights @ V, every head, at head width
    return 4 * g.bm * g.seqlen * g.d_model


def flops_exact(geom: Geometry, mode: str, plan: TilePlan | None = None) -> int:
    """GEMM FLOPs (2mkn each) of one encoder layer under ``mode``.

    Matches the kernels' actual schedule, including rank padding to ``B_R``
    and the per-query-tile recomputation of K/V tiles in the flash kernel.
    Non-GEMM work (softmax, activation, bias, layer norm) is not counted.
    """
    mode = normalize_mode(mode)
    plan = plan or TilePlan()
    g = geom
    bm, d, f, r = g.bm, g.d_model, g.d_ff, g.rank
    if mode == "dense":
        return 2 * bm * d * d * 4 + _attention_core_flops(g) + 2 * 2 * bm * d * f
    project = 3 * g.units * 2 * bm * d * r
    out_proj = 2 * bm * d * r * 2
    ffn = 2 * bm * r * (d + f + f + d)
    if mode == "naive":
        rebuild = 3 * 2 * bm * r * d
        return project + rebuild + _attention_core_flops(g) + out_proj + ffn
    rp = -(-r // plan.block_r) * plan.block_r
    n_q = -(-g.seqlen // plan.block_m)
    rebuild = 2 * bm * rp * d + 2 * 2 * n_q * bm * rp * d
    return project + rebuild + _attention_core_flops(g) + out_proj + ffn


def speedup_paper(d_model: int, d_ff: int, rank: int) -> Fraction:
    """Asymptotic dense/low-rank FLOP ratio ``(D_A^2 + D_A D_F) / (r D_A + r^2 + r D_F)``."""
    return Fraction(d_model * d_model + d_model * d_ff, rank * d_model + rank * rank + rank * d_ff)


# -- I/O and roofline --------------------------------------------------------------------

def io_bytes(geom: Geometry, mode: str) -> tuple[int, int]:
    """(bytes read, bytes written) of one layer's activations and factors."""
    bm, d, f, r = geom.bm, geom.d_model, geom.d_ff, geom.rank
    out = E * 2 * bm * d
    if mode == "dense":
        return E * (3 * bm * d + 2 * bm * f), out
    if mode in ("lowrank", "low-rank", "flash"):
        return E * (4 * bm * r + 3 * r * d + 2 * r * f), out
    raise ConfigError(f"unknown io mode {mode!r}")


def roofline_latency(flops: float, bytes_total: float, hw: HardwareModel) -> float:
    """Lower bound ``max(flops / peak, bytes / beta)`` in seconds."""
    if flops < 0 or bytes_total < 0:
        raise ConfigError("flops and bytes must be nonnegative")
    return max(flops / hw.peak_flops, bytes_total / hw.beta)


# -- memory -----------------------------------------------------------------------------

def delta_memory_per_rank(geom: Geometry, module_id: str) -> int:
    """Bytes saved per unit rank decrease, by the meter's counting rules."""
    bm, d, f = geom.bm, geom.d_model, geom.d_ff
    if module_id == "attn_single":
        return E * 3 * (bm + d)
    if module_id == "attn_multi":
        return E * 3 * (geom.heads * bm + d)
    if module_id == "attn_grouped":
        return E * 3 * (geom.units * bm + d)
    if module_id == "ffn_v1":
        return E * (2 * bm + d + 2 * f + d)
    if module_id == "ffn_v2":
        return E * (d + 2 * f + d)
    raise ConfigError(f"unknown module id {module_id!r}")


def decoder_memory(geom: Geometry, phase: str, t: int | None = None) -> int:
    """KV-cache plus streaming-buffer bytes for ``prefill`` or ``decode`` step ``t``."""
    b, m, r, n_layers = geom.batch, geom.seqlen, geom.rank, geom.layers
    if phase == "prefill":
        return E * (2 * n_layers * b * m * r + 3 * b * m * r + 2 * b * m * r)
    if phase == "decode":
        if t is None or not 1 <= t <= m:
            raise RankError(f"decode step must satisfy 1 <= t <= {m}, got {t}")
        return E * (2 * n_layers * b * t * r + b * (t - 1) * r + 3 * b * r + 2 * b * r)
    raise ConfigError(f"unknown decoder phase {phase!r}")


def ffn_dominance_check(geom: Geometry) -> tuple[bool, Fraction]:
    """Does the dense FFN activation outweigh the low-rank attention footprint?"""
    bm, d, f, r = geom.bm, geom.d_model, geom.d_ff, geom.rank
    ratio = Fraction(bm * f, r * (bm + d))
    return ratio > 1, ratio


def ffn_memory_ratio(geom: Geometry) -> Fraction:
    """(V1 transient + V1 factor weights) / dense FFN transient."""
    bm, d, f, r = geom.bm, geom.d_model, geom.d_ff, geom.rank
    return Fraction(r * (2 * bm + 2 * d + 2 * f), bm * f)


def layer_transient_bytes(geom: Geometry, mode: str) -> int:
    """Peak transient bytes of a full encoder layer (max over its sublayers)."""
    mode = normalize_mode(mode)
    bm, d, f, r, h, m = geom.bm, geom.d_model, geom.d_ff, geom.rank, geom.heads, geom.seqlen
    dense_attn = E * (3 * bm * d + geom.batch * h * m * m)
    if mode in ("dense", "naive"):
        return max(dense_attn, E * bm * r if mode == "naive" else 0, E * bm * f)
    attn = E * 3 * geom.units * bm * r
    ffn = E * 2 * bm * r if mode == "flash-v1" else 0
    return max(attn, E * bm * r, ffn)


def layer_persistent_bytes(geom: Geometry, mode: str) -> int:
    """Weights the layer registers on the meter under ``mode``."""
    mode = normalize_mode(mode)
    d, f, r = geom.d_model, geom.d_ff, geom.rank
    if mode == "dense":
        return E * (4 * d * d + 2 * d * f)
    return E * r * (3 * d + 2 * d + 2 * d + 2 * f)
