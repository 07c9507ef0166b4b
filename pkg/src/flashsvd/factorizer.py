"""Dense weights -> low-rank factor sets, plus parameter-count analytics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, InfeasibleError, RankError, ShapeError
from .tensor import svd_many, truncate_even_split

ATTENTION_MODES = ("single", "multi", "grouped")


@dataclass(frozen=True)
class FactorizedLinear:
    """``x -> x @ u @ v + bias`` with ``u: d_in x r`` and ``v: r x d_out``."""

    u: np.ndarray
    v: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2 or self.u.shape[1] != self.v.shape[0]:
            raise ShapeError(f"factor shapes disagree: {self.u.shape} / {self.v.shape}")
        if self.bias.shape != (self.v.shape[1],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.v.shape[1]},)")
        if self.rank > min(self.d_in, self.d_out):
            raise RankError(f"rank {self.rank} exceeds min({self.d_in}, {self.d_out})")

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def d_in(self) -> int:
        return self.u.shape[0]

    @property
    def d_out(self) -> int:
        return self.v.shape[1]

    def weight(self) -> np.ndarray:
        """Reconstructed dense weight ``u @ v`` (float64 product, input dtype)."""
        return (self.u.astype(np.float64) @ self.v.astype(np.float64)).astype(self.u.dtype)


@dataclass(frozen=True)
class AttentionFactorSet:
    """Per-unit q/k/v factors; a unit is the full matrix, one head, or one group.

    ``units`` is 1 for single-head, ``heads`` for multi-head and ``groups``
    for grouped mode.  Unit ``g`` owns output columns
    ``[g * D_A / units, (g + 1) * D_A / units)`` of each projection.
    """

    mode: str
    heads: int
    d_model: int
    q: list
    k: list
    v: list
    output_proj: FactorizedLinear | None = None
    units: int = field(default=0)

    def __post_init__(self):
        if self.mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention mode {self.mode!r}")
        n = len(self.q)
        if not (len(self.k) == len(self.v) == n) or n == 0:
            raise ShapeError("q/k/v unit lists must be nonempty and equally long")
        object.__setattr__(self, "units", n)
        _check_divisibility(self.mode, self.d_model, self.heads, n)
        width = self.d_model // n
        ranks = {f.rank for f in (*self.q, *self.k, *self.v)}
        if len(ranks) != 1:
            raise RankError(f"all units must share one rank, got {sorted(ranks)}")
        for f in (*self.q, *self.k, *self.v):
            if f.d_in != self.d_model or f.d_out != width:
                raise ShapeError(f"unit factor maps {f.d_in}->{f.d_out}, expected {self.d_model}->{width}")

    @property
    def rank(self) -> int:
        return self.q[0].rank

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def heads_per_unit(self) -> int:
        return self.heads // self.units

    def head_slice(self, h: int):
        """(unit index, column slice within that unit) for head ``h``."""
        u, j = divmod(h, self.heads_per_unit)
        d = self.head_dim
        return u, slice(j * d, (j + 1) * d)

    def dense_weights(self):
        """Reconstructed (W, b) for q, k, v as full D_A x D_A matrices."""
        out = {}
        for name in "qkv":
            units = getattr(self, name)
            w = np.concatenate([f.weight() for f in units], axis=1)
            b = np.concatenate([f.bias for f in units])
            out[name] = (w, b)
        return out


def _check_divisibility(mode, d_model, heads, units):
    if heads < 1 or d_model % heads:
        raise ConfigError(f"heads={heads} must divide d_model={d_model}")
    expected = {"single": 1, "multi": heads}.get(mode, units)
    if units != expected:
        raise ConfigError(f"{mode} mode expects {expected} units, got {units}")
    if mode == "grouped" and (units < 1 or heads % units):
        raise ConfigError(f"groups={units} must divide heads={heads}")


def factorize_linear(w, bias, rank: int, dtype=np.float32) -> FactorizedLinear:
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"weight must be a matrix, got {w.shape}")
    if not 1 <= rank <= min(w.shape):
        raise RankError(f"rank must be in [1, {min(w.shape)}], got {rank}")
    return factorize_many([w], [bias], rank, dtype)[0]


def factorize_many(ws, biases, rank: int, dtype=np.float32) -> list:
    """``factorize_linear`` over same-shape blocks, sharing one stacked SVD."""
    ws = [np.asarray(w) for w in ws]
    out = []
    for w, b, res in zip(ws, biases, svd_many(ws, dtype=dtype)):
        if not 1 <= rank <= min(w.shape):
            raise RankError(f"rank must be in [1, {min(w.shape)}], got {rank}")
        b = np.zeros(w.shape[1]) if b is None else np.asarray(b)
        pair = truncate_even_split(res, rank)
        out.append(FactorizedLinear(pair.u, pair.v, b.astype(dtype)))
    return out


def unit_count(mode: str, heads: int, groups: int | None = None) -> int:
    if mode == "single":
        return 1
    if mode == "multi":
        return heads
    if mode == "grouped":
        if groups is None:
            raise ConfigError("grouped mode needs a group count")
        return groups
    raise ConfigError(f"unknown attention mode {mode!r}")


def factorize_attention(wq, wk, wv, biases, mode: str, rank: int, heads: int,
                        groups: int | None = None, w_out=None, b_out=None,
                        out_rank: int | None = None, dtype=np.float32) -> AttentionFactorSet:
    """Factorise q/k/v per unit (column blocks) and optionally the output projection."""
    wq = np.asarray(wq)
    d_model = wq.shape[0]
    units = unit_count(mode, heads, groups)
    _check_divisibility(mode, d_model, heads, units)
    width = d_model // units
    if not 1 <= rank <= width:
        raise RankError(f"rank {rank} out of range [1, {width}] for {mode} mode")
    blocks, block_biases = [], []
    for name, w, b in zip("qkv", (wq, wk, wv), biases):
        w = np.asarray(w)
        if w.shape != (d_model, d_model):
            raise ShapeError(f"W_{name} has shape {w.shape}, expected {(d_model, d_model)}")
        b = np.zeros(d_model) if b is None else np.asarray(b)
        for g in range(units):
            blocks.append(w[:, g * width:(g + 1) * width])
            block_biases.append(b[g * width:(g + 1) * width])
    factors = factorize_many(blocks, block_biases, rank, dtype)
    sets = {name: factors[i * units:(i + 1) * units] for i, name in enumerate("qkv")}
    proj = None
    if w_out is not None:
        proj = factorize_linear(w_out, b_out, rank if out_rank is None else out_rank, dtype)
    return AttentionFactorSet(mode, heads, d_model, sets["q"], sets["k"], sets["v"], proj)


# -- parameter analytics ---------------------------------------------------------

def attention_param_count(mode: str, d_model: int, heads: int, rank: int,
                          groups: int | None = None) -> int:
    """Weight count of ONE attention projection matrix (biases excluded)."""
    if mode == "dense":
        return d_model * d_model
    units = unit_count(mode, heads, groups)
    _check_divisibility(mode, d_model, heads, units)
    return units * rank * (d_model + d_model // units)


def param_count(obj) -> int:
    """Actual factor weight count: one FactorizedLinear, or q+k+v of a factor set."""
    if isinstance(obj, FactorizedLinear):
        return obj.u.size + obj.v.size
    if isinstance(obj, AttentionFactorSet):
        return sum(f.u.size + f.v.size for f in (*obj.q, *obj.k, *obj.v))
    if isinstance(obj, np.ndarray):
        return obj.size
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


def param_threshold(mode: str, d_model: int, heads: int = 1, groups: int | None = None) -> Fraction:
    """Rank below which factors hold fewer weights than the dense matrix."""
    units = unit_count(mode, heads, groups)
    return Fraction(d_model, units + 1)


def rank_loss_for_budget(d_model: int, heads: int, budget_params: int, mode: str,
                         groups: int | None = None) -> float:
    """``1 - r/r_max`` for the largest rank whose q/k/v weights fit ``budget_params``."""
    units = unit_count(mode, heads, groups)
    _check_divisibility(mode, d_model, heads, units)
    width = d_model // units
    per_rank = 3 * units * (d_model + width)
    rank = min(math.floor(budget_params / per_rank), width)
    if rank < 1:
        raise InfeasibleError(f"budget {budget_params} cannot hold even rank 1 ({per_rank} params)")
    return 1.0 - rank / width
