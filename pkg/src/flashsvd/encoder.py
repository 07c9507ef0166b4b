"""Encoder layers in four execution modes, the FSVD1 container and synthetic models."""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attention as attn
from . import ffn as ffn_mod
from .errors import ConfigError, FormatError, ShapeError
from .factorizer import AttentionFactorSet, FactorizedLinear, factorize_attention
from .ffn import DenseFfn, FfnFactors
from .memtier import EXCLUDED, MemoryMeter, TilePlan, nbytes
from .planner import MODES, normalize_mode
from .tensor import gemm, layer_norm


@dataclass(frozen=True)
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-12


@dataclass(frozen=True)
class DenseAttention:
    """Dense q/k/v/o weights ``W: D_A x D_A`` with biases."""

    heads: int
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    def qkv(self) -> dict:
        return {"q": (self.wq, self.bq), "k": (self.wk, self.bk), "v": (self.wv, self.bv)}


@dataclass(frozen=True)
class EncoderLayer:
    attention: AttentionFactorSet | DenseAttention
    ffn: FfnFactors | DenseFfn
    ln1: LayerNormParams
    ln2: LayerNormParams
    pre_ln: bool = False

    def __post_init__(self):
        d = self.attention.d_model
        if self.ffn.d_model != d or self.ln1.gamma.shape != (d,) or self.ln2.gamma.shape != (d,):
            raise ShapeError("attention, FFN and layer-norm widths disagree")
        if isinstance(self.attention, AttentionFactorSet) and self.attention.output_proj is None:
            raise ConfigError("factorized attention needs an output projection")

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def is_factorized(self) -> bool:
        return isinstance(self.attention, AttentionFactorSet)


def densify(layer: EncoderLayer) -> EncoderLayer:
    """Same layer with every factor pair multiplied back into a dense matrix."""
    a = layer.attention
    if isinstance(a, AttentionFactorSet):
        w = a.dense_weights()
        o = a.output_proj
        a = DenseAttention(a.heads, *w["q"], *w["k"], *w["v"], o.weight(), o.bias)
    f = layer.ffn
    if isinstance(f, FfnFactors):
        f = ffn_mod.reconstruct_ffn(f)
    return replace(layer, attention=a, ffn=f)


# -- execution ---------------------------------------------------------------------

def _attention_sublayer(x, layer: EncoderLayer, mode: str, plan: TilePlan, meter: MemoryMeter):
    a = layer.attention
    if mode == "dense":
        o = attn.dense_attention(x, a.qkv(), a.heads, meter)
        meter.resident([a.wo], "attn.o.W")
        out = gemm(o, a.wo.astype(x.dtype, copy=False)) + a.bo
        meter.alloc("attn.o.out", EXCLUDED, nbytes(out))
        return out
    if mode == "naive":
        o = attn.naive_lowrank_attention(x, a, meter, plan.block_m)
    else:
        o = attn.flash_svd_attention_forward(x, a, plan, meter)
    return attn.attention_output_projection(o, a.output_proj, meter)


def _ffn_sublayer(x, layer: EncoderLayer, mode: str, plan: TilePlan, meter: MemoryMeter):
    f = layer.ffn
    if mode == "dense":
        return ffn_mod.ffn_dense(x, f, meter)
    if mode == "naive":
        return ffn_mod.ffn_naive_lowrank(x, f, meter, plan.block_m)
    if mode == "flash-v1":
        return ffn_mod.ffn_v1(x, f, plan, meter)
    return ffn_mod.ffn_v2(x, f, plan, meter)


def _ln(x, p: LayerNormParams):
    return layer_norm(x, p.gamma.astype(x.dtype, copy=False), p.beta.astype(x.dtype, copy=False), p.eps)


def run_layer(x, layer: EncoderLayer, mode: str = "flash-v1", plan: TilePlan | None = None,
              meter: MemoryMeter | None = None):
    """One encoder layer; post-LN unless ``layer.pre_ln``.

    ``dense`` runs on dense weights (reconstructing factorized layers first);
    the other modes need a factorized layer.
    """
    mode = normalize_mode(mode)
    plan = plan or TilePlan()
    meter = meter or MemoryMeter()
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[-1] != layer.d_model:
        raise ShapeError(f"expected input of shape (B, M, {layer.d_model}), got {x.shape}")
    if mode == "dense":
        layer = densify(layer) if layer.is_factorized else layer
    elif not layer.is_factorized:
        raise ConfigError(f"mode {mode!r} needs a factorized layer")

    def sub(fn, inp, name):
        with meter.region(name):
            return fn(inp, layer, mode, plan, meter)

    with meter.region("layer"):
        if layer.pre_ln:
            h = x + sub(_attention_sublayer, _ln(x, layer.ln1), "attention")
            meter.alloc("layer.h", EXCLUDED, nbytes(h))
            out = h + sub(_ffn_sublayer, _ln(h, layer.ln2), "ffn")
        else:
            h = _ln(x + sub(_attention_sublayer, x, "attention"), layer.ln1)
            meter.alloc("layer.h", EXCLUDED, nbytes(h))
            out = _ln(h + sub(_ffn_sublayer, h, "ffn"), layer.ln2)
    return out


def run_model(x, layers, mode: str = "flash-v1", plan: TilePlan | None = None,
              meter: MemoryMeter | None = None):
    meter = meter or MemoryMeter()
    for layer in layers:
        x = run_layer(x, layer, mode, plan, meter)
    return np.asarray(x)


# -- FSVD1 container -----------------------------------------------------------------

MAGIC = b"FSVD"
VERSION = 1
_DTYPE_F32 = 0


def write_tensors(path, tensors: dict) -> None:
    """Write ``name -> array`` as FSVD1 (little-endian, float32, no padding)."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def parse_tensors(buf: bytes) -> dict:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated file while reading {what}", offset=pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'FSVD'", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=start + 2) from None
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}", offset=start)
        dtype, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if dtype != _DTYPE_F32:
            raise FormatError(f"unsupported dtype code {dtype}", offset=pos - 2)
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "extents"))
        if any(s < 1 for s in shape):
            raise FormatError(f"tensor {name!r} has a zero extent {shape}", offset=pos - 8 * ndim)
        size = int(np.prod(shape, dtype=np.int64)) * 4
        data = take(size, f"data of {name!r}")
        out[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", offset=pos)
    return out


def read_tensors(path) -> dict:
    return parse_tensors(Path(path).read_bytes())


def _unit_key(mode: str):
    return {"single": None, "multi": "head", "grouped": "group"}[mode]


def layer_tensors(i: int, layer: EncoderLayer) -> dict:
    pre = f"layer.{i}"
    t = {}
    a = layer.attention
    if isinstance(a, AttentionFactorSet):
        key = _unit_key(a.mode)
        for name in "qkv":
            units = getattr(a, name)
            for g, f in enumerate(units):
                base = f"{pre}.attn.{name}" + (f".{key}.{g}" if key else "")
                t[f"{base}.U"], t[f"{base}.V"] = f.u, f.v
            t[f"{pre}.attn.{name}.b"] = np.concatenate([f.bias for f in units])
        o = a.output_proj
        t[f"{pre}.attn.o.U"], t[f"{pre}.attn.o.V"], t[f"{pre}.attn.o.b"] = o.u, o.v, o.bias
    else:
        for name in "qkvo":
            t[f"{pre}.attn.{name}.W"] = getattr(a, "w" + name)
            t[f"{pre}.attn.{name}.b"] = getattr(a, "b" + name)
    f = layer.ffn
    if isinstance(f, FfnFactors):
        for part, lin in (("up", f.up), ("down", f.down)):
            t[f"{pre}.ffn.{part}.U"], t[f"{pre}.ffn.{part}.V"] = lin.u, lin.v
            t[f"{pre}.ffn.{part}.b"] = lin.bias
    else:
        t[f"{pre}.ffn.up.W"], t[f"{pre}.ffn.up.b"] = f.w_in, f.b_in
        t[f"{pre}.ffn.down.W"], t[f"{pre}.ffn.down.b"] = f.w_out, f.b_out
    for n, ln in (("ln1", layer.ln1), ("ln2", layer.ln2)):
        t[f"{pre}.{n}.gamma"], t[f"{pre}.{n}.beta"] = ln.gamma, ln.beta
    return t


@dataclass
class ModelConfig:
    """Sidecar contents: everything the tensor file does not say by itself."""

    layers: int
    d_model: int
    d_ff: int
    heads: int
    rank: int | None = None
    attn_mode: str = "dense"   # dense | single | multi | grouped
    groups: int | None = None
    activation: str = "gelu"
    eps: float = 1e-12
    pre_ln: bool = False
    seed: int | None = None
    tile_plan: dict = field(default_factory=lambda: asdict(TilePlan()))

    @classmethod
    def from_layers(cls, layers, **extra):
        if not layers:
            raise ConfigError("cannot describe an empty model")
        first = layers[0]
        a = first.attention
        factorized = isinstance(a, AttentionFactorSet)
        return cls(
            layers=len(layers), d_model=first.d_model, d_ff=first.ffn.d_ff, heads=a.heads,
            rank=a.rank if factorized else None,
            attn_mode=a.mode if factorized else "dense",
            groups=a.units if factorized and a.mode == "grouped" else None,
            activation=first.ffn.activation, eps=first.ln1.eps, pre_ln=first.pre_ln, **extra,
        )


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_model(path, layers, seed: int | None = None, plan: TilePlan | None = None) -> ModelConfig:
    layers = list(layers)
    cfg = ModelConfig.from_layers(layers, seed=seed, tile_plan=asdict(plan or TilePlan()))
    tensors = {}
    for i, layer in enumerate(layers):
        tensors.update(layer_tensors(i, layer))
    write_tensors(path, tensors)
    sidecar_path(path).write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return cfg


def load_config(path) -> ModelConfig:
    side = sidecar_path(path)
    try:
        data = json.loads(side.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(f"sidecar {side} is not valid JSON: {exc}") from None
    try:
        return ModelConfig(**data)
    except TypeError as exc:
        raise FormatError(f"sidecar {side} has unexpected fields: {exc}") from None


def load_model(path):
    """Read an FSVD1 file plus its sidecar back into encoder layers."""
    cfg = load_config(path)
    tensors = read_tensors(path)
    try:
        layers = [_build_layer(i, tensors, cfg) for i in range(cfg.layers)]
    except KeyError as exc:
        raise FormatError(f"missing tensor {exc.args[0]!r}") from None
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"inconsistent tensor shapes: {exc}") from None
    expected = sum(len(layer_tensors(i, l)) for i, l in enumerate(layers))
    if expected != len(tensors):
        raise FormatError(f"file holds {len(tensors)} tensors, model uses {expected}")
    return layers


def _build_layer(i: int, t: dict, cfg: ModelConfig) -> EncoderLayer:
    pre = f"layer.{i}"
    d = cfg.d_model
    if cfg.attn_mode == "dense":
        w = {n: (t[f"{pre}.attn.{n}.W"], t[f"{pre}.attn.{n}.b"]) for n in "qkvo"}
        a = DenseAttention(cfg.heads, *w["q"], *w["k"], *w["v"], *w["o"])
    else:
        key = _unit_key(cfg.attn_mode)
        units = {"single": 1, "multi": cfg.heads, "grouped": cfg.groups}[cfg.attn_mode]
        if not units or d % units:
            raise FormatError(f"bad unit count {units} for width {d}")
        width = d // units
        sets = {}
        for name in "qkv":
            bias = t[f"{pre}.attn.{name}.b"]
            sets[name] = []
            for g in range(units):
                base = f"{pre}.attn.{name}" + (f".{key}.{g}" if key else "")
                sets[name].append(FactorizedLinear(t[f"{base}.U"], t[f"{base}.V"],
                                                   bias[g * width:(g + 1) * width].copy()))
        o = FactorizedLinear(t[f"{pre}.attn.o.U"], t[f"{pre}.attn.o.V"], t[f"{pre}.attn.o.b"])
        a = AttentionFactorSet(cfg.attn_mode, cfg.heads, d, sets["q"], sets["k"], sets["v"], o)
    if f"{pre}.ffn.up.W" in t:
        f = DenseFfn(t[f"{pre}.ffn.up.W"], t[f"{pre}.ffn.up.b"], t[f"{pre}.ffn.down.W"],
                     t[f"{pre}.ffn.down.b"], cfg.activation)
    else:
        lin = {p: FactorizedLinear(t[f"{pre}.ffn.{p}.U"], t[f"{pre}.ffn.{p}.V"], t[f"{pre}.ffn.{p}.b"])
               for p in ("up", "down")}
        f = FfnFactors(lin["up"], lin["down"], cfg.activation)
    ln = [LayerNormParams(t[f"{pre}.{n}.gamma"], t[f"{pre}.{n}.beta"], cfg.eps) for n in ("ln1", "ln2")]
    return EncoderLayer(a, f, ln[0], ln[1], cfg.pre_ln)


# -- synthetic models ----------------------------------------------------------------

def synth_dense_layers(seed: int, layers: int, d_model: int, d_ff: int, heads: int,
                       activation: str = "gelu", pre_ln: bool = False, bias_std: float = 0.02):
    """Seeded Gaussian weights with standard deviation ``1/sqrt(d_model)``."""
    if heads < 1 or d_model % heads:
        raise ConfigError(f"heads={heads} must divide d_model={d_model}")
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(d_model)

    def w(*shape):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    def b(n):
        return rng.normal(0.0, bias_std, size=n).astype(np.float32)

    out = []
    for _ in range(layers):
        a = DenseAttention(heads, w(d_model, d_model), b(d_model), w(d_model, d_model), b(d_model),
                           w(d_model, d_model), b(d_model), w(d_model, d_model), b(d_model))
        f = DenseFfn(w(d_model, d_ff), b(d_ff), w(d_ff, d_model), b(d_model), activation)
        ln = [LayerNormParams(np.ones(d_model, np.float32), np.zeros(d_model, np.float32)) for _ in range(2)]
        out.append(EncoderLayer(a, f, ln[0], ln[1], pre_ln))
    return out


def factorize_layer(layer: EncoderLayer, rank: int, attn_mode: str = "multi",
                    groups: int | None = None, out_rank: int | None = None,
                    ffn_rank: int | None = None) -> EncoderLayer:
    a = layer.attention
    if not isinstance(a, DenseAttention):
        raise ConfigError("layer is already factorized")
    fset = factorize_attention(a.wq, a.wk, a.wv, (a.bq, a.bk, a.bv), attn_mode, rank, a.heads,
                               groups, a.wo, a.bo, out_rank)
    f = ffn_mod.factorize_ffn(layer.ffn, rank if ffn_rank is None else ffn_rank)
    return replace(layer, attention=fset, ffn=f)


def thread_cap() -> int:
    """Worker count from ``FLASHSVD_THREADS`` (default: CPU count)."""
    raw = os.environ.get("FLASHSVD_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FLASHSVD_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def factorize_layers(layers, rank: int, attn_mode: str = "multi", groups: int | None = None):
    """Factorize every layer; layers are independent, so they run on a thread pool."""
    layers = list(layers)
    workers = min(thread_cap(), len(layers))
    if workers <= 1:
        return [factorize_layer(l, rank, attn_mode, groups) for l in layers]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda l: factorize_layer(l, rank, attn_mode, groups), layers))


def synth_model(seed: int, layers: int, d_model: int, d_ff: int, heads: int, rank: int | None,
                attn_mode: str = "multi", groups: int | None = None, activation: str = "gelu",
                pre_ln: bool = False):
    """Seeded synthetic encoder; ``attn_mode="dense"`` skips factorization."""
    dense = synth_dense_layers(seed, layers, d_model, d_ff, heads, activation, pre_ln)
    if attn_mode == "dense":
        return dense
    if rank is None:
        raise ConfigError("factorized synthetic model needs a rank")
    return factorize_layers(dense, rank, attn_mode, groups)
