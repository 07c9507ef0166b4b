"""Two-tier memory accounting: a tracked off-chip arena and an on-chip tile budget.

Byte counts are element counts times 4, whatever the array dtype, so the
64-bit oracle mode reports the same numbers as the 32-bit kernels.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import AccountingError, BudgetError, ConfigError

BYTES_PER_ELEMENT = 4

TRANSIENT = "transient"
PERSISTENT = "persistent"
EXCLUDED = "excluded"
CLASSES = (TRANSIENT, PERSISTENT, EXCLUDED)


def nbytes(shape_or_array) -> int:
    """Metered size of an array (or a shape tuple) at 4 bytes per element."""
    if isinstance(shape_or_array, np.ndarray):
        return int(shape_or_array.size) * BYTES_PER_ELEMENT
    return int(np.prod(shape_or_array, dtype=np.int64)) * BYTES_PER_ELEMENT


@dataclass(frozen=True)
class Handle:
    ident: int
    tag: str
    cls: str
    bytes: int


@dataclass(frozen=True)
class Event:
    tag: str
    cls: str
    bytes: int
    kind: str  # "alloc" | "free"


class MemoryMeter:
    """Thread-safe allocation tracker with per-class current/peak counters."""

    def __init__(self):
        self._lock = threading.RLock()
        self._ids = itertools.count()
        self._live: dict[int, Handle] = {}
        self._current = dict.fromkeys(CLASSES, 0)
        self._peak = dict.fromkeys(CLASSES, 0)
        self._peak_total = 0
        self._resident: dict[int, tuple[np.ndarray, Handle]] = {}
        self.events: list[Event] = []

    # counters ---------------------------------------------------------------
    @property
    def current_transient_bytes(self) -> int:
        return self._current[TRANSIENT]

    @property
    def peak_transient_bytes(self) -> int:
        return self._peak[TRANSIENT]

    @property
    def persistent_bytes(self) -> int:
        return self._current[PERSISTENT]

    @property
    def peak_persistent_bytes(self) -> int:
        return self._peak[PERSISTENT]

    @property
    def excluded_bytes(self) -> int:
        return self._current[EXCLUDED]

    @property
    def peak_total_bytes(self) -> int:
        """Peak of transient + persistent (excluded buffers never count)."""
        return self._peak_total

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "current_transient_bytes": self._current[TRANSIENT],
                "peak_transient_bytes": self._peak[TRANSIENT],
                "persistent_bytes": self._current[PERSISTENT],
                "peak_persistent_bytes": self._peak[PERSISTENT],
                "excluded_bytes": self._current[EXCLUDED],
                "peak_total_bytes": self._peak_total,
            }

    def live_handles(self) -> list[Handle]:
        with self._lock:
            return list(self._live.values())

    # alloc / free -------------------------------------------------------------
    def alloc(self, tag: str, cls: str, nbytes_: int) -> Handle:
        if cls not in CLASSES:
            raise ConfigError(f"unknown allocation class {cls!r}")
        if nbytes_ < 0:
            raise AccountingError(f"negative allocation of {nbytes_} bytes for {tag!r}")
        with self._lock:
            h = Handle(next(self._ids), tag, cls, int(nbytes_))
            self._live[h.ident] = h
            self._current[cls] += h.bytes
            self._peak[cls] = max(self._peak[cls], self._current[cls])
            total = self._current[TRANSIENT] + self._current[PERSISTENT]
            self._peak_total = max(self._peak_total, total)
            self.events.append(Event(tag, cls, h.bytes, "alloc"))
            return h

    def free(self, handle: Handle) -> None:
        with self._lock:
            live = self._live.pop(getattr(handle, "ident", None), None)
            if live is None or live != handle:
                raise AccountingError(f"free of unknown or already-freed handle {handle!r}")
            self._current[live.cls] -= live.bytes
            self.events.append(Event(live.tag, live.cls, live.bytes, "free"))

    def alloc_array(self, tag: str, cls: str, shape, dtype=np.float32):
        """Allocate a zeroed array and its meter record together."""
        return np.zeros(shape, dtype=dtype), self.alloc(tag, cls, nbytes(shape))

    # persistent weights ---------------------------------------------------------
    def resident(self, arrays, tag: str = "weight") -> None:
        """Register weight arrays as persistent once; repeats are no-ops.

        Arrays are keyed by identity and kept referenced so the key stays valid.
        """
        with self._lock:
            for i, arr in enumerate(arrays):
                if arr is None or id(arr) in self._resident:
                    continue
                h = self.alloc(f"{tag}[{i}]", PERSISTENT, nbytes(arr))
                self._resident[id(arr)] = (arr, h)

    def release_resident(self) -> None:
        with self._lock:
            for _, h in self._resident.values():
                self.free(h)
            self._resident.clear()

    def reset_peaks(self) -> None:
        with self._lock:
            self._peak = dict(self._current)
            self._peak_total = self._current[TRANSIENT] + self._current[PERSISTENT]

    # regions --------------------------------------------------------------------
    @contextlib.contextmanager
    def region(self, name: str = "region"):
        """Scope that must leave the transient level where it found it.

        On an exception every allocation made inside is released before the
        error propagates.  On normal exit, leftover excluded buffers are
        released and leftover transients raise ``AccountingError``.
        """
        with self._lock:
            start_ident = next(self._ids)
            entry_level = self._current[TRANSIENT]
        try:
            yield self
        except BaseException:
            self._release_since(start_ident, classes=(TRANSIENT, EXCLUDED))
            raise
        self._release_since(start_ident, classes=(EXCLUDED,))
        with self._lock:
            leaked = [h for h in self._live.values() if h.ident > start_ident and h.cls == TRANSIENT]
            if leaked or self._current[TRANSIENT] != entry_level:
                self._release_since(start_ident, classes=(TRANSIENT,))
                raise AccountingError(f"region {name!r} leaked transient buffers: {[h.tag for h in leaked]}")

    def _release_since(self, start_ident: int, classes) -> None:
        with self._lock:
            for h in sorted(self._live.values(), key=lambda h: -h.ident):
                if h.ident > start_ident and h.cls in classes:
                    self.free(h)


def scoped_region(meter: MemoryMeter, body, name: str = "region"):
    """Run ``body()`` inside ``meter.region`` and return its result."""
    with meter.region(name):
        return body()


def replay_peak(events) -> dict:
    """Recompute per-class peaks from an event log (independent of the meter)."""
    current = dict.fromkeys(CLASSES, 0)
    peak = dict.fromkeys(CLASSES, 0)
    peak_total = 0
    for ev in events:
        current[ev.cls] += ev.bytes if ev.kind == "alloc" else -ev.bytes
        peak[ev.cls] = max(peak[ev.cls], current[ev.cls])
        peak_total = max(peak_total, current[TRANSIENT] + current[PERSISTENT])
    return {"peak": peak, "peak_total": peak_total, "current": current}


# -- on-chip tile budget -----------------------------------------------------------

@dataclass(frozen=True)
class TilePlan:
    block_m: int = 16
    block_r: int = 16
    block_df: int = 32
    sram_budget_bytes: int = 131072

    def __post_init__(self):
        for name in ("block_m", "block_r", "block_df", "sram_budget_bytes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"tile plan field {name} must be >= 1")


@dataclass
class BudgetReport:
    kind: str
    buffers: dict = field(default_factory=dict)  # name -> bytes
    budget: int = 0

    @property
    def total(self) -> int:
        return sum(self.buffers.values())

    @property
    def largest(self) -> str:
        return max(self.buffers, key=self.buffers.get)

    @property
    def ok(self) -> bool:
        return self.total <= self.budget


def working_set(plan: TilePlan, kind: str, dims: dict) -> BudgetReport:
    """On-chip buffers (bytes) of one kernel instance running ``plan``.

    attention (one batch/head slice): Q tile, K tile, V tile, scores,
    accumulator, running max and sum, one factor block and one V_a block.
    ffn_v1 / ffn_v2: P tile, Y tile, Z tile (all batched over B) plus one
    feature block of V_i, U_o and b_i.
    """
    bm, br, bdf = plan.block_m, plan.block_r, plan.block_df
    e = BYTES_PER_ELEMENT
    if kind == "attention":
        dh = dims["head_dim"]
        bufs = {
            "q_tile": bm * dh, "k_tile": bm * dh, "v_tile": bm * dh,
            "scores": bm * bm, "accumulator": bm * dh,
            "row_max": bm, "row_sum": bm,
            "factor_block": bm * br, "v_factor_block": br * dh,
        }
    elif kind in ("ffn_v1", "ffn_v2"):
        b, r = dims["batch"], dims["rank"]
        bufs = {
            "p_tile": b * bm * r, "y_tile": b * bm * bdf, "z_tile": b * bm * r,
            "v_in_block": r * bdf, "u_out_block": bdf * r, "b_in_block": bdf,
        }
    else:
        raise ConfigError(f"unknown kernel kind {kind!r}")
    return BudgetReport(kind, {k: v * e for k, v in bufs.items()}, plan.sram_budget_bytes)


def validate_tile_plan(plan: TilePlan, kind: str, dims: dict) -> BudgetReport:
    report = working_set(plan, kind, dims)
    if not report.ok:
        raise BudgetError(
            f"{kind} working set {report.total} B exceeds budget {report.budget} B "
            f"(largest buffer: {report.largest} = {report.buffers[report.largest]} B)",
            buffer=report.largest, report=report,
        )
    return report


# -- closed-form expectations -----------------------------------------------------

def _dims(dims: dict, *names):
    try:
        return [int(dims[n]) for n in names]
    except KeyError as exc:
        raise ConfigError(f"missing dimension {exc.args[0]!r}") from None


def expected_bytes(formula_id: str, dims: dict) -> int:
    """Exact transient bytes the meter must report for a kernel run."""
    e = BYTES_PER_ELEMENT
    if formula_id in ("dense_attn", "naive_attn"):
        b, m, d, h = _dims(dims, "batch", "seqlen", "d_model", "heads")
        return e * (3 * b * m * d + b * h * m * m)
    if formula_id == "flash_attn_dense_qkv":
        b, m, d = _dims(dims, "batch", "seqlen", "d_model")
        return e * 3 * b * m * d
    if formula_id == "flash_svd_attn":
        b, m, h, r = _dims(dims, "batch", "seqlen", "heads", "rank")
        return e * 3 * h * b * m * r
    if formula_id == "grouped_attn":
        b, m, g, r = _dims(dims, "batch", "seqlen", "groups", "rank")
        return e * 3 * g * b * m * r
    if formula_id in ("ffn_dense", "ffn_naive_lowrank"):
        b, m, f = _dims(dims, "batch", "seqlen", "d_ff")
        return e * b * m * f
    if formula_id == "ffn_v1":
        b, m, r = _dims(dims, "batch", "seqlen", "rank")
        return e * 2 * b * m * r
    if formula_id == "ffn_v2":
        return 0
    if formula_id == "attn_out_proj":
        b, m, r = _dims(dims, "batch", "seqlen", "rank")
        return e * b * m * r
    raise ConfigError(f"unknown formula id {formula_id!r}")
