"""Dense primitives: fixed-order GEMM, deterministic SVD, elementwise ops.

Every tensor in the package is a C-contiguous ``numpy.ndarray``; kernels run
in float32, and passing float64 arrays gives the 64-bit oracle mode used by
the tests.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from typing import NamedTuple

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, RankError, ShapeError

#: Above this ``min(m, n)`` the SVD falls back to LAPACK (see ``svd``).
JACOBI_MAX_DIM = 160
_JACOBI_MAX_SWEEPS = 80


_FLOP_COUNTER: contextvars.ContextVar = contextvars.ContextVar("flop_counter", default=None)


class FlopCounter:
    def __init__(self):
        self.flops = 0


@contextlib.contextmanager
def count_flops():
    """Count ``2*m*k*n`` per (batched) gemm call made inside the block."""
    counter = FlopCounter()
    token = _FLOP_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTER.reset(token)


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim and min(arr.shape) < 1:
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


def gemm(a, b, c_init=None) -> np.ndarray:
    """``c_init + a @ b`` with a fixed, k-ascending accumulation order.

    Leading dimensions broadcast like ``np.matmul``.  Each output element is
    accumulated as ``acc = acc + a[i, p] * b[p, j]`` for ``p = 0, 1, ...``
    in the operands' dtype, starting from ``c_init`` (or zero), so results
    are bit-reproducible and match a scalar triple loop exactly.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"gemm needs matrices, got {a.shape} and {b.shape}")
    k = a.shape[-1]
    if b.shape[-2] != k:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    dtype = np.result_type(a, b)
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    out_shape = batch + (a.shape[-2], b.shape[-1])
    if c_init is None:
        c = np.zeros(out_shape, dtype=dtype)
    else:
        c_init = np.asarray(c_init)
        if c_init.shape != out_shape:
            raise ShapeError(f"c_init has shape {c_init.shape}, expected {out_shape}")
        c = c_init.astype(dtype, copy=True)
    counter = _FLOP_COUNTER.get()
    if counter is not None:
        counter.flops += 2 * math.prod(out_shape) * k
    tmp = np.empty(out_shape, dtype=dtype)
    for p in range(k):
        np.multiply(a[..., :, p : p + 1], b[..., p : p + 1, :], out=tmp)
        np.add(c, tmp, out=c)
    return c


class SvdResult(NamedTuple):
    u: np.ndarray   # m x p, orthonormal columns
    s: np.ndarray   # p, nonincreasing
    vt: np.ndarray  # p x n, orthonormal rows

    def reconstruct(self) -> np.ndarray:
        return (self.u.astype(np.float64) * self.s.astype(np.float64)) @ self.vt.astype(np.float64)


class FactorPair(NamedTuple):
    u: np.ndarray  # m x r
    v: np.ndarray  # r x n


def _round_robin(n: int):
    # tournament schedule: n-1 rounds of disjoint pairs covering every pair once
    players = list(range(n + (n % 2)))
    size = len(players)
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        yield [(p, q) if p < q else (q, p) for p, q in pairs if p < n and q < n]
        players = [players[0], players[-1]] + players[1:-1]


def _jacobi_tall(a: np.ndarray):
    """One-sided (Hestenes) Jacobi on a stack ``k x m x n`` of float64 matrices (m >= n).

    Matrices that have converged receive identity rotations (c=1, s=0), which
    leave them bit-unchanged, so stacking never alters any single result.
    """
    k, m, n = a.shape
    g = a.copy()
    v = np.broadcast_to(np.eye(n), (k, n, n)).copy()
    tol = max(m, n) * np.finfo(np.float64).eps
    # pairs whose columns are negligible next to the whole matrix count as converged
    floor = (tol * np.sqrt(np.einsum("kij,kij->k", a, a)))[:, None] ** 2
    rounds = [np.array(r, dtype=np.intp).reshape(-1, 2) for r in _round_robin(n)]
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for pairs in rounds:
            if not len(pairs):
                continue
            p, q = pairs[:, 0], pairs[:, 1]
            gp, gq = g[:, :, p], g[:, :, q]
            alpha = np.einsum("kij,kij->kj", gp, gp)
            beta = np.einsum("kij,kij->kj", gq, gq)
            gamma = np.einsum("kij,kij->kj", gp, gq)
            scale = np.sqrt(alpha * beta)
            active = (np.abs(gamma) > tol * scale) & (scale > floor)
            if not active.any():
                continue
            rotated = True
            safe = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c0 = 1.0 / np.hypot(1.0, t)
            c = np.where(active, c0, 1.0)[:, None, :]
            s = np.where(active, c0 * t, 0.0)[:, None, :]
            g[:, :, p] = c * gp - s * gq
            g[:, :, q] = s * gp + c * gq
            vp, vq = v[:, :, p], v[:, :, q]
            v[:, :, p] = c * vp - s * vq
            v[:, :, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericError("Jacobi SVD did not converge")
    out = []
    for gi, vi in zip(g, v):
        norms = np.sqrt(np.einsum("ij,ij->j", gi, gi))
        order = np.argsort(-norms, kind="stable")
        sv = norms[order]
        gi = gi[:, order]
        u = np.zeros_like(gi)
        floor = sv[0] * max(m, n) * np.finfo(np.float64).eps if n else 0.0
        good = sv > floor
        u[:, good] = gi[:, good] / sv[good]
        if not good.all():
            u = _complete_basis(u, good)
        out.append((u, sv, vi[:, order].T))
    return out


def _jacobi_preconditioned(a: np.ndarray):
    # tall inputs: Jacobi on the n x n triangular factor of a = QR
    k, m, n = a.shape
    if m < 2 * n:
        return _jacobi_tall(a)
    q, r = np.linalg.qr(a)
    return [(qi @ ur, sv, vt) for qi, (ur, sv, vt) in zip(q, _jacobi_tall(r))]


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    # null-space directions: Gram-Schmidt over unit vectors, lowest index first
    m = u.shape[0]
    basis = [u[:, i] for i in np.flatnonzero(good)]
    j = 0
    for i in np.flatnonzero(~good):
        while True:
            if j >= m:
                raise NumericError("cannot complete orthonormal basis")
            cand = np.zeros(m)
            cand[j] = 1.0
            j += 1
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            norm = np.linalg.norm(cand)
            if norm > 1e-3:
                cand /= norm
                break
        u[:, i] = cand
        basis.append(cand)
    return u


def _canonical_signs(u: np.ndarray, vt: np.ndarray):
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    vt[flip, :] *= -1.0
    return u, vt


def _check_svd_input(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"svd needs a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("svd input contains non-finite entries")
    return a.astype(np.float64)


def svd_many(mats, dtype=None, method: str = "auto") -> list:
    """``svd`` of several same-shape matrices; Jacobi sweeps run stacked.

    Each result is identical to calling ``svd`` on that matrix alone.
    """
    stack = [_check_svd_input(a) for a in mats]
    if not stack:
        return []
    shapes = {a.shape for a in stack}
    if len(shapes) != 1:
        raise ShapeError(f"svd_many needs one common shape, got {sorted(shapes)}")
    out_dtype = np.float32 if dtype is None else dtype
    m, n = stack[0].shape
    if method == "auto":
        method = "jacobi" if min(m, n) <= JACOBI_MAX_DIM else "lapack"
    if method == "jacobi":
        a64 = np.stack(stack)
        if m >= n:
            raw = _jacobi_preconditioned(a64)
        else:
            raw = [(vt2.T.copy(), s, u2.T.copy())
                   for u2, s, vt2 in _jacobi_preconditioned(np.swapaxes(a64, 1, 2).copy())]
    elif method == "lapack":
        raw = [np.linalg.svd(a, full_matrices=False) for a in stack]
    else:
        raise ConfigError(f"unknown svd method {method!r}")
    results = []
    for u, s, vt in raw:
        u, vt = _canonical_signs(u, vt)
        results.append(SvdResult(u.astype(out_dtype), s.astype(out_dtype), vt.astype(out_dtype)))
    return results


def svd(a, dtype=None, method: str = "auto") -> SvdResult:
    """Thin SVD computed in float64, returned in ``dtype`` (default: float32).

    ``method="jacobi"`` runs one-sided Jacobi with round-robin pair ordering;
    ``"lapack"`` uses ``numpy.linalg.svd``.  ``"auto"`` picks Jacobi up to
    ``JACOBI_MAX_DIM``.  Either way the output is canonicalised: the
    largest-magnitude entry of every column of ``u`` is positive, and equal
    singular values keep ascending column order (Jacobi path).
    """
    return svd_many([a], dtype, method)[0]


def truncate_even_split(res: SvdResult, rank: int) -> FactorPair:
    """Best rank-``rank`` factor pair with sqrt(S) folded into each side."""
    p = res.s.shape[0]
    if not 1 <= rank <= p:
        raise RankError(f"rank must be in [1, {p}], got {rank}")
    root = np.sqrt(res.s[:rank].astype(np.float64))
    dtype = res.u.dtype
    u = (res.u[:, :rank].astype(np.float64) * root).astype(dtype)
    v = (root[:, None] * res.vt[:rank].astype(np.float64)).astype(dtype)
    return FactorPair(np.ascontiguousarray(u), np.ascontiguousarray(v))


# -- elementwise ---------------------------------------------------------------

def gelu(x):
    x = np.asarray(x)
    dt = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x = x.astype(dt, copy=False)
    half = dt.type(0.5)
    return x * half * (dt.type(1.0) + erf(x / dt.type(math.sqrt(2.0))))


def gelu_tanh(x):
    x = np.asarray(x)
    dt = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x = x.astype(dt, copy=False)
    c = dt.type(math.sqrt(2.0 / math.pi))
    return dt.type(0.5) * x * (dt.type(1.0) + np.tanh(c * (x + dt.type(0.044715) * x**3)))


def relu(x):
    return np.maximum(x, 0)


def identity(x):
    return np.asarray(x)


ACTIVATIONS = {
    "gelu": gelu,
    "gelu_tanh": gelu_tanh,
    "relu": relu,
    "identity": identity,
}


def get_activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def layer_norm(x, gamma, beta, eps: float = 1e-12):
    """Normalise over the last axis; zero-variance rows collapse to ``beta``."""
    if eps <= 0:
        raise ConfigError("layer norm eps must be positive")
    x = np.asarray(x)
    dt = x.dtype.type
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred / np.sqrt(var + dt(eps)) * gamma + beta


def softmax_row(x):
    """Max-subtracted softmax over the last axis."""
    x = np.asarray(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
