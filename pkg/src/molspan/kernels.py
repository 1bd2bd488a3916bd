"""Hot numeric kernels with a JIT path and a pure-numpy fallback.

Every kernel exists twice: a numba ``@njit`` build and a vectorized numpy
build. The active backend is chosen at import time; set ``MOLSPAN_NO_NUMBA=1``
to force the numpy path (or call :func:`set_backend` from code). Both paths
compute the same quantities; ``benchmarks/bench_kernels.py`` times them
against each other.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but degrade politely
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap

    warnings.warn("numba unavailable; falling back to pure-numpy kernels")

_backend = "numpy" if (os.environ.get("MOLSPAN_NO_NUMBA") == "1" or not HAS_NUMBA) else "numba"


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name


def get_backend() -> str:
    return _backend


# ---------------------------------------------------------------------------
# RMS normalization over rows

def _np_rmsnorm_fwd(x, gain, eps):
    ms = np.mean(x * x, axis=1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    return x * r * gain, r


@njit(cache=True)
def _nb_rmsnorm_fwd(x, gain, eps):
    n, d = x.shape
    y = np.empty_like(x)
    r = np.empty((n, 1), dtype=x.dtype)
    for i in range(n):
        ms = 0.0
        for j in range(d):
            ms += x[i, j] * x[i, j]
        ri = 1.0 / np.sqrt(ms / d + eps)
        r[i, 0] = ri
        for j in range(d):
            y[i, j] = x[i, j] * ri * gain[j]
    return y, r


def _np_rmsnorm_bwd(x, gain, r, dy):
    d = x.shape[1]
    dg = np.sum(dy * x * r, axis=0)
    inner = np.sum(dy * gain * x, axis=1, keepdims=True)
    dx = r * gain * dy - (r ** 3 / d) * x * inner
    return dx, dg


@njit(cache=True)
def _nb_rmsnorm_bwd(x, gain, r, dy):
    n, d = x.shape
    dx = np.empty_like(x)
    dg = np.zeros(d, dtype=x.dtype)
    for i in range(n):
        ri = r[i, 0]
        inner = 0.0
        for j in range(d):
            inner += dy[i, j] * gain[j] * x[i, j]
            dg[j] += dy[i, j] * x[i, j] * ri
        c = ri * ri * ri * inner / d
        for j in range(d):
            dx[i, j] = ri * gain[j] * dy[i, j] - c * x[i, j]
    return dx, dg


def rmsnorm_fwd(x, gain, eps):
    if _backend == "numba":
        return _nb_rmsnorm_fwd(x, gain, eps)
    return _np_rmsnorm_fwd(x, gain, eps)


def rmsnorm_bwd(x, gain, r, dy):
    if _backend == "numba":
        return _nb_rmsnorm_bwd(x, gain, r, dy)
    return _np_rmsnorm_bwd(x, gain, r, dy)


# ---------------------------------------------------------------------------
# SiLU (swish)

def _np_silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


@njit(cache=True)
def _nb_silu_fwd(x):
    out = np.empty_like(x)
    flat_x = x.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        s = 1.0 / (1.0 + np.exp(-flat_x[i]))
        flat_o[i] = flat_x[i] * s
    return out


def _np_silu_bwd(x, dy):
    s = 1.0 / (1.0 + np.exp(-x))
    return dy * s * (1.0 + x * (1.0 - s))


@njit(cache=True)
def _nb_silu_bwd(x, dy):
    dx = np.empty_like(x)
    fx = x.ravel()
    fdy = dy.ravel()
    fdx = dx.ravel()
    for i in range(fx.size):
        s = 1.0 / (1.0 + np.exp(-fx[i]))
        fdx[i] = fdy[i] * s * (1.0 + fx[i] * (1.0 - s))
    return dx


def silu_fwd(x):
    if _backend == "numba":
        return _nb_silu_fwd(np.ascontiguousarray(x))
    return _np_silu_fwd(x)


def silu_bwd(x, dy):
    if _backend == "numba":
        return _nb_silu_bwd(np.ascontiguousarray(x), np.ascontiguousarray(dy))
    return _np_silu_bwd(x, dy)


# ---------------------------------------------------------------------------
# Row softmax (rows may contain -inf; an all--inf row yields zeros)

def _np_softmax_rows(x):
    m = np.max(x, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    z = np.where(z == 0.0, 1.0, z)
    return e / z


@njit(cache=True)
def _nb_softmax_rows(x):
    n, d = x.shape
    p = np.empty_like(x)
    for i in range(n):
        m = -np.inf
        for j in range(d):
            if x[i, j] > m:
                m = x[i, j]
        if m == -np.inf:
            for j in range(d):
                p[i, j] = 0.0
            continue
        z = 0.0
        for j in range(d):
            e = np.exp(x[i, j] - m)
            p[i, j] = e
            z += e
        for j in range(d):
            p[i, j] /= z
    return p


def _np_softmax_rows_bwd(p, dp):
    inner = np.sum(p * dp, axis=1, keepdims=True)
    return p * (dp - inner)


@njit(cache=True)
def _nb_softmax_rows_bwd(p, dp):
    n, d = p.shape
    dx = np.empty_like(p)
    for i in range(n):
        inner = 0.0
        for j in range(d):
            inner += p[i, j] * dp[i, j]
        for j in range(d):
            dx[i, j] = p[i, j] * (dp[i, j] - inner)
    return dx


def softmax_rows(x):
    if _backend == "numba":
        return _nb_softmax_rows(np.ascontiguousarray(x))
    return _np_softmax_rows(x)


def softmax_rows_bwd(p, dp):
    if _backend == "numba":
        return _nb_softmax_rows_bwd(np.ascontiguousarray(p), np.ascontiguousarray(dp))
    return _np_softmax_rows_bwd(p, dp)


# ---------------------------------------------------------------------------
# Row scatter-add (embedding backward)

def _np_scatter_add(out, idx, grads):
    np.add.at(out, idx, grads)
    return out


@njit(cache=True)
def _nb_scatter_add(out, idx, grads):
    n, d = grads.shape
    for i in range(n):
        row = idx[i]
        for j in range(d):
            out[row, j] += grads[i, j]
    return out


def scatter_add(out, idx, grads):
    """out[idx[i]] += grads[i], row-wise, in place."""
    if _backend == "numba":
        return _nb_scatter_add(out, np.ascontiguousarray(idx), np.ascontiguousarray(grads))
    return _np_scatter_add(out, idx, grads)


# ---------------------------------------------------------------------------
# Mean pairwise Tanimoto similarity over packed fingerprints

def _np_tanimoto_mean(words):
    n = words.shape[0]
    total = 0.0
    for i in range(n - 1):
        inter = np.bitwise_count(words[i] & words[i + 1:]).sum(axis=1)
        union = np.bitwise_count(words[i] | words[i + 1:]).sum(axis=1)
        sims = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
        total += float(sims.sum())
    return total / (n * (n - 1) / 2)


@njit(cache=True)
def _nb_popcount64(v):
    v = v - ((v >> np.uint64(1)) & np.uint64(0x5555555555555555))
    v = (v & np.uint64(0x3333333333333333)) + ((v >> np.uint64(2)) & np.uint64(0x3333333333333333))
    v = (v + (v >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return np.int64((v * np.uint64(0x0101010101010101)) >> np.uint64(56))


@njit(cache=True)
def _nb_tanimoto_mean(words):
    n, w = words.shape
    total = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            inter = np.int64(0)
            union = np.int64(0)
            for k in range(w):
                inter += _nb_popcount64(words[i, k] & words[j, k])
                union += _nb_popcount64(words[i, k] | words[j, k])
            if union == 0:
                total += 1.0
            else:
                total += inter / union
    return total / (n * (n - 1) / 2)


def tanimoto_mean(words):
    """Mean Tanimoto similarity over all unordered fingerprint pairs."""
    if words.shape[0] < 2:
        raise ValueError("need at least two fingerprints")
    if _backend == "numba":
        return float(_nb_tanimoto_mean(np.ascontiguousarray(words)))
    return float(_np_tanimoto_mean(words))
