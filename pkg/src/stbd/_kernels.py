"""Row-wise numeric kernels with a numba path and a pure-numpy fallback.

Every kernel works on 2-D ``(rows, cols)`` arrays; callers reshape. The
numba path is used when numba imports and ``STBD_NUMBA`` is not ``"0"``.
Both paths are always importable as ``*_numpy`` / ``*_numba`` so they can
be compared directly.
"""

import os

import numpy as np

VAR_FLOOR = 1e-10

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("STBD_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# numpy reference implementations


def softmax_rows_numpy(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward_numpy(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def log_softmax_rows_numpy(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def layer_norm_rows_numpy(x):
    """Return ``(xhat, rstd, floored)`` for each row of ``x``."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    floored = var < VAR_FLOOR
    rstd = 1.0 / np.sqrt(np.maximum(var, VAR_FLOOR))
    rstd = rstd.astype(x.dtype)
    return xc * rstd[:, None], rstd, floored


def layer_norm_rows_backward_numpy(g, xhat, rstd, floored):
    mg = g.mean(axis=1, keepdims=True)
    mgx = (g * xhat).mean(axis=1, keepdims=True)
    mgx = np.where(floored[:, None], 0.0, mgx).astype(g.dtype)
    return rstd[:, None] * (g - mg - xhat * mgx)


def edit_distance_numpy(a, b):
    """Levenshtein distance with unit costs, one DP row at a time."""
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.arange(m + 1, dtype=np.int64)
    b = np.asarray(b)
    for i in range(1, n + 1):
        cur = np.empty(m + 1, dtype=np.int64)
        cur[0] = i
        # substitution / deletion are vectorisable; insertion is a running min
        diag = prev[:-1] + (b != a[i - 1])
        up = prev[1:] + 1
        best = np.minimum(diag, up)
        for j in range(1, m + 1):
            left = cur[j - 1] + 1
            cur[j] = best[j - 1] if best[j - 1] < left else left
        prev = cur
    return int(prev[m])


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def softmax_rows_numba(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            mx = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > mx:
                    mx = x[r, c]
            s = 0.0
            for c in range(cols):
                e = np.exp(x[r, c] - mx)
                out[r, c] = e
                s += e
            inv = 1.0 / s
            for c in range(cols):
                out[r, c] *= inv
        return out

    @numba.njit(cache=True)
    def softmax_rows_backward_numba(y, g):
        rows, cols = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for c in range(cols):
                dot += g[r, c] * y[r, c]
            for c in range(cols):
                out[r, c] = y[r, c] * (g[r, c] - dot)
        return out

    @numba.njit(cache=True)
    def log_softmax_rows_numba(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            mx = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > mx:
                    mx = x[r, c]
            s = 0.0
            for c in range(cols):
                s += np.exp(x[r, c] - mx)
            lse = np.log(s)
            for c in range(cols):
                out[r, c] = x[r, c] - mx - lse
        return out

    @numba.njit(cache=True)
    def layer_norm_rows_numba(x):
        rows, cols = x.shape
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        floored = np.zeros(rows, dtype=np.bool_)
        for r in range(rows):
            mu = 0.0
            for c in range(cols):
                mu += x[r, c]
            mu /= cols
            var = 0.0
            for c in range(cols):
                d = x[r, c] - mu
                var += d * d
            var /= cols
            if var < VAR_FLOOR:
                floored[r] = True
                var = VAR_FLOOR
            s = 1.0 / np.sqrt(var)
            rstd[r] = s
            for c in range(cols):
                xhat[r, c] = (x[r, c] - mu) * s
        return xhat, rstd, floored

    @numba.njit(cache=True)
    def layer_norm_rows_backward_numba(g, xhat, rstd, floored):
        rows, cols = g.shape
        out = np.empty_like(g)
        for r in range(rows):
            mg = 0.0
            mgx = 0.0
            for c in range(cols):
                mg += g[r, c]
                mgx += g[r, c] * xhat[r, c]
            mg /= cols
            mgx = 0.0 if floored[r] else mgx / cols
            for c in range(cols):
                out[r, c] = rstd[r] * (g[r, c] - mg - xhat[r, c] * mgx)
        return out

    @numba.njit(cache=True)
    def _edit_distance_numba(a, b):
        n = a.shape[0]
        m = b.shape[0]
        prev = np.empty(m + 1, dtype=np.int64)
        cur = np.empty(m + 1, dtype=np.int64)
        for j in range(m + 1):
            prev[j] = j
        for i in range(1, n + 1):
            cur[0] = i
            for j in range(1, m + 1):
                cost = 0 if a[i - 1] == b[j - 1] else 1
                best = prev[j - 1] + cost
                if prev[j] + 1 < best:
                    best = prev[j] + 1
                if cur[j - 1] + 1 < best:
                    best = cur[j - 1] + 1
                cur[j] = best
            prev, cur = cur, prev
        return prev[m]

    def edit_distance_numba(a, b):
        return int(_edit_distance_numba(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))

else:  # pragma: no cover
    softmax_rows_numba = softmax_rows_numpy
    softmax_rows_backward_numba = softmax_rows_backward_numpy
    log_softmax_rows_numba = log_softmax_rows_numpy
    layer_norm_rows_numba = layer_norm_rows_numpy
    layer_norm_rows_backward_numba = layer_norm_rows_backward_numpy
    edit_distance_numba = edit_distance_numpy


def _pick(nb, np_):
    return nb if USE_NUMBA else np_


# The exp-bound forward kernels stay on numpy: its vectorised exp beats the
# scalar exp numba emits without SVML (see benchmarks/bench_kernels.py).
softmax_rows = softmax_rows_numpy
softmax_rows_backward = _pick(softmax_rows_backward_numba, softmax_rows_backward_numpy)
log_softmax_rows = log_softmax_rows_numpy
layer_norm_rows = _pick(layer_norm_rows_numba, layer_norm_rows_numpy)
layer_norm_rows_backward = _pick(layer_norm_rows_backward_numba, layer_norm_rows_backward_numpy)
edit_distance = _pick(edit_distance_numba, edit_distance_numpy)


def backend():
    """Name of the active kernel path."""
    return "numba" if USE_NUMBA else "numpy"
