"""Hot numeric kernels.

Every kernel exists twice: a loop form compiled with ``numba.njit`` and a
vectorised pure-numpy form.  The loop form is used when numba imports and
the environment variable ``CPCHOI_DISABLE_NUMBA`` is unset (or ``0``);
otherwise the numpy form is bound.  Both forms are importable directly
(``NUMBA_KERNELS`` / ``NUMPY_KERNELS``) so they can be compared in tests and
in ``benchmarks/bench_kernels.py``.

All kernels take and return C-contiguous float64 arrays.  Row-wise kernels
work on 2-D ``(rows, width)`` views; callers reshape.
"""
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

DISABLE_FLAG = "CPCHOI_DISABLE_NUMBA"


def _numba_requested():
    value = os.environ.get(DISABLE_FLAG, "").strip().lower()
    return value in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"

# relative slack when deciding that a lexicographically earlier assignment
# reaches the optimum
LEX_TOL = 1e-12


# ---------------------------------------------------------------------------
# loop forms (numba)
# ---------------------------------------------------------------------------


def _softmax_loop(x):
    rows, width = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, width):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(width):
            e = np.exp(x[r, c] - m)
            out[r, c] = e
            s += e
        for c in range(width):
            out[r, c] /= s
    return out


def _softmax_bwd_loop(y, g):
    rows, width = y.shape
    out = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(width):
            dot += g[r, c] * y[r, c]
        for c in range(width):
            out[r, c] = y[r, c] * (g[r, c] - dot)
    return out


def _log_softmax_loop(x):
    rows, width = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, width):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(width):
            s += np.exp(x[r, c] - m)
        lse = m + np.log(s)
        for c in range(width):
            out[r, c] = x[r, c] - lse
    return out


def _log_softmax_bwd_loop(y, g):
    rows, width = y.shape
    out = np.empty_like(y)
    for r in range(rows):
        s = 0.0
        for c in range(width):
            s += g[r, c]
        for c in range(width):
            out[r, c] = g[r, c] - np.exp(y[r, c]) * s
    return out


def _layernorm_loop(x, gamma, beta, eps):
    rows, width = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows)
    for r in range(rows):
        mu = 0.0
        for c in range(width):
            mu += x[r, c]
        mu /= width
        var = 0.0
        for c in range(width):
            d = x[r, c] - mu
            var += d * d
        var /= width
        rs = 1.0 / np.sqrt(var + eps)
        rstd[r] = rs
        for c in range(width):
            xh = (x[r, c] - mu) * rs
            xhat[r, c] = xh
            y[r, c] = xh * gamma[c] + beta[c]
    return y, xhat, rstd


def _layernorm_bwd_loop(g, xhat, rstd, gamma):
    rows, width = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(width)
    dbeta = np.zeros(width)
    for r in range(rows):
        mean_d = 0.0
        mean_dx = 0.0
        for c in range(width):
            d = g[r, c] * gamma[c]
            mean_d += d
            mean_dx += d * xhat[r, c]
            dgamma[c] += g[r, c] * xhat[r, c]
            dbeta[c] += g[r, c]
        mean_d /= width
        mean_dx /= width
        for c in range(width):
            d = g[r, c] * gamma[c]
            dx[r, c] = rstd[r] * (d - mean_d - xhat[r, c] * mean_dx)
    return dx, dgamma, dbeta


def _lsa_loop(cost):
    # shortest augmenting path with potentials; rows <= cols
    n, m = cost.shape
    if n > m:
        raise ValueError("assignment cost matrix needs rows <= columns")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    rows_to_cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            rows_to_cols[p[j] - 1] = j - 1
    return rows_to_cols


def _coverage_loop(boxes, grid):
    n = boxes.shape[0]
    out = np.zeros((n, grid, grid))
    cell = 1.0 / grid
    for b in range(n):
        x0 = min(max(boxes[b, 0] - 0.5 * boxes[b, 2], 0.0), 1.0)
        x1 = min(max(boxes[b, 0] + 0.5 * boxes[b, 2], 0.0), 1.0)
        y0 = min(max(boxes[b, 1] - 0.5 * boxes[b, 3], 0.0), 1.0)
        y1 = min(max(boxes[b, 1] + 0.5 * boxes[b, 3], 0.0), 1.0)
        for r in range(grid):
            oy = min(y1, (r + 1) * cell) - max(y0, r * cell)
            if oy <= 0.0:
                continue
            for c in range(grid):
                ox = min(x1, (c + 1) * cell) - max(x0, c * cell)
                if ox > 0.0:
                    out[b, r, c] = ox * oy * grid * grid
    return out


# ---------------------------------------------------------------------------
# vectorised forms (numpy)
# ---------------------------------------------------------------------------


def _softmax_np(x):
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _softmax_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _log_softmax_np(x):
    m = x.max(axis=1, keepdims=True)
    return x - (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))


def _log_softmax_bwd_np(y, g):
    return g - np.exp(y) * g.sum(axis=1, keepdims=True)


def _layernorm_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    rstd = 1.0 / np.sqrt((d * d).mean(axis=1) + eps)
    xhat = d * rstd[:, None]
    return xhat * gamma + beta, xhat, rstd


def _layernorm_bwd_np(g, xhat, rstd, gamma):
    d = g * gamma
    dx = rstd[:, None] * (
        d - d.mean(axis=1, keepdims=True) - xhat * (d * xhat).mean(axis=1, keepdims=True)
    )
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _lsa_np(cost):
    n, m = cost.shape
    if n > m:
        raise ValueError("assignment cost matrix needs rows <= columns")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows_to_cols = np.full(n, -1, dtype=np.int64)
    cols = np.nonzero(p[1:])[0]
    rows_to_cols[p[1:][cols] - 1] = cols
    return rows_to_cols


def _coverage_np(boxes, grid):
    edges = np.arange(grid + 1) / grid
    half = 0.5 * boxes[:, 2:4]
    lo = np.clip(boxes[:, 0:2] - half, 0.0, 1.0)
    hi = np.clip(boxes[:, 0:2] + half, 0.0, 1.0)
    # (n, grid) overlaps per axis, as a fraction of a cell
    ox = np.clip(np.minimum(hi[:, 0:1], edges[None, 1:]) - np.maximum(lo[:, 0:1], edges[None, :-1]), 0.0, None)
    oy = np.clip(np.minimum(hi[:, 1:2], edges[None, 1:]) - np.maximum(lo[:, 1:2], edges[None, :-1]), 0.0, None)
    return oy[:, :, None] * ox[:, None, :] * (grid * grid)


# ---------------------------------------------------------------------------
# lexicographic refinement, shared by both backends
# ---------------------------------------------------------------------------


def _make_lex(lsa):
    def lex_lsa(cost):
        n, m = cost.shape
        out = np.full(n, -1, dtype=np.int64)
        if n == 0:
            return out
        cur = lsa(cost)
        best = 0.0
        for r in range(n):
            best += cost[r, cur[r]]
        tol = LEX_TOL * max(1.0, abs(best))
        taken = np.zeros(m, dtype=np.bool_)
        prefix = 0.0
        for r in range(n):
            for c in range(cur[r]):
                if taken[c]:
                    continue
                # columns left for rows r+1.. once (r, c) is fixed
                free = np.empty(m, dtype=np.int64)
                k = 0
                for cc in range(m):
                    if not taken[cc] and cc != c:
                        free[k] = cc
                        k += 1
                free = free[:k]
                rest = n - r - 1
                total = prefix + cost[r, c]
                if rest > 0:
                    sub = np.empty((rest, k))
                    for rr in range(rest):
                        for kk in range(k):
                            sub[rr, kk] = cost[r + 1 + rr, free[kk]]
                    sol = lsa(sub)
                    for rr in range(rest):
                        total += sub[rr, sol[rr]]
                if total <= best + tol:
                    cur[r] = c
                    if rest > 0:
                        for rr in range(rest):
                            cur[r + 1 + rr] = free[sol[rr]]
                    break
            out[r] = cur[r]
            taken[cur[r]] = True
            prefix += cost[r, cur[r]]
        return out

    return lex_lsa


def _lex_lsa_np(cost):
    n, m = cost.shape
    out = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return out
    cur = _lsa_np(cost)
    best = float(cost[np.arange(n), cur].sum())
    tol = LEX_TOL * max(1.0, abs(best))
    taken = np.zeros(m, dtype=bool)
    prefix = 0.0
    for r in range(n):
        for c in np.nonzero(~taken[: cur[r]])[0]:
            free = np.nonzero(~taken)[0]
            free = free[free != c]
            total = prefix + cost[r, c]
            if r + 1 < n:
                sub = cost[r + 1 :][:, free]
                sol = _lsa_np(sub)
                total += sub[np.arange(n - r - 1), sol].sum()
            if total <= best + tol:
                cur[r] = c
                if r + 1 < n:
                    cur[r + 1 :] = free[sol]
                break
        out[r] = cur[r]
        taken[cur[r]] = True
        prefix += cost[r, cur[r]]
    return out


NUMPY_KERNELS = {
    "softmax": _softmax_np,
    "softmax_bwd": _softmax_bwd_np,
    "log_softmax": _log_softmax_np,
    "log_softmax_bwd": _log_softmax_bwd_np,
    "layernorm": _layernorm_np,
    "layernorm_bwd": _layernorm_bwd_np,
    "lsa": _lsa_np,
    "lex_lsa": _lex_lsa_np,
    "coverage": _coverage_np,
}

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)
    _lsa_nb = _jit(_lsa_loop)
    NUMBA_KERNELS = {
        "softmax": _jit(_softmax_loop),
        "softmax_bwd": _jit(_softmax_bwd_loop),
        "log_softmax": _jit(_log_softmax_loop),
        "log_softmax_bwd": _jit(_log_softmax_bwd_loop),
        "layernorm": _jit(_layernorm_loop),
        "layernorm_bwd": _jit(_layernorm_bwd_loop),
        "lsa": _lsa_nb,
        "lex_lsa": _jit(_make_lex(_lsa_nb)),
        "coverage": _jit(_coverage_loop),
    }
else:  # pragma: no cover
    NUMBA_KERNELS = {}

KERNELS = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

softmax_fwd = KERNELS["softmax"]
softmax_bwd = KERNELS["softmax_bwd"]
log_softmax_fwd = KERNELS["log_softmax"]
log_softmax_bwd = KERNELS["log_softmax_bwd"]
layernorm_fwd = KERNELS["layernorm"]
layernorm_bwd = KERNELS["layernorm_bwd"]
lsa = KERNELS["lsa"]
lex_lsa = KERNELS["lex_lsa"]
box_coverage = KERNELS["coverage"]
