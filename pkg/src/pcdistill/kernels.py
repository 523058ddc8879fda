"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

Every kernel exists in two variants that compute the same thing:

* a numba ``@njit`` version used by default, and
* a pure-numpy fallback, selected by setting ``PCDISTILL_DISABLE_NUMBA=1``
  in the environment (or automatically when numba cannot be imported).

The numba variants are scalar IEEE loops (``fastmath`` off), so results are
deterministic; integer outputs (neighbor indices, argmax slots) are identical
across the two paths, float outputs agree to the last few ulps.

``benchmarks/bench_kernels.py`` compares the two paths at training shapes.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE_ENV = "PCDISTILL_DISABLE_NUMBA"


def _numba_wanted() -> bool:
    return os.environ.get(_DISABLE_ENV, "0") not in ("1", "true", "yes")


if _numba_wanted():
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False

if not NUMBA_ENABLED:
    def njit(*args, **kwargs):  # noqa: D103 - decorator stub, jitting disabled
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


# ---------------------------------------------------------------------------
# k-nearest neighbors (exact, brute force)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _knn_batch_nb(points, k, out):
    B, N, _ = points.shape
    m = k - 1  # non-self neighbors kept per row
    dist = np.empty(N, np.float64)
    best_d = np.empty(max(m, 1), np.float64)
    best_j = np.empty(max(m, 1), np.int32)
    for bidx in range(B):
        pts = points[bidx]
        for i in range(N):
            out[bidx, i, 0] = i
            if m == 0:
                continue
            px = pts[i, 0]
            py = pts[i, 1]
            pz = pts[i, 2]
            for j in range(N):
                dx = pts[j, 0] - px
                dy = pts[j, 1] - py
                dz = pts[j, 2] - pz
                dist[j] = dx * dx + dy * dy + dz * dz
            # insertion sort of the m nearest non-self points, ordered by
            # (distance, index) ascending; since j ascends, an incoming tie
            # always loses to the stored entry
            size = 0
            thresh = np.inf
            for j in range(N):
                if j == i:
                    continue
                d = dist[j]
                if d >= thresh:
                    continue
                pos = size if size < m else m - 1
                if size < m:
                    size += 1
                while pos > 0 and best_d[pos - 1] > d:
                    best_d[pos] = best_d[pos - 1]
                    best_j[pos] = best_j[pos - 1]
                    pos -= 1
                best_d[pos] = d
                best_j[pos] = j
                if size == m:
                    thresh = best_d[m - 1]
            for s in range(m):
                out[bidx, i, 1 + s] = best_j[s]
    return out


def _knn_batch_np(points, k):
    B, N, _ = points.shape
    out = np.empty((B, N, k), np.int32)
    for bidx in range(B):
        pts = points[bidx]
        diff = pts[:, None, :] - pts[None, :, :]
        d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
        np.fill_diagonal(d2, -np.inf)  # self sorts first regardless of duplicates
        order = np.argsort(d2, axis=1, kind="stable")
        out[bidx] = order[:, :k]
    return out


def knn_batch(points: np.ndarray, k: int) -> np.ndarray:
    """Exact kNN per cloud: (B, N, 3) float64 -> (B, N, k) int32.

    Row i starts with i itself; the remaining k-1 entries are the nearest
    other points sorted by (squared distance, index) ascending.
    """
    points = np.ascontiguousarray(points, np.float64)
    B, N, _ = points.shape
    if NUMBA_ENABLED:
        out = np.empty((B, N, k), np.int32)
        return _knn_batch_nb(points, k, out)
    return _knn_batch_np(points, k)


# ---------------------------------------------------------------------------
# fused neighborhood-embedding layer: max over neighbors of a shared linear
# map of [relative offset, absolute position], with argmax bookkeeping
# ---------------------------------------------------------------------------

@njit(cache=True)
def _edge_linear_max_nb(points, neigh, weight, bias, out, arg):
    R, k = neigh.shape
    h = weight.shape[1]
    for i in range(R):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        for c in range(h):
            out[i, c] = -np.inf
            arg[i, c] = 0
        for j in range(k):
            nb = neigh[i, j]
            rx = points[nb, 0] - px
            ry = points[nb, 1] - py
            rz = points[nb, 2] - pz
            for c in range(h):
                z = (
                    bias[c]
                    + weight[0, c] * rx
                    + weight[1, c] * ry
                    + weight[2, c] * rz
                    + weight[3, c] * px
                    + weight[4, c] * py
                    + weight[5, c] * pz
                )
                if z > out[i, c]:
                    out[i, c] = z
                    arg[i, c] = j


def _edge_features_np(points, neigh):
    rel = points[neigh] - points[:, None, :]
    absb = np.broadcast_to(points[:, None, :], rel.shape)
    return np.concatenate([rel, absb], axis=2)  # (R, k, 6)


def _edge_linear_max_np(points, neigh, weight, bias):
    feats = _edge_features_np(points, neigh)
    z = feats @ weight + bias  # (R, k, h)
    arg = z.argmax(axis=1).astype(np.int32)
    out = np.take_along_axis(z, arg[:, None, :], axis=1)[:, 0, :]
    return out, arg


def edge_linear_max(points, neigh, weight, bias):
    """Per-point max over neighbors of a linear map of edge features.

    Edge feature of (i, j): [p_j - p_i, p_i] (6 values). Returns the
    pre-activation maxima (R, h) and the argmax neighbor slot (R, h) int32,
    ties resolved to the lowest slot.
    """
    points = np.ascontiguousarray(points, np.float64)
    if NUMBA_ENABLED:
        R, _ = neigh.shape
        h = weight.shape[1]
        out = np.empty((R, h), np.float64)
        arg = np.empty((R, h), np.int32)
        _edge_linear_max_nb(points, neigh, weight, bias, out, arg)
        return out, arg
    return _edge_linear_max_np(points, neigh, weight, bias)


@njit(cache=True)
def _edge_linear_max_bwd_nb(points, neigh, arg, gout, gw, gb):
    R, h = gout.shape
    for i in range(R):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        for c in range(h):
            g = gout[i, c]
            if g == 0.0:
                continue
            nb = neigh[i, arg[i, c]]
            gw[0, c] += g * (points[nb, 0] - px)
            gw[1, c] += g * (points[nb, 1] - py)
            gw[2, c] += g * (points[nb, 2] - pz)
            gw[3, c] += g * px
            gw[4, c] += g * py
            gw[5, c] += g * pz
            gb[c] += g


def _edge_linear_max_bwd_np(points, neigh, arg, gout):
    R, h = gout.shape
    sel = np.take_along_axis(neigh, arg, axis=1)  # (R, h) winning neighbor rows
    rel = points[sel] - points[:, None, :]  # (R, h, 3)
    absb = np.broadcast_to(points[:, None, :], rel.shape)
    feats = np.concatenate([rel, absb], axis=2)  # (R, h, 6)
    gw = np.einsum("rhc,rh->ch", feats, gout)  # (6, h)
    gb = gout.sum(axis=0)
    return gw, gb


def edge_linear_max_backward(points, neigh, arg, gout):
    """Gradients of edge_linear_max w.r.t. weight (6, h) and bias (h)."""
    points = np.ascontiguousarray(points, np.float64)
    if NUMBA_ENABLED:
        gw = np.zeros((6, gout.shape[1]), np.float64)
        gb = np.zeros(gout.shape[1], np.float64)
        _edge_linear_max_bwd_nb(points, neigh, arg, gout, gw, gb)
        return gw, gb
    return _edge_linear_max_bwd_np(points, neigh, arg, gout)


# ---------------------------------------------------------------------------
# max-relative neighborhood aggregation over feature rows
# ---------------------------------------------------------------------------

@njit(cache=True)
def _max_relative_nb(feat, neigh, out, arg):
    # max_j (feat[n_ij, c] - feat[i, c]) == (max_j feat[n_ij, c]) - feat[i, c],
    # and the row shift cannot change which j attains the max
    R, C = feat.shape
    k = neigh.shape[1]
    for i in range(R):
        nb0 = neigh[i, 0]
        for c in range(C):
            out[i, c] = feat[nb0, c]
            arg[i, c] = 0
        for j in range(1, k):
            nb = neigh[i, j]
            for c in range(C):
                v = feat[nb, c]
                if v > out[i, c]:
                    out[i, c] = v
                    arg[i, c] = j
        for c in range(C):
            out[i, c] -= feat[i, c]


def _max_relative_np(feat, neigh, chunk=2048):
    R, C = feat.shape
    out = np.empty((R, C), np.float64)
    arg = np.empty((R, C), np.int32)
    for lo in range(0, R, chunk):
        hi = min(lo + chunk, R)
        gathered = feat[neigh[lo:hi]]  # (chunk, k, C)
        a = gathered.argmax(axis=1)
        arg[lo:hi] = a.astype(np.int32)
        out[lo:hi] = np.take_along_axis(gathered, a[:, None, :], axis=1)[:, 0, :]
        out[lo:hi] -= feat[lo:hi]
    return out, arg


def max_relative(feat, neigh):
    """max_j (feat[neigh[i, j]] - feat[i]) per feature channel.

    Returns values (R, C) and the winning neighbor slot (R, C) int32 with
    first-slot tie breaking. Row i's neighbor list includes i itself
    (slot 0), so the maximum is always >= 0.
    """
    if NUMBA_ENABLED:
        R, C = feat.shape
        out = np.empty((R, C), np.float64)
        arg = np.empty((R, C), np.int32)
        _max_relative_nb(feat, neigh, out, arg)
        return out, arg
    return _max_relative_np(feat, neigh)


@njit(cache=True)
def _max_relative_scatter_nb(neigh, arg, gout, gfeat):
    R, C = gout.shape
    for i in range(R):
        for c in range(C):
            g = gout[i, c]
            if g != 0.0:
                gfeat[neigh[i, arg[i, c]], c] += g
    return gfeat


def max_relative_backward(neigh, arg, gout, nrows):
    """Gradient onto feature rows: +g scattered to winners, -g densely."""
    gfeat = np.zeros((nrows, gout.shape[1]), np.float64)
    if NUMBA_ENABLED:
        _max_relative_scatter_nb(neigh, arg, gout, gfeat)
    else:
        sel = np.take_along_axis(neigh, arg, axis=1)  # (R, C)
        cols = np.broadcast_to(np.arange(gout.shape[1], dtype=np.int64), gout.shape)
        np.add.at(gfeat, (sel.ravel(), cols.ravel()), gout.ravel())
    gfeat[: gout.shape[0]] -= gout
    return gfeat


# ---------------------------------------------------------------------------
# scatter-add of rows (backward of a row gather)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _scatter_add_rows_nb(target, idx, rows):
    n, C = rows.shape
    for r in range(n):
        t = idx[r]
        for c in range(C):
            target[t, c] += rows[r, c]
    return target


def scatter_add_rows(target, idx, rows):
    """target[idx[r]] += rows[r], accumulating duplicates in row order."""
    if NUMBA_ENABLED:
        return _scatter_add_rows_nb(target, idx, rows)
    np.add.at(target, idx, rows)
    return target


def warmup():
    """Force JIT compilation of every numba kernel (no-op on the numpy path)."""
    pts = np.zeros((1, 4, 3))
    knn_batch(pts, 2)
    p = np.zeros((4, 3))
    n = np.zeros((4, 2), np.int32)
    w = np.zeros((6, 3))
    b = np.zeros(3)
    out, arg = edge_linear_max(p, n, w, b)
    edge_linear_max_backward(p, n, arg, out)
    f = np.zeros((4, 3))
    out, arg = max_relative(f, n)
    max_relative_backward(n, arg, out, 4)
    scatter_add_rows(np.zeros((4, 3)), np.zeros(2, np.int64), np.zeros((2, 3)))
