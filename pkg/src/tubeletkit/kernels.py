"""Hot numeric kernels, each with a numba and a numpy implementation.

The public names (``iou_matrix``, ``affine_rows``, ...) dispatch to the numba
variant unless ``TUBELETKIT_NO_NUMBA=1``. Both variants perform the same
floating-point operations in the same order, so results agree to the last bit
for the arithmetic kernels and to libm rounding for ``hash_normal``.

All kernels are row-independent: the result for one row never depends on how
many other rows share the call. Batched and one-at-a-time callers therefore
get bit-identical outputs.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, jit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_HASH_INIT = np.uint64(0x243F6A8885A308D3)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO = np.uint64(2)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# pairwise IoU, center-form boxes (x, y, w, h)


def np_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax0 = a[:, 0] - a[:, 2] / 2.0
    ax1 = a[:, 0] + a[:, 2] / 2.0
    ay0 = a[:, 1] - a[:, 3] / 2.0
    ay1 = a[:, 1] + a[:, 3] / 2.0
    bx0 = b[:, 0] - b[:, 2] / 2.0
    bx1 = b[:, 0] + b[:, 2] / 2.0
    by0 = b[:, 1] - b[:, 3] / 2.0
    by1 = b[:, 1] + b[:, 3] / 2.0
    iw = np.minimum(ax1[:, None], bx1[None, :]) - np.maximum(ax0[:, None], bx0[None, :])
    ih = np.minimum(ay1[:, None], by1[None, :]) - np.maximum(ay0[:, None], by0[None, :])
    iw = np.maximum(iw, 0.0)
    ih = np.maximum(ih, 0.0)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


def _nb_iou_matrix_py(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        ax0 = a[i, 0] - a[i, 2] / 2.0
        ax1 = a[i, 0] + a[i, 2] / 2.0
        ay0 = a[i, 1] - a[i, 3] / 2.0
        ay1 = a[i, 1] + a[i, 3] / 2.0
        area_a = a[i, 2] * a[i, 3]
        for j in range(m):
            bx0 = b[j, 0] - b[j, 2] / 2.0
            bx1 = b[j, 0] + b[j, 2] / 2.0
            by0 = b[j, 1] - b[j, 3] / 2.0
            by1 = b[j, 1] + b[j, 3] / 2.0
            iw = min(ax1, bx1) - max(ax0, bx0)
            ih = min(ay1, by1) - max(ay0, by0)
            if iw < 0.0:
                iw = 0.0
            if ih < 0.0:
                ih = 0.0
            inter = iw * ih
            out[i, j] = inter / (area_a + b[j, 2] * b[j, 3] - inter)
    return out


# ---------------------------------------------------------------------------
# affine map with a fixed accumulation order: out = b + sum_k x[:, k] * W[k]


def np_affine_rows(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = np.empty((x.shape[0], weights.shape[1]))
    out[:] = bias
    for k in range(weights.shape[0]):
        out += x[:, k : k + 1] * weights[k]
    return out


def _nb_affine_rows_py(x, weights, bias):
    n = x.shape[0]
    kdim = weights.shape[0]
    m = weights.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = bias[j]
        for k in range(kdim):
            xv = x[i, k]
            for j in range(m):
                out[i, j] += xv * weights[k, j]
    return out


# ---------------------------------------------------------------------------
# counter-based Gaussian noise keyed by integer tuples (splitmix64 + Box-Muller)


def _np_splitmix(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def np_hash_normal(keys: np.ndarray, dim: int) -> np.ndarray:
    h = np.full(keys.shape[0], _HASH_INIT, dtype=np.uint64)
    for k in range(keys.shape[1]):
        h = _np_splitmix(h ^ keys[:, k])
    out = np.empty((keys.shape[0], dim))
    for c in range(dim):
        cc = np.uint64(c)
        a = _np_splitmix(h ^ (_TWO * cc))
        b = _np_splitmix(h ^ (_TWO * cc + _ONE))
        u1 = ((a >> _S11) + _ONE).astype(np.float64) * _INV53
        u2 = (b >> _S11).astype(np.float64) * _INV53
        out[:, c] = np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)
    return out


def _nb_splitmix_py(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


_nb_splitmix = jit(_nb_splitmix_py)


def _nb_hash_normal_py(keys, dim):
    n = keys.shape[0]
    out = np.empty((n, dim))
    for i in range(n):
        h = _HASH_INIT
        for k in range(keys.shape[1]):
            h = _nb_splitmix(h ^ keys[i, k])
        for c in range(dim):
            cc = np.uint64(c)
            a = _nb_splitmix(h ^ (_TWO * cc))
            b = _nb_splitmix(h ^ (_TWO * cc + _ONE))
            u1 = np.float64((a >> _S11) + _ONE) * _INV53
            u2 = np.float64(b >> _S11) * _INV53
            out[i, c] = np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)
    return out


# ---------------------------------------------------------------------------
# nearest valid point within a radius; ties go to the lower index


def np_nearest_within(query: np.ndarray, points: np.ndarray, valid: np.ndarray, radius: float) -> np.ndarray:
    if points.shape[0] == 0:
        return np.full(query.shape[0], -1, dtype=np.int64)
    dx = query[:, 0:1] - points[None, :, 0]
    dy = query[:, 1:2] - points[None, :, 1]
    d2 = dx * dx + dy * dy
    d2 = np.where(valid[None, :], d2, np.inf)
    idx = np.argmin(d2, axis=1).astype(np.int64)
    best = d2[np.arange(query.shape[0]), idx]
    idx[~(best <= radius * radius)] = -1
    return idx


def _nb_nearest_within_py(query, points, valid, radius):
    n = query.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    r2 = radius * radius
    for i in range(n):
        best = np.inf
        for j in range(points.shape[0]):
            if not valid[j]:
                continue
            dx = query[i, 0] - points[j, 0]
            dy = query[i, 1] - points[j, 1]
            d2 = dx * dx + dy * dy
            if d2 < best:
                best = d2
                out[i] = j
        if not best <= r2:
            out[i] = -1
    return out


# ---------------------------------------------------------------------------
# greedy detection-to-GT matching in ranking order (one class at a time)


def np_greedy_match(det_frame, det_boxes, gt_frame, gt_boxes, threshold):
    tp = np.zeros(det_frame.shape[0], dtype=np.bool_)
    used = np.zeros(gt_frame.shape[0], dtype=np.bool_)
    by_frame: dict[int, np.ndarray] = {}
    for f in np.unique(gt_frame):
        by_frame[int(f)] = np.flatnonzero(gt_frame == f)
    for i in range(det_frame.shape[0]):
        cand = by_frame.get(int(det_frame[i]))
        if cand is None:
            continue
        free = cand[~used[cand]]
        if free.size == 0:
            continue
        ious = np_iou_matrix(det_boxes[i : i + 1], gt_boxes[free])[0]
        j = int(np.argmax(ious))
        if ious[j] >= threshold:
            tp[i] = True
            used[free[j]] = True
    return tp


def _nb_greedy_match_py(det_frame, det_boxes, gt_frame, gt_boxes, threshold):
    nd = det_frame.shape[0]
    ng = gt_frame.shape[0]
    tp = np.zeros(nd, dtype=np.bool_)
    used = np.zeros(ng, dtype=np.bool_)
    for i in range(nd):
        best = -1.0
        best_j = -1
        for j in range(ng):
            if used[j] or gt_frame[j] != det_frame[i]:
                continue
            v = _nb_iou_matrix(det_boxes[i : i + 1], gt_boxes[j : j + 1])[0, 0]
            if v > best:
                best = v
                best_j = j
        if best_j >= 0 and best >= threshold:
            tp[i] = True
            used[best_j] = True
    return tp


_nb_iou_matrix = jit(_nb_iou_matrix_py)
_nb_affine_rows = jit(_nb_affine_rows_py)
_nb_hash_normal = jit(_nb_hash_normal_py)
_nb_nearest_within = jit(_nb_nearest_within_py)
_nb_greedy_match = jit(_nb_greedy_match_py)

NUMBA_KERNELS = {
    "iou_matrix": _nb_iou_matrix,
    "affine_rows": _nb_affine_rows,
    "hash_normal": _nb_hash_normal,
    "nearest_within": _nb_nearest_within,
    "greedy_match": _nb_greedy_match,
}
NUMPY_KERNELS = {
    "iou_matrix": np_iou_matrix,
    "affine_rows": np_affine_rows,
    "hash_normal": np_hash_normal,
    "nearest_within": np_nearest_within,
    "greedy_match": np_greedy_match,
}

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between center-form box arrays ``(N, 4)`` and ``(M, 4)``."""
    return _ACTIVE["iou_matrix"](_f64(a).reshape(-1, 4), _f64(b).reshape(-1, 4))


def affine_rows(x, weights, bias) -> np.ndarray:
    """``x @ weights + bias`` accumulated in a fixed, batch-independent order."""
    return _ACTIVE["affine_rows"](_f64(x), _f64(weights), _f64(bias))


def hash_normal(keys, dim: int) -> np.ndarray:
    """Standard-normal samples ``(N, dim)``, a pure function of each key row."""
    k = np.ascontiguousarray(keys, dtype=np.int64).view(np.uint64)
    return _ACTIVE["hash_normal"](k, int(dim))


def nearest_within(query, points, valid, radius: float) -> np.ndarray:
    """Index of the nearest valid point within ``radius`` of each query, or -1."""
    return _ACTIVE["nearest_within"](
        _f64(query).reshape(-1, 2),
        _f64(points).reshape(-1, 2),
        np.ascontiguousarray(valid, dtype=np.bool_),
        float(radius),
    )


def greedy_match(det_frame, det_boxes, gt_frame, gt_boxes, threshold: float) -> np.ndarray:
    """TP flags for detections already sorted by descending score."""
    return _ACTIVE["greedy_match"](
        np.ascontiguousarray(det_frame, dtype=np.int64),
        _f64(det_boxes).reshape(-1, 4),
        np.ascontiguousarray(gt_frame, dtype=np.int64),
        _f64(gt_boxes).reshape(-1, 4),
        float(threshold),
    )
