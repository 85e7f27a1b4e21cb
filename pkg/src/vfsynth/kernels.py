"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

The loop-heavy inner kernels (cyclic-Jacobi eigensolver, decision-tree split
search, pairwise mixed-cosine distances) are compiled with numba when it is
available. Setting the environment variable ``VFSYNTH_NUMBA=0`` before import
forces the pure-numpy fallbacks; ``benchmarks/bench_kernels.py`` compares the
two paths. Both paths implement the same arithmetic in the same order, so
results agree to the last few ulps (the split search is exact-integer inside
and agrees bitwise).
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = [
    "USING_NUMBA",
    "jacobi_eigh",
    "EigenSolverError",
    "best_split",
    "nearest_neighbor_distances",
]

_flag = os.environ.get("VFSYNTH_NUMBA", "").strip().lower()
if _flag in ("0", "false", "off", "no"):
    _numba_requested = False
else:
    _numba_requested = True

if _numba_requested:
    try:
        from numba import njit

        USING_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USING_NUMBA = False
else:
    USING_NUMBA = False


class EigenSolverError(RuntimeError):
    """Cyclic Jacobi failed to reach the off-diagonal threshold."""


# ---------------------------------------------------------------------------
# symmetric eigendecomposition: cyclic Jacobi
# ---------------------------------------------------------------------------

def _jacobi_core_numba(a, v, tol_eff, max_sweeps):  # pragma: no cover - jit
    d = a.shape[0]
    for _sweep in range(max_sweeps):
        off = 0.0
        for i in range(d):
            for j in range(i + 1, d):
                off += 2.0 * a[i, j] * a[i, j]
        if math.sqrt(off) <= tol_eff:
            return 1
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                app = a[p, p]
                aqq = a[q, q]
                for k in range(d):
                    if k != p and k != q:
                        akp = a[k, p]
                        akq = a[k, q]
                        a[k, p] = c * akp - s * akq
                        a[k, q] = s * akp + c * akq
                        a[p, k] = a[k, p]
                        a[q, k] = a[k, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(d):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    off = 0.0
    for i in range(d):
        for j in range(i + 1, d):
            off += 2.0 * a[i, j] * a[i, j]
    return 1 if math.sqrt(off) <= tol_eff else 0


def _jacobi_core_numpy(a, v, tol_eff, max_sweeps):
    d = a.shape[0]
    idx = np.arange(d)
    for _sweep in range(max_sweeps):
        off = math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))
        if off <= tol_eff:
            return 1
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                app = a[p, p]
                aqq = a[q, q]
                mask = (idx != p) & (idx != q)
                akp = a[mask, p].copy()
                akq = a[mask, q].copy()
                a[mask, p] = c * akp - s * akq
                a[mask, q] = s * akp + c * akq
                a[p, mask] = a[mask, p]
                a[q, mask] = a[mask, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vkp = v[:, p].copy()
                vkq = v[:, q].copy()
                v[:, p] = c * vkp - s * vkq
                v[:, q] = s * vkp + c * vkq
    off = math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))
    return 1 if off <= tol_eff else 0


if USING_NUMBA:
    _jacobi_core = njit(cache=True)(_jacobi_core_numba)
else:
    _jacobi_core = _jacobi_core_numpy


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvectors as columns). Convergence is
    declared when the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||a||_F)``; raises :class:`EigenSolverError` otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] == 0:
        return np.empty(0), np.empty((0, 0))
    work = np.array(a, dtype=np.float64, order="C", copy=True)
    d = work.shape[0]
    vecs = np.eye(d)
    tol_eff = tol * max(1.0, float(np.linalg.norm(work)))
    ok = _jacobi_core(work, vecs, tol_eff, max_sweeps)
    if not ok:
        raise EigenSolverError(
            f"Jacobi sweeps exhausted (max_sweeps={max_sweeps}, tol={tol})"
        )
    w = np.diag(work).copy()
    order = np.argsort(w, kind="stable")
    return w[order], vecs[:, order]


# ---------------------------------------------------------------------------
# decision-tree split search
# ---------------------------------------------------------------------------

def _best_split_numba(x, y, n_classes):  # pragma: no cover - jit
    n, k = x.shape
    best_score = np.inf
    best_feat = -1
    best_thresh = 0.0
    counts = np.zeros(n_classes, dtype=np.int64)
    total = np.zeros(n_classes, dtype=np.int64)
    for i in range(n):
        total[y[i]] += 1
    ss_total = 0
    for c in range(n_classes):
        ss_total += total[c] * total[c]
    for j in range(k):
        order = np.argsort(x[:, j])
        for c in range(n_classes):
            counts[c] = 0
        ssl = 0
        for i in range(n - 1):
            yi = y[order[i]]
            ssl += 2 * counts[yi] + 1
            counts[yi] += 1
            xi = x[order[i], j]
            xnext = x[order[i + 1], j]
            if xi < xnext:
                nl = i + 1
                nr = n - nl
                ssr = 0
                for c in range(n_classes):
                    rem = total[c] - counts[c]
                    ssr += rem * rem
                score = (nl - ssl / nl) + (nr - ssr / nr)
                if score < best_score:
                    best_score = score
                    best_feat = j
                    best_thresh = 0.5 * (xi + xnext)
    return best_feat, best_thresh, best_score


def _best_split_numpy(x, y, n_classes):
    n, k = x.shape
    onehot = np.zeros((n, n_classes), dtype=np.int64)
    onehot[np.arange(n), y] = 1
    best_score = np.inf
    best_feat = -1
    best_thresh = 0.0
    for j in range(k):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        cum = np.cumsum(onehot[order], axis=0)
        total = cum[-1]
        nl = np.arange(1, n, dtype=np.int64)
        ssl = np.sum(cum[:-1] ** 2, axis=1)
        ssr = np.sum((total[None, :] - cum[:-1]) ** 2, axis=1)
        nr = n - nl
        score = (nl - ssl / nl) + (nr - ssr / nr)
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        score = np.where(valid, score, np.inf)
        i = int(np.argmin(score))
        if score[i] < best_score:
            best_score = float(score[i])
            best_feat = j
            best_thresh = 0.5 * (xs[i] + xs[i + 1])
    return best_feat, best_thresh, best_score


if USING_NUMBA:
    _best_split = njit(cache=True)(_best_split_numba)
else:
    _best_split = _best_split_numpy


def best_split(x: np.ndarray, y: np.ndarray, n_classes: int):
    """Best gini split over the given feature columns.

    Returns ``(feature_index, threshold)`` or ``None`` when no feature admits
    a split (all candidate columns constant). ``x`` is (n, k) float64, ``y``
    is (n,) int64 class codes.
    """
    feat, thresh, _score = _best_split(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.int64),
        n_classes,
    )
    if feat < 0:
        return None
    return int(feat), float(thresh)


# ---------------------------------------------------------------------------
# nearest-neighbor distances under the mixed cosine metric
# ---------------------------------------------------------------------------

def _nn_dist_numba(cat, cont, w_cat, w_cont):  # pragma: no cover - jit
    n = cat.shape[0] if cat.shape[1] > 0 else cont.shape[0]
    dc = cat.shape[1]
    dk = cont.shape[1]
    norm_cat = np.zeros(n)
    norm_cont = np.zeros(n)
    for i in range(n):
        s = 0.0
        for j in range(dc):
            s += cat[i, j] * cat[i, j]
        norm_cat[i] = math.sqrt(s)
        s = 0.0
        for j in range(dk):
            s += cont[i, j] * cont[i, j]
        norm_cont[i] = math.sqrt(s)
    out = np.full(n, np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            cos_cat = 0.0
            if dc > 0:
                if norm_cat[i] == 0.0 and norm_cat[j] == 0.0:
                    cos_cat = 1.0
                elif norm_cat[i] > 0.0 and norm_cat[j] > 0.0:
                    s = 0.0
                    for m in range(dc):
                        s += cat[i, m] * cat[j, m]
                    cos_cat = s / (norm_cat[i] * norm_cat[j])
            cos_cont = 0.0
            if dk > 0:
                if norm_cont[i] == 0.0 and norm_cont[j] == 0.0:
                    cos_cont = 1.0
                elif norm_cont[i] > 0.0 and norm_cont[j] > 0.0:
                    s = 0.0
                    for m in range(dk):
                        s += cont[i, m] * cont[j, m]
                    cos_cont = s / (norm_cont[i] * norm_cont[j])
            d = 1.0 - w_cat * cos_cat - w_cont * cos_cont
            if d < out[i]:
                out[i] = d
            if d < out[j]:
                out[j] = d
    return out


def _cosine_matrix(block):
    norms = np.linalg.norm(block, axis=1)
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    unit = block / safe[:, None]
    cos = unit @ unit.T
    # zero-vector convention: cos = 1 against another zero vector, else 0
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    both = np.outer(zero, zero)
    cos[both] = 1.0
    return cos


def _nn_dist_numpy(cat, cont, w_cat, w_cont):
    n = cat.shape[0] if cat.shape[1] > 0 else cont.shape[0]
    dist = np.ones((n, n))
    if cat.shape[1] > 0:
        dist -= w_cat * _cosine_matrix(cat)
    if cont.shape[1] > 0:
        dist -= w_cont * _cosine_matrix(cont)
    np.fill_diagonal(dist, np.inf)
    return dist.min(axis=1)


if USING_NUMBA:
    _nn_dist = njit(cache=True)(_nn_dist_numba)
else:
    _nn_dist = _nn_dist_numpy


def nearest_neighbor_distances(
    cat: np.ndarray, cont: np.ndarray, w_cat: float, w_cont: float
) -> np.ndarray:
    """Per-record distance to the nearest other record.

    The metric is ``1 - w_cat*cos(cat_i, cat_j) - w_cont*cos(cont_i, cont_j)``
    with the zero-vector guard: cosine 1 against another all-zero vector,
    0 against anything else.
    """
    cat = np.ascontiguousarray(cat, dtype=np.float64)
    cont = np.ascontiguousarray(cont, dtype=np.float64)
    n = cat.shape[0] if cat.size else cont.shape[0]
    if n < 2:
        raise ValueError("need at least 2 records")
    if cat.shape[1] == 0 and cont.shape[1] == 0:
        raise ValueError("need at least one attribute block")
    return _nn_dist(cat, cont, float(w_cat), float(w_cont))
