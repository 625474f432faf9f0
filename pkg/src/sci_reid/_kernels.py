"""Hot loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``SCI_DISABLE_NUMBA`` is not
set to a truthy value. Both paths accumulate in the same order, so they
return bit-identical results.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("SCI_DISABLE_NUMBA", "").strip().lower()

try:
    if _FLAG in ("1", "true", "yes", "on"):
        raise ImportError("numba disabled by SCI_DISABLE_NUMBA")
    from numba import njit
except ImportError:
    njit = None

HAVE_NUMBA = njit is not None


def _rank_metrics_numpy(dist, junk, pos, kmax):
    nq = dist.shape[0]
    hits = np.zeros((nq, kmax), dtype=np.float64)
    ap = np.zeros(nq, dtype=np.float64)
    valid = np.zeros(nq, dtype=np.bool_)
    for i in range(nq):
        order = np.argsort(dist[i], kind="mergesort")
        keep = ~junk[i, order]
        good = pos[i, order][keep]
        npos = int(good.sum())
        if npos == 0:
            continue
        valid[i] = True
        ranks = np.flatnonzero(good) + 1.0
        hit_count = np.arange(1, npos + 1, dtype=np.float64)
        ap[i] = np.cumsum(hit_count / ranks)[-1] / npos
        first = int(ranks[0])
        if first <= kmax:
            hits[i, first - 1:] = 1.0
    return hits, ap, valid


def _rank_metrics_loop(dist, junk, pos, kmax):
    nq, ng = dist.shape
    hits = np.zeros((nq, kmax), dtype=np.float64)
    ap = np.zeros(nq, dtype=np.float64)
    valid = np.zeros(nq, dtype=np.bool_)
    for i in range(nq):
        order = np.argsort(dist[i], kind="mergesort")
        rank = 0
        found = 0
        first = -1
        acc = 0.0
        for j in range(ng):
            g = order[j]
            if junk[i, g]:
                continue
            rank += 1
            if pos[i, g]:
                found += 1
                acc += found / float(rank)
                if first < 0:
                    first = rank
        if found == 0:
            continue
        valid[i] = True
        ap[i] = acc / found
        if first <= kmax:
            for k in range(first - 1, kmax):
                hits[i, k] = 1.0
    return hits, ap, valid


if HAVE_NUMBA:
    rank_metrics = njit(cache=False, nogil=True)(_rank_metrics_loop)
else:
    rank_metrics = _rank_metrics_numpy

rank_metrics_numpy = _rank_metrics_numpy
