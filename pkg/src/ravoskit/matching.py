"""Regional memory read: L2 affinity, top-k softmax and value retrieval.

Similarity between a query cell and a memory key is the negative squared
Euclidean distance. Each query row keeps its k most similar memory entries,
normalizes them with a softmax and averages their values.

The kernels evaluate every (query, key) pair with the same straight-line
arithmetic, so a row's result does not depend on which other rows were
computed with it. That makes cropped and full-frame reads agree bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .geometry import GridRect


@dataclass
class FeatureGrid:
    """Per-cell keys (H, W, Ck) with optional per-cell values (H, W, Cv)."""

    keys: np.ndarray
    values: Optional[np.ndarray] = None
    stride: int = 4

    def __post_init__(self):
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float64)
        if self.keys.ndim != 3:
            raise ValueError(f"keys must be (H, W, C), got shape {self.keys.shape}")
        if self.values is not None:
            self.values = np.ascontiguousarray(self.values, dtype=np.float64)
            if self.values.shape[:2] != self.keys.shape[:2]:
                raise ValueError("values and keys disagree on grid size")
        if not np.all(np.isfinite(self.keys)):
            raise ValueError("non-finite key vector")

    @property
    def H(self) -> int:
        return self.keys.shape[0]

    @property
    def W(self) -> int:
        return self.keys.shape[1]

    @property
    def key_dim(self) -> int:
        return self.keys.shape[2]

    def flat_keys(self) -> np.ndarray:
        return self.keys.reshape(-1, self.key_dim)


@dataclass
class ObjectQuery:
    """Keys cropped from a grid, row-major, with their absolute cell coordinates."""

    keys: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    H: int
    W: int

    def __len__(self) -> int:
        return len(self.keys)

    def scatter(self, data: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Place per-row ``data`` back at its grid cells."""
        data = np.asarray(data)
        out = np.full((self.H, self.W) + data.shape[1:], fill, dtype=np.result_type(data, type(fill)))
        out[self.rows, self.cols] = data
        return out


@dataclass
class Affinity:
    """Sparse affinity rows: ``indices[i, j]`` into the bank with ``weights[i, j]``.

    Columns are sorted by decreasing similarity.
    """

    indices: np.ndarray
    weights: np.ndarray
    sims: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def row(self, i: int) -> list[tuple[int, float]]:
        return [(int(j), float(w)) for j, w in zip(self.indices[i], self.weights[i])]

    def rows(self) -> list[list[tuple[int, float]]]:
        return [self.row(i) for i in range(len(self))]


def l2_similarity(q, k) -> float:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {k.shape}")
    d = q - k
    return -float(np.dot(d, d))


def crop_query(grid: FeatureGrid, roi: GridRect) -> ObjectQuery:
    if not roi.within(grid.H, grid.W):
        raise ValueError(f"{roi} outside {grid.H}x{grid.W} grid")
    rs, cs = roi.slices()
    keys = grid.keys[rs, cs].reshape(-1, grid.key_dim)
    rr, cc = np.meshgrid(np.arange(roi.row0, roi.row1), np.arange(roi.col0, roi.col1), indexing="ij")
    return ObjectQuery(np.ascontiguousarray(keys), rr.reshape(-1), cc.reshape(-1), grid.H, grid.W)


def query_cells(grid: FeatureGrid, mask: np.ndarray) -> ObjectQuery:
    """Row-major query over an arbitrary boolean cell mask."""
    rows, cols = np.nonzero(mask)
    return ObjectQuery(np.ascontiguousarray(grid.keys[rows, cols]), rows, cols, grid.H, grid.W)


def squared_norms(x: np.ndarray) -> np.ndarray:
    return _row_norms(np.ascontiguousarray(x, dtype=np.float64))


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def _row_norms(x):
    n, c = x.shape
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for t in range(c):
            acc += x[i, t] * x[i, t]
        out[i] = acc
    return out


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def _topk_kernel(Q, qn, K, kn, k):
    n, C = Q.shape
    N = K.shape[0]
    idx = np.empty((n, k), np.int64)
    sim = np.empty((n, k))
    w = np.empty((n, k))
    best_v = np.empty(k)
    best_i = np.empty(k, np.int64)
    for i in range(n):
        cnt = 0
        for j in range(N):
            dot = 0.0
            for t in range(C):
                dot += Q[i, t] * K[j, t]
            s = 2.0 * dot - qn[i] - kn[j]
            # strict comparisons keep the lower memory index on ties
            if cnt < k or s > best_v[k - 1]:
                p = cnt if cnt < k else k - 1
                while p > 0 and best_v[p - 1] < s:
                    best_v[p] = best_v[p - 1]
                    best_i[p] = best_i[p - 1]
                    p -= 1
                best_v[p] = s
                best_i[p] = j
                if cnt < k:
                    cnt += 1
        top = best_v[0]
        total = 0.0
        for p in range(k):
            e = np.exp(best_v[p] - top)
            w[i, p] = e
            total += e
        for p in range(k):
            w[i, p] /= total
            idx[i, p] = best_i[p]
            sim[i, p] = best_v[p]
    return idx, sim, w


@numba.njit(cache=True)
def _gather_kernel(idx, w, V):
    n, k = idx.shape
    cv = V.shape[1]
    out = np.zeros((n, cv))
    for i in range(n):
        for p in range(k):
            j = idx[i, p]
            wp = w[i, p]
            for c in range(cv):
                out[i, c] += wp * V[j, c]
    return out


def _as_keys(q_obj) -> np.ndarray:
    keys = q_obj.keys if isinstance(q_obj, ObjectQuery) else q_obj
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    if keys.ndim == 1:
        keys = keys[None, :]
    return keys


def affinity_topk(q_obj, bank, k: int = 20) -> Affinity:
    """Top-k softmax affinity of each query row against the bank's keys.

    ``bank`` is anything exposing ``keys`` (N, Ck) and ``key_norms`` (N,), such
    as :class:`ravoskit.memory.MemoryBank`. When k exceeds the bank size every
    entry is kept, which is the dense softmax.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    keys = bank.keys
    if len(keys) == 0:
        raise ValueError("memory bank is empty")
    Q = _as_keys(q_obj)
    if Q.shape[1] != keys.shape[1]:
        raise ValueError(f"query dim {Q.shape[1]} does not match key dim {keys.shape[1]}")
    kk = min(k, len(keys))
    if len(Q) == 0:
        return Affinity(np.empty((0, kk), np.int64), np.empty((0, kk)), np.empty((0, kk)))
    idx, sim, w = _topk_kernel(Q, _row_norms(Q), keys, bank.key_norms, kk)
    return Affinity(idx, w, sim)


def propagate(aff: Affinity, bank) -> np.ndarray:
    """Weighted average of memory values for each affinity row, shape (n, Cv)."""
    values = bank.values
    if aff.indices.size and (aff.indices.min() < 0 or aff.indices.max() >= len(values)):
        raise IndexError("affinity refers to entries outside the memory bank")
    return _gather_kernel(aff.indices, aff.weights, np.ascontiguousarray(values, dtype=np.float64))
