"""Motion path memory: a flat key/value store written inside motion-path ROIs."""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .geometry import FULL_FRAME, BBox, to_grid
from .matching import FeatureGrid, squared_norms

FULL = "full"
MOTION_PATH = "motion-path"
MODES = (FULL, MOTION_PATH)


class MemoryFull(RuntimeError):
    pass


@dataclass(frozen=True)
class MemoryPolicy:
    update_interval: int = 3
    mode: str = MOTION_PATH

    def __post_init__(self):
        if self.update_interval < 1:
            raise ValueError(f"update_interval must be >= 1, got {self.update_interval}")
        if self.mode not in MODES:
            raise ValueError(f"unknown memory mode {self.mode!r}")


def should_update(policy: MemoryPolicy, frame_index: int) -> bool:
    if frame_index < 0:
        raise ValueError(f"negative frame index {frame_index}")
    return frame_index % policy.update_interval == 0


class MemoryStats(NamedTuple):
    entries: int
    bytes: int
    histogram: list


class MemoryBank:
    """Growable store of (key, value) rows with (frame, row, col) provenance.

    Rows are only ever appended; :meth:`reset` is the one way to shrink it.
    """

    def __init__(self, key_dim: int, value_dim: int, max_entries: Optional[int] = None, capacity: int = 4096):
        self.key_dim = key_dim
        self.value_dim = value_dim
        self.max_entries = max_entries
        self._keys = np.empty((capacity, key_dim))
        self._values = np.empty((capacity, value_dim))
        self._norms = np.empty(capacity)
        self._prov = np.empty((capacity, 3), dtype=np.int64)
        self._n = 0
        self.writes: list[tuple[int, int]] = []  # (frame, entries added)

    def __len__(self) -> int:
        return self._n

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: self._n]

    @property
    def values(self) -> np.ndarray:
        return self._values[: self._n]

    @property
    def key_norms(self) -> np.ndarray:
        return self._norms[: self._n]

    @property
    def provenance(self) -> np.ndarray:
        return self._prov[: self._n]

    def reset(self) -> None:
        self._n = 0
        self.writes.clear()

    def _reserve(self, extra: int) -> None:
        need = self._n + extra
        if self.max_entries is not None and need > self.max_entries:
            raise MemoryFull(f"memory would hold {need} entries, limit is {self.max_entries}")
        cap = len(self._keys)
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_keys", "_values", "_norms", "_prov"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def append(self, keys: np.ndarray, values: np.ndarray, frame: int, rows: np.ndarray, cols: np.ndarray) -> int:
        m = len(keys)
        if values.shape != (m, self.value_dim) or keys.shape != (m, self.key_dim):
            raise ValueError(f"expected ({m}, {self.key_dim}) keys and ({m}, {self.value_dim}) values")
        self._reserve(m)
        sl = slice(self._n, self._n + m)
        self._keys[sl] = keys
        self._values[sl] = values
        self._norms[sl] = squared_norms(keys)
        self._prov[sl, 0] = frame
        self._prov[sl, 1] = rows
        self._prov[sl, 2] = cols
        self._n += m
        self.writes.append((frame, m))
        return m


def update(bank: MemoryBank, grid: FeatureGrid, labels: np.ndarray, roi: BBox, mode: str, frame: int) -> MemoryBank:
    """Memorize a frame's cells, restricted to ``roi`` in motion-path mode.

    ``labels`` holds one value vector per cell, shape (H, W, Cv). The first
    write into an empty bank is the annotated frame and always covers the
    full frame.
    """
    if mode not in MODES:
        raise ValueError(f"unknown memory mode {mode!r}")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape[:2] != (grid.H, grid.W) or labels.ndim != 3:
        raise ValueError(f"labels of shape {labels.shape} do not match a {grid.H}x{grid.W} grid")
    if mode == FULL or len(bank) == 0:
        roi = FULL_FRAME
    rect = to_grid(roi, grid.H, grid.W)
    rs, cs = rect.slices()
    rr, cc = np.meshgrid(np.arange(rect.row0, rect.row1), np.arange(rect.col0, rect.col1), indexing="ij")
    bank.append(
        grid.keys[rs, cs].reshape(-1, grid.key_dim),
        labels[rs, cs].reshape(-1, labels.shape[2]),
        frame,
        rr.reshape(-1),
        cc.reshape(-1),
    )
    return bank


def stats(bank: MemoryBank, scalar_bytes: int = 4) -> MemoryStats:
    entries = len(bank)
    return MemoryStats(entries, entries * (bank.key_dim + bank.value_dim) * scalar_bytes, [m for _, m in bank.writes])


def dump(bank: MemoryBank, fh=None) -> str:
    """Tab-separated provenance and vectors, one line per entry (debug aid)."""
    buf = io.StringIO()
    header = ["frame", "row", "col"] + [f"k{i}" for i in range(bank.key_dim)] + [f"v{i}" for i in range(bank.value_dim)]
    buf.write("\t".join(header) + "\n")
    for prov, key, val in zip(bank.provenance, bank.keys, bank.values):
        fields = [str(int(p)) for p in prov] + [repr(float(x)) for x in key] + [repr(float(x)) for x in val]
        buf.write("\t".join(fields) + "\n")
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text
