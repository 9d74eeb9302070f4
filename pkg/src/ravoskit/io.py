"""DAVIS-style sequence folders: indexed-PNG masks, optional images, box sidecars.

Layout under a root directory::

    Annotations/<seq>/00000.png   palette-indexed label maps (0 = background)
    JPEGImages/<seq>/00000.jpg    RGB frames (used when no key grids exist)
    Keys/<seq>.npy                (T, H, W, Ck) key grids written by synthetic export
    Boxes/<seq>.json              truth boxes per frame and object
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import BBox
from .matching import FeatureGrid
from .synth import LabeledFrame, extract_keys, raster_appearance, tight_box

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


def davis_palette() -> list[int]:
    """The usual VOC/DAVIS color map, flattened to 768 ints."""
    pal = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal.extend((r, g, b))
    return pal


def write_indexed_png(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label ids must fit in 8 bits")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(davis_palette())
    img.save(path)


def read_indexed_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode == "P":
        return np.array(img, dtype=np.int64)
    # RGB masks: map each distinct non-black color to an id in order of appearance
    arr = np.array(img.convert("RGB")).reshape(-1, 3)
    colors, inv = np.unique(arr, axis=0, return_inverse=True)
    ids = np.zeros(len(colors), dtype=np.int64)
    nxt = 1
    for k, col in enumerate(colors):
        if col.any():
            ids[k] = nxt
            nxt += 1
    return ids[inv.reshape(-1)].reshape(img.size[1], img.size[0])


def atomic_write(path, data) -> None:
    """Write bytes or text to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _box_json(box: Optional[BBox]):
    return None if box is None else [round(v, 10) for v in box.as_tuple()]


def export_sequence(frames: Sequence[LabeledFrame], root, seq: str) -> Path:
    """Write a synthetic sequence as masks, key grids and a box sidecar."""
    root = Path(root)
    ann = root / "Annotations" / seq
    ann.mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_indexed_png(f.labels, ann / f"{f.index:05d}.png")
    (root / "Keys").mkdir(parents=True, exist_ok=True)
    np.save(root / "Keys" / f"{seq}.npy", np.stack([f.grid.keys for f in frames]))
    sidecar = {
        "seq": seq,
        "stride": frames[0].grid.stride,
        "frames": [
            {
                "index": f.index,
                "boxes": {str(o): _box_json(b) for o, b in sorted(f.boxes.items())},
                "analytic_boxes": {str(o): _box_json(b) for o, b in sorted(f.analytic_boxes.items())},
            }
            for f in frames
        ],
    }
    atomic_write(root / "Boxes" / f"{seq}.json", json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return ann


def list_sequences(root) -> list[str]:
    ann = Path(root) / "Annotations"
    if not ann.is_dir():
        raise FileNotFoundError(f"{ann} does not exist")
    return sorted(p.name for p in ann.iterdir() if p.is_dir())


def _downsample_labels(labels: np.ndarray, H: int, W: int) -> np.ndarray:
    # sample each cell at its center pixel
    h, w = labels.shape
    rows = np.minimum(((np.arange(H) + 0.5) * h / H).astype(int), h - 1)
    cols = np.minimum(((np.arange(W) + 0.5) * w / W).astype(int), w - 1)
    return labels[np.ix_(rows, cols)]


def load_sequence(
    root,
    seq: str,
    key_dim: int = 16,
    stride: int = 16,
    position_weight: float = 0.5,
    context_weight: float = 1.0,
) -> list[LabeledFrame]:
    """Read one sequence; key grids come from ``Keys/`` if present, else from images.

    Image-derived grids have one cell per ``stride`` x ``stride`` pixels.
    """
    root = Path(root)
    masks = sorted((root / "Annotations" / seq).glob("*.png"))
    if not masks:
        raise FileNotFoundError(f"no annotation PNGs under {root / 'Annotations' / seq}")
    labels_full = [read_indexed_png(p) for p in masks]
    keys_file = root / "Keys" / f"{seq}.npy"
    if keys_file.exists():
        keys = np.load(keys_file)
        if len(keys) != len(labels_full):
            raise ValueError(f"{keys_file} holds {len(keys)} frames, annotations have {len(labels_full)}")
        grids = [FeatureGrid(k) for k in keys]
    else:
        img_dir = root / "JPEGImages" / seq
        images = sorted(p for p in img_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if img_dir.is_dir() else []
        if len(images) != len(labels_full):
            raise FileNotFoundError(f"expected {len(labels_full)} frames in {img_dir}, found {len(images)}")
        grids = []
        for p in images:
            rgb = np.array(Image.open(p).convert("RGB"))
            H = max(1, rgb.shape[0] // stride)
            W = max(1, rgb.shape[1] // stride)
            app = raster_appearance(rgb, H, W, (key_dim - 2) // 2)
            grids.append(FeatureGrid(extract_keys(app, position_weight=position_weight, context_weight=context_weight), stride=stride))
    frames = []
    for t, (grid, lab) in enumerate(zip(grids, labels_full)):
        small = lab if lab.shape == (grid.H, grid.W) else _downsample_labels(lab, grid.H, grid.W)
        ids = sorted(int(o) for o in np.unique(small) if o != 0)
        boxes = {o: tight_box(small == o) for o in ids}
        frames.append(LabeledFrame(grid, small.astype(np.int64), boxes, {}, t))
    return frames


def write_predictions(labels: Sequence[np.ndarray], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, lab in enumerate(labels):
        write_indexed_png(lab, out_dir / f"{t:05d}.png")
