"""Synthetic multi-object videos rendered directly at feature-grid resolution.

Stands in for both the image encoder and the video datasets: every frame comes
with exact label maps, tight truth boxes and handcrafted per-cell keys.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import BBox, from_grid, GridRect
from .matching import FeatureGrid
from .seeding import substream
from .tracker import TrainBatch

log = logging.getLogger(__name__)

SHAPES = ("ellipse", "rect")
TRAJECTORIES = ("static", "constant-velocity", "constant-acceleration", "sinusoidal")


@dataclass
class ObjectSpec:
    """One moving object. Sizes, positions and rates are in normalized units per frame."""

    center: tuple[float, float]
    half_size: tuple[float, float]
    shape: str = "ellipse"
    trajectory: str = "constant-velocity"
    velocity: tuple[float, float] = (0.0, 0.0)
    acceleration: tuple[float, float] = (0.0, 0.0)
    amplitude: tuple[float, float] = (0.0, 0.0)
    period: float = 20.0
    phase: float = 0.0
    appearance: Optional[Sequence[float]] = None
    absent: Optional[tuple[int, int]] = None  # inclusive frame range with no object

    def center_at(self, t: int) -> tuple[float, float]:
        cx, cy = self.center
        if self.trajectory == "static":
            return cx, cy
        vx, vy = self.velocity
        if self.trajectory == "constant-velocity":
            return cx + vx * t, cy + vy * t
        if self.trajectory == "constant-acceleration":
            ax, ay = self.acceleration
            return cx + vx * t + 0.5 * ax * t * t, cy + vy * t + 0.5 * ay * t * t
        s = math.sin(2.0 * math.pi * t / self.period + self.phase)
        return cx + vx * t + self.amplitude[0] * s, cy + vy * t + self.amplitude[1] * s

    def box_at(self, t: int) -> BBox:
        """Analytic extent of the shape, clamped to the frame."""
        cx, cy = self.center_at(t)
        hw, hh = self.half_size
        return BBox(cx - hw, cy - hh, cx + hw, cy + hh).clamp()

    def present_at(self, t: int) -> bool:
        return self.absent is None or not (self.absent[0] <= t <= self.absent[1])


@dataclass
class SceneSpec:
    frames: int
    objects: list[ObjectSpec]
    H: int = 64
    W: int = 64
    stride: int = 4
    noise: float = 0.0
    background_seed: int = 0
    texture: float = 0.25
    key_dim: int = 16
    position_weight: float = 0.5
    context_weight: float = 1.0
    min_angle_deg: float = 60.0
    name: str = "synth"

    @property
    def appearance_dim(self) -> int:
        return (self.key_dim - 2) // 2

    def validate(self) -> None:
        if self.frames < 1:
            raise ValueError("scene needs at least one frame")
        if not self.objects:
            raise ValueError("scene needs at least one object")
        if self.H < 2 or self.W < 2:
            raise ValueError(f"grid {self.H}x{self.W} is too small")
        if self.key_dim < 4 or (self.key_dim - 2) % 2:
            raise ValueError(f"key_dim must be even and >= 4, got {self.key_dim}")
        for i, obj in enumerate(self.objects, 1):
            if obj.shape not in SHAPES:
                raise ValueError(f"object {i}: unknown shape {obj.shape!r}")
            if obj.trajectory not in TRAJECTORIES:
                raise ValueError(f"object {i}: unknown trajectory {obj.trajectory!r}")
            hw, hh = obj.half_size
            if not (0 < hw and 0 < hh):
                raise ValueError(f"object {i}: half sizes must be positive")
            if 2 * hw > 1.0 or 2 * hh > 1.0:
                raise ValueError(f"object {i} is larger than the frame")
            if obj.appearance is not None and len(obj.appearance) != self.appearance_dim:
                raise ValueError(f"object {i}: appearance must have {self.appearance_dim} dims")


@dataclass
class LabeledFrame:
    grid: FeatureGrid
    labels: np.ndarray  # (H, W) int, 0 = background
    boxes: dict[int, Optional[BBox]]  # tight boxes, None when the object has no cells
    analytic_boxes: dict[int, Optional[BBox]] = field(default_factory=dict)
    index: int = 0

    @property
    def object_ids(self) -> list[int]:
        return sorted(self.boxes)


def tight_box(mask: np.ndarray) -> Optional[BBox]:
    """Box whose edges are the outer cell edges of ``mask``; None for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    H, W = mask.shape
    return from_grid(GridRect(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1), H, W)


def sample_appearances(n: int, dim: int, min_angle_deg: float, rng: np.random.Generator, max_tries: int = 10000) -> np.ndarray:
    """``n`` unit vectors with pairwise angles of at least ``min_angle_deg``."""
    cos_max = math.cos(math.radians(min_angle_deg))
    out: list[np.ndarray] = []
    for _ in range(max_tries):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(float(v @ u) <= cos_max for u in out):
            out.append(v)
            if len(out) == n:
                return np.array(out)
    raise ValueError(f"could not place {n} appearances {min_angle_deg} degrees apart in {dim} dims")


def background_field(spec: SceneSpec, base: np.ndarray) -> np.ndarray:
    """Static smooth texture around the background appearance, shape (H, W, A)."""
    A = len(base)
    rng = substream(spec.background_seed, "texture")
    coarse = rng.standard_normal((4, 4, A)) * (spec.texture / math.sqrt(A))
    fine = ndimage.zoom(coarse, (spec.H / 4, spec.W / 4, 1), order=1, mode="nearest")
    return base[None, None, :] + fine[: spec.H, : spec.W]


def render_labels(spec: SceneSpec, t: int) -> np.ndarray:
    ys = (np.arange(spec.H) + 0.5) / spec.H
    xs = (np.arange(spec.W) + 0.5) / spec.W
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    labels = np.zeros((spec.H, spec.W), dtype=np.int32)
    for oid, obj in enumerate(spec.objects, 1):
        if not obj.present_at(t):
            continue
        cx, cy = obj.center_at(t)
        hw, hh = obj.half_size
        if obj.shape == "ellipse":
            inside = ((X - cx) / hw) ** 2 + ((Y - cy) / hh) ** 2 <= 1.0
        else:
            inside = (np.abs(X - cx) <= hw) & (np.abs(Y - cy) <= hh)
        labels[inside] = oid
    return labels


def extract_keys(appearance: np.ndarray, cell: Optional[tuple[int, int]] = None, position_weight: float = 0.5, context_weight: float = 1.0) -> np.ndarray:
    """Handcrafted keys from a per-cell appearance raster of shape (H, W, A).

    Each key is the cell's appearance, its normalized (x, y) position scaled by
    ``position_weight``, and the 3x3 neighborhood mean appearance scaled by
    ``context_weight``; 2A + 2 dims. Returns the whole (H, W, 2A+2) grid, or a
    single vector when ``cell=(row, col)`` is given.
    """
    H, W, A = appearance.shape
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    context = ndimage.uniform_filter(appearance, size=(3, 3, 1), mode="nearest")
    keys = np.concatenate(
        [appearance, position_weight * np.stack([X, Y], axis=-1), context_weight * context], axis=-1
    )
    if cell is not None:
        r, c = cell
        if not (0 <= r < H and 0 <= c < W):
            raise IndexError(f"cell {cell} outside {H}x{W} grid")
        return keys[r, c].copy()
    return keys


def raster_appearance(image: np.ndarray, H: int, W: int, dim: int) -> np.ndarray:
    """Block-average an RGB image down to an (H, W, dim) appearance raster.

    Per cell: mean r, g, b, the r-g and g-b opponents, luminance spread and
    mean luminance; truncated or zero-padded to ``dim``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    img = img[:, :, :3] / 255.0
    h, w = img.shape[:2]
    ri = (np.arange(h) * H) // h
    ci = (np.arange(w) * W) // w
    cell_id = ri[:, None] * W + ci[None, :]
    counts = np.bincount(cell_id.ravel(), minlength=H * W).astype(np.float64)
    counts[counts == 0] = 1.0
    mean = np.stack([np.bincount(cell_id.ravel(), img[:, :, c].ravel(), H * W) for c in range(3)], -1) / counts[:, None]
    lum = img @ np.array([0.299, 0.587, 0.114])
    lum_mean = np.bincount(cell_id.ravel(), lum.ravel(), H * W) / counts
    lum_sq = np.bincount(cell_id.ravel(), (lum * lum).ravel(), H * W) / counts
    lum_std = np.sqrt(np.maximum(lum_sq - lum_mean**2, 0.0))
    feats = np.column_stack([mean, mean[:, 0] - mean[:, 1], mean[:, 1] - mean[:, 2], lum_std, lum_mean])
    out = np.zeros((H * W, dim))
    m = min(dim, feats.shape[1])
    out[:, :m] = feats[:, :m]
    return out.reshape(H, W, dim)


def scene_appearances(spec: SceneSpec, seed: int) -> np.ndarray:
    """Row 0 is the background, row i the i-th object."""
    A = spec.appearance_dim
    drawn = sample_appearances(len(spec.objects) + 1, A, spec.min_angle_deg, substream(seed, "appearance"))
    for i, obj in enumerate(spec.objects, 1):
        if obj.appearance is not None:
            v = np.asarray(obj.appearance, dtype=np.float64)
            drawn[i] = v
    return drawn


def generate(spec: SceneSpec, seed: int = 0) -> list[LabeledFrame]:
    spec.validate()
    apps = scene_appearances(spec, seed)
    background = background_field(spec, apps[0])
    noise_rng = substream(seed, "noise")
    frames = []
    for t in range(spec.frames):
        labels = render_labels(spec, t)
        raster = background.copy()
        for oid in range(1, len(spec.objects) + 1):
            raster[labels == oid] = apps[oid]
        if spec.noise > 0:
            raster = raster + noise_rng.normal(0.0, spec.noise, raster.shape)
        keys = extract_keys(raster, position_weight=spec.position_weight, context_weight=spec.context_weight)
        boxes = {oid: tight_box(labels == oid) for oid in range(1, len(spec.objects) + 1)}
        analytic = {
            oid: (obj.box_at(t) if obj.present_at(t) else None) for oid, obj in enumerate(spec.objects, 1)
        }
        frames.append(LabeledFrame(FeatureGrid(keys, stride=spec.stride), labels, boxes, analytic, t))
    return frames


def box_tracks(spec: SceneSpec) -> list[list[BBox]]:
    """Analytic boxes of each object, split into runs of consecutive present frames."""
    runs = []
    for obj in spec.objects:
        cur: list[BBox] = []
        for t in range(spec.frames):
            if obj.present_at(t):
                cur.append(obj.box_at(t))
            elif cur:
                runs.append(cur)
                cur = []
        if cur:
            runs.append(cur)
    return runs


def make_tracking_dataset(specs: Sequence[SceneSpec], seed: int = 0, history: int = 2) -> TrainBatch:
    """Sliding windows of ``history`` boxes with the following box as target."""
    if not specs:
        raise ValueError("no scene specs given")
    inputs, targets = [], []
    for spec in specs:
        for run in box_tracks(spec):
            if len(run) < history + 1:
                log.warning("skipping a %d-frame track in %s (need %d)", len(run), spec.name, history + 1)
                continue
            arr = np.array([b.as_tuple() for b in run])
            for s in range(len(run) - history):
                inputs.append(arr[s:s + history].reshape(-1))
                targets.append(arr[s + history])
    if not inputs:
        return TrainBatch(np.empty((0, 4 * history)), np.empty((0, 4)))
    order = substream(seed, "dataset-shuffle").permutation(len(inputs))
    return TrainBatch(np.array(inputs)[order], np.array(targets)[order])


def _half_size_for_area(area: float, aspect: float, shape: str) -> tuple[float, float]:
    # aspect = width / height
    if shape == "ellipse":
        hh = math.sqrt(area / (math.pi * aspect))
    else:
        hh = math.sqrt(area / (4.0 * aspect))
    return aspect * hh, hh


def random_object(
    rng: np.random.Generator,
    frames: int,
    area: float,
    trajectory: str,
    focus: tuple[float, float] = (0.5, 0.5),
    spread: float = 0.5,
    max_speed: float = 0.015,
    margin: float = 0.01,
    shape: Optional[str] = None,
    absent: Optional[tuple[int, int]] = None,
    drift: tuple[float, float] = (0.0, 0.0),
) -> ObjectSpec:
    """An object whose analytic box stays inside the frame for all ``frames``."""
    shape = shape or str(rng.choice(SHAPES))
    aspect = float(np.exp(rng.uniform(-0.4, 0.4)))
    hw, hh = _half_size_for_area(area, aspect, shape)
    if 2 * hw > 1 - 2 * margin or 2 * hh > 1 - 2 * margin:
        hw, hh = _half_size_for_area(area, 1.0, shape)
    for _ in range(1000):
        cx = float(np.clip(focus[0] + rng.uniform(-spread, spread) / 2, hw + margin, 1 - hw - margin))
        cy = float(np.clip(focus[1] + rng.uniform(-spread, spread) / 2, hh + margin, 1 - hh - margin))
        angle = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(0.3, 1.0) * max_speed
        vel = (drift[0] + speed * math.cos(angle), drift[1] + speed * math.sin(angle))
        acc = tuple(float(a) for a in rng.uniform(-1, 1, 2) * max_speed / max(frames, 1) * 2)
        amp = tuple(float(a) for a in rng.uniform(0.02, 0.08, 2))
        obj = ObjectSpec(
            center=(cx, cy),
            half_size=(hw, hh),
            shape=shape,
            trajectory=trajectory,
            velocity=vel if trajectory != "sinusoidal" else (drift[0] + 0.3 * (vel[0] - drift[0]), drift[1] + 0.3 * (vel[1] - drift[1])),
            acceleration=acc,
            amplitude=amp,
            period=float(rng.uniform(12, 30)),
            phase=float(rng.uniform(0, 2 * math.pi)),
            absent=absent,
        )
        if all(_inside(obj, t, margin) for t in range(frames)):
            return obj
    raise ValueError(f"could not fit a {area:.3f}-area object into the frame for {frames} frames")


def _inside(obj: ObjectSpec, t: int, margin: float) -> bool:
    cx, cy = obj.center_at(t)
    hw, hh = obj.half_size
    return margin <= cx - hw and cx + hw <= 1 - margin and margin <= cy - hh and cy + hh <= 1 - margin


def _boxes_clear(a: ObjectSpec, b: ObjectSpec, frames: int, gap: float) -> bool:
    for t in range(frames):
        if not (a.present_at(t) and b.present_at(t)):
            continue
        (ax, ay), (bx, by) = a.center_at(t), b.center_at(t)
        if abs(ax - bx) < a.half_size[0] + b.half_size[0] + gap and abs(ay - by) < a.half_size[1] + b.half_size[1] + gap:
            return False
    return True


def random_scene(
    seed: int,
    frames: int = 12,
    n_objects: int = 2,
    areas: Optional[Sequence[float]] = None,
    trajectories: Sequence[str] = ("constant-velocity", "constant-acceleration", "sinusoidal"),
    H: int = 64,
    W: int = 64,
    noise: float = 0.0,
    spread: float = 0.5,
    max_speed: float = 0.015,
    occlusions: Optional[dict[int, tuple[int, int]]] = None,
    gap: float = 0.02,
    group_motion: float = 0.0,
    name: Optional[str] = None,
) -> SceneSpec:
    """Random scene whose objects start near a common focus point.

    With ``group_motion`` > 0 all objects share a drift velocity of up to that
    many ``max_speed`` units, on top of their own motion.

    Objects never overlap one another (their analytic boxes stay ``gap``
    apart), so every object stays fully visible unless it is scheduled to
    vanish. ``spread`` widens automatically when the objects do not fit.
    """
    rng = substream(seed, "scene")
    if areas is None:
        areas = [float(np.clip(np.exp(rng.normal(math.log(0.08), 0.35)), 0.03, 0.2)) for _ in range(n_objects)]
    kinds = [str(rng.choice(list(trajectories))) for _ in range(n_objects)]
    heading = rng.uniform(0, 2 * math.pi)
    drift_speed = rng.uniform(0.0, group_motion) * max_speed
    drift = (drift_speed * math.cos(heading), drift_speed * math.sin(heading))
    while True:
        half = min(spread, 1.0) / 2
        lo, hi = 0.25 + half / 2, 0.75 - half / 2
        # start upstream of the drift so the group crosses the middle of the frame
        focus = (
            float(np.clip(rng.uniform(lo, hi) - 0.5 * drift[0] * frames, 0.2, 0.8)),
            float(np.clip(rng.uniform(lo, hi) - 0.5 * drift[1] * frames, 0.2, 0.8)),
        )
        for _ in range(20):
            objects: list[ObjectSpec] = []
            for _ in range(100):
                i = len(objects)
                absent = (occlusions or {}).get(i + 1)
                obj = random_object(rng, frames, areas[i], kinds[i], focus, spread, max_speed, absent=absent, drift=drift)
                if all(_boxes_clear(obj, other, frames, gap) for other in objects):
                    objects.append(obj)
                    if len(objects) == n_objects:
                        break
            if len(objects) == n_objects:
                break
        if len(objects) == n_objects:
            break
        if spread >= 1.0:
            raise ValueError(f"cannot place {n_objects} non-overlapping objects")
        spread = min(1.0, spread + 0.1)
    return SceneSpec(
        frames=frames,
        objects=objects,
        H=H,
        W=W,
        noise=noise,
        background_seed=int(rng.integers(2**31)),
        name=name or f"synth{seed:04d}",
    )


def standard_suite(seed: int = 0, n_sequences: int = 10, frames: int = 20, noise: float = 0.0, H: int = 48, W: int = 48) -> list[SceneSpec]:
    """The benchmark suite: 2-4 objects per sequence, object areas centered on 8% of the frame.

    The 48x48 default grid is close to the cell count of a 480p frame at stride 16.
    """
    rng = substream(seed, "suite")
    specs = []
    for i in range(n_sequences):
        # DAVIS-like object counts: mostly two, sometimes three or four
        n_obj = int(rng.choice([2, 3, 4], p=[0.5, 0.3, 0.2]))
        specs.append(
            random_scene(
                int(rng.integers(2**31)),
                frames=frames,
                n_objects=n_obj,
                H=H,
                W=W,
                noise=noise,
                spread=0.3,
                max_speed=0.008,
                group_motion=1.5,
                name=f"std{i:02d}",
            )
        )
    return specs


def occlusion_suite(seed: int = 0, n_sequences: int = 4, frames: int = 16, noise: float = 0.0, H: int = 48, W: int = 48) -> list[SceneSpec]:
    """Two-object scenes where object 1 vanishes for a few frames and comes back."""
    if frames < 8:
        raise ValueError(f"occlusion suite needs at least 8 frames, got {frames}")
    rng = substream(seed, "occlusion-suite")
    specs = []
    for i in range(n_sequences):
        start = int(rng.integers(3, frames // 2))
        stop = start + int(rng.integers(1, 4))
        specs.append(
            random_scene(
                int(rng.integers(2**31)),
                frames=frames,
                n_objects=2,
                H=H,
                W=W,
                noise=noise,
                spread=0.4,
                max_speed=0.008,
                occlusions={1: (start, stop)},
                name=f"occ{i:02d}",
            )
        )
    return specs


def size_scene(area: float, frames: int = 24, H: int = 48, W: int = 48, noise: float = 0.0, seed: int = 0) -> SceneSpec:
    """One square object of the given area ratio drifting slowly across the middle.

    Shape, start point and motion do not depend on ``area``, so a sweep over
    sizes changes nothing but the object's extent.
    """
    if not 0.0 < area < 0.6:
        raise ValueError(f"area ratio must be in (0, 0.6), got {area}")
    half = math.sqrt(area) / 2
    v = (0.005, 0.004)
    start = (0.5 - v[0] * (frames - 1) / 2, 0.5 - v[1] * (frames - 1) / 2)
    obj = ObjectSpec(center=start, half_size=(half, half), shape="rect", trajectory="constant-velocity", velocity=v)
    if not all(_inside(obj, t, 0.0) for t in range(frames)):
        raise ValueError(f"a {area}-area object leaves the frame within {frames} frames")
    rng = substream(seed, "size-scene")
    return SceneSpec(frames=frames, objects=[obj], H=H, W=W, noise=noise, background_seed=int(rng.integers(2**31)), name=f"size{area:g}")


def trajectory_specs(kind: str, n: int = 64, frames: int = 20, seed: int = 0) -> list[SceneSpec]:
    """Single-object scenes of one trajectory family, for tracker training."""
    kinds = list(TRAJECTORIES[1:]) if kind == "mixed" else [kind]
    for k in kinds:
        if k not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory kind {k!r}")
    rng = substream(seed, f"trajectories-{kind}")
    specs = []
    for i in range(n):
        k = kinds[i % len(kinds)]
        area = float(np.clip(np.exp(rng.normal(math.log(0.08), 0.5)), 0.02, 0.3))
        focus = (float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)))
        obj = random_object(rng, frames, area, k, focus, spread=0.3, max_speed=0.02)
        specs.append(SceneSpec(frames=frames, objects=[obj], name=f"{k}{i:03d}"))
    return specs
