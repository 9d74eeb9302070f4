"""Per-video orchestration: track, memorize motion paths, match regionally, merge.

Frame 0 carries the annotation and is memorized in full. Frame 1 is segmented
over the whole frame. From frame 2 on, each live object is segmented inside
the ROI its tracker predicts. Memory writes of frame t happen only after
frame t has been segmented and the ROIs of frame t+1 have been predicted.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import memory as mem
from .geometry import FULL_FRAME, BBox, GridRect, NoLiveObjects, motion_path_roi, to_grid
from .matching import affinity_topk, propagate, query_cells
from .metrics import EvalReport, Timings, evaluate
from .synth import LabeledFrame, make_tracking_dataset, tight_box, trajectory_specs
from .tracker import MotionEstimator, TrackState, predict_box, predict_roi, train, update_track

log = logging.getLogger(__name__)

# mode name -> (motion-path memory, regional segmentation)
MODES = {
    "baseline": (False, False),
    "mpm": (True, False),
    "regional": (False, True),
    "ravos": (True, True),
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class PipelineConfig:
    regional: bool = True
    mpm: bool = True
    topk: int = 20
    phi: float = 0.02
    min_ratio: float = 0.2
    mem_interval: int = 3
    history: int = 2
    hidden: int = 64
    key_dim: int = 16
    seed: int = 0
    boundary_tol: int = 1
    max_entries: Optional[int] = None
    omt_steps: int = 1500
    estimator_path: Optional[str] = None

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "PipelineConfig":
        if mode not in MODES:
            raise ConfigError("mode", f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
        m, o = MODES[mode]
        return cls(regional=o, mpm=m, **overrides)

    @property
    def mode(self) -> str:
        return next(name for name, flags in MODES.items() if flags == (self.mpm, self.regional))

    def validate(self) -> "PipelineConfig":
        checks = [
            ("topk", self.topk >= 1, "must be >= 1"),
            ("phi", 0.0 <= self.phi < 0.5, "must be in [0, 0.5)"),
            ("min_ratio", 0.0 < self.min_ratio <= 1.0, "must be in (0, 1]"),
            ("mem_interval", self.mem_interval >= 1, "must be >= 1"),
            ("history", self.history >= 1, "must be >= 1"),
            ("hidden", self.hidden >= 1, "must be >= 1"),
            ("key_dim", self.key_dim >= 4 and self.key_dim % 2 == 0, "must be even and >= 4"),
            ("seed", self.seed >= 0, "must be >= 0"),
            ("boundary_tol", self.boundary_tol >= 0, "must be >= 0"),
            ("max_entries", self.max_entries is None or self.max_entries >= 1, "must be >= 1 when set"),
            ("omt_steps", self.omt_steps >= 0, "must be >= 0"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, f"{msg}, got {getattr(self, key)!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: dict) -> "PipelineConfig":
        """Build from parsed JSON or ``key=value`` strings, coercing types per field."""
        data = dict(data)
        base = {}
        if "mode" in data:
            mode = str(data.pop("mode"))
            if mode not in MODES:
                raise ConfigError("mode", f"unknown mode {mode!r}")
            base["mpm"], base["regional"] = MODES[mode]
        known = {f.name: f for f in fields(cls)}
        for key, raw in data.items():
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
            base[key] = _coerce(key, known[key].type, raw)
        return cls(**base).validate()


def _coerce(key: str, typ, raw):
    typ = str(typ)
    if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("none", "null", "")):
        if "Optional" in typ:
            return None
        raise ConfigError(key, "a value is required")
    try:
        if typ == "bool":
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in typ:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if "float" in typ:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot interpret {raw!r} as {typ}") from None


@dataclass
class FrameResult:
    index: int
    labels: np.ndarray
    rois: dict[int, BBox] = field(default_factory=dict)
    rects: dict[int, GridRect] = field(default_factory=dict)
    regional: dict[int, bool] = field(default_factory=dict)
    soft: dict[int, np.ndarray] = field(default_factory=dict)  # per-object scores inside its rect
    boxes: dict[int, Optional[BBox]] = field(default_factory=dict)
    match_ms: float = 0.0
    assign_ms: float = 0.0
    memory_roi: Optional[BBox] = None
    events: list = field(default_factory=list)


def merge_objects(scores: dict[int, np.ndarray]) -> np.ndarray:
    """Hard label map from per-object score grids (zero outside each ROI).

    Background scores ``1 - max object score``; the first maximum wins, so
    background beats an object at 0.5 and lower object ids win ties.
    """
    ids = sorted(scores)
    if not ids:
        raise ValueError("no object scores to merge")
    stack = np.stack([scores[o] for o in ids])
    background = 1.0 - stack.max(axis=0)
    choice = np.argmax(np.concatenate([background[None], stack]), axis=0)
    lut = np.array([0] + ids)
    return lut[choice]


def one_hot(labels: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    """Value vectors: channel 0 is background, channel i is object ``ids[i-1]``."""
    out = np.zeros(labels.shape + (len(ids) + 1,))
    out[..., 0] = labels == 0
    for ch, o in enumerate(ids, 1):
        out[..., ch] = labels == o
    return out


@functools.lru_cache(maxsize=8)
def default_estimator(history: int = 2, hidden: int = 64, seed: int = 0, steps: int = 1500) -> MotionEstimator:
    """Tracker trained on a mix of synthetic trajectory families."""
    data = make_tracking_dataset(trajectory_specs("mixed", n=96, frames=20, seed=seed), seed=seed, history=history)
    est = MotionEstimator.init(history, hidden, seed=seed)
    return train(est, data, steps=steps, lr=3e-3, seed=seed)


def estimator_for(config: PipelineConfig) -> MotionEstimator:
    if config.estimator_path:
        from .tracker import load_estimator

        est = load_estimator(config.estimator_path)
        if est.history != config.history:
            raise ConfigError("history", f"checkpoint was trained with history {est.history}")
        return est
    return default_estimator(config.history, config.hidden, config.seed, config.omt_steps)


class VideoRun:
    """Frame-by-frame execution of one video; ``run_video`` drives it to the end.

    Only ``frames[0].labels`` is used as input; the labels of later frames are
    used for evaluation alone.
    """

    def __init__(
        self,
        frames: Sequence[LabeledFrame],
        config: PipelineConfig,
        estimator: Optional[MotionEstimator] = None,
        name: str = "seq",
    ):
        config.validate()
        if not frames:
            raise ValueError("empty video")
        first = frames[0]
        ids = [int(o) for o in np.unique(first.labels) if o != 0]
        if not ids:
            raise ValueError("no objects annotated in frame 0")
        self.frames, self.config, self.name, self.ids = frames, config, name, ids
        self.H, self.W = first.grid.H, first.grid.W
        self.cell = 1.0 / max(self.H, self.W)
        if config.regional or config.mpm:
            estimator = estimator or estimator_for(config)
        self.estimator = estimator
        self.channel = {o: ch for ch, o in enumerate(ids, 1)}
        self.bank = mem.MemoryBank(first.grid.key_dim, len(ids) + 1, max_entries=config.max_entries)
        self.policy = mem.MemoryPolicy(config.mem_interval, mem.MOTION_PATH if config.mpm else mem.FULL)
        self.timings = Timings()

        mem.update(self.bank, first.grid, one_hot(first.labels, ids), FULL_FRAME, mem.FULL, 0)
        self.tracks = {o: TrackState.start(o, tight_box(first.labels == o), 0, window=config.history) for o in ids}
        self.results = [
            FrameResult(
                0,
                first.labels.copy(),
                boxes={o: self.tracks[o].last_box for o in ids},
                memory_roi=FULL_FRAME,
                events=[("write", 0, len(self.bank))],
            )
        ]

    @property
    def done(self) -> bool:
        return len(self.results) == len(self.frames)

    def step(self) -> FrameResult:
        t = len(self.results)
        if t >= len(self.frames):
            raise StopIteration("video finished")
        config, ids, H, W = self.config, self.ids, self.H, self.W
        grid = self.frames[t].grid
        if (grid.H, grid.W) != (H, W):
            raise ValueError(f"frame {t} grid is {grid.H}x{grid.W}, expected {H}x{W}")
        res = FrameResult(t, np.zeros((H, W), dtype=np.int64))
        for o in ids:
            if config.regional and t >= 2 and self.tracks[o].alive:
                roi = predict_roi(self.tracks[o], self.estimator, config.phi, config.min_ratio, self.cell)
            else:
                roi = FULL_FRAME
            res.rois[o] = roi
            res.rects[o] = to_grid(roi, H, W)
            res.regional[o] = res.rects[o] != GridRect(0, 0, H, W)
        res.events.append(("read", t, int(self.bank.provenance[:, 0].max())))

        need = np.zeros((H, W), dtype=bool)
        for rect in res.rects.values():
            need[rect.slices()] = True
        with self.timings.scope("match"):
            query = query_cells(grid, need)
            values = propagate(affinity_topk(query, self.bank, config.topk), self.bank)
        dense_values = query.scatter(values)

        with self.timings.scope("assign"):
            scores = {}
            for o in ids:
                rs, cs = res.rects[o].slices()
                s = np.zeros((H, W))
                s[rs, cs] = dense_values[rs, cs, self.channel[o]]
                scores[o] = s
                res.soft[o] = s[rs, cs].copy()
            res.labels = merge_objects(scores)
        res.match_ms = self.timings.samples["match"][-1]
        res.assign_ms = self.timings.samples["assign"][-1]
        res.events.append(("segment", t))

        for o in ids:
            box = tight_box(res.labels == o)
            res.boxes[o] = box
            self.tracks[o] = update_track(self.tracks[o], box, t)

        if mem.should_update(self.policy, t):
            roi = _memory_roi(self.tracks, self.estimator, config, self.cell) if config.mpm else FULL_FRAME
            mem.update(self.bank, grid, one_hot(res.labels, ids), roi, self.policy.mode, t)
            res.memory_roi = roi
            res.events.append(("write", t, len(self.bank)))
        self.results.append(res)
        return res

    def report(self) -> EvalReport:
        if not self.done:
            raise RuntimeError(f"{len(self.frames) - len(self.results)} frames still to run")
        report = evaluate(
            self.name, [r.labels for r in self.results], [f.labels for f in self.frames], self.ids, tol=self.config.boundary_tol
        )
        t = self.timings
        report.match_ms_med = t.median("match")
        report.assign_ms_med = t.median("assign")
        report.match_ms_total = t.total("match")
        report.assign_ms_total = t.total("assign")
        report.mem_entries = len(self.bank)
        report.timings = t.table()
        return report


def run_video(
    frames: Sequence[LabeledFrame],
    config: PipelineConfig,
    estimator: Optional[MotionEstimator] = None,
    name: str = "seq",
) -> tuple[list[FrameResult], EvalReport]:
    """Segment a video from its first-frame annotation."""
    run = VideoRun(frames, config, estimator, name)
    while not run.done:
        run.step()
    return run.results, run.report()


def run_lockstep(runs: Sequence[VideoRun]) -> None:
    """Advance several runs one frame at a time, round-robin, until all finish.

    Used for timing comparisons: frame t of every run executes within a short
    window, so drifts in machine speed affect all runs alike.
    """
    while not all(r.done for r in runs):
        for r in runs:
            if not r.done:
                r.step()


def _memory_roi(tracks: dict[int, TrackState], estimator, config: PipelineConfig, cell: float) -> BBox:
    # a lost object could be anywhere next frame, so keep the whole frame
    if any(not tr.alive for tr in tracks.values()):
        return FULL_FRAME
    prev = [tr.last_box for tr in tracks.values()]
    pred = [predict_box(tr, estimator, config.phi, cell) for tr in tracks.values()]
    try:
        return motion_path_roi(prev, pred)
    except NoLiveObjects:
        return FULL_FRAME


def causality_violations(results: Sequence[FrameResult]) -> list[str]:
    """Check the event log: reads only see earlier frames, writes follow segmentation."""
    problems = []
    segmented = {0}
    for res in results:
        for ev in res.events:
            if ev[0] == "read" and ev[2] >= res.index:
                problems.append(f"frame {res.index} read memory written from frame {ev[2]}")
            elif ev[0] == "segment":
                segmented.add(ev[1])
            elif ev[0] == "write" and ev[1] not in segmented:
                problems.append(f"frame {ev[1]} memorized before it was segmented")
    return problems
