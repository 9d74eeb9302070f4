"""Batch drivers: run a suite of videos, the four-mode ablation, and the object-size sweep."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .metrics import EvalReport, summarize
from .pipeline import MODES, FrameResult, PipelineConfig, VideoRun, run_lockstep, run_video
from .synth import LabeledFrame, SceneSpec, generate, size_scene, standard_suite

DEFAULT_SIZES = (0.05, 0.1, 0.2, 0.4)


@dataclass
class SuiteResult:
    mode: str
    reports: list[EvalReport]
    match_ms: list[float]  # every segmented frame of every sequence, in order
    assign_ms: list[float]

    @property
    def match_ms_med(self) -> float:
        return float(statistics.median(self.match_ms))

    @property
    def assign_ms_med(self) -> float:
        return float(statistics.median(self.assign_ms))

    @property
    def mem_entries(self) -> int:
        return int(sum(r.mem_entries for r in self.reports))

    @property
    def JF(self) -> float:
        return summarize(self.reports)["JF"]


def run_frames(
    videos: Sequence[tuple[str, Sequence[LabeledFrame]]], config: PipelineConfig
) -> tuple[SuiteResult, list[list[FrameResult]]]:
    reports, match, assign, outputs = [], [], [], []
    for name, frames in videos:
        results, report = run_video(frames, config, name=name)
        reports.append(report)
        match.extend(r.match_ms for r in results[1:])
        assign.extend(r.assign_ms for r in results[1:])
        outputs.append(results)
    return SuiteResult(config.mode, reports, match, assign), outputs


def render_suite(specs: Sequence[SceneSpec], seed: int) -> list[tuple[str, list[LabeledFrame]]]:
    return [(spec.name, generate(spec, seed)) for spec in specs]


def ablation(
    videos: Sequence[tuple[str, Sequence[LabeledFrame]]],
    base: Optional[PipelineConfig] = None,
    modes: Sequence[str] = tuple(MODES),
) -> dict[str, SuiteResult]:
    """Every mode over the same rendered videos.

    The modes of one video run in lockstep, frame by frame, so drifts in
    machine speed hit all of them alike.
    """
    base = base or PipelineConfig()
    out = {mode: SuiteResult(mode, [], [], []) for mode in modes}
    for name, frames in videos:
        runs = {mode: VideoRun(frames, _with_mode(base, mode), name=name) for mode in modes}
        run_lockstep(list(runs.values()))
        for mode, run in runs.items():
            out[mode].reports.append(run.report())
            out[mode].match_ms += [r.match_ms for r in run.results[1:]]
            out[mode].assign_ms += [r.assign_ms for r in run.results[1:]]
    return out


def _with_mode(base: PipelineConfig, mode: str) -> PipelineConfig:
    m, o = MODES[mode]
    return replace(base, mpm=m, regional=o)


def repeated_ablation(
    seed: int = 0,
    runs: int = 5,
    noise: float = 0.1,
    modes: Sequence[str] = tuple(MODES),
    base: Optional[PipelineConfig] = None,
) -> dict:
    """Repeat the ablation on the standard suite; each run renders with its own seed.

    Returns per-run numbers and, per mode, the median over runs of the pooled
    per-frame median matching time, total memory entries and J&F.
    """
    per_run = []
    for r in range(runs):
        videos = render_suite(standard_suite(seed + r, noise=noise), seed + r)
        res = ablation(videos, base, modes)
        per_run.append(
            {
                mode: {"match_ms_med": s.match_ms_med, "assign_ms_med": s.assign_ms_med, "mem_entries": s.mem_entries, "JF": s.JF}
                for mode, s in res.items()
            }
        )
    summary = {
        mode: {key: float(np.median([run[mode][key] for run in per_run])) for key in per_run[0][mode]} for mode in modes
    }
    return {"runs": per_run, "median": summary}


def size_sweep(
    sizes: Sequence[float] = DEFAULT_SIZES,
    modes: Sequence[str] = tuple(MODES),
    base: Optional[PipelineConfig] = None,
    frames: int = 24,
    grid: int = 48,
    repeats: int = 3,
    seed: int = 0,
) -> list[dict]:
    """Matching and assignment time for each (size, mode) cell of the sweep.

    All cells run in lockstep, frame by frame, ``repeats`` times. Each frame
    keeps its fastest repeat (the least disturbed by other load), and the cell
    reports the median of those per-frame times.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    base = base or PipelineConfig(seed=seed)
    videos = {size: generate(size_scene(size, frames=frames, H=grid, W=grid), seed) for size in sizes}
    match: dict = {}
    assign: dict = {}
    entries: dict = {}
    cells = [(size, mode) for size in sizes for mode in modes]
    for _ in range(repeats):
        runs = [VideoRun(videos[size], _with_mode(base, mode), name=f"size{size:g}") for size, mode in cells]
        run_lockstep(runs)
        for cell, run in zip(cells, runs):
            match.setdefault(cell, []).append([r.match_ms for r in run.results[1:]])
            assign.setdefault(cell, []).append([r.assign_ms for r in run.results[1:]])
            entries[cell] = len(run.bank)
    return [
        {
            "size": size,
            "mode": mode,
            "match_ms_med": float(np.median(np.min(match[size, mode], axis=0))),
            "assign_ms_med": float(np.median(np.min(assign[size, mode], axis=0))),
            "mem_entries": entries[size, mode],
        }
        for size in sizes
        for mode in modes
    ]
