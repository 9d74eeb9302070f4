"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import time

import numpy as np
import pytest

from dense_reference import dense_labels
from ravoskit.experiments import size_sweep, repeated_ablation
from ravoskit.geometry import BBox, FULL_FRAME, motion_path_roi
from ravoskit.matching import affinity_topk
from ravoskit.memory import MemoryBank
from ravoskit.metrics import summarize
from ravoskit.pipeline import PipelineConfig, causality_violations, run_video
from ravoskit.synth import generate, make_tracking_dataset, occlusion_suite, random_scene, standard_suite, trajectory_specs
from ravoskit.tracker import (
    MotionEstimator,
    MotionParams,
    TrainBatch,
    eval_motion,
    flat_grad,
    forward,
    loss_and_grad,
    train,
)

# J&F of the dense reference on standard_suite(0, noise=0.1), measured once and frozen
ORACLE_JF_NOISY = 1.0


def random_box(rng):
    x = np.sort(rng.random(2))
    y = np.sort(rng.random(2))
    return BBox(float(x[0]), float(y[0]), float(x[1]), float(y[1]))


def test_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatched = []
    for i in range(20):
        spec = random_scene(
            1000 + i,
            frames=int(rng.integers(4, 9)),
            n_objects=int(rng.integers(1, 4)),
            H=64,
            W=64,
            noise=float(rng.choice([0.0, 0.05, 0.1])),
        )
        frames = generate(spec, 1000 + i)
        results, _ = run_video(frames, PipelineConfig.for_mode("baseline"))
        ref = dense_labels(frames)
        if not all(np.array_equal(r.labels, d) for r, d in zip(results, ref)):
            mismatched.append(i)
    elapsed = time.perf_counter() - t0
    ok = not mismatched and elapsed < 60.0
    verdict("oracle equivalence", ok, f"20 sequences, mismatched {mismatched}, {elapsed:.1f} s (< 60 s)")


def test_motion_function_exactness(verdict):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        coeffs = np.column_stack([rng.uniform(-1, 1, 4), rng.uniform(0.5, 1.5, 4), rng.uniform(-0.1, 0.1, 4)])
        box = random_box(rng)
        phi = float(rng.uniform(0, 0.05))
        got = eval_motion(MotionParams(coeffs), box, phi, clamp=False).as_tuple()
        want = []
        for i, (v, sign) in enumerate(zip(box.as_tuple(), (-1, -1, 1, 1))):
            a, b, e = (float(c) for c in coeffs[i])
            want.append(a * v * v + b * v + e + sign * phi)
        worst = max(worst, max(abs(g - w) for g, w in zip(got, want)))
    verdict("motion function exactness", worst <= 1e-12, f"max abs error {worst:.2e} over 1000 triples (<= 1e-12)")


def test_motion_path_roi_exactness(verdict):
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        prev = [random_box(rng) for _ in range(n)]
        pred = [random_box(rng) for _ in range(n)]
        boxes = prev + pred
        want = (
            min(b.x1 for b in boxes),
            min(b.y1 for b in boxes),
            max(b.x2 for b in boxes),
            max(b.y2 for b in boxes),
        )
        bad += motion_path_roi(prev, pred).as_tuple() != want
    verdict("motion path ROI exactness", bad == 0, f"{bad} of 1000 instances differ from min/max oracle")


def test_affinity_normalization_and_topk(verdict):
    rng = np.random.default_rng(3)
    worst_sum = worst_dense = 0.0
    dense_cases = 0
    for _ in range(200):
        N, C = int(rng.integers(1, 120)), 8
        k = int(rng.integers(1, 40))
        keys = rng.normal(size=(N, C))
        bank = MemoryBank(C, 1)
        bank.append(keys, np.zeros((N, 1)), 0, np.zeros(N, int), np.arange(N))
        Q = rng.normal(size=(30, C))
        aff = affinity_topk(Q, bank, k)
        worst_sum = max(worst_sum, float(np.abs(aff.weights.sum(axis=1) - 1.0).max()))
        if k >= N:
            dense_cases += 1
            S = -((Q[:, None, :] - keys[None, :, :]) ** 2).sum(-1)
            E = np.exp(S - S.max(axis=1, keepdims=True))
            P = E / E.sum(axis=1, keepdims=True)
            got = np.zeros_like(P)
            np.put_along_axis(got, aff.indices, aff.weights, axis=1)
            worst_dense = max(worst_dense, float(np.abs(got - P).max()))
    ok = worst_sum <= 1e-6 and worst_dense <= 1e-9 and dense_cases > 0
    verdict(
        "affinity normalization",
        ok,
        f"max |row sum - 1| {worst_sum:.1e} (<= 1e-6); dense softmax error {worst_dense:.1e} on {dense_cases} k >= N banks (<= 1e-9)",
    )


def test_gradient_correctness(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    eps = 1e-5
    for inst in range(20):
        history = int(rng.integers(1, 4))
        est = MotionEstimator.init(history, int(rng.integers(3, 9)), seed=inst)
        est = est.with_flat(est.flat() + rng.normal(0, 0.3, est.n_params))
        n = int(rng.integers(2, 10))
        batch = TrainBatch(rng.random((n, 4 * history)), rng.random((n, 4)))
        phi = float(rng.uniform(0, 0.05))
        g = flat_grad(loss_and_grad(est, batch, phi)[1])
        theta = est.flat()
        for i in range(len(theta)):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += eps
            tm[i] -= eps
            fd = (loss_and_grad(est.with_flat(tp), batch, phi)[0] - loss_and_grad(est.with_flat(tm), batch, phi)[0]) / (2 * eps)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8))
    verdict("gradient correctness", worst <= 1e-4, f"max relative error {worst:.1e} over 20 instances (<= 1e-4)")


def _center_errors(est, data):
    last = data.inputs[:, -4:]
    if est is None:
        pred = last
    else:
        pred = np.array([eval_motion(forward(est, x), BBox(*x[-4:]), 0.0).as_tuple() for x in data.inputs])
    center = lambda B: np.column_stack([(B[:, 0] + B[:, 2]) / 2, (B[:, 1] + B[:, 3]) / 2])
    return np.linalg.norm(center(pred) - center(data.targets), axis=1)


def test_tracker_skill(verdict):
    train_set = make_tracking_dataset(trajectory_specs("constant-acceleration", n=64, frames=20, seed=0), seed=0)
    held_out = make_tracking_dataset(trajectory_specs("constant-acceleration", n=32, frames=20, seed=1), seed=1)
    t0 = time.perf_counter()
    est = train(MotionEstimator.init(2, 64, seed=0), train_set, steps=1500, lr=3e-3)
    elapsed = time.perf_counter() - t0
    ratio = _center_errors(est, held_out).mean() / _center_errors(None, held_out).mean()
    ok = ratio < 0.5 and elapsed < 30.0
    verdict("tracker skill", ok, f"center error ratio vs copy-last-box {ratio:.3f} (< 0.5), training {elapsed:.1f} s (< 30 s)")


@pytest.mark.slow
def test_ablation_trend(verdict):
    t0 = time.perf_counter()
    out = repeated_ablation(seed=0, runs=5, noise=0.1, modes=("baseline", "ravos"))
    elapsed = time.perf_counter() - t0
    base, full = out["median"]["baseline"], out["median"]["ravos"]
    speedup = base["match_ms_med"] / full["match_ms_med"]
    mem_cut = 1.0 - full["mem_entries"] / base["mem_entries"]
    d_jf = full["JF"] - base["JF"]
    ok = speedup >= 2.0 and mem_cut >= 0.20 and d_jf >= -0.01 and elapsed < 300.0
    verdict(
        "ablation trend",
        ok,
        f"matching {base['match_ms_med']:.2f} -> {full['match_ms_med']:.2f} ms ({speedup:.2f}x, >= 2x); "
        f"memory {base['mem_entries']:.0f} -> {full['mem_entries']:.0f} (-{100 * mem_cut:.1f}%, >= 20%); "
        f"J&F {base['JF']:.4f} -> {full['JF']:.4f} (delta >= -0.01); {elapsed:.0f} s (< 300 s)",
    )


@pytest.mark.slow
def test_object_size_trend(verdict):
    rows = size_sweep(modes=("baseline", "ravos"), repeats=5)
    by_mode = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append(r["match_ms_med"])
    for mode, times in by_mode.items():
        print(f"  {mode:9s} " + " ".join(f"{t:7.2f}" for t in times) + " ms")
    regional = by_mode["ravos"]
    full = by_mode["baseline"]
    monotone = all(b >= a for a, b in zip(regional, regional[1:]))
    spread = max(full) / min(full) - 1.0
    verdict(
        "object size trend",
        monotone and spread < 0.20,
        f"regional {['%.2f' % t for t in regional]} non-decreasing; full-frame spread {100 * spread:.1f}% (< 20%)",
    )


def test_protocol_conformance(verdict):
    problems = []
    checked = 0
    for seed in range(3):
        for spec in occlusion_suite(seed):
            start, stop = spec.objects[0].absent
            results, _ = run_video(generate(spec, seed), PipelineConfig.for_mode("ravos"))
            checked += 1
            if causality_violations(results):
                problems.append(f"{spec.name}/{seed}: causality")
            if any(results[t].rois[1] != FULL_FRAME for t in range(start + 1, stop + 2)):
                problems.append(f"{spec.name}/{seed}: no full-frame fallback")
            back = [t for t in range(stop + 1, len(results)) if results[t].regional[1]]
            if not back or back[0] > stop + 3:
                problems.append(f"{spec.name}/{seed}: slow recovery")
    verdict("protocol conformance", not problems, f"{checked} occluded sequences, problems {problems}")


def _suite_jf(noise):
    reports = []
    for spec in standard_suite(0, noise=noise):
        frames = generate(spec, 0)
        _, rep = run_video(frames, PipelineConfig.for_mode("ravos"), name=spec.name)
        reports.append(rep)
    return summarize(reports)["JF"]


def test_quality_floor(verdict):
    clean = _suite_jf(0.0)
    noisy = _suite_jf(0.1)
    bar = max(0.85, ORACLE_JF_NOISY - 0.01)
    verdict("quality floor", clean == 1.0 and noisy >= bar, f"J&F clean {clean!r} (== 1.0), noisy {noisy:.4f} (>= {bar:.2f})")
