"""ravoskit command line: run, train-omt, bench, export-synth.

Exit codes: 0 success, 1 I/O failure, 2 invalid configuration, 3 tracker
training diverged.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io as _io
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import io as rio
from .experiments import DEFAULT_SIZES, size_sweep
from .metrics import reports_to_csv, reports_to_json
from .pipeline import MODES, ConfigError, PipelineConfig, estimator_for, run_video
from .synth import TRAJECTORIES, generate, make_tracking_dataset, occlusion_suite, standard_suite, trajectory_specs
from .tracker import EstimatorDiverged, MotionEstimator, estimator_to_bytes, train

log = logging.getLogger("ravoskit")

ENV_PREFIX = "RAVOSKIT_"
SUITES = {"standard": standard_suite, "occlusion": occlusion_suite}
EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED = 1, 2, 3

# flag name -> config key
OVERRIDES = {
    "topk": "topk",
    "phi": "phi",
    "min_ratio": "min_ratio",
    "mem_interval": "mem_interval",
    "history": "history",
    "seed": "seed",
    "estimator": "estimator_path",
}


class InputError(OSError):
    pass


def env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """JSON object, or ``key = value`` lines with ``#`` comments."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as e:
            raise ConfigError("<json>", f"{source}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("<json>", f"{source}: expected an object")
        return data
    data = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"{source}: expected key=value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        data[key.replace("-", "_")] = value
    return data


def load_config(path: Optional[str], args: argparse.Namespace) -> PipelineConfig:
    data = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise InputError(f"cannot read config {path}: {e.strerror or e}") from None
        data = parse_config_text(text, path)
    if getattr(args, "mode", None):
        data["mode"] = args.mode
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    return PipelineConfig.from_mapping(data)


def content_hash(paths: Sequence[Path], root: Path) -> str:
    """sha256 over relative paths and file bytes, in sorted order."""
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(str(p.relative_to(root)).encode())
        h.update(b"\0")
        h.update(p.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def suite_kwargs(noise: float, sequences=None, frames=None, grid=None) -> dict:
    kwargs = {"noise": noise}
    for key, value in (("n_sequences", sequences), ("frames", frames), ("H", grid), ("W", grid)):
        if value is not None:
            if value < 1:
                raise ConfigError(key, f"must be >= 1, got {value}")
            kwargs[key] = value
    return kwargs


def resolve_input(spec: str, seed: int, suite_args: dict):
    """Return (kind, description, content hash, list of (name, loader args))."""
    if spec.startswith("synth:"):
        suite = spec.split(":", 1)[1]
        if suite not in SUITES:
            raise ConfigError("input", f"unknown synthetic suite {suite!r}; choose from {', '.join(SUITES)}")
        specs = SUITES[suite](seed, **suite_args)
        blob = json.dumps([asdict(s) for s in specs], sort_keys=True, default=list).encode()
        return "synth", spec, hashlib.sha256(blob).hexdigest(), [(s.name, ("synth", s, seed)) for s in specs]
    root = Path(spec)
    if not root.is_dir():
        raise InputError(f"input {root} is not a directory")
    try:
        seqs = rio.list_sequences(root)
    except FileNotFoundError as e:
        raise InputError(str(e)) from None
    if not seqs:
        raise InputError(f"no sequences under {root / 'Annotations'}")
    files = [p for p in root.rglob("*") if p.is_file()]
    return "davis", str(root.resolve()), content_hash(files, root), [(s, ("davis", str(root), s)) for s in seqs]


def _load_frames(source, key_dim: int):
    if source[0] == "synth":
        return generate(source[1], source[2])
    return rio.load_sequence(source[1], source[2], key_dim=key_dim)


def _run_one(job):
    name, source, config, estimator, out_dir = job
    frames = _load_frames(source, config.key_dim)
    results, report = run_video(frames, config, estimator=estimator, name=name)
    final = Path(out_dir) / "predictions" / name
    # write into a sibling temp dir, then swap it in
    tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{name}."))
    try:
        rio.write_predictions([r.labels for r in results], tmp)
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return report


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def cmd_run(args: argparse.Namespace) -> int:
    started = _now()
    if args.manifest:
        try:
            manifest = json.loads(Path(args.manifest).read_text())
        except OSError as e:
            raise InputError(f"cannot read manifest {args.manifest}: {e.strerror or e}") from None
        config = PipelineConfig.from_mapping(manifest["config"])
        args.input = args.input or manifest["input"]["spec"]
        for key in ("noise", "sequences", "frames", "grid"):
            setattr(args, key, manifest["input"].get(key))
        args.no_timing = args.no_timing or not manifest.get("timing", True)
    else:
        config = load_config(args.config, args)
    if not args.input:
        raise ConfigError("input", "an input directory or synth:<suite> is required")
    if not args.output:
        raise ConfigError("output", "an output directory is required")
    noise = args.noise or 0.0
    kind, described, digest, jobs = resolve_input(
        args.input, config.seed, suite_kwargs(noise, args.sequences, args.frames, args.grid)
    )
    out = Path(args.output)
    try:
        (out / "predictions").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create output directory {out}: {e.strerror or e}") from None

    estimator = estimator_for(config) if (config.regional or config.mpm) else None
    work = [(name, src, config, estimator, str(out)) for name, src in jobs]
    try:
        threads = args.threads if args.threads is not None else int(env("THREADS", "1"))
    except ValueError:
        raise ConfigError("threads", f"{ENV_PREFIX}THREADS must be an integer") from None
    if threads < 1:
        raise ConfigError("threads", f"must be >= 1, got {threads}")
    if threads == 1 or len(work) == 1:
        reports = [_run_one(job) for job in work]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(_run_one, work))

    timing = not args.no_timing
    rio.atomic_write(out / "report.json", reports_to_json(reports, include_timing=timing))
    rio.atomic_write(out / "report.csv", reports_to_csv(reports, include_timing=timing))
    manifest = {
        "tool": f"ravoskit {__version__}",
        "command": "run",
        "config": config.to_dict(),
        "mode": config.mode,
        "seed": config.seed,
        "timing": timing,
        "input": {"kind": kind, "spec": args.input, "resolved": described, "sha256": digest,
                  "noise": noise, "sequences": args.sequences, "frames": args.frames, "grid": args.grid},
        "outputs": {
            "predictions": str(out / "predictions"),
            "report_json": str(out / "report.json"),
            "report_csv": str(out / "report.csv"),
        },
        "started": started,
        "finished": _now(),
    }
    rio.atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for r in reports:
        log.info("%s J&F %.4f mem %d", r.seq, r.JF(), r.mem_entries)
    print(f"{len(reports)} sequences, mode {config.mode}, reports in {out}")
    return 0


def cmd_train_omt(args: argparse.Namespace) -> int:
    if args.dataset != "mixed" and args.dataset not in TRAJECTORIES:
        raise ConfigError("dataset", f"unknown trajectory kind {args.dataset!r}")
    for key in ("steps", "sequences", "frames", "history", "hidden"):
        if getattr(args, key) < (0 if key == "steps" else 1):
            raise ConfigError(key, f"invalid value {getattr(args, key)}")
    if not args.lr > 0:
        raise ConfigError("lr", f"must be > 0, got {args.lr}")
    specs = trajectory_specs(args.dataset, n=args.sequences, frames=args.frames, seed=args.seed)
    data = make_tracking_dataset(specs, seed=args.seed, history=args.history)
    est = MotionEstimator.init(args.history, args.hidden, seed=args.seed)
    try:
        est = train(est, data, steps=args.steps, lr=args.lr, optimizer=args.optimizer, seed=args.seed)
    except EstimatorDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    rio.atomic_write(args.checkpoint, estimator_to_bytes(est))
    if args.loss_csv:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(est.loss_curve))
        rio.atomic_write(args.loss_csv, buf.getvalue())
    print(f"loss {est.loss_curve[0]:.6g} -> {est.loss_curve[-1]:.6g} over {args.steps} steps; checkpoint {args.checkpoint}")
    return 0


BENCH_COLUMNS = ["size", "mode", "match_ms_med", "assign_ms_med", "mem_entries"]


def cmd_bench(args: argparse.Namespace) -> int:
    config = load_config(args.config, args)
    try:
        sizes = [float(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("sizes", f"expected comma-separated numbers, got {args.sizes!r}") from None
    if not sizes or not all(0 < s < 0.6 for s in sizes):
        raise ConfigError("sizes", "each size must be in (0, 0.6)")
    modes = list(MODES) if args.modes == "all" else [m.strip() for m in args.modes.split(",")]
    for m in modes:
        if m not in MODES:
            raise ConfigError("modes", f"unknown mode {m!r}")
    rows = size_sweep(sizes, modes, base=config, frames=args.frames, grid=args.grid, repeats=args.repeats, seed=config.seed)
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "match_ms_med": round(r["match_ms_med"], 4), "assign_ms_med": round(r["assign_ms_med"], 4)})
    if args.output:
        rio.atomic_write(args.output, buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_export_synth(args: argparse.Namespace) -> int:
    if args.suite not in SUITES:
        raise ConfigError("suite", f"unknown suite {args.suite!r}")
    specs = SUITES[args.suite](args.seed, **suite_kwargs(args.noise, args.sequences, args.frames, args.grid))
    for spec in specs:
        rio.export_sequence(generate(spec, args.seed), args.output, spec.name)
    print(f"wrote {len(specs)} sequences to {args.output}")
    return 0


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value or JSON config file")
    p.add_argument("--mode", choices=list(MODES), help="baseline, mpm (memory only), regional (segmentation only), ravos (both)")
    p.add_argument("--topk", type=int)
    p.add_argument("--phi", type=float)
    p.add_argument("--min-ratio", dest="min_ratio", type=float)
    p.add_argument("--mem-interval", dest="mem_interval", type=int)
    p.add_argument("--history", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--estimator", help="tracker checkpoint from train-omt")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ravoskit", description="Region-aware video object segmentation experiments")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="segment sequences and write predictions, reports and a manifest")
    _add_pipeline_flags(p)
    p.add_argument("--input", help="DAVIS-layout directory or synth:<standard|occlusion>")
    p.add_argument("--output", help="output directory")
    p.add_argument("--noise", type=float, default=0.0, help="key noise for synthetic suites")
    p.add_argument("--sequences", type=int, help="number of synthetic sequences")
    p.add_argument("--frames", type=int, help="frames per synthetic sequence")
    p.add_argument("--grid", type=int, help="synthetic grid side in cells")
    p.add_argument("--threads", type=int, help=f"worker processes (default ${ENV_PREFIX}THREADS or 1)")
    p.add_argument("--no-timing", action="store_true", help="leave wall-clock fields out so reports are byte-reproducible")
    p.add_argument("--manifest", help="re-run the configuration recorded in a manifest")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train-omt", help="train the object motion tracker on synthetic trajectories")
    p.add_argument("--dataset", default="constant-velocity", help="trajectory kind or 'mixed'")
    p.add_argument("--sequences", type=int, default=64)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--history", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--loss-csv", dest="loss_csv")
    p.set_defaults(func=cmd_train_omt)

    p = sub.add_parser("bench", help="time the four modes across object sizes")
    _add_pipeline_flags(p)
    p.add_argument("--sizes", default=",".join(str(s) for s in DEFAULT_SIZES))
    p.add_argument("--modes", default="all", help="comma-separated modes or 'all'")
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--grid", type=int, default=48)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--output", help="CSV path (also printed)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-synth", help="write a synthetic suite in DAVIS layout")
    p.add_argument("--suite", default="standard", choices=list(SUITES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--sequences", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_export_synth)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = env("LOG_LEVEL") or ("DEBUG" if args.verbose > 1 else "INFO" if args.verbose else "WARNING")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as e:
        # ValueError here comes from unreadable or malformed input files
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
