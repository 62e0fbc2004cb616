"""``curvesplat`` command line: gen, train, render and eval subcommands.

Exit codes: 0 on success, 1 for runtime failures, 2 for usage or input
validation errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .coupling import CouplingConfig, CurveArrays, couple_arrays
from .curves import curves_from_dict, save_curves
from .errors import ConfigError, CurveSplatError, DatasetError
from .evaluation import evaluate_run
from .render import load_cameras, render, write_edge_map
from .scene import KINDS, load_dataset, make_scene, oracle_render, write_dataset
from .trainer import TrainConfig, Trainer

logger = logging.getLogger("curvesplat")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or malformed input files; maps to exit code 2."""


@dataclass(frozen=True)
class RunManifest:
    config: str | None
    dataset: str
    output: str
    seed: int
    version: str
    started: str


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _read_json(path: Path):
    """Parse a JSON file; syntax errors become usage errors carrying line and column."""
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno} "
                         f"(offset {exc.pos}): {exc.msg}") from None


def _read_curves(path: Path, n_samples: int = 12):
    try:
        return curves_from_dict(_read_json(path), n_samples=n_samples)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _set_workers(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--workers must be >= 1")
    import numba  # noqa: PLC0415
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# --- subcommands -----------------------------------------------------------------

def cmd_gen(args) -> int:
    scene = make_scene(args.kind, args.views, args.size, args.seed, args.line_width)
    out = write_dataset(scene, args.out, args.format)
    print(f"wrote {len(scene.cameras)} views of '{scene.name}' to {out}")
    return EXIT_OK


def _load_config(args) -> TrainConfig:
    if args.config is None:
        doc = {}
    else:
        path = Path(args.config)
        if path.suffix.lower() == ".toml":
            try:
                return _override(TrainConfig.load(path), args)
            except FileNotFoundError:
                raise UsageError(f"{path}: no such file") from None
        doc = _read_json(path)
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    return _override(TrainConfig.from_dict(doc), args)


def _override(cfg: TrainConfig, args) -> TrainConfig:
    doc = cfg.to_dict()
    if args.iterations is not None:
        doc["iterations"] = args.iterations
    if args.seed is not None:
        doc["seed"] = args.seed
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> int:
    _set_workers(args.workers)
    cfg = _load_config(args)
    data = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.config, str(args.dataset), str(out), cfg.seed, __version__, _now())
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=1) + "\n")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")

    bbox = cfg.bbox if cfg.bbox is not None else data.bounds
    trainer = Trainer(cfg, data.views, bbox=bbox, out_dir=out)
    t0 = time.perf_counter()

    def progress(it, report, n_curves):
        if it % 100 == 0 or it == cfg.iterations:
            logger.info("iter %d  loss %.4f  edge %.4f  curves %d  (%.1fs)",
                        it, report.total, report.edge, n_curves, time.perf_counter() - t0)

    final = trainer.run(progress=progress)
    (out / "loss.csv").write_text(trainer.log.csv_text())
    (out / "events.jsonl").write_text(trainer.log.events_text())
    save_curves(out / "final_curves.json", final.curves)
    (out / "run_end.json").write_text(json.dumps(
        {"finished": _now(), "iterations": trainer.iteration, "final_curves": len(final.curves)},
        indent=1) + "\n")
    print(f"{len(final.curves)} curves after {trainer.iteration} iterations -> {out / 'final_curves.json'}")
    return EXIT_OK


def _select_cameras(cameras, ids: str | None):
    if ids is None:
        return cameras
    by_id = {c.id: c for c in cameras}
    chosen = []
    for tok in ids.split(","):
        try:
            cid = int(tok)
        except ValueError:
            raise UsageError(f"camera id {tok!r} is not an integer") from None
        if cid not in by_id:
            raise UsageError(f"unknown camera id {cid}")
        chosen.append(by_id[cid])
    return chosen


def cmd_render(args) -> int:
    _set_workers(args.workers)
    curves = _read_curves(Path(args.curves))
    cam_path = Path(args.cameras)
    _read_json(cam_path)  # syntax check with position info
    try:
        cameras = load_cameras(cam_path)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{cam_path}: {exc}") from None
    cameras = _select_cameras(cameras, args.camera_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    coupled = None
    if args.mode == "splat" and curves:
        arrays = CurveArrays.from_curves(curves, 12)
        arrays.mask_logits[:] = args.mask_logit
        coupled = couple_arrays(arrays, CouplingConfig())
    for cam in cameras:
        if args.mode == "oracle":
            img = oracle_render(curves, cam, args.line_width, args.supersample)
        elif coupled is None:
            img = np.zeros(cam.shape)
        else:
            img = render(coupled, cam).image
        write_edge_map(out / f"{cam.id:03d}.{args.format}", img)
    print(f"rendered {len(cameras)} views ({args.mode}) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = _read_curves(Path(args.pred))
    gt = _read_curves(Path(args.gt))
    if not gt:
        raise UsageError(f"{args.gt}: ground truth has no curves")
    report = evaluate_run(pred, gt, tau=args.tau, resolution=args.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    print(report.to_json(), end="")
    return EXIT_OK if report.status == "ok" else EXIT_RUNTIME


# --- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curvesplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic edge-map dataset")
    g.add_argument("--kind", required=True, choices=KINDS)
    g.add_argument("--views", type=int, default=20)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--line-width", type=float, default=2.0, help="stroke width in pixels")
    g.add_argument("--format", choices=("png", "pgm"), default="png")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="reconstruct curves from a dataset")
    t.add_argument("--config", help="TOML or JSON file with TrainConfig fields")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int, help="override the configured iteration count")
    t.add_argument("--seed", type=int, help="override the configured seed")
    t.add_argument("--workers", type=int, help="cap on renderer threads")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a curve file for every camera")
    r.add_argument("--curves", required=True)
    r.add_argument("--cameras", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=("splat", "oracle"), default="splat")
    r.add_argument("--camera-ids", help="comma-separated subset of camera ids")
    r.add_argument("--line-width", type=float, default=2.0, help="oracle stroke width in pixels")
    r.add_argument("--supersample", type=int, default=2, help="oracle supersampling factor")
    r.add_argument("--mask-logit", type=float, default=2.0, help="mask logit used for splat rendering")
    r.add_argument("--format", choices=("png", "pgm"), default="png")
    r.add_argument("--workers", type=int, help="cap on renderer threads")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="compare predicted curves with ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--tau", type=float, help="distance threshold (default 0.01 x GT bbox diagonal)")
    e.add_argument("--resolution", type=float, help="sampling resolution (default 0.005 x GT bbox diagonal)")
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)
    return p


def _configure_logging() -> None:
    level = os.environ.get("CURVESPLAT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CurveSplatError, OSError, ArithmeticError, RuntimeError, ValueError) as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
