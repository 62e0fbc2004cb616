"""Optimization loop: random curve initialization, per-view gradient steps and topology control."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

from .adaptive import (
    PRUNE_DEGENERATE, PRUNE_OPACITY, AdaptiveConfig, Schedule, TopologyEvent, run_schedule, schedule_flags,
)
from .coupling import CouplingConfig, CurveArrays
from .curves import CurveSet, ParametricCurve, check_bounds, curves_from_dict, dumps_curves
from .errors import ConfigError, EmptyDataset
from .losses import LossReport, LossWeights, scene_objective
from .render import Camera

logger = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "edge", "conn", "smo", "reg", "mask", "total", "n_curves", "n_gaussians")
GROUPS = ("control_points", "opacity", "thickness", "mask_logits")


@dataclass
class LearningRates:
    control_points: float = 1e-3   # x bbox diagonal
    opacity: float = 0.02
    thickness: float = 1e-4        # x bbox diagonal
    mask_logits: float = 0.01


@dataclass
class TrainConfig:
    initial_curve_count: int = 256
    iterations: int = 10000
    views_per_step: int = 1
    learning_rates: LearningRates = field(default_factory=LearningRates)
    loss: LossWeights = field(default_factory=LossWeights)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    seed: int = 0
    bbox: list | None = None
    checkpoint_every: int = 1000
    init_jitter: float = 0.05       # x bbox diagonal
    init_opacity: float = 0.5
    init_thickness: float = 0.005   # x bbox diagonal
    init_mask_logit: float = 2.0
    thickness_floor: float = 1e-4   # x bbox diagonal

    def __post_init__(self):
        if self.initial_curve_count < 1:
            raise ConfigError("initial_curve_count", "must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations", "must be >= 0")
        if self.views_per_step < 1:
            raise ConfigError("views_per_step", "must be >= 1")
        for g in GROUPS:
            if not getattr(self.learning_rates, g) >= 0:
                raise ConfigError(f"learning_rates.{g}", "must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every", "must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        nested = {
            "learning_rates": LearningRates, "loss": LossWeights,
            "adaptive": AdaptiveConfig, "coupling": CouplingConfig,
        }
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(key, "unknown config field")
            if key in nested and isinstance(value, dict):
                sub_known = {f.name for f in fields(nested[key])}
                for sub in value:
                    if sub not in sub_known:
                        raise ConfigError(f"{key}.{sub}", "unknown config field")
                if key == "adaptive" and isinstance(value.get("schedule"), dict):
                    sched_known = {f.name for f in fields(Schedule)}
                    for sub in value["schedule"]:
                        if sub not in sched_known:
                            raise ConfigError(f"adaptive.schedule.{sub}", "unknown config field")
                try:
                    value = nested[key](**value)
                except ConfigError:
                    raise
                except (TypeError, ValueError) as exc:
                    raise ConfigError(key, str(exc)) from exc
            kw[key] = value
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".toml":
            doc = _toml.loads(text)
        else:
            doc = json.loads(text)
        return cls.from_dict(doc)


def estimate_bounds(cameras: list[Camera]) -> np.ndarray:
    """Scene box from the cameras alone: frustum cross-sections at the median look-at depth."""
    centers = np.array([c.center for c in cameras])
    axes = np.array([c.rotation[2] for c in cameras])
    # least-squares point closest to every optical axis
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(centers, axes):
        proj = np.eye(3) - np.outer(d, d)
        a += proj
        b += proj @ o
    target = np.linalg.lstsq(a, b, rcond=None)[0]
    depth = float(np.median([(target - o) @ d for o, d in zip(centers, axes)]))
    corners = []
    for cam in cameras:
        for u in (0.0, cam.width):
            for v in (0.0, cam.height):
                ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0]) * depth
                corners.append(cam.rotation.T @ (ray - cam.translation))
    corners = np.array(corners)
    return np.stack([corners.min(axis=0), corners.max(axis=0)])


def initialize(config: TrainConfig, bbox) -> CurveSet:
    """Random cubics with endpoints uniform in ``bbox`` and jittered inner controls."""
    bbox = check_bounds(bbox)
    diag = float(np.linalg.norm(bbox[1] - bbox[0]))
    rng = np.random.default_rng(config.seed)
    n = config.coupling.n_samples
    count = config.initial_curve_count
    p0 = rng.uniform(bbox[0], bbox[1], size=(count, 3))
    p3 = rng.uniform(bbox[0], bbox[1], size=(count, 3))
    jitter = rng.normal(0.0, config.init_jitter * diag, size=(count, 2, 3))
    curves = CurveSet(bbox=bbox, rng_seed=config.seed)
    for k in range(count):
        ctrl = np.stack([
            p0[k], (2 * p0[k] + p3[k]) / 3 + jitter[k, 0], (p0[k] + 2 * p3[k]) / 3 + jitter[k, 1], p3[k],
        ])
        curves.curves.append(ParametricCurve(
            ctrl, config.init_opacity, config.init_thickness * diag,
            np.full(n, config.init_mask_logit), curves.new_id(),
        ))
    return curves


class Adam:
    """Adam over row-aligned parameter arrays (one row per curve).

    Step counts are kept per row, so a curve created by a topology change gets
    its own bias correction instead of inheriting the age of the run.
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-15):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, np.ndarray] = {}

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = np.zeros(param.shape[0], dtype=np.int64)
        m, v = self.m[name], self.v[name]
        self.t[name] += 1
        t = self.t[name].reshape((-1,) + (1,) * (param.ndim - 1))
        m *= self.b1
        m += (1 - self.b1) * grad
        v *= self.b2
        v += (1 - self.b2) * grad * grad
        m_hat = m / (1 - self.b1**t)
        v_hat = v / (1 - self.b2**t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap(self, old_ids: np.ndarray, new: CurveArrays, old_is_cubic: np.ndarray) -> None:
        """Carry state over to the rows of surviving curves; new curves start from scratch."""
        row_of = {int(i): r for r, i in enumerate(old_ids)}
        for name in list(self.m):
            self.t[name] = np.array([self.t[name][row_of[int(c)]] if int(c) in row_of else 0
                                     for c in new.ids], dtype=np.int64)
            for store in (self.m, self.v):
                old = store[name]
                fresh = np.zeros((len(new),) + old.shape[1:])
                for r, cid in enumerate(new.ids):
                    src = row_of.get(int(cid))
                    if src is None:
                        continue
                    if name == "control_points" and old_is_cubic[src] and not new.is_cubic[r]:
                        fresh[r, 0] = old[src, 0]
                        fresh[r, 1] = old[src, 3]
                    else:
                        fresh[r] = old[src]
                store[name] = fresh


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)
    events: list[TopologyEvent] = field(default_factory=list)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in self.rows:
            w.writerow([row[0]] + [repr(v) for v in row[1:7]] + list(row[7:]))
        return buf.getvalue()

    def events_text(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


class Trainer:
    """Owns the curve state and optimizer; one :meth:`step` per gradient update."""

    def __init__(self, config: TrainConfig, views, bbox=None, out_dir=None):
        self.config = config
        self.views = list(views)
        if not self.views:
            raise EmptyDataset("training needs at least one view")
        if bbox is None:
            bbox = config.bbox if config.bbox is not None else estimate_bounds([v[0] for v in self.views])
        self.bbox = check_bounds(bbox)
        self.diag = float(np.linalg.norm(self.bbox[1] - self.bbox[0]))
        self.adaptive = config.adaptive.resolved(self.diag)
        self.tau_conn = config.loss.tau_conn if config.loss.tau_conn is not None else 0.02 * self.diag
        self.tangent_eps = 1e-9 * self.diag
        self.lr = {
            "control_points": config.learning_rates.control_points * self.diag,
            "opacity": config.learning_rates.opacity,
            "thickness": config.learning_rates.thickness * self.diag,
            "mask_logits": config.learning_rates.mask_logits,
        }
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.view_rng = np.random.default_rng([config.seed, 1])
        self.queue: list[int] = []
        self.iteration = 0
        self.adam = Adam()
        self.log = TrainLog()
        init = initialize(config, self.bbox)
        self.next_id = init.next_id
        self.arrays = CurveArrays.from_curves(init.curves, config.coupling.n_samples)
        self.initial_ids = [int(i) for i in self.arrays.ids]

    # --- state views -----------------------------------------------------------

    def curve_set(self) -> CurveSet:
        return CurveSet(self.arrays.to_curves(), self.bbox.copy(), self.config.seed, self.next_id)

    def _set_curves(self, curves: CurveSet) -> None:
        old_ids, old_cubic = self.arrays.ids.copy(), self.arrays.is_cubic.copy()
        self.arrays = CurveArrays.from_curves(curves.curves, self.config.coupling.n_samples)
        self.next_id = curves.next_id
        self.adam.remap(old_ids, self.arrays, old_cubic)

    def _next_view(self) -> int:
        if not self.queue:
            self.queue = [int(i) for i in self.view_rng.permutation(len(self.views))]
        return self.queue.pop(0)

    # --- optimization ------------------------------------------------------------

    def step(self, cam: Camera | None = None, truth: np.ndarray | None = None) -> LossReport:
        """One gradient update (on the given view, or the next in the shuffled cycle)."""
        it = self.iteration + 1
        flags = schedule_flags(it, self.adaptive.schedule)
        if cam is None:
            batch = [self.views[self._next_view()] for _ in range(self.config.views_per_step)]
        else:
            batch = [(cam, truth)]
        a = self.arrays
        reports, grads = [], None
        for cam_k, truth_k in batch:
            rep, g, _, coupled = scene_objective(
                a, cam_k, truth_k, self.config.loss, self.config.coupling, self.tau_conn,
                mask_on=flags.mask_loss_on, eps=self.tangent_eps,
            )
            reports.append(rep)
            degenerate = coupled.degenerate
            if grads is None:
                grads = g
            else:
                grads += g
        report = reports[0] if len(reports) == 1 else LossReport(
            *[float(np.mean([getattr(r, f) for r in reports])) for f in ("total", "edge", "conn", "smo", "reg", "mask")])
        if len(batch) > 1:
            scale = 1.0 / len(batch)
            grads.ctrl *= scale
            grads.thickness *= scale
            grads.opacity *= scale
            grads.mask_logits *= scale

        self.adam.update("control_points", a.ctrl, grads.ctrl, self.lr["control_points"])
        self.adam.update("thickness", a.thickness, grads.thickness, self.lr["thickness"])
        if flags.opacity_learnable:
            self.adam.update("opacity", a.opacity, grads.opacity, self.lr["opacity"])
        self.adam.update("mask_logits", a.mask_logits, grads.mask_logits, self.lr["mask_logits"])
        np.clip(a.opacity, 0.0, 1.0, out=a.opacity)
        np.maximum(a.thickness, self.config.thickness_floor * self.diag, out=a.thickness)
        # lines keep their unused padded slots at zero
        a.ctrl[~a.is_cubic, 2:] = 0.0

        self.iteration = it
        n = self.config.coupling.n_samples
        self.log.rows.append((it, report.edge, report.conn, report.smo, report.reg, report.mask,
                              report.total, len(a), len(a) * n))
        self._topology(it, degenerate)
        if self.out_dir is not None and it % self.config.checkpoint_every == 0:
            self.save_checkpoint(self.out_dir / "checkpoints" / f"iter_{it:06d}")
        return report

    def _topology(self, it: int, degenerate: np.ndarray) -> None:
        cs = None
        if degenerate.any():
            cs = self.curve_set()
            bad = set(int(i) for i in self.arrays.ids[degenerate])
            cs.curves = [c for c in cs.curves if c.id not in bad]
            self.log.events += [TopologyEvent(it, PRUNE_DEGENERATE, [i], []) for i in sorted(bad)]
        if it % self.adaptive.schedule.op_period == 0:
            cs = cs or self.curve_set()
            events, _ = run_schedule(it, cs, self.adaptive, self.config.coupling.n_samples)
            self.log.events += events
        if cs is not None:
            self._set_curves(cs)

    def run(self, iterations: int | None = None, progress=None) -> CurveSet:
        total = self.config.iterations if iterations is None else iterations
        while self.iteration < total:
            report = self.step()
            if progress is not None:
                progress(self.iteration, report, len(self.arrays))
        return self.finalize()

    def finalize(self) -> CurveSet:
        """Final curve set with near-transparent curves removed."""
        cs = self.curve_set()
        keep = []
        for c in cs.curves:
            if c.opacity < self.adaptive.tau_d:
                self.log.events.append(TopologyEvent(self.iteration, PRUNE_OPACITY, [c.id], []))
            else:
                keep.append(c)
        cs.curves = keep
        return cs

    # --- checkpoints ------------------------------------------------------------------

    def save_checkpoint(self, stem) -> None:
        """Writes ``<stem>.json`` (curve format) and ``<stem>.npz`` (optimizer state)."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        cs = self.curve_set()
        cs.check(self.config.coupling.n_samples)
        stem.with_suffix(".json").write_text(dumps_curves(cs.curves))
        meta = {
            "iteration": self.iteration, "next_id": self.next_id, "queue": self.queue,
            "view_rng": self.view_rng.bit_generator.state, "adam_groups": sorted(self.adam.m),
            "bbox": self.bbox.tolist(), "initial_ids": self.initial_ids,
        }
        arrays = {"mask_logits": self.arrays.mask_logits, "meta": np.array(json.dumps(meta))}
        for name in self.adam.m:
            arrays[f"m_{name}"] = self.adam.m[name]
            arrays[f"v_{name}"] = self.adam.v[name]
            arrays[f"t_{name}"] = self.adam.t[name]
        np.savez(stem.with_suffix(".npz"), **arrays)

    @classmethod
    def from_checkpoint(cls, stem, config: TrainConfig, views, out_dir=None) -> "Trainer":
        stem = Path(stem)
        side = np.load(stem.with_suffix(".npz"))
        meta = json.loads(str(side["meta"]))
        tr = cls(config, views, bbox=np.array(meta["bbox"]), out_dir=out_dir)
        curves = curves_from_dict(json.loads(stem.with_suffix(".json").read_text()), config.coupling.n_samples)
        for c, logits in zip(curves, side["mask_logits"]):
            c.mask_logits = logits.copy()
        cs = CurveSet(curves, tr.bbox, config.seed, meta["next_id"])
        cs.check(config.coupling.n_samples)
        tr.arrays = CurveArrays.from_curves(cs.curves, config.coupling.n_samples)
        tr.next_id = meta["next_id"]
        tr.iteration = meta["iteration"]
        tr.queue = list(meta["queue"])
        tr.view_rng.bit_generator.state = meta["view_rng"]
        tr.initial_ids = meta["initial_ids"]
        for name in meta["adam_groups"]:
            tr.adam.t[name] = side[f"t_{name}"].copy()
            tr.adam.m[name] = side[f"m_{name}"].copy()
            tr.adam.v[name] = side[f"v_{name}"].copy()
        return tr


def train(config: TrainConfig, dataset, bbox=None, out_dir=None, progress=None):
    """Run the full optimization; returns ``(final CurveSet, TrainLog)``.

    ``dataset`` is a list of ``(Camera, edge_map)`` pairs.
    """
    views = list(dataset)
    if not views:
        raise EmptyDataset("training needs at least one view")
    trainer = Trainer(config, views, bbox=bbox, out_dir=out_dir)
    final = trainer.run(progress=progress)
    return final, trainer.log


def train_step(trainer: Trainer, view) -> LossReport:
    cam, truth = view
    if truth.shape != cam.shape:
        raise ValueError(f"edge map {truth.shape} does not match camera {cam.shape}")
    return trainer.step(cam, truth)
