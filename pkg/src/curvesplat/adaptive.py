"""Topology control during training: linearize, split, merge and prune curves.

Each pass mutates a :class:`CurveSet` in place and returns the list of
:class:`TopologyEvent` it produced. New curves always get fresh ids.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .coupling import sample_parameters, sigmoid
from .curves import (
    CurveSet, ParametricCurve, de_casteljau_split, derivative, evaluate, fit_cubic, fit_line, subcurve,
)
from .errors import CurveSplatError

LINEARIZE = "Linearize"
MERGE_LINES = "MergeLines"
MERGE_CUBICS = "MergeCubics"
SPLIT_GEOMETRIC = "SplitGeometric"
SPLIT_LOW_MASK = "SplitLowMask"
PRUNE_OPACITY = "PruneOpacity"
PRUNE_MASK = "PruneMask"
PRUNE_DEGENERATE = "PruneDegenerate"


@dataclass
class Schedule:
    linearize_start: int = 3000
    merge_start: int = 7000
    op_period: int = 1000
    opacity_freeze: int = 7000
    total_iters: int = 10000
    split_start: int = 7000
    prune_start: int = 7000

    def __post_init__(self):
        if not (self.linearize_start < self.merge_start <= self.opacity_freeze <= self.total_iters):
            raise ValueError("schedule must satisfy linearize_start < merge_start <= opacity_freeze <= total_iters")
        if self.op_period <= 0:
            raise ValueError("op_period must be positive")


# defaults as fractions of the scene bounding-box diagonal
_RELATIVE = {"tau_l": 0.005, "tau_ld": 0.01, "tau_b": 0.005}


@dataclass
class AdaptiveConfig:
    tau_l: float | None = None
    tau_la: float = math.radians(5.0)
    tau_ld: float | None = None
    tau_b: float | None = None
    theta_s: float = math.radians(30.0)
    tau_m: float = 0.01
    tau_d: float = 0.05
    schedule: Schedule = field(default_factory=Schedule)
    linearize: bool = True
    merge: bool = True
    split: bool = True
    prune: bool = True
    child_masks: str = "resample"   # or "mean"
    effective_mask: bool = True     # low-mask test on opacity * mask instead of mask alone

    def __post_init__(self):
        if self.child_masks not in ("resample", "mean"):
            raise ValueError("child_masks must be 'resample' or 'mean'")
        if isinstance(self.schedule, dict):
            self.schedule = Schedule(**self.schedule)
        for name in ("tau_l", "tau_ld", "tau_b", "tau_m", "tau_d"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("tau_la", "theta_s"):
            if not 0.0 < getattr(self, name) < math.pi:
                raise ValueError(f"{name} must lie in (0, pi)")

    def resolved(self, diagonal: float) -> "AdaptiveConfig":
        """Copy with scene-relative defaults turned into absolute distances."""
        kw = asdict(self)
        kw["schedule"] = self.schedule
        for name, frac in _RELATIVE.items():
            if kw[name] is None:
                kw[name] = frac * diagonal
        return AdaptiveConfig(**kw)


@dataclass
class TopologyEvent:
    iteration: int
    kind: str
    sources: list[int]
    results: list[int]

    def to_json(self) -> str:
        return json.dumps({"iteration": self.iteration, "kind": self.kind,
                           "sources": self.sources, "results": self.results})

    @classmethod
    def from_json(cls, line: str) -> "TopologyEvent":
        d = json.loads(line)
        return cls(int(d["iteration"]), d["kind"], list(d["sources"]), list(d["results"]))


def replay_events(initial_ids, events) -> list[int]:
    """Apply an event log to a set of ids; returns the surviving ids in insertion order."""
    alive = dict.fromkeys(initial_ids)
    for ev in events:
        for s in ev.sources:
            if s not in alive:
                raise KeyError(f"event {ev.kind}@{ev.iteration} consumes unknown curve {s}")
            del alive[s]
        for r in ev.results:
            alive[r] = None
    return list(alive)


def resample_logits(logits: np.ndarray, a: float, b: float) -> np.ndarray:
    """Parent mask logits read off at the samples of the child covering parent parameters [a, b].

    Values are interpolated linearly between parent samples and held constant
    beyond the first and last one.
    """
    n = logits.shape[0]
    t = sample_parameters(n)
    return np.interp(a + t * (b - a), t, logits)


def _child(curves: CurveSet, ctrl, parent: ParametricCurve, span, child_masks: str = "resample"):
    """New curve cut from ``parent`` over parameter interval ``span``."""
    if child_masks == "resample":
        logits = resample_logits(parent.mask_logits, *span)
    else:
        logits = np.full(parent.mask_logits.shape, float(np.mean(parent.mask_logits)))
    return ParametricCurve(ctrl, parent.opacity, parent.thickness, logits, curves.new_id())


# --- linearization ------------------------------------------------------------

def linearize_pass(curves: CurveSet, tau_l: float, n_samples: int = 12, iteration: int = 0):
    """Replace cubics that stay within ``tau_l`` (mean) of their chord by the chord."""
    events = []
    t = np.linspace(0.0, 1.0, n_samples)
    for k, c in enumerate(curves.curves):
        if not c.is_cubic:
            continue
        seg, err = fit_line(evaluate(c.control_points, t))
        if err < tau_l:
            curves.curves[k] = ParametricCurve(seg, c.opacity, c.thickness, c.mask_logits.copy(), c.id)
            events.append(TopologyEvent(iteration, LINEARIZE, [c.id], [c.id]))
    return events


# --- merging --------------------------------------------------------------------

def _closest_ends(a: np.ndarray, b: np.ndarray):
    """Indices (0 = start, 1 = end) of the closest endpoint pair and its distance."""
    best = None
    for ia in (0, 1):
        for ib in (0, 1):
            d = float(np.linalg.norm(a[ia] - b[ib]))
            if best is None or d < best[2]:
                best = (ia, ib, d)
    return best


def _candidate_pairs(group: list[ParametricCurve], radius: float):
    """Pairs of curves in ``group`` whose closest endpoints lie within ``radius``, nearest first."""
    if len(group) < 2:
        return []
    ends = np.concatenate([[c.endpoints[0] for c in group], [c.endpoints[1] for c in group]])
    tree = cKDTree(ends)
    n = len(group)
    pairs = set()
    for i, j in tree.query_pairs(radius):
        a, b = i % n, j % n
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    scored = []
    for a, b in sorted(pairs):
        ia, ib, d = _closest_ends(group[a].endpoints, group[b].endpoints)
        scored.append((d, a, b, ia, ib))
    scored.sort()
    return scored


def _extreme_pair(points: np.ndarray) -> np.ndarray:
    """The two points farthest apart; for touching collinear segments these are the far ends,
    for overlapping ones they span the union."""
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    i, j = np.unravel_index(int(np.argmax(d)), d.shape)
    i, j = min(i, j), max(i, j)
    return np.stack([points[i], points[j]])


def _oriented(ctrl: np.ndarray, flip: bool) -> np.ndarray:
    return ctrl[::-1].copy() if flip else ctrl


def merge_pass(curves: CurveSet, tau_la: float, tau_ld: float, tau_b: float,
               n_samples: int = 12, iteration: int = 0, theta_s: float | None = None):
    """Greedy disjoint merging of nearly collinear line pairs and of adjacent cubics.

    With ``theta_s`` set, a cubic merge is rejected when the refit curve would
    itself trigger a geometric split.
    """
    events = []
    used: set[int] = set()
    new_curves: list[ParametricCurve] = []

    lines = [c for c in curves.curves if not c.is_cubic]
    for d, a, b, ia, ib in _candidate_pairs(lines, tau_ld):
        la, lb = lines[a], lines[b]
        if la.id in used or lb.id in used or d >= tau_ld:
            continue
        da = la.endpoints[1] - la.endpoints[0]
        db = lb.endpoints[1] - lb.endpoints[0]
        na, nb = np.linalg.norm(da), np.linalg.norm(db)
        if na == 0 or nb == 0:
            continue
        angle = math.acos(min(1.0, abs(float(da @ db)) / (na * nb)))
        if angle >= tau_la:
            continue
        seg = _extreme_pair(np.concatenate([la.endpoints, lb.endpoints]))
        merged = _merged(curves, seg, la, lb)
        used.update((la.id, lb.id))
        new_curves.append(merged)
        events.append(TopologyEvent(iteration, MERGE_LINES, [la.id, lb.id], [merged.id]))

    cubics = [c for c in curves.curves if c.is_cubic]
    t = np.linspace(0.0, 1.0, n_samples)
    for d, a, b, ia, ib in _candidate_pairs(cubics, tau_ld):
        ca, cb = cubics[a], cubics[b]
        if ca.id in used or cb.id in used or d >= tau_ld:
            continue
        # orient so the pair runs start(a) -> junction -> end(b)
        pa = _oriented(ca.control_points, flip=(ia == 0))
        pb = _oriented(cb.control_points, flip=(ib == 1))
        pts = np.concatenate([evaluate(pa, t), evaluate(pb, t)])
        try:
            ctrl, err = fit_cubic(pts)
        except CurveSplatError:
            continue
        if err >= tau_b:
            continue
        if theta_s is not None:
            angles = sample_angles(ctrl, n_samples)
            if angles is None or angles.max() > theta_s:
                continue
        merged = _merged(curves, ctrl, ca, cb)
        used.update((ca.id, cb.id))
        new_curves.append(merged)
        events.append(TopologyEvent(iteration, MERGE_CUBICS, [ca.id, cb.id], [merged.id]))

    if used:
        curves.curves = [c for c in curves.curves if c.id not in used] + new_curves
    return events


def _merged(curves: CurveSet, ctrl, a: ParametricCurve, b: ParametricCurve) -> ParametricCurve:
    logit = float(np.mean(np.concatenate([a.mask_logits, b.mask_logits])))
    return ParametricCurve(
        ctrl, max(a.opacity, b.opacity), 0.5 * (a.thickness + b.thickness),
        np.full(a.mask_logits.shape, logit), curves.new_id(),
    )


# --- splitting ------------------------------------------------------------------

def sample_angles(ctrl: np.ndarray, n_samples: int) -> np.ndarray | None:
    """Angles between tangents of neighbouring coupling samples; None if degenerate."""
    d = derivative(ctrl, sample_parameters(n_samples))
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(norm == 0):
        return None
    v = d / norm
    return np.arccos(np.clip(np.sum(v[:-1] * v[1:], axis=1), -1.0, 1.0))


def high_mask_runs(low: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs ``(a, b)`` of consecutive samples not flagged ``low``."""
    runs, start = [], None
    for j, flag in enumerate(list(low) + [True]):
        if not flag and start is None:
            start = j
        elif flag and start is not None:
            runs.append((start, j - 1))
            start = None
    return runs


def low_mask_spans(low: np.ndarray, t: np.ndarray) -> list[tuple[float, float]]:
    """Parameter intervals left after removing every low Gaussian.

    Removing Gaussian i cuts the open interval (t_{i-1}, t_{i+1}), with the
    curve ends standing in for missing neighbours. A run of kept samples
    touching either end extends to it; interior single samples have zero
    length and are dropped.
    """
    last = len(low) - 1
    spans = []
    for a, b in high_mask_runs(low):
        lo = 0.0 if a == 0 else float(t[a])
        hi = 1.0 if b == last else float(t[b])
        if hi > lo:
            spans.append((lo, hi))
    return spans


def split_pass(curves: CurveSet, theta_s: float, tau_m: float, n_samples: int = 12, iteration: int = 0,
               child_masks: str = "resample", effective_mask: bool = False):
    """Split at sharp turns (cubics) or around low-mask Gaussians (any curve).

    Each curve is split at most once per pass; the geometric trigger wins when
    both apply. A low-mask split removes every Gaussian below ``tau_m`` in one
    go and keeps the pieces between them. Curves whose masks are all below
    ``tau_m`` are left for pruning. ``child_masks`` selects how children get
    their mask logits: ``"resample"`` reads the parent's logits at the
    positions the child covers, ``"mean"`` fills every slot with the parent's
    mean logit. With ``effective_mask`` a Gaussian counts as low when its
    rendered weight ``opacity * mask`` is below ``tau_m``; a curve whose
    Gaussians are all low in that sense but not all low by mask alone is
    removed here, since pruning would keep it.
    """
    events = []
    out: list[ParametricCurve] = []
    t = sample_parameters(n_samples)
    for c in curves.curves:
        if c.is_cubic and n_samples >= 2:
            angles = sample_angles(c.control_points, n_samples)
            if angles is not None and angles.max() > theta_s:
                i = int(np.argmax(angles))
                s = 0.5 * (t[i] + t[i + 1])
                left, right = de_casteljau_split(c.control_points, s)
                kids = [_child(curves, left, c, (0.0, s), child_masks),
                        _child(curves, right, c, (s, 1.0), child_masks)]
                out.extend(kids)
                events.append(TopologyEvent(iteration, SPLIT_GEOMETRIC, [c.id], [k.id for k in kids]))
                continue
        masks = sigmoid(c.mask_logits)
        low = masks * c.opacity < tau_m if effective_mask else masks < tau_m
        if low.all() and not np.all(masks < tau_m):
            events.append(TopologyEvent(iteration, SPLIT_LOW_MASK, [c.id], []))
            continue
        if low.any() and not low.all():
            kids = [_child(curves, subcurve(c.control_points, lo, hi), c, (lo, hi), child_masks)
                    for lo, hi in low_mask_spans(low, t)]
            out.extend(kids)
            events.append(TopologyEvent(iteration, SPLIT_LOW_MASK, [c.id], [k.id for k in kids]))
            continue
        out.append(c)
    curves.curves = out
    return events


# --- pruning --------------------------------------------------------------------

def prune_pass(curves: CurveSet, tau_d: float, tau_m: float, iteration: int = 0):
    events = []
    keep = []
    for c in curves.curves:
        if c.opacity < tau_d:
            events.append(TopologyEvent(iteration, PRUNE_OPACITY, [c.id], []))
        elif np.all(sigmoid(c.mask_logits) < tau_m):
            events.append(TopologyEvent(iteration, PRUNE_MASK, [c.id], []))
        else:
            keep.append(c)
    curves.curves = keep
    return events


# --- schedule ---------------------------------------------------------------------

@dataclass
class ScheduleFlags:
    opacity_learnable: bool
    mask_loss_on: bool


def schedule_flags(iteration: int, schedule: Schedule) -> ScheduleFlags:
    return ScheduleFlags(
        opacity_learnable=iteration < schedule.opacity_freeze,
        mask_loss_on=iteration >= schedule.opacity_freeze,
    )


def due_passes(iteration: int, cfg: AdaptiveConfig) -> list[str]:
    """Names of the passes that fire at ``iteration``, in execution order."""
    s = cfg.schedule
    if iteration <= 0 or iteration % s.op_period or iteration < s.linearize_start:
        return []
    passes = []
    if cfg.prune and iteration >= s.prune_start:
        passes.append("prune")
    if cfg.linearize:
        passes.append("linearize")
    if cfg.split and iteration >= s.split_start:
        passes.append("split")
    if cfg.merge and iteration >= s.merge_start:
        passes.append("merge")
    return passes


def run_schedule(iteration: int, curves: CurveSet, cfg: AdaptiveConfig, n_samples: int = 12):
    """Run whichever passes are due; returns ``(events, flags)``.

    ``cfg`` must already be :meth:`AdaptiveConfig.resolved`.
    """
    events = []
    for name in due_passes(iteration, cfg):
        if name == "linearize":
            events += linearize_pass(curves, cfg.tau_l, n_samples, iteration)
        elif name == "split":
            events += split_pass(curves, cfg.theta_s, cfg.tau_m, n_samples, iteration, cfg.child_masks,
                                  cfg.effective_mask)
        elif name == "merge":
            events += merge_pass(curves, cfg.tau_la, cfg.tau_ld, cfg.tau_b, n_samples, iteration,
                                 theta_s=cfg.theta_s if cfg.split else None)
        elif name == "prune":
            events += prune_pass(curves, cfg.tau_d, cfg.tau_m, iteration)
    return events, schedule_flags(iteration, cfg.schedule)
