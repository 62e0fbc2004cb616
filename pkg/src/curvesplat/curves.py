"""Bezier curve primitives: evaluation, derivatives, subdivision and refitting.

Control points are stored as ``(k, 3)`` float arrays where ``k == 4`` for a
cubic Bezier and ``k == 2`` for a line segment. Every function here dispatches
on ``k``; there is no separate class per degree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .errors import (
    DegenerateBounds,
    DegenerateTangent,
    InsufficientPoints,
    InvalidSplitParameter,
    SingularSystem,
)

CUBIC = "cubic"
LINE = "line"
_KIND_BY_COUNT = {4: CUBIC, 2: LINE}
_COUNT_BY_KIND = {CUBIC: 4, LINE: 2}


def _degree(ctrl: np.ndarray) -> int:
    n = ctrl.shape[0]
    if n not in _KIND_BY_COUNT:
        raise ValueError(f"expected 2 or 4 control points, got {n}")
    return n - 1


def bernstein(t, degree: int) -> np.ndarray:
    """Bernstein basis values, shape ``t.shape + (degree + 1,)``."""
    t = np.asarray(t, dtype=float)[..., None]
    k = np.arange(degree + 1)
    coef = np.array([comb(degree, i) for i in k], dtype=float)
    return coef * t**k * (1.0 - t) ** (degree - k)


def bernstein_derivative(t, degree: int) -> np.ndarray:
    """d/dt of the Bernstein basis, expressed over the same control points."""
    t = np.asarray(t, dtype=float)
    lower = bernstein(t, degree - 1)
    out = np.zeros(t.shape + (degree + 1,))
    out[..., :-1] -= degree * lower
    out[..., 1:] += degree * lower
    return out


def evaluate(ctrl: np.ndarray, t) -> np.ndarray:
    """Point(s) on the curve at parameter(s) ``t``; ``t`` is clamped to [0, 1].

    >>> evaluate(np.array([[0., 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]]), 0.5)
    array([0.5 , 0.75, 0.  ])
    """
    ctrl = np.asarray(ctrl, dtype=float)
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    deg = _degree(ctrl)
    out = bernstein(t, deg) @ ctrl
    # Bernstein sums can be off by an ulp at the ends; endpoints must interpolate exactly.
    out = np.where(np.asarray(t == 0.0)[..., None], ctrl[0], out)
    out = np.where(np.asarray(t == 1.0)[..., None], ctrl[-1], out)
    return out


def evaluate_jacobian(ctrl_or_degree, t: float) -> np.ndarray:
    """Weights ``d c(t) / d P_k`` (each a multiple of the identity)."""
    if isinstance(ctrl_or_degree, (int, np.integer)):
        deg = int(ctrl_or_degree)
    else:
        deg = _degree(np.asarray(ctrl_or_degree))
    return bernstein(np.clip(t, 0.0, 1.0), deg)


def derivative(ctrl: np.ndarray, t) -> np.ndarray:
    ctrl = np.asarray(ctrl, dtype=float)
    return bernstein_derivative(np.clip(t, 0.0, 1.0), _degree(ctrl)) @ ctrl


def tangent(ctrl: np.ndarray, t, eps: float = 1e-9) -> np.ndarray:
    """Unit tangent ``c'(t) / |c'(t)|``.

    Raises DegenerateTangent when ``|c'(t)| < eps``. Callers working in a scene
    should pass ``eps = 1e-9 * bbox_diagonal``.
    """
    d = derivative(ctrl, t)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(norm < eps):
        raise DegenerateTangent(f"|c'(t)| below {eps:g}")
    return d / norm


def de_casteljau_split(ctrl: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Split a cubic at ``s`` into the pieces covering [0, s] and [s, 1]."""
    ctrl = np.asarray(ctrl, dtype=float)
    if _degree(ctrl) != 3:
        raise ValueError("de_casteljau_split expects a cubic")
    if not 0.0 < s < 1.0:
        raise InvalidSplitParameter(f"split parameter must lie in (0, 1), got {s}")
    # levels[i][k]: the k-th point of the i-th interpolation level
    levels = [ctrl]
    for _ in range(3):
        prev = levels[-1]
        levels.append((1.0 - s) * prev[:-1] + s * prev[1:])
    left = np.stack([levels[0][0], levels[1][0], levels[2][0], levels[3][0]])
    right = np.stack([levels[3][0], levels[2][1], levels[1][2], levels[0][3]])
    return left, right


def subcurve(ctrl: np.ndarray, a: float, b: float) -> np.ndarray:
    """Control points of the piece of ``ctrl`` restricted to parameters [a, b]."""
    ctrl = np.asarray(ctrl, dtype=float)
    if not 0.0 <= a < b <= 1.0:
        raise InvalidSplitParameter(f"need 0 <= a < b <= 1, got [{a}, {b}]")
    if _degree(ctrl) == 1:
        return np.stack([evaluate(ctrl, a), evaluate(ctrl, b)])
    piece = ctrl
    if b < 1.0:
        piece, _ = de_casteljau_split(piece, b)
    if a > 0.0:
        _, piece = de_casteljau_split(piece, a / b)
    return piece


def arc_length(ctrl: np.ndarray, segments: int = 64) -> float:
    pts = evaluate(ctrl, np.linspace(0.0, 1.0, segments + 1))
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def elevate_line(ctrl: np.ndarray) -> np.ndarray:
    """Exact cubic representation of a line segment."""
    p0, p1 = np.asarray(ctrl, dtype=float)
    return np.stack([p0, (2 * p0 + p1) / 3, (p0 + 2 * p1) / 3, p1])


def chord_projection(points: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Parameters on ``seg`` of the orthogonal projections of ``points`` (clamped)."""
    d = seg[1] - seg[0]
    ll = float(d @ d)
    if ll == 0.0:
        return np.zeros(points.shape[0])
    return np.clip((points - seg[0]) @ d / ll, 0.0, 1.0)


def fit_line(points: np.ndarray, params: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Chord segment through the first and last point, and its mean deviation.

    The deviation is ``mean_i |(1 - t_i) p_first + t_i p_last - p_i|``. By
    default ``t_i`` is the orthogonal projection of ``p_i`` onto the chord, so
    the error measures shape only; pass ``params`` to compare at fixed
    parameters instead.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 2:
        raise InsufficientPoints("fit_line needs at least 2 points")
    seg = np.stack([points[0], points[-1]])
    if params is None:
        params = chord_projection(points, seg)
    err = np.linalg.norm(evaluate(seg, params) - points, axis=1).mean()
    return seg, float(err)


def chord_parameters(points: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = steps.sum()
    if total <= 0.0 or not np.isfinite(total):
        raise SingularSystem("samples coincide; chord length is zero")
    return np.concatenate([[0.0], np.cumsum(steps) / total])


def fit_cubic(points: np.ndarray, refine: bool = True) -> tuple[np.ndarray, float]:
    """Least-squares cubic with both endpoints clamped to the first/last sample.

    Starts from a chord-length parameterization and the linear least-squares
    solution for the two inner controls; ``refine`` then jointly optimizes the
    inner controls and interior sample parameters (Gauss-Newton), which lets
    samples of an exact cubic be recovered regardless of their spacing.

    Returns the control points and the root-mean-square sample-to-curve
    distance ``sqrt(mean_i |c(t_i) - p_i|^2)`` at the final parameters.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 4:
        raise InsufficientPoints("fit_cubic needs at least 4 points")
    n = points.shape[0]
    t = chord_parameters(points)
    p0, p3 = points[0], points[-1]

    basis = bernstein(t, 3)
    design = basis[:, 1:3]
    if np.linalg.matrix_rank(design) < 2:
        raise SingularSystem("normal equations are rank-deficient")
    rhs = points - np.outer(basis[:, 0], p0) - np.outer(basis[:, 3], p3)
    inner, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    ctrl = np.stack([p0, inner[0], inner[1], p3])

    if refine and n > 2:
        ctrl, t = _refine_cubic(points, ctrl, t)

    err = np.sqrt(np.mean(np.sum((evaluate(ctrl, t) - points) ** 2, axis=1)))
    return ctrl, float(err)


def _refine_cubic(points, ctrl, t):
    n = points.shape[0]
    p0, p3 = points[0], points[-1]

    def unpack(x):
        c = np.stack([p0, x[0:3], x[3:6], p3])
        tt = np.concatenate([[0.0], x[6:], [1.0]])
        return c, tt

    def residual(x):
        c, tt = unpack(x)
        return (bernstein(tt, 3) @ c - points).ravel()

    def jacobian(x):
        c, tt = unpack(x)
        b = bernstein(tt, 3)
        db = bernstein_derivative(tt, 3) @ c
        jac = np.zeros((n, 3, 6 + n - 2))
        eye = np.eye(3)
        jac[:, :, 0:3] = b[:, 1, None, None] * eye
        jac[:, :, 3:6] = b[:, 2, None, None] * eye
        for i in range(1, n - 1):
            jac[i, :, 6 + i - 1] = db[i]
        return jac.reshape(3 * n, -1)

    x0 = np.concatenate([ctrl[1], ctrl[2], t[1:-1]])
    lower = np.concatenate([np.full(6, -np.inf), np.zeros(n - 2)])
    upper = np.concatenate([np.full(6, np.inf), np.ones(n - 2)])
    try:
        sol = least_squares(
            residual, x0, jac=jacobian, bounds=(lower, upper),
            method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200,
        )
    except (ValueError, np.linalg.LinAlgError):
        return ctrl, t
    if sol.cost <= 0.5 * float(np.sum(residual(x0) ** 2)):
        return unpack(sol.x)
    return ctrl, t


@dataclass
class ParametricCurve:
    """A cubic Bezier or line segment plus the attributes optimized with it."""

    control_points: np.ndarray
    opacity: float
    thickness: float
    mask_logits: np.ndarray
    id: int

    def __post_init__(self):
        self.control_points = np.array(self.control_points, dtype=float)
        self.mask_logits = np.array(self.mask_logits, dtype=float)
        _degree(self.control_points)

    @property
    def kind(self) -> str:
        return _KIND_BY_COUNT[self.control_points.shape[0]]

    @property
    def is_cubic(self) -> bool:
        return self.control_points.shape[0] == 4

    @property
    def endpoints(self) -> np.ndarray:
        return self.control_points[[0, -1]]

    def check(self, n_samples: int | None = None) -> None:
        if not np.all(np.isfinite(self.control_points)):
            raise ValueError(f"curve {self.id}: non-finite control points")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"curve {self.id}: opacity {self.opacity} outside [0, 1]")
        if not self.thickness > 0.0:
            raise ValueError(f"curve {self.id}: thickness must be positive")
        if n_samples is not None and self.mask_logits.shape != (n_samples,):
            raise ValueError(f"curve {self.id}: expected {n_samples} mask logits")

    def copy(self) -> "ParametricCurve":
        return ParametricCurve(
            self.control_points.copy(), self.opacity, self.thickness,
            self.mask_logits.copy(), self.id,
        )


@dataclass
class CurveSet:
    """The dynamic collection of curves being optimized.

    Ids are handed out by :meth:`new_id` and never reused, even after a curve
    is removed.
    """

    curves: list[ParametricCurve] = field(default_factory=list)
    bbox: np.ndarray = field(default_factory=lambda: np.array([[0.0, 0, 0], [1.0, 1, 1]]))
    rng_seed: int = 0
    next_id: int = 0

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=float).reshape(2, 3)
        if self.curves:
            self.next_id = max(self.next_id, max(c.id for c in self.curves) + 1)

    def __len__(self) -> int:
        return len(self.curves)

    def __iter__(self):
        return iter(self.curves)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bbox[1] - self.bbox[0]))

    def new_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def by_id(self) -> dict[int, ParametricCurve]:
        return {c.id: c for c in self.curves}

    def check(self, n_samples: int | None = None) -> None:
        ids = [c.id for c in self.curves]
        if len(set(ids)) != len(ids):
            raise ValueError("curve ids are not unique")
        for c in self.curves:
            c.check(n_samples)

    def copy(self) -> "CurveSet":
        return CurveSet([c.copy() for c in self.curves], self.bbox.copy(), self.rng_seed, self.next_id)


def bbox_of_curves(curves) -> np.ndarray:
    pts = np.concatenate([evaluate(c.control_points, np.linspace(0, 1, 33)) for c in curves])
    return np.stack([pts.min(axis=0), pts.max(axis=0)])


def check_bounds(bbox: np.ndarray) -> np.ndarray:
    bbox = np.asarray(bbox, dtype=float).reshape(2, 3)
    if not np.all(np.isfinite(bbox)) or np.any(bbox[1] <= bbox[0]):
        raise DegenerateBounds(f"bounding box must have positive extent, got {bbox.tolist()}")
    return bbox


# --- curve JSON ----------------------------------------------------------------

def curves_to_dict(curves) -> dict:
    return {
        "curves": [
            {
                "id": int(c.id),
                "type": c.kind,
                "control_points": [[float(v) for v in p] for p in c.control_points],
                "opacity": float(c.opacity),
                "thickness": float(c.thickness),
            }
            for c in curves
        ]
    }


def curves_from_dict(doc: dict, n_samples: int = 12, mask_logit: float = 2.0) -> list[ParametricCurve]:
    if not isinstance(doc, dict) or not isinstance(doc.get("curves"), list):
        raise ValueError('curve document needs a top-level "curves" list')
    out = []
    for i, rec in enumerate(doc["curves"]):
        try:
            kind = rec["type"]
            pts = np.asarray(rec["control_points"], dtype=float)
            if kind not in _COUNT_BY_KIND:
                raise ValueError(f"unknown type {kind!r}")
            if pts.shape != (_COUNT_BY_KIND[kind], 3):
                raise ValueError(f"type {kind!r} needs {_COUNT_BY_KIND[kind]} control points of 3 coordinates")
            curve = ParametricCurve(
                pts, float(rec["opacity"]), float(rec["thickness"]),
                np.full(n_samples, mask_logit), int(rec["id"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"curves[{i}]: {exc}") from exc
        curve.check()
        out.append(curve)
    return out


def dumps_curves(curves) -> str:
    return json.dumps(curves_to_dict(curves), indent=1) + "\n"


def save_curves(path, curves) -> None:
    Path(path).write_text(dumps_curves(curves))


def load_curves(path, n_samples: int = 12) -> list[ParametricCurve]:
    text = Path(path).read_text()
    return curves_from_dict(json.loads(text), n_samples=n_samples)
