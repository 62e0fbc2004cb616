"""Synthetic wireframe scenes and a reference line rasterizer.

The rasterizer here deliberately shares nothing with :mod:`curvesplat.render`
except the :class:`Camera` type: it projects dense polyline samples and draws
them as hard-edged strokes, anti-aliased by supersampling. Scenes are written
to and read from the dataset layout consumed by training::

    <dir>/cameras.json
    <dir>/edges/<view_id>.png     (or .pgm)
    <dir>/gt_curves.json          (optional for training)
    <dir>/scene.json              (optional: name and scene bounds)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .curves import CurveSet, ParametricCurve, bbox_of_curves, evaluate, fit_cubic, load_curves, save_curves
from .errors import DatasetError
from .render import Camera, load_cameras, look_at, read_edge_map, save_cameras, write_edge_map

KINDS = ("cube", "circle", "helix", "mixed")
GT_THICKNESS = 0.005
CIRCLE_HANDLE = 4.0 / 3.0 * math.tan(math.pi / 8.0)


@dataclass
class SyntheticScene:
    name: str
    gt_curves: CurveSet
    cameras: list[Camera]
    edge_maps: list[np.ndarray]
    bounds: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))


# --- geometry ---------------------------------------------------------------------

def _line(p, q, cid):
    return ParametricCurve(np.array([p, q], dtype=float), 1.0, GT_THICKNESS, np.zeros(12), cid)


def _cube_curves(side=1.0, start_id=0):
    h = side / 2.0
    corners = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    edges = []
    for i in range(8):
        for j in range(i + 1, 8):
            if np.count_nonzero(corners[i] != corners[j]) == 1:
                edges.append((i, j))
    return [_line(corners[i], corners[j], start_id + k) for k, (i, j) in enumerate(edges)]


def _rotation(ax: float, ay: float) -> np.ndarray:
    cx, sx, cy, sy = math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    return ry @ rx


def circle_cubics(radius=1.0, center=(0, 0, 0), rotation=None) -> list[np.ndarray]:
    """Four quarter-arc cubics with handle length (4/3) tan(pi/8) r."""
    rot = np.eye(3) if rotation is None else rotation
    center = np.asarray(center, dtype=float)
    out = []
    for q in range(4):
        a0, a1 = q * math.pi / 2, (q + 1) * math.pi / 2
        p0 = np.array([math.cos(a0), math.sin(a0), 0.0])
        p3 = np.array([math.cos(a1), math.sin(a1), 0.0])
        t0 = np.array([-math.sin(a0), math.cos(a0), 0.0])
        t1 = np.array([-math.sin(a1), math.cos(a1), 0.0])
        ctrl = np.stack([p0, p0 + CIRCLE_HANDLE * t0, p3 - CIRCLE_HANDLE * t1, p3]) * radius
        out.append(ctrl @ rot.T + center)
    return out


def _circle_curves(radius=0.5, start_id=0, center=(0, 0, 0)):
    ctrls = circle_cubics(radius, center, _rotation(math.radians(35), math.radians(20)))
    return [ParametricCurve(c, 1.0, GT_THICKNESS, np.zeros(12), start_id + k) for k, c in enumerate(ctrls)]


def _helix_curves(radius=0.4, height=1.0, turns=2.0, pieces=6, start_id=0):
    total = 2 * math.pi * turns
    out = []
    for k in range(pieces):
        phi = np.linspace(k * total / pieces, (k + 1) * total / pieces, 64)
        pts = np.stack([radius * np.cos(phi), radius * np.sin(phi), height * phi / total - height / 2], 1)
        ctrl, _ = fit_cubic(pts)
        out.append(ParametricCurve(ctrl, 1.0, GT_THICKNESS, np.zeros(12), start_id + k))
    # snap shared junctions so the chain is exactly connected
    for a, b in zip(out[:-1], out[1:]):
        b.control_points[0] = a.control_points[-1]
    return out


def gt_curves_for(kind: str) -> list[ParametricCurve]:
    if kind == "cube":
        return _cube_curves()
    if kind == "circle":
        return _circle_curves()
    if kind == "helix":
        return _helix_curves()
    if kind == "mixed":
        curves = _cube_curves()
        curves += _circle_curves(radius=0.3, start_id=len(curves))
        return curves + _helix_curves(start_id=len(curves))
    raise ValueError(f"unknown scene kind {kind!r}; choose from {', '.join(KINDS)}")


# --- cameras ----------------------------------------------------------------------

def fibonacci_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = i * math.pi * (3.0 - math.sqrt(5.0)) + rng.uniform(0, 2 * math.pi)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def orbit_cameras(center, radius_obj: float, n_views: int, size: int, rng, distance_factor=3.0):
    """Cameras on a sphere looking at ``center``, framed so the object's bounding sphere fits."""
    dist = distance_factor * radius_obj
    half = math.asin(1.0 / distance_factor)
    f = 0.95 * (size / 2.0) / math.tan(half)
    cams = []
    for k, d in enumerate(fibonacci_sphere(n_views, rng)):
        eye = np.asarray(center) + dist * d
        cams.append(Camera(f, f, size / 2.0, size / 2.0, size, size, look_at(eye, center), k))
    return cams


# --- reference rasterizer ------------------------------------------------------------

def _to_pixels(points: np.ndarray, cam: Camera):
    pc = points @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    front = z > 1e-3
    zs = np.where(front, z, 1.0)
    uv = np.stack([cam.fx * pc[:, 0] / zs + cam.cx, cam.fy * pc[:, 1] / zs + cam.cy], axis=1)
    return uv, front


@numba.njit(cache=True)
def _stroke(canvas, ax, ay, bx, by, half_width, ss):
    """Set every subpixel whose center lies within ``half_width`` (pixels) of segment ab."""
    hs, ws = canvas.shape
    x_lo = max(int(math.floor((min(ax, bx) - half_width) * ss - 0.5)), 0)
    x_hi = min(int(math.ceil((max(ax, bx) + half_width) * ss - 0.5)), ws - 1)
    y_lo = max(int(math.floor((min(ay, by) - half_width) * ss - 0.5)), 0)
    y_hi = min(int(math.ceil((max(ay, by) + half_width) * ss - 0.5)), hs - 1)
    dx, dy = bx - ax, by - ay
    ll = dx * dx + dy * dy
    r2 = half_width * half_width
    for sy in range(y_lo, y_hi + 1):
        py = (sy + 0.5) / ss
        for sx in range(x_lo, x_hi + 1):
            px = (sx + 0.5) / ss
            if ll > 0.0:
                u = ((px - ax) * dx + (py - ay) * dy) / ll
                u = min(max(u, 0.0), 1.0)
            else:
                u = 0.0
            ex = ax + u * dx - px
            ey = ay + u * dy - py
            if ex * ex + ey * ey <= r2:
                canvas[sy, sx] = 1.0


def oracle_render(curves, cam: Camera, line_width_px: float = 2.0, supersample: int = 2,
                  samples_per_curve: int = 256) -> np.ndarray:
    """Wireframe edge map of ``curves``; occlusion is ignored."""
    if line_width_px < 1:
        raise ValueError("line_width_px must be >= 1")
    ss = int(supersample)
    canvas = np.zeros((cam.height * ss, cam.width * ss))
    t = np.linspace(0.0, 1.0, samples_per_curve + 1)
    for c in curves:
        ctrl = c.control_points if isinstance(c, ParametricCurve) else np.asarray(c)
        uv, front = _to_pixels(evaluate(ctrl, t), cam)
        for k in range(len(t) - 1):
            if front[k] and front[k + 1]:
                _stroke(canvas, uv[k, 0], uv[k, 1], uv[k + 1, 0], uv[k + 1, 1], 0.5 * line_width_px, ss)
    return canvas.reshape(cam.height, ss, cam.width, ss).mean(axis=(1, 3))


# --- scenes -------------------------------------------------------------------------

def scene_bounds(curves, pad: float = 0.05) -> np.ndarray:
    box = bbox_of_curves(curves)
    margin = pad * float(np.linalg.norm(box[1] - box[0]))
    return np.stack([box[0] - margin, box[1] + margin])


def make_scene(kind: str = "cube", n_views: int = 20, image_size: int = 128, seed: int = 0,
               line_width_px: float = 2.0) -> SyntheticScene:
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    rng = np.random.default_rng(seed)
    curves = gt_curves_for(kind)
    box = bbox_of_curves(curves)
    center = box.mean(axis=0)
    pts = np.concatenate([evaluate(c.control_points, np.linspace(0, 1, 65)) for c in curves])
    radius = float(np.linalg.norm(pts - center, axis=1).max())
    cams = orbit_cameras(center, radius, n_views, image_size, rng)
    maps = [oracle_render(curves, cam, line_width_px) for cam in cams]
    gt = CurveSet(curves, box, seed)
    return SyntheticScene(kind, gt, cams, maps, scene_bounds(curves))


def write_dataset(scene: SyntheticScene, out_dir, image_format: str = "png") -> Path:
    out = Path(out_dir)
    (out / "edges").mkdir(parents=True, exist_ok=True)
    save_cameras(out / "cameras.json", scene.cameras)
    for cam, img in zip(scene.cameras, scene.edge_maps):
        write_edge_map(out / "edges" / f"{cam.id:03d}.{image_format}", img)
    save_curves(out / "gt_curves.json", scene.gt_curves.curves)
    meta = {"name": scene.name, "bounds": [[float(v) for v in row] for row in scene.bounds]}
    (out / "scene.json").write_text(json.dumps(meta, indent=1) + "\n")
    return out


@dataclass
class Dataset:
    cameras: list[Camera]
    edge_maps: list[np.ndarray]
    bounds: np.ndarray | None = None
    gt_curves: list[ParametricCurve] | None = None
    name: str = ""

    @property
    def views(self):
        return list(zip(self.cameras, self.edge_maps))


def _edge_path(edges_dir: Path, view_id: int) -> Path:
    for stem in (f"{view_id:03d}", str(view_id)):
        for ext in (".png", ".pgm"):
            p = edges_dir / (stem + ext)
            if p.exists():
                return p
    raise DatasetError(f"{edges_dir}: no edge map for view {view_id}")


def load_dataset(path) -> Dataset:
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise DatasetError(f"{cam_file}: missing cameras.json")
    try:
        cameras = load_cameras(cam_file)
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{cam_file}: {exc}") from exc
    maps = []
    for cam in cameras:
        img = read_edge_map(_edge_path(root / "edges", cam.id))
        if img.shape != cam.shape:
            raise DatasetError(f"view {cam.id}: edge map {img.shape} does not match camera {cam.shape}")
        maps.append(img)
    bounds, name = None, root.name
    meta = root / "scene.json"
    if meta.is_file():
        doc = json.loads(meta.read_text())
        name = doc.get("name", name)
        if "bounds" in doc:
            bounds = np.asarray(doc["bounds"], dtype=float)
    gt = load_curves(root / "gt_curves.json") if (root / "gt_curves.json").is_file() else None
    return Dataset(cameras, maps, bounds, gt, name)
