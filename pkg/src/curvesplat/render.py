"""Colorless Gaussian splatting of edge maps, forward and adjoint.

Each Gaussian is projected with the local affine (EWA) approximation and
point-sampled at pixel centers inside its 3-sigma ellipse. Since the edge map
carries a constant unit "color", front-to-back compositing collapses to
``I = 1 - prod_i (1 - alpha_i)``, which the forward pass accumulates in log
space; the backward pass uses ``dI/dalpha_i = prod_{j != i} (1 - alpha_j)``.

Pixel ``(x, y)`` has its center at ``(x + 0.5, y + 0.5)`` in the coordinates
where the principal point is ``(cx, cy)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from PIL import Image

from .coupling import CoupledGaussians, GaussianGrads, GaussianPrimitive
from .errors import NonFiniteInput, StaleState

Z_NEAR = 1e-3
LOW_PASS = 0.3
ALPHA_MAX = 0.99
DET_FLOOR = 1e-12
CUTOFF_SIGMA = 3.0


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray
    id: int = 0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=float).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"camera {self.id}: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"camera {self.id}: image size must be positive")
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError(f"camera {self.id}: rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {
            "id": int(self.id), "width": int(self.width), "height": int(self.height),
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "world_to_camera": [float(v) for v in self.world_to_camera.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        m = d["world_to_camera"]
        if len(m) != 16:
            raise ValueError(f"camera {d.get('id')}: world_to_camera needs 16 values")
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.array(m, dtype=float), int(d["id"]))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera transform for a camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
    eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = -rot @ eye
    return m


def save_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1) + "\n")


def load_cameras(path) -> list[Camera]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ValueError("cameras document must be a JSON list")
    return [Camera.from_dict(d) for d in doc]


# --- edge map I/O ----------------------------------------------------------------

def read_edge_map(path) -> np.ndarray:
    """8-bit grayscale PNG or PGM (P5) as floats ``v / 255``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_edge_map(path, image: np.ndarray) -> None:
    path = Path(path)
    data = to_uint8(image)
    if path.suffix.lower() == ".pgm":
        h, w = data.shape
        path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())
    else:
        Image.fromarray(data, mode="L").save(path, format="PNG")


# --- projection ------------------------------------------------------------------

@dataclass
class Projection:
    mean2d: np.ndarray   # (G, 2)
    cov2d: np.ndarray    # (G, 2, 2), low-pass included
    conic: np.ndarray    # (G, 3) entries (a, b, c) of the inverse covariance
    depth: np.ndarray    # (G,)
    valid: np.ndarray    # (G,) bool
    cam_means: np.ndarray
    jac: np.ndarray      # (G, 2, 3)
    sigma3d: np.ndarray  # (G, 3, 3)


def _project(means, frames, scales, cam: Camera) -> Projection:
    rot, trans = cam.rotation, cam.translation
    mu_c = means @ rot.T + trans
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    valid = z > Z_NEAR
    zs = np.where(valid, z, 1.0)
    inv_z = 1.0 / zs
    mean2d = np.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], axis=1)

    g = means.shape[0]
    jac = np.zeros((g, 2, 3))
    jac[:, 0, 0] = cam.fx * inv_z
    jac[:, 0, 2] = -cam.fx * x * inv_z**2
    jac[:, 1, 1] = cam.fy * inv_z
    jac[:, 1, 2] = -cam.fy * y * inv_z**2

    sigma = np.einsum("gij,gj,gkj->gik", frames, scales**2, frames)
    m = jac @ rot
    cov = m @ sigma @ np.swapaxes(m, 1, 2)
    cov[:, 0, 0] += LOW_PASS
    cov[:, 1, 1] += LOW_PASS
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    valid &= det > DET_FLOOR
    safe_det = np.where(valid, det, 1.0)
    conic = np.stack([cov[:, 1, 1] / safe_det, -cov[:, 0, 1] / safe_det, cov[:, 0, 0] / safe_det], axis=1)
    return Projection(mean2d, cov, conic, z, valid, mu_c, jac, sigma)


def project_gaussian(g: GaussianPrimitive, cam: Camera):
    """Screen-space footprint ``(mean2d, cov2d, depth)``, or None when culled."""
    p = _project(np.asarray(g.mean, float)[None], np.asarray(g.frame, float)[None],
                 np.asarray(g.scales, float)[None], cam)
    if not p.valid[0]:
        return None
    return p.mean2d[0], p.cov2d[0], float(p.depth[0])


# --- rasterization kernels ----------------------------------------------------------

@numba.njit(cache=True)
def _pixel_range(center, radius, size):
    lo = int(np.ceil(center - radius - 0.5))
    hi = int(np.floor(center + radius - 0.5))
    if lo < 0:
        lo = 0
    if hi > size - 1:
        hi = size - 1
    return lo, hi


@numba.njit(cache=True)
def _raster_forward(mean2d, conic, cov, amp, valid, height, width, alpha_max, cutoff):
    log_t = np.zeros((height, width))
    cut2 = cutoff * cutoff
    for g in range(mean2d.shape[0]):
        if not valid[g] or amp[g] <= 0.0:
            continue
        mx, my = mean2d[g, 0], mean2d[g, 1]
        a, b, c = conic[g, 0], conic[g, 1], conic[g, 2]
        x0, x1 = _pixel_range(mx, cutoff * np.sqrt(cov[g, 0, 0]), width)
        y0, y1 = _pixel_range(my, cutoff * np.sqrt(cov[g, 1, 1]), height)
        for y in range(y0, y1 + 1):
            dy = y + 0.5 - my
            for x in range(x0, x1 + 1):
                dx = x + 0.5 - mx
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > cut2:
                    continue
                alpha = amp[g] * np.exp(-0.5 * q)
                if alpha > alpha_max:
                    alpha = alpha_max
                log_t[y, x] += np.log1p(-alpha)
    return log_t


@numba.njit(cache=True)
def _raster_backward(mean2d, conic, cov, amp, valid, trans, grad_image, alpha_max, cutoff):
    g_count = mean2d.shape[0]
    height, width = grad_image.shape
    g_amp = np.zeros(g_count)
    g_mean = np.zeros((g_count, 2))
    g_conic = np.zeros((g_count, 3))
    cut2 = cutoff * cutoff
    for g in range(g_count):
        if not valid[g] or amp[g] <= 0.0:
            continue
        mx, my = mean2d[g, 0], mean2d[g, 1]
        a, b, c = conic[g, 0], conic[g, 1], conic[g, 2]
        x0, x1 = _pixel_range(mx, cutoff * np.sqrt(cov[g, 0, 0]), width)
        y0, y1 = _pixel_range(my, cutoff * np.sqrt(cov[g, 1, 1]), height)
        ga = 0.0
        gmx = 0.0
        gmy = 0.0
        gca = 0.0
        gcb = 0.0
        gcc = 0.0
        for y in range(y0, y1 + 1):
            dy = y + 0.5 - my
            for x in range(x0, x1 + 1):
                gi = grad_image[y, x]
                if gi == 0.0:
                    continue
                dx = x + 0.5 - mx
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > cut2:
                    continue
                e = np.exp(-0.5 * q)
                alpha = amp[g] * e
                if alpha > alpha_max:
                    continue
                g_alpha = gi * trans[y, x] / (1.0 - alpha)
                ga += g_alpha * e
                gq = -0.5 * g_alpha * alpha
                gca += gq * dx * dx
                gcb += gq * 2.0 * dx * dy
                gcc += gq * dy * dy
                gmx -= gq * (2.0 * a * dx + 2.0 * b * dy)
                gmy -= gq * (2.0 * b * dx + 2.0 * c * dy)
        g_amp[g] = ga
        g_mean[g, 0] = gmx
        g_mean[g, 1] = gmy
        g_conic[g, 0] = gca
        g_conic[g, 1] = gcb
        g_conic[g, 2] = gcc
    return g_amp, g_mean, g_conic


# --- public render API --------------------------------------------------------------

@dataclass
class RenderOutput:
    image: np.ndarray          # (H, W) in [0, 1]
    projection: Projection
    log_transmittance: np.ndarray
    frames: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    mask: np.ndarray
    camera: Camera

    @property
    def n_gaussians(self) -> int:
        return self.opacity.shape[0]


def _as_arrays(gaussians):
    if isinstance(gaussians, CoupledGaussians):
        return gaussians.means, gaussians.frames, gaussians.scales, gaussians.opacity, gaussians.mask
    gaussians = list(gaussians)
    if not gaussians:
        return np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0)
    return (
        np.array([g.mean for g in gaussians], dtype=float),
        np.array([g.frame for g in gaussians], dtype=float),
        np.array([g.scales for g in gaussians], dtype=float),
        np.array([g.opacity for g in gaussians], dtype=float),
        np.array([g.mask for g in gaussians], dtype=float),
    )


def render(gaussians, cam: Camera) -> RenderOutput:
    """Edge image of the Gaussians seen from ``cam``.

    ``gaussians`` is either a :class:`CoupledGaussians` batch or a sequence of
    :class:`GaussianPrimitive`.
    """
    means, frames, scales, opacity, mask = _as_arrays(gaussians)
    for arr in (means, frames, scales, opacity, mask):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput("Gaussian attributes contain NaN or Inf")
    proj = _project(means, frames, scales, cam)
    amp = np.ascontiguousarray(opacity * mask)
    log_t = _raster_forward(proj.mean2d, proj.conic, proj.cov2d, amp, proj.valid,
                            cam.height, cam.width, ALPHA_MAX, CUTOFF_SIGMA)
    image = -np.expm1(log_t)
    return RenderOutput(image, proj, log_t, frames, scales, opacity, mask, cam)


def render_backward(out: RenderOutput, grad_image: np.ndarray, n_gaussians: int | None = None) -> GaussianGrads:
    """Adjoint of :func:`render`: pixel gradients to per-Gaussian attribute gradients."""
    if n_gaussians is not None and n_gaussians != out.n_gaussians:
        raise StaleState(f"forward pass saw {out.n_gaussians} Gaussians, got {n_gaussians}")
    grad_image = np.ascontiguousarray(grad_image, dtype=float)
    if grad_image.shape != out.image.shape:
        raise StaleState(f"gradient image {grad_image.shape} does not match render {out.image.shape}")
    proj = out.projection
    amp = np.ascontiguousarray(out.opacity * out.mask)
    trans = np.exp(out.log_transmittance)
    g_amp, g_mean2d, g_conic = _raster_backward(
        proj.mean2d, proj.conic, proj.cov2d, amp, proj.valid, trans, grad_image, ALPHA_MAX, CUTOFF_SIGMA)
    return _backward_projection(out, g_amp, g_mean2d, g_conic)


def _backward_projection(out: RenderOutput, g_amp, g_mean2d, g_conic) -> GaussianGrads:
    proj, cam = out.projection, out.camera
    rot = cam.rotation
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    conic_m = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    g_q = np.stack([
        np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
        np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1),
    ], -2)
    g_cov = -conic_m @ g_q @ conic_m
    m = proj.jac @ rot
    g_sigma = np.swapaxes(m, 1, 2) @ g_cov @ m
    g_m = 2.0 * g_cov @ m @ proj.sigma3d
    g_jac = g_m @ rot.T

    x, y = proj.cam_means[:, 0], proj.cam_means[:, 1]
    z = np.where(proj.valid, proj.cam_means[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    g_muc = np.einsum("gij,gi->gj", proj.jac, g_mean2d)
    g_muc[:, 0] += g_jac[:, 0, 2] * (-fx / z**2)
    g_muc[:, 1] += g_jac[:, 1, 2] * (-fy / z**2)
    g_muc[:, 2] += (
        g_jac[:, 0, 0] * (-fx / z**2) + g_jac[:, 0, 2] * (2 * fx * x / z**3)
        + g_jac[:, 1, 1] * (-fy / z**2) + g_jac[:, 1, 2] * (2 * fy * y / z**3)
    )
    invalid = ~proj.valid
    g_muc[invalid] = 0.0
    g_sigma[invalid] = 0.0
    g_mean = g_muc @ rot

    s2 = out.scales**2
    g_frame = 2.0 * g_sigma @ out.frames * s2[:, None, :]
    g_scales = 2.0 * out.scales * np.einsum("gik,gij,gjk->gk", out.frames, g_sigma, out.frames)
    return GaussianGrads(
        mean=g_mean, frame=g_frame, scales=g_scales,
        opacity=g_amp * out.mask, mask=g_amp * out.opacity,
    )
