"""Curve-to-Gaussian coupling and its adjoint.

Every curve emits ``N`` rod-shaped Gaussians at the midpoint parameters
``t_i = (i + 0.5) / N``. Position, frame and scales are analytic functions of
the control points, so gradients on the Gaussians flow straight back to the
curve. The batched functions work on all curves of a scene at once; lines are
padded to four control points with zero weight on the unused two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curves import ParametricCurve, bernstein, bernstein_derivative
from .errors import DegenerateCurve, ShapeMismatch

Z_AXIS = np.array([0.0, 0.0, 1.0])
Y_AXIS = np.array([0.0, 1.0, 0.0])
FALLBACK_COS = 0.999


@dataclass(frozen=True)
class CouplingConfig:
    n_samples: int = 12
    overlap: float = 1.0  # multiplier on the principal scale, kept for ablations

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.overlap <= 0:
            raise ValueError("overlap must be positive")


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    frame: np.ndarray
    scales: np.ndarray
    opacity: float
    mask: float
    parent_curve: int
    sample_index: int


def sample_parameters(n: int | CouplingConfig) -> np.ndarray:
    if isinstance(n, CouplingConfig):
        n = n.n_samples
    return (np.arange(n) + 0.5) / n


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def build_frame(tangent: np.ndarray) -> np.ndarray:
    """Orthonormal frame with columns (v0, v1, v2) and v0 along ``tangent``."""
    frames, _ = _frames(np.asarray(tangent, dtype=float)[None])
    return frames[0]


def _frames(v0: np.ndarray):
    """Vectorized Gram-Schmidt against a fixed reference. Returns frames and cache."""
    use_y = np.abs(v0[:, 2]) > FALLBACK_COS
    ref = np.where(use_y[:, None], Y_AXIS, Z_AXIS)
    w = ref - np.sum(ref * v0, axis=1, keepdims=True) * v0
    w_norm = np.linalg.norm(w, axis=1, keepdims=True)
    v1 = w / w_norm
    v2 = np.cross(v0, v1)
    return np.stack([v0, v1, v2], axis=-1), (ref, w_norm)


# --- batched coupling ---------------------------------------------------------

@dataclass
class CurveArrays:
    """Struct-of-arrays view of a list of curves, padded to 4 control points."""

    ctrl: np.ndarray        # (C, 4, 3)
    is_cubic: np.ndarray    # (C,) bool
    opacity: np.ndarray     # (C,)
    thickness: np.ndarray   # (C,)
    mask_logits: np.ndarray  # (C, N)
    ids: np.ndarray         # (C,) int

    @classmethod
    def from_curves(cls, curves, n_samples: int) -> "CurveArrays":
        c = len(curves)
        ctrl = np.zeros((c, 4, 3))
        is_cubic = np.zeros(c, dtype=bool)
        for j, cv in enumerate(curves):
            k = cv.control_points.shape[0]
            ctrl[j, :k] = cv.control_points
            is_cubic[j] = k == 4
        masks = np.array([cv.mask_logits for cv in curves], dtype=float).reshape(c, n_samples)
        return cls(
            ctrl, is_cubic,
            np.array([cv.opacity for cv in curves], dtype=float),
            np.array([cv.thickness for cv in curves], dtype=float),
            masks,
            np.array([cv.id for cv in curves], dtype=np.int64),
        )

    def __len__(self):
        return self.ctrl.shape[0]

    def control_points(self, j: int) -> np.ndarray:
        return self.ctrl[j] if self.is_cubic[j] else self.ctrl[j, :2]

    def to_curves(self) -> list[ParametricCurve]:
        return [
            ParametricCurve(
                self.control_points(j).copy(), float(self.opacity[j]), float(self.thickness[j]),
                self.mask_logits[j].copy(), int(self.ids[j]),
            )
            for j in range(len(self))
        ]


def basis_weights(is_cubic: np.ndarray, t: np.ndarray):
    """Per-curve position and derivative weights over 4 padded controls, (C, N, 4)."""
    b3, d3 = bernstein(t, 3), bernstein_derivative(t, 3)
    b1 = np.zeros_like(b3)
    d1 = np.zeros_like(d3)
    b1[:, :2] = bernstein(t, 1)
    d1[:, :2] = bernstein_derivative(t, 1)
    sel = is_cubic[:, None, None]
    return np.where(sel, b3, b1), np.where(sel, d3, d1)


@dataclass
class CoupledGaussians:
    """All Gaussians of a scene, curve-major: Gaussian ``g = j * N + i``."""

    means: np.ndarray     # (G, 3)
    frames: np.ndarray    # (G, 3, 3), columns v0, v1, v2
    scales: np.ndarray    # (G, 3)
    opacity: np.ndarray   # (G,)
    mask: np.ndarray      # (G,)
    curve_index: np.ndarray  # (G,) row in the CurveArrays
    sample_index: np.ndarray  # (G,)
    degenerate: np.ndarray   # (C,) bool, curves with a vanishing tangent somewhere
    cache: dict

    def __len__(self):
        return self.means.shape[0]

    @property
    def alpha_scale(self) -> np.ndarray:
        return self.opacity * self.mask

    @property
    def principal_axes(self) -> np.ndarray:
        return self.frames[:, :, 0]


def couple_arrays(arrays: CurveArrays, config: CouplingConfig, eps: float = 1e-12,
                  strict: bool = False) -> CoupledGaussians:
    n = config.n_samples
    c = len(arrays)
    t = sample_parameters(n)
    w_pos, w_der = basis_weights(arrays.is_cubic, t)
    pts = np.einsum("cnk,ckd->cnd", w_pos, arrays.ctrl)          # (C, N, 3)
    tau = np.einsum("cnk,ckd->cnd", w_der, arrays.ctrl)
    tau_norm = np.linalg.norm(tau, axis=-1, keepdims=True)
    bad = tau_norm[..., 0] < eps
    degenerate = bad.any(axis=1)
    if strict and degenerate.any():
        raise DegenerateCurve(f"curves {arrays.ids[degenerate].tolist()} have a vanishing tangent")
    safe_norm = np.where(bad[..., None], 1.0, tau_norm)
    v0 = np.where(bad[..., None], np.array([1.0, 0.0, 0.0]), tau / safe_norm)

    frames, (ref, w_norm) = _frames(v0.reshape(-1, 3))

    # segment i uses p(t_{i+1}) - p(t_i); the last sample reuses the previous segment
    if n >= 2:
        seg_lo = np.minimum(np.arange(n), n - 2)
        delta = pts[:, seg_lo + 1] - pts[:, seg_lo]
    else:
        seg_lo = np.zeros(1, dtype=int)
        delta = np.zeros_like(pts)
    delta_norm = np.linalg.norm(delta, axis=-1)

    scales = np.empty((c, n, 3))
    scales[..., 0] = config.overlap * delta_norm
    scales[..., 1] = arrays.thickness[:, None]
    scales[..., 2] = arrays.thickness[:, None]

    mask = sigmoid(arrays.mask_logits)
    opacity = np.repeat(arrays.opacity, n)
    return CoupledGaussians(
        means=pts.reshape(-1, 3),
        frames=frames,
        scales=scales.reshape(-1, 3),
        opacity=opacity,
        mask=mask.reshape(-1),
        curve_index=np.repeat(np.arange(c), n),
        sample_index=np.tile(np.arange(n), c),
        degenerate=degenerate,
        cache=dict(
            w_pos=w_pos, w_der=w_der, tau_norm=safe_norm, bad=bad, ref=ref, w_norm=w_norm,
            seg_lo=seg_lo, delta=delta, delta_norm=delta_norm, n=n, overlap=config.overlap,
        ),
    )


@dataclass
class GaussianGrads:
    """Upstream gradients on the coupled Gaussian attributes (any may be None)."""

    mean: np.ndarray | None = None     # (G, 3)
    frame: np.ndarray | None = None    # (G, 3, 3)
    scales: np.ndarray | None = None   # (G, 3)
    opacity: np.ndarray | None = None  # (G,)
    mask: np.ndarray | None = None     # (G,)

    def __iadd__(self, other: "GaussianGrads"):
        for name in ("mean", "frame", "scales", "opacity", "mask"):
            a, b = getattr(self, name), getattr(other, name)
            if b is None:
                continue
            setattr(self, name, b.copy() if a is None else a + b)
        return self


@dataclass
class CurveGrads:
    ctrl: np.ndarray         # (C, 4, 3)
    thickness: np.ndarray    # (C,)
    opacity: np.ndarray      # (C,)
    mask_logits: np.ndarray  # (C, N)

    @classmethod
    def zeros(cls, c: int, n: int) -> "CurveGrads":
        return cls(np.zeros((c, 4, 3)), np.zeros(c), np.zeros(c), np.zeros((c, n)))

    def __iadd__(self, other: "CurveGrads"):
        self.ctrl += other.ctrl
        self.thickness += other.thickness
        self.opacity += other.opacity
        self.mask_logits += other.mask_logits
        return self


def backprop_arrays(grads: GaussianGrads, arrays: CurveArrays, coupled: CoupledGaussians) -> CurveGrads:
    """Chain rule from Gaussian attributes back to the curve parameters."""
    cache = coupled.cache
    n = cache["n"]
    c = len(arrays)
    g_count = c * n
    for name in ("mean", "frame", "scales", "opacity", "mask"):
        arr = getattr(grads, name)
        if arr is not None and arr.shape[0] != g_count:
            raise ShapeMismatch(f"{name} gradient has {arr.shape[0]} rows, expected {g_count}")

    out = CurveGrads.zeros(c, n)
    g_pts = np.zeros((c, n, 3))
    g_tau = np.zeros((c, n, 3))

    if grads.mean is not None:
        g_pts += grads.mean.reshape(c, n, 3)

    if grads.scales is not None:
        gs = grads.scales.reshape(c, n, 3)
        out.thickness += gs[..., 1].sum(axis=1) + gs[..., 2].sum(axis=1)
        if n >= 2:
            dn = cache["delta_norm"]
            unit = np.divide(cache["delta"], dn[..., None], out=np.zeros_like(cache["delta"]),
                             where=dn[..., None] > 0)
            g_delta = cache["overlap"] * gs[..., 0][..., None] * unit
            seg_lo = cache["seg_lo"]
            np.add.at(g_pts, (slice(None), seg_lo + 1), g_delta)
            np.add.at(g_pts, (slice(None), seg_lo), -g_delta)

    if grads.frame is not None:
        frames = coupled.frames
        v0, v1 = frames[:, :, 0], frames[:, :, 1]
        gf = grads.frame
        g_v0 = gf[:, :, 0].copy()
        g_v1 = gf[:, :, 1].copy()
        g_v2 = gf[:, :, 2]
        # v2 = v0 x v1
        g_v0 += np.cross(v1, g_v2)
        g_v1 += np.cross(g_v2, v0)
        # v1 = w / |w|,  w = r - (r . v0) v0
        ref, w_norm = cache["ref"], cache["w_norm"]
        g_w = (g_v1 - np.sum(g_v1 * v1, axis=1, keepdims=True) * v1) / w_norm
        g_v0 += -np.sum(g_w * v0, axis=1, keepdims=True) * ref - np.sum(ref * v0, axis=1, keepdims=True) * g_w
        # v0 = tau / |tau|
        g_t = (g_v0 - np.sum(g_v0 * v0, axis=1, keepdims=True) * v0) / cache["tau_norm"].reshape(-1, 1)
        g_t = np.where(cache["bad"].reshape(-1, 1), 0.0, g_t)
        g_tau += g_t.reshape(c, n, 3)

    out.ctrl += np.einsum("cnk,cnd->ckd", cache["w_pos"], g_pts)
    out.ctrl += np.einsum("cnk,cnd->ckd", cache["w_der"], g_tau)

    if grads.opacity is not None:
        out.opacity += grads.opacity.reshape(c, n).sum(axis=1)
    if grads.mask is not None:
        m = coupled.mask.reshape(c, n)
        out.mask_logits += grads.mask.reshape(c, n) * m * (1.0 - m)
    return out


# --- per-curve API -------------------------------------------------------------

def couple(curve: ParametricCurve, config: CouplingConfig = CouplingConfig(),
           eps: float = 1e-12) -> list[GaussianPrimitive]:
    """The ``N`` Gaussians derived from one curve."""
    arrays = CurveArrays.from_curves([curve], config.n_samples)
    cg = couple_arrays(arrays, config, eps=eps, strict=True)
    return [
        GaussianPrimitive(cg.means[i], cg.frames[i], cg.scales[i], float(cg.opacity[i]),
                          float(cg.mask[i]), curve.id, i)
        for i in range(config.n_samples)
    ]


def backprop_coupling(grads: GaussianGrads, curve: ParametricCurve,
                      config: CouplingConfig = CouplingConfig()):
    """Gradients of (control points, thickness, opacity, mask logits) for one curve."""
    arrays = CurveArrays.from_curves([curve], config.n_samples)
    cg = couple_arrays(arrays, config, strict=True)
    out = backprop_arrays(grads, arrays, cg)
    k = curve.control_points.shape[0]
    return out.ctrl[0, :k], float(out.thickness[0]), float(out.opacity[0]), out.mask_logits[0]


def dump_gaussians(path, coupled: CoupledGaussians) -> None:
    """Debug point list: mean, principal axis, scales, opacity*mask per line."""
    rows = np.concatenate([
        coupled.means, coupled.principal_axes, coupled.scales, coupled.alpha_scale[:, None],
    ], axis=1)
    np.savetxt(path, rows, fmt="%.8g", header="mx my mz v0x v0y v0z s0 s1 s2 alpha")
