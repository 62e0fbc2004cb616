"""Training objectives and their analytic gradients.

Every term returns ``(value, gradient)``. :func:`scene_objective` composes them
with the renderer and the coupling adjoint into the full per-view objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .coupling import (
    CouplingConfig, CurveArrays, CurveGrads, GaussianGrads, backprop_arrays, couple_arrays, sigmoid,
)
from .errors import DimensionMismatch
from .render import Camera, render, render_backward

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    conn: float = 0.1
    smo: float = 0.01
    reg: float = 2.0
    mask: float = 0.05
    eta: float = 0.1
    tau_conn: float | None = None  # scene units; None -> 0.02 * bbox diagonal
    use_ssim: bool = False
    ssim_lambda: float = 0.2

    def __post_init__(self):
        for name in ("conn", "smo", "reg", "mask", "ssim_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")


@dataclass
class LossReport:
    total: float
    edge: float
    conn: float
    smo: float
    reg: float
    mask: float

    def weighted_total(self, w: LossWeights, mask_on: bool = True) -> float:
        return (self.edge + w.conn * self.conn + w.smo * self.smo + w.reg * self.reg
                + (w.mask * self.mask if mask_on else 0.0))


def edge_loss(rendered: np.ndarray, truth: np.ndarray, eta: float = 0.1):
    """Class-balanced squared error between a rendered and a ground-truth edge map.

    Edge pixels (truth > eta) are weighted by the non-edge fraction and vice
    versa. Falls back to plain MSE when either class is empty.
    """
    rendered = np.asarray(rendered, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if rendered.shape != truth.shape:
        raise DimensionMismatch(f"rendered {rendered.shape} vs truth {truth.shape}")
    diff = rendered - truth
    edge = truth > eta
    n_total = diff.size
    n_edge = int(edge.sum())
    n_bg = n_total - n_edge
    if n_edge == 0 or n_bg == 0:
        logger.debug("edge map has a single class; using mean squared error")
        return float(np.mean(diff**2)), 2.0 * diff / n_total
    weight = np.where(edge, n_bg / n_total, n_edge / n_total)
    return float(np.sum(weight * diff**2)), 2.0 * weight * diff


def endpoint_indices(is_cubic: np.ndarray) -> np.ndarray:
    """Index of the last control point per curve in the padded (C, 4, 3) layout."""
    return np.where(is_cubic, 3, 1)


def connection_loss(arrays: CurveArrays, tau: float):
    """Squared distance of endpoint pairs closer than ``tau``, over distinct curves.

    Returns the value and a gradient on the padded control points, shape (C, 4, 3).
    """
    c = len(arrays)
    grad = np.zeros_like(arrays.ctrl)
    if c < 2:
        return 0.0, grad
    rows = np.arange(c)
    last = endpoint_indices(arrays.is_cubic)
    ends = np.concatenate([arrays.ctrl[rows, 0], arrays.ctrl[rows, last]])   # (2C, 3)
    owner = np.concatenate([rows, rows])
    slot = np.concatenate([np.zeros(c, dtype=int), last])
    pairs = cKDTree(ends).query_pairs(tau, output_type="ndarray")
    if pairs.shape[0] == 0:
        return 0.0, grad
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    i, j = pairs[:, 0], pairs[:, 1]
    keep = owner[i] != owner[j]
    i, j = i[keep], j[keep]
    diff = ends[i] - ends[j]
    d2 = np.sum(diff**2, axis=1)
    active = d2 < tau * tau
    i, j, diff = i[active], j[active], diff[active]
    value = float(d2[active].sum())
    np.add.at(grad, (owner[i], slot[i]), 2.0 * diff)
    np.add.at(grad, (owner[j], slot[j]), -2.0 * diff)
    return value, grad


def smoothness_loss(axes: np.ndarray):
    """Sum of squared differences of sign-aligned principal axes of neighbouring samples.

    ``axes`` has shape (C, N, 3); returns the value and its gradient of the same shape.
    """
    a, b = axes[:, :-1], axes[:, 1:]
    sign = np.where(np.sum(a * b, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    diff = a - sign * b
    grad = np.zeros_like(axes)
    grad[:, :-1] += 2.0 * diff
    grad[:, 1:] -= 2.0 * sign * diff
    return float(np.sum(diff**2)), grad


def opacity_regularizer(opacity: np.ndarray):
    o = np.asarray(opacity, dtype=float)
    return float(np.sum(np.log1p(o**2 / 0.5))), 2.0 * o / (0.5 + o**2)


def mask_loss(mask_logits: np.ndarray):
    logits = np.asarray(mask_logits, dtype=float)
    if logits.size == 0:
        return 0.0, np.zeros_like(logits)
    m = sigmoid(logits)
    return float(m.mean()), m * (1.0 - m) / logits.size


def dssim_loss(rendered: np.ndarray, truth: np.ndarray, sigma: float = 1.5):
    """``1 - mean SSIM`` with an 11x11 Gaussian window and zero padding."""
    c1, c2 = 0.01**2, 0.03**2
    filt = lambda z: gaussian_filter(z, sigma, mode="constant", truncate=3.5)
    x, y = np.asarray(rendered, float), np.asarray(truth, float)
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx**2
    syy = filt(y * y) - my**2
    sxy = filt(x * y) - mx * my
    num1, num2 = 2 * mx * my + c1, 2 * sxy + c2
    den1, den2 = mx**2 + my**2 + c1, sxx + syy + c2
    ssim = num1 * num2 / (den1 * den2)
    p = ssim.size
    # partials of the SSIM map w.r.t. the local statistics
    d_mx = 2 * my * num2 / (den1 * den2) - ssim * 2 * mx / den1
    d_sxx = -ssim / den2
    d_sxy = 2 * num1 / (den1 * den2)
    # chain through sxx = E[x^2] - mx^2 and sxy = E[xy] - mx*my
    d_mx_total = d_mx - 2 * mx * d_sxx - my * d_sxy
    grad = -(filt(d_mx_total) + 2 * x * filt(d_sxx) + y * filt(d_sxy)) / p
    return float(1.0 - ssim.mean()), grad


def render_loss(rendered, truth, weights: LossWeights):
    edge, g = edge_loss(rendered, truth, weights.eta)
    if not weights.use_ssim:
        return edge, edge, g
    ds, g_ds = dssim_loss(rendered, truth)
    lam = weights.ssim_lambda
    return (1 - lam) * edge + lam * ds, edge, (1 - lam) * g + lam * g_ds


def total_loss(rendered, truth, arrays: CurveArrays, coupled, weights: LossWeights,
               tau_conn: float, mask_on: bool = True):
    """All loss terms for one view.

    Returns ``(report, grad_image, gaussian_grads, curve_grads)``; the image
    gradient still has to go through :func:`render_backward`, and the Gaussian
    gradient (principal axes) through the coupling adjoint.
    """
    c, n = arrays.mask_logits.shape
    render_term, edge, grad_image = render_loss(rendered, truth, weights)
    conn, g_conn = connection_loss(arrays, tau_conn)
    axes = coupled.principal_axes.reshape(c, n, 3)
    smo, g_axes = smoothness_loss(axes)
    reg, g_reg = opacity_regularizer(arrays.opacity)
    msk, g_msk = mask_loss(arrays.mask_logits)

    lam_mask = weights.mask if mask_on else 0.0
    total = render_term + weights.conn * conn + weights.smo * smo + weights.reg * reg + lam_mask * msk
    report = LossReport(total, edge, conn, smo, reg, msk)

    g_frame = np.zeros((c * n, 3, 3))
    g_frame[:, :, 0] = weights.smo * g_axes.reshape(-1, 3)
    gauss = GaussianGrads(frame=g_frame)
    direct = CurveGrads(
        ctrl=weights.conn * g_conn,
        thickness=np.zeros(c),
        opacity=weights.reg * g_reg,
        mask_logits=lam_mask * g_msk,
    )
    return report, grad_image, gauss, direct


def scene_objective(arrays: CurveArrays, cam: Camera, truth: np.ndarray, weights: LossWeights,
                    coupling: CouplingConfig, tau_conn: float, mask_on: bool = True, eps: float = 1e-12):
    """Full objective for one view and its gradient on every curve parameter."""
    coupled = couple_arrays(arrays, coupling, eps=eps)
    out = render(coupled, cam)
    report, grad_image, gauss, direct = total_loss(
        out.image, truth, arrays, coupled, weights, tau_conn, mask_on)
    gauss += render_backward(out, grad_image, len(coupled))
    grads = backprop_arrays(gauss, arrays, coupled)
    grads += direct
    return report, grads, out, coupled
