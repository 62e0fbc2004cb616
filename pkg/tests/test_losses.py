import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays as np_arrays

from curvesplat.coupling import CouplingConfig, CurveArrays, couple_arrays
from curvesplat.curves import de_casteljau_split
from curvesplat.errors import DimensionMismatch
from curvesplat.losses import (
    LossWeights, connection_loss, dssim_loss, edge_loss, mask_loss, opacity_regularizer, scene_objective,
    smoothness_loss, total_loss,
)
from curvesplat.render import render

from conftest import ARCH, compare_gradients, kink_aware_fd, make_camera, make_curve

CFG = CouplingConfig()


def arrays_of(curves):
    return CurveArrays.from_curves(curves, CFG.n_samples)


class TestEdgeLoss:
    def test_identical(self):
        img = np.random.default_rng(0).uniform(size=(8, 8))
        img[0, 0] = 1.0
        value, grad = edge_loss(img, img)
        assert value == 0.0 and not grad.any()

    def test_four_pixel_example(self):
        value, grad = edge_loss(np.zeros((2, 2)), np.array([[1.0, 0], [0, 0]]))
        assert value == pytest.approx(0.75)
        np.testing.assert_allclose(grad, [[2 * 0.75 * -1, 0], [0, 0]])

    def test_degenerate_falls_back_to_mse(self):
        r = np.full((2, 2), 0.5)
        value, grad = edge_loss(r, np.zeros((2, 2)))
        assert value == pytest.approx(0.25)
        np.testing.assert_allclose(grad, 2 * 0.5 / 4)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            edge_loss(np.zeros((2, 2)), np.zeros((3, 2)))

    @given(np_arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.floats(0.01, 1.0))
    def test_classes_balanced(self, truth, e):
        edge = truth > 0.1
        m, n = int(edge.sum()), int((~edge).sum())
        if m == 0 or n == 0:
            return
        rendered = truth + math.sqrt(e)
        value, _ = edge_loss(rendered, truth)
        # each class contributes |M||N|/|E| * e
        assert value == pytest.approx(2 * m * n / 36 * e, rel=1e-9)

    @given(np_arrays(np.float64, (5, 5), elements=st.floats(0, 1)),
           np_arrays(np.float64, (5, 5), elements=st.floats(0, 1)))
    def test_nonnegative_and_gradient(self, rendered, truth):
        value, grad = edge_loss(rendered, truth)
        assert value >= 0.0
        # the loss is quadratic in rendered, so a central difference is exact up to rounding
        h = 1e-3
        for idx in [(0, 0), (2, 3), (4, 4)]:
            up, down = rendered.copy(), rendered.copy()
            up[idx] += h
            down[idx] -= h
            fd = (edge_loss(up, truth)[0] - edge_loss(down, truth)[0]) / (2 * h)
            assert fd == pytest.approx(grad[idx], abs=1e-9)


class TestConnectionLoss:
    def seg(self, a, b, cid):
        return make_curve(np.array([a, b], float), cid=cid)

    def test_shared_endpoint(self):
        value, grad = connection_loss(arrays_of([self.seg([0, 0, 0], [1, 0, 0], 0),
                                                 self.seg([1, 0, 0], [1, 1, 0], 1)]), 0.1)
        assert value == 0.0 and not grad.any()

    def test_half_radius(self):
        tau = 0.2
        a = self.seg([0, 0, 0], [1, 0, 0], 0)
        b = self.seg([1 + tau / 2, 0, 0], [3, 0, 0], 1)
        value, grad = connection_loss(arrays_of([a, b]), tau)
        assert value == pytest.approx(tau**2 / 4)
        np.testing.assert_allclose(grad[0, 1], [-tau, 0, 0])
        np.testing.assert_allclose(grad[1, 0], [tau, 0, 0])

    def test_outside_radius(self):
        tau = 0.2
        value, grad = connection_loss(arrays_of([self.seg([0, 0, 0], [1, 0, 0], 0),
                                                 self.seg([1 + 2 * tau, 0, 0], [3, 0, 0], 1)]), tau)
        assert value == 0.0 and not grad.any()

    def test_same_curve_pairs_ignored(self):
        value, _ = connection_loss(arrays_of([self.seg([0, 0, 0], [0.01, 0, 0], 0)]), 0.1)
        assert value == 0.0

    def test_brute_force(self, rng):
        tau = 0.3
        curves = [make_curve(rng.uniform(0, 1, (4 if j % 2 else 2, 3)), cid=j) for j in range(12)]
        value, grad = connection_loss(arrays_of(curves), tau)
        expected = 0.0
        for i, ci in enumerate(curves):
            for j in range(i + 1, len(curves)):
                for p in ci.endpoints:
                    for q in curves[j].endpoints:
                        d2 = float(np.sum((p - q) ** 2))
                        if d2 < tau**2:
                            expected += d2
        assert value == pytest.approx(expected, rel=1e-12)
        # finite differences on every control point away from the radius boundary
        arrays = arrays_of(curves)
        for idx in np.ndindex(arrays.ctrl.shape):
            if idx[1] in (1, 2) and arrays.is_cubic[idx[0]]:
                assert np.all(grad[idx] == 0.0)


class TestSmoothness:
    def axes_of(self, curves):
        c = couple_arrays(arrays_of(curves), CFG)
        return c.principal_axes.reshape(len(curves), CFG.n_samples, 3)

    def test_straight_line(self):
        value, _ = smoothness_loss(self.axes_of([make_curve([[0, 0, 0], [1, 2, 3]])]))
        assert value == 0.0

    @given(st.floats(0.0, math.pi))
    def test_two_axes(self, theta):
        axes = np.array([[[1.0, 0, 0], [math.cos(theta), math.sin(theta), 0]]])
        value, _ = smoothness_loss(axes)
        c = abs(math.cos(theta))
        assert value == pytest.approx(2 * (1 - c), abs=1e-12)

    def test_sign_invariance(self, rng):
        axes = rng.normal(size=(3, 12, 3))
        axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
        base, _ = smoothness_loss(axes)
        flipped = axes.copy()
        flipped[1, 4] *= -1
        flipped[2, 0] *= -1
        assert smoothness_loss(flipped)[0] == pytest.approx(base, abs=1e-12)

    def test_arch_split_lowers_loss(self):
        whole, _ = smoothness_loss(self.axes_of([make_curve(ARCH)]))
        a, b = de_casteljau_split(ARCH, 0.5)
        halves, _ = smoothness_loss(self.axes_of([make_curve(a), make_curve(b, cid=1)]))
        assert whole > 0.0 and halves < whole

    def test_gradient(self, rng):
        axes = rng.normal(size=(2, 6, 3))
        _, grad = smoothness_loss(axes)
        h = 1e-6
        for idx in np.ndindex(axes.shape):
            up, down = axes.copy(), axes.copy()
            up[idx] += h
            down[idx] -= h
            fd = (smoothness_loss(up)[0] - smoothness_loss(down)[0]) / (2 * h)
            assert fd == pytest.approx(grad[idx], rel=1e-6, abs=1e-8)


class TestOpacityAndMask:
    def test_regularizer_values(self):
        assert opacity_regularizer(np.array([0.0]))[0] == 0.0
        assert opacity_regularizer(np.array([1.0]))[0] == pytest.approx(math.log(3))
        assert opacity_regularizer(np.full(3, 0.5))[0] == pytest.approx(3 * math.log(1.5))

    @given(st.floats(0, 1))
    def test_regularizer_gradient(self, o):
        _, g = opacity_regularizer(np.array([o]))
        assert g[0] == pytest.approx(2 * o / (0.5 + o * o))

    def test_mask_values(self):
        assert mask_loss(np.full((2, 12), -800.0))[0] == 0.0
        assert mask_loss(np.zeros((3, 12)))[0] == 0.5
        assert mask_loss(np.array([[-2.0, 0.0, 2.0]]))[0] == pytest.approx(0.5, abs=1e-15)

    def test_mask_gradient(self, rng):
        x = rng.normal(size=(2, 5))
        _, g = mask_loss(x)
        h = 1e-6
        for idx in np.ndindex(x.shape):
            up, down = x.copy(), x.copy()
            up[idx] += h
            down[idx] -= h
            assert (mask_loss(up)[0] - mask_loss(down)[0]) / (2 * h) == pytest.approx(g[idx], rel=1e-6)


def test_dssim_gradient(rng):
    a, b = rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12))
    value, grad = dssim_loss(a, b)
    assert 0.0 <= value <= 2.0
    assert dssim_loss(b, b)[0] == pytest.approx(0.0, abs=1e-12)
    h = 1e-6
    for idx in [(0, 0), (5, 6), (11, 3)]:
        up, down = a.copy(), a.copy()
        up[idx] += h
        down[idx] -= h
        fd = (dssim_loss(up, b)[0] - dssim_loss(down, b)[0]) / (2 * h)
        assert fd == pytest.approx(grad[idx], rel=1e-5, abs=1e-9)


class TestTotal:
    def scene(self):
        return [make_curve([[-0.5, 0, 0], [0.5, 0, 0]], cid=0, opacity=0.7, logit=0.5)]

    def test_identical_with_edge_only(self):
        cam = make_camera()
        arrays = arrays_of(self.scene())
        coupled = couple_arrays(arrays, CFG)
        img = render(coupled, cam).image
        w = LossWeights(conn=0, smo=0, reg=0, mask=0)
        report, *_ = total_loss(img, img, arrays, coupled, w, 0.1)
        assert report.total == 0.0

    def test_single_line_terms(self):
        cam = make_camera()
        arrays = arrays_of(self.scene())
        coupled = couple_arrays(arrays, CFG)
        img = render(coupled, cam).image
        truth = np.zeros_like(img)
        truth[0, :] = 1.0
        w = LossWeights(conn=1, smo=1, reg=1, mask=1)
        report, *_ = total_loss(img, truth, arrays, coupled, w, 0.1)
        assert report.conn == 0.0 and report.smo == pytest.approx(0.0, abs=1e-20)
        assert report.total == pytest.approx(report.edge + report.reg + report.mask, abs=1e-10)
        assert report.weighted_total(w) == pytest.approx(report.total, abs=1e-10)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            LossWeights(conn=-1)
        with pytest.raises(ValueError):
            LossWeights(eta=1.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_scene_objective_gradients(self, seed):
        rng = np.random.default_rng(seed)
        cam = make_camera(32, eye=(0.4, -3.0, 0.7))
        curves = [make_curve(rng.uniform(-0.6, 0.6, (k, 3)), cid=j, opacity=rng.uniform(0.3, 0.8),
                             thickness=rng.uniform(0.02, 0.05)) for j, k in enumerate((4, 2, 4))]
        for c in curves:
            c.mask_logits = rng.normal(size=12)
        arrays = arrays_of(curves)
        truth = (rng.uniform(size=(32, 32)) > 0.8).astype(float)
        w = LossWeights(conn=0.1, smo=0.5, reg=0.3, mask=0.2)
        tau = 0.3

        def loss():
            return scene_objective(arrays, cam, truth, w, CFG, tau)[0].total

        report, grads, _, _ = scene_objective(arrays, cam, truth, w, CFG, tau)
        assert report.total == pytest.approx(report.weighted_total(w), abs=1e-10)
        ana, fd = [], []
        for field in ("ctrl", "thickness", "opacity", "mask_logits"):
            arr = getattr(arrays, field)
            for idx in np.ndindex(arr.shape):
                if field == "ctrl" and not arrays.is_cubic[idx[0]] and idx[1] >= 2:
                    continue
                fd.append(kink_aware_fd(loss, lambda: arr[idx], lambda v: arr.__setitem__(idx, v)))
                ana.append(getattr(grads, field)[idx])
        assert compare_gradients(ana, fd) <= 1e-3
