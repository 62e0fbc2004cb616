import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays as np_arrays

from curvesplat.coupling import (
    CouplingConfig, CurveArrays, GaussianGrads, backprop_arrays, backprop_coupling, build_frame,
    couple, couple_arrays, sample_parameters, sigmoid,
)
from curvesplat.curves import evaluate
from curvesplat.errors import DegenerateCurve, ShapeMismatch

from conftest import ARCH, make_curve

vectors = np_arrays(np.float64, 3, elements=st.floats(-5, 5)).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_sample_parameters():
    np.testing.assert_allclose(sample_parameters(4), [0.125, 0.375, 0.625, 0.875])
    assert sample_parameters(CouplingConfig()).shape == (12,)


def test_straight_line_gaussians():
    line = make_curve(np.array([[0.0, 0, 0], [1.2, 0, 0]]), thickness=0.05, logit=0.0, opacity=0.6)
    gs = couple(line)
    assert len(gs) == 12
    for i, g in enumerate(gs):
        np.testing.assert_allclose(g.mean, [(i + 0.5) / 12 * 1.2, 0, 0], atol=1e-15)
        np.testing.assert_allclose(g.frame[:, 0], [1, 0, 0])
        # spacing between samples is 0.1 everywhere
        np.testing.assert_allclose(g.scales, [0.1, 0.05, 0.05], atol=1e-14)
        assert g.mask == 0.5 and g.opacity == 0.6
        assert g.parent_curve == line.id and g.sample_index == i


def test_last_sample_reuses_previous_segment():
    cg = couple_arrays(CurveArrays.from_curves([make_curve(ARCH)], 12), CouplingConfig())
    pts = evaluate(ARCH, sample_parameters(12))
    np.testing.assert_allclose(cg.scales[-1, 0], np.linalg.norm(pts[-1] - pts[-2]))
    np.testing.assert_allclose(cg.scales[0, 0], np.linalg.norm(pts[1] - pts[0]))


def test_degenerate_curve_raises():
    with pytest.raises(DegenerateCurve):
        couple(make_curve(np.zeros((4, 3))))


def test_fallback_reference_near_z():
    f = build_frame(np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(f.T @ f, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(f[:, 0], [0, 0, 1])


@given(vectors)
def test_frame_is_right_handed_orthonormal(v):
    f = build_frame(v / np.linalg.norm(v))
    np.testing.assert_allclose(f.T @ f, np.eye(3), atol=1e-12)
    assert np.linalg.det(f) == pytest.approx(1.0, abs=1e-12)


def test_sigmoid_stable():
    assert sigmoid(1000.0) == 1.0 and sigmoid(-1000.0) == 0.0
    assert sigmoid(0.0) == 0.5


def _random_scene(rng, n_curves=4):
    curves = []
    for j in range(n_curves):
        k = 4 if j % 2 == 0 else 2
        curves.append(make_curve(rng.normal(size=(k, 3)), cid=j, opacity=rng.uniform(0.2, 0.9),
                                 thickness=rng.uniform(0.01, 0.1), logit=0.0))
        curves[-1].mask_logits = rng.normal(size=12)
    return curves


def _objective(arrays, cfg, weights):
    cg = couple_arrays(arrays, cfg)
    return sum(float(np.sum(w * getattr(cg, name))) for name, w in weights.items())


@pytest.mark.parametrize("seed", range(5))
def test_backprop_matches_finite_differences(seed):
    """Linear functional of every Gaussian attribute, differentiated both ways."""
    rng = np.random.default_rng(seed)
    cfg = CouplingConfig()
    arrays = CurveArrays.from_curves(_random_scene(rng), cfg.n_samples)
    cg = couple_arrays(arrays, cfg)
    weights = {
        "means": rng.normal(size=cg.means.shape), "frames": rng.normal(size=cg.frames.shape),
        "scales": rng.normal(size=cg.scales.shape), "opacity": rng.normal(size=cg.opacity.shape),
        "mask": rng.normal(size=cg.mask.shape),
    }
    grads = GaussianGrads(weights["means"], weights["frames"], weights["scales"],
                          weights["opacity"], weights["mask"])
    analytic = backprop_arrays(grads, arrays, cg)

    h = 1e-6
    for field, attr in (("ctrl", "ctrl"), ("thickness", "thickness"), ("opacity", "opacity"),
                        ("mask_logits", "mask_logits")):
        base = getattr(arrays, attr)
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            if field == "ctrl" and not arrays.is_cubic[idx[0]] and idx[1] >= 2:
                continue
            orig = base[idx]
            base[idx] = orig + h
            up = _objective(arrays, cfg, weights)
            base[idx] = orig - h
            down = _objective(arrays, cfg, weights)
            base[idx] = orig
            fd[idx] = (up - down) / (2 * h)
        np.testing.assert_allclose(getattr(analytic, field), fd, rtol=1e-5, atol=1e-6)


def test_padding_rows_receive_no_gradient(rng):
    cfg = CouplingConfig()
    arrays = CurveArrays.from_curves([make_curve(rng.normal(size=(2, 3)))], 12)
    cg = couple_arrays(arrays, cfg)
    out = backprop_arrays(GaussianGrads(mean=np.ones((12, 3)), frame=np.ones((12, 3, 3))), arrays, cg)
    np.testing.assert_array_equal(out.ctrl[0, 2:], 0.0)


def test_shape_mismatch():
    arrays = CurveArrays.from_curves([make_curve(ARCH)], 12)
    cg = couple_arrays(arrays, CouplingConfig())
    with pytest.raises(ShapeMismatch):
        backprop_arrays(GaussianGrads(mean=np.zeros((5, 3))), arrays, cg)


def test_per_curve_backprop_shapes():
    line = make_curve(np.array([[0.0, 0, 0], [1, 1, 0]]))
    g = GaussianGrads(mean=np.ones((12, 3)), scales=np.ones((12, 3)))
    ctrl, thick, opac, masks = backprop_coupling(g, line)
    assert ctrl.shape == (2, 3) and masks.shape == (12,)
    assert thick == pytest.approx(24.0) and opac == 0.0


def test_round_trip_arrays():
    curves = [make_curve(ARCH, cid=3), make_curve(ARCH[[0, 3]], cid=9)]
    back = CurveArrays.from_curves(curves, 12).to_curves()
    for a, b in zip(curves, back):
        np.testing.assert_array_equal(a.control_points, b.control_points)
        assert a.id == b.id
