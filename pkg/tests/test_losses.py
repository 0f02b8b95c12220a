import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geosplat360._validation import DomainError
from geosplat360.camera import EquirectCamera
from geosplat360.gaussians import GaussianScene
from geosplat360.losses import (
    LossReport,
    LossWeights,
    append_report,
    depth_loss,
    dnormal_loss,
    evaluate,
    loss_gradients,
    rgb_loss,
    scale_loss,
    total_loss,
)
from geosplat360.panorama import PanoramaBuffer


def scene_with_scales(*scales):
    n = len(scales)
    return GaussianScene(np.zeros((n, 3)), np.array(scales, float), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full(n, 0.5), np.full((n, 3), 0.5))


def pixel(v):
    return np.array(v, float).reshape(1, 1, 3)


def test_scale_loss_examples():
    assert scale_loss(scene_with_scales((1, 2, 0))) == 0.0
    assert scale_loss(scene_with_scales((0.5, 1, 2))) == 0.5
    assert scale_loss(scene_with_scales((0.2, 1, 1), (0.4, 1, 1))) == pytest.approx(0.3, abs=1e-15)
    _, grad = scale_loss(scene_with_scales((0.5, 1, 2)), return_grad=True)
    np.testing.assert_array_equal(grad, [[1.0, 0, 0]])


def test_scale_loss_empty_rejected():
    with pytest.raises(DomainError):
        scale_loss(scene_with_scales())


def test_dnormal_examples():
    assert dnormal_loss(pixel([0, 0, 1]), pixel([0, 0, -1])) == 4.0
    assert dnormal_loss(pixel([1, 0, 0]), pixel([0, 0, 1])) == 3.0
    n = np.random.default_rng(0).normal(size=(4, 5, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    assert dnormal_loss(n, n) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dnormal_bounded_for_unit_inputs(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3, 3))
    b = rng.normal(size=(3, 3, 3))
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b /= np.linalg.norm(b, axis=-1, keepdims=True)
    mask = rng.uniform(size=(3, 3)) < 0.7
    mask[0, 0] = True
    value = dnormal_loss(a, b, mask)
    assert 0.0 <= value <= 2 * np.sqrt(3) + 2
    per = np.abs(a - b).sum(-1) + 1 - np.sum(a * b, -1)
    assert value == pytest.approx(per[mask].mean(), abs=1e-12)


def test_dnormal_needs_valid_pixels():
    with pytest.raises(DomainError):
        dnormal_loss(pixel([0, 0, 1]), pixel([0, 0, 1]), np.zeros((1, 1), bool))


def test_depth_loss_examples(rng):
    d = rng.uniform(1, 5, (6, 7))
    assert depth_loss(d, d) == 0.0
    assert depth_loss(d + 0.1, d) == pytest.approx(0.1, abs=1e-12)
    e = rng.uniform(1, 5, (6, 7))
    assert depth_loss(d, e) == pytest.approx(sum(abs(x - y) for x, y in zip(d.ravel(), e.ravel())) / 42,
                                             abs=1e-12)
    with pytest.raises(DomainError):
        depth_loss(d, e, np.zeros((6, 7), bool))


def test_rgb_loss_examples(rng):
    assert rgb_loss(np.zeros((1, 1, 3)), np.ones((1, 1, 3))) == 1.0
    a, b = rng.uniform(size=(5, 4, 3)), rng.uniform(size=(5, 4, 3))
    assert rgb_loss(a, a) == 0.0
    assert rgb_loss(a, b) == pytest.approx(sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / 60,
                                           abs=1e-12)
    with pytest.raises(DomainError):
        rgb_loss(a, b[:4])


def test_rgb_loss_with_perceptual_term(rng):
    class Shift:
        def __call__(self, a, b):
            return float(np.sum(a - b))

        def gradient(self, a, b):
            return np.ones_like(a)

    a, b = rng.uniform(size=(2, 2, 3)), rng.uniform(size=(2, 2, 3))
    value, grad = rgb_loss(a, b, Shift(), 0.5, return_grad=True)
    assert value == pytest.approx(np.mean((a - b) ** 2) + 0.5 * np.sum(a - b))
    np.testing.assert_allclose(grad, 2 * (a - b) / a.size + 0.5)


def test_total_loss_examples(rng):
    assert total_loss(0, 0, 0, 0).total == 0.0
    assert total_loss(1, 1, 1, 1).total == pytest.approx(2.11, abs=1e-15)
    for _ in range(20):
        terms = rng.uniform(0, 3, 4)
        w = rng.uniform(0, 2, 3)
        rep = total_loss(*terms, LossWeights(*w))
        assert rep.total == pytest.approx(terms @ np.r_[1.0, w], abs=1e-12)


def test_negative_weights_rejected():
    with pytest.raises(DomainError):
        LossWeights(lambda3=-0.01)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.floats(0, 5))
def test_total_loss_monotone_in_dn_weight(terms, extra):
    a = total_loss(*terms, LossWeights(lambda3=0.01)).total
    b = total_loss(*terms, LossWeights(lambda3=0.01 + extra)).total
    assert b >= a


def test_report_json_round_trip(tmp_path):
    rep = total_loss(0.5, 0.25, 0.125, 1.5)
    path = tmp_path / "trace.jsonl"
    append_report(path, rep)
    append_report(path, rep)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert LossReport.from_json(lines[1]) == rep


def test_evaluate_zero_at_perfect_fit():
    cam = EquirectCamera(32, 16)
    scene = GaussianScene([[0, 0, 2.0]], [[3.0, 3.0, 0.01]], [[1.0, 0, 0, 0]], [1.0], [[0.3, 0.6, 0.9]])
    from geosplat360.render import render

    target = render(cam, scene)
    rep = evaluate(scene, cam, target, LossWeights(lambda1=0.0))
    assert rep.l_rgb == pytest.approx(0.0, abs=1e-20)
    assert rep.l_depth == pytest.approx(0.0, abs=1e-20)
    assert rep.l_dn == pytest.approx(0.0, abs=1e-12)


def test_gradient_of_scale_term_only(rng):
    cam = EquirectCamera(16, 8)
    scene = scene_with_scales((0.5, 1, 2))
    scene.means = np.array([[0, 0, 50.0]])  # far away: nothing to render against
    target = PanoramaBuffer(rgb=np.zeros((8, 16, 3)))
    grad = loss_gradients(scene, cam, target, LossWeights(lambda1=1.0))
    np.testing.assert_allclose(grad.scales, [[1.0, 0, 0]], atol=1e-12)


def test_mismatched_views_rejected():
    cam = EquirectCamera(16, 8)
    with pytest.raises(DomainError):
        evaluate(scene_with_scales((1, 1, 1)), [cam, cam], [PanoramaBuffer(rgb=np.zeros((8, 16, 3)))])
