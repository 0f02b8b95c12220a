"""Training objective: photometric, scale-flattening, depth and depth-normal terms.

Every term reduces by a mean (over pixels or Gaussians) so the weights do
not depend on resolution or scene size. The total is
``l_rgb + lambda1 * l_s + lambda2 * l_depth + lambda3 * l_dn``.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import DomainError, check_mask, check_non_negative, check_plane, check_same_shape
from .gaussians import GaussianScene, as_scene
from .render import (
    RenderOptions,
    depth_to_normal,
    depth_to_normal_backward,
    normal_terms,
    prepare_view,
    render_backward,
    render_planes,
)

# composited fragments kept per pixel between the forward and backward pass
FRAGMENT_CACHE = 32
# views are processed one after another, so one cache per thread is reused
_pool = threading.local()


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.01
    perceptual: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "perceptual"):
            check_non_negative(getattr(self, name), name)


@dataclass
class LossReport:
    l_rgb: float
    l_s: float
    l_depth: float
    l_dn: float
    total: float
    gradient: GaussianScene = field(default=None, repr=False, compare=False)

    def as_dict(self):
        return {"l_rgb": self.l_rgb, "l_s": self.l_s, "l_depth": self.l_depth,
                "l_dn": self.l_dn, "total": self.total}

    def to_json(self):
        return json.dumps(self.as_dict())

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(d["l_rgb"], d["l_s"], d["l_depth"], d["l_dn"], d["total"])


def append_report(path, report):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")


# --- individual terms ---------------------------------------------------

def scale_loss(scene, return_grad=False):
    """Mean over Gaussians of the smallest scale (pushes every splat flat)."""
    scene = as_scene(scene)
    if len(scene) == 0:
        raise DomainError("scale loss of an empty scene")
    s = scene.scales
    idx = np.argmin(s, axis=1)
    mins = s[np.arange(len(s)), idx]
    value = float(np.mean(np.abs(mins)))
    if not return_grad:
        return value
    grad = np.zeros_like(s)
    # subgradient on ties goes to the lowest-index axis, same as the normal choice
    grad[np.arange(len(s)), idx] = np.sign(mins) / len(s)
    return value, grad


def dnormal_loss(rendered_normal, target_normal, mask=None, return_grad=False):
    """Mean over masked pixels of ``|N_r - N|_1 + (1 - N_r . N)``."""
    nr = check_plane(rendered_normal, "rendered normal", 3)
    nt = check_plane(target_normal, "target normal", 3)
    check_same_shape(nr, nt, ("rendered normal", "target normal"))
    m = check_mask(mask, nr.shape[:2])
    count = int(m.sum())
    if count == 0:
        raise DomainError("depth-normal loss has no valid pixels")
    diff = nr[m] - nt[m]
    per_pixel = np.abs(diff).sum(axis=1) + (1.0 - np.sum(nr[m] * nt[m], axis=1))
    value = float(per_pixel.mean())
    if not return_grad:
        return value
    grad = np.zeros_like(nr)
    grad[m] = (np.sign(diff) - nt[m]) / count
    return value, grad


def depth_loss(rendered_depth, target_depth, mask=None, return_grad=False):
    """Mean absolute depth error over masked pixels."""
    dr = check_plane(rendered_depth, "rendered depth")
    dt = check_plane(target_depth, "target depth")
    check_same_shape(dr, dt, ("rendered depth", "target depth"))
    m = check_mask(mask, dr.shape)
    count = int(m.sum())
    if count == 0:
        raise DomainError("depth loss has no valid pixels")
    diff = dr[m] - dt[m]
    value = float(np.abs(diff).mean())
    if not return_grad:
        return value
    grad = np.zeros_like(dr)
    grad[m] = np.sign(diff) / count
    return value, grad


def rgb_loss(rendered, target, perceptual=None, weight=0.0, mask=None, return_grad=False):
    """MSE plus ``weight`` times an optional perceptual functional.

    ``perceptual(rendered, target)`` may be any image-pair functional; for
    gradients it must also provide ``perceptual.gradient(rendered, target)``.
    """
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = check_mask(mask, a.shape[:2])
    count = int(m.sum())
    if count == 0:
        raise DomainError("rgb loss has no valid pixels")
    diff = a[m] - b[m]
    value = float(np.mean(diff**2))
    if perceptual is not None and weight > 0:
        value += weight * float(perceptual(a, b))
    if not return_grad:
        return value
    grad = np.zeros_like(a)
    grad[m] = 2.0 * diff / diff.size
    if perceptual is not None and weight > 0:
        grad += weight * np.asarray(perceptual.gradient(a, b))
    return value, grad


def total_loss(l_rgb, l_s, l_depth, l_dn, weights=None):
    weights = weights or LossWeights()
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    total = l_rgb + weights.lambda1 * l_s + weights.lambda2 * l_depth + weights.lambda3 * l_dn
    return LossReport(float(l_rgb), float(l_s), float(l_depth), float(l_dn), float(total))


# --- full objective over posed views ------------------------------------

def _as_lists(cams, targets):
    if not isinstance(cams, (list, tuple)):
        cams = [cams]
    if not isinstance(targets, (list, tuple)):
        targets = [targets]
    if len(cams) != len(targets) or not cams:
        raise DomainError("need one target buffer per camera")
    return list(cams), list(targets)


def _target_normal(cam, target):
    if target.normal is not None:
        return target.normal
    # pseudo-normals from the supervising depth
    return depth_to_normal(cam, target.depth)


def _view_terms(cam, scene, target, weights, options, want_grad, perceptual=None):
    view = prepare_view(cam, scene, options, cache_capacity=FRAGMENT_CACHE if want_grad else 0,
                        reuse_cache=getattr(_pool, "cache", None))
    if want_grad:
        _pool.cache = view.cache
    rgb, depth, _ = render_planes(cam, scene, options, view=view)
    H, W = cam.shape
    mask = np.ones((H, W), dtype=bool) if target.mask is None else np.asarray(target.mask, dtype=bool)
    l_rgb = l_depth = l_dn = 0.0
    g_rgb = np.zeros((H, W, 3)) if want_grad else None
    g_depth = np.zeros((H, W)) if want_grad else None

    if target.rgb is not None:
        res = rgb_loss(rgb, target.rgb, perceptual, weights.perceptual, mask, return_grad=want_grad)
        if want_grad:
            l_rgb, g_rgb = res
        else:
            l_rgb = res

    if target.depth is not None and weights.lambda2 >= 0:
        dmask = mask & (depth > 0) & (target.depth > 0)
        if dmask.any():
            res = depth_loss(depth, target.depth, dmask, return_grad=want_grad)
            if want_grad:
                l_depth, gd = res
                g_depth += weights.lambda2 * gd
            else:
                l_depth = res

    if target.depth is not None or target.normal is not None:
        terms = normal_terms(cam, depth, view.dirs)
        n_r, valid = terms.normal, terms.valid
        n_t = _target_normal(cam, target)
        nmask = mask & valid & (np.linalg.norm(n_t, axis=-1) > 0.5)
        if nmask.any():
            res = dnormal_loss(n_r, n_t, nmask, return_grad=want_grad)
            if want_grad:
                l_dn, gn = res
                if weights.lambda3 > 0:
                    g_depth += weights.lambda3 * depth_to_normal_backward(
                        cam, depth, gn, terms=terms)
            else:
                l_dn = res

    grad = None
    if want_grad:
        grad = render_backward(cam, scene, g_rgb, g_depth, None, options, view=view)
    return (l_rgb, l_depth, l_dn), grad, (rgb, depth)


def evaluate(scene, cams, targets, weights=None, options=None, want_grad=False, perceptual=None):
    """LossReport of ``scene`` against posed targets; per-view terms are averaged.

    With ``want_grad`` the report carries ``gradient``, a GaussianScene of
    d(total)/d(parameter).
    """
    scene = as_scene(scene)
    weights = weights or LossWeights()
    options = options or RenderOptions()
    cams, targets = _as_lists(cams, targets)
    V = len(cams)
    sums = np.zeros(3)
    grad = None
    for cam, target in zip(cams, targets):
        terms, g, _ = _view_terms(cam, scene, target, weights, options, want_grad, perceptual)
        sums += terms
        if want_grad:
            grad = g if grad is None else _add(grad, g)
    l_rgb, l_depth, l_dn = sums / V
    if len(scene):
        res = scale_loss(scene, return_grad=want_grad)
        l_s, g_s = res if want_grad else (res, None)
    else:
        l_s, g_s = 0.0, np.zeros((0, 3))
    report = total_loss(l_rgb, l_s, l_depth, l_dn, weights)
    if want_grad:
        grad = _scale(grad, 1.0 / V)
        grad.scales += weights.lambda1 * g_s
        report.gradient = grad
    return report


def loss_gradients(scene, cams, targets, weights=None, options=None, perceptual=None):
    """Per-Gaussian gradient block of the total loss (a GaussianScene of derivatives)."""
    return evaluate(scene, cams, targets, weights, options, want_grad=True,
                    perceptual=perceptual).gradient


def _add(a, b):
    return GaussianScene(a.means + b.means, a.scales + b.scales, a.quats + b.quats,
                         a.opacities + b.opacities, a.colors + b.colors)


def _scale(a, k):
    return GaussianScene(a.means * k, a.scales * k, a.quats * k, a.opacities * k, a.colors * k)
