"""Per-scene gradient-descent fitting of Gaussian sets to posed panoramas."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import DivergenceError, DomainError, check_is_fitted
from .camera import pixel_directions
from .gaussians import GaussianScene, as_scene, normalize_quat, read_gaussians, rotmat_to_quat, write_gaussians
from .losses import LossReport, LossWeights, evaluate
from .panorama import PanoramaBuffer
from .render import RenderOptions, render

log = logging.getLogger(__name__)

MIN_SCALE = 1e-4


def _ray_frame(d):
    """Rotations (N, 3, 3) whose third column is the unit ray ``d``."""
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    up = np.where(np.abs(d[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    x = np.cross(up, d)
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    y = np.cross(d, x)
    return np.stack([x, y, d], axis=-1)


def init_from_depth(cam, prior, stride=1, rgb=None, opacity=0.8, footprint=0.6, flatness=0.1,
                    polar_merge=False):
    """One ray-facing flat Gaussian per ``stride x stride`` block of a depth prior.

    The center sits at the block's mean valid depth along the ray through
    the block center. Tangential scale is ``footprint * depth * stride *
    pi / H`` (the angular block size at that depth), the normal axis is
    ``flatness`` times that and points along the ray. Opacity is the mean
    prior confidence when the prior has one, else ``opacity``.

    Equirect rows shrink by cos(latitude) on the sphere, so with
    ``polar_merge`` each block row merges ``floor(1 / cos(lat))`` adjacent
    blocks; this keeps the spatial density roughly uniform instead of piling
    splats up near the poles.
    """
    if isinstance(prior, PanoramaBuffer):
        depth, conf = prior.depth, prior.confidence
        if rgb is None:
            rgb = prior.rgb
    else:
        depth, conf = np.asarray(prior, dtype=np.float64), None
    depth = np.asarray(depth, dtype=np.float64)
    H, W = cam.shape
    if depth.shape != (H, W):
        raise DomainError(f"depth prior shape {depth.shape} does not match camera {(H, W)}")
    stride = int(stride)
    if stride < 1:
        raise DomainError("stride must be >= 1")
    if not 0.0 < flatness < 1.0:
        # at 1 the normal axis would tie with the tangential ones
        raise DomainError("flatness must lie in (0, 1)")
    valid = depth > 0
    if not valid.any():
        raise DomainError("depth prior has no valid pixels")

    nbv, nbu = -(-H // stride), -(-W // stride)
    merge = np.ones(nbv, dtype=np.int64)
    if polar_merge:
        rows = np.arange(nbv) * stride + (np.minimum(np.arange(nbv) * stride + stride, H) - np.arange(nbv) * stride - 1) / 2.0
        coslat = np.cos(np.pi / 2 - np.pi * (rows + 0.5) / H)
        merge = np.clip(np.floor(1.0 / np.maximum(coslat, 1e-9)), 1, nbu).astype(np.int64)
    vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    block = (vv // stride) * nbu + (uu // stride) // merge[vv // stride]
    nblocks = nbv * nbu
    count = np.bincount(block[valid], minlength=nblocks)
    dsum = np.bincount(block[valid], weights=depth[valid], minlength=nblocks)
    keep = np.nonzero(count > 0)[0]
    d = dsum[keep] / count[keep]

    bv, bu = keep // nbu, keep % nbu
    v0, u0 = bv * stride, bu * stride * merge[bv]
    vc = v0 + (np.minimum(v0 + stride, H) - v0 - 1) / 2.0
    uc = u0 + (np.minimum(u0 + stride * merge[bv], W) - u0 - 1) / 2.0
    dirs = pixel_directions(cam, uc, vc)
    dirs_w = dirs @ cam.rotation.T
    means = cam.translation + d[:, None] * dirs_w

    sigma = footprint * d * stride * np.pi / H
    scales = np.stack([sigma, sigma, flatness * sigma], axis=1)
    frames = _ray_frame(dirs_w)
    quats = np.array([rotmat_to_quat(R) for R in frames]).reshape(-1, 4)

    if conf is not None:
        csum = np.bincount(block[valid], weights=np.asarray(conf)[valid], minlength=nblocks)
        alphas = np.clip(csum[keep] / count[keep], 0.0, 1.0)
    else:
        alphas = np.full(len(keep), float(opacity))
    if rgb is not None:
        rgb = np.asarray(rgb, dtype=np.float64)
        colors = np.stack([
            np.bincount(block[valid], weights=rgb[..., c][valid], minlength=nblocks)[keep] / count[keep]
            for c in range(3)
        ], axis=1)
    else:
        colors = np.full((len(keep), 3), 0.5)
    return GaussianScene(means, scales, quats, alphas, colors)


@dataclass
class FitConfig:
    """Optimizer settings. ``lr_means=None`` means ``1e-3 * scene scale``."""

    iterations: int = 500
    lr_means: float = None
    lr_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacities: float = 5e-2
    lr_colors: float = 1e-2
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    min_scale: float = MIN_SCALE
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    render: RenderOptions = field(default_factory=RenderOptions)
    checkpoint_every: int = 0
    checkpoint_path: str = None
    #: views rendered per Adam step, cycling through shuffled epochs; 0 means all
    views_per_step: int = 0

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise DomainError("iterations must be a non-negative integer")
        for name in ("lr_scales", "lr_quats", "lr_opacities", "lr_colors"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.lr_means is not None and not self.lr_means > 0:
            raise DomainError("lr_means must be positive")
        if int(self.views_per_step) != self.views_per_step or self.views_per_step < 0:
            raise DomainError("views_per_step must be a non-negative integer")


@dataclass
class FitResult:
    scene: GaussianScene
    trace: list


_GROUPS = ("means", "scales", "quats", "opacities", "colors")


def scene_scale(scene, cams):
    centers = np.array([c.translation for c in cams])
    dist = np.linalg.norm(scene.means - centers.mean(axis=0), axis=1)
    return float(np.median(dist)) if len(dist) else 1.0


class Adam:
    """Adam moments per parameter group of a GaussianScene."""

    def __init__(self, scene, lrs, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lrs = lrs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(getattr(scene, k)) for k in _GROUPS}
        self.v = {k: np.zeros_like(getattr(scene, k)) for k in _GROUPS}
        self.t = 0

    def step(self, scene, grad):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k in _GROUPS:
            g = getattr(grad, k)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = self.lrs[k] * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            setattr(scene, k, getattr(scene, k) - update)


def project_constraints(scene, min_scale=MIN_SCALE):
    scene.quats = normalize_quat(scene.quats)
    scene.scales = np.maximum(scene.scales, min_scale)
    scene.opacities = np.clip(scene.opacities, 0.0, 1.0)
    return scene


def fit(scene_init, cams, targets, cfg=None, callback=None):
    """Minimise the total loss of ``scene_init`` against posed targets with Adam.

    The trace holds the report before every update plus one for the final
    scene, so ``trace[0]`` is the initial loss and ``trace[-1]`` the final.
    When ``cfg.views_per_step`` selects fewer than all views, each step's
    report covers only that step's views; the last entry always covers all.
    """
    cfg = cfg or FitConfig()
    scene = as_scene(scene_init).copy()
    if len(scene) == 0:
        raise DomainError("cannot fit an empty scene")
    cams = list(cams) if isinstance(cams, (list, tuple)) else [cams]
    targets = list(targets) if isinstance(targets, (list, tuple)) else [targets]
    if not targets:
        raise DomainError("at least one target view is required")
    lr_means = cfg.lr_means if cfg.lr_means is not None else 1e-3 * scene_scale(scene, cams)
    lrs = {"means": lr_means, "scales": cfg.lr_scales, "quats": cfg.lr_quats,
           "opacities": cfg.lr_opacities, "colors": cfg.lr_colors}
    adam = Adam(scene, lrs, cfg.beta1, cfg.beta2, cfg.eps)
    trace = []
    over = 0
    batches = _view_batches(len(cams), cfg.views_per_step, cfg.seed)
    reference = None
    if cfg.views_per_step and cfg.views_per_step < len(cams) and cfg.iterations:
        reference = evaluate(scene, cams, targets, cfg.weights, cfg.render).total
    for it in range(cfg.iterations):
        idx = next(batches)
        report = evaluate(scene, [cams[i] for i in idx], [targets[i] for i in idx],
                          cfg.weights, cfg.render, want_grad=True)
        grad = report.gradient
        report.gradient = None
        trace.append(report)
        base = trace[0].total if reference is None else reference
        if it > 0 and report.total > cfg.divergence_factor * base:
            over += 1
            if over >= cfg.divergence_patience:
                raise DivergenceError(
                    f"loss exceeded {cfg.divergence_factor}x its initial value "
                    f"({base:.4g}) for {over} iterations (now {report.total:.4g})",
                    trace)
        else:
            over = 0
        adam.step(scene, grad)
        project_constraints(scene, cfg.min_scale)
        if callback is not None:
            callback(it, report, scene)
        if cfg.checkpoint_every and cfg.checkpoint_path and (it + 1) % cfg.checkpoint_every == 0:
            write_gaussians(cfg.checkpoint_path, scene)
        if it % 50 == 0:
            log.debug("iter %d total %.6g", it, report.total)
    trace.append(evaluate(scene, cams, targets, cfg.weights, cfg.render))
    return FitResult(scene, trace)


def _view_batches(n_views, per_step, seed):
    if not per_step or per_step >= n_views:
        while True:
            yield range(n_views)
    rng = np.random.default_rng(seed)
    pool = []
    while True:
        while len(pool) < per_step:
            pool.extend(rng.permutation(n_views).tolist())
        yield pool[:per_step]
        del pool[:per_step]


def perturb_scene(scene, center_sigma=0.05, randomize_normals=True, seed=0):
    """Jitter centers by isotropic Gaussian noise and optionally draw random orientations."""
    rng = np.random.default_rng(seed)
    out = as_scene(scene).copy()
    out.means = out.means + rng.normal(0.0, center_sigma, out.means.shape)
    if randomize_normals:
        q = rng.normal(size=out.quats.shape)
        out.quats = normalize_quat(q)
    return out


class GaussianSceneFitter(BaseEstimator):
    """Estimator wrapper around :func:`fit`.

    ``fit(targets, cameras, init=None)`` optimises a scene (initialised from
    the first target's depth when ``init`` is None) and stores it in
    ``scene_``; ``predict(camera)`` renders it.
    """

    def __init__(self, lambda1=1.0, lambda2=0.1, lambda3=0.01, perceptual_weight=0.0,
                 iterations=500, lr_means=None, lr_scales=5e-3, lr_quats=1e-3,
                 lr_opacities=5e-2, lr_colors=1e-2, init_stride=3, polar_merge=True,
                 views_per_step=0, render_mode="tiled", seed=0):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.perceptual_weight = perceptual_weight
        self.iterations = iterations
        self.lr_means = lr_means
        self.lr_scales = lr_scales
        self.lr_quats = lr_quats
        self.lr_opacities = lr_opacities
        self.lr_colors = lr_colors
        self.init_stride = init_stride
        self.polar_merge = polar_merge
        self.views_per_step = views_per_step
        self.render_mode = render_mode
        self.seed = seed

    def _config(self):
        return FitConfig(
            iterations=self.iterations, lr_means=self.lr_means, lr_scales=self.lr_scales,
            lr_quats=self.lr_quats, lr_opacities=self.lr_opacities, lr_colors=self.lr_colors,
            weights=LossWeights(self.lambda1, self.lambda2, self.lambda3, self.perceptual_weight),
            seed=self.seed, render=RenderOptions(mode=self.render_mode),
            views_per_step=self.views_per_step,
        )

    def fit(self, targets, cameras, init=None):
        targets = list(targets) if isinstance(targets, (list, tuple)) else [targets]
        cameras = list(cameras) if isinstance(cameras, (list, tuple)) else [cameras]
        if len(targets) != len(cameras):
            raise DomainError("need one camera per target")
        if init is None:
            init = init_from_depth(cameras[0], targets[0], self.init_stride,
                                   polar_merge=self.polar_merge)
        elif isinstance(init, str):
            init = read_gaussians(init)
        result = fit(init, cameras, targets, self._config())
        self.init_scene_ = as_scene(init)
        self.scene_ = result.scene
        self.trace_ = result.trace
        self.n_gaussians_ = len(result.scene)
        return self

    def predict(self, cameras):
        check_is_fitted(self, "scene_")
        opts = RenderOptions(mode=self.render_mode)
        if isinstance(cameras, (list, tuple)):
            return [render(c, self.scene_, opts) for c in cameras]
        return render(cameras, self.scene_, opts)

    def score(self, targets, cameras):
        """Negative total loss of the fitted scene (higher is better)."""
        check_is_fitted(self, "scene_")
        cfg = self._config()
        return -evaluate(self.scene_, cameras, targets, cfg.weights, cfg.render).total

    def loss_report(self, targets, cameras) -> LossReport:
        check_is_fitted(self, "scene_")
        cfg = self._config()
        return evaluate(self.scene_, cameras, targets, cfg.weights, cfg.render)


def with_weights(cfg, **weights):
    return replace(cfg, weights=replace(cfg.weights, **weights))
