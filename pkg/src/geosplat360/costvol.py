"""Spherical plane-sweep cost volumes and soft-argmin depth priors.

A reference panorama is swept over a set of depth hypotheses. Each
reference pixel is pushed out along its ray to every hypothesis, the
resulting world point is looked up in the source panoramas, and the cost
is the variance of the sampled colors across all views. Low variance
means the views agree, i.e. the hypothesis is plausible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import uniform_filter
from sklearn.base import BaseEstimator

from ._validation import DomainError, as_float_array, check_is_fitted, check_positive
from .camera import EquirectCamera, direction_to_pixel
from .panorama import PanoramaBuffer

DEFAULT_NEAR = 0.3
DEFAULT_FAR = 20.0
#: written as the first four bytes of a cost-volume file
MAGIC = b"GSCV"
_HEADER = struct.Struct("<4sIIIff")


class PosedPanorama(NamedTuple):
    camera: EquirectCamera
    image: object  # (H, W, C) array or a PanoramaBuffer with rgb

    def pixels(self):
        img = self.image.rgb if isinstance(self.image, PanoramaBuffer) else self.image
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[..., None]
        if img.shape[:2] != self.camera.shape:
            raise DomainError(f"image shape {img.shape[:2]} does not match camera {self.camera.shape}")
        return img

    def coverage(self):
        if isinstance(self.image, PanoramaBuffer) and self.image.mask is not None:
            return np.asarray(self.image.mask, dtype=bool)
        return None


@dataclass
class SphereCostVolume:
    cost: np.ndarray          # (H, W, K), lower is better
    hypotheses: np.ndarray    # (K,) strictly increasing depths in meters
    reference: int = 0

    def __post_init__(self):
        self.cost = as_float_array(self.cost, "cost", ndim=3)
        self.hypotheses = as_float_array(self.hypotheses, "hypotheses", ndim=1)
        check_hypotheses(self.hypotheses)
        if self.cost.shape[2] != len(self.hypotheses):
            raise DomainError(
                f"cost has {self.cost.shape[2]} slices but there are {len(self.hypotheses)} hypotheses")

    @property
    def height(self):
        return self.cost.shape[0]

    @property
    def width(self):
        return self.cost.shape[1]

    @property
    def n_hypotheses(self):
        return len(self.hypotheses)

    def argmin_depth(self):
        return self.hypotheses[np.argmin(self.cost, axis=2)]


@dataclass
class DepthPrior:
    depth: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.depth.shape != self.confidence.shape:
            raise DomainError("depth and confidence planes differ in shape")

    def to_buffer(self, rgb=None):
        return PanoramaBuffer(rgb=rgb, depth=self.depth, confidence=self.confidence)


def check_hypotheses(h):
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1 or len(h) < 2:
        raise DomainError("need at least two depth hypotheses")
    if not np.all(np.isfinite(h)) or np.any(h <= 0):
        raise DomainError("depth hypotheses must be finite and positive")
    if np.any(np.diff(h) <= 0):
        raise DomainError("depth hypotheses must be strictly increasing")
    return h


def inverse_depth_hypotheses(k, near=DEFAULT_NEAR, far=DEFAULT_FAR):
    """``k`` depths from ``near`` to ``far``, evenly spaced in 1/depth."""
    k = int(k)
    if k < 2:
        raise DomainError("need at least two depth hypotheses")
    check_positive(near, "near")
    if not far > near:
        raise DomainError("far must exceed near")
    inv = np.linspace(1.0 / near, 1.0 / far, k)
    h = 1.0 / inv
    h[0], h[-1] = near, far
    return h


# --- sampling -----------------------------------------------------------

def bilinear_sample(image, u, v, coverage=None):
    """Sample ``image`` (H, W, C) at continuous pixel coordinates.

    Columns wrap around the seam; rows are clamped at the poles. Returns
    (values, ok) where ``ok`` is False for samples touching an uncovered
    pixel (``coverage`` False) with nonzero weight.
    """
    H, W = image.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    c0 = np.mod(u0.astype(np.int64), W)
    c1 = np.mod(c0 + 1, W)
    r0 = np.clip(v0.astype(np.int64), 0, H - 1)
    r1 = np.clip(v0.astype(np.int64) + 1, 0, H - 1)
    out = ((1 - fu) * (1 - fv) * image[r0, c0] + fu * (1 - fv) * image[r0, c1]
           + (1 - fu) * fv * image[r1, c0] + fu * fv * image[r1, c1])
    if coverage is None:
        ok = np.ones(u.shape, dtype=bool)
    else:
        fu, fv = fu[..., 0], fv[..., 0]
        ok = ((coverage[r0, c0] | ((1 - fu) * (1 - fv) == 0))
              & (coverage[r0, c1] | (fu * (1 - fv) == 0))
              & (coverage[r1, c0] | ((1 - fu) * fv == 0))
              & (coverage[r1, c1] | (fu * fv == 0)))
    return out, ok


def _as_posed(item):
    if isinstance(item, PosedPanorama):
        return item
    cam, img = item
    return PosedPanorama(cam, img)


def sweep(ref, sources, hypotheses, intensity_scale=255.0, window=7, reference_id=0):
    """Variance cost volume of ``ref`` against ``sources`` over depth ``hypotheses``.

    Colors are multiplied by ``intensity_scale`` first (8-bit units by
    default), so the default temperature of ``regress_depth`` gives a
    usefully peaked distribution. ``window`` is the side of a box filter
    applied to every cost slice (columns wrap around the seam); 1 disables
    aggregation.
    """
    ref = _as_posed(ref)
    if isinstance(sources, PosedPanorama) or (isinstance(sources, tuple) and len(sources) == 2
                                              and isinstance(sources[0], EquirectCamera)):
        sources = [sources]
    sources = [_as_posed(s) for s in sources]
    if not sources:
        raise DomainError("sweep needs at least one source view")
    hyp = check_hypotheses(hypotheses)
    window = int(window)
    if window < 1 or window % 2 == 0:
        raise DomainError("window must be a positive odd integer")

    cam = ref.camera
    H, W = cam.shape
    ref_img = ref.pixels() * intensity_scale
    ref_cov = ref.coverage()
    src = [(s.camera, s.pixels() * intensity_scale, s.coverage()) for s in sources]
    if any(img.shape[2] != ref_img.shape[2] for _, img, _ in src):
        raise DomainError("all views must have the same number of channels")

    rays = cam.ray_directions().reshape(-1, 3) @ cam.rotation.T
    ref_flat = ref_img.reshape(H * W, -1)
    ref_ok = np.ones(H * W, dtype=bool) if ref_cov is None else ref_cov.reshape(-1)
    cost = np.empty((H, W, len(hyp)))
    for k, d in enumerate(hyp):
        pts = cam.translation + d * rays
        s1 = np.where(ref_ok[:, None], ref_flat, 0.0)
        s2 = s1 * s1
        n = ref_ok.astype(np.float64)
        for scam, simg, scov in src:
            local = (pts - scam.translation) @ scam.rotation
            dist = np.linalg.norm(local, axis=1)
            near_center = dist < 1e-9
            dirs = local / np.where(near_center, 1.0, dist)[:, None]
            dirs[near_center] = (0.0, 0.0, 1.0)
            u, v = direction_to_pixel(scam, dirs)
            val, ok = bilinear_sample(simg, u, v, scov)
            ok &= ~near_center
            val = np.where(ok[:, None], val, 0.0)
            s1 += val
            s2 += val * val
            n += ok
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = s1 / n[:, None]
            var = np.maximum(s2 / n[:, None] - mean * mean, 0.0).mean(axis=1)
        var[n < 2] = np.inf
        cost[:, :, k] = var.reshape(H, W)

    finite = np.isfinite(cost)
    if not finite.all():
        fill = cost[finite].max() if finite.any() else 0.0
        cost[~finite] = fill
    if window > 1:
        cost = uniform_filter(cost, size=(window, window, 1), mode=("nearest", "wrap", "nearest"))
    return SphereCostVolume(cost, hyp, reference_id)


def softmax_weights(cost, temperature=1.0):
    """softmax(-cost / temperature) along the last axis."""
    check_positive(temperature, "temperature")
    z = -np.asarray(cost, dtype=np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p


def regress_depth(vol, temperature=1.0):
    """Soft-argmin depth and max-probability confidence of a cost volume."""
    if temperature is None or not temperature > 0:
        raise DomainError("temperature must be positive")
    p = softmax_weights(vol.cost, temperature)
    depth = p @ vol.hypotheses
    # the expectation can leave the hull by an ulp; keep the convex bound exact
    depth = np.clip(depth, vol.hypotheses[0], vol.hypotheses[-1])
    return DepthPrior(depth, p.max(axis=-1))


# --- feature modulation -------------------------------------------------

def condition_vector(planes):
    """Pool each (H, W, C) plane to its channel means and concatenate."""
    if isinstance(planes, np.ndarray) and planes.ndim == 1:
        return planes.astype(np.float64)
    pooled = []
    for p in planes:
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 2:
            p = p[..., None]
        pooled.append(p.reshape(-1, p.shape[-1]).mean(axis=0))
    if not pooled:
        raise DomainError("no conditioning planes given")
    return np.concatenate(pooled)


class FilmAffine:
    """Affine map from a conditioning vector to per-channel (gamma, beta).

    Starts as the identity modulation (gamma = 1, beta = 0 for any input).
    """

    def __init__(self, cond_dim, channels):
        self.gamma_weight = np.zeros((channels, cond_dim))
        self.gamma_bias = np.ones(channels)
        self.beta_weight = np.zeros((channels, cond_dim))
        self.beta_bias = np.zeros(channels)

    @property
    def channels(self):
        return len(self.gamma_bias)

    def __call__(self, cond):
        cond = np.asarray(cond, dtype=np.float64)
        if cond.shape != (self.gamma_weight.shape[1],):
            raise DomainError(f"conditioning vector must have length {self.gamma_weight.shape[1]}")
        return self.gamma_weight @ cond + self.gamma_bias, self.beta_weight @ cond + self.beta_bias


def film_modulate(features, cond=None, affine=None, gamma=None, beta=None):
    """Per-channel ``gamma * F + beta`` on an (H, W, C) feature plane set.

    Either pass ``gamma``/``beta`` directly or a conditioning input (a
    vector or a list of planes, see ``condition_vector``) plus an affine
    map; without any of them the modulation is the identity.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 3:
        raise DomainError("features must be an (H, W, C) array")
    C = F.shape[2]
    if gamma is None and beta is None:
        if cond is not None:
            c = condition_vector(cond)
            affine = affine or FilmAffine(len(c), C)
            if affine.channels != C:
                raise DomainError(f"affine map produces {affine.channels} channels, features have {C}")
            gamma, beta = affine(c)
        else:
            gamma, beta = np.ones(C), np.zeros(C)
    gamma = np.broadcast_to(np.asarray(1.0 if gamma is None else gamma, dtype=np.float64), (C,)) \
        if np.ndim(gamma) == 0 or gamma is None else np.asarray(gamma, dtype=np.float64)
    beta = np.broadcast_to(np.asarray(0.0 if beta is None else beta, dtype=np.float64), (C,)) \
        if np.ndim(beta) == 0 or beta is None else np.asarray(beta, dtype=np.float64)
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DomainError(f"gamma and beta must have {C} channels")
    return gamma * F + beta


# --- persistence --------------------------------------------------------

def write_cost_volume(path, vol):
    """Raw little-endian file: 24-byte header, K float64 hypotheses, then H*W*K float32 costs."""
    near, far = float(vol.hypotheses[0]), float(vol.hypotheses[-1])
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, vol.width, vol.height, vol.n_hypotheses, near, far))
        fh.write(vol.hypotheses.astype("<f8").tobytes())
        fh.write(vol.cost.astype("<f4").tobytes())


def read_cost_volume(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DomainError(f"{path}: truncated cost volume header")
        magic, W, H, K, near, far = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DomainError(f"{path}: not a cost volume file")
        hyp = np.frombuffer(fh.read(8 * K), dtype="<f8")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if len(hyp) != K or data.size != H * W * K:
        raise DomainError(f"{path}: expected {H}x{W}x{K} costs")
    return SphereCostVolume(data.reshape(H, W, K).astype(np.float64), hyp.copy())


# --- estimator ----------------------------------------------------------

class PlaneSweepDepth(BaseEstimator):
    """Depth prior from a reference panorama and posed source panoramas.

    >>> est = PlaneSweepDepth(n_hypotheses=64).fit(ref, sources)   # doctest: +SKIP
    >>> prior = est.transform()                                     # doctest: +SKIP
    """

    def __init__(self, n_hypotheses=64, near=DEFAULT_NEAR, far=DEFAULT_FAR, temperature=1.0,
                 window=7, intensity_scale=255.0):
        self.n_hypotheses = n_hypotheses
        self.near = near
        self.far = far
        self.temperature = temperature
        self.window = window
        self.intensity_scale = intensity_scale

    def fit(self, reference, sources):
        check_positive(self.temperature, "temperature")
        self.hypotheses_ = inverse_depth_hypotheses(self.n_hypotheses, self.near, self.far)
        self.cost_volume_ = sweep(reference, sources, self.hypotheses_,
                                  intensity_scale=self.intensity_scale, window=self.window)
        self.prior_ = regress_depth(self.cost_volume_, self.temperature)
        return self

    def transform(self, X=None):
        check_is_fitted(self, ["prior_"])
        return self.prior_

    def predict(self, X=None):
        return self.transform().depth

    def fit_predict(self, reference, sources):
        return self.fit(reference, sources).predict()
