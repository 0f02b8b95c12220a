"""Activations that turn raw per-pixel parameter planes into valid Gaussians.

Raw planes are unconstrained reals (what a network head would emit). The
adapter bounds them: pixel offsets are clamped to half a pixel, scales go
through a sigmoid times a depth-proportional ceiling, quaternions are
normalized, and opacities/colors go through a sigmoid.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from ._validation import DomainError, check_is_fitted, check_positive
from .camera import EquirectCamera, pixel_directions
from .gaussians import GaussianScene, quat_multiply, rotmat_to_quat
from .panorama import read_pfm_stack, write_pfm_stack

MAX_OFFSET = 0.5
DEFAULT_KAPPA = 3.0
#: channel order of a raw-plane PFM stack
STACK_LAYOUT = ("du", "dv", "depth", "s0", "s1", "s2", "qw", "qx", "qy", "qz",
                "opacity", "r", "g", "b")


@dataclass
class RawPlanes:
    """Unconstrained per-pixel parameters.

    offset (H, W, 2) in pixels, depth (H, W) meters, scale_logits (H, W, 3),
    quat (H, W, 4) in the camera frame, opacity (H, W) holding logits or,
    when ``opacity_is_confidence``, a confidence already in [0, 1], and
    color_logits (H, W, 3).
    """

    depth: np.ndarray
    offset: np.ndarray = None
    scale_logits: np.ndarray = None
    quat: np.ndarray = None
    opacity: np.ndarray = None
    color_logits: np.ndarray = None
    opacity_is_confidence: bool = False

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise DomainError("depth plane must be (H, W)")
        H, W = self.depth.shape
        defaults = {"offset": np.zeros((H, W, 2)), "scale_logits": np.zeros((H, W, 3)),
                    "quat": np.broadcast_to([1.0, 0.0, 0.0, 0.0], (H, W, 4)),
                    "opacity": np.zeros((H, W)), "color_logits": np.zeros((H, W, 3))}
        for name, default in defaults.items():
            value = getattr(self, name)
            value = default if value is None else np.asarray(value, dtype=np.float64)
            if value.shape != default.shape:
                raise DomainError(f"{name} plane has shape {value.shape}, expected {default.shape}")
            if not np.all(np.isfinite(value)):
                raise DomainError(f"{name} plane has non-finite values")
            setattr(self, name, value)

    @property
    def shape(self):
        return self.depth.shape

    def to_stack(self):
        planes = [self.offset[..., 0], self.offset[..., 1], self.depth]
        planes += [self.scale_logits[..., i] for i in range(3)]
        planes += [self.quat[..., i] for i in range(4)]
        planes += [self.opacity]
        planes += [self.color_logits[..., i] for i in range(3)]
        return planes

    @classmethod
    def from_stack(cls, planes, opacity_is_confidence=False):
        planes = [np.asarray(p, dtype=np.float64) for p in planes]
        if len(planes) != len(STACK_LAYOUT):
            raise DomainError(f"raw stack needs {len(STACK_LAYOUT)} planes, got {len(planes)}")
        if len({p.shape for p in planes}) != 1:
            raise DomainError("raw planes must share dimensions")
        st = np.stack(planes, axis=-1)
        return cls(depth=st[..., 2], offset=st[..., 0:2], scale_logits=st[..., 3:6],
                   quat=st[..., 6:10], opacity=st[..., 10], color_logits=st[..., 11:14],
                   opacity_is_confidence=opacity_is_confidence)


def read_raw_planes(path, opacity_is_confidence=False):
    return RawPlanes.from_stack(read_pfm_stack(path), opacity_is_confidence)


def write_raw_planes(path, raw):
    write_pfm_stack(path, raw.to_stack())


def scale_ceiling(depth, width, kappa=DEFAULT_KAPPA):
    """``kappa * depth * 2 pi / W``: kappa angular pixels at that depth."""
    return kappa * np.asarray(depth, dtype=np.float64) * (2.0 * np.pi / width)


def activate(raw, cam: EquirectCamera, kappa=DEFAULT_KAPPA, valid=None, diagnostics=None):
    """GaussianScene with one Gaussian per valid pixel of ``raw``.

    A pixel is valid where its depth is finite and positive (and ``valid``
    allows it). ``diagnostics``, if given, is a ``collections.Counter`` that
    receives ``degenerate_quat`` (zero-norm quaternions replaced by the
    identity), ``clamped_offset`` and ``invalid_depth`` counts.
    """
    if not isinstance(raw, RawPlanes):
        raw = RawPlanes(**raw)
    check_positive(kappa, "kappa")
    H, W = raw.shape
    if (H, W) != cam.shape:
        raise DomainError(f"raw planes are {H}x{W} but the camera is {cam.shape[0]}x{cam.shape[1]}")
    tally = diagnostics if diagnostics is not None else Counter()

    ok = raw.depth > 0
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (H, W):
            raise DomainError("valid mask shape does not match the raw planes")
        ok &= valid
    tally["invalid_depth"] += int((~(raw.depth > 0)).sum())
    vv, uu = np.nonzero(ok)
    depth = raw.depth[vv, uu]

    off = raw.offset[vv, uu]
    tally["clamped_offset"] += int(np.any(np.abs(off) > MAX_OFFSET, axis=1).sum())
    off = np.clip(off, -MAX_OFFSET, MAX_OFFSET)
    dirs = pixel_directions(cam, uu + off[:, 0], vv + off[:, 1])
    means = cam.camera_to_world(dirs * depth[:, None])

    smax = scale_ceiling(depth, W, kappa)[:, None]
    scales = expit(raw.scale_logits[vv, uu]) * smax
    # sigmoid underflows to 0 for very negative logits; keep the scale positive
    scales = np.maximum(scales, 1e-12 * smax)

    q = raw.quat[vv, uu]
    norm = np.linalg.norm(q, axis=1)
    degenerate = ~(norm > 1e-12)
    tally["degenerate_quat"] += int(degenerate.sum())
    q = np.where(degenerate[:, None], [1.0, 0.0, 0.0, 0.0], q / np.where(degenerate, 1.0, norm)[:, None])
    # raw quaternions live in the camera frame
    q = quat_multiply(rotmat_to_quat(cam.rotation), q)
    q /= np.linalg.norm(q, axis=1, keepdims=True)

    op = raw.opacity[vv, uu]
    alphas = np.clip(op, 0.0, 1.0) if raw.opacity_is_confidence else expit(op)
    colors = expit(raw.color_logits[vv, uu])
    return GaussianScene(means, scales, q, alphas, colors)


class GaussianAdapter(BaseEstimator):
    """Stateless estimator form of :func:`activate`.

    ``transform(raw)`` returns the activated scene; ``diagnostics_`` keeps the
    running tally across calls.
    """

    def __init__(self, camera=None, kappa=DEFAULT_KAPPA):
        self.camera = camera
        self.kappa = kappa

    def fit(self, raw=None, y=None):
        if self.camera is None:
            raise DomainError("GaussianAdapter needs a camera")
        check_positive(self.kappa, "kappa")
        self.diagnostics_ = Counter()
        return self

    def transform(self, raw):
        check_is_fitted(self, "diagnostics_")
        return activate(raw, self.camera, self.kappa, diagnostics=self.diagnostics_)

    def fit_transform(self, raw, y=None):
        return self.fit(raw).transform(raw)
