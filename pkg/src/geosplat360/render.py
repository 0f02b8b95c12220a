"""Panorama splatting of flattened Gaussians with intersection-depth compositing.

Every Gaussian is treated as a disc in the plane through its center that
is orthogonal to its smallest axis. A camera ray hits that plane at
distance ``t = (n . p) / (n . r)``; the hit's opacity is
``alpha * exp(-0.5 * mahalanobis(hit - center))`` and the per-pixel depth
is the alpha-composited average of the hit distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from ._validation import DomainError
from .camera import EquirectCamera
from .gaussians import GaussianScene, as_scene, canonical_sign, quat_to_rotmat, rotmat_grad_to_quat
from .panorama import INVALID_DEPTH, PanoramaBuffer

GRAZING = K.GRAZING
ALPHA_MIN = K.ALPHA_MIN
T_MIN = K.T_MIN


@dataclass(frozen=True)
class RenderOptions:
    """``mode`` is ``"tiled"`` or ``"reference"``.

    ``literal_depth`` reports ``r_z * t`` (the z-coordinate of the hit)
    instead of the Euclidean hit distance ``t``.
    """

    mode: str = "tiled"
    background: tuple = (0.0, 0.0, 0.0)
    literal_depth: bool = False
    near: float = 1e-3
    margin: float = 1.01
    normals: bool = True

    def __post_init__(self):
        if self.mode not in ("tiled", "reference"):
            raise DomainError(f"unknown render mode {self.mode!r}")
        if self.near < 0:
            raise DomainError("near must be non-negative")


# --- fragment-level operations ------------------------------------------

def intersection_depth(n, p, r, literal=False):
    """Depth of the hit of a camera ray on the plane through ``p`` with normal ``n``.

    Returns the ray parameter ``(n . p) / (n . r)`` (Euclidean distance for
    a unit ray from the camera center), or ``r_z`` times it when
    ``literal`` is set. Returns ``None`` for grazing rays.
    """
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(getattr(r, "direction", r), dtype=np.float64)
    nr = float(n @ r)
    if abs(nr) < GRAZING:
        return None
    t = float(n @ p) / nr
    return r[2] * t if literal else t


def falloff_opacity(g, ray, cov=None):
    """Opacity of Gaussian ``g`` where ``ray`` crosses its disc plane.

    ``ray`` and ``g`` must share a frame. Returns 0 for culled fragments
    (grazing ray, singular covariance, or opacity below 1/255).
    """
    cov = g.covariance if cov is None else np.asarray(cov, dtype=np.float64)
    k = int(np.argmin(g.scales))
    n = quat_to_rotmat(g.rotation)[:, k]
    o = np.asarray(getattr(ray, "origin", np.zeros(3)), dtype=np.float64)
    d = np.asarray(getattr(ray, "direction", ray), dtype=np.float64)
    nd = float(n @ d)
    if abs(nd) < GRAZING:
        return 0.0
    t = float(n @ (g.center - o)) / nd
    delta = o + t * d - g.center
    try:
        m = float(delta @ np.linalg.solve(cov, delta))
    except np.linalg.LinAlgError:
        return 0.0
    if not np.isfinite(m):
        return 0.0
    a = g.opacity * np.exp(-0.5 * m)
    return float(a) if a >= ALPHA_MIN else 0.0


@dataclass
class SplatFragment:
    index: int
    depth: float
    alpha: float
    transmittance: float = 1.0


def make_fragments(depths, alphas, indices=None):
    """Sort raw hits by (depth, index) and attach running transmittance."""
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    if indices is None:
        indices = np.arange(len(depths))
    order = np.lexsort((np.asarray(indices), depths))
    frags = []
    T = 1.0
    for i in order:
        if not 0.0 <= alphas[i] <= 1.0:
            raise DomainError("fragment opacity must lie in [0, 1]")
        frags.append(SplatFragment(int(indices[i]), float(depths[i]), float(alphas[i]), T))
        T *= 1.0 - alphas[i]
    return frags


def _weights(fragments):
    T = 1.0
    w = np.empty(len(fragments))
    for i, f in enumerate(fragments):
        w[i] = f.alpha * T
        T *= 1.0 - f.alpha
    return w, T


def composite_depth(fragments):
    """Alpha-weighted mean hit depth; ``INVALID_DEPTH`` without coverage."""
    if not fragments:
        return INVALID_DEPTH
    w, _ = _weights(fragments)
    den = w.sum()
    if den < K.COVERAGE_MIN:
        return INVALID_DEPTH
    d = np.array([f.depth for f in fragments])
    # the ratio can round one ulp outside the hull of the fragment depths
    live = w > 0
    return float(np.clip(w @ d / den, d[live].min(), d[live].max()))


def composite_rgb(fragments, colors, background=(0.0, 0.0, 0.0)):
    """Front-to-back color; ``colors[i]`` belongs to ``fragments[i]``."""
    bg = np.asarray(background, dtype=np.float64)
    if not fragments:
        return bg.copy()
    w, T = _weights(fragments)
    colors = np.asarray(colors, dtype=np.float64).reshape(len(fragments), -1)
    return w @ colors + T * bg


# --- full renders -------------------------------------------------------

@dataclass
class ViewInputs:
    """Camera-frame Gaussian arrays consumed by the kernels."""

    P: np.ndarray
    A: np.ndarray
    S: np.ndarray
    OP: np.ndarray
    COL: np.ndarray
    NIDX: np.ndarray
    dirs: np.ndarray
    rotation: np.ndarray
    table: np.ndarray
    bins: tuple = field(default=None)
    cache: tuple = field(default=None)


def prepare_view(cam, scene, options=None, dirs=None, cache_capacity=0, reuse_cache=None):
    """Camera-frame kernel inputs for one view.

    With ``cache_capacity > 0`` a forward render stores up to that many
    composited fragments per pixel so a following ``render_backward`` on the
    same view can skip re-collecting them.
    """
    options = options or RenderOptions()
    scene = as_scene(scene)
    Rc = cam.rotation
    if len(scene):
        P = (scene.means - cam.translation) @ Rc
        A = np.einsum("ji,gjk->gik", Rc, quat_to_rotmat(scene.quats))
        S = scene.scales.copy()
        NIDX = np.argmin(S, axis=1).astype(np.int64)
    else:
        P = np.zeros((0, 3))
        A = np.zeros((0, 3, 3))
        S = np.ones((0, 3))
        NIDX = np.zeros(0, dtype=np.int64)
    if np.any(~(S > 0)):
        raise DomainError("scales must be positive")
    OP = np.clip(scene.opacities, 0.0, 1.0).astype(np.float64)
    COL = np.ascontiguousarray(scene.colors[:, :3], dtype=np.float64)
    if dirs is None:
        dirs = cam.ray_directions()
    P = np.ascontiguousarray(P)
    S = np.ascontiguousarray(S)
    OP = np.ascontiguousarray(OP)
    A = np.ascontiguousarray(A)
    table = K.fragment_table(P, A, S, OP, NIDX, float(options.margin))
    view = ViewInputs(P, A, S, OP, COL, NIDX, np.ascontiguousarray(dirs), Rc, table)
    if options.mode == "tiled":
        view.bins = K.bin_gaussians(view.P, view.S, view.OP, cam.height, cam.width, options.margin)
    view.cache = K.fragment_cache(cam.height, cam.width, int(cache_capacity), reuse_cache)
    return view


def _empty_bins():
    return np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64)


def render_planes(cam, scene, options=None, view=None):
    """Raw (rgb, depth, alpha) planes; depth is -1 where nothing was hit."""
    options = options or RenderOptions()
    view = view or prepare_view(cam, scene, options)
    bg = np.asarray(options.background, dtype=np.float64).reshape(3)
    args = (view.dirs, view.P, view.A, view.S, view.OP, view.COL, view.NIDX, view.table, bg,
            bool(options.literal_depth), float(options.near))
    if options.mode == "tiled":
        offsets, items = view.bins
        return K.render_tiled(*args, offsets, items, *view.cache)
    return K.render_reference(*args, *view.cache)


def render(cam: EquirectCamera, scene, options: RenderOptions = None, **kwargs) -> PanoramaBuffer:
    """Render rgb, composited depth, accumulated alpha and depth normals."""
    if options is None:
        options = RenderOptions(**kwargs)
    elif kwargs:
        options = RenderOptions(**{**options.__dict__, **kwargs})
    rgb, depth, alpha = render_planes(cam, scene, options)
    normal = depth_to_normal(cam, depth) if options.normals else None
    return PanoramaBuffer(rgb=rgb, depth=depth, alpha=alpha, normal=normal)


def render_backward(cam, scene, g_rgb=None, g_depth=None, g_alpha=None, options=None, view=None):
    """Gradient of a scalar loss w.r.t. the scene, given its plane gradients.

    Returns a :class:`GaussianScene` whose arrays hold d(loss)/d(parameter);
    the quaternion gradient includes the normalisation.
    """
    options = options or RenderOptions()
    scene = as_scene(scene)
    view = view or prepare_view(cam, scene, options)
    H, W = cam.height, cam.width
    z3 = np.zeros((H, W, 3))
    z1 = np.zeros((H, W))
    g_rgb = z3 if g_rgb is None else np.ascontiguousarray(g_rgb, dtype=np.float64)
    g_depth = z1 if g_depth is None else np.ascontiguousarray(g_depth, dtype=np.float64)
    g_alpha = z1 if g_alpha is None else np.ascontiguousarray(g_alpha, dtype=np.float64)
    bg = np.asarray(options.background, dtype=np.float64).reshape(3)
    offsets, items = view.bins if view.bins is not None else _empty_bins()
    raw = K.backward(view.dirs, view.P, view.A, view.S, view.OP, view.COL, view.NIDX, view.table, bg,
                     bool(options.literal_depth), float(options.near), offsets, items,
                     view.bins is not None, g_rgb, g_depth, g_alpha, *view.cache)
    return pull_back(scene, view.rotation, raw)


def pull_back(scene, Rc, raw):
    """Map camera-frame kernel gradients to world-frame scene parameters."""
    G = len(scene)
    dP = raw[:, 0:3]
    dA = raw[:, 3:12].reshape(G, 3, 3).transpose(0, 2, 1)  # dA[g, i, k]
    d_means = dP @ Rc.T
    dM = np.einsum("ij,gjk->gik", Rc, dA)
    d_quats = rotmat_grad_to_quat(scene.quats, dM) if G else np.zeros((0, 4))
    return GaussianScene(d_means, raw[:, 12:15], d_quats, raw[:, 15], raw[:, 16:19])


# --- normals from depth -------------------------------------------------

@dataclass
class _NormalTerms:
    normal: np.ndarray
    valid: np.ndarray
    cross: np.ndarray
    norm: np.ndarray
    sign: np.ndarray
    t_h: np.ndarray
    t_v: np.ndarray
    dirs: np.ndarray


def _normal_terms(cam, depth, dirs=None):
    depth = np.asarray(depth, dtype=np.float64)
    H, W = cam.height, cam.width
    if depth.shape != (H, W):
        raise DomainError(f"depth plane shape {depth.shape} does not match camera {(H, W)}")
    dirs = cam.ray_directions() if dirs is None else dirs
    ok = depth > 0
    pts = np.where(ok[..., None], depth[..., None], 0.0) * dirs
    # horizontal neighbours wrap across the seam; rows do not
    t_h = np.roll(pts, -1, axis=1) - np.roll(pts, 1, axis=1)
    t_v = np.zeros_like(pts)
    t_v[1:-1] = pts[2:] - pts[:-2]
    valid = ok & np.roll(ok, -1, axis=1) & np.roll(ok, 1, axis=1)
    vert = np.zeros_like(ok)
    vert[1:-1] = ok[2:] & ok[:-2]
    valid &= vert
    cross = np.cross(t_v, t_h)
    norm = np.linalg.norm(cross, axis=-1)
    valid &= norm >= 1e-12
    safe = np.where(valid, norm, 1.0)
    unit = cross / safe[..., None]
    sign = np.where(np.sum(unit * dirs, axis=-1) > 0, -1.0, 1.0)
    normal = np.where(valid[..., None], unit * sign[..., None], 0.0)
    return _NormalTerms(normal, valid, cross, safe, sign, t_h, t_v, dirs)


normal_terms = _normal_terms


def depth_to_normal(cam, depth, return_mask=False, dirs=None):
    """Camera-frame normals from a Euclidean depth plane by central differences.

    Neighbouring depths are back-projected to 3D points; the normal is the
    normalised cross product of the vertical and horizontal tangents,
    oriented towards the camera. Pixels with an invalid neighbour (or a
    degenerate cross product) get a zero vector.
    """
    terms = _normal_terms(cam, depth, dirs)
    return (terms.normal, terms.valid) if return_mask else terms.normal


def depth_to_normal_backward(cam, depth, g_normal, dirs=None, terms=None):
    """Pull a gradient w.r.t. the normal plane back onto the depth plane.

    ``terms`` (from ``normal_terms``) avoids recomputing the forward pass.
    """
    tm = terms if terms is not None else _normal_terms(cam, depth, dirs)
    g = np.where(tm.valid[..., None], np.asarray(g_normal, dtype=np.float64), 0.0)
    unit = tm.cross / tm.norm[..., None]
    g_cross = (g - unit * np.sum(unit * g, axis=-1, keepdims=True)) / tm.norm[..., None]
    g_cross *= tm.sign[..., None]
    g_tv = np.cross(tm.t_h, g_cross)
    g_th = np.cross(g_cross, tm.t_v)
    g_pts = np.roll(g_th, 1, axis=1) - np.roll(g_th, -1, axis=1)
    g_pts[2:] += g_tv[1:-1]
    g_pts[:-2] -= g_tv[1:-1]
    g_depth = np.sum(g_pts * tm.dirs, axis=-1)
    return np.where(np.asarray(depth) > 0, g_depth, 0.0)


def facing_normal(n, view_dir):
    """Flip ``n`` to face a viewer looking along ``view_dir``."""
    n = canonical_sign(n)
    return -n if float(np.dot(n, view_dir)) > 0 else n
