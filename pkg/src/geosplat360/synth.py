"""Procedural box rooms with analytic ground truth.

A room is an axis-aligned box seen from inside. Each wall carries a
checker texture blended with a smooth color ramp, so patches are locally
distinctive (plane-sweep matching needs texture) without any randomness.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._validation import DomainError
from .camera import EquirectCamera, parse_pose_line, read_poses
from .panorama import PanoramaBuffer

FACES = ("-x", "+x", "-y", "+y", "-z", "+z")
# in-plane world axes (a, b) of each face
_FACE_AXES = {0: (2, 1), 1: (0, 2), 2: (0, 1)}


@dataclass(frozen=True)
class WallTexture:
    period: float = 0.25
    color_a: tuple = (0.85, 0.85, 0.85)
    color_b: tuple = (0.15, 0.15, 0.15)
    ramp: float = 0.35

    def __post_init__(self):
        if not self.period > 0:
            raise DomainError("texture period must be positive")
        if not 0 <= self.ramp <= 1:
            raise DomainError("texture ramp must lie in [0, 1]")


_DEFAULT_COLORS = (
    ((0.90, 0.80, 0.70), (0.20, 0.25, 0.35)),
    ((0.75, 0.90, 0.80), (0.35, 0.15, 0.20)),
    ((0.85, 0.85, 0.95), (0.30, 0.30, 0.10)),
    ((0.95, 0.75, 0.75), (0.10, 0.30, 0.30)),
    ((0.80, 0.80, 0.60), (0.25, 0.10, 0.35)),
    ((0.70, 0.85, 0.95), (0.35, 0.25, 0.05)),
)


def default_textures(period=0.25):
    return tuple(WallTexture(period, a, b) for a, b in _DEFAULT_COLORS)


@dataclass(frozen=True)
class BoxRoom:
    """Interior of the box ``[origin, origin + extents]`` (meters)."""

    extents: tuple
    origin: tuple = None
    textures: tuple = field(default_factory=default_textures)
    cameras: tuple = ()

    def __post_init__(self):
        ext = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if np.any(~(ext > 0)):
            raise DomainError("room extents must be positive")
        origin = -0.5 * ext if self.origin is None else np.asarray(self.origin, dtype=np.float64).reshape(3)
        object.__setattr__(self, "extents", tuple(ext))
        object.__setattr__(self, "origin", tuple(origin))
        if len(self.textures) == 1:
            object.__setattr__(self, "textures", tuple(self.textures) * 6)
        if len(self.textures) != 6:
            raise DomainError("a room needs one texture per wall (6)")
        for cam in self.cameras:
            self.check_inside(cam.translation)

    @property
    def lo(self):
        return np.asarray(self.origin)

    @property
    def hi(self):
        return np.asarray(self.origin) + np.asarray(self.extents)

    def check_inside(self, point):
        p = np.asarray(point, dtype=np.float64)
        if np.any(p <= self.lo) or np.any(p >= self.hi):
            raise DomainError(f"camera position {p} is not strictly inside the room")

    def with_resolution(self, width, height):
        cams = tuple(c.with_size(width, height) for c in self.cameras)
        return BoxRoom(self.extents, self.origin, self.textures, cams)

    def surface_area(self):
        ex, ey, ez = self.extents
        return 2 * (ex * ey + ey * ez + ex * ez)

    def wall_distance(self, points):
        """Distance of world points to the nearest wall plane."""
        p = np.asarray(points, dtype=np.float64)
        return np.min(np.concatenate([np.abs(p - self.lo), np.abs(p - self.hi)], axis=-1), axis=-1)


def roomA(width=1024, height=512):
    """Canonical 5 x 3 x 7 m room with three cameras on a 0.5 m triangle."""
    positions = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.25, 0.0, 0.25 * np.sqrt(3.0)]])
    cams = tuple(EquirectCamera(width, height, np.eye(3), p) for p in positions)
    return BoxRoom((5.0, 3.0, 7.0), (-2.2, -1.4, -3.2), default_textures(0.25), cams)


PRESETS = {"roomA": roomA}


def intersect_box(room, origin, dirs):
    """Hit distance, face axis and face side (0 = lo, 1 = hi) for rays from inside."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(d > 0, (room.hi - o) / d, np.inf)
        t_lo = np.where(d < 0, (room.lo - o) / d, np.inf)
    t_axis = np.minimum(t_hi, t_lo)
    axis = np.argmin(t_axis, axis=-1)
    t = np.take_along_axis(t_axis, axis[..., None], axis=-1)[..., 0]
    side = np.take_along_axis((t_hi <= t_lo).astype(np.int64), axis[..., None], axis=-1)[..., 0]
    return t, axis, side


def texture_color(room, points, axis, side):
    """Procedural wall color at world ``points`` lying on face (axis, side)."""
    points = np.asarray(points, dtype=np.float64)
    out = np.zeros(points.shape[:-1] + (3,))
    lo, ext = room.lo, np.asarray(room.extents)
    for ax in range(3):
        for sd in range(2):
            sel = (axis == ax) & (side == sd)
            if not np.any(sel):
                continue
            tex = room.textures[2 * ax + sd]
            ia, ib = _FACE_AXES[ax]
            a = points[sel][:, ia] - lo[ia]
            b = points[sel][:, ib] - lo[ib]
            check = (np.floor(a / tex.period) + np.floor(b / tex.period)).astype(np.int64) % 2
            base = np.where(check[:, None] == 0, np.asarray(tex.color_a), np.asarray(tex.color_b))
            ra = np.clip(a / ext[ia], 0, 1)
            rb = np.clip(b / ext[ib], 0, 1)
            ramp = np.stack([ra, rb, 1.0 - 0.5 * (ra + rb)], axis=-1)
            out[sel] = (1.0 - tex.ramp) * base + tex.ramp * ramp
    return out


def render_gt(room, cam, supersample=2):
    """Analytic rgb, Euclidean depth and inward (camera-frame) normals.

    Depth and normal are evaluated at pixel centers; rgb averages a
    ``supersample x supersample`` grid inside each pixel.
    """
    room.check_inside(cam.translation)
    dirs_c = cam.ray_directions()
    dirs_w = dirs_c @ cam.rotation.T
    t, axis, side = intersect_box(room, cam.translation, dirs_w)
    normal_w = np.zeros(dirs_w.shape)
    np.put_along_axis(normal_w, axis[..., None], np.where(side == 1, -1.0, 1.0)[..., None], axis=-1)
    normal_c = normal_w @ cam.rotation

    H, W = cam.shape
    k = max(1, int(supersample))
    rgb = np.zeros((H, W, 3))
    offs = (np.arange(k) + 0.5) / k - 0.5
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    for du in offs:
        for dv in offs:
            u = uu + du
            v = vv + dv
            lon = 2.0 * np.pi * (u + 0.5) / W - np.pi
            lat = np.pi / 2 - np.pi * (v + 0.5) / H
            d = np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)], -1)
            dw = d @ cam.rotation.T
            ts, ax, sd = intersect_box(room, cam.translation, dw)
            pts = cam.translation + ts[..., None] * dw
            rgb += texture_color(room, pts, ax, sd)
    rgb /= k * k
    return PanoramaBuffer(rgb=rgb, depth=t, alpha=np.ones((H, W)), normal=normal_c,
                          mask=np.ones((H, W), dtype=bool))


def sample_surface(room, density, seed=0):
    """Stratified jittered samples on the six walls; returns (points, inward normals)."""
    if not density > 0:
        raise DomainError("density must be positive")
    rng = np.random.default_rng(seed)
    lo, hi, ext = room.lo, room.hi, np.asarray(room.extents)
    pts, nrm = [], []
    for ax in range(3):
        ia, ib = _FACE_AXES[ax]
        la, lb = ext[ia], ext[ib]
        n = max(1, int(round(la * lb * density)))
        na = max(1, int(round(np.sqrt(n * la / lb))))
        nb = max(1, int(round(n / na)))
        for sd in range(2):
            ga, gb = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
            ja = rng.random(ga.shape)
            jb = rng.random(gb.shape)
            p = np.empty((na * nb, 3))
            p[:, ia] = lo[ia] + (ga + ja).reshape(-1) / na * la
            p[:, ib] = lo[ib] + (gb + jb).reshape(-1) / nb * lb
            p[:, ax] = hi[ax] if sd else lo[ax]
            nv = np.zeros(3)
            nv[ax] = -1.0 if sd else 1.0
            pts.append(p)
            nrm.append(np.tile(nv, (len(p), 1)))
    return np.concatenate(pts), np.concatenate(nrm)


# --- room config files --------------------------------------------------

def load_room(path):
    """Read a JSON room config.

    Keys: ``preset`` (optional base), ``extents``, ``origin``,
    ``texture`` ({period, ramp, color_a, color_b}), ``resolution`` [W, H],
    and cameras either inline as pose lines (``poses``) or via
    ``poses_file`` in the pose-file format.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DomainError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise DomainError(f"{path}: room config must be a JSON object")
    return room_from_config(cfg, base_dir=os.path.dirname(os.path.abspath(path)))


def room_from_config(cfg, base_dir="."):
    known = {"preset", "extents", "origin", "texture", "resolution", "poses", "poses_file", "supersample"}
    unknown = set(cfg) - known
    if unknown:
        raise DomainError(f"unknown room config field(s): {', '.join(sorted(unknown))}")
    if "preset" in cfg:
        if cfg["preset"] not in PRESETS:
            raise DomainError(f"field 'preset': unknown preset {cfg['preset']!r}")
        base = PRESETS[cfg["preset"]]()
    else:
        base = None
    try:
        extents = cfg.get("extents", base.extents if base else None)
        if extents is None:
            raise DomainError("field 'extents' is required")
        extents = [float(x) for x in extents]
        if len(extents) != 3:
            raise DomainError("field 'extents' must have 3 values")
    except (TypeError, ValueError):
        raise DomainError("field 'extents' must be 3 numbers") from None
    origin = cfg.get("origin", base.origin if base else None)
    if origin is not None:
        try:
            origin = [float(x) for x in origin]
            if len(origin) != 3:
                raise ValueError
        except (TypeError, ValueError):
            raise DomainError("field 'origin' must be 3 numbers") from None
    textures = base.textures if base else default_textures()
    if "texture" in cfg:
        tcfg = cfg["texture"]
        if not isinstance(tcfg, dict):
            raise DomainError("field 'texture' must be an object")
        try:
            period = float(tcfg.get("period", 0.25))
            ramp = float(tcfg.get("ramp", 0.35))
        except (TypeError, ValueError):
            raise DomainError("field 'texture': period/ramp must be numbers") from None
        if not period > 0:
            raise DomainError("field 'texture.period' must be positive")
        if "color_a" in tcfg or "color_b" in tcfg:
            textures = (WallTexture(period, tuple(tcfg.get("color_a", (0.85,) * 3)),
                                    tuple(tcfg.get("color_b", (0.15,) * 3)), ramp),)
        else:
            textures = tuple(WallTexture(period, t.color_a, t.color_b, ramp) for t in textures)
    cams = list(base.cameras) if base else []
    if "poses" in cfg:
        if not isinstance(cfg["poses"], list):
            raise DomainError("field 'poses' must be a list of pose lines")
        cams = [parse_pose_line(line, i + 1) for i, line in enumerate(cfg["poses"])]
    if "poses_file" in cfg:
        pf = cfg["poses_file"]
        if not os.path.isabs(pf):
            pf = os.path.join(base_dir, pf)
        if not os.path.exists(pf):
            raise DomainError(f"field 'poses_file': {pf} does not exist")
        cams = read_poses(pf)
    if "resolution" in cfg:
        try:
            W, H = (int(x) for x in cfg["resolution"])
        except (TypeError, ValueError):
            raise DomainError("field 'resolution' must be [width, height]") from None
        cams = [c.with_size(W, H) for c in cams]
    if not cams:
        raise DomainError("room config defines no cameras ('poses' or 'poses_file')")
    try:
        return BoxRoom(tuple(extents), None if origin is None else tuple(origin), textures, tuple(cams))
    except DomainError as exc:
        raise DomainError(f"room config: {exc}") from None
