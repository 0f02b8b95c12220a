"""Equirectangular camera model.

Camera frame: x right, y up, z forward. Longitude is measured from +z
towards +x, latitude from the equator towards +y. Pixel ``(u, v)`` has its
center at continuous image coordinate ``(u + 0.5, v + 0.5)``; so the center
of a 1024 x 512 panorama is ``u = 511.5, v = 255.5``.

Depth is always Euclidean distance along the ray.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import DomainError

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise DomainError("ray direction must be a unit vector")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + t * self.direction


@dataclass(frozen=True)
class EquirectCamera:
    """Panorama intrinsics plus a camera-to-world pose.

    ``rotation`` maps camera-frame vectors to world frame; ``translation``
    is the camera center in world coordinates (meters).
    """

    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise DomainError("camera dimensions must be integers")
        if self.width < 2 or self.height < 1:
            raise DomainError(f"invalid panorama size {self.width}x{self.height}")
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise DomainError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMAL_TOL or abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise DomainError("pose rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def center(self):
        return self.translation

    def matrix(self):
        """4x4 homogeneous camera-to-world matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def with_size(self, width, height):
        return EquirectCamera(width, height, self.rotation, self.translation)

    def world_to_camera(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation

    def camera_to_world(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def ray_directions(self):
        """Unit camera-frame directions for every pixel center, shape (H, W, 3)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        return _directions(self.width, self.height, uu, vv)

    def latitudes(self):
        v = np.arange(self.height, dtype=np.float64)
        return np.pi / 2 - np.pi * (v + 0.5) / self.height


def _directions(W, H, u, v):
    lon = 2.0 * np.pi * (u + 0.5) / W - np.pi
    lat = np.pi / 2 - np.pi * (v + 0.5) / H
    cl = np.cos(lat)
    return np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=-1)


def _check_pixel(cam, u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if (
        not np.all(np.isfinite(u)) or not np.all(np.isfinite(v))
        or np.any(u < -0.5) or np.any(u > cam.width - 0.5)
        or np.any(v < -0.5) or np.any(v > cam.height - 0.5)
    ):
        raise DomainError("pixel coordinate outside the panorama")
    return u, v


def pixel_directions(cam, u, v):
    """Vectorised pixel_to_ray: camera-frame unit directions for arrays of pixels.

    Accepts the closed domain ``[-0.5, W - 0.5] x [-0.5, H - 0.5]`` so the
    pole and seam limits are reachable.
    """
    u, v = _check_pixel(cam, u, v)
    return _directions(cam.width, cam.height, u, v)


def pixel_to_ray(cam, u, v):
    """Camera-frame ray through subpixel ``(u, v)``; origin at the camera center."""
    d = pixel_directions(cam, float(u), float(v))
    return Ray(np.zeros(3), d / np.linalg.norm(d))


def direction_to_pixel(cam, dirs):
    """Vectorised ray_to_pixel for (..., 3) unit camera-frame directions."""
    dirs = np.asarray(dirs, dtype=np.float64)
    norm = np.linalg.norm(dirs, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise DomainError("direction must be a unit vector")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    lat = np.arcsin(np.clip(y, -1.0, 1.0))
    lon = np.arctan2(x, z)
    u_cont = np.mod((lon + np.pi) / (2.0 * np.pi) * cam.width, cam.width)
    # exact poles: longitude undefined, pinned to u = 0
    u_cont = np.where(np.abs(y) >= 1.0, 0.5, u_cont)
    v_cont = (np.pi / 2 - lat) / np.pi * cam.height
    return u_cont - 0.5, v_cont - 0.5


def ray_to_pixel(cam, direction):
    """Subpixel ``(u, v)`` hit by a camera-frame unit direction.

    The seam (longitude +-pi) wraps to continuous coordinate 0, i.e.
    ``u = -0.5``. Exact pole directions return ``u = 0`` by convention.
    """
    u, v = direction_to_pixel(cam, np.asarray(direction, dtype=np.float64).reshape(3))
    return float(u), float(v)


def unproject(cam, u, v, depth):
    """World point at Euclidean ``depth`` along the ray through ``(u, v)``."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise DomainError("depth must be positive")
    d = pixel_directions(cam, u, v)
    return cam.camera_to_world(d * depth[..., None])


def look_at_rotation(forward, up=(0.0, 1.0, 0.0)):
    """Camera-to-world rotation whose +z column is ``forward``."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(up, f)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross([1.0, 0.0, 0.0], f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return np.stack([x, y, f], axis=1)


# pose file: one camera per line, "W H r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"

def parse_pose_line(line, lineno=0):
    fields = line.split()
    if len(fields) != 14:
        raise DomainError(f"pose line {lineno}: expected 14 fields, got {len(fields)}")
    try:
        W, H = int(fields[0]), int(fields[1])
        vals = [float(x) for x in fields[2:]]
    except ValueError as exc:
        raise DomainError(f"pose line {lineno}: {exc}") from None
    R = np.array(vals[:9]).reshape(3, 3)
    t = np.array(vals[9:])
    try:
        return EquirectCamera(W, H, R, t)
    except DomainError as exc:
        raise DomainError(f"pose line {lineno}: {exc}") from None


def read_poses(path):
    cams = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                cams.append(parse_pose_line(line, lineno))
    return cams


def format_pose(cam):
    vals = [cam.width, cam.height, *cam.rotation.reshape(-1), *cam.translation]
    return " ".join(repr(float(x)) if i >= 2 else str(x) for i, x in enumerate(vals))


def write_poses(path, cams):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# W H r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n")
        for cam in cams:
            fh.write(format_pose(cam) + "\n")
