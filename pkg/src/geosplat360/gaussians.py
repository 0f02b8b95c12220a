"""Gaussian primitives: covariance assembly, flattening and normals.

Quaternions are stored ``(w, x, y, z)``. ``quat_to_rotmat(q)`` returns the
matrix whose columns are the principal axes of the ellipsoid in world
frame, so ``cov = R diag(s**2) R^T`` and the eigenvector belonging to
``s[k]**2`` is ``R[:, k]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import DomainError

QUAT_TOL = 1e-6
FILE_MAGIC = "geosplat360"
FILE_VERSION = "v1"
RECORD_FIELDS = ("x", "y", "z", "s1", "s2", "s3", "qw", "qx", "qy", "qz", "alpha", "r", "g", "b")


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_rotmat(q):
    """Rotation matrix (..., 3, 3) of (..., 4) quaternions; inputs are normalised first."""
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    R = np.empty(w.shape + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q, dR):
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back to the raw quaternion.

    Includes the normalisation, so the result is orthogonal to ``q``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    G = np.asarray(dR, dtype=np.float64)
    g = lambda i, j: G[..., i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    radial = np.sum(dqn * qn, axis=-1, keepdims=True)
    return (dqn - radial * qn) / norm


def rotmat_to_quat(R):
    """Unit quaternion with ``w >= 0`` for a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        S = np.sqrt(tr + 1.0) * 2
        q = [0.25 * S, (R[2, 1] - R[1, 2]) / S, (R[0, 2] - R[2, 0]) / S, (R[1, 0] - R[0, 1]) / S]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        S = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / S, 0.25 * S, (R[0, 1] + R[1, 0]) / S, (R[0, 2] + R[2, 0]) / S]
    elif R[1, 1] > R[2, 2]:
        S = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / S, (R[0, 1] + R[1, 0]) / S, 0.25 * S, (R[1, 2] + R[2, 1]) / S]
    else:
        S = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / S, (R[0, 2] + R[2, 0]) / S, (R[1, 2] + R[2, 1]) / S, 0.25 * S]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def canonical_sign(v):
    """Flip ``v`` so its first nonzero component is positive."""
    v = np.asarray(v, dtype=np.float64)
    for c in v:
        if c != 0:
            return v if c > 0 else -v
    return v


def _check_quat(q):
    q = np.asarray(q, dtype=np.float64).reshape(4)
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise DomainError("quaternion must be unit length (normalise it first)")
    return q


@dataclass(frozen=True)
class GaussianPrimitive:
    center: np.ndarray
    scales: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.center, dtype=np.float64).reshape(3)
        s = np.asarray(self.scales, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        c = np.asarray(self.color, dtype=np.float64).reshape(-1)
        if np.any(~(s > 0)):
            raise DomainError("scales must be positive")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise DomainError("rotation quaternion must be unit length")
        if not 0.0 <= self.opacity <= 1.0:
            raise DomainError("opacity must lie in [0, 1]")
        if c.size < 3 or not np.all(np.isfinite(mu)):
            raise DomainError("invalid center or color")
        object.__setattr__(self, "center", mu)
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "color", c)

    @property
    def rotmat(self):
        return quat_to_rotmat(self.rotation)

    @property
    def covariance(self):
        return build_covariance(self.scales, self.rotation)


@dataclass(frozen=True)
class OrientedDisc:
    center: np.ndarray
    normal: np.ndarray
    radii: tuple
    tangents: np.ndarray = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise DomainError("disc normal must be a unit vector")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))


class GaussianScene:
    """Struct-of-arrays container for a set of Gaussians.

    The renderer, losses and optimizer all work on this layout; a
    :class:`GaussianPrimitive` list converts with :meth:`from_primitives`.
    """

    def __init__(self, means, scales, quats, opacities, colors):
        self.means = np.array(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.array(scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.array(quats, dtype=np.float64).reshape(n, 4)
        self.opacities = np.array(opacities, dtype=np.float64).reshape(n)
        self.colors = np.array(colors, dtype=np.float64).reshape(n, 3)

    def __len__(self):
        return len(self.means)

    def __repr__(self):
        return f"GaussianScene(n={len(self)})"

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_primitives(cls, prims):
        prims = list(prims)
        if not prims:
            return cls.empty()
        return cls(
            [g.center for g in prims],
            [g.scales for g in prims],
            [g.rotation for g in prims],
            [g.opacity for g in prims],
            [g.color[:3] for g in prims],
        )

    def to_primitives(self):
        return [
            GaussianPrimitive(self.means[i], self.scales[i], normalize_quat(self.quats[i]),
                              float(np.clip(self.opacities[i], 0, 1)), self.colors[i])
            for i in range(len(self))
        ]

    def copy(self):
        return GaussianScene(self.means, self.scales, self.quats, self.opacities, self.colors)

    def subset(self, idx):
        return GaussianScene(self.means[idx], self.scales[idx], self.quats[idx],
                             self.opacities[idx], self.colors[idx])

    def validate(self):
        if np.any(~(self.scales > 0)):
            raise DomainError("scales must be positive")
        if len(self) and np.abs(np.linalg.norm(self.quats, axis=1) - 1).max() > QUAT_TOL:
            raise DomainError("quaternions must be unit length")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise DomainError("opacities must lie in [0, 1]")
        for arr in (self.means, self.colors):
            if not np.all(np.isfinite(arr)):
                raise DomainError("non-finite Gaussian parameters")
        return self

    def rotmats(self):
        return quat_to_rotmat(self.quats)

    def normal_axes(self):
        """Index of the smallest scale per Gaussian (ties -> lowest index)."""
        return np.argmin(self.scales, axis=1)

    def normals(self):
        R = self.rotmats()
        idx = self.normal_axes()
        n = R[np.arange(len(self)), :, idx]
        return np.array([canonical_sign(v) for v in n]).reshape(-1, 3)

    def pack(self):
        return np.concatenate([self.means, self.scales, self.quats,
                               self.opacities[:, None], self.colors], axis=1)

    @classmethod
    def unpack(cls, records):
        records = np.asarray(records, dtype=np.float64).reshape(-1, 14)
        return cls(records[:, 0:3], records[:, 3:6], records[:, 6:10], records[:, 10], records[:, 11:14])


def as_scene(scene):
    if isinstance(scene, GaussianScene):
        return scene
    if isinstance(scene, GaussianPrimitive):
        return GaussianScene.from_primitives([scene])
    return GaussianScene.from_primitives(scene)


def build_covariance(s, q):
    """``R diag(s^2) R^T`` for positive scales ``s`` and a unit quaternion ``q``."""
    s = np.asarray(s, dtype=np.float64).reshape(3)
    if np.any(~(s > 0)):
        raise DomainError("scales must be positive")
    R = quat_to_rotmat(_check_quat(q))
    cov = (R * s**2) @ R.T
    return 0.5 * (cov + cov.T)


def gaussian_normal(g, view_dir=None):
    """Unit normal along the smallest-scale axis of ``g``.

    Stored with its first nonzero component positive; when ``view_dir``
    (a viewing ray direction) is given the normal is flipped to face the
    viewer, i.e. ``n . view_dir <= 0``.
    """
    k = int(np.argmin(g.scales))
    n = canonical_sign(quat_to_rotmat(g.rotation)[:, k])
    if view_dir is not None and np.dot(n, view_dir) > 0:
        n = -n
    return n


def flatten(g):
    """Compress ``g`` along its smallest axis into an oriented disc."""
    R = quat_to_rotmat(g.rotation)
    k = int(np.argmin(g.scales))
    others = [i for i in range(3) if i != k]
    order = sorted(others, key=lambda i: (-g.scales[i], i))
    return OrientedDisc(
        center=g.center.copy(),
        normal=canonical_sign(R[:, k]),
        radii=(float(g.scales[order[0]]), float(g.scales[order[1]])),
        tangents=R[:, order].T.copy(),
    )


# Gaussian set file: header "geosplat360 v1 <count> <ascii|binary>" then one
# 14-float record per Gaussian (little-endian float32 in binary mode).

def write_gaussians(path, scene, mode="binary"):
    scene = as_scene(scene)
    if mode not in ("ascii", "binary"):
        raise DomainError(f"unknown Gaussian file mode {mode!r}")
    records = scene.pack()
    header = f"{FILE_MAGIC} {FILE_VERSION} {len(scene)} {mode}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        if mode == "binary":
            fh.write(records.astype("<f4").tobytes())
        else:
            for row in records:
                fh.write((" ".join(f"{v:.9g}" for v in row) + "\n").encode("ascii"))


def read_gaussians(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        if len(header) != 4 or header[0] != FILE_MAGIC or header[1] != FILE_VERSION:
            raise DomainError(f"{path}: not a {FILE_MAGIC} {FILE_VERSION} file")
        count, mode = int(header[2]), header[3]
        body = fh.read()
    if mode == "binary":
        expected = count * 14 * 4
        if len(body) != expected:
            raise DomainError(f"{path}: expected {expected} payload bytes, found {len(body)}")
        records = np.frombuffer(body, dtype="<f4").astype(np.float64)
    elif mode == "ascii":
        rows = [line.split() for line in body.decode("ascii").splitlines() if line.strip()]
        if len(rows) != count or any(len(r) != 14 for r in rows):
            raise DomainError(f"{path}: malformed ascii records")
        records = np.array(rows, dtype=np.float64)
    else:
        raise DomainError(f"{path}: unknown mode {mode!r}")
    scene = GaussianScene.unpack(records)
    # float32 storage loses quaternion norm precision
    scene.quats = normalize_quat(scene.quats) if len(scene) else scene.quats
    return scene
