"""Per-pixel panorama planes and their file formats (PFM, PNG)."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from ._validation import DomainError

INVALID_DEPTH = -1.0


@dataclass
class PanoramaBuffer:
    """Named H x W planes. Invalid depth is ``-1``; invalid normals are zero vectors.

    Normals are expressed in the camera frame of the view they belong to.
    """

    rgb: np.ndarray = None
    depth: np.ndarray = None
    alpha: np.ndarray = None
    normal: np.ndarray = None
    confidence: np.ndarray = None
    mask: np.ndarray = None
    extras: dict = field(default_factory=dict)

    @property
    def shape(self):
        for plane in (self.depth, self.rgb, self.alpha, self.normal, self.confidence):
            if plane is not None:
                return plane.shape[:2]
        raise DomainError("empty panorama buffer")

    @property
    def height(self):
        return self.shape[0]

    @property
    def width(self):
        return self.shape[1]

    def depth_valid(self):
        if self.depth is None:
            raise DomainError("buffer has no depth plane")
        return self.depth > 0

    def normal_valid(self):
        if self.normal is None:
            raise DomainError("buffer has no normal plane")
        return np.linalg.norm(self.normal, axis=-1) > 0.5

    def copy(self):
        return replace(self, **{k: (None if getattr(self, k) is None else np.array(getattr(self, k)))
                                for k in ("rgb", "depth", "alpha", "normal", "confidence", "mask")},
                       extras=dict(self.extras))


# --- PFM -----------------------------------------------------------------

def write_pfm(path, image, scale=-1.0):
    """Write a 1- or 3-channel float image. Negative scale marks little-endian."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        tag = "Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        tag = "PF"
    else:
        raise DomainError(f"PFM supports 1 or 3 channels, got shape {image.shape}")
    if scale == 0:
        raise DomainError("PFM scale must be nonzero")
    little = scale < 0
    H, W = image.shape[:2]
    # PFM rows run bottom-to-top
    data = np.flipud(image).astype("<f4" if little else ">f4")
    with open(path, "wb") as fh:
        fh.write(f"{tag}\n{W} {H}\n{scale:.6f}\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_token(fh):
    token = b""
    while True:
        c = fh.read(1)
        if not c:
            raise DomainError("unexpected end of PFM header")
        if c.isspace():
            if token:
                return token.decode("ascii")
            continue
        token += c


def read_pfm(path):
    with open(path, "rb") as fh:
        tag = _read_token(fh)
        if tag == "PF":
            channels = 3
        elif tag == "Pf":
            channels = 1
        else:
            raise DomainError(f"{path}: not a PFM file (tag {tag!r})")
        W = int(_read_token(fh))
        H = int(_read_token(fh))
        scale = float(_read_token(fh))
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    expected = W * H * channels
    if data.size != expected:
        raise DomainError(f"{path}: expected {expected} floats, found {data.size}")
    shape = (H, W, channels) if channels == 3 else (H, W)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm_stack(path, planes):
    """Multi-channel PFM stack: consecutive 1-channel PFM images in one file."""
    with open(path, "wb") as fh:
        for plane in planes:
            plane = np.asarray(plane, dtype=np.float32)
            if plane.ndim != 2:
                raise DomainError("stack planes must be 2-D")
            H, W = plane.shape
            fh.write(f"Pf\n{W} {H}\n-1.000000\n".encode("ascii"))
            fh.write(np.flipud(plane).astype("<f4").tobytes())


def read_pfm_stack(path):
    planes = []
    with open(path, "rb") as fh:
        while True:
            c = fh.peek(1)[:1] if hasattr(fh, "peek") else b""
            if not c:
                break
            tag = _read_token(fh)
            if tag != "Pf":
                raise DomainError(f"{path}: stack entries must be single-channel PFM")
            W = int(_read_token(fh))
            H = int(_read_token(fh))
            scale = float(_read_token(fh))
            dtype = "<f4" if scale < 0 else ">f4"
            data = np.frombuffer(fh.read(W * H * 4), dtype=dtype)
            if data.size != W * H:
                raise DomainError(f"{path}: truncated stack entry")
            planes.append(np.flipud(data.reshape(H, W)).astype(np.float64))
    return planes


# --- PNG -----------------------------------------------------------------

def write_png(path, rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    img = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_image(path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        return read_pfm(path)
    return read_png(path)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
