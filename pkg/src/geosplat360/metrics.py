"""Image, depth and point-cloud evaluation metrics."""

from __future__ import annotations

import json

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from ._validation import DomainError, check_mask

PSNR_CAP = 99.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"image sizes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DomainError("empty image")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical images give 99."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(a, b, window=11, k1=0.01, k2=0.03, sigma=1.5, data_range=1.0):
    """Gaussian-windowed SSIM averaged over pixels and channels.

    The window is a truncated ``window x window`` Gaussian with standard
    deviation ``sigma``; only positions where it fits inside the image are
    averaged.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    window = int(window)
    if window < 1 or window % 2 == 0:
        raise DomainError("window must be a positive odd integer")
    H, W = a.shape[:2]
    if H < window or W < window:
        raise DomainError(f"image {H}x{W} is smaller than the {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    truncate = (window // 2) / sigma
    half = window // 2

    def blur(x):
        out = gaussian_filter(x, sigma=(sigma, sigma, 0), truncate=truncate, mode="constant")
        return out[half:H - half, half:W - half]

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def depth_metrics(pred, gt, mask=None):
    """abs_diff, abs_rel, rmse and delta_1_25_pct over valid pixels.

    Pixels whose ground truth is not positive are dropped and counted in
    ``excluded``.
    """
    p, g = _pair(pred, gt)
    m = check_mask(mask, g.shape)
    bad = m & ~(g > 0)
    m = m & (g > 0)
    if not m.any():
        raise DomainError("no valid depth pixels")
    p, g = p[m], g[m]
    err = p - g
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(p > 0, ratio, np.inf)
    return {
        "abs_diff": float(np.mean(np.abs(err))),
        "abs_rel": float(np.mean(np.abs(err) / g)),
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "delta_1_25_pct": float(100.0 * np.mean(ratio < 1.25)),
        "excluded": int(bad.sum()),
    }


def _points(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise DomainError(f"{name} must be an (N, 3) point array")
    if len(x) == 0:
        raise DomainError(f"{name} point set is empty")
    return x


def cloud_metrics(pred, gt):
    """Mean nearest-neighbor distances; chamfer is accuracy + completeness."""
    pred = _points(pred, "pred")
    gt = _points(gt, "gt")
    acc = float(np.mean(cKDTree(gt).query(pred)[0]))
    comp = float(np.mean(cKDTree(pred).query(gt)[0]))
    return {"accuracy_m": acc, "completeness_m": comp, "chamfer_m": acc + comp}


def to_json(metrics):
    return json.dumps(metrics, sort_keys=True)


def format_table(metrics):
    """Aligned two-column text table."""
    width = max(len(k) for k in metrics)
    lines = []
    for k, v in metrics.items():
        if isinstance(v, float):
            lines.append(f"{k:<{width}}  {v:.6f}")
        else:
            lines.append(f"{k:<{width}}  {v}")
    return "\n".join(lines)
