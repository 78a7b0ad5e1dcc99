"""Patch-based image comparison metrics.

Images are float arrays in [0, 1], either (H, W) or (H, W, C). Patch
distances are summed over channels and patch pixels, then square-rooted.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W) or (H, W, C) image, got shape {img.shape}")
    return img


def _check_pair(generated, reference, patch_size):
    g, r = _as_hwc(generated), _as_hwc(reference)
    if g.shape != r.shape:
        raise ValueError(f"image sizes differ: {g.shape} vs {r.shape}")
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError("patch_size must be a positive odd integer")
    return g, r


def _box_sum(a, patch_size):
    """Sum of ``a`` over a centered square window, treating outside as zero."""
    h, w = a.shape
    k = patch_size // 2
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = a.cumsum(0).cumsum(1)
    r0 = np.clip(np.arange(h) - k, 0, h)
    r1 = np.clip(np.arange(h) + k + 1, 0, h)
    c0 = np.clip(np.arange(w) - k, 0, w)
    c1 = np.clip(np.arange(w) + k + 1, 0, w)
    return integral[r1][:, c1] - integral[r0][:, c1] - integral[r1][:, c0] + integral[r0][:, c0]


def exact_patch_distances(generated, reference, patch_size=7):
    """Per-pixel L2 distance between co-centered patches (clipped at borders)."""
    g, r = _check_pair(generated, reference, patch_size)
    sq = ((g - r) ** 2).sum(axis=2)
    return np.sqrt(np.maximum(_box_sum(sq, patch_size), 0.0))


def exact_patch_loss(generated, reference, patch_size=7):
    return float(exact_patch_distances(generated, reference, patch_size).mean())


def nearest_patch_distances(generated, reference, patch_size=7, search_window=24):
    """Per-pixel distance to the closest reference patch within the search window.

    The generated patch is clipped at the image border; reference pixels are
    read with edge clamping so every candidate compares the same pixel set.
    The zero offset is always a candidate, so this never exceeds the exact
    patch distance.
    """
    g, r = _check_pair(generated, reference, patch_size)
    if search_window < 0:
        raise ValueError("search_window must be >= 0")
    h, w, _ = g.shape
    rows, cols = np.arange(h), np.arange(w)
    best = np.full((h, w), np.inf)
    for dy in range(-search_window, search_window + 1):
        ri = np.clip(rows + dy, 0, h - 1)
        r_rows = r[ri]
        for dx in range(-search_window, search_window + 1):
            shifted = r_rows[:, np.clip(cols + dx, 0, w - 1)]
            sq = ((g - shifted) ** 2).sum(axis=2)
            np.minimum(best, _box_sum(sq, patch_size), out=best)
    return np.sqrt(np.maximum(best, 0.0))


def nearest_patch_loss(generated, reference, patch_size=7, search_window=24):
    return float(nearest_patch_distances(generated, reference, patch_size, search_window).mean())


def gradient_intensity(image):
    """Mean central-difference gradient magnitude over interior pixels and channels."""
    img = _as_hwc(image)
    if img.shape[0] < 3 or img.shape[1] < 3:
        return 0.0
    gx = (img[1:-1, 2:] - img[1:-1, :-2]) / 2.0
    gy = (img[2:, 1:-1] - img[:-2, 1:-1]) / 2.0
    return float(np.sqrt(gx ** 2 + gy ** 2).mean())


@dataclass
class MetricReport:
    exact_patch: float
    nearest_patch: float
    gradient_intensity_generated: float
    gradient_intensity_reference: float
    patch_size: int
    search_window: int

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    def table(self):
        rows = [
            ("exact patch loss", f"{self.exact_patch:.6f}"),
            ("nearest patch loss", f"{self.nearest_patch:.6f}"),
            ("gradient intensity (generated)", f"{self.gradient_intensity_generated:.6f}"),
            ("gradient intensity (reference)", f"{self.gradient_intensity_reference:.6f}"),
            ("patch size", str(self.patch_size)),
            ("search window", f"+/-{self.search_window}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def evaluate(generated, reference, patch_size=7, search_window=24):
    """Compute all metrics for a generated image against its reference."""
    return MetricReport(
        exact_patch=exact_patch_loss(generated, reference, patch_size),
        nearest_patch=nearest_patch_loss(generated, reference, patch_size, search_window),
        gradient_intensity_generated=gradient_intensity(generated),
        gradient_intensity_reference=gradient_intensity(reference),
        patch_size=patch_size,
        search_window=search_window,
    )
