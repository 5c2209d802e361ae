"""Gray/binary morphology plus hair and dark-border removal.

The windowed min/max and labeling primitives come from scipy.ndimage;
borders use edge replication and connectivity is 4-neighbour throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .colorspace import luminance

CROSS = ndi.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class StructuringElement:
    shape: str = "disk"
    radius: int = 1

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("structuring element radius must be >= 1")
        if self.shape not in ("disk", "square"):
            raise ValueError(f"unknown structuring element shape {self.shape!r}")

    def footprint(self):
        r = self.radius
        if self.shape == "square":
            return np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
        y, x = np.mgrid[-r:r + 1, -r:r + 1]
        return x * x + y * y <= r * r


def disk(radius):
    return StructuringElement("disk", radius)


def morph(op, p, se: StructuringElement):
    p = np.asarray(p, dtype=np.float64)
    fp = se.footprint()
    if op == "erode":
        return ndi.grey_erosion(p, footprint=fp, mode="nearest")
    if op == "dilate":
        return ndi.grey_dilation(p, footprint=fp, mode="nearest")
    if op == "open":
        return morph("dilate", morph("erode", p, se), se)
    if op == "close":
        return morph("erode", morph("dilate", p, se), se)
    raise ValueError(f"unknown morphological operation {op!r}")


def black_tophat(p, se: StructuringElement):
    """Closing minus the input: bright response on dark structures thinner than ``se``."""
    p = np.asarray(p, dtype=np.float64)
    return np.maximum(morph("close", p, se) - p, 0.0)


class DegenerateImageError(ValueError):
    pass


def _inpaint_median(img, hole):
    out = img.copy()
    h, w = hole.shape
    ys, xs = np.nonzero(hole)
    for y, x in zip(ys, xs):
        half = 2
        while True:
            y0, y1 = max(0, y - half), min(h, y + half + 1)
            x0, x1 = max(0, x - half), min(w, x + half + 1)
            keep = ~hole[y0:y1, x0:x1]
            if keep.sum() >= 5 or (y0 == 0 and x0 == 0 and y1 == h and x1 == w):
                break
            half += 1
        patch = img[y0:y1, x0:x1][keep]
        if len(patch):
            out[y, x] = np.median(patch, axis=0)
    return out


def hair_mask(img, se_radius=7, thresh=0.04):
    th = black_tophat(luminance(img), disk(se_radius))
    return ndi.binary_dilation(th > thresh, structure=disk(1).footprint())


def remove_hair(img, se_radius=7, thresh=0.04):
    """Detect thin dark strokes and replace them with the median of nearby skin.

    Returns ``(cleaned_image, hair_mask)``.
    """
    img = np.asarray(img, dtype=np.float64)
    mask = hair_mask(img, se_radius, thresh)
    if mask.mean() > 0.8:
        raise DegenerateImageError(f"hair mask covers {mask.mean():.0%} of the image")
    if not mask.any():
        return img.copy(), mask
    return _inpaint_median(img, mask), mask


def dark_border_mask(img, lum_thresh=0.1):
    """Dark 4-connected regions that touch the image border."""
    dark = luminance(img) < lum_thresh
    labels, n = ndi.label(dark, structure=CROSS)
    if n == 0:
        return np.zeros(dark.shape, dtype=bool)
    edge = np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    touching = np.unique(edge[edge > 0])
    return np.isin(labels, touching)


def fill_holes(m):
    return ndi.binary_fill_holes(np.asarray(m, dtype=bool), structure=CROSS)


def connected_components(m):
    """4-connected labels (0 = background, components numbered 1..n in raster order)."""
    labels, n = ndi.label(np.asarray(m, dtype=bool), structure=CROSS)
    return labels, n


def largest_component(m):
    labels, n = connected_components(m)
    if n == 0:
        return np.zeros(labels.shape, dtype=bool)
    areas = np.bincount(labels.ravel())
    areas[0] = -1
    return labels == int(np.argmax(areas))
