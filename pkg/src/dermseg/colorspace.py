"""Color transforms and U-Net input assembly.

Images are float arrays of shape (H, W, 3) with values in [0, 1]; planes
are (H, W) float arrays. HSI hue is stored as angle / 2pi in [0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

RAW_1A = "1A"
ENHANCED_1B = "1B"


class InputMode(str, Enum):
    RAW_1A = RAW_1A
    ENHANCED_1B = ENHANCED_1B


TWO_PI = 2.0 * np.pi


def rgb_to_hsi(img):
    img = np.asarray(img, dtype=np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    i = (r + g + b) / 3.0
    mn = np.minimum(np.minimum(r, g), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(i > 0, 1.0 - mn / np.where(i > 0, i, 1.0), 0.0)
        num = 0.5 * ((r - g) + (r - b))
        den = np.sqrt((r - g) ** 2 + (r - b) * (g - b))
        cos_t = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    theta = np.arccos(np.clip(cos_t, -1.0, 1.0))
    h = np.where(b > g, TWO_PI - theta, theta) / TWO_PI
    s = np.clip(s, 0.0, 1.0)
    # exact gray pixels can leave s at a rounding residue
    gray = (r == g) & (g == b)
    s = np.where(gray, 0.0, s)
    h = np.where(s == 0, 0.0, h)
    h = np.where(h >= 1.0, 0.0, h)
    return np.stack([h, s, i], axis=-1)


def hsi_to_rgb(hsi):
    hsi = np.asarray(hsi, dtype=np.float64)
    h = hsi[..., 0] * TWO_PI
    s = hsi[..., 1]
    i = hsi[..., 2]
    third = TWO_PI / 3.0
    sector = np.clip((h // third).astype(int), 0, 2)
    hh = h - sector * third
    a = i * (1.0 - s)
    bmax = i * (1.0 + s * np.cos(hh) / np.cos(np.pi / 3.0 - hh))
    c = 3.0 * i - (a + bmax)
    # sector 0: b=a, r=bmax, g=c; sector 1: r=a, g=bmax, b=c; sector 2: g=a, b=bmax, r=c
    r = np.select([sector == 0, sector == 1], [bmax, a], c)
    g = np.select([sector == 0, sector == 1], [c, bmax], a)
    b = np.select([sector == 0, sector == 1], [a, c], bmax)
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def equalize_plane(p, bins=256):
    """Map each value to the inclusive normalized cumulative histogram of its bin."""
    p = np.asarray(p, dtype=np.float64)
    idx = np.clip((p * bins).astype(np.int64), 0, bins - 1)
    hist = np.bincount(idx.ravel(), minlength=bins)
    cdf = np.cumsum(hist) / p.size
    return cdf[idx]


def gaussian_plane(w, h, fwhm=125.0):
    """2-D Gaussian with peak 1 at ((w-1)/2, (h-1)/2), returned as an (h, w) plane."""
    if w < 1 or h < 1 or fwhm <= 0:
        raise ValueError("gaussian_plane needs w, h >= 1 and fwhm > 0")
    x = np.arange(w) - (w - 1) / 2.0
    y = np.arange(h) - (h - 1) / 2.0
    r2 = y[:, None] ** 2 + x[None, :] ** 2
    return np.exp(-4.0 * np.log(2.0) * r2 / fwhm ** 2)


def luminance(img):
    img = np.asarray(img, dtype=np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def scaled_size(w, h, target=250):
    """Size after scaling the larger side to ``target``; the other side rounds half up."""
    big = max(w, h)
    nw = (2 * w * target + big) // (2 * big)
    nh = (2 * h * target + big) // (2 * big)
    return max(int(nw), 1), max(int(nh), 1)


def _bilinear_axis(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(arr, out_h, out_w):
    """Bilinear resample of an (H, W) or (H, W, C) array with pixel-center alignment."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    if arr.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_nearest(arr, out_h, out_w):
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return arr[ys][:, xs]


def rescale_max_dim(img, target=250):
    if target < 1:
        raise ValueError("target must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    nw, nh = scaled_size(w, h, target)
    return np.clip(resize_bilinear(img, nh, nw), 0.0, 1.0)


def normalize_minmax(p):
    p = np.asarray(p, dtype=np.float64)
    lo, hi = p.min(), p.max()
    if hi <= lo:
        return np.zeros_like(p)
    return (p - lo) / (hi - lo)


def enhance_rgb(img):
    """Equalize the intensity channel in HSI and convert back; H and S are kept."""
    hsi = rgb_to_hsi(img)
    hsi[..., 2] = equalize_plane(hsi[..., 2])
    return hsi_to_rgb(hsi)


@dataclass(frozen=True)
class NetInput:
    """Network input tensor (C, N, N) plus the mapping back to image pixels.

    ``original`` and ``scaled`` are (w, h) pairs; ``content_offset`` is the
    (row, col) of the scaled image inside the square content canvas and
    ``output_box`` the (row0, col0, h, w) of the scaled image in the
    network's output map.
    """

    channels: np.ndarray
    geometry: object
    original: tuple
    scaled: tuple
    content_offset: tuple
    output_box: tuple

    def crop_output(self, out):
        r0, c0, h, w = self.output_box
        return out[..., r0:r0 + h, c0:c0 + w]


def place_on_canvas(scaled_hw, geometry):
    """Return (content_offset, input_offset, output_box) for a scaled image."""
    sh, sw = scaled_hw
    size = geometry.content_size
    if sh > size or sw > size:
        raise ValueError(f"scaled image {sw}x{sh} does not fit the {size}px content canvas")
    oy, ox = (size - sh) // 2, (size - sw) // 2
    iy, ix = geometry.pad_before + oy, geometry.pad_before + ox
    box = (geometry.crop_before + oy, geometry.crop_before + ox, sh, sw)
    return (oy, ox), (iy, ix), box


def assemble_input(img, mode, geometry, original=None, fwhm=125.0):
    """Build the 3-channel (1A) or 5-channel (1B) network input.

    ``img`` must already be rescaled so its larger side equals the
    geometry's content size. Channels 1-4 are padded with 1.0; the
    Gaussian channel is evaluated over the whole padded canvas.
    """
    mode = InputMode(mode)
    img = np.asarray(img, dtype=np.float64)
    sh, sw = img.shape[:2]
    if max(sh, sw) != geometry.content_size:
        raise ValueError(
            f"image {sw}x{sh} is not rescaled to the {geometry.content_size}px content size")
    (oy, ox), (iy, ix), box = place_on_canvas((sh, sw), geometry)
    n = geometry.input_size

    if mode is InputMode.RAW_1A:
        planes = [img[..., 0], img[..., 1], img[..., 2]]
    else:
        enhanced = enhance_rgb(img)
        intensity = normalize_minmax(img.mean(axis=-1))
        planes = [enhanced[..., 0], enhanced[..., 1], enhanced[..., 2], intensity]

    chans = np.ones((len(planes) + (mode is InputMode.ENHANCED_1B), n, n))
    for k, p in enumerate(planes):
        chans[k, iy:iy + sh, ix:ix + sw] = p
    if mode is InputMode.ENHANCED_1B:
        chans[-1] = gaussian_plane(n, n, fwhm)
    if original is None:
        original = (sw, sh)
    return NetInput(chans, geometry, tuple(original), (sw, sh), (oy, ox), box)
