"""Dataset catalog, fold plans, raster I/O and the synthetic lesion generator."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
MASK_TAG = "_segmentation"


class ImageDecodeError(ValueError):
    def __init__(self, path, reason=""):
        super().__init__(f"cannot decode image {path}" + (f": {reason}" if reason else ""))
        self.path = str(path)


# --------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: Path
    mask_path: Optional[Path] = None


@dataclass(frozen=True)
class DatasetCatalog:
    samples: tuple = ()

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self):
        return [s.id for s in self.samples]

    def with_masks(self):
        return DatasetCatalog(tuple(s for s in self.samples if s.mask_path is not None))


def _rasters(d: Path):
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def scan_catalog(root) -> DatasetCatalog:
    """Pair images with ``<id>_segmentation`` masks.

    Accepts either ``root/images`` + ``root/masks`` or a flat directory
    holding both. Samples come back sorted by id.
    """
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(f"dataset root {root} is not a readable directory")
    img_dir, mask_dir = root / "images", root / "masks"
    if img_dir.is_dir():
        files = _rasters(img_dir) + (_rasters(mask_dir) if mask_dir.is_dir() else [])
    else:
        files = _rasters(root)

    images, masks = {}, {}
    for p in files:
        if p.stem.endswith(MASK_TAG):
            masks.setdefault(p.stem[: -len(MASK_TAG)], p)
        elif p.stem in images:
            warnings.warn(f"duplicate image id {p.stem!r}; keeping {images[p.stem].name}")
        else:
            images[p.stem] = p
    for mid in sorted(set(masks) - set(images)):
        warnings.warn(f"mask {masks[mid].name} has no matching image")
    samples = tuple(Sample(i, images[i], masks.get(i)) for i in sorted(images))
    return DatasetCatalog(samples)


# --------------------------------------------------------------------------
# raster I/O


def load_image(path) -> np.ndarray:
    """Decode an 8-bit raster as an (H, W, 3) float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(path, str(exc)) from exc
    return arr / 255.0


def load_mask(path) -> np.ndarray:
    """Decode a mask; gray levels >= 128 count as lesion."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(path, str(exc)) from exc
    return arr >= 128


def save_mask(mask, path) -> None:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    Image.fromarray(np.where(m, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def save_image(img, path) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    folds: tuple  # of (train_indices, validation_indices), each a sorted tuple

    def __len__(self):
        return len(self.folds)


def validation_size(n, train_frac):
    raw = n * (1.0 - train_frac)
    if raw < 1.0 - 1e-9:
        raise ValueError(f"n={n}, train_frac={train_frac} leaves an empty validation set")
    return max(1, math.floor(raw + 0.5 + 1e-9))


def make_folds(n, k=5, train_frac=0.9, seed=0) -> FoldPlan:
    """``k`` independent random train/validation splits of ``range(n)``."""
    if not (n >= k >= 1):
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    n_val = validation_size(n, train_frac)
    if n_val >= n:
        raise ValueError("validation split would leave no training data")
    rng = np.random.default_rng(seed)
    folds = []
    for _ in range(k):
        perm = rng.permutation(n)
        val = tuple(sorted(int(i) for i in perm[:n_val]))
        train = tuple(sorted(int(i) for i in perm[n_val:]))
        folds.append((train, val))
    return FoldPlan(int(seed), tuple(folds))


def format_fold_plan(plan: FoldPlan, ids) -> str:
    lines = [f"seed={plan.seed}"]
    lines += [",".join(ids[i] for i in val) for _, val in plan.folds]
    return "\n".join(lines) + "\n"


def parse_fold_plan(text: str, ids) -> FoldPlan:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("seed="):
        raise ValueError("fold plan must start with 'seed=<int>'")
    seed = int(lines[0][5:])
    index = {s: i for i, s in enumerate(ids)}
    folds = []
    for line in lines[1:]:
        val = tuple(sorted(index[s] for s in line.split(",") if s))
        vs = set(val)
        folds.append((tuple(i for i in range(len(ids)) if i not in vs), val))
    return FoldPlan(seed, tuple(folds))


# --------------------------------------------------------------------------
# synthetic lesions


@dataclass(frozen=True)
class SynthSpec:
    width: int = 200
    height: int = 160
    center: Optional[tuple] = None  # (x, y); defaults to the canvas center
    axes: tuple = (50.0, 35.0)  # semi-axes (a, b) in pixels
    rotation: float = 0.0  # radians
    lesion_color: tuple = (0.35, 0.22, 0.15)
    skin_color: tuple = (0.85, 0.66, 0.56)
    noise_sigma: float = 0.01
    hair_count: int = 0
    hair_width: float = 2.0
    vignette: bool = False
    seed: int = 0

    @property
    def cxy(self):
        if self.center is not None:
            return float(self.center[0]), float(self.center[1])
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0


@dataclass
class SynthSample:
    image: np.ndarray
    mask: np.ndarray
    hair_mask: np.ndarray
    hairless: np.ndarray = field(repr=False)  # same noise, no hair strokes


HAIR_COLOR = np.array([0.07, 0.05, 0.04])


def ellipse_mask(width, height, center, axes, rotation):
    cx, cy = center
    a, b = axes
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = x - cx, y - cy
    c, s = math.cos(rotation), math.sin(rotation)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _check_spec(spec: SynthSpec):
    if spec.width < 1 or spec.height < 1:
        raise ValueError("canvas must be at least 1x1")
    a, b = spec.axes
    if a <= 0 or b <= 0:
        raise ValueError("ellipse axes must be positive")
    for col in (spec.lesion_color, spec.skin_color):
        if len(col) != 3 or min(col) < 0 or max(col) > 1:
            raise ValueError(f"color {col} outside [0,1]^3")
    cx, cy = spec.cxy
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    ex = math.hypot(a * c, b * s)
    ey = math.hypot(a * s, b * c)
    if cx - ex < 0 or cx + ex > spec.width - 1 or cy - ey < 0 or cy + ey > spec.height - 1:
        raise ValueError("ellipse exceeds the canvas")


def _hair_strokes(spec: SynthSpec, rng):
    """Rasterize ``hair_count`` random quadratic Bezier strokes."""
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=bool)
    r = spec.hair_width / 2.0
    reach = int(math.ceil(r))
    offs = [(oy, ox) for oy in range(-reach, reach + 1) for ox in range(-reach, reach + 1)]
    for _ in range(spec.hair_count):
        p0 = rng.uniform([0, 0], [w - 1, h - 1])
        ang = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(0.4, 0.9) * max(w, h)
        p2 = p0 + length * np.array([math.cos(ang), math.sin(ang)])
        bend = rng.normal(0.0, 0.15 * length, size=2)
        p1 = (p0 + p2) / 2.0 + bend
        steps = int(4 * length) + 2
        t = np.linspace(0.0, 1.0, steps)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        px, py = pts[:, 0], pts[:, 1]
        for oy, ox in offs:
            xi = np.round(px).astype(int) + ox
            yi = np.round(py).astype(int) + oy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            near = (xi - px) ** 2 + (yi - py) ** 2 <= r * r + 1e-9
            sel = inside & near
            mask[yi[sel], xi[sel]] = True
    return mask


def vignette_factor(width, height):
    """1 inside the inscribed circle, falling linearly to 0 at the half-diagonal."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    d = np.hypot(x - (width - 1) / 2.0, y - (height - 1) / 2.0)
    r_in = min(width, height) / 2.0
    r_out = math.hypot(width - 1, height - 1) / 2.0
    if r_out <= r_in:
        return np.ones((height, width))
    return np.clip((r_out - d) / (r_out - r_in), 0.0, 1.0)


def render_synth(spec: SynthSpec) -> SynthSample:
    """Render a lesion image together with its truth and hair masks.

    Noise and hair use independent streams derived from ``spec.seed``, so
    re-rendering with ``hair_count=0`` reproduces the same noise field.
    """
    _check_spec(spec)
    noise_ss, hair_ss = np.random.SeedSequence(spec.seed).spawn(2)
    h, w = spec.height, spec.width
    mask = ellipse_mask(w, h, spec.cxy, spec.axes, spec.rotation)
    base = np.where(mask[..., None], np.asarray(spec.lesion_color, float),
                    np.asarray(spec.skin_color, float))
    hair = _hair_strokes(spec, np.random.default_rng(hair_ss)) if spec.hair_count > 0 \
        else np.zeros((h, w), dtype=bool)
    haired = np.where(hair[..., None], HAIR_COLOR, base)
    noise = np.random.default_rng(noise_ss).normal(0.0, 1.0, size=(h, w, 3)) * spec.noise_sigma

    def finish(img):
        if spec.vignette:
            img = img * vignette_factor(w, h)[..., None]
        return np.clip(img + noise, 0.0, 1.0)

    return SynthSample(finish(haired), mask, hair, finish(base))


def synth_lesion(spec: SynthSpec):
    s = render_synth(spec)
    return s.image, s.mask


def random_spec(seed, width=200, height=160, **overrides) -> SynthSpec:
    """Seeded lesion geometry and colors that always fit on the canvas."""
    rng = np.random.default_rng([seed, 7919])
    short = min(width, height)
    a = rng.uniform(0.22, 0.32) * short
    b = a * rng.uniform(0.65, 0.95)
    rot = rng.uniform(0, math.pi)
    ext = a + 2
    cx = rng.uniform(ext, width - 1 - ext)
    cy = rng.uniform(ext, height - 1 - ext)
    lesion = tuple(float(v) for v in np.array([0.36, 0.23, 0.16]) * rng.uniform(0.75, 1.15))
    skin = tuple(float(v) for v in np.clip(np.array([0.86, 0.67, 0.57]) * rng.uniform(0.92, 1.08), 0, 1))
    spec = SynthSpec(width=width, height=height, center=(cx, cy), axes=(a, b), rotation=rot,
                     lesion_color=lesion, skin_color=skin, seed=int(seed))
    return replace(spec, **overrides)
