from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dermseg.colorspace import luminance
from dermseg.dataio import random_spec, render_synth
from dermseg.morphology import (
    DegenerateImageError,
    StructuringElement,
    black_tophat,
    connected_components,
    dark_border_mask,
    disk,
    fill_holes,
    largest_component,
    morph,
    remove_hair,
)
from dermseg.posteval import jaccard


def window_op(p, fp, fn):
    """Brute-force windowed min/max with edge replication."""
    r = fp.shape[0] // 2
    padded = np.pad(p, r, mode="edge")
    out = np.empty_like(p)
    offs = [(dy - r, dx - r) for dy, dx in zip(*np.nonzero(fp))]
    for y in range(p.shape[0]):
        for x in range(p.shape[1]):
            out[y, x] = fn([padded[y + r + dy, x + r + dx] for dy, dx in offs])
    return out


def bfs_components(m):
    """Count 4-connected components with an explicit queue."""
    seen = np.zeros_like(m, dtype=bool)
    sizes = []
    h, w = m.shape
    for sy in range(h):
        for sx in range(w):
            if not m[sy, sx] or seen[sy, sx]:
                continue
            q = deque([(sy, sx)])
            seen[sy, sx] = True
            n = 0
            while q:
                y, x = q.popleft()
                n += 1
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and m[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        q.append((ny, nx))
            sizes.append(n)
    return sizes


def border_reachable_fill(m):
    """Hole filling by flooding the complement from the border."""
    h, w = m.shape
    outside = np.zeros_like(m, dtype=bool)
    q = deque((y, x) for y in range(h) for x in range(w)
              if (y in (0, h - 1) or x in (0, w - 1)) and not m[y, x])
    for y, x in q:
        outside[y, x] = True
    while q:
        y, x = q.popleft()
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and not m[ny, nx] and not outside[ny, nx]:
                outside[ny, nx] = True
                q.append((ny, nx))
    return ~outside


# -- morph ------------------------------------------------------------------


def test_disk_footprint():
    fp = disk(1).footprint()
    assert fp.sum() == 5 and fp[1, 1] and not fp[0, 0]
    assert disk(7).footprint().sum() == sum(1 for y in range(-7, 8) for x in range(-7, 8) if x * x + y * y <= 49)
    with pytest.raises(ValueError):
        StructuringElement("disk", 0)


@pytest.mark.parametrize("op", ["erode", "dilate", "open", "close"])
def test_constant_plane_unchanged(op):
    p = np.full((9, 7), 0.37)
    assert np.array_equal(morph(op, p, disk(2)), p)


def test_single_pixel_dilation():
    p = np.zeros((7, 7))
    p[3, 3] = 1.0
    out = morph("dilate", p, disk(1))
    assert out.sum() == 5
    assert out[2, 3] == out[4, 3] == out[3, 2] == out[3, 4] == 1.0


@pytest.mark.parametrize("shape", ["disk", "square"])
def test_erode_dilate_match_bruteforce(shape):
    p = np.random.default_rng(0).random((11, 9))
    se = StructuringElement(shape, 2)
    fp = se.footprint()
    assert np.array_equal(morph("erode", p, se), window_op(p, fp, min))
    assert np.array_equal(morph("dilate", p, se), window_op(p, fp, max))


def test_close_matches_bruteforce():
    p = np.random.default_rng(1).random((10, 12))
    fp = disk(2).footprint()
    ref = window_op(window_op(p, fp, max), fp, min)
    assert np.array_equal(morph("close", p, disk(2)), ref)


def test_close_idempotent_100_planes():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p = rng.random((16, 16))
        c = morph("close", p, disk(2))
        assert np.array_equal(morph("close", c, disk(2)), c)


def test_unknown_op():
    with pytest.raises(ValueError):
        morph("thin", np.zeros((3, 3)), disk(1))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 10), elements=st.floats(0, 1)), st.integers(1, 3))
def test_erode_le_p_le_dilate(p, r):
    se = disk(r)
    assert np.all(morph("erode", p, se) <= p)
    assert np.all(p <= morph("dilate", p, se))
    assert np.all(black_tophat(p, se) >= 0)


# -- black top-hat ------------------------------------------------------------


def test_tophat_thin_line():
    p = np.full((21, 21), 0.8)
    p[:, 10] = 0.2
    th = black_tophat(p, disk(3))
    np.testing.assert_allclose(th[:, 10], 0.6, atol=1e-12)
    assert np.all(np.delete(th, 10, axis=1) == 0)


def test_tophat_wide_blob_interior_zero():
    p = np.full((40, 40), 0.8)
    p[10:30, 10:30] = 0.2
    th = black_tophat(p, disk(3))
    assert np.all(th[12:28, 12:28] == 0)


def test_tophat_constant():
    assert not black_tophat(np.full((6, 6), 0.5), disk(3)).any()


# -- hair removal -------------------------------------------------------------


def test_hair_free_images_have_sparse_mask():
    for seed in range(10):
        img = render_synth(random_spec(seed)).image
        _, mask = remove_hair(img)
        assert mask.mean() < 0.01


def test_hair_detection_and_cleanup():
    js, better = [], 0
    for seed in range(10):
        s = render_synth(random_spec(seed, hair_count=10))
        clean, mask = remove_hair(s.image)
        js.append(jaccard(mask, s.hair_mask))
        mse_clean = np.mean((clean - s.hairless) ** 2)
        mse_raw = np.mean((s.image - s.hairless) ** 2)
        better += mse_clean < mse_raw
    assert np.mean(js) >= 0.4
    assert better == 10


def test_constant_image_identity():
    img = np.full((30, 30, 3), 0.6)
    clean, mask = remove_hair(img)
    assert np.array_equal(clean, img) and not mask.any()


def test_degenerate_hair_mask():
    # a dense grid of 1-px dark lines is almost entirely "hair"
    img = np.full((40, 40, 3), 0.9)
    img[::3] = 0.05
    img[:, ::3] = 0.05
    with pytest.raises(DegenerateImageError):
        remove_hair(img)


def test_inpainting_uses_only_non_hair_pixels():
    img = np.full((25, 25, 3), 0.7)
    img[:, 12] = 0.1
    clean, mask = remove_hair(img)
    assert mask[:, 12].all()
    np.testing.assert_allclose(clean, 0.7)


# -- dark border --------------------------------------------------------------


def test_vignette_corners_flagged():
    for seed in range(5):
        spec = random_spec(seed, vignette=True, center=None)
        s = render_synth(spec)
        m = dark_border_mask(s.image)
        assert m[0, 0] and m[0, -1] and m[-1, 0] and m[-1, -1]
        assert not (m & s.mask).any()


def test_no_dark_pixels():
    assert not dark_border_mask(np.full((10, 10, 3), 0.5)).any()


def test_dark_disk_not_touching_border():
    img = np.full((30, 30, 3), 0.8)
    y, x = np.mgrid[:30, :30]
    img[(y - 15) ** 2 + (x - 15) ** 2 <= 36] = 0.02
    assert not dark_border_mask(img).any()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 12, 3), elements=st.floats(0, 0.3)))
def test_dark_border_only_dark_pixels(img):
    m = dark_border_mask(img)
    assert np.all(luminance(img)[m] < 0.1)


# -- holes and components ------------------------------------------------------


def test_fill_ring():
    m = np.zeros((7, 7), bool)
    m[1:6, 1:6] = True
    m[2:5, 2:5] = False
    out = fill_holes(m)
    assert out[1:6, 1:6].all() and out.sum() == 25


def test_fill_all_true_and_c_shape():
    assert fill_holes(np.ones((4, 4), bool)).all()
    c = np.zeros((7, 7), bool)
    c[1:6, 1:6] = True
    c[2:5, 2:6] = False  # opening reaches the border column
    c[2:5, 6] = False
    assert np.array_equal(fill_holes(c), c)


def test_fill_diagonal_leak_is_a_hole():
    # with 4-connectivity the centre cannot escape through the diagonal gaps
    m = np.array([[0, 1, 0],
                  [1, 0, 1],
                  [0, 1, 0]], bool)
    assert fill_holes(m)[1, 1]


@settings(max_examples=60, deadline=None)
@given(arrays(bool, (9, 9)))
def test_fill_holes_properties(m):
    f = fill_holes(m)
    assert np.array_equal(f, border_reachable_fill(m))
    assert np.all(f >= m)
    assert np.array_equal(fill_holes(f), f)


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (8, 8)), arrays(bool, (8, 8)))
def test_fill_holes_monotone(a, b):
    assert np.all(fill_holes(a) <= fill_holes(a | b))


def test_checkerboard_components():
    cb = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(bool)
    assert connected_components(cb)[1] == 8 == len(bfs_components(cb))


def test_largest_component():
    m = np.zeros((10, 20), bool)
    m[0:2, 0:5] = True      # area 10
    m[5:9, 10:15] = True    # area 20
    out = largest_component(m)
    assert out.sum() == 20 and out[5, 10]
    assert not largest_component(np.zeros((4, 4), bool)).any()
    assert connected_components(np.zeros((4, 4), bool))[1] == 0


def test_largest_component_tie_goes_to_first_label():
    m = np.zeros((5, 9), bool)
    m[1:3, 6:8] = True
    m[1:3, 1:3] = True
    out = largest_component(m)
    assert out[1, 1] and not out[1, 6]


@settings(max_examples=60, deadline=None)
@given(arrays(bool, (7, 9)))
def test_components_match_bfs(m):
    labels, n = connected_components(m)
    sizes = bfs_components(m)
    assert n == len(sizes)
    assert sorted(np.bincount(labels.ravel())[1:].tolist()) == sorted(sizes)
    assert set(np.unique(labels)) <= set(range(n + 1))
    if n:
        assert largest_component(m).sum() == max(sizes)
