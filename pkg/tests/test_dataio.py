import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from PIL import Image

from dermseg.colorspace import luminance
from dermseg.dataio import (
    ImageDecodeError,
    SynthSpec,
    format_fold_plan,
    load_image,
    load_mask,
    make_folds,
    parse_fold_plan,
    random_spec,
    render_synth,
    save_image,
    save_mask,
    scan_catalog,
    synth_lesion,
)


def touch_png(path, value=0, mode="L", size=(4, 3)):
    Image.new(mode, size, value).save(path)


# -- catalog ----------------------------------------------------------------


def test_catalog_flat_pairing(tmp_path):
    Image.new("RGB", (4, 3)).save(tmp_path / "ISIC_0000001.jpg")
    touch_png(tmp_path / "ISIC_0000001_segmentation.png")
    cat = scan_catalog(tmp_path)
    assert len(cat) == 1
    s = cat.samples[0]
    assert s.id == "ISIC_0000001" and s.mask_path.name == "ISIC_0000001_segmentation.png"


def test_catalog_empty_and_unmasked(tmp_path):
    assert len(scan_catalog(tmp_path)) == 0
    Image.new("RGB", (4, 3)).save(tmp_path / "A.jpg")
    cat = scan_catalog(tmp_path)
    assert cat.ids == ["A"] and cat.samples[0].mask_path is None
    assert len(cat.with_masks()) == 0


def test_catalog_split_layout_sorted(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    for name in ("b", "a", "c"):
        touch_png(tmp_path / "images" / f"{name}.png", mode="RGB")
    touch_png(tmp_path / "masks" / "a_segmentation.png")
    touch_png(tmp_path / "masks" / "c_segmentation.png")
    cat = scan_catalog(tmp_path)
    assert cat.ids == ["a", "b", "c"]
    assert [s.mask_path is not None for s in cat] == [True, False, True]


def test_catalog_unpaired_mask_warns(tmp_path):
    touch_png(tmp_path / "x.png", mode="RGB")
    touch_png(tmp_path / "y_segmentation.png")
    with pytest.warns(UserWarning, match="no matching image"):
        cat = scan_catalog(tmp_path)
    assert cat.ids == ["x"]


def test_catalog_missing_root(tmp_path):
    with pytest.raises(NotADirectoryError):
        scan_catalog(tmp_path / "nope")


# -- raster I/O ---------------------------------------------------------------


def test_load_image_scaling(tmp_path):
    p = tmp_path / "px.png"
    Image.fromarray(np.array([[[255, 0, 128]]], np.uint8)).save(p)
    np.testing.assert_array_equal(load_image(p)[0, 0], [1.0, 0.0, 128 / 255])


def test_undecodable_carries_path(tmp_path):
    p = tmp_path / "broken.jpg"
    p.write_bytes(b"not an image")
    with pytest.raises(ImageDecodeError) as err:
        load_image(p)
    assert err.value.path == str(p)
    with pytest.raises(ImageDecodeError):
        load_mask(p)


def test_all_false_mask_png(tmp_path):
    p = tmp_path / "m.png"
    save_mask(np.zeros((5, 6), bool), p)
    with Image.open(p) as im:
        assert im.mode == "L"
        assert not np.asarray(im).any()


def test_mask_threshold_128(tmp_path):
    p = tmp_path / "soft.png"
    Image.fromarray(np.array([[0, 127, 128, 255]], np.uint8)).save(p)
    assert load_mask(p).tolist() == [[False, False, True, True]]


@settings(max_examples=30, deadline=None)
@given(arrays(bool, (7, 5)))
def test_mask_roundtrip(tmp_path_factory, m):
    p = tmp_path_factory.mktemp("m") / "m.png"
    save_mask(m, p)
    with Image.open(p) as im:
        assert set(np.unique(np.asarray(im))) <= {0, 255}
    back = load_mask(p)
    assert np.array_equal(back, m)
    save_mask(back, p)
    assert np.array_equal(load_mask(p), m)


def test_image_roundtrip_8bit(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (6, 7, 3)) / 255.0
    save_image(img, tmp_path / "i.png")
    np.testing.assert_array_equal(load_image(tmp_path / "i.png"), img)


# -- folds --------------------------------------------------------------------


def test_folds_2000():
    plan = make_folds(2000, 5, 0.9, seed=1)
    assert len(plan) == 5
    for train, val in plan.folds:
        assert len(train) == 1800 and len(val) == 200
        assert not set(train) & set(val)
        assert set(train) | set(val) == set(range(2000))


def test_folds_10():
    for train, val in make_folds(10, 5, 0.9, seed=0).folds:
        assert (len(train), len(val)) == (9, 1)


def test_validation_size_is_rounded_tenth():
    for n in (10, 11, 14, 15, 16, 99, 100, 2000):
        val = len(make_folds(n, 5, 0.9).folds[0][1])
        assert val == math.floor(0.1 * n + 0.5)


def test_folds_deterministic_and_seed_sensitive():
    ids = [f"s{i:04d}" for i in range(2000)]
    a = format_fold_plan(make_folds(2000, 5, 0.9, 3), ids)
    b = format_fold_plan(make_folds(2000, 5, 0.9, 3), ids)
    assert a.encode() == b.encode()
    firsts = {make_folds(2000, 5, 0.9, s).folds[0][1] for s in range(100)}
    assert len(firsts) == 100


def test_folds_are_independent_resplits():
    plan = make_folds(200, 5, 0.9, seed=0)
    vals = [set(v) for _, v in plan.folds]
    assert len({frozenset(v) for v in vals}) == 5


def test_fold_plan_text_roundtrip():
    ids = [f"ISIC_{i:07d}" for i in range(30)]
    plan = make_folds(30, 5, 0.9, seed=8)
    text = format_fold_plan(plan, ids)
    assert text.startswith("seed=8\n") and len(text.splitlines()) == 6
    assert parse_fold_plan(text, ids) == plan


def test_fold_errors():
    with pytest.raises(ValueError):
        make_folds(5, 5, 0.9)  # 0.5 validation images
    with pytest.raises(ValueError):
        make_folds(3, 5, 0.5)
    with pytest.raises(ValueError):
        make_folds(10, 5, 1.0)


# -- synthetic lesions ----------------------------------------------------------


def test_synth_mask_matches_ellipse_count():
    spec = SynthSpec(width=80, height=60, axes=(20, 10), noise_sigma=0)
    img, mask = synth_lesion(spec)
    cx, cy = 39.5, 29.5
    count = sum(1 for y in range(60) for x in range(80)
                if ((x - cx) / 20) ** 2 + ((y - cy) / 10) ** 2 <= 1)
    assert mask.sum() == count


def test_synth_two_colors_exactly():
    spec = SynthSpec(width=64, height=48, axes=(15, 9), rotation=0.4, noise_sigma=0)
    img, mask = synth_lesion(spec)
    assert np.all(img[mask] == spec.lesion_color)
    assert np.all(img[~mask] == spec.skin_color)


def test_synth_noise_bounded():
    spec = random_spec(5)
    s = render_synth(spec)
    ideal = render_synth(SynthSpec(**{**spec.__dict__, "noise_sigma": 0.0})).image
    resid = s.image - ideal
    assert np.max(np.abs(resid)) <= 6 * spec.noise_sigma
    assert abs(resid.std() - spec.noise_sigma) < 0.1 * spec.noise_sigma


def test_synth_hair_replay():
    spec = random_spec(6, hair_count=10)
    a, b = render_synth(spec), render_synth(spec)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.hair_mask, b.hair_mask)
    assert a.hair_mask.any()
    # the hairless render shares its noise with the haired one
    assert np.array_equal(a.image[~a.hair_mask], a.hairless[~a.hair_mask])


def test_synth_vignette_corners_dark():
    for seed in range(5):
        img, _ = synth_lesion(random_spec(seed, vignette=True, center=None))
        lum = luminance(img)
        assert max(lum[0, 0], lum[0, -1], lum[-1, 0], lum[-1, -1]) < 0.1


def test_synth_rejects_oversized_ellipse():
    with pytest.raises(ValueError):
        synth_lesion(SynthSpec(width=40, height=40, axes=(25, 10)))
    with pytest.raises(ValueError):
        synth_lesion(SynthSpec(lesion_color=(1.2, 0, 0)))


def test_random_spec_fits_for_many_seeds():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for seed in range(50):
            synth_lesion(random_spec(seed, noise_sigma=0))
