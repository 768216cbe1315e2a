import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from organseg.chroma import (
    ColorCategory,
    ColorModel,
    PixelSample,
    classify_image,
    classify_pixel,
    classify_pixels,
    filter_to_shape,
    load_color_model,
    save_color_model,
    train_color_model,
    training_accuracy,
)
from organseg.errors import FormatError, TrainingDataError
from organseg.raster import RasterImage, Rect

# pairwise distances all >= 120
CENTROIDS = np.array(
    [(230, 40, 40), (40, 220, 60), (50, 50, 230), (230, 230, 220), (30, 30, 30)], dtype=np.int64
)


def palette_samples(per_class=60, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k, c in enumerate(CENTROIDS):
        for _ in range(per_class):
            r, g, b = np.clip(c + rng.integers(-10, 11, size=3), 0, 255)
            out.append(PixelSample(int(r), int(g), int(b), ColorCategory(k)))
    return out


def nearest_centroid(rgb):
    rgb = np.asarray(rgb, dtype=np.int64).reshape(-1, 3)
    d = ((rgb[:, None, :] - CENTROIDS[None]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


@pytest.fixture(scope="module")
def samples():
    return palette_samples()


@pytest.fixture(scope="module")
def model(samples):
    return train_color_model(samples, seed=3)


def test_palette_is_well_separated():
    d = np.sqrt(((CENTROIDS[:, None] - CENTROIDS[None]) ** 2).sum(axis=2))
    assert d[~np.eye(5, dtype=bool)].min() >= 120


def test_training_reaches_full_accuracy(model, samples):
    assert training_accuracy(model, samples) == 1.0


def test_agrees_with_nearest_centroid_oracle(model, samples):
    rgb = np.array([(s.r, s.g, s.b) for s in samples])
    assert np.array_equal(classify_pixels(model, rgb), nearest_centroid(rgb))
    assert np.array_equal(nearest_centroid(rgb), [s.label.index for s in samples])


def test_centroid_pixels_classify_to_own_class(model):
    for k, c in enumerate(CENTROIDS):
        assert classify_pixel(model, *map(int, c)) is ColorCategory(k)


def test_single_class_is_training_data_error():
    data = [PixelSample(10, 10, 10, ColorCategory.CAT1)] * 5
    with pytest.raises(TrainingDataError):
        train_color_model(data)


def test_empty_input_is_argument_error():
    with pytest.raises(ValueError):
        train_color_model([])


def test_training_is_deterministic(samples):
    a = train_color_model(samples, epochs=5, seed=11)
    b = train_color_model(samples, epochs=5, seed=11)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


def test_pixel_sample_range():
    with pytest.raises(ValueError):
        PixelSample(256, 0, 0, ColorCategory.CAT1)


def test_tie_goes_to_lower_index():
    m = ColorModel(np.zeros((5, 3)), np.array([0.0, 1.0, 1.0, 0.5, 1.0]))
    assert classify_pixel(m, 1, 2, 3) is ColorCategory.CAT2
    m = ColorModel(np.zeros((5, 3)), np.zeros(5))
    assert classify_pixel(m, 200, 0, 0) is ColorCategory.CAT1


@given(st.floats(-50, 50, allow_nan=False), st.floats(0.01, 100))
@settings(max_examples=40, deadline=None)
def test_argmax_invariances(shift, scale):
    rng = np.random.default_rng(5)
    w = rng.normal(size=(5, 3)).astype(np.float32)
    b = rng.normal(size=5).astype(np.float32)
    rgb = rng.integers(0, 256, size=(200, 3))
    base = classify_pixels(ColorModel(w, b), rgb)
    scaled = ColorModel(w * np.float32(scale), b * np.float32(scale))
    scores = ColorModel(w, b).scores(rgb)
    assert np.array_equal(np.argmax(scores + shift, axis=1), base)
    # scaling can only flip near-exact ties through float32 rounding
    margin = np.sort(scores, axis=1)[:, -1] - np.sort(scores, axis=1)[:, -2]
    ok = margin > 1e-4
    assert np.array_equal(classify_pixels(scaled, rgb)[ok], base[ok])


def test_filter_to_shape_matches_pixelwise_map(model):
    rng = np.random.default_rng(8)
    img = RasterImage(rng.integers(0, 256, size=(30, 40, 3), dtype=np.uint8))
    box = Rect(5, 3, 20, 17)
    for cat in (ColorCategory.CAT1, ColorCategory.CAT4):
        mask = filter_to_shape(img, box, model, cat)
        assert mask.bits.shape == (17, 20)
        for j in range(17):
            for i in range(20):
                expected = classify_pixel(model, *img.pixel(box.x + i, box.y + j)) is cat
                assert mask.bits[j, i] == expected


def test_filter_on_uniform_crops(model):
    px = np.zeros((10, 10, 3), dtype=np.uint8)
    px[:] = CENTROIDS[2]
    img = RasterImage(px)
    assert filter_to_shape(img, Rect(2, 2, 5, 4), model, ColorCategory.CAT3).bits.all()
    px[:] = CENTROIDS[4]
    img = RasterImage(px)
    assert not filter_to_shape(img, Rect(0, 0, 10, 10), model, ColorCategory.CAT3).bits.any()


def test_filter_rejects_background(model):
    img = RasterImage(np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        filter_to_shape(img, Rect(0, 0, 2, 2), model, ColorCategory.BACKGROUND)


def test_classify_image_shape(model):
    img = RasterImage(np.zeros((7, 9, 3), dtype=np.uint8))
    out = classify_image(model, img)
    assert out.shape == (7, 9) and np.all(out == ColorCategory.BACKGROUND.index)


def test_save_load_bit_exact(model, tmp_path):
    save_color_model(model, tmp_path / "m.bin")
    back = load_color_model(tmp_path / "m.bin")
    assert back == model
    assert back.weights.tobytes() == model.weights.tobytes()


def test_wrong_magic_is_format_error(model, tmp_path):
    save_color_model(model, tmp_path / "m.bin")
    data = bytearray((tmp_path / "m.bin").read_bytes())
    data[0:1] = b"X"
    (tmp_path / "bad.bin").write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_color_model(tmp_path / "bad.bin")


def test_truncated_file_is_format_error(model, tmp_path):
    save_color_model(model, tmp_path / "m.bin")
    data = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-6])
    with pytest.raises(FormatError):
        load_color_model(tmp_path / "short.bin")
