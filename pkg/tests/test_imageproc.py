import math

import numpy as np
import pytest
from PIL import Image

from drnet.errors import InvalidArgument
from drnet.imageproc import (PreprocConfig, clahe, clahe_tile_mappings, clarity_boost, extract_green, gaussian_blur,
                             is_preprocessed_plane, load_tensor, normalize, preprocess, preprocess_tensor, read_plane,
                             read_rgb, resize_bilinear, write_plane)


def round_half_up(v):
    return int(math.floor(v + 0.5))


def bilinear_oracle(p, out_w, out_h):
    h, w = p.shape
    out = np.zeros((out_h, out_w), dtype=np.uint8)
    for y in range(out_h):
        sy = min(max((y + 0.5) * (h / out_h) - 0.5, 0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        wy = sy - y0
        for x in range(out_w):
            sx = min(max((x + 0.5) * (w / out_w) - 0.5, 0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            wx = sx - x0
            top = (1 - wx) * float(p[y0, x0]) + wx * float(p[y0, x1])
            bottom = (1 - wx) * float(p[y1, x0]) + wx * float(p[y1, x1])
            out[y, x] = min(max(round_half_up((1 - wy) * top + wy * bottom), 0), 255)
    return out


def tile_mapping_oracle(tile, clip):
    n = tile.size
    hist = [0] * 256
    for v in tile.ravel():
        hist[int(v)] += 1
    limit = max(1, int(clip * n / 256))
    excess = sum(max(h - limit, 0) for h in hist)
    hist = [min(h, limit) + excess // 256 for h in hist]
    for b in range(excess % 256):
        hist[b] += 1
    mapping, total = [], 0
    for h in hist:
        total += h
        mapping.append(min(max(round_half_up(total * 255.0 / n), 0), 255))
    return mapping


def test_extract_green():
    assert extract_green(np.array([[[10, 200, 30]]], dtype=np.uint8)).tolist() == [[200]]
    assert not extract_green(np.zeros((4, 5, 3), dtype=np.uint8)).any()
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[:, :, 1] = [[0, 85], [170, 255]]
    assert extract_green(img).tolist() == [[0, 85], [170, 255]]


def test_extract_green_rejects_planes():
    with pytest.raises(InvalidArgument):
        extract_green(np.zeros((4, 4), dtype=np.uint8))


def test_resize_constant():
    plane = np.full((37, 53), 77, dtype=np.uint8)
    assert np.all(resize_bilinear(plane, 20, 64) == 77)


def test_resize_matches_oracle():
    ramp = (np.add.outer(np.arange(512), np.arange(512)) // 4 % 256).astype(np.uint8)
    assert np.array_equal(resize_bilinear(ramp, 256, 256), bilinear_oracle(ramp, 256, 256))
    small = np.array([[0, 255], [0, 255]], dtype=np.uint8)
    assert np.array_equal(resize_bilinear(small, 4, 4), bilinear_oracle(small, 4, 4))


def test_resize_random_images():
    rng = np.random.default_rng(3)
    for _ in range(50):
        h, w = rng.integers(1, 40, size=2)
        out_h, out_w = rng.integers(1, 40, size=2)
        plane = rng.integers(0, 256, size=(h, w), dtype=np.uint8)
        assert np.array_equal(resize_bilinear(plane, out_w, out_h), bilinear_oracle(plane, out_w, out_h))


def test_resize_zero_dimension():
    with pytest.raises(InvalidArgument):
        resize_bilinear(np.zeros((4, 4), dtype=np.uint8), 0, 4)


def test_clahe_uniform_tiles_is_identity():
    rng = np.random.default_rng(0)
    plane = np.zeros((128, 128), dtype=np.uint8)
    for r in range(8):
        for c in range(8):
            plane[r * 16:(r + 1) * 16, c * 16:(c + 1) * 16] = rng.permutation(256).reshape(16, 16)
    out = clahe(plane, 2.0, (8, 8))
    assert np.max(np.abs(out.astype(int) - plane.astype(int))) <= 1


def test_clahe_constant_plane():
    for value in (0, 91, 255):
        out = clahe(np.full((64, 48), value, dtype=np.uint8))
        assert np.all(out == out[0, 0])


def test_clahe_mappings_monotone_and_match_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h, w = rng.integers(8, 48, size=2)
        plane = rng.integers(0, 256, size=(h, w), dtype=np.uint8)
        if rng.random() < 0.5:
            plane = (plane // 32 * 32).astype(np.uint8)
        tiles = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        clip = float(rng.uniform(1, 4))
        mappings = clahe_tile_mappings(plane, clip, tiles)
        assert np.all(np.diff(mappings.astype(int), axis=-1) >= 0)
        tile_h, tile_w = -(-h // tiles[0]), -(-w // tiles[1])
        padded = np.pad(plane, ((0, tile_h * tiles[0] - h), (0, tile_w * tiles[1] - w)), mode='edge')
        tile = padded[:tile_h, :tile_w]
        assert mappings[0, 0].tolist() == tile_mapping_oracle(tile, clip)


def test_clahe_tiles_larger_than_image():
    with pytest.raises(InvalidArgument):
        clahe(np.zeros((4, 4), dtype=np.uint8), tiles=(8, 8))


def test_gaussian_blur_matches_dense_oracle():
    rng = np.random.default_rng(2)
    plane = rng.integers(0, 256, size=(40, 33)).astype(np.float64)
    sigma = 2.0
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-x * x / (2 * sigma * sigma))
    k2 = np.outer(k, k) / k.sum() ** 2
    padded = np.pad(plane, radius, mode='symmetric')
    oracle = np.zeros_like(plane)
    for i in range(plane.shape[0]):
        for j in range(plane.shape[1]):
            oracle[i, j] = np.sum(padded[i:i + 2 * radius + 1, j:j + 2 * radius + 1] * k2)
    assert np.allclose(gaussian_blur(plane, sigma), oracle, atol=1e-9)


def test_clarity_boost_constants():
    assert np.all(clarity_boost(np.full((50, 50), 128, dtype=np.uint8)) == 128)
    assert np.all(clarity_boost(np.zeros((50, 50), dtype=np.uint8)) == 128)


def test_clarity_boost_single_bright_pixel():
    plane = np.full((101, 101), 128, dtype=np.uint8)
    plane[50, 50] = 255
    out = clarity_boost(plane)
    assert out[50, 50] == 255
    assert out[0, 0] == 128 and out[100, 3] == 128


def test_clarity_boost_matches_formula():
    rng = np.random.default_rng(4)
    plane = rng.integers(0, 256, size=(30, 30), dtype=np.uint8)
    cfg = PreprocConfig(blur_level=8.0)
    blurred = gaussian_blur(plane, 2.0)
    expected = np.clip(np.floor(4 * plane.astype(np.float64) - 4 * blurred + 128 + 0.5), 0, 255)
    assert np.array_equal(clarity_boost(plane, cfg), expected.astype(np.uint8))


def test_normalize():
    t = normalize(np.array([[255, 0, 128]], dtype=np.uint8))
    assert t.shape == (1, 1, 3, 1)
    assert t.dtype == np.float32
    assert t[0, 0, 0, 0] == 1.0
    assert t[0, 0, 1, 0] == 0.0
    assert t[0, 0, 2, 0] == pytest.approx(128 / 255, abs=1e-7)


def test_preprocess_shape_and_determinism():
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, size=(70, 90, 3), dtype=np.uint8)
    cfg = PreprocConfig(target_side=64)
    first = preprocess(img, cfg)
    assert first.shape == (64, 64) and first.dtype == np.uint8
    assert np.array_equal(first, preprocess(img, cfg))
    tensor = preprocess_tensor(img, cfg)
    assert tensor.shape == (1, 64, 64, 1)
    assert 0.0 <= tensor.min() and tensor.max() <= 1.0


def test_plane_files(tmp_path):
    plane = np.arange(64, dtype=np.uint8).reshape(8, 8)
    path = str(tmp_path / 'plane.png')
    write_plane(path, plane)
    assert np.array_equal(read_plane(path), plane)
    assert read_rgb(path).shape == (8, 8, 3)
    assert np.array_equal(load_tensor(path, preprocessed=True), normalize(plane))


def test_clarity_boost_identity_weights():
    rng = np.random.default_rng(8)
    plane = rng.integers(0, 256, size=(40, 30), dtype=np.uint8)
    cfg = PreprocConfig(boost_alpha=1.0, boost_beta=0.0, boost_gamma=0.0)
    assert np.array_equal(clarity_boost(plane, cfg), plane)


def test_extract_green_ignores_red_and_blue():
    rng = np.random.default_rng(9)
    img = rng.integers(0, 256, size=(12, 17, 3), dtype=np.uint8)
    assert np.array_equal(extract_green(img[:, :, ::-1]), extract_green(img))


def test_resize_stays_within_input_range():
    rng = np.random.default_rng(10)
    for _ in range(50):
        h, w = rng.integers(1, 40, size=2)
        lo, hi = sorted(rng.integers(0, 256, size=2))
        plane = rng.integers(lo, hi + 1, size=(h, w), dtype=np.uint8)
        out_w, out_h = rng.integers(1, 60, size=2)
        out = resize_bilinear(plane, int(out_w), int(out_h))
        assert out.min() >= plane.min() and out.max() <= plane.max()


def test_load_tensor_detects_preprocessed_planes(tmp_path):
    rng = np.random.default_rng(11)
    cfg = PreprocConfig(target_side=16, clahe_tiles=(2, 2))
    plane = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
    path = str(tmp_path / 'plane.png')
    write_plane(path, plane)
    assert is_preprocessed_plane(path, cfg)
    assert np.array_equal(load_tensor(path, cfg), normalize(plane))
    assert np.array_equal(load_tensor(path, cfg), load_tensor(path, cfg, preprocessed=True))
    assert not is_preprocessed_plane(path, PreprocConfig(target_side=32))


def test_load_tensor_runs_pipeline_on_colour_images(tmp_path):
    rng = np.random.default_rng(12)
    cfg = PreprocConfig(target_side=16, clahe_tiles=(2, 2))
    img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    path = str(tmp_path / 'colour.png')
    Image.fromarray(img).save(path)
    assert not is_preprocessed_plane(path, cfg)
    assert np.array_equal(load_tensor(path, cfg), preprocess_tensor(img, cfg))
