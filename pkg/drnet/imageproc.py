"""Fundus image preprocessing.

Turns a colour fundus photograph into a normalized single-channel tensor:
green channel, bilinear resize, CLAHE, clarity boost and division by 255.
Images are plain numpy arrays: an ``RgbImage`` is a uint8 array of shape
(H, W, 3) and a ``Plane8`` is a uint8 array of shape (H, W).
"""
import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from drnet.errors import InvalidArgument
from drnet.utils import to_uint8

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocConfig:
    """Preprocessing parameters.

    Args:
        target_side (int): Side of the square output plane. Defaults to 256.
        clahe_clip (float): CLAHE clip limit, in multiples of the mean bin count. Defaults to 2.0.
        clahe_tiles (tuple): CLAHE tile grid as (rows, columns). Defaults to (8, 8).
        blur_level (float): Blur level of the clarity boost's blurred copy. Defaults to 40.
        blur_per_sigma (float): Blur level per unit of Gaussian sigma. Defaults to 4.
        boost_alpha (float): Weight of the plane in the clarity boost. Defaults to 4.
        boost_beta (float): Weight of the blurred copy in the clarity boost. Defaults to -4.
        boost_gamma (float): Offset of the clarity boost. Defaults to 128.
    """
    target_side: int = 256
    clahe_clip: float = 2.0
    clahe_tiles: Tuple[int, int] = (8, 8)
    blur_level: float = 40.0
    blur_per_sigma: float = 4.0
    boost_alpha: float = 4.0
    boost_beta: float = -4.0
    boost_gamma: float = 128.0

    def __post_init__(self):
        if self.target_side <= 0:
            raise InvalidArgument('target_side must be positive.')
        if not self.clahe_clip >= 1:
            raise InvalidArgument('clahe_clip must be at least 1.')
        if len(self.clahe_tiles) != 2 or min(self.clahe_tiles) < 1:
            raise InvalidArgument('clahe_tiles must be a pair of positive integers.')
        if self.blur_per_sigma <= 0:
            raise InvalidArgument('blur_per_sigma must be positive.')
        boost = (self.blur_level, self.boost_alpha, self.boost_beta, self.boost_gamma)
        if not all(math.isfinite(value) for value in boost):
            raise InvalidArgument('Blur and boost parameters must be finite.')

    @property
    def blur_sigma(self):
        return self.blur_level / self.blur_per_sigma


def _check_plane(p):
    if not isinstance(p, np.ndarray) or p.dtype != np.uint8 or p.ndim != 2 or 0 in p.shape:
        raise InvalidArgument('Expected a non-empty uint8 plane of shape (H, W).')


def _check_rgb(img):
    if not isinstance(img, np.ndarray) or img.dtype != np.uint8 or img.ndim != 3 \
            or img.shape[2] != 3 or 0 in img.shape:
        raise InvalidArgument('Expected a non-empty uint8 RGB image of shape (H, W, 3).')


def read_rgb(path):
    """Reads an 8-bit colour image (PNG, JPEG, PPM, ...).

    Args:
        path (string): Image file

    Returns:
        ndarray: uint8 array of shape (H, W, 3)
    """
    with Image.open(path) as image:
        return np.asarray(image.convert('RGB'), dtype=np.uint8).copy()


def read_plane(path):
    """Reads an 8-bit single-channel image (PNG, PGM, ...).

    Args:
        path (string): Image file

    Returns:
        ndarray: uint8 array of shape (H, W)
    """
    with Image.open(path) as image:
        return np.asarray(image.convert('L'), dtype=np.uint8).copy()


def write_plane(path, plane):
    """Writes a plane as PNG or PGM, chosen by the file extension.

    Args:
        path (string): Target file
        plane (ndarray): uint8 plane
    """
    _check_plane(plane)
    Image.fromarray(plane).save(path)


def extract_green(img):
    """Projects an RGB image onto its green channel.

    Args:
        img (ndarray): uint8 RGB image

    Returns:
        ndarray: uint8 plane with the G component of every pixel
    """
    _check_rgb(img)
    return np.ascontiguousarray(img[:, :, 1])


def _sample_grid(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(p, out_w, out_h):
    """Resizes a plane with bilinear interpolation and half-pixel centres.

    Source coordinates are ``(dst + 0.5) * in / out - 0.5``, clamped to the
    image; results are rounded half away from zero.

    Args:
        p (ndarray): uint8 plane
        out_w (int): Output width
        out_h (int): Output height

    Returns:
        ndarray: uint8 plane of shape (out_h, out_w)
    """
    _check_plane(p)
    if out_w <= 0 or out_h <= 0:
        raise InvalidArgument('Output dimensions must be positive.')
    h, w = p.shape
    y0, y1, wy = _sample_grid(h, out_h)
    x0, x1, wx = _sample_grid(w, out_w)
    src = p.astype(np.float64)
    y0, y1, wy = y0[:, None], y1[:, None], wy[:, None]
    top = (1 - wx) * src[y0, x0] + wx * src[y0, x1]
    bottom = (1 - wx) * src[y1, x0] + wx * src[y1, x1]
    return to_uint8((1 - wy) * top + wy * bottom)


def _pad_to_tiles(p, tiles):
    h, w = p.shape
    rows, cols = tiles
    if rows > h or cols > w:
        raise InvalidArgument(f'Tile grid {rows}x{cols} is larger than the {h}x{w} image.')
    tile_h, tile_w = -(-h // rows), -(-w // cols)
    padded = np.pad(p, ((0, tile_h * rows - h), (0, tile_w * cols - w)), mode='edge')
    return padded, tile_h, tile_w


def _tile_mapping(hist, limit, n_pixels):
    excess = int(np.sum(np.maximum(hist - limit, 0)))
    clipped = np.minimum(hist, limit)
    clipped += excess // 256
    clipped[:excess % 256] += 1
    cdf = np.cumsum(clipped)
    return to_uint8(cdf * 255.0 / n_pixels)


def clahe_tile_mappings(p, clip, tiles):
    """Computes the clipped-histogram lookup table of every CLAHE tile.

    The image is padded by edge replication to a multiple of the tile grid.
    Each tile's 256-bin histogram is clipped at ``floor(clip * tile_pixels / 256)``
    (at least 1); the excess is spread evenly over all bins and the remainder
    one count per bin starting at bin 0.

    Args:
        p (ndarray): uint8 plane
        clip (float): Clip limit, at least 1
        tiles (tuple): Tile grid (rows, columns)

    Returns:
        ndarray: uint8 array of shape (rows, columns, 256)
    """
    _check_plane(p)
    if not clip >= 1:
        raise InvalidArgument('The clip limit must be at least 1.')
    padded, tile_h, tile_w = _pad_to_tiles(p, tiles)
    rows, cols = tiles
    blocks = padded.reshape(rows, tile_h, cols, tile_w).transpose(0, 2, 1, 3).reshape(rows, cols, -1)
    n_pixels = tile_h * tile_w
    limit = max(1, int(clip * n_pixels / 256))
    mappings = np.empty((rows, cols, 256), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            hist = np.bincount(blocks[r, c], minlength=256).astype(np.int64)
            mappings[r, c] = _tile_mapping(hist, limit, n_pixels)
    return mappings


def _blend_grid(n, tile, count):
    f = (np.arange(n, dtype=np.float64) + 0.5) / tile - 0.5
    i0 = np.floor(f).astype(np.int64)
    weight = f - i0
    return np.clip(i0, 0, count - 1), np.clip(i0 + 1, 0, count - 1), weight


def clahe(p, clip=2.0, tiles=(8, 8)):
    """Contrast-limited adaptive histogram equalization.

    Every pixel is mapped through the four surrounding tile mappings and the
    results are blended bilinearly; border pixels fall back to two or one
    mapping.

    Args:
        p (ndarray): uint8 plane
        clip (float): Clip limit, at least 1. Defaults to 2.0.
        tiles (tuple): Tile grid (rows, columns). Defaults to (8, 8).

    Returns:
        ndarray: uint8 plane of the input's shape
    """
    mappings = clahe_tile_mappings(p, clip, tiles).astype(np.float64)
    padded, tile_h, tile_w = _pad_to_tiles(p, tiles)
    y0, y1, wy = _blend_grid(padded.shape[0], tile_h, tiles[0])
    x0, x1, wx = _blend_grid(padded.shape[1], tile_w, tiles[1])
    y0, y1, wy = y0[:, None], y1[:, None], wy[:, None]
    top = (1 - wx) * mappings[y0, x0, padded] + wx * mappings[y0, x1, padded]
    bottom = (1 - wx) * mappings[y1, x0, padded] + wx * mappings[y1, x1, padded]
    out = to_uint8((1 - wy) * top + wy * bottom)
    h, w = p.shape
    return np.ascontiguousarray(out[:h, :w])


def gaussian_kernel(sigma):
    """Normalized 1-D Gaussian kernel of radius ``ceil(3 * sigma)``.

    Args:
        sigma (float): Standard deviation in pixels, positive

    Returns:
        ndarray: float64 kernel of odd length
    """
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-x * x / (2 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur(p, sigma):
    """Separable Gaussian blur with half-sample symmetric borders.

    Args:
        p (ndarray): Plane (any numeric dtype)
        sigma (float): Standard deviation in pixels; 0 returns a copy

    Returns:
        ndarray: float64 blurred plane
    """
    src = np.asarray(p, dtype=np.float64)
    if sigma <= 0:
        return src.copy()
    kernel = gaussian_kernel(sigma)
    out = ndimage.correlate1d(src, kernel, axis=0, mode='reflect')
    return ndimage.correlate1d(out, kernel, axis=1, mode='reflect')


def clarity_boost(p, cfg=PreprocConfig()):
    """Accentuates lesions by subtracting a blurred copy.

    Computes ``alpha * X + beta * Y + gamma`` where ``Y`` is the Gaussian blur
    of ``X``, rounded and clamped to 8 bits.

    Args:
        p (ndarray): uint8 plane
        cfg (PreprocConfig): Boost and blur parameters

    Returns:
        ndarray: uint8 plane
    """
    _check_plane(p)
    x = p.astype(np.float64)
    y = gaussian_blur(x, cfg.blur_sigma)
    return to_uint8(cfg.boost_alpha * x + cfg.boost_beta * y + cfg.boost_gamma)


def normalize(p):
    """Divides intensities by 255.

    Args:
        p (ndarray): uint8 plane

    Returns:
        ndarray: float32 tensor of shape (1, H, W, 1) with values in [0, 1]
    """
    _check_plane(p)
    values = p.astype(np.float32) / np.float32(255)
    return values[np.newaxis, :, :, np.newaxis]


def preprocess(img, cfg=PreprocConfig()):
    """Runs green channel, resize, CLAHE and clarity boost.

    Args:
        img (ndarray): uint8 RGB image
        cfg (PreprocConfig): Pipeline parameters

    Returns:
        ndarray: uint8 plane of shape (target_side, target_side)
    """
    plane = extract_green(img)
    plane = resize_bilinear(plane, cfg.target_side, cfg.target_side)
    plane = clahe(plane, cfg.clahe_clip, cfg.clahe_tiles)
    return clarity_boost(plane, cfg)


def preprocess_tensor(img, cfg=PreprocConfig()):
    """Runs :func:`preprocess` followed by :func:`normalize`.

    Args:
        img (ndarray): uint8 RGB image
        cfg (PreprocConfig): Pipeline parameters

    Returns:
        ndarray: float32 tensor of shape (1, target_side, target_side, 1)
    """
    return normalize(preprocess(img, cfg))


def is_preprocessed_plane(path, cfg=PreprocConfig()):
    """Whether ``path`` looks like a plane written by the preprocess stage.

    Such planes are single-channel 8-bit images of side ``cfg.target_side``.
    """
    with Image.open(path) as image:
        return image.mode == 'L' and image.size == (cfg.target_side, cfg.target_side)


def load_tensor(path, cfg=PreprocConfig(), preprocessed=False):
    """Loads an image file as a network input tensor.

    Grayscale files of side ``cfg.target_side`` are taken as preprocessed
    planes even without ``preprocessed``.

    Args:
        path (string): Image file
        cfg (PreprocConfig): Pipeline parameters
        preprocessed (bool): Set to `True` if the file already holds a preprocessed plane.
                             Defaults to `False`.

    Returns:
        ndarray: float32 tensor of shape (1, H, W, 1)
    """
    if not preprocessed and is_preprocessed_plane(path, cfg):
        log.debug('%s is a preprocessed plane; skipping the pipeline', path)
        preprocessed = True
    log.debug('Loading %s (preprocessed=%s)', path, preprocessed)
    if preprocessed:
        return normalize(read_plane(path))
    return preprocess_tensor(read_rgb(path), cfg)
