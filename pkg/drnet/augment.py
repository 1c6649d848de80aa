"""Seeded training-time augmentation: flip, rotation and zoom.

All functions take and return float tensors of shape (1, H, W, 1). Random
draws come from an explicit ``numpy.random.Generator`` so that a given
(seed, image index, epoch) always produces the same output.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from drnet.errors import InvalidArgument


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation parameters.

    Args:
        flip_prob (float): Probability of a flip, per axis. Defaults to 0.5.
        rotate_prob (float): Probability of rotating an image. Defaults to 0.8.
        rotate_range_deg (float): Rotation angles are drawn from +/- this range. Defaults to 25.
        zoom_range (float): Zoom factors are drawn from 1 +/- this fraction. Defaults to 0.1.
        seed (int): Base seed of the per-image streams. Defaults to 0.
    """
    flip_prob: float = 0.5
    rotate_prob: float = 0.8
    rotate_range_deg: float = 25.0
    zoom_range: float = 0.10
    seed: int = 0

    def __post_init__(self):
        for name in ('flip_prob', 'rotate_prob'):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidArgument(f'{name} must lie in [0, 1].')
        if not (math.isfinite(self.rotate_range_deg) and self.rotate_range_deg >= 0):
            raise InvalidArgument('rotate_range_deg must be finite and non-negative.')
        if not (math.isfinite(self.zoom_range) and 0 <= self.zoom_range < 1):
            raise InvalidArgument('zoom_range must lie in [0, 1).')


def sample_rng(seed, index, epoch=0):
    """Creates the random stream of one image.

    The stream is a PCG64 generator keyed by ``seed XOR index`` and the epoch,
    so the result does not depend on the order images are loaded in.

    Args:
        seed (int): Base seed
        index (int): Image index within its split
        epoch (int): Training epoch. Defaults to 0.

    Returns:
        numpy.random.Generator: Independent stream for this image
    """
    key = (int(seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([key, int(epoch)])))


def _check_tensor(t, square=False):
    if not isinstance(t, np.ndarray) or t.ndim != 4 or t.shape[0] != 1 or t.shape[3] != 1:
        raise InvalidArgument('Expected a tensor of shape (1, H, W, 1).')
    if square and t.shape[1] != t.shape[2]:
        raise InvalidArgument('Rotation and zoom need square spatial dimensions.')


def _resample(t, matrix):
    plane = t[0, :, :, 0]
    center = (np.array(plane.shape, dtype=np.float64) - 1) / 2
    offset = center - matrix @ center
    out = ndimage.affine_transform(plane, matrix, offset=offset, order=1, mode='reflect')
    return out[np.newaxis, :, :, np.newaxis]


def rotate(t, degrees):
    """Rotates a tensor counter-clockwise about its centre.

    Bilinear sampling; source coordinates outside the image are reflected.

    Args:
        t (ndarray): Tensor of shape (1, S, S, 1)
        degrees (float): Rotation angle

    Returns:
        ndarray: Rotated tensor, same shape and dtype
    """
    _check_tensor(t, square=True)
    if degrees == 0:
        return t.copy()
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    return _resample(t, np.array([[cos, sin], [-sin, cos]]))


def zoom(t, factor):
    """Scales a tensor about its centre by ``factor``.

    Factors below 1 shrink the content and expose reflected borders.

    Args:
        t (ndarray): Tensor of shape (1, S, S, 1)
        factor (float): Scale factor, positive

    Returns:
        ndarray: Zoomed tensor, same shape and dtype
    """
    _check_tensor(t, square=True)
    if factor <= 0:
        raise InvalidArgument('The zoom factor must be positive.')
    if factor == 1:
        return t.copy()
    return _resample(t, np.eye(2) / factor)


def random_flip(t, rng, cfg=AugmentConfig()):
    """Flips horizontally, then vertically, each with ``cfg.flip_prob``.

    Consumes exactly two draws from ``rng``.

    Args:
        t (ndarray): Tensor of shape (1, H, W, 1)
        rng (numpy.random.Generator): Random stream
        cfg (AugmentConfig): Augmentation parameters

    Returns:
        ndarray: Possibly flipped copy of the tensor
    """
    _check_tensor(t)
    out = t
    if rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1, :]
    if rng.random() < cfg.flip_prob:
        out = out[:, ::-1, :, :]
    return np.ascontiguousarray(out)


def random_rotation(t, rng, cfg=AugmentConfig()):
    """Rotates with probability ``cfg.rotate_prob`` by a uniform random angle.

    One draw gates the rotation; a second draw, taken only when gated in,
    picks the angle.

    Args:
        t (ndarray): Tensor of shape (1, S, S, 1)
        rng (numpy.random.Generator): Random stream
        cfg (AugmentConfig): Augmentation parameters

    Returns:
        ndarray: Possibly rotated tensor
    """
    _check_tensor(t, square=True)
    if rng.random() >= cfg.rotate_prob:
        return t.copy()
    return rotate(t, rng.uniform(-cfg.rotate_range_deg, cfg.rotate_range_deg))


def random_zoom(t, rng, cfg=AugmentConfig()):
    """Zooms by a factor drawn uniformly from ``1 +/- cfg.zoom_range``.

    Args:
        t (ndarray): Tensor of shape (1, S, S, 1)
        rng (numpy.random.Generator): Random stream
        cfg (AugmentConfig): Augmentation parameters

    Returns:
        ndarray: Zoomed tensor
    """
    _check_tensor(t, square=True)
    return zoom(t, rng.uniform(1 - cfg.zoom_range, 1 + cfg.zoom_range))


def augment(t, rng, cfg=AugmentConfig()):
    """Applies flip, rotation and zoom, in that order.

    Args:
        t (ndarray): Tensor of shape (1, S, S, 1)
        rng (numpy.random.Generator): Random stream
        cfg (AugmentConfig): Augmentation parameters

    Returns:
        ndarray: Augmented tensor with values in the input's range
    """
    out = random_flip(t, rng, cfg)
    out = random_rotation(out, rng, cfg)
    return random_zoom(out, rng, cfg)
