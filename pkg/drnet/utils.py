import hashlib
import json

import numpy as np


def round_half_away(x):
    """Rounds half away from zero.

    This is the single rounding mode used by 8-bit image stages and by
    quantization.

    Args:
        x (float or ndarray): Value(s) to round

    Returns:
        float or ndarray: Rounded value(s), same type as the input
    """
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_uint8(x):
    """Rounds half away from zero and clamps into [0, 255].

    Args:
        x (ndarray): Real-valued intensities

    Returns:
        ndarray: uint8 array of the same shape
    """
    return np.clip(round_half_away(np.asarray(x, dtype=np.float64)), 0, 255).astype(np.uint8)


def one_hot(labels, num_classes):
    """Encodes integer class labels as one-hot rows.

    Args:
        labels (ndarray): Integer labels of shape (N,)
        num_classes (int): Number of classes

    Returns:
        ndarray: float64 array of shape (N, num_classes)
    """
    labels = np.asarray(labels, dtype=np.int64)
    encoded = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    encoded[np.arange(labels.shape[0]), labels] = 1.0
    return encoded


def sha256_json(obj):
    """Hashes a JSON-serializable object in canonical form.

    Args:
        obj (object): JSON-serializable value

    Returns:
        string: Hex digest
    """
    text = json.dumps(obj, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()
