"""Float and integer-only execution paths, and latency measurement."""
import contextvars
import logging
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from drnet.errors import FloatOpTrapped, InvalidArgument
from drnet.imageproc import PreprocConfig, preprocess_tensor
from drnet.network import forward, maxpool_fwd, softmax_fwd
from drnet.quantize import QMAX, QMIN, dequantize, quantize

log = logging.getLogger(__name__)

_TRAP = contextvars.ContextVar('float_trap', default=False)


@contextmanager
def float_trap():
    """Arms the integer-purity trap.

    While armed, every integer kernel checks its operands and intermediate
    results and raises `FloatOpTrapped` on any floating-point array.
    """
    token = _TRAP.set(True)
    try:
        yield
    finally:
        _TRAP.reset(token)


def _require_integer(*arrays):
    if not _TRAP.get():
        return
    for array in arrays:
        if array is not None and np.asarray(array).dtype.kind not in 'iu':
            raise FloatOpTrapped(f'Floating-point operand of dtype {np.asarray(array).dtype} in an integer kernel.')


def rounding_rshift(x, r):
    """``round(x / 2**r)`` half away from zero, on int64 values.

    Shifts of 63 or more round everything to 0; negative shifts multiply.
    """
    x = np.asarray(x, dtype=np.int64)
    r = np.broadcast_to(np.asarray(r, dtype=np.int64), x.shape)
    left = np.left_shift(x, np.maximum(-r, 0))
    right = np.clip(r, 0, 62)
    half = np.where(right > 0, np.left_shift(np.int64(1), np.maximum(right - 1, 0)), 0)
    out = np.sign(left) * np.right_shift(np.abs(left) + half, right)
    out = np.where(r >= 63, 0, out)
    _require_integer(x, r, left, half, out)
    return out


def _requantize(acc, layer):
    acc = np.asarray(acc, dtype=np.int64)
    if layer.relu:
        acc = np.maximum(acc, 0)
    acc = layer.sign.astype(np.int64) * acc + layer.offset.astype(np.int64)
    acc = np.clip(acc, -2 ** 31, 2 ** 31 - 1)
    scaled = rounding_rshift(acc * layer.multiplier.astype(np.int64), 31 - layer.shift.astype(np.int64))
    q = np.clip(scaled + layer.output_qp.zero_point, QMIN, QMAX).astype(np.int8)
    _require_integer(acc, scaled, q)
    return q


def qconv2d(q_in, layer):
    """Integer stride-1 'same' convolution.

    Accumulates ``(q_in - zp_in) * q_w`` in int32, adds the int32 bias in int64 and
    requantizes with the layer's fixed-point multipliers. Padding is the
    input zero point, i.e. real 0.

    Args:
        q_in (ndarray): int8 input (N, H, W, C)
        layer (QLayer): Quantized conv layer

    Returns:
        ndarray: int8 output (N, H, W, O)
    """
    _require_integer(q_in, layer.weight, layer.bias, layer.multiplier, layer.shift, layer.offset)
    w = layer.weight
    if q_in.ndim != 4 or q_in.shape[3] != w.shape[2]:
        raise InvalidArgument(f'qconv2d shape mismatch: input {q_in.shape}, kernel {w.shape}.')
    pad = w.shape[0] // 2
    x = q_in.astype(np.int32) - np.int32(layer.input_qp.zero_point)
    windows = sliding_window_view(np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))),
                                  (w.shape[0], w.shape[1]), axis=(1, 2))
    acc = np.tensordot(windows, w.astype(np.int32), axes=([3, 4, 5], [2, 0, 1]))
    acc = acc + layer.bias.astype(np.int64)
    _require_integer(x, acc)
    return _requantize(acc, layer)


def qdense(q_in, layer):
    """Integer fully connected layer, same arithmetic as `qconv2d`."""
    _require_integer(q_in, layer.weight, layer.bias, layer.multiplier, layer.shift, layer.offset)
    if q_in.ndim != 2 or q_in.shape[1] != layer.weight.shape[0]:
        raise InvalidArgument(f'qdense shape mismatch: input {q_in.shape}, weight {layer.weight.shape}.')
    x = q_in.astype(np.int32) - np.int32(layer.input_qp.zero_point)
    acc = x @ layer.weight.astype(np.int32) + layer.bias.astype(np.int64)
    _require_integer(x, acc)
    return _requantize(acc, layer)


def qmaxpool(q_in):
    _require_integer(q_in)
    return maxpool_fwd(q_in)


def run_integer_chain(qmodel, q):
    """Runs the quantized layers on an already quantized input.

    Args:
        qmodel (QModel): Integer model
        q (ndarray): int8 input (N, side, side, 1)

    Returns:
        ndarray: int8 logits (N, classes)
    """
    for layer in qmodel.layers:
        if layer.kind == 'conv2d':
            q = qconv2d(q, layer)
        elif layer.kind == 'dense':
            q = qdense(q, layer)
        elif layer.kind == 'maxpool':
            q = qmaxpool(q)
        elif layer.kind == 'flatten':
            q = q.reshape(q.shape[0], -1)
        _require_integer(q)
    return q


def _check_tensor(tensor, side):
    if not isinstance(tensor, np.ndarray) or tensor.ndim != 4 or tensor.shape[1:] != (side, side, 1) \
            or tensor.shape[0] == 0:
        raise InvalidArgument(f'Expected a tensor of shape (N, {side}, {side}, 1), '
                              f'got {getattr(tensor, "shape", None)}.')


def infer_float(model, tensor):
    """Infer-mode forward pass of the float model.

    Args:
        model (Model): Float model
        tensor (ndarray): Preprocessed input (N, side, side, 1)

    Returns:
        tuple: (probabilities (N, classes), predicted classes (N,)); ties go to the lowest class
    """
    _check_tensor(tensor, model.config.input_side)
    probs, _ = forward(model, tensor, 'infer')
    return probs, np.argmax(probs, axis=1)


def infer_int8(qmodel, tensor):
    """Integer-only inference.

    The input is quantized once, the layer chain runs on integers, the final
    logits are dequantized and the softmax runs in float.

    Args:
        qmodel (QModel): Integer model
        tensor (ndarray): Preprocessed float input (N, side, side, 1)

    Returns:
        tuple: (probabilities (N, classes), predicted classes (N,))
    """
    _check_tensor(tensor, qmodel.config.input_side)
    if not np.all(np.isfinite(tensor)):
        raise InvalidArgument('The input contains non-finite values.')
    logits_q = run_integer_chain(qmodel, quantize(tensor, qmodel.input_qp))
    probs = softmax_fwd(dequantize(logits_q, qmodel.logits_qp))
    return probs, np.argmax(probs, axis=1)


@dataclass
class BenchmarkReport:
    """Per-image latency statistics.

    Args:
        samples_ms (list): Per-image latency of every timed pass
        min_ms (float): Minimum latency
        median_ms (float): Median latency
        mean_ms (float): Mean latency
        fps (float): ``1000 / median_ms``
        model_bytes (int): Serialized model size
        images (int): Images per pass
        repetitions (int): Timed passes
        preprocess_median_ms (float): Median per-image preprocessing latency, if measured
        end_to_end_fps (float): Frames per second including preprocessing, if measured
    """
    samples_ms: list
    min_ms: float
    median_ms: float
    mean_ms: float
    fps: float
    model_bytes: Optional[int]
    images: int
    repetitions: int
    preprocess_median_ms: Optional[float] = None
    end_to_end_fps: Optional[float] = None

    def to_dict(self):
        return {
            'min_ms': self.min_ms, 'median_ms': self.median_ms, 'mean_ms': self.mean_ms,
            'fps': self.fps, 'model_bytes': self.model_bytes, 'images': self.images,
            'repetitions': self.repetitions, 'samples': len(self.samples_ms),
            'preprocess_median_ms': self.preprocess_median_ms, 'end_to_end_fps': self.end_to_end_fps,
        }


def _time_per_image(fn, items):
    samples = []
    for item in items:
        start = time.perf_counter()
        fn(item)
        samples.append((time.perf_counter() - start) * 1000)
    return samples


def benchmark(qmodel, images, repetitions=3, warmup=1, model_bytes=None, raw_images=None,
              preproc_cfg=PreprocConfig()):
    """Measures single-image integer inference latency.

    Preprocessing is excluded from the inference figures; when ``raw_images``
    are given it is timed separately and reported as an end-to-end rate too.

    Args:
        qmodel (QModel): Integer model
        images (list): Preprocessed tensors of shape (1, side, side, 1)
        repetitions (int): Timed passes over all images, at least 3. Defaults to 3.
        warmup (int): Untimed passes, at least 1. Defaults to 1.
        model_bytes (int): Serialized model size to report. Defaults to `None`.
        raw_images (list): RGB images to time preprocessing on. Defaults to `None`.
        preproc_cfg (PreprocConfig): Preprocessing parameters

    Returns:
        BenchmarkReport: Latency statistics
    """
    images = list(images)
    if not images:
        raise InvalidArgument('Benchmarking needs at least one image.')
    if repetitions < 3 or warmup < 1:
        raise InvalidArgument('Benchmarking needs at least 3 repetitions and 1 warm-up pass.')

    def run(image):
        infer_int8(qmodel, image)

    for _ in range(warmup):
        for image in images:
            run(image)
    samples = []
    for _ in range(repetitions):
        samples += _time_per_image(run, images)
    median = statistics.median(samples)
    report = BenchmarkReport(samples, min(samples), median, statistics.fmean(samples),
                             1000 / median if median > 0 else float('inf'),
                             model_bytes, len(images), repetitions)
    if raw_images:
        pre = _time_per_image(lambda img: preprocess_tensor(img, preproc_cfg), list(raw_images))
        report.preprocess_median_ms = statistics.median(pre)
        total = median + report.preprocess_median_ms
        report.end_to_end_fps = 1000 / total if total > 0 else float('inf')
    log.info('Median latency %.2f ms (%.1f fps) over %d samples', median, report.fps, len(samples))
    return report
