"""Post-training full-integer quantization.

BN layers are folded into the preceding conv/dense layer, activation ranges
are measured on a representative set, weights become per-channel symmetric
int8, activations per-tensor asymmetric int8, biases int32, and every layer
gets fixed-point requantization multipliers.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from drnet.container import KIND_QUANT, read_container, write_container
from drnet.errors import ContainerError, InvalidArgument, InvalidCalibration, InvalidModel
from drnet.network import ModelConfig, conv2d_fwd, dense_fwd, forward, maxpool_fwd, softmax_fwd
from drnet.utils import round_half_away

log = logging.getLogger(__name__)

QMIN, QMAX = -128, 127
INT32_MAX = 2 ** 31 - 1
INPUT = 'input'
DEGENERATE_MARGIN = 1e-3


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters, ``real = scale * (q - zero_point)``.

    Args:
        scale (float or ndarray): Positive scale, per tensor or per output channel (last axis)
        zero_point (int or ndarray): Zero point in [-128, 127]
    """
    scale: Union[float, np.ndarray]
    zero_point: Union[int, np.ndarray] = 0


def activation_params(lo, hi):
    """Asymmetric per-tensor parameters covering [lo, hi].

    The range is widened to include 0; ``scale = (hi - lo) / 255`` and
    ``zero_point = round(-128 - lo / scale)`` clamped to the int8 range.

    Args:
        lo (float): Range minimum
        hi (float): Range maximum

    Returns:
        QuantParams: Per-tensor parameters
    """
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise InvalidArgument('Activation ranges must be finite.')
    if hi == lo:
        lo, hi = lo - DEGENERATE_MARGIN, hi + DEGENERATE_MARGIN
    scale = (hi - lo) / 255
    zero_point = int(np.clip(round_half_away(-128 - lo / scale), QMIN, QMAX))
    return QuantParams(scale, zero_point)


def quantize(values, params):
    """``clamp(round(v / scale) + zero_point, -128, 127)``, rounding half away from zero.

    Args:
        values (ndarray): Real values
        params (QuantParams): Quantization parameters

    Returns:
        ndarray: int8 values
    """
    q = round_half_away(np.asarray(values, dtype=np.float64) / params.scale) + params.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize(q, params):
    """``scale * (q - zero_point)`` in double precision."""
    return params.scale * (np.asarray(q, dtype=np.float64) - params.zero_point)


def quantize_tensor(values, symmetric=False, axis=None):
    """Quantizes a tensor to int8.

    Symmetric quantization (weights) uses ``scale = max|v| / 127`` and zero
    point 0, per channel along ``axis`` (the last axis for HWIO kernels and
    (in, out) matrices) or per tensor when ``axis`` is `None`; an all-zero
    channel gets scale 1. Asymmetric quantization (activations) is per tensor
    over the value range widened to include 0.

    Args:
        values (ndarray): Finite real values
        symmetric (bool): Symmetric (weights) or asymmetric (activations). Defaults to `False`.
        axis (int): Channel axis of symmetric quantization; must be -1 or the last axis

    Returns:
        tuple: (int8 values, QuantParams)
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidArgument('Cannot quantize non-finite values.')
    if not symmetric:
        params = activation_params(values.min(initial=0.0), values.max(initial=0.0))
        return quantize(values, params), params
    if axis is None:
        max_abs = float(np.max(np.abs(values), initial=0.0))
        scale = max_abs / 127 if max_abs > 0 else 1.0
    else:
        if axis not in (-1, values.ndim - 1):
            raise InvalidArgument('Per-channel quantization runs along the last axis.')
        max_abs = np.max(np.abs(values.reshape(-1, values.shape[-1])), axis=0, initial=0.0)
        scale = np.where(max_abs > 0, max_abs / 127, 1.0)
    params = QuantParams(scale, 0)
    return quantize(values, params), params


def requant_multiplier(s_in, s_w, s_out):
    """Decomposes ``M = s_in * s_w / s_out`` as ``(M0 / 2**31) * 2**shift``.

    Args:
        s_in (float): Input scale
        s_w (float): Weight scale
        s_out (float): Output scale

    Returns:
        tuple: (M0 in [2**30, 2**31), shift)
    """
    if min(s_in, s_w, s_out) <= 0:
        raise InvalidArgument('Scales must be positive.')
    m = s_in * s_w / s_out
    if not (math.isfinite(m) and m > 0):
        raise InvalidArgument(f'Invalid requantization multiplier {m!r}.')
    mantissa, shift = math.frexp(m)
    m0 = int(round_half_away(mantissa * 2 ** 31))
    if m0 == 2 ** 31:
        m0 //= 2
        shift += 1
    return m0, shift


class BatchNormParams(NamedTuple):
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float


def _bn_scale(bn):
    denom = np.asarray(bn.var, dtype=np.float64) + bn.eps
    if np.any(denom <= 0):
        raise InvalidModel('BN variance + epsilon must be positive to fold.')
    return np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(denom)


def fold_batchnorm(conv_w, conv_b, bn):
    """Folds a BN that directly follows a conv/dense layer into its weights.

    ``w' = w * gamma / sqrt(var + eps)`` per output channel and
    ``b' = (b - mean) * gamma / sqrt(var + eps) + beta``.

    Args:
        conv_w (ndarray): Weights, output channels on the last axis
        conv_b (ndarray): Bias
        bn (BatchNormParams): BN parameters

    Returns:
        tuple: (folded weights, folded bias) in double precision
    """
    a = _bn_scale(bn)
    w = np.asarray(conv_w, dtype=np.float64) * a
    b = (np.asarray(conv_b, dtype=np.float64) - bn.mean) * a + bn.beta
    return w, b


@dataclass
class FoldedLayer:
    """A BN-free layer of a folded model.

    Conv and dense layers compute ``sign * relu(x @ w + b) + offset`` when a BN
    follows the ReLU (``sign`` and ``offset`` per channel), otherwise
    ``relu?(x @ w + b)``.

    Args:
        kind (string): conv2d, dense, maxpool or flatten
        source (string): Name of the original tensor this layer's output equals
        weight (ndarray): Folded weights
        bias (ndarray): Folded bias
        relu (bool): Whether a ReLU is applied
        sign (ndarray): Per-channel sign of the post-ReLU BN scale
        offset (ndarray): Per-channel post-ReLU BN offset
    """
    kind: str
    source: str
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    relu: bool = False
    sign: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None


@dataclass
class FoldedModel:
    config: ModelConfig
    layers: List[FoldedLayer]


def tensor_name(index, layer):
    return f'{index}:{layer.kind}'


def _bn_params(model, index):
    p = model.params
    return BatchNormParams(p[f'{index}.gamma'], p[f'{index}.beta'], p[f'{index}.moving_mean'],
                           p[f'{index}.moving_var'], model.config.bn_epsilon)


def fold_model(model):
    """Folds every BN into its conv/dense layer and drops dropout.

    A BN before the ReLU folds into the weights directly. A BN after the ReLU
    (the Conv-ReLU-BN block) is split into a positive per-channel scale, which
    commutes with the ReLU and folds into the weights, and a per-channel sign
    and offset applied after the ReLU; the integer kernels absorb both into
    their requantization.

    Args:
        model (Model): Float model

    Returns:
        FoldedModel: Functionally equivalent BN-free model
    """
    layers = model.config.layers
    folded = []
    i = 0
    while i < len(layers):
        layer = layers[i]
        if layer.kind in ('conv2d', 'dense'):
            w = model.params[f'{i}.weight'].astype(np.float64)
            b = model.params[f'{i}.bias'].astype(np.float64)
            out = FoldedLayer(layer.kind, tensor_name(i, layer))
            j = i + 1
            if j < len(layers) and layers[j].kind == 'batchnorm':
                w, b = fold_batchnorm(w, b, _bn_params(model, j))
                j += 1
                if j < len(layers) and layers[j].kind == 'relu':
                    out.relu = True
                    j += 1
            elif j < len(layers) and layers[j].kind == 'relu':
                out.relu = True
                j += 1
                if j < len(layers) and layers[j].kind == 'batchnorm':
                    bn = _bn_params(model, j)
                    a = _bn_scale(bn)
                    w, b = w * np.abs(a), b * np.abs(a)
                    out.sign = np.sign(a)
                    out.offset = np.asarray(bn.beta, dtype=np.float64) - bn.mean * a
                    j += 1
            out.weight, out.bias = w, b
            out.source = tensor_name(j - 1, layers[j - 1])
            folded.append(out)
            i = j
        elif layer.kind in ('maxpool', 'flatten'):
            folded.append(FoldedLayer(layer.kind, tensor_name(i, layer)))
            i += 1
        elif layer.kind in ('dropout', 'softmax'):
            i += 1
        else:
            raise InvalidModel(f'Layer {i} ({layer.kind}) does not follow a conv or dense layer and cannot be folded.')
    return FoldedModel(model.config, folded)


def folded_forward(folded, batch):
    """Evaluates a folded model in double precision.

    Args:
        folded (FoldedModel): Folded model
        batch (ndarray): Input of shape (N, side, side, 1)

    Returns:
        ndarray: Probabilities (N, classes)
    """
    x = np.asarray(batch, dtype=np.float64)
    for layer in folded.layers:
        if layer.kind == 'conv2d':
            x = conv2d_fwd(x, layer.weight, layer.bias)
        elif layer.kind == 'dense':
            x = dense_fwd(x, layer.weight, layer.bias)
        elif layer.kind == 'maxpool':
            x = maxpool_fwd(x)
        elif layer.kind == 'flatten':
            x = x.reshape(x.shape[0], -1)
        if layer.relu:
            x = np.maximum(x, 0)
        if layer.sign is not None:
            x = layer.sign * x + layer.offset
    return softmax_fwd(x)


@dataclass
class CalibrationRanges:
    """Observed (min, max) per activation tensor; every range includes 0.

    Args:
        ranges (dict): Tensor name to (min, max)
        samples (int): Number of samples observed
    """
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    samples: int = 0

    def observe(self, name, values):
        lo, hi = min(float(np.min(values)), 0.0), max(float(np.max(values)), 0.0)
        if name in self.ranges:
            old_lo, old_hi = self.ranges[name]
            lo, hi = min(lo, old_lo), max(hi, old_hi)
        self.ranges[name] = (lo, hi)

    def merge(self, other):
        """Associative, commutative union of two calibrations."""
        merged = CalibrationRanges(dict(self.ranges), self.samples + other.samples)
        for name, (lo, hi) in other.ranges.items():
            merged.observe(name, np.array([lo, hi]))
        return merged

    def bounds(self, name):
        """Range of a tensor, with degenerate ranges widened by 1e-3 on both sides."""
        if name not in self.ranges:
            raise InvalidCalibration(f'No calibration range for tensor {name!r}.')
        lo, hi = self.ranges[name]
        if lo == hi:
            return lo - DEGENERATE_MARGIN, hi + DEGENERATE_MARGIN
        return lo, hi


def calibrate(model, samples, batch_size=16):
    """Measures activation ranges over a representative set.

    The input range always covers [0, 1], the domain of normalized images.

    Args:
        model (Model): Float model
        samples (ndarray or iterable): Preprocessed tensors, (N, side, side, 1) or a sequence of (1, side, side, 1)
        batch_size (int): Forward batch size. Defaults to 16.

    Returns:
        CalibrationRanges: Ranges of the input and of every layer output
    """
    if isinstance(samples, np.ndarray):
        batch = samples
    else:
        samples = list(samples)
        batch = np.concatenate(samples) if samples else np.empty((0,))
    if batch.shape[0] == 0:
        raise InvalidArgument('Calibration needs at least one representative sample.')
    ranges = CalibrationRanges()
    ranges.observe(INPUT, np.array([0.0, 1.0]))
    for start in range(0, batch.shape[0], batch_size):
        chunk = batch[start:start + batch_size]
        trace = []
        forward(model, chunk, 'infer', trace=trace)
        ranges.observe(INPUT, chunk)
        for index, (layer, out) in enumerate(zip(model.config.layers, trace)):
            ranges.observe(tensor_name(index, layer), out)
        ranges.samples += chunk.shape[0]
    log.debug('Calibrated %d tensors on %d samples', len(ranges.ranges), ranges.samples)
    return ranges


@dataclass
class QLayer:
    """One layer of the integer chain.

    Conv/dense layers compute, per output channel ``c``::

        acc = sum((q_in - zp_in) * q_w) + bias            (int32)
        acc = sign * relu(acc) + offset                    (relu, sign only if set)
        q_out = clamp(zp_out + round(acc * M0 * 2**(shift - 31)), -128, 127)

    Args:
        kind (string): conv2d, dense, maxpool or flatten
        input_qp (QuantParams): Expected input parameters
        output_qp (QuantParams): Output parameters
        weight (ndarray): int8 weights
        bias (ndarray): int32 bias with scale ``input_scale * weight_scale``
        weight_scale (ndarray): Per-channel weight scales
        multiplier (ndarray): Per-channel M0 in [2**30, 2**31)
        shift (ndarray): Per-channel shift
        relu (bool): Whether a ReLU is applied to the accumulator
        sign (ndarray): Per-channel sign (+1, -1 or 0)
        offset (ndarray): Per-channel offset in accumulator units
    """
    kind: str
    input_qp: QuantParams
    output_qp: QuantParams
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    weight_scale: Optional[np.ndarray] = None
    multiplier: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None
    relu: bool = False
    sign: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None


@dataclass
class QModel:
    """Folded, calibrated integer model.

    Args:
        config (ModelConfig): Source architecture
        input_qp (QuantParams): Input quantization
        layers (list): Integer layer chain
        logits_qp (QuantParams): Quantization of the final logits
    """
    config: ModelConfig
    input_qp: QuantParams
    layers: List[QLayer]
    logits_qp: QuantParams


def _to_int32(values, what):
    values = round_half_away(values)
    if np.any(np.abs(values) > INT32_MAX):
        raise InvalidModel(f'{what} does not fit into int32.')
    return values.astype(np.int32)


def quantize_layer(folded_layer, input_qp, output_qp):
    """Quantizes one folded conv/dense layer.

    Args:
        folded_layer (FoldedLayer): Float layer
        input_qp (QuantParams): Input activation parameters
        output_qp (QuantParams): Output activation parameters

    Returns:
        QLayer: Integer layer
    """
    q_w, w_qp = quantize_tensor(folded_layer.weight, symmetric=True, axis=-1)
    terms = int(np.prod(q_w.shape[:-1]))
    channels = q_w.shape[-1]
    weight_scale = np.broadcast_to(w_qp.scale, (channels,)).astype(np.float64)
    acc_scale = input_qp.scale * weight_scale
    bias = _to_int32(folded_layer.bias / acc_scale, 'Bias')
    # worst-case |sum of products| plus |bias| must stay inside int32
    if terms * 255 * 127 + int(np.max(np.abs(bias.astype(np.int64)), initial=0)) > INT32_MAX:
        raise InvalidModel(f'{terms} accumulation terms plus the bias could overflow the int32 accumulator.')
    decomposed = [requant_multiplier(input_qp.scale, s_w, output_qp.scale) for s_w in weight_scale]
    if max(shift for _, shift in decomposed) > 31:
        raise InvalidModel('Requantization multiplier exceeds 2**31.')
    sign = folded_layer.sign if folded_layer.sign is not None else np.ones(channels)
    offset = folded_layer.offset if folded_layer.offset is not None else np.zeros(channels)
    return QLayer(folded_layer.kind, input_qp, output_qp, weight=q_w,
                  bias=bias, weight_scale=weight_scale,
                  multiplier=np.array([m0 for m0, _ in decomposed], dtype=np.int64),
                  shift=np.array([shift for _, shift in decomposed], dtype=np.int64),
                  relu=folded_layer.relu, sign=sign.astype(np.int8),
                  offset=_to_int32(offset / acc_scale, 'BN offset'))


def quantize_model(model, ranges):
    """Builds the integer model from a float model and its calibration.

    Args:
        model (Model): Float model (folded internally)
        ranges (CalibrationRanges): Calibration of the same model

    Returns:
        QModel: The integer model
    """
    folded = fold_model(model)
    input_qp = activation_params(*ranges.bounds(INPUT))
    current = input_qp
    layers = []
    for layer in folded.layers:
        if layer.kind in ('conv2d', 'dense'):
            output_qp = activation_params(*ranges.bounds(layer.source))
            layers.append(quantize_layer(layer, current, output_qp))
            current = output_qp
        else:
            layers.append(QLayer(layer.kind, current, current))
    return QModel(model.config, input_qp, layers, current)


def _architecture(qmodel):
    return json.dumps({
        'model': json.loads(qmodel.config.to_text()),
        'layers': [{'kind': layer.kind, 'relu': layer.relu} for layer in qmodel.layers],
    }, sort_keys=True, separators=(',', ':'))


def save_qmodel(qmodel, path):
    """Writes a QModel to a DRCNN1 container.

    Args:
        qmodel (QModel): Integer model
        path (string): Target file

    Returns:
        int: Container size in bytes
    """
    tensors = {}
    qparams = {INPUT: (qmodel.input_qp.scale, qmodel.input_qp.zero_point)}
    for index, layer in enumerate(qmodel.layers):
        qparams[f'{index}.output'] = (layer.output_qp.scale, layer.output_qp.zero_point)
        if layer.weight is None:
            continue
        tensors[f'{index}.weight'] = layer.weight
        tensors[f'{index}.bias'] = layer.bias
        tensors[f'{index}.weight_scale'] = layer.weight_scale.astype(np.float32)
        tensors[f'{index}.multiplier'] = layer.multiplier.astype(np.int32)
        tensors[f'{index}.shift'] = layer.shift.astype(np.int8)
        tensors[f'{index}.sign'] = layer.sign
        tensors[f'{index}.offset'] = layer.offset
    return write_container(path, KIND_QUANT, _architecture(qmodel), tensors, qparams)


def load_qmodel(path):
    """Reads a QModel from a DRCNN1 container.

    Args:
        path (string): Container file

    Returns:
        QModel: The integer model
    """
    container = read_container(path)
    if container.kind != KIND_QUANT:
        raise ContainerError(f'{path} holds a float model, not a quantized model.')
    arch = json.loads(container.architecture)
    config = ModelConfig.from_text(arch['model'])

    def qp(name):
        if name not in container.qparams:
            raise ContainerError(f'{path}: missing quantization record {name!r}.')
        scale, zero_point = container.qparams[name]
        return QuantParams(float(scale), int(zero_point))

    t = container.tensors
    input_qp = current = qp(INPUT)
    layers = []
    for index, spec in enumerate(arch['layers']):
        output_qp = qp(f'{index}.output')
        layer = QLayer(spec['kind'], current, output_qp, relu=spec['relu'])
        if f'{index}.weight' in t:
            layer.weight = t[f'{index}.weight']
            layer.bias = t[f'{index}.bias']
            layer.weight_scale = t[f'{index}.weight_scale'].astype(np.float64)
            layer.multiplier = t[f'{index}.multiplier'].astype(np.int64)
            layer.shift = t[f'{index}.shift'].astype(np.int64)
            layer.sign = t[f'{index}.sign']
            layer.offset = t[f'{index}.offset']
        layers.append(layer)
        current = output_qp
    return QModel(config, input_qp, layers, current)
