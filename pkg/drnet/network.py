"""The Conv-ReLU-BN classifier and its float forward pass.

Tensors are NHWC numpy arrays; conv kernels are HWIO and dense matrices are
(in, out). Computation runs in the dtype of the parameters, so a model built
with ``dtype=np.float64`` evaluates in double precision.
"""
import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from drnet.container import KIND_FLOAT, read_container, write_container
from drnet.errors import ContainerError, InvalidArgument

LAYER_KINDS = ('conv2d', 'relu', 'batchnorm', 'maxpool', 'flatten', 'dense', 'dropout', 'softmax')
DEFAULT_CHANNELS = (16, 32, 64, 128, 128, 128, 128)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the architecture.

    Args:
        kind (string): One of ``LAYER_KINDS``
        out_channels (int): Output channels of a conv2d layer
        kernel (int): Odd kernel side of a conv2d layer (stride 1, same padding). Defaults to 3.
        units (int): Output units of a dense layer
        rate (float): Drop rate of a dropout layer
    """
    kind: str
    out_channels: int = 0
    kernel: int = 3
    units: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidArgument(f'Unknown layer kind {self.kind!r}.')


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and BN hyperparameters.

    Args:
        layers (tuple): Ordered ``LayerSpec`` sequence
        input_side (int): Side of the square single-channel input. Defaults to 256.
        num_classes (int): Number of output classes. Defaults to 5.
        bn_epsilon (float): BN variance epsilon. Defaults to 1e-3.
        bn_momentum (float): BN moving-statistics momentum. Defaults to 0.99.
        dropout_rate (float): Default dropout rate. Defaults to 0.5.
    """
    layers: Tuple[LayerSpec, ...]
    input_side: int = 256
    num_classes: int = 5
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    dropout_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        layer_shapes(self)

    def to_text(self):
        """Canonical text serialization (sorted, compact JSON)."""
        return json.dumps(asdict(self), sort_keys=True, separators=(',', ':'))

    @classmethod
    def from_text(cls, text):
        data = json.loads(text) if isinstance(text, str) else dict(text)
        data['layers'] = tuple(LayerSpec(**layer) for layer in data['layers'])
        return cls(**data)

    @property
    def conv_blocks(self):
        return sum(1 for layer in self.layers if layer.kind == 'conv2d')


def build_config(channels=DEFAULT_CHANNELS, pool_blocks=None, dense_units=(2560,), input_side=256,
                 num_classes=5, dropout_rate=0.5, bn_order='post_relu', bn_epsilon=1e-3, bn_momentum=0.99):
    """Builds a Conv-ReLU-BN stack followed by dropout/dense layers.

    Args:
        channels (tuple): Output channels of every conv block
        pool_blocks (int): Number of leading blocks followed by a 2x2 maxpool.
                           Defaults to all blocks but the last.
        dense_units (tuple): Hidden dense widths (each followed by ReLU)
        input_side (int): Input side. Defaults to 256.
        num_classes (int): Output classes. Defaults to 5.
        dropout_rate (float): Rate of the dropout before each dense layer; 0 omits dropout.
        bn_order (string): ``'post_relu'`` (conv, relu, BN) or ``'pre_relu'`` (conv, BN, relu)
        bn_epsilon (float): BN epsilon
        bn_momentum (float): BN momentum

    Returns:
        ModelConfig: The architecture
    """
    if bn_order not in ('post_relu', 'pre_relu'):
        raise InvalidArgument(f'Unknown bn_order {bn_order!r}.')
    if pool_blocks is None:
        pool_blocks = len(channels) - 1
    layers: List[LayerSpec] = []
    for block, out_channels in enumerate(channels):
        layers.append(LayerSpec('conv2d', out_channels=out_channels))
        if bn_order == 'post_relu':
            layers += [LayerSpec('relu'), LayerSpec('batchnorm')]
        else:
            layers += [LayerSpec('batchnorm'), LayerSpec('relu')]
        if block < pool_blocks:
            layers.append(LayerSpec('maxpool'))
    layers.append(LayerSpec('flatten'))
    for units in tuple(dense_units) + (num_classes,):
        if dropout_rate > 0:
            layers.append(LayerSpec('dropout', rate=dropout_rate))
        layers.append(LayerSpec('dense', units=units))
        layers.append(LayerSpec('relu'))
    # the output layer ends in softmax instead of relu
    layers[-1] = LayerSpec('softmax')
    return ModelConfig(tuple(layers), input_side=input_side, num_classes=num_classes,
                       bn_epsilon=bn_epsilon, bn_momentum=bn_momentum, dropout_rate=dropout_rate)


def default_config():
    """Returns the default 7-block architecture.

    3x3 convs with (16, 32, 64, 128, 128, 128, 128) channels, 2x2 maxpool after
    blocks 1-6, flatten to 4x4x128, dropout, dense 2560, ReLU, dropout, dense 5,
    softmax; about 5.8 million parameters.

    Returns:
        ModelConfig: The default architecture
    """
    config = build_config()
    assert config.conv_blocks == 7
    return config


def layer_shapes(config):
    """Chains shapes through the architecture.

    Args:
        config (ModelConfig): The architecture

    Returns:
        list: Output shape (without batch axis) of every layer
    """
    if not config.layers or config.layers[-1].kind != 'softmax':
        raise InvalidArgument('The last layer must be a softmax.')
    shape: Tuple[int, ...] = (config.input_side, config.input_side, 1)
    shapes = []
    for index, layer in enumerate(config.layers):
        if layer.kind == 'conv2d':
            if len(shape) != 3 or layer.out_channels <= 0 or layer.kernel % 2 != 1:
                raise InvalidArgument(f'Layer {index}: invalid conv2d.')
            shape = (shape[0], shape[1], layer.out_channels)
        elif layer.kind == 'maxpool':
            if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                raise InvalidArgument(f'Layer {index}: maxpool needs a spatial input of side >= 2.')
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif layer.kind == 'flatten':
            shape = (int(np.prod(shape)),)
        elif layer.kind == 'dense':
            if len(shape) != 1 or layer.units <= 0:
                raise InvalidArgument(f'Layer {index}: dense needs a flat input and positive units.')
            shape = (layer.units,)
        elif layer.kind == 'dropout' and not 0 <= layer.rate < 1:
            raise InvalidArgument(f'Layer {index}: dropout rate must lie in [0, 1).')
        shapes.append(shape)
    if shapes[-1] != (config.num_classes,):
        raise InvalidArgument(f'The network must end in {config.num_classes} units, not {shapes[-1]}.')
    return shapes


def _input_shapes(config):
    return [(config.input_side, config.input_side, 1)] + layer_shapes(config)[:-1]


def parameter_shapes(config):
    """Names and shapes of all parameters.

    Args:
        config (ModelConfig): The architecture

    Returns:
        dict: Parameter name to shape, in layer order
    """
    shapes = {}
    for index, (layer, in_shape) in enumerate(zip(config.layers, _input_shapes(config))):
        if layer.kind == 'conv2d':
            shapes[f'{index}.weight'] = (layer.kernel, layer.kernel, in_shape[-1], layer.out_channels)
            shapes[f'{index}.bias'] = (layer.out_channels,)
        elif layer.kind == 'dense':
            shapes[f'{index}.weight'] = (in_shape[0], layer.units)
            shapes[f'{index}.bias'] = (layer.units,)
        elif layer.kind == 'batchnorm':
            for name in ('gamma', 'beta', 'moving_mean', 'moving_var'):
                shapes[f'{index}.{name}'] = (in_shape[-1],)
    return shapes


def param_count(config):
    """Total number of parameters, BN statistics included."""
    return int(sum(np.prod(shape) for shape in parameter_shapes(config).values()))


def is_trainable(name):
    return name.rsplit('.', 1)[1] in ('weight', 'bias', 'gamma', 'beta')


@dataclass
class Model:
    """Architecture plus parameters.

    Args:
        config (ModelConfig): The architecture
        params (dict): Parameter name to array
    """
    config: ModelConfig
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else np.dtype(np.float32)

    def copy(self):
        return Model(self.config, copy.deepcopy(self.params))


def init_model(config, seed=0, dtype=np.float32):
    """Initializes parameters: He-uniform weights, zero biases, BN gamma=1, beta=0,
    moving mean 0 and moving variance 1.

    Args:
        config (ModelConfig): The architecture
        seed (int): Seed of the initializer. Defaults to 0.
        dtype (type): Parameter dtype. Defaults to float32.

    Returns:
        Model: Freshly initialized model
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        kind = name.rsplit('.', 1)[1]
        if kind == 'weight':
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        elif kind in ('gamma', 'moving_var'):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return Model(config, params)


# Layer kernels

def conv2d_fwd(x, w, b):
    """Stride-1 convolution with zero 'same' padding.

    Args:
        x (ndarray): Input (N, H, W, C)
        w (ndarray): Kernel (K, K, C, O), K odd
        b (ndarray): Bias (O,)

    Returns:
        ndarray: Output (N, H, W, O)
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2] or w.shape[0] != w.shape[1] \
            or w.shape[0] % 2 != 1 or b.shape != (w.shape[3],):
        raise InvalidArgument(f'conv2d shape mismatch: input {x.shape}, kernel {w.shape}, bias {b.shape}.')
    pad = w.shape[0] // 2
    windows = sliding_window_view(np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))),
                                  (w.shape[0], w.shape[1]), axis=(1, 2))
    return np.tensordot(windows, w, axes=([3, 4, 5], [2, 0, 1])) + b


def relu_fwd(x):
    return np.maximum(x, 0)


def batchnorm_fwd(x, gamma, beta, mean, var, eps):
    """Inference-mode batch normalization over the last axis."""
    if x.shape[-1] != gamma.shape[0]:
        raise InvalidArgument(f'batchnorm shape mismatch: input {x.shape}, channels {gamma.shape}.')
    return gamma * (x - mean) / np.sqrt(var + eps) + beta


def batchnorm_train_fwd(x, gamma, beta, eps):
    """Training-mode batch normalization with batch statistics.

    Returns:
        tuple: (output, batch mean, batch variance, normalized input, inverse std)
    """
    if x.shape[-1] != gamma.shape[0]:
        raise InvalidArgument(f'batchnorm shape mismatch: input {x.shape}, channels {gamma.shape}.')
    axes = tuple(range(x.ndim - 1))
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, mean, var, xhat, inv_std


def maxpool_fwd(x):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    if x.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise InvalidArgument(f'maxpool needs (N, H, W, C) with H, W >= 2, got {x.shape}.')
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :h2 * 2, :w2 * 2, :].reshape(n, h2, 2, w2, 2, c).max(axis=(2, 4))


def dense_fwd(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise InvalidArgument(f'dense shape mismatch: input {x.shape}, weight {w.shape}, bias {b.shape}.')
    return x @ w + b


def dropout_fwd(x, rate, rng):
    """Inverted dropout: kept activations are divided by ``1 - rate``.

    Returns:
        tuple: (output, mask) where the mask already carries the scaling
    """
    if rate <= 0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def softmax_fwd(logits):
    """Row-wise softmax computed with max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    """Activations kept by a train-mode forward pass for backpropagation.

    Args:
        inputs (list): Input of every layer
        aux (list): Per-layer auxiliary values (BN statistics, dropout masks)
        probs (ndarray): Softmax output
        bn_updates (dict): New BN moving statistics to apply after the step
    """
    inputs: List[np.ndarray]
    aux: List[Optional[tuple]]
    probs: np.ndarray
    bn_updates: Dict[str, np.ndarray]


def _check_batch(model, batch):
    side = model.config.input_side
    if not isinstance(batch, np.ndarray) or batch.ndim != 4 or batch.shape[1:] != (side, side, 1):
        raise InvalidArgument(f'Expected a batch of shape (N, {side}, {side}, 1), '
                              f'got {getattr(batch, "shape", None)}.')
    if batch.shape[0] == 0:
        raise InvalidArgument('The batch is empty.')
    if not np.all(np.isfinite(batch)):
        raise InvalidArgument('The batch contains non-finite values.')


def forward(model, batch, mode='infer', rng=None, trace=None):
    """Runs the network.

    In ``'train'`` mode BN uses batch statistics and dropout is active; in
    ``'infer'`` mode BN uses moving statistics and dropout is the identity.

    Args:
        model (Model): The model
        batch (ndarray): Input of shape (N, side, side, 1)
        mode (string): ``'train'`` or ``'infer'``. Defaults to ``'infer'``.
        rng (numpy.random.Generator): Dropout stream, required in train mode
        trace (list): If given, the output of every layer is appended to it

    Returns:
        tuple: (probabilities of shape (N, classes), ForwardCache or None)
    """
    if mode not in ('train', 'infer'):
        raise InvalidArgument(f'Unknown mode {mode!r}.')
    if mode == 'train' and rng is None:
        raise InvalidArgument('Train mode needs a random generator for dropout.')
    _check_batch(model, batch)
    config, params = model.config, model.params
    train = mode == 'train'
    x = batch.astype(model.dtype, copy=False)
    inputs, aux, bn_updates = [], [], {}
    for index, layer in enumerate(config.layers):
        inputs.append(x)
        extra = None
        if layer.kind == 'conv2d':
            x = conv2d_fwd(x, params[f'{index}.weight'], params[f'{index}.bias'])
        elif layer.kind == 'dense':
            x = dense_fwd(x, params[f'{index}.weight'], params[f'{index}.bias'])
        elif layer.kind == 'relu':
            x = relu_fwd(x)
        elif layer.kind == 'batchnorm':
            gamma, beta = params[f'{index}.gamma'], params[f'{index}.beta']
            if train:
                x, mean, var, xhat, inv_std = batchnorm_train_fwd(x, gamma, beta, config.bn_epsilon)
                extra = (xhat, inv_std)
                momentum = config.bn_momentum
                bn_updates[f'{index}.moving_mean'] = \
                    momentum * params[f'{index}.moving_mean'] + (1 - momentum) * mean
                bn_updates[f'{index}.moving_var'] = \
                    momentum * params[f'{index}.moving_var'] + (1 - momentum) * var
            else:
                x = batchnorm_fwd(x, gamma, beta, params[f'{index}.moving_mean'],
                                  params[f'{index}.moving_var'], config.bn_epsilon)
        elif layer.kind == 'maxpool':
            x = maxpool_fwd(x)
        elif layer.kind == 'flatten':
            x = x.reshape(x.shape[0], -1)
        elif layer.kind == 'dropout':
            if train:
                x, extra = dropout_fwd(x, layer.rate, rng)
        elif layer.kind == 'softmax':
            x = softmax_fwd(x)
        aux.append(extra)
        if trace is not None:
            trace.append(x)
    if not train:
        return x, None
    return x, ForwardCache(inputs, aux, x, bn_updates)


def save_model(model, path, optimizer_state=None):
    """Writes a float model (and optionally its optimizer state) to a DRCNN1 container.

    Args:
        model (Model): The model
        path (string): Target file
        optimizer_state (AdadeltaState): Training state to store alongside the weights. Defaults to `None`.

    Returns:
        int: Container size in bytes
    """
    tensors = dict(model.params)
    if optimizer_state is not None:
        tensors.update(optimizer_state.tensors())
    return write_container(path, KIND_FLOAT, model.config.to_text(), tensors)


def load_model(path):
    """Reads a float model from a DRCNN1 container, ignoring stored optimizer state.

    Args:
        path (string): Container file

    Returns:
        Model: The model
    """
    container = read_container(path)
    if container.kind != KIND_FLOAT:
        raise ContainerError(f'{path} holds a quantized model, not a float model.')
    config = ModelConfig.from_text(container.architecture)
    params = {name: value for name, value in container.tensors.items() if not name.startswith('opt/')}
    expected = parameter_shapes(config)
    if set(params) != set(expected) or any(params[name].shape != shape for name, shape in expected.items()):
        raise ContainerError(f'{path}: parameters do not match the stored architecture.')
    return Model(config, params)
