"""Backpropagation, Adadelta, learning-rate plateau scheduling and the
training loop with best-model checkpointing.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from drnet.augment import AugmentConfig, augment, sample_rng
from drnet.errors import InvalidArgument, InvalidState, OptimizerStepRejected, TrainingDiverged
from drnet.network import conv2d_fwd, forward, is_trainable
from drnet.utils import one_hot

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    Args:
        batch_size (int): Mini-batch size. Defaults to 32.
        epochs (int): Number of epochs. Defaults to 200.
        learning_rate (float): Initial outer learning rate of Adadelta. Defaults to 1.8.
        rho (float): Adadelta decay. Defaults to 0.95.
        epsilon (float): Adadelta epsilon. Defaults to 1e-6.
        plateau_factor (float): LR multiplier on a plateau. Defaults to 0.1.
        plateau_patience (int): Epochs without improvement before reducing. Defaults to 5.
        plateau_monitor (string): Monitored quantity of the scheduler. Defaults to ``'val_loss'``.
        checkpoint_monitor (string): Monitored quantity of the checkpoint. Defaults to ``'val_acc'``.
        eval_batch_size (int): Batch size of validation passes. Defaults to 64.
        seed (int): Seed of shuffling and dropout. Defaults to 0.
    """
    batch_size: int = 32
    epochs: int = 200
    learning_rate: float = 1.8
    rho: float = 0.95
    epsilon: float = 1e-6
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_monitor: str = 'val_loss'
    checkpoint_monitor: str = 'val_acc'
    eval_batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise InvalidArgument('Batch sizes must be at least 1.')
        if self.epochs < 0:
            raise InvalidArgument('epochs must be non-negative.')
        if not 0 < self.plateau_factor < 1:
            raise InvalidArgument('plateau_factor must lie in (0, 1).')
        if self.plateau_patience < 1:
            raise InvalidArgument('plateau_patience must be at least 1.')
        if not 0 < self.rho < 1 or self.epsilon <= 0:
            raise InvalidArgument('Adadelta needs rho in (0, 1) and a positive epsilon.')
        if self.plateau_monitor != 'val_loss':
            raise InvalidArgument('The plateau scheduler monitors val_loss.')
        if self.checkpoint_monitor not in ('val_acc', 'train_acc'):
            raise InvalidArgument('checkpoint_monitor must be val_acc or train_acc.')


@dataclass
class History:
    """Per-epoch training record.

    Args:
        epoch (list): Epoch numbers, starting at 1
        lr (list): Learning rate used during the epoch
        train_loss (list): Mean training loss
        train_acc (list): Training accuracy (train-mode forward)
        val_loss (list): Validation loss
        val_acc (list): Validation accuracy
        best_acc (list): Best monitored accuracy seen so far
        initial_val_acc (float): Validation accuracy before the first update
    """
    epoch: List[int] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    train_acc: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_acc: List[float] = field(default_factory=list)
    best_acc: List[float] = field(default_factory=list)
    initial_val_acc: Optional[float] = None

    COLUMNS = ('epoch', 'lr', 'train_loss', 'train_acc', 'val_loss', 'val_acc')

    def __len__(self):
        return len(self.epoch)

    def record(self, lr, train_loss, train_acc, val_loss, val_acc, best_acc):
        self.epoch.append(len(self.epoch) + 1)
        self.lr.append(float(lr))
        self.train_loss.append(float(train_loss))
        self.train_acc.append(float(train_acc))
        self.val_loss.append(float(val_loss))
        self.val_acc.append(float(val_acc))
        self.best_acc.append(float(best_acc))

    def to_csv(self, path):
        """Writes one row per epoch: epoch, lr, train_loss, train_acc, val_loss, val_acc."""
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, column) for column in self.COLUMNS)):
                writer.writerow([repr(value) for value in row])


class Split(NamedTuple):
    """Images of shape (N, side, side, 1) and integer labels of shape (N,)."""
    images: np.ndarray
    labels: np.ndarray


def cross_entropy(probs, labels):
    """Mean categorical cross-entropy, probabilities clamped at 1e-12.

    Args:
        probs (ndarray): Probabilities (N, classes)
        labels (ndarray): One-hot labels (N, classes) or integer labels (N,)

    Returns:
        float: Mean loss, accumulated in double precision
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if probs.ndim != 2 or labels.shape[0] != probs.shape[0]:
            raise InvalidArgument(f'Label shape {labels.shape} does not match probabilities {probs.shape}.')
        labels = one_hot(labels, probs.shape[1])
    if labels.shape != probs.shape or probs.ndim != 2:
        raise InvalidArgument(f'Label shape {labels.shape} does not match probabilities {probs.shape}.')
    p_true = np.sum(probs.astype(np.float64) * labels, axis=1)
    return float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))


# Layer backward kernels

def conv2d_bwd(dout, x, w):
    """Gradients of :func:`drnet.network.conv2d_fwd`.

    Returns:
        tuple: (d input, d kernel, d bias)
    """
    pad = w.shape[0] // 2
    windows = sliding_window_view(np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))),
                                  (w.shape[0], w.shape[1]), axis=(1, 2))
    dw = np.tensordot(windows, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2))
    flipped = w[::-1, ::-1].transpose(0, 1, 3, 2)
    dx = conv2d_fwd(dout, flipped, np.zeros(flipped.shape[3], dtype=dout.dtype))
    return dx, dw, db


def relu_bwd(dout, x):
    return dout * (x > 0)


def batchnorm_bwd(dout, xhat, inv_std, gamma):
    """Gradients of training-mode batch normalization, through the batch statistics.

    Returns:
        tuple: (d input, d gamma, d beta)
    """
    axes = tuple(range(dout.ndim - 1))
    m = np.prod([dout.shape[axis] for axis in axes])
    dgamma = np.sum(dout * xhat, axis=axes)
    dbeta = np.sum(dout, axis=axes)
    dxhat = dout * gamma
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes))
    return dx, dgamma, dbeta


def maxpool_bwd(dout, x):
    """Routes each pooled gradient to the first maximum of its 2x2 window."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    windows = x[:, :h2 * 2, :w2 * 2, :].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    windows = windows.reshape(n, h2, w2, c, 4)
    winner = np.argmax(windows, axis=-1)
    mask = np.arange(4) == winner[..., np.newaxis]
    routed = (mask * dout[..., np.newaxis]).reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros_like(x)
    dx[:, :h2 * 2, :w2 * 2, :] = routed.reshape(n, h2 * 2, w2 * 2, c)
    return dx


def dense_bwd(dout, x, w):
    """Returns (d input, d weight, d bias)."""
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def backward(model, cache, labels):
    """Backpropagates softmax cross-entropy through the network.

    The gradient at the logits is ``(probs - onehot) / N``.

    Args:
        model (Model): The model the cache was computed with
        cache (ForwardCache): Cache of a train-mode forward pass on the batch
        labels (ndarray): Integer labels (N,) or one-hot labels (N, classes)

    Returns:
        dict: Gradient of every trainable parameter, same shapes
    """
    if cache is None:
        raise InvalidState('backward needs the cache of a train-mode forward pass.')
    config, params = model.config, model.params
    probs = cache.probs
    labels = np.asarray(labels)
    target = one_hot(labels, config.num_classes) if labels.ndim == 1 else labels
    if target.shape != probs.shape:
        raise InvalidArgument(f'Label shape {target.shape} does not match probabilities {probs.shape}.')
    dout = ((probs - target) / probs.shape[0]).astype(probs.dtype)
    grads = {}
    for index in reversed(range(len(config.layers))):
        layer = config.layers[index]
        x, extra = cache.inputs[index], cache.aux[index]
        if layer.kind == 'conv2d':
            dout, grads[f'{index}.weight'], grads[f'{index}.bias'] = conv2d_bwd(dout, x, params[f'{index}.weight'])
        elif layer.kind == 'dense':
            dout, grads[f'{index}.weight'], grads[f'{index}.bias'] = dense_bwd(dout, x, params[f'{index}.weight'])
        elif layer.kind == 'relu':
            dout = relu_bwd(dout, x)
        elif layer.kind == 'batchnorm':
            xhat, inv_std = extra
            dout, grads[f'{index}.gamma'], grads[f'{index}.beta'] = \
                batchnorm_bwd(dout, xhat, inv_std, params[f'{index}.gamma'])
        elif layer.kind == 'maxpool':
            dout = maxpool_bwd(dout, x)
        elif layer.kind == 'flatten':
            dout = dout.reshape(x.shape)
        elif layer.kind == 'dropout':
            if extra is not None:
                dout = dout * extra
    return grads


@dataclass
class AdadeltaState:
    """Adadelta accumulators and hyperparameters.

    Args:
        square_grad (dict): Running average E[g^2] per parameter
        square_delta (dict): Running average E[dx^2] per parameter
        rho (float): Decay. Defaults to 0.95.
        epsilon (float): Conditioning constant. Defaults to 1e-6.
        lr (float): Outer learning rate. Defaults to 1.8.
    """
    square_grad: Dict[str, np.ndarray] = field(default_factory=dict)
    square_delta: Dict[str, np.ndarray] = field(default_factory=dict)
    rho: float = 0.95
    epsilon: float = 1e-6
    lr: float = 1.8

    @classmethod
    def create(cls, params, lr=1.8, rho=0.95, epsilon=1e-6):
        """Zero-initialized accumulators for every trainable parameter."""
        names = [name for name in params if is_trainable(name)]
        return cls({name: np.zeros_like(params[name]) for name in names},
                   {name: np.zeros_like(params[name]) for name in names},
                   rho=rho, epsilon=epsilon, lr=lr)

    def tensors(self):
        """Accumulators keyed for storage in a checkpoint container."""
        out = {f'opt/square_grad/{name}': value for name, value in self.square_grad.items()}
        out.update({f'opt/square_delta/{name}': value for name, value in self.square_delta.items()})
        return out


def adadelta_step(params, grads, state):
    """Applies one Adadelta update in place.

    Per element: ``Eg = rho*Eg + (1-rho)*g^2``,
    ``dx = -sqrt(Ed+eps)/sqrt(Eg+eps) * g``, ``Ed = rho*Ed + (1-rho)*dx^2``,
    ``x = x + lr*dx``.

    Args:
        params (dict): Parameters, updated in place
        grads (dict): Gradients of (a subset of) the parameters
        state (AdadeltaState): Accumulators, updated in place

    Returns:
        tuple: (params, state)
    """
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise InvalidArgument(f'Gradient of {name!r} has shape {grad.shape}, expected {params[name].shape}.')
        if not np.all(np.isfinite(grad)):
            raise OptimizerStepRejected(name)
    rho, eps = state.rho, state.epsilon
    for name, grad in grads.items():
        if name not in state.square_grad:
            state.square_grad[name] = np.zeros_like(params[name])
            state.square_delta[name] = np.zeros_like(params[name])
        square_grad = state.square_grad[name]
        square_delta = state.square_delta[name]
        square_grad *= rho
        square_grad += (1 - rho) * grad * grad
        delta = -np.sqrt(square_delta + eps) / np.sqrt(square_grad + eps) * grad
        square_delta *= rho
        square_delta += (1 - rho) * delta * delta
        params[name] += state.lr * delta
    return params, state


class PlateauScheduler:
    """Multiplies the learning rate by ``factor`` once the monitored loss has
    not strictly improved on its best value for ``patience`` epochs. The wait
    counter restarts after a reduction; there is no cooldown and no minimum.

    Args:
        lr (float): Initial learning rate
        factor (float): Reduction factor. Defaults to 0.1.
        patience (int): Epochs to wait. Defaults to 5.
    """

    def __init__(self, lr, factor=0.1, patience=5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.wait = 0

    def step(self, loss):
        """Records one epoch's monitored loss and returns the learning rate for the next epoch."""
        if loss < self.best:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
                log.info('Validation loss stalled for %d epochs; learning rate reduced to %g',
                         self.patience, self.lr)
        return self.lr


def reduce_lr_on_plateau(history, cfg):
    """Learning rate for the epoch after ``history``, replaying the plateau rule.

    Args:
        history (History): At least one completed epoch
        cfg (TrainConfig): Scheduler parameters

    Returns:
        float: The new learning rate
    """
    if len(history) == 0:
        raise InvalidArgument('reduce_lr_on_plateau needs at least one completed epoch.')
    scheduler = PlateauScheduler(history.lr[0], cfg.plateau_factor, cfg.plateau_patience)
    for loss in history.val_loss:
        scheduler.step(loss)
    return scheduler.lr


def _check_split(split, name):
    if split is None or len(split.labels) == 0:
        raise InvalidArgument(f'The {name} split is empty.')
    if split.images.shape[0] != split.labels.shape[0]:
        raise InvalidArgument(f'The {name} split has {split.images.shape[0]} images but '
                              f'{split.labels.shape[0]} labels.')


def evaluate(model, split, batch_size=64):
    """Infer-mode loss and accuracy over a split.

    Returns:
        tuple: (mean loss, accuracy)
    """
    loss_sum, correct = 0.0, 0
    for start in range(0, len(split.labels), batch_size):
        images = split.images[start:start + batch_size]
        labels = split.labels[start:start + batch_size]
        probs, _ = forward(model, images, 'infer')
        loss_sum += cross_entropy(probs, labels) * len(labels)
        correct += int(np.sum(np.argmax(probs, axis=1) == labels))
    return loss_sum / len(split.labels), correct / len(split.labels)


def fit(model, train, val, cfg=TrainConfig(), augment_cfg: Optional[AugmentConfig] = None,
        checkpoint=None):
    """Trains a model with Adadelta, plateau scheduling and best-model checkpointing.

    Every epoch shuffles the training split with a seeded permutation, applies
    per-sample augmentation when ``augment_cfg`` is given, evaluates the
    validation split and keeps the parameters with the highest monitored
    accuracy.

    Args:
        model (Model): Initialized model, updated in place
        train (Split): Training images and labels
        val (Split): Validation images and labels
        cfg (TrainConfig): Hyperparameters
        augment_cfg (AugmentConfig): Augmentation parameters, or `None` to disable augmentation
        checkpoint (callable): Called as ``checkpoint(best_model, state, epoch)`` on every improvement

    Returns:
        tuple: (best Model, History)
    """
    _check_split(train, 'train')
    _check_split(val, 'validation')
    state = AdadeltaState.create(model.params, lr=cfg.learning_rate, rho=cfg.rho, epsilon=cfg.epsilon)
    scheduler = PlateauScheduler(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience)
    history = History()
    history.initial_val_acc = evaluate(model, val, cfg.eval_batch_size)[1]
    log.info('Initial validation accuracy %.4f', history.initial_val_acc)
    best_acc, best = -math.inf, model.copy()
    n = len(train.labels)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        dropout_rng = np.random.default_rng([cfg.seed, epoch, 1])
        state.lr = scheduler.lr
        loss_sum, correct = 0.0, 0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            images = train.images[idx]
            if augment_cfg is not None:
                images = np.concatenate([augment(images[k:k + 1], sample_rng(augment_cfg.seed, i, epoch), augment_cfg)
                                         for k, i in enumerate(idx)])
            labels = train.labels[idx]
            probs, cache = forward(model, images, 'train', dropout_rng)
            loss = cross_entropy(probs, labels)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch + 1, batch_no, loss)
            adadelta_step(model.params, backward(model, cache, labels), state)
            for name, value in cache.bn_updates.items():
                model.params[name] = value.astype(model.params[name].dtype)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == labels))
        train_loss, train_acc = loss_sum / n, correct / n
        val_loss, val_acc = evaluate(model, val, cfg.eval_batch_size)
        monitored = val_acc if cfg.checkpoint_monitor == 'val_acc' else train_acc
        if monitored > best_acc:
            best_acc, best = monitored, model.copy()
            log.info('Epoch %d: %s improved to %.4f, checkpoint saved', epoch + 1, cfg.checkpoint_monitor, best_acc)
            if checkpoint is not None:
                checkpoint(best, state, epoch + 1)
        history.record(state.lr, train_loss, train_acc, val_loss, val_acc, best_acc)
        log.info('Epoch %d/%d lr=%g loss=%.4f acc=%.4f val_loss=%.4f val_acc=%.4f', epoch + 1, cfg.epochs,
                 state.lr, train_loss, train_acc, val_loss, val_acc)
        scheduler.step(val_loss)
    return best, history
