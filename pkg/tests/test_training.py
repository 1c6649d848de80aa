import csv
import math

import numpy as np
import pytest

from drnet.augment import AugmentConfig
from drnet.dataset import synthesize_fundus
from drnet.errors import InvalidArgument, OptimizerStepRejected, TrainingDiverged
from drnet.network import build_config, init_model
from drnet.training import (AdadeltaState, History, PlateauScheduler, Split, TrainConfig, adadelta_step,
                            cross_entropy, evaluate, fit, reduce_lr_on_plateau)


def make_synthetic_split(per_class=10, side=32, seed=0):
    images, labels = [], []
    for label in range(5):
        for index in range(per_class):
            rgb = synthesize_fundus(label, side, np.random.default_rng([seed, label, index]))
            images.append(rgb[:, :, 1].astype(np.float32) / np.float32(255))
            labels.append(label)
    return Split(np.stack(images)[:, :, :, np.newaxis], np.array(labels))


def make_tiny_model(side=32, seed=0):
    config = build_config(channels=(8, 16), pool_blocks=2, dense_units=(32,), input_side=side, dropout_rate=0.0)
    return init_model(config, seed=seed)


def test_cross_entropy_examples():
    assert cross_entropy(np.eye(5)[[0, 3]], np.array([0, 3])) == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy(np.full((4, 5), 0.2), np.array([0, 1, 2, 4])) == pytest.approx(math.log(5))
    probs = np.array([[0.5, 0.5, 0, 0, 0], [0.25, 0.25, 0.25, 0.25, 0]])
    assert cross_entropy(probs, np.eye(5)[[0, 3]]) == pytest.approx((-math.log(0.5) - math.log(0.25)) / 2)
    assert cross_entropy(probs, np.array([0, 3])) == pytest.approx(1.0397, abs=1e-4)


def test_cross_entropy_clamps_zero_probability():
    assert cross_entropy(np.array([[0.0, 1.0, 0, 0, 0]]), np.array([0])) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_shape_mismatch():
    with pytest.raises(InvalidArgument):
        cross_entropy(np.full((2, 5), 0.2), np.array([0, 1, 2]))


def test_adadelta_first_step():
    params = {'w': np.zeros(1)}
    state = AdadeltaState.create(params, lr=1.8, rho=0.95, epsilon=1e-6)
    adadelta_step(params, {'w': np.ones(1)}, state)
    expected = -1.8 * math.sqrt(1e-6) / math.sqrt((1 - 0.95) + 1e-6)
    assert params['w'][0] == pytest.approx(expected, abs=1e-9)
    assert params['w'][0] == pytest.approx(-8.0498e-3, abs=1e-7)
    assert state.square_grad['w'][0] == pytest.approx(0.05)


def test_adadelta_zero_gradient():
    params = {'w': np.array([0.7])}
    state = AdadeltaState.create(params)
    state.square_grad['w'][0] = 1.0
    adadelta_step(params, {'w': np.zeros(1)}, state)
    assert params['w'][0] == 0.7
    assert state.square_grad['w'][0] == pytest.approx(0.95)


def test_adadelta_descends():
    rng = np.random.default_rng(0)
    params = {'w': rng.normal(size=50)}
    state = AdadeltaState.create(params)
    for _ in range(3):
        before = params['w'].copy()
        grad = rng.normal(size=50)
        adadelta_step(params, {'w': grad}, state)
        step = params['w'] - before
        assert np.all(np.sign(step) == -np.sign(grad))


def test_adadelta_step_lowers_square():
    params = {'x': np.array([3.0])}
    state = AdadeltaState.create(params)
    for _ in range(5):
        before = params['x'][0] ** 2
        adadelta_step(params, {'x': 2 * params['x']}, state)
        assert params['x'][0] ** 2 < before


def test_adadelta_rejects_non_finite_gradient():
    params = {'a.weight': np.zeros(2)}
    state = AdadeltaState.create(params)
    with pytest.raises(OptimizerStepRejected) as error:
        adadelta_step(params, {'a.weight': np.array([1.0, np.inf])}, state)
    assert error.value.parameter == 'a.weight'
    assert not params['a.weight'].any()


def test_plateau_reduction():
    scheduler = PlateauScheduler(1.8)
    rates = [scheduler.step(loss) for loss in [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99]]
    assert rates[:6] == [1.8] * 6
    assert rates[6] == pytest.approx(0.18)


def test_plateau_never_fires_on_improving_loss():
    scheduler = PlateauScheduler(1.8)
    for epoch in range(200):
        scheduler.step(10.0 - epoch * 0.01)
    assert scheduler.lr == 1.8


def test_reduce_lr_on_plateau_replays_history():
    history = History()
    for loss in [1.0, 0.9, 0.95, 0.96, 0.97, 0.98]:
        history.record(1.8, 0, 0, loss, 0, 0)
    assert reduce_lr_on_plateau(history, TrainConfig()) == 1.8
    history.record(1.8, 0, 0, 0.99, 0, 0)
    assert reduce_lr_on_plateau(history, TrainConfig()) == pytest.approx(0.18)
    with pytest.raises(InvalidArgument):
        reduce_lr_on_plateau(History(), TrainConfig())


def test_train_config_validation():
    with pytest.raises(InvalidArgument):
        TrainConfig(batch_size=0)
    with pytest.raises(InvalidArgument):
        TrainConfig(plateau_factor=1.0)


def test_overfits_small_synthetic_set():
    data = make_synthetic_split(per_class=10)
    model = make_tiny_model()
    cfg = TrainConfig(batch_size=10, epochs=150, seed=1)
    best, history = fit(model, data, data, cfg)
    assert len(history) == 150
    assert history.train_loss[-1] < history.train_loss[0]
    assert max(history.train_acc) == 1.0 or history.best_acc[-1] == 1.0
    assert evaluate(best, data)[1] == history.best_acc[-1]


def test_fit_is_deterministic():
    data = make_synthetic_split(per_class=2)
    cfg = TrainConfig(batch_size=4, epochs=3, seed=5)
    augment_cfg = AugmentConfig(seed=5)
    first_model, first = fit(make_tiny_model(), data, data, cfg, augment_cfg)
    second_model, second = fit(make_tiny_model(), data, data, cfg, augment_cfg)
    assert first == second
    assert all(np.array_equal(first_model.params[name], second_model.params[name]) for name in first_model.params)


def test_initial_accuracy_of_uniform_model_is_chance():
    data = make_synthetic_split(per_class=2)
    model = make_tiny_model()
    for name in model.params:
        if name.endswith(('weight', 'bias')):
            model.params[name][...] = 0
    _, history = fit(model, data, data, TrainConfig(epochs=0))
    assert history.initial_val_acc == pytest.approx(0.2)
    assert len(history) == 0


def test_checkpoint_on_improvement():
    data = make_synthetic_split(per_class=2)
    calls = []

    def record(best, state, epoch):
        calls.append((epoch, evaluate(best, data)[1]))

    _, history = fit(make_tiny_model(), data, data, TrainConfig(batch_size=5, epochs=4), checkpoint=record)
    assert calls and calls[0][0] == 1
    assert [acc for _, acc in calls] == sorted(acc for _, acc in calls)
    assert len(set(history.best_acc)) == len(calls)


def test_fit_rejects_empty_split():
    data = make_synthetic_split(per_class=1)
    empty = Split(data.images[:0], data.labels[:0])
    with pytest.raises(InvalidArgument):
        fit(make_tiny_model(), empty, data, TrainConfig(epochs=1))


def test_fit_aborts_on_divergence():
    data = make_synthetic_split(per_class=1)
    model = make_tiny_model()
    model.params['0.weight'][0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        fit(model, data, data, TrainConfig(batch_size=5, epochs=1))


def test_history_csv(tmp_path):
    history = History()
    history.record(1.8, 1.5, 0.2, 1.4, 0.25, 0.25)
    history.record(1.8, 1.2, 0.4, 1.1, 0.5, 0.5)
    path = tmp_path / 'history.csv'
    history.to_csv(str(path))
    with open(path, newline='') as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ['epoch', 'lr', 'train_loss', 'train_acc', 'val_loss', 'val_acc']
    assert len(rows) == 3
    assert float(rows[2][5]) == 0.5
