import pytest

from drnet.config import (AppConfig, apply_overrides, build_model_config, config_hash, config_to_dict, load_config,
                          parse_config)
from drnet.errors import ConfigError
from drnet.network import default_config


def test_defaults():
    cfg = AppConfig()
    assert cfg.preprocess.clahe_clip == 2.0
    assert cfg.train.learning_rate == 1.8
    assert cfg.split.per_class == 1910
    assert build_model_config(cfg.model) == default_config()


def test_parse_config():
    cfg = parse_config('[preprocess]\nclahe_tiles = 4, 4\n\n[model]\nchannels = 8, 16\ninput_side = 32\n'
                       'bn_order = pre_relu\n\n[augment]\nrotate_prob = 0.25\n')
    assert cfg.preprocess.clahe_tiles == (4, 4)
    assert cfg.model.channels == (8, 16)
    assert cfg.model.input_side == 32
    assert cfg.model.bn_order == 'pre_relu'
    assert cfg.augment.rotate_prob == 0.25
    assert cfg.train == AppConfig().train


@pytest.mark.parametrize('text', [
    '[training]\nepochs = 3\n',
    '[train]\nepoch = 3\n',
    '[train]\nepochs = three\n',
    '[train]\nbatch_size = 0\n',
    '[augment]\nflip_prob = 2\n',
    'epochs = 3\n',
])
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_applies_environment(tmp_path):
    path = tmp_path / 'drnet.ini'
    path.write_text('[train]\nepochs = 7\nseed = 1\n', encoding='utf-8')
    cfg = load_config(str(path), environ={'DRNET_OUT': 'runs/a', 'DRNET_SEED': '42'})
    assert cfg.train.epochs == 7
    assert cfg.out == 'runs/a'
    assert cfg.train.seed == cfg.augment.seed == cfg.split.seed == cfg.model.init_seed == 42
    assert load_config(environ={}) == AppConfig()
    with pytest.raises(ConfigError):
        load_config(environ={'DRNET_SEED': 'x'})


def test_overrides():
    cfg = apply_overrides(AppConfig(), {'out': 'elsewhere', 'train.epochs': 3, 'train.batch_size': '8',
                                        'split.seed': None})
    assert cfg.out == 'elsewhere'
    assert cfg.train.epochs == 3 and cfg.train.batch_size == 8
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {'nothing.here': 1})
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {'epochs': 1})


def test_hash_tracks_content():
    base = AppConfig()
    assert config_hash(base) == config_hash(parse_config(''))
    assert config_hash(base) != config_hash(apply_overrides(base, {'train.epochs': 1}))
    assert config_to_dict(base)['model']['channels'] == base.model.channels
