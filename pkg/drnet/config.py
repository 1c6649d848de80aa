"""Application configuration.

Settings come from four layers, later ones winning: dataclass defaults, an
INI-style config file, the ``DRNET_OUT``/``DRNET_SEED`` environment variables
and command-line flags. Example file::

    [preprocess]
    clahe_clip = 2.0
    clahe_tiles = 8, 8

    [model]
    channels = 16, 32, 64, 128, 128, 128, 128

    [train]
    epochs = 200

Unknown sections or keys are rejected.
"""
import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Tuple

from drnet.augment import AugmentConfig
from drnet.dataset import SplitSpec
from drnet.errors import ConfigError, DRNetError
from drnet.imageproc import PreprocConfig
from drnet.network import DEFAULT_CHANNELS, build_config
from drnet.training import TrainConfig
from drnet.utils import sha256_json

ENV_OUT = 'DRNET_OUT'
ENV_SEED = 'DRNET_SEED'


@dataclass(frozen=True)
class ModelOptions:
    """Architecture options of `drnet.network.build_config`.

    Args:
        channels (tuple): Conv block widths
        pool_blocks (int): Leading blocks followed by a maxpool; -1 means all but the last
        dense_units (tuple): Hidden dense widths
        input_side (int): Input side. Defaults to 256.
        dropout_rate (float): Dropout before each dense layer. Defaults to 0.5.
        bn_order (string): ``'post_relu'`` or ``'pre_relu'``
        bn_epsilon (float): BN epsilon
        bn_momentum (float): BN momentum
        init_seed (int): Seed of the weight initializer
    """
    channels: Tuple[int, ...] = DEFAULT_CHANNELS
    pool_blocks: int = -1
    dense_units: Tuple[int, ...] = (2560,)
    input_side: int = 256
    dropout_rate: float = 0.5
    bn_order: str = 'post_relu'
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    init_seed: int = 0


@dataclass(frozen=True)
class BenchOptions:
    repetitions: int = 3
    warmup: int = 1


@dataclass(frozen=True)
class AppConfig:
    """All configuration sections plus the run-level output directory."""
    preprocess: PreprocConfig = field(default_factory=PreprocConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    bench: BenchOptions = field(default_factory=BenchOptions)
    out: str = 'out'

    SECTIONS = ('preprocess', 'augment', 'model', 'train', 'split', 'bench')


def _coerce(raw, default, where):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in configparser.RawConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.RawConfigParser.BOOLEAN_STATES[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(part) for part in raw.split(',') if part.strip())
        return raw
    except ValueError:
        raise ConfigError(f'{where}: cannot read {raw!r} as {type(default).__name__}.')


def _replace_section(section, values, where):
    known = {f.name: getattr(section, f.name) for f in dataclasses.fields(section)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f'{where}: unknown key {key!r}.')
        changes[key] = _coerce(raw, known[key], f'{where}.{key}') if isinstance(raw, str) else raw
    try:
        return dataclasses.replace(section, **changes)
    except DRNetError as error:
        raise ConfigError(f'{where}: {error}')


def parse_config(text, source='<string>'):
    """Parses config text on top of the defaults.

    Args:
        text (string): INI-style text
        source (string): Name used in error messages

    Returns:
        AppConfig: The configuration
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as error:
        raise ConfigError(f'{source}: {error}')
    cfg = AppConfig()
    for name in parser.sections():
        if name not in AppConfig.SECTIONS:
            raise ConfigError(f'{source}: unknown section [{name}].')
        section = _replace_section(getattr(cfg, name), dict(parser.items(name)), f'{source} [{name}]')
        cfg = dataclasses.replace(cfg, **{name: section})
    return cfg


def load_config(path=None, environ=None):
    """Reads the config file (if any), then applies the environment overrides.

    Args:
        path (string): Config file. Defaults to none, i.e. only defaults.
        environ (dict): Environment. Defaults to ``os.environ``.

    Returns:
        AppConfig: The configuration
    """
    if path is None:
        cfg = AppConfig()
    else:
        with open(path, encoding='utf-8') as handle:
            cfg = parse_config(handle.read(), os.fspath(path))
    environ = os.environ if environ is None else environ
    overrides = {}
    if environ.get(ENV_OUT):
        overrides['out'] = environ[ENV_OUT]
    if environ.get(ENV_SEED):
        try:
            overrides['seed'] = int(environ[ENV_SEED])
        except ValueError:
            raise ConfigError(f'{ENV_SEED} must be an integer, got {environ[ENV_SEED]!r}.')
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg, overrides):
    """Applies flag-level overrides.

    Keys are ``'out'``, ``'seed'`` (propagated to every seeded section) or
    ``'section.key'``; `None` values are ignored.

    Args:
        cfg (AppConfig): Base configuration
        overrides (dict): Overrides

    Returns:
        AppConfig: The new configuration
    """
    for key, value in overrides.items():
        if value is None:
            continue
        if key == 'out':
            cfg = dataclasses.replace(cfg, out=os.fspath(value))
        elif key == 'seed':
            seed = int(value)
            cfg = dataclasses.replace(
                cfg, augment=dataclasses.replace(cfg.augment, seed=seed),
                train=dataclasses.replace(cfg.train, seed=seed),
                split=dataclasses.replace(cfg.split, seed=seed),
                model=dataclasses.replace(cfg.model, init_seed=seed))
        else:
            name, _, attr = key.partition('.')
            if name not in AppConfig.SECTIONS or not attr:
                raise ConfigError(f'Unknown override {key!r}.')
            section = _replace_section(getattr(cfg, name), {attr: value}, f'override {key}')
            cfg = dataclasses.replace(cfg, **{name: section})
    return cfg


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of the configuration."""
    return sha256_json(config_to_dict(cfg))


def build_model_config(options, num_classes=5):
    """Builds the `ModelConfig` described by ``options``."""
    return build_config(channels=tuple(options.channels),
                        pool_blocks=None if options.pool_blocks < 0 else options.pool_blocks,
                        dense_units=tuple(options.dense_units), input_side=options.input_side,
                        num_classes=num_classes, dropout_rate=options.dropout_rate,
                        bn_order=options.bn_order, bn_epsilon=options.bn_epsilon,
                        bn_momentum=options.bn_momentum)