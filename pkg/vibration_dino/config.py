# -*- coding: utf-8 -*-

"""
Run configuration: one dataclass per pipeline stage, gathered in
:py:class:`RunConfig`, plus the flat ``key = value`` file format.
"""

import logging
import typing
import zlib
from dataclasses import dataclass, field, fields, asdict, replace
from typing import Optional, Tuple

import numpy as np
import torch

from vibration_dino.exceptions import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class SegmentConfig:
    """Window extraction from raw signals"""
    window_length: int = 1024
    stride: int = 1024


@dataclass
class DataConfig:
    """Synthetic generation and split proportions"""
    sample_rate: float = 12000.0
    noise_std: float = 0.1
    test_fraction: float = 0.2
    labeled_fraction: float = 0.01


@dataclass
class TFMConfig:
    """Wavelet preprocessing"""
    image_size: int = 32
    n_scales: int = 64
    omega0: float = 6.0


@dataclass
class ViTConfig:
    """
    Encoder structure. Defaults are the desk-scale preset,
    :py:meth:`full_size` gives the full-size one.
    """
    patch_size: int = 8
    embed_dim: int = 48
    n_heads: int = 3
    head_dim: int = 16
    mlp_dim: int = 192
    depth: int = 4
    init_std: float = 0.02

    @classmethod
    def desk(cls):
        return cls()

    @classmethod
    def full_size(cls):
        return cls(patch_size=16, embed_dim=192, n_heads=3, head_dim=64,
                   mlp_dim=4 * 192, depth=12)


@dataclass
class ProjectorConfig:
    """
    Projector head. ``head_dims`` lists the MLP layer widths,
    hidden layers first and the bottleneck last.
    """
    head_dims: Tuple[int, ...] = (256, 256, 64)
    out_dim: int = 64
    l2_eps: float = 1e-6

    @property
    def n_layers(self):
        return len(self.head_dims)

    @classmethod
    def desk(cls):
        return cls()

    @classmethod
    def full_size(cls):
        return cls(head_dims=(2048, 2048, 256), out_dim=1024)


@dataclass
class DinoConfig:
    """Self-distillation training"""
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    momentum_start: float = 0.996
    center_momentum: float = 0.9
    scale_split: float = 0.4
    n_local_crops: int = 8
    batch_size: int = 64
    epochs: int = 100
    warmup_epochs: int = 10
    lr_start: float = 1e-6
    lr_peak: float = 1.25e-4
    lr_floor: float = 1e-6
    weight_decay: float = 0.04
    max_grad_norm: Optional[float] = None
    identical_init: bool = False
    freeze_center: bool = False
    collapse_eps_kl: float = 0.01
    collapse_window: int = 5


@dataclass
class KnnConfig:
    """Tempered nearest-neighbor evaluation"""
    n_neighbors: int = 5
    knn_temperature: Optional[float] = 0.04


SECTIONS = (('segment', SegmentConfig), ('data', DataConfig),
            ('tfm', TFMConfig), ('vit', ViTConfig),
            ('projector', ProjectorConfig), ('dino', DinoConfig),
            ('knn', KnnConfig))

TOP_LEVEL_KEYS = ('seed', 'threads')


@dataclass
class RunConfig:
    """
    Effective configuration of a run
    """
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tfm: TFMConfig = field(default_factory=TFMConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    dino: DinoConfig = field(default_factory=DinoConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    seed: int = 0
    threads: Optional[int] = None

    def validate(self, ablation=False):
        """
        Cross-field checks

        :param ablation: If ``True`` the sharpening requirement
                         ``teacher_temp < student_temp`` is not enforced
        :type ablation: bool
        :raises ConfigurationError: on the first violated check
        """
        if self.segment.window_length < 2:
            raise ConfigurationError('window_length must be >= 2')
        if self.segment.stride < 1:
            raise ConfigurationError('stride must be >= 1')
        if self.tfm.image_size % self.vit.patch_size != 0:
            raise ConfigurationError('image_size ' + str(self.tfm.image_size) +
                                     ' is not divisible by patch_size ' +
                                     str(self.vit.patch_size))
        if self.vit.n_heads * self.vit.head_dim != self.vit.embed_dim:
            raise ConfigurationError('n_heads * head_dim must equal embed_dim, got ' +
                                     str(self.vit.n_heads) + ' * ' + str(self.vit.head_dim) +
                                     ' != ' + str(self.vit.embed_dim))
        if self.projector.out_dim < 2:
            raise ConfigurationError('out_dim must be >= 2')
        if len(self.projector.head_dims) < 1:
            raise ConfigurationError('head_dims must list at least the bottleneck width')
        if self.dino.teacher_temp <= 0 or self.dino.student_temp <= 0:
            raise ConfigurationError('temperatures must be positive')
        if not ablation and self.dino.teacher_temp >= self.dino.student_temp:
            raise ConfigurationError('teacher_temp (' + str(self.dino.teacher_temp) +
                                     ') must be lower than student_temp (' +
                                     str(self.dino.student_temp) + ') unless an '
                                     'ablation is requested')
        if not 0.05 < self.dino.scale_split < 1:
            raise ConfigurationError('scale_split must lie in (0.05, 1)')
        if not 0 <= self.dino.center_momentum <= 1:
            raise ConfigurationError('center_momentum must lie in [0, 1]')
        if not 0 <= self.dino.momentum_start <= 1:
            raise ConfigurationError('momentum_start must lie in [0, 1]')
        if self.dino.n_local_crops < 0 or self.dino.batch_size < 1:
            raise ConfigurationError('n_local_crops must be >= 0 and batch_size >= 1')
        if self.knn.n_neighbors < 1:
            raise ConfigurationError('n_neighbors must be >= 1')
        if self.knn.knn_temperature is not None and self.knn.knn_temperature <= 0:
            raise ConfigurationError('knn_temperature must be positive when set')
        if not 0 <= self.data.test_fraction < 1 or not 0 < self.data.labeled_fraction <= 1:
            raise ConfigurationError('test_fraction must lie in [0, 1) and '
                                     'labeled_fraction in (0, 1]')
        return self

    def to_dict(self):
        """
        Flat mapping of every key to its value
        """
        res = {}
        for name, _ in SECTIONS:
            res.update(asdict(getattr(self, name)))
        res['seed'] = self.seed
        res['threads'] = self.threads
        return res

    def to_text(self):
        """
        Re-emits the configuration in the ``key = value`` file format
        """
        lines = []
        for name, _ in SECTIONS:
            lines.append('# ' + name)
            for f in fields(getattr(self, name)):
                lines.append(f.name + ' = ' + _format_value(getattr(getattr(self, name), f.name)))
        lines.append('# run')
        lines.append('seed = ' + _format_value(self.seed))
        lines.append('threads = ' + _format_value(self.threads))
        return '\n'.join(lines) + '\n'

    def write(self, path):
        with open(path, 'w') as f:
            f.write(self.to_text())

    def rng(self, name):
        """
        Independent :py:class:`numpy.random.Generator` for the named
        sub-stream (``data``, ``augment``, ``init``, ...)

        :param name: sub-stream name
        :type name: str
        :rtype: :py:class:`numpy.random.Generator`
        """
        return substream(self.seed, name)

    def torch_seed(self, name):
        """
        Integer seed for torch derived from the named sub-stream
        """
        return int(self.rng(name).integers(0, 2 ** 62))


def substream(seed, *names):
    """
    Deterministic generator keyed by ``seed`` and any number of names
    or integers
    """
    keys = [int(seed)]
    for n in names:
        if isinstance(n, (int, np.integer)):
            keys.append(int(n))
        else:
            keys.append(zlib.crc32(str(n).encode('utf-8')))
    return np.random.default_rng(np.random.SeedSequence(keys))


def torch_generator(rng):
    """
    :py:class:`torch.Generator` seeded from a numpy generator
    """
    gen = torch.Generator()
    gen.manual_seed(int(rng.integers(0, 2 ** 62)))
    return gen


def _field_owner():
    owner = {}
    for name, cls in SECTIONS:
        for f in fields(cls):
            if f.name in owner:
                raise ConfigurationError('Duplicate configuration key: ' + f.name)
            owner[f.name] = (name, f)
    return owner


def config_keys():
    """
    All keys accepted in a configuration file
    """
    return list(_field_owner().keys()) + list(TOP_LEVEL_KEYS)


def _format_value(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ','.join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key, raw, typ):
    """
    Converts text ``raw`` to ``typ`` which is one of the annotation
    forms used by the config dataclasses
    """
    raw = raw.strip()
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ('none', ''):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(key, raw, inner)
    try:
        if origin is tuple:
            return tuple(int(v) for v in raw.split(',') if v.strip() != '')
        if typ is bool:
            if raw.lower() in ('true', '1', 'yes', 'on'):
                return True
            if raw.lower() in ('false', '0', 'no', 'off'):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigurationError('Invalid value for ' + key + ': ' + raw)
    return raw


def apply_overrides(config, overrides):
    """
    Returns a copy of ``config`` with ``overrides`` applied

    :param config: base configuration
    :type config: :py:class:`RunConfig`
    :param overrides: key to raw text (or already typed) value
    :type overrides: dict
    :raises ConfigurationError: on unknown keys or bad values
    :rtype: :py:class:`RunConfig`
    """
    owner = _field_owner()
    sections = {name: getattr(config, name) for name, _ in SECTIONS}
    top = {'seed': config.seed, 'threads': config.threads}
    for key, value in overrides.items():
        if key in TOP_LEVEL_KEYS:
            typ = int if key == 'seed' else Optional[int]
            top[key] = _coerce(key, value, typ) if isinstance(value, str) else value
            continue
        if key not in owner:
            raise ConfigurationError('Unknown configuration key: ' + key)
        section, f = owner[key]
        if isinstance(value, str):
            value = _coerce(key, value, f.type)
        sections[section] = replace(sections[section], **{key: value})
    return RunConfig(seed=top['seed'], threads=top['threads'], **sections)


def parse_config_text(text, base=None):
    """
    Parses flat ``key = value`` text. Blank lines and ``#`` comments
    are ignored.

    :raises ConfigurationError: on malformed lines or unknown keys
    :rtype: :py:class:`RunConfig`
    """
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped == '' or stripped.startswith('#'):
            continue
        if '=' not in stripped:
            raise ConfigurationError('Line ' + str(lineno) + ' is not key = value: ' + line)
        key, value = stripped.split('=', 1)
        overrides[key.strip()] = value.strip()
    return apply_overrides(base if base is not None else RunConfig(), overrides)


def load_config(path=None, overrides=None):
    """
    Loads configuration from ``path`` (defaults when ``None``) then
    applies ``overrides``

    :rtype: :py:class:`RunConfig`
    """
    config = RunConfig()
    if path is not None:
        logger.debug('Loading configuration from ' + str(path))
        with open(path, 'r') as f:
            config = parse_config_text(f.read())
    if overrides:
        config = apply_overrides(config, overrides)
    return config
