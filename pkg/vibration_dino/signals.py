# -*- coding: utf-8 -*-

"""
Vibration signals: synthetic bearing-fault generation, raw file
ingestion and window segmentation.
"""

import logging
import struct
from collections import OrderedDict, namedtuple
from dataclasses import dataclass
from typing import Optional

import numpy as np

from vibration_dino.exceptions import ConfigurationError
from vibration_dino.exceptions import DomainError
from vibration_dino.exceptions import EmptyInputError
from vibration_dino.exceptions import ParseError

logger = logging.getLogger(__name__)

SIGNAL_MAGIC = b'VIBSIG01'

ROTATION_HZ = 29.95
"""Shaft rotation frequency, 1797 rpm"""

ROTATION_AMPLITUDE = 0.2

FaultClass = namedtuple('FaultClass', ['impulse_hz', 'resonance_hz', 'damping', 'amplitude'])

FAULT_CLASSES = OrderedDict([
    ('normal', FaultClass(None, None, None, 0.0)),
    ('inner_race', FaultClass(162.0, 3000.0, 800.0, 1.0)),
    ('outer_race', FaultClass(107.0, 2500.0, 700.0, 1.0)),
    ('ball', FaultClass(141.0, 3500.0, 900.0, 0.8)),
    ('inner_race_moderate', FaultClass(176.0, 3200.0, 800.0, 1.2)),
    ('outer_race_moderate', FaultClass(95.0, 2700.0, 700.0, 1.2)),
    ('ball_moderate', FaultClass(152.0, 3700.0, 900.0, 1.0)),
    ('inner_race_severe', FaultClass(201.0, 3400.0, 800.0, 1.5)),
    ('outer_race_severe', FaultClass(83.0, 2900.0, 700.0, 1.5)),
    ('ball_severe', FaultClass(127.0, 3900.0, 900.0, 1.3)),
])
"""
Synthetic fault table. Each class has its own impulse repetition
frequency (Hz) so classes are separable in the envelope spectrum.
The first four mirror a four-class test rig, all ten a ten-class one.
"""

DEFAULT_N_CLASSES = 4

MAX_CLASSES = len(FAULT_CLASSES)


def class_names(n_classes=DEFAULT_N_CLASSES):
    """
    Names of the first ``n_classes`` synthetic fault classes

    :raises ConfigurationError: if ``n_classes`` is outside 1..10
    :rtype: list
    """
    if not 1 <= n_classes <= MAX_CLASSES:
        raise ConfigurationError('Number of classes must be in 1..' +
                                 str(MAX_CLASSES) + ', got ' + str(n_classes))
    return list(FAULT_CLASSES.keys())[:n_classes]


@dataclass(frozen=True, eq=False)
class VibrationSignal:
    """
    1-D acceleration time series
    """
    samples: np.ndarray
    sample_rate: float
    label: Optional[str] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DomainError('samples must be one dimensional')
        if samples.size == 0:
            raise EmptyInputError('Signal has no samples')
        if not self.sample_rate > 0:
            raise DomainError('sample_rate must be positive, got ' + str(self.sample_rate))
        if not np.all(np.isfinite(samples)):
            raise DomainError('Signal contains non finite samples')
        object.__setattr__(self, 'samples', samples)

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class SegmentSpec:
    """
    Window length and stride, both in samples
    """
    window_length: int = 1024
    stride: int = 1024

    def __post_init__(self):
        if self.window_length < 2:
            raise DomainError('window_length must be >= 2, got ' + str(self.window_length))
        if self.stride < 1:
            raise DomainError('stride must be >= 1, got ' + str(self.stride))


def _resolve_class(class_id):
    if isinstance(class_id, (int, np.integer)):
        names = list(FAULT_CLASSES.keys())
        if not 0 <= class_id < len(names):
            raise ConfigurationError('Unknown fault class index: ' + str(class_id))
        class_id = names[class_id]
    if class_id not in FAULT_CLASSES:
        raise ConfigurationError('Unknown fault class: ' + str(class_id))
    return class_id, FAULT_CLASSES[class_id]


def synth_fault_signal(class_id, duration_samples, sample_rate=12000.0,
                       noise_std=0.0, seed=0):
    """
    Generates a synthetic bearing vibration signal: a periodic impulse
    train convolved with a decaying resonance, a shaft rotation
    sinusoid and Gaussian noise. Pure function of its arguments.

    :param class_id: fault class name from :py:const:`FAULT_CLASSES`
                     or its index
    :param duration_samples: number of samples to generate
    :type duration_samples: int
    :param sample_rate: Hz
    :type sample_rate: float
    :param noise_std: standard deviation of the additive noise
    :type noise_std: float
    :param seed: random seed
    :type seed: int
    :raises ConfigurationError: if ``class_id`` is unknown
    :raises DomainError: if ``duration_samples`` < 1 or ``noise_std`` < 0
    :rtype: :py:class:`VibrationSignal`
    """
    name, fault = _resolve_class(class_id)
    if duration_samples < 1:
        raise DomainError('duration_samples must be >= 1, got ' + str(duration_samples))
    if noise_std < 0:
        raise DomainError('noise_std must be >= 0, got ' + str(noise_std))
    if not sample_rate > 0:
        raise DomainError('sample_rate must be positive')

    rng = np.random.default_rng(seed)
    n = int(duration_samples)
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0.0, 2.0 * np.pi)
    samples = ROTATION_AMPLITUDE * np.sin(2.0 * np.pi * ROTATION_HZ * t + phase)

    if fault.impulse_hz is not None:
        period = sample_rate / fault.impulse_hz
        start = rng.uniform(0.0, period)
        positions = np.round(np.arange(start, n, period)).astype(np.int64)
        positions = positions[positions < n]
        train = np.zeros(n)
        train[positions] = fault.amplitude * rng.uniform(0.8, 1.2, size=positions.size)

        # resonance kernel lasting until the envelope falls below 1e-3
        kernel_len = max(2, int(np.ceil(np.log(1e3) / fault.damping * sample_rate)))
        tk = np.arange(kernel_len) / sample_rate
        kernel = np.exp(-fault.damping * tk) * np.sin(2.0 * np.pi * fault.resonance_hz * tk)
        samples = samples + np.convolve(train, kernel)[:n]

    if noise_std > 0:
        samples = samples + rng.normal(0.0, noise_std, size=n)
    return VibrationSignal(samples=samples, sample_rate=float(sample_rate), label=name)


def _parse_binary(data, path):
    header = len(SIGNAL_MAGIC) + 4
    if len(data) < header:
        raise ParseError(str(path) + ': truncated header', offset=len(data))
    (count,) = struct.unpack_from('<I', data, len(SIGNAL_MAGIC))
    expected = header + 4 * count
    if len(data) != expected:
        raise ParseError(str(path) + ': expected ' + str(expected) + ' bytes for ' +
                         str(count) + ' samples, found ' + str(len(data)),
                         offset=min(len(data), expected))
    values = np.frombuffer(data, dtype='<f4', count=count, offset=header).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size > 0:
        raise ParseError(str(path) + ': non finite sample at byte offset ' +
                         str(header + 4 * int(bad[0])), offset=header + 4 * int(bad[0]))
    return values


def _parse_text(data, path):
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError as ue:
        raise ParseError(str(path) + ': invalid UTF-8 at byte offset ' + str(ue.start),
                         offset=ue.start)
    values = []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), start=1):
        stripped = line.strip()
        if stripped != '' and not stripped.startswith('#'):
            try:
                value = float(stripped)
            except ValueError:
                value = None
            if value is None or not np.isfinite(value):
                raise ParseError(str(path) + ': line ' + str(lineno) +
                                 ' (byte offset ' + str(offset) + ') is not a finite '
                                 'number: ' + stripped, line=lineno, offset=offset)
            values.append(value)
        offset += len(line.encode('utf-8'))
    return np.asarray(values, dtype=np.float64)


def load_signal(path, sample_rate, label=None):
    """
    Reads a raw signal file. Binary files start with ``VIBSIG01``;
    anything else is read as UTF-8 text with one sample per line and
    optional ``#`` comment lines.

    :param path: signal file
    :type path: str
    :param sample_rate: Hz
    :type sample_rate: float
    :param label: optional class label to attach
    :raises ParseError: on malformed content
    :raises EmptyInputError: if the file holds no samples
    :rtype: :py:class:`VibrationSignal`
    """
    with open(path, 'rb') as f:
        data = f.read()
    if data.startswith(SIGNAL_MAGIC):
        values = _parse_binary(data, path)
    else:
        values = _parse_text(data, path)
    if values.size == 0:
        raise EmptyInputError(str(path) + ' contains no samples')
    return VibrationSignal(samples=values, sample_rate=sample_rate, label=label)


def write_signal(signal, path, binary=False):
    """
    Writes ``signal`` to ``path``. The text format keeps full
    precision, the binary format stores 32-bit floats.
    """
    if binary:
        with open(path, 'wb') as f:
            f.write(SIGNAL_MAGIC)
            f.write(struct.pack('<I', len(signal)))
            f.write(signal.samples.astype('<f4').tobytes())
        return
    with open(path, 'w', encoding='utf-8') as f:
        for v in signal.samples:
            f.write(repr(float(v)) + '\n')


def segment(signal, spec):
    """
    Splits ``signal`` into windows of ``spec.window_length`` samples
    every ``spec.stride`` samples. The trailing partial window is
    dropped.

    :raises EmptyInputError: if the signal is shorter than one window
    :rtype: list
    """
    n = len(signal)
    if n < spec.window_length:
        raise EmptyInputError('Signal of length ' + str(n) +
                              ' is shorter than window length ' + str(spec.window_length))
    count = (n - spec.window_length) // spec.stride + 1
    windows = []
    for i in range(count):
        start = i * spec.stride
        windows.append(VibrationSignal(samples=signal.samples[start:start + spec.window_length].copy(),
                                       sample_rate=signal.sample_rate,
                                       label=signal.label))
    logger.debug('Segmented signal of length ' + str(n) + ' into ' + str(count) + ' windows')
    return windows
