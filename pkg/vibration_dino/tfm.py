# -*- coding: utf-8 -*-

"""
Time-frequency maps: Morlet continuous wavelet transform, min-max
normalization, colormapping and natural cubic spline resizing.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import fftconvolve

from vibration_dino.exceptions import DomainError
from vibration_dino.exceptions import ParseError
from vibration_dino.exceptions import ShapeError

logger = logging.getLogger(__name__)

TFM_MAGIC = b'TFMAP001'

N_CHANNELS = 3

COLORMAP_ANCHORS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])

COLORMAP_RGB = np.array([[0.0, 0.0, 0.5],
                         [0.0, 0.75, 1.0],
                         [0.5, 1.0, 0.5],
                         [1.0, 0.75, 0.0],
                         [0.5, 0.0, 0.0]])

# gaussian envelope is truncated at this many standard deviations
MORLET_SUPPORT = 8.0


@dataclass(eq=False)
class TimeFrequencyRepresentation:
    """
    Wavelet magnitudes with one row per scale and one column per
    time step
    """
    magnitudes: np.ndarray
    scales: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        if self.magnitudes.ndim != 2:
            raise ShapeError('magnitudes must be 2-D, got shape ' + str(self.magnitudes.shape))
        if self.magnitudes.shape != (len(self.scales), len(self.times)):
            raise ShapeError('magnitudes shape ' + str(self.magnitudes.shape) +
                             ' does not match ' + str(len(self.scales)) + ' scales x ' +
                             str(len(self.times)) + ' times')


@dataclass(eq=False)
class TimeFrequencyMap:
    """
    Network input: ``H x W x 3`` pixels in [0, 1]
    """
    pixels: np.ndarray
    source_id: str = ''

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != N_CHANNELS:
            raise ShapeError('TimeFrequencyMap must be H x W x ' + str(N_CHANNELS) +
                             ', got ' + str(self.pixels.shape))
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ShapeError('TimeFrequencyMap must be square, got ' + str(self.pixels.shape))
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0 or self.pixels.max() > 1:
            raise DomainError('TimeFrequencyMap pixels must lie in [0, 1]')

    @property
    def size(self):
        return self.pixels.shape[0]


def morlet(u, omega0=6.0):
    """
    Complex Morlet wavelet ``pi^-1/4 exp(i omega0 u) exp(-u^2 / 2)``
    """
    return np.pi ** -0.25 * np.exp(1j * omega0 * u) * np.exp(-0.5 * u ** 2)


def scale_grid(sample_rate, window_length, n_scales=64, omega0=6.0):
    """
    Logarithmically spaced scales (seconds) whose Morlet center
    frequencies run from ``sample_rate / 4`` down to
    ``sample_rate / window_length``. Row 0 is the highest frequency.

    :rtype: :py:class:`numpy.ndarray`
    """
    if n_scales < 1:
        raise DomainError('n_scales must be >= 1')
    f_min = sample_rate / window_length
    f_max = sample_rate / 4.0
    freqs = np.geomspace(f_max, f_min, n_scales) if n_scales > 1 else np.array([f_max])
    return omega0 / (2.0 * np.pi * freqs)


def scale_to_frequency(scales, omega0=6.0):
    """
    Center frequency in Hz of the Morlet wavelet at each scale
    """
    return omega0 / (2.0 * np.pi * np.asarray(scales))


def cwt_coefficients(signal, scales, omega0=6.0):
    """
    Complex wavelet coefficients
    ``(1/sqrt(a)) sum_t x(t) psi*((t - tau) / a) dt`` for every scale
    ``a`` and every sample position ``tau``

    :param signal: input signal
    :type signal: :py:class:`~vibration_dino.signals.VibrationSignal`
    :param scales: strictly positive scales in seconds
    :raises DomainError: on empty scales or a non-positive scale
    :return: complex array ``len(scales) x len(signal)``
    """
    scales = np.asarray(scales, dtype=np.float64)
    if scales.size == 0:
        raise DomainError('At least one scale is required')
    if np.any(~(scales > 0)):
        raise DomainError('Scales must be strictly positive')
    x = signal.samples
    n = x.size
    dt = 1.0 / signal.sample_rate
    coeffs = np.empty((scales.size, n), dtype=np.complex128)
    for i, a in enumerate(scales):
        half = int(min(np.ceil(MORLET_SUPPORT * a / dt), n - 1))
        k = np.arange(-half, half + 1)
        kernel = np.conj(morlet(k * dt / a, omega0=omega0))
        # correlation with kernel == convolution with reversed kernel
        full = fftconvolve(x, kernel[::-1], mode='full')
        coeffs[i] = full[half:half + n] * dt / np.sqrt(a)
    return coeffs


def cwt(signal, scales, omega0=6.0):
    """
    Magnitude scalogram of ``signal``

    :rtype: :py:class:`TimeFrequencyRepresentation`
    """
    coeffs = cwt_coefficients(signal, scales, omega0=omega0)
    return TimeFrequencyRepresentation(magnitudes=np.abs(coeffs),
                                       scales=np.asarray(scales, dtype=np.float64),
                                       times=np.arange(len(signal)) / signal.sample_rate)


def normalize(tfr):
    """
    Min-max scales magnitudes to [0, 1]. A constant input maps to
    all zeros.

    :raises DomainError: if magnitudes are not finite
    :rtype: :py:class:`TimeFrequencyRepresentation`
    """
    m = tfr.magnitudes
    if not np.all(np.isfinite(m)):
        raise DomainError('Time-frequency representation contains non finite values')
    lo = m.min()
    hi = m.max()
    if hi == lo:
        out = np.zeros_like(m)
    else:
        out = (m - lo) / (hi - lo)
    return TimeFrequencyRepresentation(magnitudes=out, scales=tfr.scales, times=tfr.times)


def colormap(tfr_normalized):
    """
    Maps normalized amplitudes to RGB with the fixed five anchor
    blue, cyan, green, yellow, red ramp

    :param tfr_normalized: representation with values in [0, 1]
                           or a bare 2-D array
    :raises DomainError: on values outside [0, 1]
    :return: ``n_scales x n_times x 3`` array
    """
    values = getattr(tfr_normalized, 'magnitudes', tfr_normalized)
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise DomainError('colormap input must lie in [0, 1]')
    return np.stack([np.interp(values, COLORMAP_ANCHORS, COLORMAP_RGB[:, c])
                     for c in range(N_CHANNELS)], axis=-1)


def _resize_axis(image, target, axis):
    n = image.shape[axis]
    if n == target:
        return image
    knots = np.arange(n, dtype=np.float64)
    spline = CubicSpline(knots, image, axis=axis, bc_type='natural')
    return spline(np.linspace(0.0, n - 1.0, target))


def resize_cubic(image, target_h, target_w):
    """
    Separable natural cubic spline resize on a uniform grid. Channels
    are interpolated independently and the result is clamped to [0, 1].

    :param image: ``H x W x C`` array with ``H, W >= 2``
    :raises DomainError: if a source dimension is < 2 or a target < 1
    :rtype: :py:class:`numpy.ndarray`
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError('resize_cubic expects H x W x C, got ' + str(image.shape))
    if image.shape[0] < 2 or image.shape[1] < 2:
        raise DomainError('resize_cubic needs at least 2 x 2 source pixels, got ' +
                          str(image.shape[:2]))
    if target_h < 1 or target_w < 1:
        raise DomainError('Target size must be >= 1, got ' + str((target_h, target_w)))
    out = _resize_axis(image, int(target_h), 0)
    out = _resize_axis(out, int(target_w), 1)
    return np.clip(out, 0.0, 1.0)


def preprocess(signal, config, source_id=''):
    """
    Full pipeline: cwt, normalize, colormap, resize_cubic

    :param signal: one window of vibration data (length >= 2)
    :param config: preprocessing settings
    :type config: :py:class:`~vibration_dino.config.TFMConfig`
    :rtype: :py:class:`TimeFrequencyMap`
    """
    if len(signal) < 2:
        raise DomainError('preprocess needs at least 2 samples')
    scales = scale_grid(signal.sample_rate, len(signal),
                        n_scales=config.n_scales, omega0=config.omega0)
    tfr = normalize(cwt(signal, scales, omega0=config.omega0))
    rgb = colormap(tfr)
    pixels = resize_cubic(rgb, config.image_size, config.image_size).astype(np.float32)
    return TimeFrequencyMap(pixels=pixels, source_id=source_id)


def write_tfm(tfm, path):
    """
    Writes ``tfm`` in the ``TFMAP001`` binary format
    """
    h, w, c = tfm.pixels.shape
    with open(path, 'wb') as f:
        f.write(TFM_MAGIC)
        f.write(struct.pack('<III', h, w, c))
        f.write(np.ascontiguousarray(tfm.pixels, dtype='<f4').tobytes())


def read_tfm(path):
    """
    Reads a ``TFMAP001`` file

    :raises ParseError: on bad magic or size
    :rtype: :py:class:`TimeFrequencyMap`
    """
    with open(path, 'rb') as f:
        data = f.read()
    if not data.startswith(TFM_MAGIC):
        raise ParseError(str(path) + ': not a TFMAP001 file', offset=0)
    header = len(TFM_MAGIC) + 12
    if len(data) < header:
        raise ParseError(str(path) + ': truncated header', offset=len(data))
    h, w, c = struct.unpack_from('<III', data, len(TFM_MAGIC))
    expected = header + 4 * h * w * c
    if len(data) != expected:
        raise ParseError(str(path) + ': expected ' + str(expected) + ' bytes, found ' +
                         str(len(data)), offset=min(len(data), expected))
    pixels = np.frombuffer(data, dtype='<f4', offset=header).reshape(h, w, c).astype(np.float32)
    return TimeFrequencyMap(pixels=pixels, source_id=str(path))
