# -*- coding: utf-8 -*-

"""
Manifest handling, torch datasets over time-frequency maps and the
multi-crop augmentation used for self-distillation.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import List

import cv2
import numpy as np
import pandas as pd
import torch
from torch.utils.data.dataset import Dataset

from vibration_dino import tfm as tfmlib
from vibration_dino.config import substream
from vibration_dino.exceptions import DomainError
from vibration_dino.exceptions import ParseError

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ['path', 'class', 'split']

LABELED = 'labeled'
UNLABELED = 'unlabeled'
TEST = 'test'
SPLITS = (LABELED, UNLABELED, TEST)

MIN_AREA = 0.05
CROP_RETRIES = 10
ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
BLUR_SIGMA = (0.1, 2.0)
JITTER_RANGE = (0.6, 1.4)
SOLARIZE_THRESHOLD = 0.5

GLOBAL1_BLUR_P = 1.0
GLOBAL2_BLUR_P = 0.1
GLOBAL2_SOLARIZE_P = 0.2
LOCAL_BLUR_P = 0.5
JITTER_P = 0.8


def read_manifest(path):
    """
    Reads a ``path,class,split`` CSV manifest. Relative paths are
    resolved against the manifest directory.

    :raises ParseError: on missing columns or unknown splits
    :rtype: :py:class:`pandas.DataFrame`
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if len(missing) > 0:
        raise ParseError(str(path) + ': manifest is missing columns ' + str(missing), line=1)
    bad = df.index[~df['split'].isin(SPLITS)]
    if len(bad) > 0:
        # header is line 1
        raise ParseError(str(path) + ': unknown split ' + str(df['split'][bad[0]]) +
                         ' on line ' + str(int(bad[0]) + 2), line=int(bad[0]) + 2)
    base = os.path.dirname(os.path.abspath(path))
    df['path'] = [p if os.path.isabs(p) else os.path.join(base, p) for p in df['path']]
    return df[MANIFEST_COLUMNS]


def write_manifest(df, path):
    """
    Writes ``df`` as a manifest with paths relative to its directory
    when they live below it
    """
    base = os.path.dirname(os.path.abspath(path))
    out = df[MANIFEST_COLUMNS].copy()
    rel = []
    for p in out['path']:
        p = os.path.abspath(p)
        rel.append(os.path.relpath(p, base) if p.startswith(base + os.sep) else p)
    out['path'] = rel
    out.to_csv(path, index=False)


def split_labels(labels, rng, test_fraction=0.2, labeled_fraction=0.01):
    """
    Stratified split. Per class, ``test_fraction`` of the samples go
    to ``test`` first, then ``labeled_fraction`` of the rest (at least
    one) to ``labeled`` and the remainder to ``unlabeled``.

    :param labels: class of each sample
    :param rng: :py:class:`numpy.random.Generator`
    :return: split name per sample
    :rtype: list
    """
    labels = list(labels)
    splits = [UNLABELED] * len(labels)
    for cls in sorted(set(labels)):
        idx = np.array([i for i, lab in enumerate(labels) if lab == cls])
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        if idx.size > 1:
            n_test = min(n_test, idx.size - 1)
        else:
            n_test = 0
        rest = idx[n_test:]
        n_labeled = min(rest.size, max(1, int(round(labeled_fraction * rest.size))))
        for i in idx[:n_test]:
            splits[i] = TEST
        for i in rest[:n_labeled]:
            splits[i] = LABELED
    return splits


def class_index(class_names):
    """
    Stable mapping of class name to integer id (sorted names)
    """
    return {name: i for i, name in enumerate(sorted(set(class_names)))}


@dataclass(eq=False)
class CropSet:
    """
    Two global views and ``N`` local views of one map plus the area
    fraction each view was cut from
    """
    globals: List[tfmlib.TimeFrequencyMap]
    locals: List[tfmlib.TimeFrequencyMap]
    global_scales: List[float] = field(default_factory=list)
    local_scales: List[float] = field(default_factory=list)

    def views(self):
        """
        Globals first, then locals
        """
        return list(self.globals) + list(self.locals)


def _fallback_shape(h, w, lo, hi, fraction):
    # every crop of at least 2 x 2, nearest to the range, then to the draw, then square
    ch, cw = np.meshgrid(np.arange(2, h + 1), np.arange(2, w + 1), indexing='ij')
    ch = ch.ravel()
    cw = cw.ravel()
    actual = ch * cw / float(h * w)
    outside = np.maximum(np.maximum(lo - actual, actual - hi), 0.0)
    best = np.lexsort((np.abs(np.log(cw / ch)), np.abs(actual - fraction), outside))[0]
    if outside[best] > 0:
        logger.debug('No crop of a ' + str(h) + ' x ' + str(w) + ' map covers [' +
                     str(lo) + ', ' + str(hi) + '], using ' + str(actual[best]))
    return int(ch[best]), int(cw[best])


def random_resized_crop(image, scale_range, size, rng):
    """
    Crops a rectangle covering an area fraction of ``image`` drawn
    uniformly from ``scale_range``, with aspect ratio in [3/4, 4/3],
    and resizes it to ``size x size`` with cubic splines. A draw whose
    rounded rectangle leaves the range is retried; after
    ``CROP_RETRIES`` failures the in-range rectangle nearest the last
    draw is used.

    :return: tuple of the resized crop and the area fraction actually
             cut
    """
    h, w = image.shape[:2]
    area = h * w
    lo, hi = scale_range
    fraction = lo
    for _ in range(CROP_RETRIES):
        fraction = rng.uniform(lo, hi)
        ratio = np.exp(rng.uniform(np.log(ASPECT_RANGE[0]), np.log(ASPECT_RANGE[1])))
        cw = int(round(np.sqrt(fraction * area * ratio)))
        ch = int(round(np.sqrt(fraction * area / ratio)))
        if 2 <= cw <= w and 2 <= ch <= h and lo <= ch * cw / float(area) <= hi:
            break
    else:
        ch, cw = _fallback_shape(h, w, lo, hi, fraction)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[top:top + ch, left:left + cw]
    return tfmlib.resize_cubic(crop, size, size), ch * cw / float(area)


def gaussian_blur(image, rng):
    """
    Gaussian blur with sigma drawn from [0.1, 2.0] and an odd kernel
    of about a quarter of the image side
    """
    sigma = rng.uniform(*BLUR_SIGMA)
    k = int(round(image.shape[0] / 4.0))
    if k % 2 == 0:
        k += 1
    k = max(k, 1)
    out = cv2.GaussianBlur(image.astype(np.float32), (k, k), sigmaX=sigma, sigmaY=sigma,
                           borderType=cv2.BORDER_REFLECT_101)
    return np.clip(out.astype(np.float64), 0.0, 1.0)


def color_jitter(image, rng):
    """
    Per-channel affine jitter: brightness and contrast factors drawn
    from [0.6, 1.4] for each channel, contrast about the channel mean,
    then one saturation factor from the same range
    """
    n_channels = image.shape[-1]
    brightness = rng.uniform(*JITTER_RANGE, size=n_channels)
    contrast = rng.uniform(*JITTER_RANGE, size=n_channels)
    saturation = rng.uniform(*JITTER_RANGE)
    out = np.clip(image * brightness, 0.0, 1.0)
    mean = out.mean(axis=(0, 1), keepdims=True)
    out = np.clip((out - mean) * contrast + mean, 0.0, 1.0)
    gray = out.mean(axis=2, keepdims=True)
    return np.clip((out - gray) * saturation + gray, 0.0, 1.0)


def solarize(image, threshold=SOLARIZE_THRESHOLD):
    """
    Values above ``threshold`` become ``1 - v``
    """
    return np.where(image > threshold, 1.0 - image, image)


def _view(image, scale_range, size, rng, blur_p, solarize_p=0.0):
    out, fraction = random_resized_crop(image, scale_range, size, rng)
    if rng.uniform() < JITTER_P:
        out = color_jitter(out, rng)
    if rng.uniform() < blur_p:
        out = gaussian_blur(out, rng)
    if rng.uniform() < solarize_p:
        out = solarize(out)
    return out.astype(np.float32), fraction


def augment(x, config, rng):
    """
    Multi-crop augmentation. Globals cover area fractions in
    ``[s, 1]``, locals ``[0.05, s]``; every view is resized back to
    the input size.

    :param x: source map
    :type x: :py:class:`~vibration_dino.tfm.TimeFrequencyMap`
    :param config: supplies ``scale_split`` and ``n_local_crops``
    :type config: :py:class:`~vibration_dino.config.DinoConfig`
    :param rng: :py:class:`numpy.random.Generator`
    :raises DomainError: unless ``0.05 < s < 1``
    :rtype: :py:class:`CropSet`
    """
    s = config.scale_split
    if not MIN_AREA < s < 1:
        raise DomainError('scale_split must lie in (0.05, 1), got ' + str(s))
    image = np.asarray(x.pixels, dtype=np.float64)
    size = image.shape[0]
    g1, f1 = _view(image, (s, 1.0), size, rng, GLOBAL1_BLUR_P)
    g2, f2 = _view(image, (s, 1.0), size, rng, GLOBAL2_BLUR_P, GLOBAL2_SOLARIZE_P)
    locals_ = []
    local_scales = []
    for _ in range(config.n_local_crops):
        view, fraction = _view(image, (MIN_AREA, s), size, rng, LOCAL_BLUR_P)
        locals_.append(tfmlib.TimeFrequencyMap(pixels=view, source_id=x.source_id))
        local_scales.append(fraction)
    return CropSet(globals=[tfmlib.TimeFrequencyMap(pixels=g1, source_id=x.source_id),
                            tfmlib.TimeFrequencyMap(pixels=g2, source_id=x.source_id)],
                   locals=locals_, global_scales=[f1, f2], local_scales=local_scales)


class TFMDataset(Dataset):
    """
    Time-frequency maps listed in a manifest (or given directly),
    returned as ``(pixels, label index)``. Unlabeled use sets
    label index to -1.
    """
    def __init__(self, maps, labels=None, class_to_index=None):
        self.maps = list(maps)
        self.labels = list(labels) if labels is not None else [None] * len(self.maps)
        self.class_to_index = class_to_index if class_to_index is not None else \
            class_index([lab for lab in self.labels if lab is not None])
        self.num = len(self.maps)

    @classmethod
    def from_manifest(cls, df, splits=None, class_to_index=None):
        """
        Loads maps of the manifest rows in ``splits`` (all when ``None``)
        """
        if splits is not None:
            df = df[df['split'].isin(splits)]
        maps = [tfmlib.read_tfm(p) for p in df['path']]
        logger.debug('Loaded ' + str(len(maps)) + ' maps for splits ' + str(splits))
        return cls(maps, labels=list(df['class']), class_to_index=class_to_index)

    def label_indices(self):
        return [self.class_to_index.get(lab, -1) if lab is not None else -1
                for lab in self.labels]

    def __getitem__(self, index):
        pixels = torch.as_tensor(np.asarray(self.maps[index].pixels),
                                 dtype=torch.get_default_dtype())
        label = self.labels[index]
        return pixels, (self.class_to_index.get(label, -1) if label is not None else -1)

    def __len__(self):
        return self.num


class MultiCropDataset(Dataset):
    """
    Wraps maps and returns stacked augmented views
    ``[2 + N, H, W, C]``. The augmentation stream of item ``i`` in
    epoch ``e`` depends only on ``(seed, e, i)`` so results do not
    depend on loader order or worker count.
    """
    def __init__(self, maps, config, seed):
        self.maps = list(maps)
        self.config = config
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __getitem__(self, index):
        rng = substream(self.seed, 'augment', self.epoch, index)
        crops = augment(self.maps[index], self.config, rng)
        views = np.stack([v.pixels for v in crops.views()], axis=0)
        return torch.as_tensor(views, dtype=torch.get_default_dtype())

    def __len__(self):
        return len(self.maps)
