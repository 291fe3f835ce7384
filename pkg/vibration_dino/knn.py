# -*- coding: utf-8 -*-

"""
Frozen-encoder feature extraction and the temperature weighted
nearest neighbor classifier used with a small labeled bank.
"""

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import confusion_matrix
from torch.utils.data import DataLoader
from tqdm import tqdm

from vibration_dino import vit
from vibration_dino.config import KnnConfig
from vibration_dino.dataset import TFMDataset
from vibration_dino.exceptions import ContractError
from vibration_dino.exceptions import EmptyInputError
from vibration_dino.exceptions import ParseError
from vibration_dino.exceptions import ShapeError

logger = logging.getLogger(__name__)

FEATURE_BANK_MAGIC = b'FEATBNK1'

UNKNOWN_LABEL = 0xFFFF
"""
Label written for vectors whose class is not in the bank
"""

UNKNOWN_CLASS = 'unknown'


@dataclass(eq=False)
class FeatureBank:
    """
    Encoder features ``M x d`` with one class id per row.
    ``class_names[i]`` names class id ``i``.
    """
    vectors: np.ndarray
    labels: np.ndarray
    class_names: list

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ShapeError('Feature bank vectors must be M x d, got ' +
                             str(self.vectors.shape))
        if self.labels.shape != (self.vectors.shape[0],):
            raise ShapeError('Feature bank has ' + str(self.vectors.shape[0]) +
                             ' vectors but ' + str(self.labels.size) + ' labels')
        if not np.all(np.isfinite(self.vectors)):
            raise ContractError('Feature bank holds non finite vectors')
        if np.any(self.labels < -1) or np.any(self.labels >= len(self.class_names)):
            raise ContractError('Feature bank labels must lie in [0, ' + str(len(self.class_names)) +
                                ') or be -1 for unknown')

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def n_labeled(self):
        return int(np.count_nonzero(self.labels >= 0))

    def unit_vectors(self):
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        return self.vectors / np.maximum(norms, 1e-12)


def extract_features(maps, encoder, batch_size=64, progress=False):
    """
    Encodes every map with ``encoder`` (no projector head) under
    ``torch.no_grad``

    :param maps: list of :py:class:`~vibration_dino.tfm.TimeFrequencyMap`
                 or a :py:class:`~vibration_dino.dataset.TFMDataset`
    :param encoder: :py:class:`~vibration_dino.vit.VisionTransformer`
    :return: ``M x d`` features
    :rtype: :py:class:`numpy.ndarray`
    """
    dataset = maps if isinstance(maps, TFMDataset) else TFMDataset(maps)
    if len(dataset) == 0:
        return np.zeros((0, encoder.embed_dim))
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=0)
    encoder.eval()
    out = []
    with torch.no_grad():
        for pixels, _ in tqdm(loader, desc='Encoding', disable=not progress):
            out.append(vit.encode(pixels, encoder).detach().cpu().double().numpy())
    return np.concatenate(out, axis=0)


def build_bank(maps, labels, encoder, class_names=None, batch_size=64):
    """
    :py:class:`FeatureBank` of ``maps`` labeled by class name

    :raises EmptyInputError: when no maps are given
    """
    if len(maps) == 0:
        raise EmptyInputError('Cannot build a feature bank from zero samples')
    class_names = sorted(set(labels)) if class_names is None else list(class_names)
    index = {name: i for i, name in enumerate(class_names)}
    vectors = extract_features(maps, encoder, batch_size=batch_size)
    return FeatureBank(vectors=vectors, labels=[index[lab] for lab in labels],
                       class_names=class_names)


def _scores(sims, labels, n_classes, n_neighbors, temperature):
    """
    Per-class scores of one row of similarities
    """
    order = np.argsort(-sims, kind='stable')[:n_neighbors]
    # unknown rows never vote
    order = order[labels[order] >= 0]
    weights = np.exp(sims[order] / temperature) if temperature is not None \
        else np.ones(order.size)
    scores = np.zeros(n_classes)
    np.add.at(scores, labels[order], weights)
    return scores


def classify_batch(queries, bank, config, exclude=None):
    """
    Classifies every row of ``queries``

    :param queries: ``Q x d`` features
    :param bank: labeled features
    :type bank: :py:class:`FeatureBank`
    :param config: :py:class:`~vibration_dino.config.KnnConfig`
    :param exclude: optional bank row to leave out per query
                    (``-1`` for none)
    :raises ContractError: on an empty bank or ``n_neighbors`` larger
                           than the usable bank
    :return: tuple of predicted class ids and ``Q x n_classes`` scores
    """
    if len(bank) == 0:
        raise ContractError('Feature bank is empty')
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != bank.dim:
        raise ShapeError('Query width ' + str(queries.shape[1]) +
                         ' does not match bank width ' + str(bank.dim))
    usable = bank.n_labeled - (1 if exclude is not None else 0)
    if usable <= 0:
        raise ContractError('Feature bank has no labeled neighbor to vote')
    if config.n_neighbors > usable:
        raise ContractError('n_neighbors (' + str(config.n_neighbors) +
                            ') exceeds the labeled bank size (' + str(usable) + ')')
    unit = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    sims = unit @ bank.unit_vectors().T
    sims[:, bank.labels < 0] = -np.inf
    if exclude is not None:
        for row, col in enumerate(exclude):
            if col >= 0:
                sims[row, col] = -np.inf
    scores = np.stack([_scores(s, bank.labels, bank.n_classes, config.n_neighbors,
                               config.knn_temperature) for s in sims], axis=0)
    # argmax returns the first maximum, the smaller class id on ties
    return np.argmax(scores, axis=1), scores


def classify(query, bank, config):
    """
    Class id and per-class scores of one feature vector. Similarity is
    cosine; the ``n_neighbors`` most similar bank rows vote with weight
    ``exp(sim / knn_temperature)``, or 1 each when no temperature is
    configured.

    :rtype: tuple
    """
    preds, scores = classify_batch(np.asarray(query)[None, :], bank, config)
    return int(preds[0]), scores[0]


def evaluate(vectors, labels, bank, config, exclude_self=False):
    """
    Accuracy and row-normalized confusion matrix of ``vectors`` against
    ``bank``. Rows are actual classes, columns predictions. Test labels
    missing from the bank are counted under an extra ``unknown`` class
    and are always wrong.

    :param vectors: test features
    :param labels: test class names
    :param exclude_self: leave bank row ``i`` out for query ``i``; the
                         bank must then be the test set itself
    :raises EmptyInputError: on an empty test set
    :rtype: dict
    """
    labels = list(labels)
    if len(labels) == 0:
        raise EmptyInputError('Test set is empty')
    exclude = None
    if exclude_self:
        if len(labels) != len(bank):
            raise ContractError('exclude_self needs the bank to be the test set')
        exclude = np.arange(len(labels))
    preds, _ = classify_batch(vectors, bank, config, exclude=exclude)
    predicted = [bank.class_names[p] for p in preds]
    unseen = sorted(set(lab for lab in labels if lab not in bank.class_names))
    if len(unseen) > 0:
        logger.warning('Test labels not present in the bank: ' + str(unseen))
    actual = [lab if lab in bank.class_names else UNKNOWN_CLASS for lab in labels]
    names = list(bank.class_names) + ([UNKNOWN_CLASS] if len(unseen) > 0 else [])
    counts = confusion_matrix(actual, predicted, labels=names)
    row_sums = counts.sum(axis=1, keepdims=True)
    percent = np.where(row_sums > 0, 100.0 * counts / np.maximum(row_sums, 1), 0.0)
    correct = np.array([a == p for a, p in zip(actual, predicted)])
    per_class = {}
    for name in names:
        mask = np.array([a == name for a in actual])
        if mask.any():
            per_class[name] = float(correct[mask].mean())
    return {'accuracy': float(correct.mean()),
            'n_test': len(labels),
            'per_class_accuracy': per_class,
            'classes': names,
            'confusion_counts': counts.tolist(),
            'confusion_percent': percent.tolist(),
            'unseen_labels': unseen,
            'predictions': predicted}


def sweep_neighbors(vectors, labels, bank, neighbors, temperature, exclude_self=False):
    """
    Accuracy per ``n_neighbors`` value, with and without the
    temperature

    :rtype: :py:class:`pandas.DataFrame`
    """
    rows = []
    for n in neighbors:
        row = {'n_neighbors': int(n)}
        for column, tau in (('accuracy_tempered', temperature), ('accuracy_unweighted', None)):
            if column == 'accuracy_tempered' and tau is None:
                continue
            res = evaluate(vectors, labels, bank, KnnConfig(n_neighbors=int(n), knn_temperature=tau),
                           exclude_self=exclude_self)
            row[column] = res['accuracy']
        rows.append(row)
    return pd.DataFrame(rows)


def accuracy_spread(df, column):
    """
    Max minus min of ``column`` over the sweep rows
    """
    return float(df[column].max() - df[column].min())


def write_report(report, path, config=None):
    """
    Writes an evaluation report as JSON, echoing ``config`` if given
    """
    out = dict(report)
    if config is not None:
        out['config'] = config.to_dict()
    with open(path, 'w') as f:
        json.dump(out, f, indent=2, sort_keys=True)


def write_feature_bank(bank, path):
    """
    ``FEATBNK1`` format: magic, u32 M, u32 d, M x d f32, M x u16 labels,
    little-endian
    """
    labels = np.where((bank.labels < 0) | (bank.labels >= UNKNOWN_LABEL),
                      UNKNOWN_LABEL, bank.labels).astype('<u2')
    with open(path, 'wb') as f:
        f.write(FEATURE_BANK_MAGIC)
        f.write(struct.pack('<II', len(bank), bank.dim))
        f.write(np.ascontiguousarray(bank.vectors, dtype='<f4').tobytes())
        f.write(labels.tobytes())


def read_feature_bank(path, class_names=None):
    """
    Reads a ``FEATBNK1`` file. Without ``class_names`` classes are
    named by their id.

    :raises ParseError: on bad magic or size
    :rtype: :py:class:`FeatureBank`
    """
    with open(path, 'rb') as f:
        data = f.read()
    if not data.startswith(FEATURE_BANK_MAGIC):
        raise ParseError(str(path) + ': not a FEATBNK1 file', offset=0)
    pos = len(FEATURE_BANK_MAGIC)
    if len(data) < pos + 8:
        raise ParseError(str(path) + ': truncated header', offset=len(data))
    m, d = struct.unpack_from('<II', data, pos)
    pos += 8
    expected = pos + 4 * m * d + 2 * m
    if len(data) != expected:
        raise ParseError(str(path) + ': expected ' + str(expected) + ' bytes, found ' +
                         str(len(data)), offset=min(len(data), expected))
    vectors = np.frombuffer(data, dtype='<f4', count=m * d, offset=pos).reshape(m, d)
    labels = np.frombuffer(data, dtype='<u2', count=m, offset=pos + 4 * m * d).astype(np.int64)
    labels = np.where(labels == UNKNOWN_LABEL, -1, labels)
    if class_names is None:
        known = labels[labels >= 0]
        n = int(known.max()) + 1 if known.size > 0 else 0
        class_names = [str(i) for i in range(n)]
    return FeatureBank(vectors=vectors.astype(np.float64), labels=labels,
                       class_names=list(class_names))
