# -*- coding: utf-8 -*-

"""
Self-distillation with no labels: tempered softmax, centering,
cross-entropy objective, EMA teacher, schedules, the training loop
and mode-collapse diagnostics.
"""

import copy
import enum
import json
import logging
import math
import os
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader
from torch.utils.data.sampler import RandomSampler
from tqdm import tqdm

from vibration_dino import tensor as T
from vibration_dino.config import substream, torch_generator
from vibration_dino.dataset import MultiCropDataset
from vibration_dino.exceptions import ConfigurationError
from vibration_dino.exceptions import ContractError
from vibration_dino.exceptions import DomainError
from vibration_dino.exceptions import EmptyInputError
from vibration_dino.exceptions import ParseError
from vibration_dino.exceptions import ShapeError
from vibration_dino.exceptions import TrainingDivergedError
from vibration_dino.projector import build_network

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-6

METRIC_FIELDS = ['epoch', 'step', 'loss', 'kl', 'entropy', 'lr', 'm', 'center_norm']

BOTH = 'both'
ONLY_CENTERING = 'only_centering'
ONLY_SHARPENING = 'only_sharpening'
NEITHER = 'neither'
ABLATIONS = (BOTH, ONLY_CENTERING, ONLY_SHARPENING, NEITHER)


class CollapseVerdict(enum.Enum):
    NONE = 'none'
    OVER_UNIFORMITY = 'over_uniformity'
    OVER_ALIGNMENT = 'over_alignment'


def apply_ablation(config, design):
    """
    Returns ``config`` modified for one of the four collapse study
    designs. Centering is removed by freezing the center at zero,
    sharpening by setting the teacher temperature to the student's.

    :param config: run configuration
    :type config: :py:class:`~vibration_dino.config.RunConfig`
    :param design: one of :py:const:`ABLATIONS`
    :rtype: :py:class:`~vibration_dino.config.RunConfig`
    """
    if design not in ABLATIONS:
        raise ConfigurationError('Unknown ablation: ' + str(design) +
                                 ', expected one of ' + str(ABLATIONS))
    dino = config.dino
    if design in (ONLY_CENTERING, NEITHER):
        dino = replace(dino, teacher_temp=dino.student_temp)
    if design in (ONLY_SHARPENING, NEITHER):
        dino = replace(dino, freeze_center=True)
    return replace(config, dino=dino)


def tempered_softmax(logits, tau):
    """
    ``softmax(q / tau)`` along the last axis

    :raises DomainError: if ``tau <= 0``
    """
    if not tau > 0:
        raise DomainError('Temperature must be positive, got ' + str(tau))
    return T.softmax(T.scale(logits, 1.0 / tau), axis=-1)


def center_apply_and_update(teacher_logits, center, momentum, freeze=False):
    """
    Subtracts the running center from teacher logits, then moves the
    center toward the batch mean of the raw logits:
    ``c <- m_c c + (1 - m_c) mean(q)``

    :param teacher_logits: ``[B, K]`` (or a list of such tensors,
                           one per view)
    :param center: ``[K]`` current center
    :param momentum: ``m_c``
    :param freeze: keep the center unchanged
    :raises ContractError: on an empty batch
    :return: tuple of centered logits (same structure as the input)
             and the updated center
    """
    batches = teacher_logits if isinstance(teacher_logits, (list, tuple)) else [teacher_logits]
    if len(batches) == 0 or any(b.shape[0] == 0 for b in batches):
        raise ContractError('Centering needs a non-empty batch')
    centered = [T.sub(b, center) for b in batches]
    if freeze:
        new_center = center
    else:
        with torch.no_grad():
            batch_mean = torch.cat([b.detach() for b in batches], dim=0).mean(dim=0)
            new_center = center * momentum + batch_mean * (1.0 - momentum)
    if isinstance(teacher_logits, (list, tuple)):
        return centered, new_center
    return centered[0], new_center


def _check_probabilities(probs, what):
    for p in probs:
        sums = p.detach().sum(dim=-1)
        if not bool(torch.all(torch.abs(sums - 1.0) <= PROBABILITY_TOLERANCE)):
            raise ContractError(what + ' probabilities do not sum to 1')
        if bool(torch.any(p.detach() < 0)):
            raise ContractError(what + ' probabilities must be non-negative')


def _pairs(n_teacher, n_student):
    return [(t, s) for t in range(n_teacher) for s in range(n_student) if s != t]


def _cross_entropy(teacher_p, student_logp):
    return -(teacher_p * student_logp).sum(dim=-1)


def dino_loss(student_probs, teacher_probs):
    """
    Mean over view pairs and batch of ``-sum P_t log P_s``. Student view
    ``i`` and teacher view ``i`` are the same global crop and are not
    paired. Teacher probabilities are constants.

    :param student_probs: per view ``[B, K]``, globals first
    :param teacher_probs: per global view ``[B, K]``
    :raises ContractError: if a distribution does not sum to 1
    :return: scalar tensor
    """
    _check_probabilities(student_probs, 'Student')
    _check_probabilities(teacher_probs, 'Teacher')
    teacher_probs = [T.stop_gradient(p) for p in teacher_probs]
    terms = [torch.special.xlogy(teacher_probs[t], student_probs[s]).sum(dim=-1).neg().mean()
             for t, s in _pairs(len(teacher_probs), len(student_probs))]
    return torch.stack(terms).mean()


def dino_loss_from_logits(student_logits, teacher_probs, student_temp):
    """
    :py:func:`dino_loss` with the student side computed as a log
    softmax of ``student_logits / student_temp``
    """
    teacher_probs = [T.stop_gradient(p) for p in teacher_probs]
    logps = [T.log_softmax(T.scale(q, 1.0 / student_temp), axis=-1) for q in student_logits]
    terms = [_cross_entropy(teacher_probs[t], logps[s]).mean()
             for t, s in _pairs(len(teacher_probs), len(logps))]
    return torch.stack(terms).mean()


def entropy(p):
    """
    ``h(P) = -sum P ln P`` along the last axis
    """
    return -torch.special.xlogy(p, p).sum(dim=-1)


def diagnostics(student_probs, teacher_probs):
    """
    Splits the target entropy into KL divergence and teacher entropy.
    ``kl`` is the mean over contributing pairs of
    ``sum P_t (ln P_t - ln P_s)``, ``entropy`` the mean ``h(P_t)``, and
    ``target_entropy = kl + entropy``.

    :raises ContractError: on invalid distributions
    :rtype: dict
    """
    _check_probabilities(student_probs, 'Student')
    _check_probabilities(teacher_probs, 'Teacher')
    with torch.no_grad():
        ce = []
        kl = []
        h = []
        for t, s in _pairs(len(teacher_probs), len(student_probs)):
            pt = teacher_probs[t].double()
            ps = student_probs[s].double()
            ht = entropy(pt)
            cross = -torch.special.xlogy(pt, ps).sum(dim=-1)
            ce.append(cross.mean())
            kl.append((cross - ht).mean())
            h.append(ht.mean())
        return {'target_entropy': float(torch.stack(ce).mean()),
                'kl': float(torch.stack(kl).mean()),
                'entropy': float(torch.stack(h).mean())}


def ema_update_teacher(teacher, student, m):
    """
    ``theta_t <- m theta_t + (1 - m) theta_s`` for every parameter

    :raises DomainError: unless ``0 <= m <= 1``
    """
    if not 0.0 <= m <= 1.0:
        raise DomainError('EMA momentum must lie in [0, 1], got ' + str(m))
    with torch.no_grad():
        for p_t, p_s in zip(teacher.parameters(), student.parameters()):
            if m == 1.0:
                continue
            if m == 0.0:
                p_t.copy_(p_s)
            else:
                p_t.mul_(m).add_(p_s.detach(), alpha=1.0 - m)
    return teacher


def lr_schedule(config):
    """
    Learning rate per epoch: linear warmup from ``lr_start`` to
    ``lr_peak`` then cosine decay to ``lr_floor``

    :param config: :py:class:`~vibration_dino.config.DinoConfig`
    :rtype: :py:class:`numpy.ndarray`
    """
    epochs = config.epochs
    warmup = min(config.warmup_epochs, epochs)
    res = np.empty(epochs)
    for e in range(epochs):
        if e < warmup:
            res[e] = config.lr_start + (config.lr_peak - config.lr_start) * e / max(warmup, 1)
        else:
            span = max(epochs - warmup, 1)
            progress = (e - warmup) / span
            res[e] = config.lr_floor + 0.5 * (config.lr_peak - config.lr_floor) * \
                (1.0 + math.cos(math.pi * progress))
    return res


def momentum_schedule(config, steps_per_epoch):
    """
    Teacher EMA momentum per step, cosine from ``momentum_start`` to 1
    """
    total = config.epochs * steps_per_epoch
    steps = np.arange(total)
    return 1.0 - (1.0 - config.momentum_start) * 0.5 * (1.0 + np.cos(np.pi * steps / max(total, 1)))


@dataclass(eq=False)
class TrainState:
    """
    Everything needed to continue training
    """
    student: torch.nn.Module
    teacher: torch.nn.Module
    center: torch.Tensor
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0

    def named_tensors(self):
        """
        Flat name to tensor mapping for the checkpoint format
        """
        res = {}
        for name, value in self.student.state_dict().items():
            res['student.' + name] = value
        for name, value in self.teacher.state_dict().items():
            res['teacher.' + name] = value
        res['center'] = self.center
        names = {id(p): n for n, p in self.student.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group['params']:
                st = self.optimizer.state.get(p)
                if not st:
                    continue
                res['optim.exp_avg.' + names[id(p)]] = st['exp_avg']
                res['optim.exp_avg_sq.' + names[id(p)]] = st['exp_avg_sq']
                res['optim.step.' + names[id(p)]] = torch.as_tensor(float(st['step']))
        res['state.epoch'] = torch.tensor(float(self.epoch))
        res['state.step'] = torch.tensor(float(self.step))
        return res

    def save(self, path):
        T.save_checkpoint(path, self.named_tensors())

    def load_tensors(self, tensors):
        """
        Restores from :py:func:`~vibration_dino.tensor.load_checkpoint`
        output
        """
        load_network(self.student, tensors, 'student.')
        load_network(self.teacher, tensors, 'teacher.')
        dtype = torch.get_default_dtype()
        self.center = tensors['center'].to(dtype)
        params = dict(self.student.named_parameters())
        for name, p in params.items():
            key = 'optim.exp_avg.' + name
            if key not in tensors:
                continue
            self.optimizer.state[p] = {
                'step': tensors['optim.step.' + name].clone().to(torch.float32),
                'exp_avg': tensors[key].to(dtype).clone(),
                'exp_avg_sq': tensors['optim.exp_avg_sq.' + name].to(dtype).clone()}
        self.epoch = int(tensors['state.epoch'])
        self.step = int(tensors['state.step'])


def load_network(module, tensors, prefix):
    """
    Loads the entries of ``tensors`` starting with ``prefix`` into
    ``module``

    :raises ShapeError: naming the parameter and both shapes on a
                        mismatch
    """
    own = module.state_dict()
    state = {}
    for name, value in own.items():
        key = prefix + name
        if key not in tensors:
            raise ShapeError('Checkpoint has no entry ' + key)
        if tuple(tensors[key].shape) != tuple(value.shape):
            raise ShapeError('Checkpoint entry ' + key + ' has shape ' +
                             str(tuple(tensors[key].shape)) + ', model expects ' +
                             str(tuple(value.shape)))
        state[name] = tensors[key].to(value.dtype)
    module.load_state_dict(state)
    return module


def init_state(config):
    """
    Fresh student, teacher, center and optimizer. Student and teacher
    get independent draws unless ``identical_init`` is set.

    :param config: :py:class:`~vibration_dino.config.RunConfig`
    :rtype: :py:class:`TrainState`
    """
    student = build_network(config, config.torch_seed('init.student'))
    if config.dino.identical_init:
        teacher = copy.deepcopy(student)
    else:
        teacher = build_network(config, config.torch_seed('init.teacher'))
    for p in teacher.parameters():
        p.requires_grad_(False)
    optimizer = T.make_optimizer(student.parameters(), lr=config.dino.lr_start,
                                 weight_decay=config.dino.weight_decay)
    return TrainState(student=student, teacher=teacher,
                      center=torch.zeros(config.projector.out_dim), optimizer=optimizer)


class DinoTrainer(object):
    """
    Runs self-distillation over unlabeled maps

    :param maps: training maps, labels are never read
    :param config: :py:class:`~vibration_dino.config.RunConfig`
    :param state: state to continue from, fresh when ``None``
    :param snapshot_dir: where a snapshot is written if the loss diverges
    :param progress: show a per-epoch progress bar
    """
    def __init__(self, maps, config, state=None, snapshot_dir=None, progress=False):
        if len(maps) == 0:
            raise EmptyInputError('Training set is empty')
        self._config = config
        self._state = state if state is not None else init_state(config)
        self._snapshot_dir = snapshot_dir
        self._progress = progress
        self._dataset = MultiCropDataset(maps, config.dino, config.seed)
        self._batch_size = min(config.dino.batch_size, len(maps))
        self._steps_per_epoch = int(math.ceil(len(maps) / self._batch_size))
        self._lr = lr_schedule(config.dino)
        self._momentum = momentum_schedule(config.dino, self._steps_per_epoch)

    @property
    def state(self):
        return self._state

    def _loader(self, epoch):
        self._dataset.set_epoch(epoch)
        sampler = RandomSampler(self._dataset,
                                generator=torch_generator(substream(self._config.seed,
                                                                    'data.shuffle', epoch)))
        return DataLoader(self._dataset, sampler=sampler, batch_size=self._batch_size,
                          drop_last=False, num_workers=0)

    def _snapshot(self, reason):
        path = None
        if self._snapshot_dir is not None:
            path = os.path.join(self._snapshot_dir, 'diverged_epoch_' +
                                str(self._state.epoch) + '.ckpt')
            self._state.save(path)
        raise TrainingDivergedError(reason + ' at epoch ' + str(self._state.epoch) +
                                    ' step ' + str(self._state.step) +
                                    ('; snapshot written to ' + path if path else ''),
                                    snapshot=path)

    def train_step(self, views, lr, m):
        """
        One optimization step on a batch of stacked views
        ``[B, 2 + N, H, W, C]``

        :return: dict with loss, kl and entropy of the step
        """
        cfg = self._config.dino
        state = self._state
        views = views.transpose(0, 1)
        n_views = views.shape[0]
        state.student.train()

        with torch.no_grad():
            teacher_logits = [state.teacher(views[i]) for i in range(2)]
        centered, new_center = center_apply_and_update(teacher_logits, state.center,
                                                       cfg.center_momentum,
                                                       freeze=cfg.freeze_center)
        teacher_probs = [tempered_softmax(q, cfg.teacher_temp) for q in centered]

        batch = views.shape[1]
        flat = views.reshape((n_views * batch,) + tuple(views.shape[2:]))
        student_logits = list(state.student(flat).split(batch, dim=0))
        loss = dino_loss_from_logits(student_logits, teacher_probs, cfg.student_temp)
        try:
            T.assert_finite(loss, 'loss')
        except ContractError as ce:
            self._snapshot(str(ce))

        state.optimizer.zero_grad()
        T.backward(loss)
        T.adam_step(state.optimizer, lr=lr, max_grad_norm=cfg.max_grad_norm)
        ema_update_teacher(state.teacher, state.student, m)
        state.center = new_center
        state.step += 1

        student_probs = [tempered_softmax(q.detach(), cfg.student_temp) for q in student_logits]
        stats = diagnostics(student_probs, teacher_probs)
        logger.debug('step ' + str(state.step) + ' loss ' + str(float(loss)) +
                     ' kl ' + str(stats['kl']) + ' entropy ' + str(stats['entropy']))
        return {'loss': float(loss), 'kl': stats['kl'], 'entropy': stats['entropy']}

    def train_epoch(self):
        """
        One pass over the data

        :return: metrics row for the epoch
        :rtype: dict
        """
        state = self._state
        epoch = state.epoch
        if epoch >= len(self._lr):
            raise ContractError('Epoch ' + str(epoch) + ' is past the configured ' +
                                str(len(self._lr)) + ' epochs')
        lr = float(self._lr[epoch])
        rows = []
        m = float(self._momentum[0])
        loader = self._loader(epoch)
        for views in tqdm(loader, desc='epoch ' + str(epoch + 1), disable=not self._progress):
            m = float(self._momentum[min(state.step, len(self._momentum) - 1)])
            rows.append(self.train_step(views, lr, m))
        state.epoch += 1
        res = {'epoch': state.epoch,
               'step': state.step,
               'loss': float(np.mean([r['loss'] for r in rows])),
               'kl': float(np.mean([r['kl'] for r in rows])),
               'entropy': float(np.mean([r['entropy'] for r in rows])),
               'lr': lr,
               'm': m,
               'center_norm': float(torch.linalg.vector_norm(state.center))}
        logger.info('Epoch ' + str(res['epoch']) + ': loss ' + str(res['loss']) +
                    ' kl ' + str(res['kl']) + ' entropy ' + str(res['entropy']))
        return res

    def train(self, epochs=None, on_epoch_end=None):
        """
        Trains until ``epochs`` (default: configured epochs) have run

        :param on_epoch_end: optional callable taking the state and the
                             metrics row, called after every epoch
        :return: metrics rows of the epochs run by this call
        :rtype: list
        """
        epochs = self._config.dino.epochs if epochs is None else epochs
        log = []
        while self._state.epoch < epochs:
            row = self.train_epoch()
            log.append(row)
            if on_epoch_end is not None:
                on_epoch_end(self._state, row)
        return log


def train(maps, config, state=None, snapshot_dir=None, metrics_path=None, progress=False):
    """
    Self-distillation training over ``maps``

    :param maps: :py:class:`~vibration_dino.tfm.TimeFrequencyMap` list,
                 labels are ignored
    :param config: :py:class:`~vibration_dino.config.RunConfig`
    :param metrics_path: if set, one JSON object per epoch is appended
    :return: tuple of final :py:class:`TrainState` and metrics rows
    """
    trainer = DinoTrainer(maps, config, state=state, snapshot_dir=snapshot_dir,
                          progress=progress)

    def _append(_, row):
        if metrics_path is not None:
            append_metrics(metrics_path, row)

    log = trainer.train(on_epoch_end=_append)
    return trainer.state, log


def _json_scalar(value):
    # numpy scalars read back through pandas
    return value.item()


def append_metrics(path, row):
    """
    Appends one metrics row as a JSON line
    """
    with open(path, 'a') as f:
        f.write(json.dumps({k: row[k] for k in METRIC_FIELDS}, default=_json_scalar) + '\n')


def read_metrics(path):
    """
    Reads a JSON lines metrics log

    :raises ParseError: naming the line number of a malformed row
    :rtype: :py:class:`pandas.DataFrame`
    """
    rows = []
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip() == '':
                continue
            try:
                row = json.loads(line)
            except ValueError as ve:
                raise ParseError(str(path) + ': line ' + str(lineno) + ' is not JSON: ' +
                                 str(ve), line=lineno)
            if not isinstance(row, dict) or any(k not in row for k in ('kl', 'entropy')):
                raise ParseError(str(path) + ': line ' + str(lineno) +
                                 ' lacks kl/entropy fields', line=lineno)
            rows.append(row)
    return pd.DataFrame(rows)


def collapse_classify(trace, n_logits, window=5, eps_kl=0.01):
    """
    Classifies the end of a training run. With trailing mean KL below
    ``eps_kl``: entropy above 0.9 ln K is over-uniformity, below
    0.1 ln K over-alignment, in between the nearer of the two.

    :param trace: metrics rows (list of dict or DataFrame) with ``kl``
                  and ``entropy``
    :param n_logits: K, the projector output width
    :raises ContractError: with fewer than ``window`` rows
    :rtype: :py:class:`CollapseVerdict`
    """
    df = pd.DataFrame(trace) if not isinstance(trace, pd.DataFrame) else trace
    if len(df) < window:
        raise ContractError('Collapse classification needs at least ' + str(window) +
                            ' epochs, got ' + str(len(df)))
    tail = df.tail(window)
    kl = float(tail['kl'].mean())
    h = float(tail['entropy'].mean())
    log_k = math.log(n_logits)
    if kl >= eps_kl:
        return CollapseVerdict.NONE
    if h > 0.9 * log_k:
        return CollapseVerdict.OVER_UNIFORMITY
    if h < 0.1 * log_k:
        return CollapseVerdict.OVER_ALIGNMENT
    logger.warning('KL collapsed but entropy ' + str(h) + ' is between the bands, '
                   'reporting the nearer form')
    return CollapseVerdict.OVER_UNIFORMITY if h >= 0.5 * log_k else CollapseVerdict.OVER_ALIGNMENT
