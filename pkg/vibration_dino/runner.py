#! /usr/bin/env python

import os
import glob
import json
import time
import hashlib
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from tqdm import tqdm
from cellmaps_utils import logutils

import vibration_dino
from vibration_dino import dino
from vibration_dino import knn
from vibration_dino import signals
from vibration_dino import tensor as T
from vibration_dino import tfm as tfmlib
from vibration_dino import vit
from vibration_dino.config import apply_overrides
from vibration_dino.dataset import LABELED, UNLABELED, TEST
from vibration_dino.dataset import read_manifest, write_manifest, split_labels
from vibration_dino.exceptions import ConfigurationError
from vibration_dino.exceptions import EmptyInputError
from vibration_dino.exceptions import VibrationDinoError
from vibration_dino.projector import build_network

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.csv'
CONFIG_FILE = 'config.txt'
METRICS_FILE = 'metrics.jsonl'
CHECKPOINT_DIR = 'checkpoints'
FINAL_CHECKPOINT = 'final.ckpt'
PREPROCESS_STATE_FILE = 'preprocess_state.json'
REPORT_FILE = 'report.json'
SWEEP_FILE = 'sweep.csv'
BANK_FILE = 'bank.featbnk'
TEST_FEATURES_FILE = 'test.featbnk'
DIAGNOSIS_FILE = 'diagnosis.json'
ABLATION_FILE = 'ablations.csv'
ATTENTION_FILE = 'attention.attnmap'
ATTENTION_JSON_FILE = 'attention.json'
CAM_IMAGE = 'cam.ppm'
TAM_IMAGE = 'tam.ppm'


def load_maps(df, splits):
    """
    Reads the time-frequency maps of manifest rows in ``splits``

    :return: tuple of maps and class names
    """
    rows = df[df['split'].isin(splits)]
    return [tfmlib.read_tfm(p) for p in rows['path']], list(rows['class'])


def latest_checkpoint(outdir):
    """
    Path of the highest numbered epoch checkpoint in ``outdir`` or
    ``None``
    """
    paths = sorted(glob.glob(os.path.join(outdir, CHECKPOINT_DIR, 'epoch_*.ckpt')))
    return paths[-1] if len(paths) > 0 else None


def epoch_checkpoint(outdir, epoch):
    return os.path.join(outdir, CHECKPOINT_DIR, 'epoch_' + str(epoch).zfill(4) + '.ckpt')


def train_in_directory(maps, config, outdir, resume=False, save_checkpoints=True,
                       progress=False):
    """
    Trains on ``maps`` writing ``config.txt``, ``metrics.jsonl``, one
    checkpoint per epoch and ``final.ckpt`` into ``outdir``. With
    ``resume`` training continues from the latest epoch checkpoint.

    :return: tuple of final state and every metrics row of the run
    """
    metrics_path = os.path.join(outdir, METRICS_FILE)
    os.makedirs(os.path.join(outdir, CHECKPOINT_DIR), exist_ok=True)
    config.write(os.path.join(outdir, CONFIG_FILE))
    state = dino.init_state(config)
    previous = []
    checkpoint = latest_checkpoint(outdir) if resume else None
    if checkpoint is not None:
        logger.info('Resuming from ' + checkpoint)
        state.load_tensors(T.load_checkpoint(checkpoint))
        if os.path.isfile(metrics_path):
            previous = dino.read_metrics(metrics_path).to_dict('records')[:state.epoch]
    elif resume:
        logger.warning('No checkpoint found in ' + outdir + ', starting fresh')
    open(metrics_path, 'w').close()
    for row in previous:
        dino.append_metrics(metrics_path, row)

    def _on_epoch_end(cur_state, row):
        dino.append_metrics(metrics_path, row)
        if save_checkpoints:
            cur_state.save(epoch_checkpoint(outdir, cur_state.epoch))

    trainer = dino.DinoTrainer(maps, config, state=state, snapshot_dir=outdir,
                               progress=progress)
    log = trainer.train(on_epoch_end=_on_epoch_end)
    trainer.state.save(os.path.join(outdir, FINAL_CHECKPOINT))
    return trainer.state, previous + log


def load_teacher_encoder(checkpoint, config):
    """
    Encoder of the teacher stored in ``checkpoint``

    :raises ShapeError: if the checkpoint does not fit ``config``
    """
    network = build_network(config, config.torch_seed('init.teacher'))
    dino.load_network(network, T.load_checkpoint(checkpoint), 'teacher.')
    network.eval()
    return network.encoder


def file_digest(path, extra=''):
    """
    sha256 of the content of ``path`` followed by ``extra``
    """
    sha = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            sha.update(chunk)
    sha.update(extra.encode('utf-8'))
    return sha.hexdigest()


class VibrationDinoRunner(object):
    """
    Base class for the command runners. Subclasses implement
    :py:meth:`_run` and return its exit code.
    """
    COMMAND = None

    def __init__(self, outdir=None,
                 config=None,
                 skip_logging=True,
                 force=False,
                 reuse_outdir=False,
                 input_data_dict=None):
        """
        Constructor

        :param outdir: Directory to write the results of this command
        :type outdir: str
        :param config: effective configuration
        :type config: :py:class:`~vibration_dino.config.RunConfig`
        :param skip_logging: If ``True`` skip logging, if ``None`` or ``False`` do NOT skip logging
        :type skip_logging: bool
        :param force: If ``True`` write into a non empty ``outdir``
        :type force: bool
        :param reuse_outdir: If ``True`` an existing ``outdir`` is expected
                             and reused without ``force``
        :type reuse_outdir: bool
        :param input_data_dict: command line arguments, written to the
                                task start json
        :type input_data_dict: dict
        """
        logger.debug('In constructor')
        if outdir is None:
            raise VibrationDinoError('outdir is None')
        if config is None:
            raise VibrationDinoError('config is None')
        self._outdir = os.path.abspath(outdir)
        self._config = config
        self._start_time = int(time.time())
        self._force = force
        self._reuse_outdir = reuse_outdir
        self._skip_logging = False if skip_logging is None else skip_logging
        self._input_data_dict = input_data_dict
        self._failed = []
        if self._input_data_dict is None:
            self._input_data_dict = {'outdir': self._outdir,
                                     'command': self.COMMAND,
                                     'force': self._force,
                                     'skip_logging': self._skip_logging}

    def get_outdir(self):
        return self._outdir

    def get_failed_items(self):
        """
        Items (usually paths) that failed in the last :py:meth:`run`
        """
        return list(self._failed)

    def _create_output_directory(self):
        """
        Creates output directory if it does not already exist

        :raises VibrationDinoError: If output directory exists and is not
                                    empty, unless ``force`` or
                                    ``reuse_outdir`` is set
        """
        if os.path.isdir(self._outdir):
            if len(os.listdir(self._outdir)) > 0 and not self._force and not self._reuse_outdir:
                raise VibrationDinoError(self._outdir + ' already exists and is not empty, '
                                         'use --force to write into it')
            return
        os.makedirs(self._outdir, mode=0o755)

    def generate_readme(self):
        description = getattr(vibration_dino, '__description__', 'No description provided.')
        version = getattr(vibration_dino, '__version__', '0.0.0')

        with open(os.path.join(os.path.dirname(__file__), 'readme_outputs.txt'), 'r') as f:
            readme_outputs = f.read()

        readme = readme_outputs.format(DESCRIPTION=description, VERSION=version,
                                       COMMAND=self.COMMAND)
        with open(os.path.join(self._outdir, 'README.txt'), 'w') as f:
            f.write(readme)

    def _write_task_start_json(self):
        data = {'command': self.COMMAND,
                'config': self._config.to_dict()}
        if self._input_data_dict is not None:
            data.update({'commandlineargs': self._input_data_dict})

        logutils.write_task_start_json(outdir=self._outdir,
                                       start_time=self._start_time,
                                       data=data,
                                       version=vibration_dino.__version__)

    def _record_failure(self, item, error):
        logger.error('Failed on ' + str(item) + ': ' + str(error))
        self._failed.append(str(item))

    def _run(self):
        raise NotImplementedError('Subclasses must implement this method')

    def run(self):
        """
        Runs the command

        :return: 0 on success, 1 if some items failed
        :rtype: int
        """
        exitcode = 99
        self._failed = []
        try:
            logger.debug('In run method')
            self._create_output_directory()

            if self._skip_logging is False:
                logutils.setup_filelogger(outdir=self._outdir,
                                          handlerprefix='vibration_dino')

            self._write_task_start_json()

            self.generate_readme()

            exitcode = self._run()
            if len(self._failed) > 0:
                logger.error(str(len(self._failed)) + ' item(s) failed: ' +
                             ', '.join(self._failed))
                exitcode = 1
        finally:
            logutils.write_task_finish_json(outdir=self._outdir,
                                            start_time=self._start_time,
                                            status=exitcode)

        return exitcode


class _SplitWriter(VibrationDinoRunner):
    """
    Shared manifest writing for commands that create signal files
    """
    SIGNAL_DIR = 'signals'

    def _write_split_manifest(self, paths, labels):
        rng = self._config.rng('data.split')
        splits = split_labels(labels, rng, test_fraction=self._config.data.test_fraction,
                              labeled_fraction=self._config.data.labeled_fraction)
        df = pd.DataFrame({'path': paths, 'class': labels, 'split': splits})
        write_manifest(df, os.path.join(self._outdir, MANIFEST_FILE))
        counts = df.groupby(['class', 'split']).size()
        logger.info('Split counts:\n' + str(counts))
        return df


class SynthRunner(_SplitWriter):
    """
    Writes synthetic fault signals, one window per file, and a
    manifest
    """
    COMMAND = 'synth'

    def __init__(self, n_per_class=200, n_classes=signals.DEFAULT_N_CLASSES, **kwargs):
        super().__init__(**kwargs)
        if n_per_class < 1:
            raise ConfigurationError('n_per_class must be >= 1')
        self._n_per_class = n_per_class
        self._n_classes = n_classes

    def _run(self):
        names = signals.class_names(self._n_classes)
        if len(names) == 1:
            logger.warning('Generating a single class dataset, classification '
                           'results will be trivial')
        sigdir = os.path.join(self._outdir, self.SIGNAL_DIR)
        os.makedirs(sigdir, exist_ok=True)
        paths = []
        labels = []
        data = self._config.data
        for name in names:
            for i in range(self._n_per_class):
                seed = int(self._config.rng('data.' + name + '.' + str(i)).integers(0, 2 ** 62))
                sig = signals.synth_fault_signal(name, self._config.segment.window_length,
                                                 sample_rate=data.sample_rate,
                                                 noise_std=data.noise_std, seed=seed)
                path = os.path.join(sigdir, name + '_' + str(i).zfill(5) + '.txt')
                signals.write_signal(sig, path)
                paths.append(path)
                labels.append(name)
        self._write_split_manifest(paths, labels)
        logger.info('Wrote ' + str(len(paths)) + ' signals')
        return 0


class IngestRunner(_SplitWriter):
    """
    Segments recorded signal files listed in a ``path,class`` CSV into
    windows and writes them with a manifest
    """
    COMMAND = 'ingest'

    def __init__(self, inputs=None, binary=False, **kwargs):
        super().__init__(**kwargs)
        if inputs is None:
            raise VibrationDinoError('inputs is None')
        self._inputs = os.path.abspath(inputs)
        self._binary = binary

    def _run(self):
        listing = pd.read_csv(self._inputs, dtype=str, keep_default_na=False)
        for col in ('path', 'class'):
            if col not in listing.columns:
                raise ConfigurationError(self._inputs + ' is missing column ' + col)
        base = os.path.dirname(self._inputs)
        spec = signals.SegmentSpec(window_length=self._config.segment.window_length,
                                   stride=self._config.segment.stride)
        sigdir = os.path.join(self._outdir, self.SIGNAL_DIR)
        os.makedirs(sigdir, exist_ok=True)
        paths = []
        labels = []
        for row_num, (path, label) in enumerate(zip(listing['path'], listing['class'])):
            path = path if os.path.isabs(path) else os.path.join(base, path)
            try:
                sig = signals.load_signal(path, self._config.data.sample_rate, label=label)
                windows = signals.segment(sig, spec)
            except (VibrationDinoError, OSError) as e:
                self._record_failure(path, e)
                continue
            stem = str(row_num).zfill(4) + '_' + os.path.splitext(os.path.basename(path))[0]
            for i, window in enumerate(windows):
                out = os.path.join(sigdir, stem + '_' + str(i).zfill(5) +
                                   ('.bin' if self._binary else '.txt'))
                signals.write_signal(window, out, binary=self._binary)
                paths.append(out)
                labels.append(label)
        if len(paths) == 0:
            raise EmptyInputError('No windows could be extracted from ' + self._inputs)
        self._write_split_manifest(paths, labels)
        return 0


class PreprocessRunner(VibrationDinoRunner):
    """
    Converts every signal of a manifest into a time-frequency map.
    Outputs whose input content and preprocessing settings are
    unchanged are skipped.
    """
    COMMAND = 'preprocess'
    TFM_DIR = 'tfm'

    def __init__(self, manifest=None, **kwargs):
        kwargs.setdefault('reuse_outdir', True)
        super().__init__(**kwargs)
        if manifest is None:
            raise VibrationDinoError('manifest is None')
        self._manifest = os.path.abspath(manifest)
        self._skipped = 0

    def get_skipped_count(self):
        return self._skipped

    def _state_path(self):
        return os.path.join(self._outdir, PREPROCESS_STATE_FILE)

    def _load_state(self):
        if not os.path.isfile(self._state_path()):
            return {}
        with open(self._state_path(), 'r') as f:
            return json.load(f)

    def _settings_text(self):
        cfg = self._config
        return 'sample_rate=' + repr(cfg.data.sample_rate) + ';' + \
            ';'.join(k + '=' + str(v) for k, v in sorted(cfg.tfm.__dict__.items()))

    def _process_row(self, index, path, state):
        out = os.path.join(self._outdir, self.TFM_DIR, str(index).zfill(6) + '_' +
                           os.path.splitext(os.path.basename(path))[0] + '.tfm')
        digest = file_digest(path, self._settings_text())
        if state.get(out) == digest and os.path.isfile(out):
            return out, digest, True
        sig = signals.load_signal(path, self._config.data.sample_rate)
        tfmlib.write_tfm(tfmlib.preprocess(sig, self._config.tfm, source_id=path), out)
        return out, digest, False

    def _run(self):
        df = read_manifest(self._manifest)
        if len(df) == 0:
            raise EmptyInputError(self._manifest + ' has no rows')
        os.makedirs(os.path.join(self._outdir, self.TFM_DIR), exist_ok=True)
        state = self._load_state()
        new_state = {}
        results = [None] * len(df)
        self._skipped = 0
        with ThreadPoolExecutor(max_workers=self._config.threads) as executor:
            futures = [executor.submit(self._process_row, i, p, state)
                       for i, p in enumerate(df['path'])]
            for i, future in enumerate(tqdm(futures, desc='Preprocessing', disable=None)):
                try:
                    out, digest, skipped = future.result()
                except (VibrationDinoError, OSError) as e:
                    self._record_failure(df['path'].iloc[i], e)
                    continue
                results[i] = out
                new_state[out] = digest
                if skipped:
                    self._skipped += 1
        with open(self._state_path(), 'w') as f:
            json.dump(new_state, f, indent=2, sort_keys=True)
        ok = [r is not None for r in results]
        out_df = df[ok].copy()
        out_df['path'] = [r for r in results if r is not None]
        write_manifest(out_df, os.path.join(self._outdir, MANIFEST_FILE))
        logger.info('Preprocessed ' + str(len(out_df) - self._skipped) + ', skipped ' +
                    str(self._skipped) + ' up to date, failed ' + str(len(self._failed)))
        return 0


class TrainRunner(VibrationDinoRunner):
    """
    Self-distillation over the labeled and unlabeled rows of a map
    manifest, ignoring the labels
    """
    COMMAND = 'train'

    def __init__(self, manifest=None, resume=False, **kwargs):
        if resume:
            kwargs['reuse_outdir'] = True
        super().__init__(**kwargs)
        if manifest is None:
            raise VibrationDinoError('manifest is None')
        self._manifest = os.path.abspath(manifest)
        self._resume = resume

    def _run(self):
        maps, _ = load_maps(read_manifest(self._manifest), (LABELED, UNLABELED))
        logger.info('Training on ' + str(len(maps)) + ' maps')
        train_in_directory(maps, self._config, self._outdir, resume=self._resume,
                           progress=True)
        return 0


class EvalRunner(VibrationDinoRunner):
    """
    Nearest neighbor evaluation of frozen teacher features: bank from
    the labeled rows, queries from the test rows
    """
    COMMAND = 'eval'

    def __init__(self, manifest=None, checkpoint=None, neighbors=None,
                 baseline_untrained=False, exclude_self=False, **kwargs):
        super().__init__(**kwargs)
        if manifest is None or checkpoint is None:
            raise VibrationDinoError('manifest and checkpoint are required')
        self._manifest = os.path.abspath(manifest)
        self._checkpoint = os.path.abspath(checkpoint)
        self._neighbors = neighbors
        self._baseline_untrained = baseline_untrained
        self._exclude_self = exclude_self

    def _evaluate_encoder(self, encoder, bank_maps, bank_labels, test_maps, test_labels):
        bank = knn.build_bank(bank_maps, bank_labels, encoder)
        test_vectors = knn.extract_features(test_maps, encoder)
        report = knn.evaluate(test_vectors, test_labels, bank, self._config.knn,
                              exclude_self=self._exclude_self)
        return bank, test_vectors, report

    def _run(self):
        df = read_manifest(self._manifest)
        bank_maps, bank_labels = load_maps(df, (LABELED,))
        test_maps, test_labels = load_maps(df, (TEST,))
        if len(bank_maps) == 0:
            raise EmptyInputError('Manifest has no labeled rows for the bank')
        if len(test_maps) == 0:
            raise EmptyInputError('Manifest has no test rows')
        if self._exclude_self:
            test_maps, test_labels = bank_maps, bank_labels

        encoder = load_teacher_encoder(self._checkpoint, self._config)
        bank, test_vectors, report = self._evaluate_encoder(encoder, bank_maps, bank_labels,
                                                            test_maps, test_labels)
        report['n_bank'] = len(bank)

        knn.write_feature_bank(bank, os.path.join(self._outdir, BANK_FILE))
        index = {name: i for i, name in enumerate(bank.class_names)}
        knn.write_feature_bank(knn.FeatureBank(vectors=test_vectors,
                                               labels=[index.get(lab, -1) for lab in test_labels],
                                               class_names=bank.class_names),
                               os.path.join(self._outdir, TEST_FEATURES_FILE))

        if self._neighbors:
            sweep = knn.sweep_neighbors(test_vectors, test_labels, bank, self._neighbors,
                                        self._config.knn.knn_temperature,
                                        exclude_self=self._exclude_self)
            sweep.to_csv(os.path.join(self._outdir, SWEEP_FILE), index=False)
            report['sweep'] = sweep.to_dict('records')
            print(sweep.to_string(index=False))

        if self._baseline_untrained:
            untrained = build_network(self._config, self._config.torch_seed('init.teacher'))
            untrained.eval()
            _, _, base = self._evaluate_encoder(untrained.encoder, bank_maps, bank_labels,
                                                test_maps, test_labels)
            report['baseline_untrained_accuracy'] = base['accuracy']
            report['accuracy_gap'] = report['accuracy'] - base['accuracy']

        knn.write_report(report, os.path.join(self._outdir, REPORT_FILE), config=self._config)
        print('accuracy: ' + str(report['accuracy']))
        print(pd.DataFrame(report['confusion_percent'], index=report['classes'],
                           columns=report['classes']).round(2).to_string())
        return 0


class DiagnoseRunner(VibrationDinoRunner):
    """
    Mode collapse verdict for a metrics log, optionally running the
    four centering/sharpening designs on a manifest
    """
    COMMAND = 'diagnose'

    def __init__(self, metrics=None, manifest=None, run_ablations=False, **kwargs):
        super().__init__(**kwargs)
        if metrics is None and not run_ablations:
            raise VibrationDinoError('metrics log or ablation run is required')
        if run_ablations and manifest is None:
            raise VibrationDinoError('manifest is required to run ablations')
        self._metrics = os.path.abspath(metrics) if metrics is not None else None
        self._manifest = os.path.abspath(manifest) if manifest is not None else None
        self._run_ablations = run_ablations

    def _summarize(self, trace):
        cfg = self._config.dino
        df = pd.DataFrame(trace)
        verdict = dino.collapse_classify(df, self._config.projector.out_dim,
                                         window=cfg.collapse_window, eps_kl=cfg.collapse_eps_kl)
        tail = df.tail(cfg.collapse_window)
        return {'verdict': verdict.value,
                'epochs': len(df),
                'loss': float(tail['loss'].mean()) if 'loss' in tail else None,
                'kl': float(tail['kl'].mean()),
                'entropy': float(tail['entropy'].mean()),
                'ln_k': float(np.log(self._config.projector.out_dim))}

    def _run(self):
        result = {}
        if self._metrics is not None:
            result = self._summarize(dino.read_metrics(self._metrics))
            print('verdict: ' + result['verdict'])
        if self._run_ablations:
            maps, _ = load_maps(read_manifest(self._manifest), (LABELED, UNLABELED))
            rows = []
            for design in dino.ABLATIONS:
                config = dino.apply_ablation(self._config, design)
                workdir = os.path.join(self._outdir, design)
                os.makedirs(workdir, exist_ok=True)
                logger.info('Training design ' + design)
                _, log = train_in_directory(maps, config, workdir, save_checkpoints=False)
                row = {'design': design}
                row.update(self._summarize(log))
                rows.append(row)
            table = pd.DataFrame(rows)
            table.to_csv(os.path.join(self._outdir, ABLATION_FILE), index=False)
            result['ablations'] = rows
            print(table.to_string(index=False))
        with open(os.path.join(self._outdir, DIAGNOSIS_FILE), 'w') as f:
            json.dump(result, f, indent=2, sort_keys=True)
        return 0


class AttentionRunner(VibrationDinoRunner):
    """
    Last-block attention maps of the teacher encoder for one map
    """
    COMMAND = 'attention'

    def __init__(self, checkpoint=None, tfm=None, keep_mass=0.9, **kwargs):
        super().__init__(**kwargs)
        if checkpoint is None or tfm is None:
            raise VibrationDinoError('checkpoint and tfm are required')
        self._checkpoint = os.path.abspath(checkpoint)
        self._tfm = os.path.abspath(tfm)
        self._keep_mass = keep_mass

    def _run(self):
        image = tfmlib.read_tfm(self._tfm)
        encoder = load_teacher_encoder(self._checkpoint, self._config)
        maps = vit.extract_attention(image, encoder, keep_mass=self._keep_mass)
        vit.write_attention_maps(maps, os.path.join(self._outdir, ATTENTION_FILE))
        vit.render_attention(image, maps, os.path.join(self._outdir, CAM_IMAGE),
                             os.path.join(self._outdir, TAM_IMAGE))
        ratio = maps.concentration_ratio()
        with open(os.path.join(self._outdir, ATTENTION_JSON_FILE), 'w') as f:
            json.dump({'concentration_ratio': ratio,
                       'keep_mass': self._keep_mass,
                       'kept_patches': int(maps.tam.sum()),
                       'n_patches': maps.n_patches}, f, indent=2)
        print('cam max/min ratio: ' + str(ratio))
        return 0


class SweepRunner(VibrationDinoRunner):
    """
    Trains and evaluates once per point of a hyperparameter grid
    """
    COMMAND = 'sweep'

    def __init__(self, manifest=None, grid=None, **kwargs):
        super().__init__(**kwargs)
        if manifest is None:
            raise VibrationDinoError('manifest is None')
        if not grid:
            raise ConfigurationError('sweep grid is empty')
        self._manifest = os.path.abspath(manifest)
        self._grid = grid

    def _run(self):
        df = read_manifest(self._manifest)
        maps, _ = load_maps(df, (LABELED, UNLABELED))
        bank_maps, bank_labels = load_maps(df, (LABELED,))
        test_maps, test_labels = load_maps(df, (TEST,))
        if len(test_maps) == 0:
            raise EmptyInputError('Manifest has no test rows')
        keys = list(self._grid.keys())
        rows = []
        for num, values in enumerate(itertools.product(*[self._grid[k] for k in keys])):
            point = dict(zip(keys, values))
            row = dict(point)
            try:
                config = apply_overrides(self._config, point).validate()
            except ConfigurationError as ce:
                self._record_failure(point, ce)
                continue
            workdir = os.path.join(self._outdir, 'point_' + str(num).zfill(3))
            os.makedirs(workdir, exist_ok=True)
            logger.info('Sweep point ' + str(point))
            state, log = train_in_directory(maps, config, workdir, save_checkpoints=False)
            bank = knn.build_bank(bank_maps, bank_labels, state.teacher.encoder)
            vectors = knn.extract_features(test_maps, state.teacher.encoder)
            report = knn.evaluate(vectors, test_labels, bank, config.knn)
            row.update({'accuracy': report['accuracy'],
                        'kl': log[-1]['kl'] if log else None,
                        'entropy': log[-1]['entropy'] if log else None})
            rows.append(row)
        table = pd.DataFrame(rows)
        table.to_csv(os.path.join(self._outdir, SWEEP_FILE), index=False)
        print(table.to_string(index=False))
        return 0
