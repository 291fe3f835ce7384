#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""Tests for `vibration_dino.runner` module."""

import json
import os
import shutil
import tempfile
import unittest

import numpy as np
import pandas as pd

from vibration_dino import runner
from vibration_dino import signals
from vibration_dino.config import DataConfig
from vibration_dino.config import DinoConfig
from vibration_dino.config import KnnConfig
from vibration_dino.config import ProjectorConfig
from vibration_dino.config import RunConfig
from vibration_dino.config import SegmentConfig
from vibration_dino.config import TFMConfig
from vibration_dino.config import ViTConfig
from vibration_dino.dataset import LABELED, TEST, UNLABELED, read_manifest
from vibration_dino.exceptions import VibrationDinoError
from vibration_dino.vit import read_attention_maps


def tiny_config(epochs=2, seed=0):
    return RunConfig(segment=SegmentConfig(window_length=64, stride=64),
                     data=DataConfig(labeled_fraction=0.01),
                     tfm=TFMConfig(image_size=8, n_scales=8),
                     vit=ViTConfig(patch_size=4, embed_dim=8, n_heads=2, head_dim=4,
                                   mlp_dim=16, depth=1),
                     projector=ProjectorConfig(head_dims=(16, 8), out_dim=10),
                     dino=DinoConfig(n_local_crops=1, batch_size=4, epochs=epochs,
                                     warmup_epochs=1, collapse_window=2),
                     knn=KnnConfig(n_neighbors=1),
                     seed=seed)


class TestVibrationDinoRunner(unittest.TestCase):
    """Tests for `vibration_dino.runner` module."""

    def setUp(self):
        """Set up test fixtures, if any."""
        self._temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Tear down test fixtures, if any."""
        shutil.rmtree(self._temp_dir)

    def _dir(self, name):
        return os.path.join(self._temp_dir, name)

    def _synth_and_preprocess(self, config, n_per_class=6, n_classes=2):
        synth = runner.SynthRunner(outdir=self._dir('synth'), config=config,
                                   n_per_class=n_per_class, n_classes=n_classes)
        self.assertEqual(0, synth.run())
        prep = runner.PreprocessRunner(outdir=self._dir('prep'), config=config,
                                       manifest=os.path.join(self._dir('synth'),
                                                             runner.MANIFEST_FILE))
        self.assertEqual(0, prep.run())
        return os.path.join(self._dir('prep'), runner.MANIFEST_FILE)

    def test_constructor(self):
        myobj = runner.VibrationDinoRunner(outdir='foo', config=RunConfig())
        self.assertIsNotNone(myobj)
        self.assertEqual(os.path.abspath('foo'), myobj.get_outdir())

    def test_constructor_outdir_must_be_set(self):
        try:
            runner.VibrationDinoRunner(config=RunConfig())
            self.fail('Expected exception')
        except VibrationDinoError as e:
            self.assertEqual('outdir is None', str(e))

    def test_constructor_config_must_be_set(self):
        try:
            runner.VibrationDinoRunner(outdir='foo')
            self.fail('Expected exception')
        except VibrationDinoError as e:
            self.assertEqual('config is None', str(e))

    def test_subclass_required_arguments(self):
        for cls in (runner.IngestRunner, runner.PreprocessRunner, runner.TrainRunner,
                    runner.EvalRunner, runner.AttentionRunner, runner.DiagnoseRunner,
                    runner.SweepRunner):
            with self.assertRaises(VibrationDinoError, msg=cls.__name__):
                cls(outdir='foo', config=RunConfig())

    def test_synth_stratified_split(self):
        outdir = self._dir('synth')
        myobj = runner.SynthRunner(outdir=outdir, config=tiny_config(), n_per_class=200,
                                   n_classes=4)
        self.assertEqual(0, myobj.run())
        df = read_manifest(os.path.join(outdir, runner.MANIFEST_FILE))
        self.assertEqual(800, len(df))
        self.assertEqual(800, len(os.listdir(os.path.join(outdir, 'signals'))))
        for name in signals.class_names(4):
            counts = df[df['class'] == name]['split'].value_counts()
            self.assertEqual(2, counts[LABELED])
            self.assertEqual(40, counts[TEST])
            self.assertEqual(158, counts[UNLABELED])
        for name in ('README.txt', runner.MANIFEST_FILE):
            self.assertTrue(os.path.isfile(os.path.join(outdir, name)))
        sig = signals.load_signal(df['path'].iloc[0], 12000.0)
        self.assertEqual(64, len(sig))

    def test_synth_same_seed_same_output(self):
        for name in ('a', 'b'):
            myobj = runner.SynthRunner(outdir=self._dir(name), config=tiny_config(seed=5),
                                       n_per_class=5, n_classes=3)
            self.assertEqual(0, myobj.run())
        texts = []
        for name in ('a', 'b'):
            with open(os.path.join(self._dir(name), runner.MANIFEST_FILE), 'r') as f:
                texts.append(f.read())
            with open(os.path.join(self._dir(name), 'signals', 'normal_00003.txt'), 'r') as f:
                texts.append(f.read())
        self.assertEqual(texts[0], texts[2])
        self.assertEqual(texts[1], texts[3])

    def test_single_class_warns(self):
        myobj = runner.SynthRunner(outdir=self._dir('one'), config=tiny_config(),
                                   n_per_class=3, n_classes=1)
        with self.assertLogs('vibration_dino.runner', level='WARNING'):
            self.assertEqual(0, myobj.run())

    def test_refuses_non_empty_outdir(self):
        outdir = self._dir('synth')
        os.makedirs(outdir)
        with open(os.path.join(outdir, 'keep.txt'), 'w') as f:
            f.write('x')
        myobj = runner.SynthRunner(outdir=outdir, config=tiny_config(), n_per_class=2)
        try:
            myobj.run()
            self.fail('Expected exception')
        except VibrationDinoError as e:
            self.assertTrue('--force' in str(e))
        myobj = runner.SynthRunner(outdir=outdir, config=tiny_config(), n_per_class=2,
                                   force=True)
        self.assertEqual(0, myobj.run())

    def test_ingest(self):
        rng = np.random.default_rng(0)
        rows = []
        for i, label in enumerate(['ball', 'normal']):
            path = os.path.join(self._temp_dir, 'raw' + str(i) + '.txt')
            signals.write_signal(signals.VibrationSignal(samples=rng.normal(size=200),
                                                         sample_rate=12000.0), path)
            rows.append({'path': os.path.basename(path), 'class': label})
        rows.append({'path': 'missing.txt', 'class': 'ball'})
        inputs = os.path.join(self._temp_dir, 'inputs.csv')
        pd.DataFrame(rows).to_csv(inputs, index=False)
        myobj = runner.IngestRunner(outdir=self._dir('ingest'), config=tiny_config(),
                                    inputs=inputs, binary=True)
        self.assertEqual(1, myobj.run())
        self.assertEqual(1, len(myobj.get_failed_items()))
        self.assertTrue('missing.txt' in myobj.get_failed_items()[0])
        df = read_manifest(os.path.join(self._dir('ingest'), runner.MANIFEST_FILE))
        self.assertEqual(6, len(df))
        self.assertTrue(all(p.endswith('.bin') for p in df['path']))
        self.assertEqual(64, len(signals.load_signal(df['path'].iloc[0], 12000.0)))

    def test_preprocess_and_rerun_is_noop(self):
        config = tiny_config()
        manifest = self._synth_and_preprocess(config, n_per_class=3)
        df = read_manifest(manifest)
        self.assertEqual(6, len(df))
        self.assertTrue(all(p.endswith('.tfm') for p in df['path']))
        stamps = [os.path.getmtime(p) for p in df['path']]
        prep = runner.PreprocessRunner(outdir=self._dir('prep'), config=config,
                                       manifest=os.path.join(self._dir('synth'),
                                                             runner.MANIFEST_FILE))
        self.assertEqual(0, prep.run())
        self.assertEqual(6, prep.get_skipped_count())
        self.assertEqual(stamps, [os.path.getmtime(p) for p in df['path']])

    def test_preprocess_missing_file(self):
        manifest = os.path.join(self._temp_dir, 'manifest.csv')
        path = os.path.join(self._temp_dir, 'ok.txt')
        signals.write_signal(signals.synth_fault_signal('ball', 64, seed=1), path)
        pd.DataFrame({'path': [path, os.path.join(self._temp_dir, 'gone.txt')],
                      'class': ['ball', 'ball'],
                      'split': [LABELED, TEST]}).to_csv(manifest, index=False)
        myobj = runner.PreprocessRunner(outdir=self._dir('prep'), config=tiny_config(),
                                        manifest=manifest)
        self.assertEqual(1, myobj.run())
        self.assertEqual(1, len(myobj.get_failed_items()))
        df = read_manifest(os.path.join(self._dir('prep'), runner.MANIFEST_FILE))
        self.assertEqual(1, len(df))

    def test_train_eval_diagnose_attention(self):
        config = tiny_config(epochs=2)
        manifest = self._synth_and_preprocess(config)

        train_dir = self._dir('train')
        trainer = runner.TrainRunner(outdir=train_dir, config=config, manifest=manifest)
        self.assertEqual(0, trainer.run())
        for name in (runner.CONFIG_FILE, runner.METRICS_FILE, runner.FINAL_CHECKPOINT,
                     os.path.join(runner.CHECKPOINT_DIR, 'epoch_0002.ckpt')):
            self.assertTrue(os.path.isfile(os.path.join(train_dir, name)), name)
        with open(os.path.join(train_dir, runner.METRICS_FILE), 'r') as f:
            self.assertEqual(2, len(f.readlines()))

        resumed = runner.TrainRunner(outdir=train_dir, config=tiny_config(epochs=3),
                                     manifest=manifest, resume=True)
        self.assertEqual(0, resumed.run())
        with open(os.path.join(train_dir, runner.METRICS_FILE), 'r') as f:
            epochs = [json.loads(line)['epoch'] for line in f]
        self.assertEqual([1, 2, 3], epochs)

        checkpoint = os.path.join(train_dir, runner.FINAL_CHECKPOINT)
        eval_dir = self._dir('eval')
        evaluator = runner.EvalRunner(outdir=eval_dir, config=config, manifest=manifest,
                                      checkpoint=checkpoint, neighbors=[1, 2],
                                      baseline_untrained=True)
        self.assertEqual(0, evaluator.run())
        with open(os.path.join(eval_dir, runner.REPORT_FILE), 'r') as f:
            report = json.load(f)
        self.assertTrue(0.0 <= report['accuracy'] <= 1.0)
        self.assertTrue('baseline_untrained_accuracy' in report)
        self.assertEqual(2, report['n_bank'])
        for row in report['confusion_percent']:
            self.assertTrue(abs(sum(row) - 100.0) < 1e-9 or sum(row) == 0.0)
        sweep = pd.read_csv(os.path.join(eval_dir, runner.SWEEP_FILE))
        self.assertEqual([1, 2], list(sweep['n_neighbors']))
        for name in (runner.BANK_FILE, runner.TEST_FEATURES_FILE):
            self.assertTrue(os.path.isfile(os.path.join(eval_dir, name)))

        diag_dir = self._dir('diagnose')
        diagnoser = runner.DiagnoseRunner(outdir=diag_dir, config=config,
                                          metrics=os.path.join(train_dir, runner.METRICS_FILE))
        self.assertEqual(0, diagnoser.run())
        with open(os.path.join(diag_dir, runner.DIAGNOSIS_FILE), 'r') as f:
            diagnosis = json.load(f)
        self.assertTrue(diagnosis['verdict'] in ('none', 'over_uniformity', 'over_alignment'))
        self.assertEqual(3, diagnosis['epochs'])

        tfm_path = read_manifest(manifest)['path'].iloc[0]
        attn_dir = self._dir('attention')
        attention = runner.AttentionRunner(outdir=attn_dir, config=config,
                                           checkpoint=checkpoint, tfm=tfm_path, keep_mass=0.5)
        self.assertEqual(0, attention.run())
        maps = read_attention_maps(os.path.join(attn_dir, runner.ATTENTION_FILE))
        self.assertEqual((2, 4), maps.cam.shape)
        for name in (runner.CAM_IMAGE, runner.TAM_IMAGE, runner.ATTENTION_JSON_FILE):
            self.assertTrue(os.path.isfile(os.path.join(attn_dir, name)))

    def test_diagnose_ablations(self):
        config = tiny_config(epochs=2)
        manifest = self._synth_and_preprocess(config, n_per_class=3)
        outdir = self._dir('diagnose')
        myobj = runner.DiagnoseRunner(outdir=outdir, config=config, manifest=manifest,
                                      run_ablations=True)
        self.assertEqual(0, myobj.run())
        table = pd.read_csv(os.path.join(outdir, runner.ABLATION_FILE))
        self.assertEqual(['both', 'only_centering', 'only_sharpening', 'neither'],
                         list(table['design']))

    def test_sweep(self):
        config = tiny_config(epochs=1)
        manifest = self._synth_and_preprocess(config, n_per_class=3)
        outdir = self._dir('sweep')
        myobj = runner.SweepRunner(outdir=outdir, config=config, manifest=manifest,
                                   grid={'teacher_temp': ['0.04', '0.05'],
                                         'scale_split': ['2.0']})
        self.assertEqual(1, myobj.run())
        myobj = runner.SweepRunner(outdir=outdir, config=config, manifest=manifest, force=True,
                                   grid={'teacher_temp': ['0.04', '0.05']})
        self.assertEqual(0, myobj.run())
        table = pd.read_csv(os.path.join(outdir, runner.SWEEP_FILE))
        self.assertEqual(2, len(table))
        self.assertTrue(os.path.isfile(os.path.join(outdir, 'point_001', runner.METRICS_FILE)))
