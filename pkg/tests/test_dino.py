#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""Tests for `vibration_dino.dino` module."""

import math
import os
import shutil
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
import torch

from vibration_dino import dino
from vibration_dino import tensor as T
from vibration_dino.config import DinoConfig
from vibration_dino.config import ProjectorConfig
from vibration_dino.config import RunConfig
from vibration_dino.config import TFMConfig
from vibration_dino.config import ViTConfig
from vibration_dino.exceptions import ConfigurationError
from vibration_dino.exceptions import ContractError
from vibration_dino.exceptions import DomainError
from vibration_dino.exceptions import EmptyInputError
from vibration_dino.exceptions import ParseError
from vibration_dino.exceptions import ShapeError
from vibration_dino.exceptions import TrainingDivergedError
from vibration_dino.tfm import TimeFrequencyMap


def tiny_config(seed=0, epochs=2):
    return RunConfig(tfm=TFMConfig(image_size=8, n_scales=8),
                     vit=ViTConfig(patch_size=4, embed_dim=8, n_heads=2, head_dim=4,
                                   mlp_dim=16, depth=1),
                     projector=ProjectorConfig(head_dims=(16, 8), out_dim=10),
                     dino=DinoConfig(n_local_crops=1, batch_size=4, epochs=epochs,
                                     warmup_epochs=1, lr_start=1e-4, lr_peak=1e-3),
                     seed=seed)


def tiny_maps(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return [TimeFrequencyMap(pixels=rng.uniform(size=(8, 8, 3)), source_id=str(i))
            for i in range(n)]


def _probs(values):
    return torch.tensor([values], dtype=torch.float64)


class TestDino(unittest.TestCase):
    """Tests for `vibration_dino.dino` module."""

    def setUp(self):
        """Set up test fixtures, if any."""
        self._temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Tear down test fixtures, if any."""
        shutil.rmtree(self._temp_dir)

    def test_tempered_softmax(self):
        uniform = dino.tempered_softmax(torch.zeros(1, 4, dtype=torch.float64), 0.1)
        np.testing.assert_allclose([[0.25] * 4], uniform.numpy(), atol=1e-12)
        q = torch.tensor([[0.5, -0.2, 0.1]], dtype=torch.float64)
        sharp = dino.entropy(dino.tempered_softmax(q, 0.04))
        soft = dino.entropy(dino.tempered_softmax(q, 0.1))
        self.assertLess(float(sharp), float(soft))
        for tau in (0.0, -1.0):
            with self.assertRaises(DomainError):
                dino.tempered_softmax(q, tau)

    def test_tempered_softmax_sharp_pair(self):
        p = dino.tempered_softmax(torch.tensor([1.0, 0.0], dtype=torch.float64), 0.04)
        e = np.exp(np.float64(-25.0))
        np.testing.assert_allclose([1.0 / (1.0 + e), e / (1.0 + e)], p.numpy(),
                                   rtol=1e-12, atol=0.0)

    def test_tempered_softmax_hot_is_near_uniform(self):
        rng = np.random.default_rng(5)
        q = torch.as_tensor(rng.uniform(-1.0, 1.0, size=(4, 16)))
        p = dino.tempered_softmax(q, 100.0)
        self.assertLess(float(torch.max(torch.abs(p - 1.0 / 16))), 2e-3)

    def test_tempered_softmax_matches_scaled_softmax(self):
        rng = np.random.default_rng(6)
        for tau in (0.04, 0.1, 1.0, 3.0):
            q = torch.as_tensor(rng.normal(size=(3, 7)))
            np.testing.assert_allclose(torch.softmax(q / tau, dim=-1).numpy(),
                                       dino.tempered_softmax(q, tau).numpy(),
                                       rtol=1e-10, atol=1e-14)

    def test_centering_endpoints(self):
        q = torch.tensor([[1.0, 3.0], [3.0, 5.0]], dtype=torch.float64)
        center = torch.tensor([0.5, 0.5], dtype=torch.float64)
        centered, new_center = dino.center_apply_and_update(q, center, 1.0)
        self.assertTrue(torch.equal(center, new_center))
        self.assertTrue(torch.equal(q - center, centered))
        _, new_center = dino.center_apply_and_update(q, center, 0.0)
        self.assertEqual([2.0, 4.0], new_center.tolist())
        _, frozen = dino.center_apply_and_update(q, center, 0.0, freeze=True)
        self.assertTrue(torch.equal(center, frozen))

    def test_centering_recurrence(self):
        rng = np.random.default_rng(0)
        batches = [torch.as_tensor(rng.normal(size=(4, 3))) for _ in range(3)]
        center = torch.zeros(3, dtype=torch.float64)
        for b in batches:
            _, center = dino.center_apply_and_update(b, center, 0.9)
        means = [b.mean(dim=0) for b in batches]
        expected = 0.9 ** 2 * 0.1 * means[0] + 0.9 * 0.1 * means[1] + 0.1 * means[2]
        self.assertTrue(torch.allclose(expected, center, atol=1e-12))

    def test_centering_over_views(self):
        a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        b = torch.tensor([[3.0, 2.0]], dtype=torch.float64)
        centered, new_center = dino.center_apply_and_update([a, b], torch.zeros(2), 0.0)
        self.assertEqual(2, len(centered))
        self.assertEqual([2.0, 1.0], new_center.tolist())

    def test_centering_empty_batch(self):
        with self.assertRaises(ContractError):
            dino.center_apply_and_update(torch.zeros(0, 3), torch.zeros(3), 0.9)
        with self.assertRaises(ContractError):
            dino.center_apply_and_update([], torch.zeros(3), 0.9)

    def test_dino_loss_hand_computed(self):
        teacher = [_probs([0.9, 0.1]), _probs([0.5, 0.5])]
        student = [_probs([0.6, 0.4]), _probs([0.3, 0.7]),
                   _probs([0.8, 0.2]), _probs([0.5, 0.5])]
        loss = dino.dino_loss(student, teacher)
        self.assertAlmostEqual(0.7495266, float(loss), places=5)

    def test_dino_loss_from_logits_matches_probabilities(self):
        gen = torch.Generator().manual_seed(1)
        logits = [torch.randn(3, 5, generator=gen, dtype=torch.float64) for _ in range(4)]
        teacher = [dino.tempered_softmax(torch.randn(3, 5, generator=gen, dtype=torch.float64),
                                         0.04) for _ in range(2)]
        student = [dino.tempered_softmax(q, 0.1) for q in logits]
        self.assertAlmostEqual(float(dino.dino_loss(student, teacher)),
                               float(dino.dino_loss_from_logits(logits, teacher, 0.1)),
                               places=10)

    def test_dino_loss_rejects_bad_distributions(self):
        good = [_probs([0.5, 0.5])]
        with self.assertRaises(ContractError):
            dino.dino_loss([_probs([0.5, 0.6]), _probs([0.5, 0.5])], good)
        with self.assertRaises(ContractError):
            dino.dino_loss([_probs([1.5, -0.5]), _probs([0.5, 0.5])], good)

    def test_dino_loss_gradient_skips_teacher(self):
        teacher_logits = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
        student_logits = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
        teacher = [dino.tempered_softmax(teacher_logits, 0.04)] * 2
        student = [dino.tempered_softmax(student_logits, 0.1)] * 3
        T.backward(dino.dino_loss(student, teacher))
        self.assertIsNone(teacher_logits.grad)
        self.assertIsNotNone(student_logits.grad)

    def test_diagnostics_identity(self):
        rng = np.random.default_rng(2)
        for k in (2, 16, 64):
            teacher = [torch.as_tensor(rng.dirichlet(np.ones(k), size=1000)) for _ in range(2)]
            student = [torch.as_tensor(rng.dirichlet(np.ones(k), size=1000)) for _ in range(3)]
            res = dino.diagnostics(student, teacher)
            self.assertLess(abs(res['target_entropy'] - res['kl'] - res['entropy']), 1e-9)
            self.assertGreaterEqual(res['kl'], 0.0)
            self.assertAlmostEqual(res['target_entropy'],
                                   float(dino.dino_loss(student, teacher)), places=9)

    def test_entropy_bounds(self):
        self.assertAlmostEqual(math.log(8), float(dino.entropy(torch.full((8,), 1.0 / 8))),
                               places=6)
        self.assertEqual(0.0, float(dino.entropy(torch.tensor([0.0, 1.0, 0.0]))))
        rng = np.random.default_rng(3)
        h = dino.entropy(torch.as_tensor(rng.dirichlet(np.ones(5), size=200)))
        self.assertTrue(bool(torch.all(h >= 0)))
        self.assertTrue(bool(torch.all(h <= math.log(5) + 1e-12)))
        spiked = torch.tensor([[0.0, 0.0, 1.0, 0.0]], dtype=torch.float64)
        self.assertLess(float(dino.entropy(dino.tempered_softmax(spiked, 0.001))), 1e-3)
        uniform = dino.tempered_softmax(torch.zeros(1, 64, dtype=torch.float64), 0.04)
        self.assertLess(abs(float(dino.entropy(uniform)) - math.log(64)), 1e-9)

    def test_ema_update_teacher(self):
        config = tiny_config()
        state = dino.init_state(config)
        before = [p.detach().clone() for p in state.teacher.parameters()]
        dino.ema_update_teacher(state.teacher, state.student, 1.0)
        for b, p in zip(before, state.teacher.parameters()):
            self.assertTrue(torch.equal(b, p))
        dino.ema_update_teacher(state.teacher, state.student, 0.5)
        for b, p, s in zip(before, state.teacher.parameters(), state.student.parameters()):
            self.assertTrue(torch.allclose(0.5 * b + 0.5 * s.detach(), p, atol=1e-6))
        dino.ema_update_teacher(state.teacher, state.student, 0.0)
        for p, s in zip(state.teacher.parameters(), state.student.parameters()):
            self.assertTrue(torch.equal(s.detach(), p))
        for m in (-0.1, 1.1):
            with self.assertRaises(DomainError):
                dino.ema_update_teacher(state.teacher, state.student, m)

    def test_ema_update_scalar_example(self):
        teacher = torch.nn.Linear(1, 1, bias=False, dtype=torch.float64)
        student = torch.nn.Linear(1, 1, bias=False, dtype=torch.float64)
        with torch.no_grad():
            teacher.weight.fill_(1.0)
            student.weight.fill_(0.0)
        dino.ema_update_teacher(teacher, student, 0.996)
        self.assertAlmostEqual(0.996, float(teacher.weight), places=12)
        self.assertEqual(0.0, float(student.weight))

    def test_ema_update_is_convex_combination(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            m = float(rng.uniform(0.0, 1.0))
            teacher = torch.nn.Linear(4, 3, dtype=torch.float64)
            student = torch.nn.Linear(4, 3, dtype=torch.float64)
            with torch.no_grad():
                for p in list(teacher.parameters()) + list(student.parameters()):
                    p.copy_(torch.as_tensor(rng.normal(size=tuple(p.shape))))
            before = [p.detach().clone() for p in teacher.parameters()]
            dino.ema_update_teacher(teacher, student, m)
            for b, p, s in zip(before, teacher.parameters(), student.parameters()):
                s = s.detach()
                self.assertTrue(torch.allclose(m * b + (1.0 - m) * s, p, rtol=0.0, atol=1e-12))
                self.assertTrue(bool(torch.all(p >= torch.minimum(b, s) - 1e-12)))
                self.assertTrue(bool(torch.all(p <= torch.maximum(b, s) + 1e-12)))

    def test_init_state(self):
        config = tiny_config()
        state = dino.init_state(config)
        self.assertTrue(all(not p.requires_grad for p in state.teacher.parameters()))
        self.assertEqual([0.0] * 10, state.center.tolist())
        differs = any(not torch.equal(a, b) for a, b in zip(state.student.parameters(),
                                                             state.teacher.parameters()))
        self.assertTrue(differs)
        config.dino.identical_init = True
        same = dino.init_state(config)
        for a, b in zip(same.student.parameters(), same.teacher.parameters()):
            self.assertTrue(torch.equal(a, b))

    def test_lr_schedule(self):
        config = DinoConfig(epochs=10, warmup_epochs=3, lr_start=1e-6, lr_peak=1e-3,
                            lr_floor=1e-5)
        lr = dino.lr_schedule(config)
        self.assertEqual(10, lr.size)
        self.assertAlmostEqual(1e-6, lr[0])
        self.assertAlmostEqual(1e-3, lr[3])
        self.assertTrue(np.all(np.diff(lr[:4]) > 0))
        self.assertTrue(np.all(np.diff(lr[3:]) < 0))
        self.assertTrue(lr[-1] >= 1e-5)

    def test_momentum_schedule(self):
        m = dino.momentum_schedule(DinoConfig(epochs=4, momentum_start=0.996), 5)
        self.assertEqual(20, m.size)
        self.assertAlmostEqual(0.996, m[0])
        self.assertTrue(np.all(np.diff(m) >= 0))
        self.assertTrue(np.all(m <= 1.0))

    def test_apply_ablation(self):
        config = RunConfig()
        res = dino.apply_ablation(config, dino.ONLY_CENTERING)
        self.assertEqual(res.dino.student_temp, res.dino.teacher_temp)
        self.assertFalse(res.dino.freeze_center)
        res = dino.apply_ablation(config, dino.ONLY_SHARPENING)
        self.assertTrue(res.dino.freeze_center)
        self.assertEqual(0.04, res.dino.teacher_temp)
        res = dino.apply_ablation(config, dino.NEITHER)
        self.assertTrue(res.dino.freeze_center)
        self.assertEqual(res.dino.student_temp, res.dino.teacher_temp)
        res = dino.apply_ablation(config, dino.BOTH)
        self.assertFalse(res.dino.freeze_center)
        self.assertEqual(0.04, config.dino.teacher_temp)
        with self.assertRaises(ConfigurationError):
            dino.apply_ablation(config, 'no_teacher')

    def test_collapse_classify(self):
        log_k = math.log(64)

        def trace(kl, h):
            return [{'kl': kl, 'entropy': h}] * 5

        self.assertEqual(dino.CollapseVerdict.NONE,
                         dino.collapse_classify(trace(0.5, 0.5 * log_k), 64))
        self.assertEqual(dino.CollapseVerdict.OVER_UNIFORMITY,
                         dino.collapse_classify(trace(0.001, 0.95 * log_k), 64))
        self.assertEqual(dino.CollapseVerdict.OVER_ALIGNMENT,
                         dino.collapse_classify(trace(0.001, 0.05 * log_k), 64))
        with self.assertLogs('vibration_dino.dino', level='WARNING'):
            res = dino.collapse_classify(trace(0.001, 0.6 * log_k), 64)
        self.assertEqual(dino.CollapseVerdict.OVER_UNIFORMITY, res)
        with self.assertRaises(ContractError):
            dino.collapse_classify(trace(0.001, 0.0)[:4], 64)

    def test_collapse_classify_uses_trailing_window(self):
        rows = [{'kl': 1.0, 'entropy': 1.0}] * 10 + [{'kl': 0.0, 'entropy': 0.0}] * 5
        self.assertEqual(dino.CollapseVerdict.OVER_ALIGNMENT, dino.collapse_classify(rows, 16))

    def test_metrics_write_read(self):
        path = os.path.join(self._temp_dir, 'metrics.jsonl')
        row = {k: 1.0 for k in dino.METRIC_FIELDS}
        dino.append_metrics(path, row)
        dino.append_metrics(path, row)
        df = dino.read_metrics(path)
        self.assertEqual(2, len(df))
        self.assertEqual(dino.METRIC_FIELDS, list(df.columns))

    def test_read_metrics_errors(self):
        path = os.path.join(self._temp_dir, 'metrics.jsonl')
        with open(path, 'w') as f:
            f.write('{"kl": 0.1, "entropy": 1.0}\n{"kl": 0.1,\n')
        try:
            dino.read_metrics(path)
            self.fail('Expected exception')
        except ParseError as pe:
            self.assertEqual(2, pe.line)
        with open(path, 'w') as f:
            f.write('{"kl": 0.1}\n')
        with self.assertRaises(ParseError):
            dino.read_metrics(path)

    def test_trainer_empty_input(self):
        with self.assertRaises(EmptyInputError):
            dino.DinoTrainer([], tiny_config())

    def test_train_one_epoch(self):
        path = os.path.join(self._temp_dir, 'metrics.jsonl')
        state, log = dino.train(tiny_maps(), tiny_config(epochs=1), metrics_path=path)
        self.assertEqual(1, len(log))
        self.assertEqual(1, state.epoch)
        self.assertEqual(2, state.step)
        for key in dino.METRIC_FIELDS:
            self.assertTrue(key in log[0])
        self.assertTrue(math.isfinite(log[0]['loss']))
        self.assertAlmostEqual(1e-4, log[0]['lr'])
        self.assertEqual(1, len(dino.read_metrics(path)))

    def test_train_step_changes_student_only_through_optimizer(self):
        config = tiny_config()
        trainer = dino.DinoTrainer(tiny_maps(4), config)
        before = [p.detach().clone() for p in trainer.state.student.parameters()]
        views = trainer._dataset[0].unsqueeze(0)
        stats = trainer.train_step(views, 1e-3, 0.996)
        self.assertTrue(math.isfinite(stats['loss']))
        changed = any(not torch.equal(b, p) for b, p in zip(before,
                                                            trainer.state.student.parameters()))
        self.assertTrue(changed)
        for p in trainer.state.teacher.parameters():
            self.assertIsNone(p.grad)
        self.assertEqual(1, trainer.state.step)

    def test_train_deterministic(self):
        a, log_a = dino.train(tiny_maps(), tiny_config(seed=3))
        b, log_b = dino.train(tiny_maps(), tiny_config(seed=3))
        self.assertEqual(log_a, log_b)
        ta = a.named_tensors()
        tb = b.named_tensors()
        self.assertEqual(list(ta.keys()), list(tb.keys()))
        for key in ta:
            self.assertTrue(torch.equal(ta[key], tb[key]), key)

    def test_resume_matches_uninterrupted(self):
        config = tiny_config(seed=4)
        full, _ = dino.train(tiny_maps(), config)

        trainer = dino.DinoTrainer(tiny_maps(), config)
        trainer.train(epochs=1)
        path = os.path.join(self._temp_dir, 'epoch_0001.ckpt')
        trainer.state.save(path)
        resumed = dino.init_state(config)
        resumed.load_tensors(T.load_checkpoint(path))
        self.assertEqual(1, resumed.epoch)
        state, log = dino.train(tiny_maps(), config, state=resumed)
        self.assertEqual(1, len(log))
        self.assertEqual(2, state.epoch)
        for a, b in zip(full.student.parameters(), state.student.parameters()):
            self.assertTrue(torch.equal(a, b))
        self.assertTrue(torch.equal(full.center, state.center))

    def test_train_epoch_past_configured_epochs(self):
        trainer = dino.DinoTrainer(tiny_maps(4), tiny_config(epochs=1))
        trainer.train()
        with self.assertRaises(ContractError):
            trainer.train_epoch()

    def test_divergence_writes_snapshot(self):
        trainer = dino.DinoTrainer(tiny_maps(4), tiny_config(), snapshot_dir=self._temp_dir)
        nan = torch.tensor(float('nan'))
        with patch('vibration_dino.dino.dino_loss_from_logits', return_value=nan):
            try:
                trainer.train_epoch()
                self.fail('Expected exception')
            except TrainingDivergedError as te:
                self.assertEqual(os.path.join(self._temp_dir, 'diverged_epoch_0.ckpt'),
                                 te.snapshot)
                self.assertTrue(os.path.isfile(te.snapshot))
                self.assertIn('loss contains non finite values', str(te))

    def test_load_network_shape_mismatch(self):
        state = dino.init_state(tiny_config())
        tensors = state.named_tensors()
        tensors['student.head.weight'] = torch.zeros(3, 3)
        try:
            dino.load_network(state.student, tensors, 'student.')
            self.fail('Expected exception')
        except ShapeError as se:
            self.assertTrue('student.head.weight' in str(se))
            self.assertTrue('(3, 3)' in str(se))
            self.assertTrue('(10, 8)' in str(se))
