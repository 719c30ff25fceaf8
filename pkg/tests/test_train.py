#!/usr/bin/env python3

import json
import math
import os
import sys
import tempfile
import unittest
from unittest import mock

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))
from testcommon import synthetic_backend, write_jsonl  # NOQA: E402

from echovec import train  # NOQA: E402
from echovec.backend import Item, embed_items  # NOQA: E402
from echovec.exception import (DegenerateVector, DimMismatch, InvalidConfig,  # NOQA: E402
                               InvalidInput, TrainingDiverged)
from echovec.prompt import PromptVariant, load_exemplars  # NOQA: E402
from echovec.retrieval import RetrievalCorpus, modality_gap, recall_at_k  # NOQA: E402
from echovec.store import EmbeddingStore  # NOQA: E402
from echovec.train import (AdapterParams, TrainConfig, TrainReport, Triplet,  # NOQA: E402
                           apply_adapter, info_nce_grad, info_nce_loss,
                           info_nce_loss_and_grad, load_triplets)
from echovec.vectors import EmbeddingVector, Modality  # NOQA: E402


def _random_rotation(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _numeric_grad(x_h, x_p, x_q, params, tau, exclude_self, step=1e-5):
    grad_W = np.zeros_like(params.W)
    grad_b = np.zeros_like(params.b)

    def _loss(W, b):
        p = AdapterParams(W, b)
        return info_nce_loss(train.apply_adapter_matrix(x_h, p), train.apply_adapter_matrix(x_p, p),
                             train.apply_adapter_matrix(x_q, p), tau, exclude_self)

    for i in range(params.W.shape[0]):
        for j in range(params.W.shape[1]):
            up, down = params.W.copy(), params.W.copy()
            up[i, j] += step
            down[i, j] -= step
            grad_W[i, j] = (_loss(up, params.b) - _loss(down, params.b)) / (2 * step)
    for i in range(params.b.shape[0]):
        up, down = params.b.copy(), params.b.copy()
        up[i] += step
        down[i] -= step
        grad_b[i] = (_loss(params.W, up) - _loss(params.W, down)) / (2 * step)
    return grad_W, grad_b


class InfoNceLossTest(unittest.TestCase):
    '''echovec/train.py loss'''

    def test_closed_form_opposite_negative(self):
        loss = info_nce_loss([[1.0, 0.0]], [[2.0, 0.0]], [[-1.0, 0.0]], tau=1.0)
        self.assertAlmostEqual(loss, math.log(1 + math.exp(-2)), delta=1e-9)
        self.assertAlmostEqual(loss, 0.12692801, delta=1e-8)

    def test_closed_form_equal_positive_and_negative(self):
        for tau in (0.05, 0.1, 1.0):
            loss = info_nce_loss([[1.0, 2.0]], [[0.3, -1.0]], [[0.3, -1.0]], tau)
            self.assertAlmostEqual(loss, math.log(2), delta=1e-9)

    def test_single_triplet_closed_form(self):
        rng = np.random.default_rng(4)
        h, p, q = rng.standard_normal((3, 1, 6))
        tau = 0.2
        cos_p = float(h[0] @ p[0] / np.linalg.norm(h) / np.linalg.norm(p))
        cos_q = float(h[0] @ q[0] / np.linalg.norm(h) / np.linalg.norm(q))
        expected = math.log(1 + math.exp((cos_q - cos_p) / tau))
        self.assertAlmostEqual(info_nce_loss(h, p, q, tau), expected, delta=1e-9)

    def test_positive_on_random_batches(self):
        rng = np.random.default_rng(0)
        for _i in range(20):
            h, p, q = rng.standard_normal((3, 5, 8))
            self.assertGreater(info_nce_loss(h, p, q, 0.05), 0.0)

    def test_invariances(self):
        rng = np.random.default_rng(1)
        h, p, q = rng.standard_normal((3, 6, 8))
        tau = 0.1
        base = info_nce_loss(h, p, q, tau)
        scales = rng.uniform(0.1, 10.0, size=(3, 6, 1))
        self.assertAlmostEqual(info_nce_loss(h * scales[0], p * scales[1], q * scales[2], tau),
                               base, delta=1e-9)
        rot = _random_rotation(rng, 8)
        self.assertAlmostEqual(info_nce_loss(h @ rot.T, p @ rot.T, q @ rot.T, tau), base,
                               delta=1e-9)
        perm = rng.permutation(6)
        self.assertAlmostEqual(info_nce_loss(h[perm], p[perm], q[perm], tau), base,
                               delta=1e-12)

    def test_exclude_self_negative_lowers_loss(self):
        rng = np.random.default_rng(2)
        h, p, q = rng.standard_normal((3, 4, 8))
        self.assertLess(info_nce_loss(h, p, q, 0.1, exclude_self=True),
                        info_nce_loss(h, p, q, 0.1))

    def test_errors(self):
        with self.assertRaises(InvalidConfig):
            info_nce_loss([[1.0]], [[1.0]], [[1.0]], tau=0.0)
        with self.assertRaises(DegenerateVector):
            info_nce_loss([[0.0, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]], tau=1.0)
        with self.assertRaises(DimMismatch):
            info_nce_loss([[1.0, 0.0]], [[1.0, 0.0, 0.0]], [[0.0, 1.0]], tau=1.0)


class InfoNceGradTest(unittest.TestCase):
    '''echovec/train.py analytic gradient'''

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2024)
        cases = [(d, n) for d in (4, 16) for n in (1, 4, 8)]
        for trial in range(50):
            d, n = cases[trial % len(cases)]
            tau = (0.1, 0.5, 1.0)[trial % 3]
            exclude_self = trial % 5 == 0 and n > 1
            x_h, x_p, x_q = rng.standard_normal((3, n, d))
            params = AdapterParams(np.eye(d) + 0.1 * rng.standard_normal((d, d)),
                                   0.1 * rng.standard_normal(d))
            grad_W, grad_b = info_nce_grad(x_h, x_p, x_q, params, tau, exclude_self)
            num_W, num_b = _numeric_grad(x_h, x_p, x_q, params, tau, exclude_self)
            analytic = np.concatenate([grad_W.ravel(), grad_b])
            numeric = np.concatenate([num_W.ravel(), num_b])
            error = np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12)
            self.assertLess(error, 1e-5, msg='trial {} d={} n={}'.format(trial, d, n))

    def test_symmetric_configuration_has_zero_gradient(self):
        rng = np.random.default_rng(3)
        x_h = rng.standard_normal((1, 5))
        same = rng.standard_normal((1, 5))
        params = AdapterParams.identity(5)
        loss, grad_W, grad_b = info_nce_loss_and_grad(x_h, same, same.copy(), params, 0.05)
        self.assertAlmostEqual(loss, math.log(2), delta=1e-12)
        self.assertLess(np.max(np.abs(grad_W)), 1e-9)
        self.assertLess(np.max(np.abs(grad_b)), 1e-9)

    def test_loss_matches_loss_function(self):
        rng = np.random.default_rng(5)
        x_h, x_p, x_q = rng.standard_normal((3, 4, 6))
        params = AdapterParams.initial(6, 1)
        loss, _gw, _gb = info_nce_loss_and_grad(x_h, x_p, x_q, params, 0.05)
        adapted = [train.apply_adapter_matrix(x, params) for x in (x_h, x_p, x_q)]
        self.assertAlmostEqual(loss, info_nce_loss(*adapted, 0.05), delta=1e-12)


class AdapterTest(unittest.TestCase):
    '''echovec/train.py adapter parameters'''

    def test_apply_adapter(self):
        e = EmbeddingVector([1.0, -1.0], Modality.AUDIO, 'x')
        np.testing.assert_array_equal(apply_adapter(e, AdapterParams.identity(2)).values,
                                      [1.0, -1.0])
        self.assertIs(apply_adapter(e, AdapterParams.identity(2)).modality, Modality.AUDIO)
        np.testing.assert_array_equal(
            apply_adapter(e, AdapterParams(2 * np.eye(2), np.zeros(2))).values, [2.0, -2.0])
        np.testing.assert_array_equal(
            apply_adapter(e, AdapterParams(np.zeros((2, 2)), [3.0, 4.0])).values, [3.0, 4.0])
        with self.assertRaises(DimMismatch):
            apply_adapter(e, AdapterParams.identity(3))

    def test_initial_is_near_identity_and_seeded(self):
        a = AdapterParams.initial(8, 5)
        np.testing.assert_array_equal(a.W, AdapterParams.initial(8, 5).W)
        self.assertLess(np.max(np.abs(a.W - np.eye(8))), 1e-2)
        self.assertFalse(np.array_equal(a.W, AdapterParams.initial(8, 6).W))
        np.testing.assert_array_equal(a.b, np.zeros(8))

    def test_store_round_trip(self):
        params = AdapterParams.initial(4, 9)
        store = params.to_store()
        self.assertEqual(store.ids, ['W:row:0', 'W:row:1', 'W:row:2', 'W:row:3', 'b'])
        again = AdapterParams.from_store(EmbeddingStore.from_bytes(store.to_bytes()))
        np.testing.assert_array_equal(again.W, params.W.astype(np.float32).astype(np.float64))
        self.assertEqual(again.to_store().to_bytes(), store.to_bytes())
        self.assertEqual(AdapterParams.from_base64(params.to_base64()).to_base64(),
                         params.to_base64())


class TrainingTest(unittest.TestCase):
    '''echovec/train.py training loop'''

    def _triplets(self, n):
        return [Triplet('anchor {}'.format(i), 'positive {}'.format(i),
                        'negative {}'.format(i)) for i in range(n)]

    def test_triplet_validation(self):
        with self.assertRaises(InvalidInput):
            Triplet('a', 'a', 'b')
        with self.assertRaises(InvalidInput):
            Triplet('a', '', 'b')

    def test_zero_learning_rate_keeps_initial_params(self):
        backend = synthetic_backend()
        cfg = TrainConfig(learning_rate=0.0, batch_size=32, epochs=3, seed=4)
        report = train.train(self._triplets(10), backend, cfg)
        initial = AdapterParams.initial(16, 4)
        np.testing.assert_array_equal(report.final_params.W, initial.W)
        np.testing.assert_array_equal(report.final_params.b, initial.b)
        self.assertEqual(report.steps, 3)
        for value in report.loss_curve:
            self.assertAlmostEqual(value, report.loss_curve[0], delta=1e-12)

    def test_step_count(self):
        backend = synthetic_backend()
        report = train.train(self._triplets(32), backend, TrainConfig(batch_size=8, epochs=1))
        self.assertEqual(report.steps, 4)
        self.assertEqual(len(report.loss_curve), 4)
        ragged = train.train(self._triplets(10), backend, TrainConfig(batch_size=4, epochs=2))
        self.assertEqual(ragged.steps, 6)

    def test_loss_descends(self):
        backend = synthetic_backend(dim=32, latent_dim=8, seed=1)
        cfg = TrainConfig(batch_size=20, epochs=5, learning_rate=1e-2, seed=1)
        report = train.train(self._triplets(100), backend, cfg)
        self.assertEqual(report.steps, 25)
        self.assertLess(np.mean(report.loss_curve[-5:]), np.mean(report.loss_curve[:5]))
        self.assertTrue(all(math.isfinite(v) for v in report.loss_curve))

    def test_deterministic(self):
        cfg = TrainConfig(batch_size=5, epochs=2, seed=7)
        a = train.train(self._triplets(12), synthetic_backend(seed=3), cfg)
        b = train.train(self._triplets(12), synthetic_backend(seed=3), cfg)
        self.assertEqual(a.to_json(), b.to_json())

    def test_sgd_and_adam_differ(self):
        triplets = self._triplets(12)
        a = train.train(triplets, synthetic_backend(), TrainConfig(optimizer='sgd'))
        b = train.train(triplets, synthetic_backend(), TrainConfig(optimizer='adam'))
        self.assertFalse(np.array_equal(a.final_params.W, b.final_params.W))

    def test_divergence_reports_step(self):
        with mock.patch('echovec.train.info_nce_loss_and_grad',
                        return_value=(float('nan'), np.zeros((16, 16)), np.zeros(16))):
            with self.assertRaises(TrainingDiverged) as cm:
                train.train(self._triplets(4), synthetic_backend(), TrainConfig())
        self.assertEqual(cm.exception.step, 0)

    def test_empty(self):
        with self.assertRaises(InvalidInput):
            train.train([], synthetic_backend(), TrainConfig())

    def test_config_validation(self):
        with self.assertRaises(InvalidConfig):
            TrainConfig(tau=0.0)
        with self.assertRaises(InvalidConfig):
            TrainConfig(batch_size=0)
        with self.assertRaises(InvalidConfig):
            TrainConfig(optimizer='lbfgs')

    def test_report_json(self):
        report = TrainReport([0.5, 0.25], AdapterParams.identity(2), 2)
        data = json.loads(report.to_json())
        self.assertEqual(data['loss_curve'], [0.5, 0.25])
        self.assertEqual(data['steps'], 2)
        np.testing.assert_array_equal(AdapterParams.from_base64(data['adapter']).W, np.eye(2))

    def test_load_triplets_names_bad_line(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, 't.jsonl')
            rows = [{'anchor': 'a{}'.format(i), 'positive': 'p{}'.format(i),
                     'negative': 'n{}'.format(i)} for i in range(6)]
            write_jsonl(path, rows + ['{"anchor": "x", "positive": "y"'])
            with self.assertRaises(InvalidInput) as cm:
                list(load_triplets(path))
            self.assertIn('line 7', str(cm.exception))
            write_jsonl(path, rows[:2] + [{'anchor': 'x', 'positive': 'y'}])
            with self.assertRaises(InvalidInput) as cm:
                list(load_triplets(path))
            self.assertIn('line 3', str(cm.exception))


class SingleModalityTransferTest(unittest.TestCase):
    '''Text-only training carries over to text-to-audio retrieval'''

    N_ITEMS = 500
    N_TRIPLETS = 400

    def _run(self, seed):
        backend = synthetic_backend(dim=32, latent_dim=8, icl_blend=0.8, noise_scale=0.1,
                                    seed=seed)
        exemplars = load_exemplars({})
        ids = ['item-{:03d}'.format(i) for i in range(self.N_ITEMS)]
        latents = np.vstack([backend.world.latent(i) for i in ids])
        sims = latents @ latents.T
        near, far = sims.copy(), sims.copy()
        np.fill_diagonal(near, -np.inf)
        np.fill_diagonal(far, np.inf)
        rng = np.random.default_rng(seed)
        anchors = rng.choice(self.N_ITEMS, self.N_TRIPLETS, replace=False)
        triplets = [Triplet(ids[a], ids[int(np.argmax(near[a]))], ids[int(np.argmin(far[a]))])
                    for a in anchors]

        variant = PromptVariant.ONE_WORD_WITH_EXEMPLARS
        text = embed_items(backend, [Item(i, Modality.TEXT, i) for i in ids], variant, exemplars)
        audio = embed_items(backend, [Item(i, Modality.AUDIO, i) for i in ids], variant,
                            exemplars)
        relevance = {i: {i} for i in ids}

        def _evaluate(params):
            t = [apply_adapter(v, params) for v in text]
            a = [apply_adapter(v, params) for v in audio]
            report = recall_at_k(EmbeddingStore(32, t), RetrievalCorpus(EmbeddingStore(32, a),
                                                                         relevance), [1])
            return report.recall[1], modality_gap(t, a).gap

        initial = AdapterParams.initial(32, seed)
        cfg = TrainConfig(tau=0.05, batch_size=16, epochs=10, learning_rate=1e-2, seed=seed)
        trained = train.train(triplets, backend, cfg, exemplars, initial_params=initial)
        return _evaluate(initial), _evaluate(trained.final_params)

    def test_text_training_improves_cross_modal_recall(self):
        improved = 0
        for seed in range(10):
            (r1_before, gap_before), (r1_after, gap_after) = self._run(seed)
            if r1_after > r1_before and gap_after <= gap_before:
                improved += 1
        self.assertGreaterEqual(improved, 9)


if __name__ == "__main__":
    unittest.main()
