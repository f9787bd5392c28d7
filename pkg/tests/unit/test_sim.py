#!/usr/bin/env python3
"""
Testes unitários para o simulador colaborativo e os datasets sintéticos
"""

import unittest

import numpy as np

from dgpsim.attack import bias_attack
from dgpsim.config import RunConfig
from dgpsim.defense import DgpConfig, dgp_prune, floor_count
from dgpsim.exceptions import ConfigError, DivergenceError, InapplicableAttackError
from dgpsim.model import loss_and_grad
from dgpsim.numerics import Rng
from dgpsim.sim import CollaborativeSimulator, RunRecord, make_dataset, replay, snapshot_gradients, train

TRAINING_FIELDS = ('round', 'lr', 'train_loss', 'grad_sq_mean', 'grad_sq_max', 'error_sq', 'error_sq_users',
                   'gamma_max', 'full_grad_sq', 'test_accuracy')


def small_config(**changes):
    base = dict(dataset='glyphs', users=3, rounds=10, batch_size=8, n_train=240, n_test=80, hidden=(16,),
                eval_every=5, log_every=0, seed=3)
    base.update(changes)
    return RunConfig(**base)


class TestDatasets(unittest.TestCase):
    """Testes para os datasets sintéticos"""

    def test_deterministic(self):
        a, _ = make_dataset('glyphs', Rng(1), 40, 8)
        b, _ = make_dataset('glyphs', Rng(1), 40, 8)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_glyphs_balanced_and_bounded(self):
        train_set, test_set = make_dataset('glyphs', Rng(2), 200, 40)
        self.assertEqual(train_set.inputs.shape, (200, 64))
        self.assertEqual(np.bincount(train_set.labels).tolist(), [50, 50, 50, 50])
        self.assertEqual(np.bincount(test_set.labels).tolist(), [10, 10, 10, 10])
        self.assertGreaterEqual(train_set.inputs.min(), 0.0)
        self.assertLessEqual(train_set.inputs.max(), 1.0)

    def test_blobs(self):
        train_set, _ = make_dataset('blobs', Rng(3), 100, 20)
        self.assertEqual(train_set.inputs.shape, (100, 16))
        self.assertEqual(np.bincount(train_set.labels).tolist(), [25, 25, 25, 25])

    def test_unknown_dataset(self):
        with self.assertRaises(ConfigError):
            make_dataset('cifar', Rng(1))


class TestSimulator(unittest.TestCase):
    """Testes para o laço de treinamento"""

    def test_single_user_matches_plain_sgd(self):
        """N = 1 sem defesa reproduz o SGD manual"""
        cfg = small_config(users=1, rounds=15, defense='none')
        simulator = CollaborativeSimulator(cfg)
        params = simulator.model.params()
        batch_rng = Rng.stream(cfg.seed, 'batch', 0)
        for _ in range(cfg.rounds):
            chosen = batch_rng.generator.choice(simulator.shards[0], cfg.batch_size, replace=False)
            _, grads = loss_and_grad(simulator.model.with_params(params), simulator.train_set.subset(chosen))
            params = params - grads.scale(cfg.lr)
        simulator.run()
        np.testing.assert_allclose(simulator.model.params().flatten(), params.flatten(), atol=1e-12)

    def test_zero_pruning_matches_no_defense(self):
        """dgp(0, 0) com realimentação equivale a nenhuma defesa"""
        plain = CollaborativeSimulator(small_config(defense='none'))
        pruned = CollaborativeSimulator(small_config(defense='dgp:0.0,0.0'))
        plain.run()
        pruned.run()
        self.assertTrue(plain.model.params().equals(pruned.model.params()))
        for a, b in zip(plain.records, pruned.records):
            for key in TRAINING_FIELDS:
                self.assertEqual(getattr(a, key), getattr(b, key), key)

    def test_records_and_ledger(self):
        records = list(train(small_config(defense='dgp:0.05,0.75')))
        self.assertEqual([r.round for r in records], list(range(10)))
        self.assertIsNotNone(records[4].test_accuracy)
        self.assertIsNone(records[3].test_accuracy)
        self.assertIsNotNone(records[-1].test_accuracy)
        self.assertGreater(records[0].error_sq_users, 0.0)
        self.assertTrue(all(0.0 < r.gamma_max < 1.0 for r in records))

    def test_no_error_feedback_keeps_zero_residual(self):
        simulator = CollaborativeSimulator(small_config(defense='dgp:0.05,0.75', error_feedback=False))
        simulator.run()
        self.assertTrue(all(r.error_sq_users == 0.0 for r in simulator.records))

    def test_dummy_iterate_identity(self):
        """W - V = lr * média dos resíduos"""
        simulator = CollaborativeSimulator(small_config(defense='dgp:0.05,0.75', track_dummy=True, rounds=20))
        simulator.run()
        self.assertTrue(all(r.dummy_gap <= 1e-9 for r in simulator.records))

    def test_adgp_download_bytes(self):
        simulator = CollaborativeSimulator(small_config(defense='adgp:0.05,0.75,0.2', rounds=2))
        simulator.run()
        params = simulator.model.params()
        popcount = sum(floor_count(0.4, t.size) for _, t in params.items())
        bitmask = sum((t.size + 7) // 8 for _, t in params.items())
        self.assertEqual(simulator.records[0].download_bytes, 3 * (4 * popcount + bitmask))

    def test_rounds_exhausted(self):
        simulator = CollaborativeSimulator(small_config(rounds=1))
        simulator.run()
        with self.assertRaises(ConfigError):
            simulator.run_round()

    def test_divergence(self):
        simulator = CollaborativeSimulator(small_config(lr=1e300, rounds=5))
        with self.assertRaises(DivergenceError):
            simulator.run()
        self.assertTrue(simulator.records[-1].diverged)
        self.assertIsNone(simulator.records[-1].to_dict()['grad_sq_mean'])

    def test_imprint_module_stays_frozen(self):
        simulator = CollaborativeSimulator(small_config(imprint_bins=4))
        initial = simulator.model
        self.assertEqual(initial.layer_count, 3)
        simulator.run()
        np.testing.assert_array_equal(simulator.model.weights[0], initial.weights[0])
        np.testing.assert_array_equal(simulator.model.biases[0], initial.biases[0])

    def test_status(self):
        simulator = CollaborativeSimulator(small_config(rounds=2))
        simulator.run()
        status = simulator.get_status()
        self.assertEqual(status['round'], 2)
        self.assertEqual(status['upload_total'], simulator.ledger.total_upload)


class TestSnapshots(unittest.TestCase):
    """Testes para a reconstrução determinística das mensagens"""

    def test_replay_is_deterministic(self):
        cfg = small_config(defense='dgp:0.05,0.75')
        first, batch_a = snapshot_gradients(cfg, 3, 1)
        second, batch_b = snapshot_gradients(cfg, 3, 1)
        self.assertTrue(first.grads.equals(second.grads))
        np.testing.assert_array_equal(batch_a.inputs, batch_b.inputs)

    def test_undefended_snapshot_is_exact_gradient(self):
        obs, batch = snapshot_gradients(small_config(), 2, 0)
        _, grads = loss_and_grad(obs.model, batch)
        np.testing.assert_array_equal(obs.grads.flatten(), grads.flatten())
        self.assertEqual(obs.observed_fraction(), 1.0)

    def test_dgp_snapshot_counts(self):
        """Contagens por tensor seguem as regras de arredondamento"""
        cfg = small_config(dataset='blobs', batch_size=32, n_train=400, defense='dgp:0.05,0.75')
        obs, _ = snapshot_gradients(cfg, 0, 0)
        for key, mask in obs.mask.items():
            n = mask.size
            self.assertEqual(int(mask.sum()), n - floor_count(0.05, n) - floor_count(0.75, n), key)

    def test_capture_is_sent_message(self):
        """A captura é a mensagem efetivamente enviada, com o lote inteiro"""
        cfg = small_config(defense='dgp:0.05,0.75')
        capture = replay(cfg, {(0, 2)})[(0, 2)]
        self.assertEqual(capture.batch.size, cfg.batch_size)
        self.assertEqual(capture.observation().batch_size, cfg.batch_size)
        # rodada 0: residuo nulo, a mensagem e a poda do gradiente do lote
        expected = dgp_prune(capture.grads, DgpConfig(0.05, 0.75))
        np.testing.assert_array_equal(capture.wire.densify().flatten(), expected.densify().flatten())
        with self.assertRaises(InapplicableAttackError):
            bias_attack(capture.observation(), capture.batch)

    def test_server_update_is_mean_of_messages(self):
        """W_{t+1} = W_t - lr * média das mensagens densificadas (N = 3, defesas esparsas)"""
        for defense in ('dgp:0.05,0.75', 'topk:0.2', 'adgp:0.05,0.75,0.2'):
            cfg = small_config(defense=defense)
            simulator = CollaborativeSimulator(cfg, {(2, user) for user in range(cfg.users)})
            for _ in simulator.iter_rounds(3):
                pass
            captures = [simulator.captures[(2, user)] for user in range(cfg.users)]
            before = captures[0].model.params().flatten()
            mean = sum(c.wire.densify().flatten() for c in captures) / cfg.users
            np.testing.assert_allclose(simulator.model.params().flatten(), before - cfg.lr_at(2) * mean,
                                       rtol=0, atol=1e-12, err_msg=defense)
            self.assertLess(captures[0].wire.nnz, before.size)

    def test_out_of_range(self):
        with self.assertRaises(ConfigError):
            replay(small_config(), {(10, 0)})
        with self.assertRaises(ConfigError):
            replay(small_config(), {(0, 3)})

    def test_record_serialization(self):
        record = RunRecord(0, 0.1, float('nan'), 1.0, 1.0, 0.0, 0.0, 0.0, 10, 20, True)
        data = record.to_dict()
        self.assertIsNone(data['train_loss'])
        self.assertEqual(data['kind'], 'round')


if __name__ == '__main__':
    unittest.main()
