#!/usr/bin/env python3
"""
Testes unitários para as fórmulas e verificações de garantias formais
"""

import unittest

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dgpsim.defense import DgpConfig
from dgpsim.model import GradientSet, MlpModel
from dgpsim.numerics import Rng
from dgpsim.theory import (BoundReport, assumption1_lower_bound, check_assumption1, check_convergence,
                           check_lemma1, check_prop1, check_theorem1, check_theorem1_companion,
                           corollary2_learning_rate, lemma1_bound, theorem1_epsilon, theorem2_rhs)

EXAMPLE = np.array([0.9, -0.8, 0.7, -0.6, 0.5, -0.4, 0.3, -0.2, 0.1, 0.05])


def round_record(index, gamma=0.4, grad_sq=2.0, error_sq=0.5, **changes):
    record = {'kind': 'round', 'round': index, 'gamma_max': gamma, 'grad_sq_max': grad_sq,
              'error_sq_users': error_sq, 'error_feedback': True, 'diverged': False}
    record.update(changes)
    return record


def trend_records(values):
    return [{'kind': 'round', 'round': t, 'full_grad_sq': float(v), 'diverged': False} for t, v in enumerate(values)]


class TestFormulas(unittest.TestCase):
    """Testes para as expressões fechadas"""

    def test_assumption1_lower_bound(self):
        """k1 k2 = 0.08 dá (1 - sqrt(0.92))^2 ~ 0.00167"""
        value = assumption1_lower_bound(0.1, 0.8)
        self.assertAlmostEqual(value, (1 - np.sqrt(0.92)) ** 2, places=15)
        self.assertAlmostEqual(value, 0.00167, delta=1e-5)

    def test_lemma1_values(self):
        self.assertAlmostEqual(lemma1_bound(0.5, 1.0), 7.5)
        self.assertEqual(lemma1_bound(0.0, 3.0), 0.0)
        with self.assertRaises(ValueError):
            lemma1_bound(1.0, 1.0)

    @given(st.floats(0.0, 0.98), st.floats(0.0, 0.98))
    def test_lemma1_monotone(self, a, b):
        low, high = sorted((a, b))
        self.assertLessEqual(lemma1_bound(low, 1.0), lemma1_bound(high, 1.0))

    def test_theorem1_values(self):
        self.assertAlmostEqual(theorem1_epsilon(0.1, 0.25, 2.0, 'euclidean'), 1.1)
        self.assertAlmostEqual(theorem1_epsilon(0.0, 0.49, metric='cosine'), 0.7)
        self.assertEqual(check_theorem1(0.3, 0.0, 5.0), 0.3)
        with self.assertRaises(ValueError):
            theorem1_epsilon(-0.1, 0.2)
        with self.assertRaises(ValueError):
            theorem1_epsilon(0.1, 0.2, metric='l1')

    def test_theorem2_rhs(self):
        """Exemplo: gap 1, lr 0.01, T 100, K 1, G2 = sigma2 = 1, gamma 0.5"""
        self.assertAlmostEqual(theorem2_rhs(1.0, 0.01, 100, 1.0, 1.0, 1.0, 0.5), 4.043, places=9)

    def test_corollary2_sqrt_form(self):
        with self.assertLogs('dgpsim.theory', level='WARNING'):
            lr = corollary2_learning_rate(1.0, 1.0, 100, 1.0, 1.0)
        self.assertAlmostEqual(lr, np.sqrt(1.0 / 200.0))

    def test_unknown_status(self):
        with self.assertRaises(ValueError):
            BoundReport('x', 'talvez')


class TestPruningChecks(unittest.TestCase):
    """Testes para a faixa da razão de poda e o erro de poda limitado por gamma1"""

    def setUp(self):
        """Configuração inicial dos testes"""
        self.example = GradientSet({'w': EXAMPLE})

    def test_example_ratio_in_band(self):
        report = check_assumption1([self.example], DgpConfig(0.2, 0.4))
        self.assertEqual(report.status, 'pass')
        self.assertAlmostEqual(report.measured, 1.5925 / 2.8525, places=12)
        self.assertAlmostEqual(report.measured, 0.5583, places=4)

    def test_identity_pruning_skipped(self):
        report = check_assumption1([self.example], DgpConfig(0.0, 0.0))
        self.assertEqual(report.status, 'skipped')
        self.assertTrue(report.notes)

    def test_zero_gradient_skipped(self):
        report = check_assumption1([GradientSet({'w': np.zeros(5)})], DgpConfig(0.1, 0.5))
        self.assertEqual(report.status, 'skipped')

    def test_random_samples(self):
        rng = Rng(4).generator
        samples = [GradientSet({'w': rng.normal(size=(20, 30)), 'b': rng.normal(size=20)}) for _ in range(20)]
        cfg = DgpConfig(0.05, 0.75)
        self.assertEqual(check_assumption1(samples, cfg).status, 'pass')
        self.assertEqual(check_theorem1_companion(samples, cfg).status, 'pass')

    @pytest.mark.slow
    def test_gaussian_sweep_has_no_violations(self):
        """10^3 conjuntos gaussianos em três configurações: razão sempre dentro da faixa"""
        rng = Rng(8).generator
        samples = [GradientSet({'w': rng.normal(size=(20, 30)), 'b': rng.normal(size=20)}) for _ in range(1000)]
        for k1, k2 in ((0.05, 0.75), (0.1, 0.38), (0.2, 0.6)):
            report = check_assumption1(samples, DgpConfig(k1, k2))
            self.assertEqual(report.status, 'pass', report.notes[:3])
            self.assertEqual(report.inputs['samples'], 1000)
            self.assertGreater(report.measured, assumption1_lower_bound(k1, k2))
            self.assertLess(report.measured, 1.0)


class TestLemma1(unittest.TestCase):
    """Testes para a verificação do limite do resíduo"""

    def test_pass(self):
        report = check_lemma1([round_record(t) for t in range(5)])
        self.assertEqual(report.status, 'pass')
        self.assertAlmostEqual(report.bound, lemma1_bound(0.4, 2.0))

    def test_fail(self):
        records = [round_record(0), round_record(1, error_sq=100.0)]
        report = check_lemma1(records)
        self.assertEqual(report.status, 'fail')
        self.assertIn('[1]', report.notes[0])

    def test_invalid_gamma(self):
        self.assertEqual(check_lemma1([round_record(0, gamma=1.0)]).status, 'invalid')

    def test_diverged_is_invalid(self):
        self.assertEqual(check_lemma1([round_record(0, diverged=True)]).status, 'invalid')

    def test_without_error_feedback(self):
        self.assertEqual(check_lemma1([round_record(0, error_feedback=False)]).status, 'skipped')

    def test_ignores_bound_records(self):
        records = [round_record(0), {'kind': 'bound', 'claim_id': 'lemma1', 'status': 'pass'}]
        self.assertEqual(check_lemma1(records).status, 'pass')


class TestProp1(unittest.TestCase):
    """Testes para o diagnóstico de limite inferior da reconstrução"""

    def setUp(self):
        """Configuração inicial dos testes"""
        base = MlpModel.initialize([6, 8, 3], Rng(1))
        self.model = MlpModel(base.weights, (np.full(8, 0.3), base.biases[1]))
        self.x = Rng(2).generator.uniform(0.2, 0.8, size=6)

    def test_exact_reconstruction(self):
        report = check_prop1(self.model, self.x, self.x, 1, Rng(3))
        self.assertEqual(report.status, 'pass')
        self.assertEqual(report.measured, 0.0)

    def test_small_perturbation_within_bound(self):
        x_rec = self.x + 1e-4 * Rng(4).generator.normal(size=6)
        report = check_prop1(self.model, self.x, x_rec, 1, Rng(5))
        self.assertEqual(report.status, 'pass')
        self.assertLessEqual(report.bound, report.measured * 1.2)


class TestConvergence(unittest.TestCase):
    """Testes para a tendência de convergência"""

    def test_decreasing_trend_passes(self):
        t = np.arange(1, 201)
        report = check_convergence(trend_records(1 / np.sqrt(t) + 0.01), trend_records(1 / np.sqrt(t)))
        self.assertEqual(report.status, 'pass')
        self.assertGreater(report.inputs['fit_c'], 0)

    def test_flat_series(self):
        report = check_convergence(trend_records(np.full(50, 0.3)), trend_records(np.full(50, 0.3)))
        self.assertEqual(report.status, 'flat')

    def test_ratio_violation_fails(self):
        t = np.arange(1, 201)
        report = check_convergence(trend_records(1 / np.sqrt(t) + 1.0), trend_records(1 / np.sqrt(t)))
        self.assertEqual(report.status, 'fail')

    def test_missing_gradient_is_invalid(self):
        records = [{'kind': 'round', 'round': 0, 'full_grad_sq': None, 'diverged': False}]
        self.assertEqual(check_convergence(records, records).status, 'invalid')


if __name__ == '__main__':
    unittest.main()
