#!/usr/bin/env python3
"""
Testes de integração da linha de comando: artefatos, determinismo e
códigos de saída
"""

import io
import json
import os
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path
from unittest import mock

from dgpsim.cli import main
from dgpsim.exceptions import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_INAPPLICABLE, EXIT_OK
from dgpsim.report import read_csv, read_jsonl

SMALL_RUN = {'dataset': 'glyphs', 'users': 3, 'rounds': 6, 'batch_size': 8, 'n_train': 240, 'n_test': 80,
             'hidden': [16], 'eval_every': 3, 'log_every': 0, 'seed': 5}


class CliTestCase(unittest.TestCase):
    """Base com diretório temporário e ambiente sem DGPSIM_SEED"""

    def setUp(self):
        """Configuração inicial dos testes"""
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        patcher = mock.patch.dict(os.environ)
        patcher.start()
        self.addCleanup(patcher.stop)
        os.environ.pop('DGPSIM_SEED', None)

    def tearDown(self):
        self.tmp.cleanup()

    def write_config(self, name, **changes):
        path = self.root / f"{name}.json"
        path.write_text(json.dumps({**SMALL_RUN, **changes}), encoding='utf-8')
        return str(path)

    def run_cli(self, *argv):
        output = io.StringIO()
        with redirect_stdout(output):
            code = main([str(a) for a in argv])
        return code, output.getvalue()

    def train(self, name, **changes):
        out = self.root / name
        code, _ = self.run_cli('train', '--config', self.write_config(name, **changes), '--out', out)
        self.assertEqual(code, EXIT_OK)
        return out


class TestTrainCommand(CliTestCase):
    """Subcomando train"""

    def test_artifacts_and_accuracy_line(self):
        out = self.root / 'run'
        code, stdout = self.run_cli('train', '--config', self.write_config('run'), '--out', out)
        self.assertEqual(code, EXIT_OK)
        self.assertIn('final_accuracy', stdout)
        for name in ('config.json', 'records.jsonl', 'ledger.csv', 'model.json'):
            self.assertTrue((out / name).is_file(), name)
        self.assertEqual(len(read_jsonl(out / 'records.jsonl')), 6)
        self.assertEqual(len(read_csv(out / 'ledger.csv')), 18)

    def test_deterministic_outputs(self):
        first = self.train('a', defense='dgp:0.05,0.75')
        second = self.train('b', defense='dgp:0.05,0.75')
        for name in ('records.jsonl', 'model.json', 'ledger.csv', 'config.json'):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)

    def test_zero_pruning_records_match(self):
        """none e dgp(0, 0): mesmos pesos e mesmas métricas de treino"""
        plain = read_jsonl(self.train('none') / 'records.jsonl')
        pruned = read_jsonl(self.train('dgp', defense='dgp:0.0,0.0') / 'records.jsonl')
        for a, b in zip(plain, pruned):
            for key in ('train_loss', 'grad_sq_mean', 'test_accuracy', 'full_grad_sq'):
                self.assertEqual(a[key], b[key], key)
        self.assertEqual((self.root / 'none' / 'model.json').read_bytes(),
                         (self.root / 'dgp' / 'model.json').read_bytes())

    def test_overrides_and_environment(self):
        out = self.root / 'override'
        with mock.patch.dict(os.environ, {'DGPSIM_SEED': '11'}):
            code, _ = self.run_cli('train', '--config', self.write_config('o'), '--out', out, '--rounds', '2')
        self.assertEqual(code, EXIT_OK)
        config = json.loads((out / 'config.json').read_text())
        self.assertEqual(config['seed'], 11)
        self.assertEqual(config['rounds'], 2)

    def test_missing_config(self):
        code, _ = self.run_cli('train', '--config', self.root / 'nope.json', '--out', self.root / 'x')
        self.assertEqual(code, EXIT_CONFIG)

    def test_invalid_value(self):
        code, _ = self.run_cli('train', '--config', self.write_config('bad'), '--out', self.root / 'x',
                               '--users', '0')
        self.assertEqual(code, EXIT_CONFIG)

    def test_divergence_exit_code(self):
        out = self.root / 'div'
        code, _ = self.run_cli('train', '--config', self.write_config('div'), '--out', out, '--lr', '1e300')
        self.assertEqual(code, EXIT_DIVERGENCE)
        self.assertTrue(read_jsonl(out / 'records.jsonl')[-1]['diverged'])


class TestAttackCommand(CliTestCase):
    """Subcomando attack"""

    def setUp(self):
        """Configuração inicial dos testes"""
        super().setUp()
        self.run_dir = self.train('base', batch_size=1)

    def attack(self, name, *args):
        out = self.root / name
        code, stdout = self.run_cli('attack', '--run', self.run_dir, '--out', out, *args)
        return code, stdout, out

    def test_bias_attack_report_and_images(self):
        code, _, out = self.attack('bias', '--attack', 'bias', '--round', 2, '--user', 1)
        self.assertEqual(code, EXIT_OK)
        report = json.loads((out / 'report.json').read_text())
        self.assertTrue(report['success'])
        self.assertLessEqual(report['scores'][0]['mse'], 1e-18)
        self.assertTrue((out / 'recovered_0.pgm').is_file())
        self.assertTrue((out / 'truth_0.pgm').is_file())

    def test_attack_is_deterministic(self):
        _, _, first = self.attack('a1', '--attack', 'opt-cos', '--iterations', 50, '--restarts', 1)
        _, _, second = self.attack('a2', '--attack', 'opt-cos', '--iterations', 50, '--restarts', 1)
        for name in ('report.json', 'attacks.jsonl', 'recovered_0.pgm', 'truth_0.pgm'):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)

    def test_label_attack(self):
        code, stdout, out = self.attack('label', '--attack', 'label')
        self.assertEqual(code, EXIT_OK)
        self.assertIn('label_accuracy', stdout)
        self.assertEqual(json.loads((out / 'report.json').read_text())['accuracy'], 1.0)

    def test_imprint_without_module(self):
        code, _, _ = self.attack('imprint', '--attack', 'imprint')
        self.assertEqual(code, EXIT_INAPPLICABLE)

    def test_imprint_with_module(self):
        self.run_dir = self.train('imprinted', imprint_bins=8)
        code, _, out = self.attack('imprint_ok', '--attack', 'imprint', '--round', 1)
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(json.loads((out / 'report.json').read_text())['attack'], 'imprint')

    def test_round_out_of_range(self):
        code, _, _ = self.attack('range', '--attack', 'bias', '--round', 99)
        self.assertEqual(code, EXIT_CONFIG)

    def test_single_sample_attacks_need_unit_batch(self):
        """Com B = 8 a mensagem real não admite os ataques de amostra única"""
        self.run_dir = self.train('batched')
        for attack in ('bias', 'label'):
            code, _, _ = self.attack(f"batched_{attack}", '--attack', attack)
            self.assertEqual(code, EXIT_INAPPLICABLE, attack)

    def test_opt_attack_on_whole_batch(self):
        """O ataque por otimização reconstrói todas as amostras da mensagem enviada"""
        self.run_dir = self.train('batched')
        code, _, out = self.attack('batched_opt', '--attack', 'opt-euclid', '--iterations', 20, '--restarts', 1)
        self.assertEqual(code, EXIT_OK)
        report = json.loads((out / 'report.json').read_text())
        self.assertEqual(len(report['recovered']), SMALL_RUN['batch_size'])
        self.assertTrue((out / f"truth_{SMALL_RUN['batch_size'] - 1}.pgm").is_file())


class TestAnalysisCommands(CliTestCase):
    """Subcomandos verify, comm, report e sweep"""

    def test_verify_is_idempotent(self):
        run_dir = self.train('v', defense='dgp:0.05,0.75')
        self.assertEqual(self.run_cli('verify', '--run', run_dir)[0], EXIT_OK)
        first = (run_dir / 'records.jsonl').read_bytes()
        self.assertEqual(self.run_cli('verify', '--run', run_dir)[0], EXIT_OK)
        self.assertEqual((run_dir / 'records.jsonl').read_bytes(), first)
        claims = [row['claim_id'] for row in read_csv(run_dir / 'verify.csv')]
        self.assertIn('lemma1', claims)
        self.assertIn('theorem2', claims)

    def test_verify_requires_run(self):
        self.assertEqual(self.run_cli('verify', '--run', self.root / 'missing')[0], EXIT_CONFIG)

    def test_comm_ratios(self):
        runs = [self.train('none'), self.train('dgp', defense='dgp:0.05,0.75'),
                self.train('adgp', defense='adgp:0.05,0.75,0.2')]
        code, stdout = self.run_cli('comm', '--out', self.root / 'comm', '--runs', *runs)
        self.assertEqual(code, EXIT_OK)
        rows = {row['run']: row for row in read_csv(self.root / 'comm' / 'comm.csv')}
        self.assertEqual(float(rows['none']['upload_ratio']), 1.0)
        self.assertEqual(float(rows['none']['download_ratio']), 1.0)
        self.assertLess(float(rows['dgp']['upload_ratio']), 1.0)
        self.assertLess(int(rows['adgp']['download_total']), int(rows['dgp']['download_total']))
        self.assertIn('adgp_vs_dgp_download', stdout)

    def test_report_without_runs(self):
        out = self.root / 'empty'
        self.assertEqual(self.run_cli('report', '--out', out)[0], EXIT_OK)
        self.assertEqual(read_csv(out / 'accuracy.csv'), [])

    def test_report_two_runs(self):
        runs = [self.train('plain'), self.train('pruned', defense='dgp:0.05,0.75')]
        out = self.root / 'report'
        self.assertEqual(self.run_cli('report', '--out', out, '--runs', *runs)[0], EXIT_OK)
        rows = read_csv(out / 'accuracy.csv')
        self.assertEqual(len(rows), 4)
        svg = (out / 'accuracy.svg').read_text()
        self.assertIn('plain', svg)
        self.assertIn('pruned', svg)

    def test_sweep_invalid_values(self):
        code, _ = self.run_cli('sweep', '--config', self.write_config('s'), '--out', self.root / 's',
                               '--param', 'sum_k', '--values', 'a,b')
        self.assertEqual(code, EXIT_CONFIG)

    def test_sum_k_sweep(self):
        out = self.root / 'sweep'
        code, _ = self.run_cli('sweep', '--config', self.write_config('s', rounds=2), '--out', out,
                               '--param', 'sum_k', '--values', '0.48,0.8', '--iterations', 20, '--restarts', 1)
        self.assertEqual(code, EXIT_OK)
        rows = read_csv(out / 'sweep.csv')
        self.assertEqual([float(r['value']) for r in rows], [0.48, 0.8])


if __name__ == '__main__':
    unittest.main()
