#!/usr/bin/env python3
"""
Ponto de entrada de linha de comando do dgpsim.

Uso:
    dgpsim <subcomando> [--config PATH] [--out DIR] [--log-level NIVEL] [--chave valor ...]

Subcomandos:
    train   - treina e grava records.jsonl, model.json, config.json e ledger.csv
    attack  - ataca a mensagem de um usuario de uma execucao (replay)
    sweep   - varreduras de k1 + k2, de p ou de distancia relativa
    verify  - verificacoes teoricas sobre uma execucao (verify.csv)
    comm    - totais de comunicacao por execucao (comm.csv)
    report  - curvas de acuracia e dispersao distancia x qualidade (CSV + SVG)

Codigos de saida: 0 sucesso, 2 configuracao, 3 divergencia, 4 ataque inaplicavel.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from . import custom_logging as logging
from .attack import OptAttackConfig, bias_attack, imprint_attack, infer_label, opt_attack
from .config import ATTACK_DEFAULTS, RunConfig, load_run_config, parse_overrides
from .defense import DgpConfig
from .exceptions import EXIT_OK, ConfigError, DgpSimError, DivergenceError, InapplicableAttackError
from .model import MlpModel
from .numerics import Rng
from .report import (accuracy_rows, dumps, plot_accuracy, plot_distance_scatter, read_csv, read_jsonl, write_csv,
                     write_jsonl, write_pgm)
from .sim import CollaborativeSimulator, distance_sweep, image_side, parameter_sweep, replay
from .theory import check_assumption1, check_convergence, check_lemma1, check_theorem1_companion

logger = logging.getLogger(__name__)

ATTACKS = ('opt-euclid', 'opt-cos', 'bias', 'label', 'imprint')
LEDGER_COLUMNS = ('round', 'user', 'upload_bytes', 'download_bytes')
VERIFY_COLUMNS = ('claim_id', 'status', 'measured', 'bound', 'pass')
COMM_COLUMNS = ('run', 'defense', 'rounds', 'users', 'params', 'upload_total', 'download_total',
                'dense_total', 'upload_entries_per_message', 'upload_ratio', 'download_ratio')
SWEEP_COLUMNS = ('value', 'defense', 'attack_ssim', 'attack_mse', 'final_accuracy')
DISTANCE_COLUMNS = ('target', 'achieved', 'defense', 'mse', 'psnr', 'ssim')


def _output_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Diretorio de saida invalido: {out}") from e
    return out


def _config(args, extra: Sequence[str]) -> RunConfig:
    """Configuracao de `--config`, ou de `<run>/config.json` quando `--run` e dado."""
    path = args.config
    run_dir = getattr(args, 'run', None)
    if path is None and run_dir is not None:
        path = str(Path(run_dir) / 'config.json')
    return load_run_config(path, parse_overrides(extra))


def _run_dirs(args) -> List[Path]:
    return [Path(p) for p in (args.runs or [])]


def _read_run(run_dir: Path):
    config_path, records_path = run_dir / 'config.json', run_dir / 'records.jsonl'
    if not config_path.is_file() or not records_path.is_file():
        raise ConfigError(f"{run_dir} nao contem uma execucao (config.json/records.jsonl)")
    return load_run_config(str(config_path), env={}), read_jsonl(records_path)


def run_train(args, extra: Sequence[str]) -> int:
    """Treina e grava os artefatos da execucao em --out."""
    cfg = _config(args, extra)
    out = _output_dir(args)
    (out / 'config.json').write_text(cfg.to_json() + '\n', encoding='utf-8')
    simulator = CollaborativeSimulator(cfg)
    try:
        simulator.run()
    finally:
        write_jsonl(out / 'records.jsonl', (r.to_dict() for r in simulator.records))
        write_csv(out / 'ledger.csv', simulator.ledger.rows(), LEDGER_COLUMNS)
    simulator.model.save_checkpoint(out / 'model.json')
    accuracy = simulator.evaluate()
    print(f"final_accuracy {accuracy:.4f}")
    return EXIT_OK


def _attack_config(args, distance: str) -> OptAttackConfig:
    return OptAttackConfig(distance=distance, iterations=args.iterations, restarts=args.restarts,
                           grad_provider=args.grad_provider)


def _write_images(out: Path, report, truth, side: Optional[int]) -> None:
    for i, recovered in enumerate(report.recovered):
        write_pgm(out / f"recovered_{i}.pgm", recovered, side)
        if truth is not None and i < truth.size:
            write_pgm(out / f"truth_{i}.pgm", truth.inputs[i], side)


def _label_accuracy(cfg: RunConfig, user: int, rounds: int, out: Path) -> int:
    if cfg.batch_size != 1:
        raise InapplicableAttackError(f"Inferencia de rotulo exige batch_size = 1 (recebido {cfg.batch_size})")
    captures = replay(cfg, {(t, user) for t in range(rounds)})
    correct = undecidable = 0
    for t in range(rounds):
        capture = captures[(t, user)]
        label = infer_label(capture.observation())
        if label is None:
            undecidable += 1
        elif label == int(capture.batch.labels[0]):
            correct += 1
    result = {'attack': 'label', 'user': user, 'rounds': rounds, 'correct': correct,
              'undecidable': undecidable, 'accuracy': correct / rounds}
    (out / 'report.json').write_text(dumps(result) + '\n', encoding='utf-8')
    print(f"label_accuracy {result['accuracy']:.4f} ({correct}/{rounds}, indecidiveis {undecidable})")
    return EXIT_OK


def run_attack(args, extra: Sequence[str]) -> int:
    """Ataca a mensagem do usuario --user na rodada --round (reconstruida por replay)."""
    cfg = _config(args, extra)
    out = _output_dir(args)
    if args.attack == 'label':
        return _label_accuracy(cfg, args.user, args.label_rounds or cfg.rounds, out)
    if args.attack == 'imprint' and cfg.imprint_bins == 0:
        raise InapplicableAttackError("Ataque imprint exige imprint_bins > 0 (modelo sem modulo imprint)")
    capture = replay(cfg, {(args.round, args.user)})[(args.round, args.user)]
    observation, truth = capture.observation(), capture.batch
    if args.attack == 'bias':
        report = bias_attack(observation, truth)
    elif args.attack == 'imprint':
        report = imprint_attack(observation, true_batch=truth)
    else:
        distance = 'euclidean' if args.attack == 'opt-euclid' else 'cosine'
        report = opt_attack(observation, _attack_config(args, distance), Rng.stream(cfg.seed, 'attack'), truth)
    payload = {'round': args.round, 'user': args.user, 'defense': cfg.defense.compact(), **report.to_dict()}
    (out / 'report.json').write_text(dumps(payload) + '\n', encoding='utf-8')
    write_jsonl(out / 'attacks.jsonl', [payload])
    _write_images(out, report, truth, image_side(cfg.dataset))
    if report.success:
        print(f"{args.attack}: mse {report.mean_mse:.3e} ssim {report.mean_ssim:.4f}")
    else:
        print(f"{args.attack}: falhou ({report.reason})")
    return EXIT_OK


def _parse_values(text: Optional[str]) -> List[float]:
    if not text:
        raise ConfigError("--values e obrigatorio")
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise ConfigError(f"--values invalido: {text}") from e


def run_sweep(args, extra: Sequence[str]) -> int:
    """Varredura de 'sum_k', 'p' ou 'distance' gravada em sweep.csv."""
    cfg = _config(args, extra)
    out = _output_dir(args)
    values = _parse_values(args.values)
    attack_cfg = OptAttackConfig(iterations=args.iterations, restarts=args.restarts, grad_provider=args.grad_provider)
    if args.param == 'distance':
        sweep = distance_sweep(cfg, values, attack_cfg)
        write_csv(out / 'distance.csv', sweep.rows, DISTANCE_COLUMNS)
        print(f"spearman {sweep.spearman}")
        return EXIT_OK
    try:
        rows = parameter_sweep(cfg, args.param, values, args.attack, attack_cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    write_csv(out / 'sweep.csv', rows, SWEEP_COLUMNS)
    for row in rows:
        print(f"{args.param}={row['value']}: ssim {row['attack_ssim']} acc {row['final_accuracy']:.4f}")
    return EXIT_OK


def verify_run(cfg: RunConfig, records: Sequence[Dict]) -> List:
    """Executa as verificacoes aplicaveis a uma execucao gravada."""
    reports = [check_lemma1(records)]
    if cfg.defense.name in ('dgp', 'adgp'):
        captures = replay(cfg, {(0, user) for user in range(cfg.users)})
        samples = [captures[(0, user)].grads for user in range(cfg.users)]
        dgp = DgpConfig(cfg.defense.k1, cfg.defense.k2)
        reports.append(check_assumption1(samples, dgp))
        reports.append(check_theorem1_companion(samples, dgp))
    baseline_cfg = cfg.with_overrides(defense='none', track_full_gradient=True)
    baseline = [r.to_dict() for r in CollaborativeSimulator(baseline_cfg).run()]
    reports.append(check_convergence(records, baseline))
    return reports


def run_verify(args, extra: Sequence[str]) -> int:
    """Grava verify.csv e anexa os BoundReports ao records.jsonl da execucao."""
    if not args.run:
        raise ConfigError("verify exige --run DIR")
    run_dir = Path(args.run)
    cfg, records = _read_run(run_dir)
    rounds = [r for r in records if r.get('kind', 'round') == 'round']
    reports = verify_run(cfg, rounds)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = [{'claim_id': r.claim_id, 'status': r.status, 'measured': r.measured, 'bound': r.bound,
             'pass': r.satisfied} for r in reports]
    write_csv(out / 'verify.csv', rows, VERIFY_COLUMNS)
    write_jsonl(run_dir / 'records.jsonl', rounds + [r.to_dict() for r in reports])
    for r in reports:
        print(f"{r.claim_id}: {r.status}")
    return EXIT_OK


def _comm_row(run_dir: Path) -> Dict[str, object]:
    cfg, _ = _read_run(run_dir)
    ledger = read_csv(run_dir / 'ledger.csv')
    tensors = MlpModel.load_checkpoint(run_dir / 'model.json').params()
    params = tensors.param_count
    messages = max(len(ledger), 1)
    upload = sum(int(row['upload_bytes']) for row in ledger)
    download = sum(int(row['download_bytes']) for row in ledger)
    dense_total = 4 * params * len(ledger)
    header = sum(1 + len(key.encode('utf-8')) + 4 for key in tensors)
    if cfg.defense.name in ('none', 'dp'):
        entries = params
    else:
        entries = (upload / messages - header) / 8
    return {
        'run': run_dir.name, 'defense': cfg.defense.compact(), 'rounds': cfg.rounds, 'users': cfg.users,
        'params': params, 'upload_total': upload, 'download_total': download, 'dense_total': dense_total,
        'upload_entries_per_message': entries,
        'upload_ratio': upload / dense_total if dense_total else None,
        'download_ratio': download / dense_total if dense_total else None,
    }


def run_comm(args, extra: Sequence[str]) -> int:
    """Totais de upload/download por execucao e razoes DGP x denso e ADGP x DGP."""
    out = _output_dir(args)
    rows = [_comm_row(run_dir) for run_dir in _run_dirs(args)]
    write_csv(out / 'comm.csv', rows, COMM_COLUMNS)
    by_defense = {row['defense'].split(':')[0]: row for row in rows}
    for row in rows:
        print(f"{row['run']} ({row['defense']}): upload {row['upload_total']}B download {row['download_total']}B")
    if 'dgp' in by_defense:
        dgp = by_defense['dgp']
        print(f"dgp_upload_savings {1 - dgp['upload_ratio']:.4f}")
        if 'adgp' in by_defense and dgp['download_total']:
            print(f"adgp_vs_dgp_download {by_defense['adgp']['download_total'] / dgp['download_total']:.4f}")
    return EXIT_OK


def run_report(args, extra: Sequence[str]) -> int:
    """accuracy.csv/svg das execucoes dadas e distance.svg quando houver distance.csv."""
    out = _output_dir(args)
    runs = {}
    distance_rows = []
    for run_dir in _run_dirs(args):
        if (run_dir / 'records.jsonl').is_file():
            runs[run_dir.name] = read_jsonl(run_dir / 'records.jsonl')
        if (run_dir / 'distance.csv').is_file():
            distance_rows.extend(read_csv(run_dir / 'distance.csv'))
    rows = accuracy_rows(runs)
    write_csv(out / 'accuracy.csv', rows, ('run', 'round', 'test_accuracy'))
    plot_accuracy(out / 'accuracy.svg', rows)
    if distance_rows:
        write_csv(out / 'distance.csv', distance_rows, DISTANCE_COLUMNS)
        plot_distance_scatter(out / 'distance.svg', distance_rows)
    print(f"report: {len(runs)} execucoes, {len(rows)} pontos de acuracia")
    return EXIT_OK


COMMANDS = {
    'train': run_train,
    'attack': run_attack,
    'sweep': run_sweep,
    'verify': run_verify,
    'comm': run_comm,
    'report': run_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dgpsim', description="Simulador de poda dupla de gradientes",
                                     allow_abbrev=False)
    parser.add_argument('--version', action='version', version=f"dgpsim {__version__}")
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument('--config', help="Arquivo JSON de configuracao")
    common.add_argument('--out', default='.', help="Diretorio de saida")
    common.add_argument('--log-level', default=None, help="DEBUG, INFO, WARNING, ERROR")
    optim = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    optim.add_argument('--iterations', type=int, default=ATTACK_DEFAULTS['iterations'])
    optim.add_argument('--restarts', type=int, default=ATTACK_DEFAULTS['restarts'])
    optim.add_argument('--grad-provider', default=ATTACK_DEFAULTS['grad_provider'],
                       choices=('double_backprop', 'finite_diff'))

    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('train', parents=[common], help="Treinamento colaborativo", allow_abbrev=False)

    attack = sub.add_parser('attack', parents=[common, optim], help="Ataque a uma mensagem", allow_abbrev=False)
    attack.add_argument('--run', help="Diretorio de uma execucao (usa o seu config.json)")
    attack.add_argument('--attack', required=True, choices=ATTACKS)
    attack.add_argument('--round', type=int, default=0)
    attack.add_argument('--user', type=int, default=0)
    attack.add_argument('--label-rounds', type=int, default=None, help="Rodadas avaliadas pelo ataque 'label'")

    sweep = sub.add_parser('sweep', parents=[common, optim], help="Varreduras de parametros", allow_abbrev=False)
    sweep.add_argument('--param', required=True, choices=('sum_k', 'p', 'distance'))
    sweep.add_argument('--values', required=True, help="Lista separada por virgulas")
    sweep.add_argument('--attack', default='opt', choices=('opt', 'imprint'))

    verify = sub.add_parser('verify', parents=[common], help="Verificacoes teoricas", allow_abbrev=False)
    verify.add_argument('--run', help="Diretorio da execucao")
    verify.set_defaults(out=None)

    for name, help_text in (('comm', "Custo de comunicacao"), ('report', "Graficos e CSV")):
        command = sub.add_parser(name, parents=[common], help=help_text, allow_abbrev=False)
        command.add_argument('--runs', nargs='*', default=[], help="Diretorios de execucoes")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Executa a CLI e retorna o codigo de saida."""
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.log_level:
            logging.set_level(args.log_level)
        return COMMANDS[args.command](args, extra)
    except DivergenceError as e:
        logger.error(f"Execucao divergiu: {e}")
        return e.exit_code
    except DgpSimError as e:
        logger.error(str(e))
        return e.exit_code
    except ValueError as e:
        logger.error(f"Configuracao invalida: {e}")
        return ConfigError.exit_code


if __name__ == '__main__':
    sys.exit(main())
