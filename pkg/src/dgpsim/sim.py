"""
Simulador de aprendizado colaborativo (SGD com realimentacao de erro).

Orquestra N usuarios com particoes IID, a defesa de cada usuario, a agregacao
no servidor, a avaliacao periodica e a reconstrucao deterministica de
mensagens para os ataques. Toda aleatoriedade vem da semente da
configuracao, via fluxos nomeados de `Rng`.
"""

import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.stats import spearmanr
from sklearn.datasets import make_blobs

from . import custom_logging as logging
from .attack import GradObservation, OptAttackConfig, imprint_attack, opt_attack
from .config import ATTACK_DEFAULTS, DATASET_CONFIG, DefenseConfig, RunConfig
from .defense import (DgpConfig, ErrorState, SparseGradient, adgp_round, aggregate,
                      dgp_prune, ef_round, make_defense, top_prune)
from .exceptions import ConfigError, DivergenceError
from .metrics import CommLedger, relative_distance
from .model import Batch, GradientSet, ImprintSpec, MlpModel, accuracy, insert_imprint, loss_and_grad
from .numerics import Rng, SgdState, sgd_step

logger = logging.getLogger(__name__)


def _render_glyph(kind: str, side: int, generator: np.random.Generator) -> np.ndarray:
    image = np.zeros((side, side))
    if kind == 'bar':
        col = int(generator.integers(1, side - 2))
        image[1:side - 1, col:col + 2] = 1.0
    elif kind == 'cross':
        r, c = (int(v) for v in generator.integers(side // 2 - 1, side // 2 + 1, size=2))
        image[r, 1:side - 1] = 1.0
        image[1:side - 1, c] = 1.0
    elif kind == 'diag':
        offset = int(generator.integers(-1, 2))
        for i in range(side):
            j = i + offset
            if 0 <= j < side:
                image[i, j] = 1.0
        if generator.random() < 0.5:
            image = image[:, ::-1]
    elif kind == 'ring':
        lo = int(generator.integers(1, 3))
        hi = side - 1 - int(generator.integers(0, 2))
        image[lo:hi, lo:hi] = 1.0
        image[lo + 1:hi - 1, lo + 1:hi - 1] = 0.0
    else:
        raise ValueError(f"Forma desconhecida: {kind}")
    return image


def _glyph_split(count: int, generator: np.random.Generator) -> Batch:
    params = DATASET_CONFIG['glyphs']
    side, names = params['side'], params['class_names']
    labels = np.arange(count) % len(names)
    generator.shuffle(labels)
    low, high = params['intensity_range']
    images = np.empty((count, side * side))
    for i, label in enumerate(labels):
        shape = _render_glyph(names[label], side, generator) * generator.uniform(low, high)
        noisy = shape + generator.normal(0.0, params['noise_std'], size=shape.shape)
        images[i] = np.clip(noisy, 0.0, 1.0).ravel()
    return Batch(images, labels)


def _blob_split(count: int, rng: Rng) -> Batch:
    params = DATASET_CONFIG['blobs']
    classes, features = params['classes'], params['features']
    centers = np.zeros((classes, features))
    centers[np.arange(classes), np.arange(classes)] = params['separation'] / np.sqrt(2.0)
    counts = [count // classes + (1 if c < count % classes else 0) for c in range(classes)]
    inputs, labels = make_blobs(n_samples=counts, centers=centers, cluster_std=params['cluster_std'],
                                random_state=rng.integer_seed())
    return Batch(inputs, labels)


def make_dataset(kind: str, rng: Rng, n_train: int = 2000, n_test: int = 500) -> Tuple[Batch, Batch]:
    """Gera o dataset sintetico (treino, teste) a partir do `rng`.

    - blobs: 4 clusters gaussianos em 16-d, centros a distancia 5 sigma entre si.
    - glyphs: formas 8x8 (bar, cross, diag, ring) com intensidade aleatoria e
      ruido aditivo, pixels em [0, 1], classes balanceadas em cada particao.

    Raises:
        ConfigError: Tipo desconhecido.
    """
    if kind == 'blobs':
        return _blob_split(n_train, rng), _blob_split(n_test, rng)
    if kind == 'glyphs':
        return _glyph_split(n_train, rng.generator), _glyph_split(n_test, rng.generator)
    raise ConfigError(f"Dataset desconhecido: {kind}")


def image_side(kind: str) -> Optional[int]:
    return DATASET_CONFIG[kind].get('side')


@dataclass
class RunRecord:
    """Metricas de uma rodada (uma linha do JSONL).

    Attributes:
        round (int): Indice da rodada (0, 1, ...).
        lr (float): Taxa usada na rodada.
        train_loss (float): Perda media dos usuarios no lote da rodada.
        grad_sq_mean (float): Media de ||grad W_{t,i}||^2 entre usuarios.
        grad_sq_max (float): Maximo de ||grad W_{t,i}||^2 (estimativa de G^2).
        error_sq (float): ||media dos residuos||^2 apos a rodada.
        error_sq_users (float): Media de ||e_{t+1,i}||^2 entre usuarios.
        gamma_max (float): Maior ||P - g||^2 / ||P||^2 da rodada.
        full_grad_sq (float, optional): ||grad l(W_t)||^2 no treino completo.
        test_accuracy (float, optional): Acuracia de teste (quando avaliada).
        upload_bytes (int): Bytes enviados pelos usuarios na rodada.
        download_bytes (int): Bytes recebidos pelos usuarios na rodada.
        dummy_gap (float, optional): ||W - V - lr e|| / ||W|| (iterado auxiliar).
        diverged (bool): Registro de diagnostico de divergencia.
    """

    round: int
    lr: float
    train_loss: float
    grad_sq_mean: float
    grad_sq_max: float
    error_sq: float
    error_sq_users: float
    gamma_max: float
    upload_bytes: int
    download_bytes: int
    error_feedback: bool
    full_grad_sq: Optional[float] = None
    test_accuracy: Optional[float] = None
    dummy_gap: Optional[float] = None
    diverged: bool = False

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, float) and not np.isfinite(value):
                data[key] = None
        data['kind'] = 'round'
        return data


@dataclass
class Capture:
    """Mensagem reconstruida de um usuario numa rodada, com a verdade."""

    round: int
    user: int
    model: MlpModel
    batch: Batch
    grads: GradientSet
    wire: SparseGradient

    def observation(self) -> GradObservation:
        return GradObservation.from_wire(self.model, self.wire, self.batch.size, f"r{self.round}u{self.user}")


class CollaborativeSimulator:
    """Simulador do treinamento colaborativo.

    Cada chamada de `run_round` executa uma rodada: gradientes por usuario,
    realimentacao de erro e defesa, agregacao, atualizacao e metricas.

    Attributes:
        config (RunConfig): Configuracao da execucao.
        model (MlpModel): Modelo global atual.
        records (list): RunRecord por rodada ja executada.
        ledger (CommLedger): Bytes por rodada e usuario.
        captures (dict): Capturas (rodada, usuario) pedidas na construcao.
    """

    def __init__(self, config: RunConfig, captures: Optional[Set[Tuple[int, int]]] = None):
        self.config = config
        seed = config.seed
        self.train_set, self.test_set = make_dataset(config.dataset, Rng.stream(seed, 'data'),
                                                     config.n_train, config.n_test)
        order = Rng.stream(seed, 'partition').generator.permutation(self.train_set.size)
        self.shards = np.array_split(order, config.users)
        dims = [self.train_set.inputs.shape[1], *config.hidden, DATASET_CONFIG[config.dataset]['classes']]
        model = MlpModel.initialize(dims, Rng.stream(seed, 'init'))
        if config.imprint_bins > 0:
            spec = ImprintSpec.from_quantiles(self.test_set.inputs, config.imprint_bins)
            model = insert_imprint(model, spec)
            logger.info(f"Modulo imprint inserido com {spec.bins} linhas")
        self.model = model
        self.batch_rngs = [Rng.stream(seed, 'batch', i) for i in range(config.users)]
        self.leader_rng = Rng.stream(seed, 'leader')
        self.defense = None if config.defense.name == 'adgp' else make_defense(config.defense, Rng.stream(seed, 'dp'))
        params = model.params()
        self.states = [ErrorState.zeros(params) for _ in range(config.users)]
        self.velocity = {key: SgdState(momentum=config.momentum) for key in params}
        self.dummy = params.copy() if config.track_dummy else None
        self.ledger = CommLedger()
        self.records: List[RunRecord] = []
        self.capture_keys = set(captures or ())
        self.captures: Dict[Tuple[int, int], Capture] = {}
        self.round_index = 0
        self.defense_time = 0.0
        logger.info(f"Simulador inicializado: {config.users} usuarios, defesa {config.defense.compact()}, "
                    f"{params.param_count} parametros")

    @property
    def uses_error_feedback(self) -> bool:
        cfg = self.config
        return cfg.error_feedback and (cfg.defense.name == 'adgp' or self.defense.uses_error_feedback)

    def sample_batch(self, user: int) -> Batch:
        shard = self.shards[user]
        chosen = self.batch_rngs[user].generator.choice(shard, self.config.batch_size, replace=False)
        return self.train_set.subset(chosen)

    def evaluate(self, batch: Optional[Batch] = None) -> float:
        return accuracy(self.model, batch or self.test_set)

    def _diverged(self, t: int, lr: float, losses: Sequence[float], reason: str) -> None:
        record = RunRecord(t, lr, float(np.mean(losses)) if losses else float('nan'), float('nan'), float('nan'),
                           float('nan'), float('nan'), float('nan'), 0, 0, self.config.error_feedback,
                           diverged=True)
        self.records.append(record)
        logger.error(f"Divergencia na rodada {t}: {reason}")
        raise DivergenceError(f"Divergencia na rodada {t}: {reason}", round_index=t)

    def run_round(self) -> RunRecord:
        """Executa uma rodada completa e retorna o seu RunRecord.

        Raises:
            DivergenceError: Perda ou parametros nao finitos (apos gravar um
                registro de diagnostico).
        """
        cfg = self.config
        t = self.round_index
        if t >= cfg.rounds:
            raise ConfigError(f"Todas as {cfg.rounds} rodadas ja foram executadas")
        lr = cfg.lr_at(t)
        ef = self.uses_error_feedback
        losses, grads_list, batches = [], [], []
        for user in range(cfg.users):
            batch = self.sample_batch(user)
            loss, grads = loss_and_grad(self.model, batch)
            losses.append(loss)
            grads_list.append(grads)
            batches.append(batch)
        if not np.all(np.isfinite(losses)) or not all(g.all_finite() for g in grads_list):
            self._diverged(t, lr, losses, 'perda ou gradiente nao finito')

        compensated = [g + s.residual if ef else g for g, s in zip(grads_list, self.states)]
        start = time.perf_counter()
        locations = None
        if cfg.defense.name == 'adgp':
            wires, states, locations = adgp_round(list(zip(grads_list, self.states)), cfg.defense.k,
                                                  DgpConfig(cfg.defense.k1, cfg.defense.k2), self.leader_rng, ef)
        else:
            wires, states = [], []
            for grads, state in zip(grads_list, self.states):
                if ef:
                    wire, state = ef_round(grads, state, self.defense)
                else:
                    wire = self.defense.apply(grads)
                wires.append(wire)
                states.append(state)
        self.defense_time += time.perf_counter() - start

        for user in range(cfg.users):
            if (t, user) in self.capture_keys:
                self.captures[(t, user)] = Capture(t, user, self.model, batches[user], grads_list[user],
                                                   wires[user])

        mean_update = aggregate(wires)
        download = locations if locations is not None else mean_update
        up_total = down_total = 0
        for user, wire in enumerate(wires):
            up, down = self.ledger.record(t, user, wire, download)
            up_total += up
            down_total += down

        gammas = []
        for p_user, wire in zip(compensated, wires):
            norm = p_user.sq_norm()
            gammas.append((p_user - wire.densify()).sq_norm() / norm if norm > 0 else 0.0)
        self.states = states
        mean_residual = GradientSet.mean([s.residual for s in states])
        grad_sq = [g.sq_norm() for g in grads_list]

        full_grad_sq = None
        if cfg.track_full_gradient:
            full_grad_sq = loss_and_grad(self.model, self.train_set)[1].sq_norm()

        delta = GradientSet({key: sgd_step(self.velocity[key], value, lr) for key, value in mean_update.items()})
        self.model = self.model.apply_update(delta)
        if not self.model.params().all_finite():
            self._diverged(t, lr, losses, 'parametros nao finitos apos a atualizacao')

        dummy_gap = None
        if self.dummy is not None:
            mean_grad = GradientSet.mean(grads_list)
            self.dummy = self.dummy - mean_grad.scale(lr)
            weights = self.model.params()
            gap = (weights - self.dummy - mean_residual.scale(lr)).norm()
            dummy_gap = gap / max(weights.norm(), np.finfo(float).tiny)

        test_accuracy = None
        if (t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1:
            test_accuracy = self.evaluate()

        record = RunRecord(
            round=t, lr=lr, train_loss=float(np.mean(losses)),
            grad_sq_mean=float(np.mean(grad_sq)), grad_sq_max=float(np.max(grad_sq)),
            error_sq=mean_residual.sq_norm(),
            error_sq_users=float(np.mean([s.sq_norm() for s in states])),
            gamma_max=float(max(gammas)), upload_bytes=up_total, download_bytes=down_total,
            error_feedback=cfg.error_feedback, full_grad_sq=full_grad_sq,
            test_accuracy=test_accuracy, dummy_gap=dummy_gap)
        self.records.append(record)
        self.round_index += 1
        if cfg.log_every and self.round_index % cfg.log_every == 0:
            acc = f"{test_accuracy:.3f}" if test_accuracy is not None else '-'
            logger.info(f"Rodada {t}: loss {record.train_loss:.4f} | acc {acc} | "
                        f"e^2 {record.error_sq_users:.3e} | up {up_total}B")
        return record

    def iter_rounds(self, rounds: Optional[int] = None) -> Iterator[RunRecord]:
        total = self.config.rounds if rounds is None else min(rounds, self.config.rounds)
        while self.round_index < total:
            yield self.run_round()

    def run(self) -> List[RunRecord]:
        start = time.perf_counter()
        for _ in self.iter_rounds():
            pass
        elapsed = time.perf_counter() - start
        per_round = self.defense_time / max(self.round_index, 1)
        logger.info(f"Treinamento concluido: {self.round_index} rodadas em {elapsed:.2f}s "
                    f"(defesa {self.config.defense.name}: {1e3 * per_round:.3f} ms/rodada)")
        return self.records

    def get_status(self) -> Dict[str, object]:
        last = self.records[-1] if self.records else None
        return {
            'round': self.round_index,
            'defense': self.config.defense.compact(),
            'train_loss': last.train_loss if last else None,
            'test_accuracy': self.evaluate(),
            'upload_total': self.ledger.total_upload,
            'download_total': self.ledger.total_download,
        }


def train(cfg: RunConfig) -> Iterator[RunRecord]:
    """Executa o treinamento e produz um RunRecord por rodada."""
    yield from CollaborativeSimulator(cfg).iter_rounds()


def replay(cfg: RunConfig, captures: Set[Tuple[int, int]]) -> Dict[Tuple[int, int], Capture]:
    """Reexecuta a configuracao ate a ultima rodada pedida e retorna as capturas.

    Raises:
        ConfigError: Rodada ou usuario fora do intervalo.
    """
    for t, user in captures:
        if not 0 <= t < cfg.rounds or not 0 <= user < cfg.users:
            raise ConfigError(f"Captura fora do intervalo: rodada {t}, usuario {user}")
    if not captures:
        return {}
    simulator = CollaborativeSimulator(cfg, set(captures))
    for _ in simulator.iter_rounds(max(t for t, _ in captures) + 1):
        pass
    return simulator.captures


def snapshot_gradients(cfg: RunConfig, t: int, user: int) -> Tuple[GradObservation, Batch]:
    """Mensagem enviada pelo usuario `user` na rodada `t` e o lote verdadeiro, por replay."""
    capture = replay(cfg, {(t, user)})[(t, user)]
    return capture.observation(), capture.batch


@dataclass
class DistanceSweep:
    """Resultado da varredura distancia relativa x qualidade do ataque."""

    rows: List[Dict[str, object]] = field(default_factory=list)
    spearman: Optional[float] = None


def _candidate_wires(grads: GradientSet) -> List[Tuple[str, SparseGradient]]:
    fractions = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
    candidates = []
    for k1 in fractions:
        for k2 in fractions:
            if k1 + k2 < 1.0:
                candidates.append((f"dgp:{k1!r},{k2!r}", dgp_prune(grads, DgpConfig(k1, k2))))
        candidates.append((f"top:{k1!r}", top_prune(grads, k1)))
    return candidates


def distance_sweep(cfg: RunConfig, targets: Sequence[float], attack_cfg: Optional[OptAttackConfig] = None,
                   round_index: int = 0, user: int = 0, tolerance: float = 0.05) -> DistanceSweep:
    """Relacao entre a distancia relativa ||grad - g|| / ||grad|| e a qualidade do ataque.

    Para cada alvo, escolhe entre configuracoes DGP e de remocao pura do topo
    a de razao mais proxima (dentro de +-tolerance), executa `opt_attack` e
    registra MSE/PSNR/SSIM. Alvos inalcancaveis geram linhas vazias.

    Raises:
        ValueError: Alvo fora de (0, 1).
    """
    if any(not 0.0 <= target < 1.0 for target in targets):
        raise ValueError("Alvos de distancia relativa devem estar em [0, 1)")
    attack_cfg = attack_cfg or OptAttackConfig()
    observation, truth = snapshot_gradients(cfg, round_index, user)
    _, grads = loss_and_grad(observation.model, truth)
    candidates = [(name, wire, relative_distance(grads, wire)) for name, wire in _candidate_wires(grads)]
    sweep = DistanceSweep()
    for index, target in enumerate(targets):
        name, wire, ratio = min(candidates, key=lambda c: (abs(c[2] - target), c[0]))
        if abs(ratio - target) > tolerance:
            logger.warning(f"Alvo {target} inalcancavel (mais proximo {ratio:.3f})")
            sweep.rows.append({'target': target, 'achieved': None, 'defense': None,
                               'mse': None, 'psnr': None, 'ssim': None})
            continue
        obs = GradObservation.from_wire(observation.model, wire, truth.size, observation.snapshot_id)
        report = opt_attack(obs, attack_cfg, Rng.stream(cfg.seed, 'attack', index), truth)
        scores = report.scores[0].to_dict() if report.scores else {'mse': None, 'psnr': None, 'ssim': None}
        sweep.rows.append({'target': target, 'achieved': ratio, 'defense': name, **scores})
    filled = [row for row in sweep.rows if row['achieved'] is not None]
    if len(filled) >= 3:
        rho = spearmanr([row['achieved'] for row in filled], [row['mse'] for row in filled]).correlation
        sweep.spearman = None if np.isnan(rho) else float(rho)
    return sweep


def _sweep_defense(param: str, value: float, base: DefenseConfig) -> DefenseConfig:
    if param == 'sum_k':
        p = base.p if base.name == 'dgp' and base.k2 > 0 else 1.0 / 15.0
        dgp = DgpConfig.from_sum_and_ratio(value, p)
    elif param == 'p':
        sum_k = base.k1 + base.k2 if base.name == 'dgp' else 0.8
        dgp = DgpConfig.from_sum_and_ratio(sum_k, value)
    else:
        raise ConfigError(f"Parametro de varredura desconhecido: {param}")
    return DefenseConfig('dgp', k1=round(dgp.k1, 12), k2=round(dgp.k2, 12))


def parameter_sweep(cfg: RunConfig, param: str, values: Sequence[float], attack: str = 'opt',
                    attack_cfg: Optional[OptAttackConfig] = None) -> List[Dict[str, object]]:
    """Impacto de k1 + k2 ('sum_k', com p fixo) ou de p ('p', com k1 + k2 fixo).

    Para cada valor treina o modelo (acuracia final) e ataca a mensagem do
    usuario 0 na rodada 0 com o ataque escolhido ('opt' ou 'imprint').

    Returns:
        list: Linhas {value, defense, attack_ssim, attack_mse, final_accuracy}.
    """
    rows = []
    if attack == 'imprint':
        bins = cfg.imprint_bins or ATTACK_DEFAULTS['imprint_batch']
        cfg = cfg.with_overrides(imprint_bins=bins, batch_size=min(cfg.batch_size, ATTACK_DEFAULTS['imprint_batch']))
    elif attack != 'opt':
        raise ConfigError(f"Ataque de varredura desconhecido: {attack}")
    for value in values:
        run_cfg = cfg.with_overrides(defense=_sweep_defense(param, float(value), cfg.defense))
        simulator = CollaborativeSimulator(run_cfg, {(0, 0)})
        simulator.run()
        capture = simulator.captures[(0, 0)]
        if attack == 'imprint':
            report = imprint_attack(capture.observation(), true_batch=capture.batch)
        else:
            report = opt_attack(capture.observation(), attack_cfg or OptAttackConfig(),
                                Rng.stream(cfg.seed, 'attack'), capture.batch)
        rows.append({
            'value': float(value),
            'defense': run_cfg.defense.compact(),
            'attack_ssim': report.mean_ssim if report.success else None,
            'attack_mse': report.mean_mse if report.success else None,
            'final_accuracy': simulator.evaluate(),
        })
        logger.info(f"Varredura {param}={value}: {rows[-1]}")
    return rows
