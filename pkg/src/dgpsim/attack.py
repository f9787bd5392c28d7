"""
Ataques de inversao de gradiente usados para avaliar as defesas.

- `infer_label`: rotulo pelo sinal do gradiente da ultima camada (B = 1).
- `bias_attack`: x' = grad W_j / grad b_j na primeira camada.
- `opt_attack`: casamento de gradientes por otimizacao (Adam) com distancia
  euclidiana ou cosseno, calculada apenas sobre as posicoes observadas.
- `imprint_attack`: diferencas entre linhas adjacentes do modulo imprint.
"""

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import softmax

from . import custom_logging as logging
from .config import ATTACK_DEFAULTS
from .defense import SparseGradient
from .exceptions import ConfigError, InapplicableAttackError
from .metrics import QualityScores, image_quality
from .model import (Batch, GradientSet, ImprintSpec, MlpModel, bias_id, gradient_map, gradient_vjp, one_hot,
                    weight_id)
from .numerics import AdamState, Rng, adam_step, gaussian, step_decay

logger = logging.getLogger(__name__)


@dataclass
class GradObservation:
    """O que o atacante ve: gradientes (densificados) e as posicoes presentes.

    Attributes:
        model (MlpModel): Modelo no qual o gradiente foi calculado.
        grads (GradientSet): Valores observados (zero nas posicoes ausentes).
        mask (dict): Posicoes observadas por tensor.
        batch_size (int): Tamanho do lote conhecido pelo atacante.
        snapshot_id (str): Identificador da captura (rodada/usuario).
    """

    model: MlpModel
    grads: GradientSet
    mask: Dict[str, np.ndarray]
    batch_size: int = 1
    snapshot_id: str = ''

    def __post_init__(self):
        self.model.params().check_compatible(self.grads)

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    @classmethod
    def from_wire(cls, model: MlpModel, wire: SparseGradient, batch_size: int = 1,
                  snapshot_id: str = '') -> 'GradObservation':
        return cls(model, wire.densify(), wire.mask(), batch_size, snapshot_id)

    @classmethod
    def from_grads(cls, model: MlpModel, grads: GradientSet, batch_size: int = 1,
                   snapshot_id: str = '') -> 'GradObservation':
        mask = {key: np.ones(value.shape, dtype=bool) for key, value in grads.items()}
        return cls(model, grads, mask, batch_size, snapshot_id)

    def scaled(self, factor: float) -> 'GradObservation':
        return replace(self, grads=self.grads.scale(factor))

    def observed_fraction(self) -> float:
        total = sum(m.size for m in self.mask.values())
        return sum(int(m.sum()) for m in self.mask.values()) / total


@dataclass
class AttackReport:
    """Resultado de um ataque.

    Attributes:
        attack (str): Nome do ataque.
        success (bool): Falso quando o ataque nao produziu candidato.
        recovered (list): Entradas reconstruidas (uma por amostra).
        labels (list): Rotulos inferidos ou assumidos (None = indecidivel).
        distance_euclidean (float, optional): Distancia final ao gradiente observado.
        distance_cosine (float, optional): Idem, em cosseno.
        scores (list): QualityScores por amostra contra a verdade (se fornecida).
        iterations (int): Iteracoes de otimizacao usadas.
        wall_time (float): Segundos; nunca serializado.
        reason (str): Motivo da falha ou observacao.
    """

    attack: str
    success: bool = True
    recovered: List[np.ndarray] = field(default_factory=list)
    labels: List[Optional[int]] = field(default_factory=list)
    distance_euclidean: Optional[float] = None
    distance_cosine: Optional[float] = None
    scores: List[QualityScores] = field(default_factory=list)
    iterations: int = 0
    wall_time: float = 0.0
    reason: str = ''
    extra: Dict[str, object] = field(default_factory=dict)

    @property
    def mean_mse(self) -> float:
        return float(np.mean([s.mse for s in self.scores])) if self.scores else float('nan')

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.scores])) if self.scores else float('nan')

    def to_dict(self) -> Dict[str, object]:
        """Forma serializavel e determinista (sem wall_time)."""
        return {
            'attack': self.attack,
            'success': self.success,
            'reason': self.reason,
            'labels': list(self.labels),
            'distance_euclidean': self.distance_euclidean,
            'distance_cosine': self.distance_cosine,
            'iterations': self.iterations,
            'scores': [s.to_dict() for s in self.scores],
            'recovered': [np.asarray(x).tolist() for x in self.recovered],
            'extra': dict(self.extra),
        }


@dataclass(frozen=True)
class OptAttackConfig:
    """Hiperparametros do ataque por otimizacao (ver ATTACK_DEFAULTS)."""

    distance: str = ATTACK_DEFAULTS['distance']
    iterations: int = ATTACK_DEFAULTS['iterations']
    lr: float = ATTACK_DEFAULTS['lr']
    init: str = ATTACK_DEFAULTS['init']
    grad_provider: str = ATTACK_DEFAULTS['grad_provider']
    restarts: int = ATTACK_DEFAULTS['restarts']
    clamp: bool = ATTACK_DEFAULTS['clamp']
    init_mean: float = ATTACK_DEFAULTS['init_mean']
    init_std: float = ATTACK_DEFAULTS['init_std']
    decay_points: Tuple[float, ...] = ATTACK_DEFAULTS['lr_decay_points']
    decay_factor: float = ATTACK_DEFAULTS['lr_decay_factor']
    tol: float = ATTACK_DEFAULTS['tol']
    finite_diff_h: float = ATTACK_DEFAULTS['finite_diff_h']

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations deve ser >= 1")
        if self.lr <= 0:
            raise ConfigError("lr do ataque deve ser positivo")
        if self.restarts < 1:
            raise ConfigError("restarts deve ser >= 1")
        if self.distance not in ('euclidean', 'cosine'):
            raise ConfigError(f"Distancia desconhecida: {self.distance}")
        if self.init not in ('zeros', 'gaussian'):
            raise ConfigError(f"Inicializacao desconhecida: {self.init}")
        if self.grad_provider not in ('finite_diff', 'double_backprop'):
            raise ConfigError(f"Provedor de gradiente desconhecido: {self.grad_provider}")


def infer_label(obs: GradObservation) -> Optional[int]:
    """Rotulo pela entrada negativa do gradiente do vies da ultima camada.

    Para B = 1, dl/db_i = softmax_i - 1{i=y} e negativo apenas em y. Se o vies
    foi podado, usa a linha de grad W^L com a soma (observada) mais negativa.

    Returns:
        int | None: Classe inferida, ou None quando indecidivel.
    """
    last = obs.model.layer_count - 1
    gb, mb = obs.grads[bias_id(last)], obs.mask[bias_id(last)]
    observed_bias = np.where(mb, gb, np.inf)
    if np.any(observed_bias < 0):
        return int(np.argmin(observed_bias))
    gw, mw = obs.grads[weight_id(last)], obs.mask[weight_id(last)]
    row_sums = np.where(mw, gw, 0.0).sum(axis=1)
    if np.any(mw.any(axis=1)) and np.min(row_sums) < 0:
        return int(np.argmin(row_sums))
    return None


def _score(recovered: List[np.ndarray], true_batch: Optional[Batch]) -> List[QualityScores]:
    if true_batch is None:
        return []
    return [image_quality(true_batch.inputs[i], recovered[i]) for i in range(min(len(recovered), true_batch.size))]


def _masked_pair(obs: GradObservation, candidate: GradientSet) -> Tuple[np.ndarray, np.ndarray]:
    mask = np.concatenate([obs.mask[key].ravel() for key in obs.grads])
    return candidate.flatten()[mask], obs.grads.flatten()[mask]


def _distances(obs: GradObservation, candidate: GradientSet) -> Tuple[float, float]:
    a, b = _masked_pair(obs, candidate)
    norms = np.linalg.norm(a) * np.linalg.norm(b)
    cosine = 1.0 if norms == 0 else float(1.0 - np.dot(a, b) / norms)
    return float(np.linalg.norm(a - b)), cosine


def bias_attack(obs: GradObservation, true_batch: Optional[Batch] = None, tol: float = 1e-12) -> AttackReport:
    """Reconstrucao analitica pela primeira camada: x' = grad W_j / grad b_j.

    Escolhe a linha observada com o maior |grad b_j|. Entradas de peso nao
    observadas ficam zero na reconstrucao.

    Raises:
        InapplicableAttackError: Mensagem de um lote com mais de uma amostra.
    """
    if obs.batch_size != 1:
        raise InapplicableAttackError(f"Ataque pelo vies exige B = 1 (lote com {obs.batch_size} amostras)")
    start = time.perf_counter()
    gw, mw = obs.grads[weight_id(0)], obs.mask[weight_id(0)]
    gb, mb = obs.grads[bias_id(0)], obs.mask[bias_id(0)]
    magnitude = np.where(mb, np.abs(gb), 0.0)
    if magnitude.max(initial=0.0) <= tol:
        return AttackReport('bias', success=False, reason='todos os |grad b_j| <= tol',
                            wall_time=time.perf_counter() - start)
    row = int(np.argmax(magnitude))
    recovered = np.where(mw[row], gw[row], 0.0) / gb[row]
    label = infer_label(obs)
    report = AttackReport('bias', recovered=[recovered], labels=[label], scores=_score([recovered], true_batch),
                          extra={'row': row})
    if label is not None:
        candidate = gradient_map(obs.model, recovered[None, :], one_hot([label], obs.num_classes))
        report.distance_euclidean, report.distance_cosine = _distances(obs, candidate)
    report.wall_time = time.perf_counter() - start
    return report


def attack_loss(model: MlpModel, x: np.ndarray, targets: np.ndarray, obs: GradObservation,
                distance: str = 'euclidean') -> float:
    """Perda de casamento de gradientes sobre as posicoes observadas.

    Euclidiana: soma dos quadrados das diferencas. Cosseno: 1 - cos, com
    norma zero valendo 1.
    """
    a, b = _masked_pair(obs, gradient_map(model, x, targets))
    if distance == 'euclidean':
        return float(np.sum((a - b) ** 2))
    norms = np.linalg.norm(a) * np.linalg.norm(b)
    return 1.0 if norms == 0 else float(1.0 - np.dot(a, b) / norms)


def _loss_cotangent(obs: GradObservation, grads: GradientSet, distance: str) -> Tuple[float, GradientSet]:
    tensors, loss = {}, 0.0
    if distance == 'euclidean':
        for key, value in grads.items():
            diff = np.where(obs.mask[key], value - obs.grads[key], 0.0)
            loss += float(np.sum(diff ** 2))
            tensors[key] = 2.0 * diff
        return loss, GradientSet(tensors)
    a, b = _masked_pair(obs, grads)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        return 1.0, grads.zeros_like()
    cos = float(np.dot(a, b) / (norm_a * norm_b))
    for key, value in grads.items():
        mask = obs.mask[key]
        ga = np.where(mask, value, 0.0)
        gb = np.where(mask, obs.grads[key], 0.0)
        tensors[key] = -(gb / (norm_a * norm_b) - cos * ga / norm_a ** 2)
    return 1.0 - cos, GradientSet(tensors)


def attack_grad(provider: str, model: MlpModel, x: np.ndarray, targets: np.ndarray, obs: GradObservation,
                distance: str = 'euclidean', h: float = ATTACK_DEFAULTS['finite_diff_h']
                ) -> Tuple[float, np.ndarray, np.ndarray]:
    """Gradiente da perda de ataque em relacao a x* (e aos alvos suaves q*).

    Args:
        provider (str): 'double_backprop' (exato, pelo backward analitico) ou
            'finite_diff' (diferencas centrais com passo h por dimensao).
        model (MlpModel): Modelo observado.
        x (np.ndarray): Entradas candidatas [B x d].
        targets (np.ndarray): Distribuicoes-alvo [B x C].
        obs (GradObservation): Gradiente observado.
        distance (str): 'euclidean' ou 'cosine'.

    Returns:
        tuple: (perda, d/dx, d/dq).
    """
    x = np.atleast_2d(x)
    targets = np.atleast_2d(targets)
    if provider == 'double_backprop':
        grads = gradient_map(model, x, targets)
        loss, cotangent = _loss_cotangent(obs, grads, distance)
        _, dx, dq = gradient_vjp(model, x, targets, cotangent)
        return loss, dx, dq
    if provider != 'finite_diff':
        raise ValueError(f"Provedor desconhecido: {provider}")
    loss = attack_loss(model, x, targets, obs, distance)
    dx, dq = np.zeros_like(x), np.zeros_like(targets)
    for arr, out, is_x in ((x, dx, True), (targets, dq, False)):
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += h
            minus[idx] -= h
            args_p = (plus, targets) if is_x else (x, plus)
            args_m = (minus, targets) if is_x else (x, minus)
            out[idx] = (attack_loss(model, *args_p, obs, distance)
                        - attack_loss(model, *args_m, obs, distance)) / (2 * h)
    return loss, dx, dq


def _initial_point(cfg: OptAttackConfig, shape, rng: Rng) -> np.ndarray:
    if cfg.init == 'zeros':
        return np.zeros(shape)
    return gaussian(rng, shape, cfg.init_mean, cfg.init_std)


def opt_attack(obs: GradObservation, cfg: OptAttackConfig, rng: Rng, true_batch: Optional[Batch] = None,
               init_point: Optional[np.ndarray] = None) -> AttackReport:
    """Ataque por otimizacao: Adam sobre x* minimizando D(g(x*), observado).

    O rotulo vem de `infer_label` quando B = 1; se indecidivel (ou B > 1), os
    logits dos alvos sao otimizados junto. O passo decai em degraus e x* e
    projetado em [0, 1] quando `clamp`. Reinicios com perda nao finita sao
    descartados; retorna o melhor ponto entre os reinicios.

    Args:
        obs (GradObservation): Gradiente observado.
        cfg (OptAttackConfig): Hiperparametros.
        rng (Rng): Fluxo 'attack' (inicializacoes).
        true_batch (Batch, optional): Verdade usada apenas para pontuar.
        init_point (np.ndarray, optional): Ponto inicial do primeiro reinicio.

    Returns:
        AttackReport: Melhor reconstrucao.
    """
    start = time.perf_counter()
    model = obs.model
    shape = (obs.batch_size, model.input_dim)
    label = infer_label(obs) if obs.batch_size == 1 else None
    joint = label is None
    fixed_targets = None if joint else one_hot([label], model.num_classes)
    best_loss, best_x, best_targets, used = np.inf, None, None, 0
    for restart in range(cfg.restarts):
        if restart == 0 and init_point is not None:
            x = np.asarray(init_point, dtype=np.float64).reshape(shape).copy()
        else:
            x = _initial_point(cfg, shape, rng)
        logits = np.zeros((obs.batch_size, model.num_classes))
        x_state, s_state = AdamState.zeros_like(x), AdamState.zeros_like(logits)
        restart_best = np.inf
        for iteration in range(cfg.iterations):
            targets = softmax(logits, axis=1) if joint else fixed_targets
            loss, dx, dq = attack_grad(cfg.grad_provider, model, x, targets, obs, cfg.distance, cfg.finite_diff_h)
            used += 1
            if not np.isfinite(loss) or not np.all(np.isfinite(dx)):
                logger.warning(f"Perda nao finita no reinicio {restart}, iteracao {iteration}")
                break
            if loss < restart_best:
                restart_best = loss
            if loss < best_loss:
                best_loss, best_x, best_targets = loss, x.copy(), targets.copy()
            if loss <= cfg.tol:
                break
            lr = step_decay(cfg.lr, iteration / cfg.iterations, cfg.decay_points, cfg.decay_factor)
            x = x - adam_step(x_state, dx, lr)
            if cfg.clamp:
                x = np.clip(x, 0.0, 1.0)
            if joint:
                ds = targets * (dq - np.sum(targets * dq, axis=1, keepdims=True))
                logits = logits - adam_step(s_state, ds, lr)
        logger.debug(f"Reinicio {restart}: melhor perda {restart_best:.3e}")
        if best_loss <= cfg.tol:
            break
    elapsed = time.perf_counter() - start
    if best_x is None:
        return AttackReport('opt', success=False, reason='todos os reinicios com perda nao finita',
                            iterations=used, wall_time=elapsed)
    labels = [label] if not joint else [int(i) for i in np.argmax(best_targets, axis=1)]
    recovered = list(best_x)
    report = AttackReport('opt', recovered=recovered, labels=labels, iterations=used, wall_time=elapsed,
                          scores=_score(recovered, true_batch),
                          extra={'distance': cfg.distance, 'best_loss': float(best_loss), 'joint_label': joint})
    candidate = gradient_map(model, best_x, best_targets)
    report.distance_euclidean, report.distance_cosine = _distances(obs, candidate)
    return report


def _match_to_truth(candidates: List[np.ndarray], truth: np.ndarray) -> List[np.ndarray]:
    """Associa candidatos as amostras verdadeiras (MSE minimo); sem par vira imagem zero."""
    cost = np.array([[np.mean((t - c) ** 2) for c in candidates] for t in truth])
    rows, cols = linear_sum_assignment(cost)
    matched = [np.zeros(truth.shape[1]) for _ in range(truth.shape[0])]
    for r, c in zip(rows, cols):
        matched[r] = candidates[c]
    return matched


def imprint_attack(obs: GradObservation, spec: Optional[ImprintSpec] = None, true_batch: Optional[Batch] = None,
                   tol: float = 1e-12) -> AttackReport:
    """Recupera entradas pelas diferencas entre linhas adjacentes do imprint.

    Para cada par (k, k+1) com |grad b_k - grad b_{k+1}| > tol:
    x'_k = (grad W_k - grad W_{k+1}) / (grad b_k - grad b_{k+1}); a ultima linha
    usa grad W_R / grad b_R. Posicoes nao observadas contam como zero.

    Raises:
        InapplicableAttackError: Modelo sem modulo imprint.
    """
    start = time.perf_counter()
    spec = spec or obs.model.imprint
    if spec is None or obs.model.imprint is None:
        raise InapplicableAttackError("Ataque imprint exige um modelo com modulo imprint")
    bins, d = spec.bins, spec.measurement.size
    gw = np.where(obs.mask[weight_id(0)], obs.grads[weight_id(0)], 0.0)[:bins, :d]
    gb = np.where(obs.mask[bias_id(0)], obs.grads[bias_id(0)], 0.0)[:bins]
    candidates, bins_used = [], []
    for k in range(bins):
        if k < bins - 1:
            denominator = gb[k] - gb[k + 1]
            numerator = gw[k] - gw[k + 1]
        else:
            denominator, numerator = gb[k], gw[k]
        if abs(denominator) > tol:
            candidates.append(numerator / denominator)
            bins_used.append(k)
    if not candidates:
        return AttackReport('imprint', success=False, reason='nenhum bin com denominador acima de tol',
                            wall_time=time.perf_counter() - start)
    recovered = candidates if true_batch is None else _match_to_truth(candidates, true_batch.inputs)
    return AttackReport('imprint', recovered=recovered, scores=_score(recovered, true_batch),
                        wall_time=time.perf_counter() - start, extra={'bins_used': bins_used})
