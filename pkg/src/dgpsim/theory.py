"""
Verificacao executavel das garantias formais da poda dupla.

Cada verificacao produz um `BoundReport` com status:
    pass     - medida dentro do limite (com a tolerancia declarada)
    fail     - limite violado
    flagged  - diagnostico suave fora da folga (limite da reconstrucao)
    flat     - tendencia degenerada (ex.: lr = 0)
    invalid  - premissa falsa (gamma >= 1, divergencia, jacobiano nulo)
    skipped  - nenhuma amostra aplicavel

Attributes:
    THEORY_TOLERANCES (dict): Folgas usadas (ver config).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import curve_fit

from . import custom_logging as logging
from .config import THEORY_TOLERANCES
from .defense import DgpConfig, dgp_prune
from .model import GradientSet, MlpModel, gradient_map, gradient_vjp, one_hot
from .numerics import Rng, gaussian

logger = logging.getLogger(__name__)

STATUSES = ('pass', 'fail', 'flagged', 'flat', 'invalid', 'skipped')


@dataclass
class BoundReport:
    """Resultado de uma verificacao.

    Attributes:
        claim_id (str): Identificador da garantia verificada.
        status (str): Um de STATUSES.
        measured (float, optional): Quantidade medida.
        bound (float, optional): Valor do limite.
        inputs (dict): Entradas usadas (gamma1, G2, lr, T, ...).
        notes (list): Observacoes (amostras puladas, discrepancias).
    """

    claim_id: str
    status: str
    measured: Optional[float] = None
    bound: Optional[float] = None
    inputs: Dict[str, object] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"Status desconhecido: {self.status}")

    @property
    def satisfied(self) -> bool:
        return self.status == 'pass'

    def to_dict(self) -> Dict[str, object]:
        return {
            'kind': 'bound',
            'claim_id': self.claim_id,
            'status': self.status,
            'pass': self.satisfied,
            'measured': self.measured,
            'bound': self.bound,
            'inputs': dict(self.inputs),
            'notes': list(self.notes),
        }


def assumption1_lower_bound(k1: float, k2: float) -> float:
    """(1 - sqrt(1 - k1 k2))^2, limite inferior da razao de poda."""
    return (1.0 - np.sqrt(1.0 - k1 * k2)) ** 2


def lemma1_bound(gamma1: float, grad_sq: float) -> float:
    """3 gamma (2 + gamma) / (2 (1 - gamma)^2) * G^2.

    Raises:
        ValueError: gamma fora de [0, 1).

    Example:
        >>> lemma1_bound(0.5, 1.0)
        7.5
    """
    if not 0.0 <= gamma1 < 1.0:
        raise ValueError(f"gamma1 deve estar em [0, 1): {gamma1}")
    return 3.0 * gamma1 * (2.0 + gamma1) / (2.0 * (1.0 - gamma1) ** 2) * grad_sq


def theorem1_epsilon(epsilon: float, gamma1: float, grad_norm: float = 0.0, metric: str = 'euclidean') -> float:
    """Precisao degradada de um ataque passivo contra gradientes podados.

    euclidiana: eps + sqrt(gamma) ||grad W||; cosseno: eps + (1 - eps) sqrt(gamma).

    Raises:
        ValueError: eps < 0, gamma fora de [0, 1) ou metrica desconhecida.
    """
    if epsilon < 0:
        raise ValueError("epsilon deve ser >= 0")
    if not 0.0 <= gamma1 < 1.0:
        raise ValueError(f"gamma1 deve estar em [0, 1): {gamma1}")
    if metric == 'euclidean':
        return epsilon + np.sqrt(gamma1) * grad_norm
    if metric == 'cosine':
        return epsilon + (1.0 - epsilon) * np.sqrt(gamma1)
    raise ValueError(f"Metrica desconhecida: {metric}")


check_theorem1 = theorem1_epsilon


def theorem2_rhs(loss_gap: float, lr: float, rounds: int, smoothness: float, grad_sq: float,
                 sigma_sq: float, gamma1: float) -> float:
    """Lado direito do limite de convergencia da media de ||grad l(W_t)||^2.

    4 (l0 - l*) / (lr T) + 2 K lr (G^2 + sigma^2) + 4 lr^2 K^2 * lemma1_bound(gamma, G^2).
    """
    return (4.0 * loss_gap / (lr * rounds)
            + 2.0 * smoothness * lr * (grad_sq + sigma_sq)
            + 4.0 * lr ** 2 * smoothness ** 2 * lemma1_bound(gamma1, grad_sq))


def corollary2_learning_rate(loss_gap: float, smoothness: float, rounds: int, grad_sq: float,
                             sigma_sq: float) -> float:
    """lr = sqrt((l0 - l*) / (K T (G^2 + sigma^2))).

    A forma sem raiz, que aparece no enunciado, nao produz a taxa
    O(1/sqrt(T)) da demonstracao; usamos a forma com raiz.
    """
    logger.warning("corollary2: usando lr com raiz quadrada (forma da demonstracao), "
                   "diferente da forma sem raiz do enunciado")
    return float(np.sqrt(loss_gap / (smoothness * rounds * (grad_sq + sigma_sq))))


def _pruning_ratios(samples: Sequence[GradientSet], cfg: DgpConfig, notes: List[str]):
    ratios = []
    for index, sample in enumerate(samples):
        norm_sq = sample.sq_norm()
        if norm_sq == 0:
            notes.append(f"amostra {index}: gradiente nulo, pulada")
            continue
        wire = dgp_prune(sample, cfg)
        if wire.warnings:
            notes.append(f"amostra {index}: banda retida vazia, pulada")
            continue
        residual = (sample - wire.densify()).sq_norm()
        if residual == 0:
            notes.append(f"amostra {index}: poda identidade, garantia vacua")
            continue
        ratios.append((index, residual / norm_sq, np.sqrt(residual), np.sqrt(norm_sq)))
    return ratios


def check_assumption1(samples: Sequence[GradientSet], cfg: DgpConfig) -> BoundReport:
    """Faixa (1 - sqrt(1 - k1 k2))^2 < ||grad - DGP(grad)||^2 / ||grad||^2 < 1.

    Amostras degeneradas sao puladas com nota; o maior valor e o gamma1 empirico.
    """
    notes: List[str] = []
    lower = assumption1_lower_bound(cfg.k1, cfg.k2)
    ratios = _pruning_ratios(samples, cfg, notes)
    inputs = {'k1': cfg.k1, 'k2': cfg.k2, 'lower': lower, 'upper': 1.0, 'samples': len(samples)}
    if not ratios:
        return BoundReport('assumption1', 'skipped', inputs=inputs, notes=notes)
    violations = [i for i, ratio, _, _ in ratios if not lower < ratio < 1.0]
    for index in violations:
        notes.append(f"amostra {index}: razao fora da faixa")
    gamma1 = max(ratio for _, ratio, _, _ in ratios)
    inputs['gamma1'] = gamma1
    return BoundReport('assumption1', 'fail' if violations else 'pass', gamma1, lower, inputs, notes)


def check_theorem1_companion(samples: Sequence[GradientSet], cfg: DgpConfig,
                             rtol: float = 1e-12) -> BoundReport:
    """||DGP(grad) - grad|| <= sqrt(gamma1) ||grad|| com gamma1 empirico das mesmas amostras."""
    notes: List[str] = []
    ratios = _pruning_ratios(samples, cfg, notes)
    if not ratios:
        return BoundReport('theorem1', 'skipped', notes=notes)
    gamma1 = max(ratio for _, ratio, _, _ in ratios)
    worst = max(residual - np.sqrt(gamma1) * norm for _, _, residual, norm in ratios)
    ok = all(residual <= np.sqrt(gamma1) * norm * (1 + rtol) for _, _, residual, norm in ratios)
    return BoundReport('theorem1', 'pass' if ok else 'fail', float(worst), 0.0, {'gamma1': gamma1}, notes)


def _usable(records: Sequence[Dict[str, object]]) -> List[Dict[str, object]]:
    return [r for r in records if r.get('kind', 'round') == 'round']


def check_lemma1(records: Sequence[Dict[str, object]], rtol: float = 1e-9) -> BoundReport:
    """Media de ||e_{t,i}||^2 <= 3 gamma (2 + gamma) / (2 (1 - gamma)^2) G^2 em toda rodada.

    gamma1 e o maior ||P - g||^2 / ||P||^2 observado; G^2 o maior ||grad W_{t,i}||^2.

    Args:
        records (list): RunRecords (como dicionarios) de uma execucao.
    """
    rounds = _usable(records)
    if not rounds:
        return BoundReport('lemma1', 'skipped', notes=['nenhuma rodada'])
    if any(r.get('diverged') for r in rounds):
        return BoundReport('lemma1', 'invalid', notes=['execucao divergiu'])
    if not all(r.get('error_feedback') for r in rounds):
        return BoundReport('lemma1', 'skipped', notes=['execucao sem realimentacao de erro'])
    gamma1 = max(float(r['gamma_max']) for r in rounds)
    grad_sq = max(float(r['grad_sq_max']) for r in rounds)
    measured = max(float(r['error_sq_users']) for r in rounds)
    inputs = {'gamma1': gamma1, 'G2': grad_sq, 'rounds': len(rounds)}
    if gamma1 >= 1.0:
        return BoundReport('lemma1', 'invalid', measured, None, inputs, ['gamma1 >= 1: premissa falsa'])
    bound = lemma1_bound(gamma1, grad_sq)
    bad = [r['round'] for r in rounds if float(r['error_sq_users']) > bound * (1 + rtol)]
    notes = [f"violado nas rodadas {bad[:10]}"] if bad else []
    return BoundReport('lemma1', 'fail' if bad else 'pass', measured, bound, inputs, notes)


def _gradient_vector(model: MlpModel, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return gradient_map(model, x[None, :], targets).flatten()


def check_prop1(model: MlpModel, x: np.ndarray, x_rec: np.ndarray, label: int, rng: Rng,
                slack: float = THEORY_TOLERANCES['prop1_slack']) -> BoundReport:
    """Limite inferior ||phi(x) - phi(x')|| / ||d phi / dx|| contra ||x - x'|| (B = 1).

    A norma do jacobiano e estimada por iteracao de potencia sobre J^T J,
    com J v por diferencas finitas centrais e J^T u pelo VJP analitico.
    Violacoes acima da folga sao sinalizadas ('flagged'), nunca reprovadas.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    x_rec = np.asarray(x_rec, dtype=np.float64).ravel()
    targets = one_hot([label], model.num_classes)
    h = THEORY_TOLERANCES['prop1_h']
    shapes = model.params().shapes()
    measured = float(np.linalg.norm(x - x_rec))
    numerator = float(np.linalg.norm(_gradient_vector(model, x, targets) - _gradient_vector(model, x_rec, targets)))
    v = gaussian(rng, x.size)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(THEORY_TOLERANCES['power_iterations']):
        jv = (_gradient_vector(model, x + h * v, targets) - _gradient_vector(model, x - h * v, targets)) / (2 * h)
        sigma = float(np.linalg.norm(jv))
        if sigma == 0:
            break
        _, jtjv, _ = gradient_vjp(model, x[None, :], targets, GradientSet.from_flat(jv, shapes))
        norm = np.linalg.norm(jtjv)
        if norm == 0:
            break
        v = jtjv.ravel() / norm
    inputs = {'jacobian_norm': sigma, 'gradient_gap': numerator}
    if measured == 0 and numerator == 0:
        return BoundReport('prop1', 'pass', 0.0, 0.0, inputs)
    if sigma == 0:
        return BoundReport('prop1', 'invalid', measured, None, inputs, ['norma do jacobiano nula: limite indefinido'])
    bound = numerator / sigma
    status = 'pass' if bound <= measured * (1 + slack) else 'flagged'
    return BoundReport('prop1', status, measured, bound, inputs)


def _prefix_means(values: np.ndarray, points: int) -> tuple:
    lengths = np.unique(np.linspace(1, values.size, num=min(points, values.size)).round().astype(int))
    cumulative = np.cumsum(values)
    return lengths, cumulative[lengths - 1] / lengths


def _final_mean(values: np.ndarray, window: float) -> float:
    count = max(1, int(np.ceil(window * values.size)))
    return float(np.mean(values[-count:]))


def check_convergence(run_dgp: Sequence[Dict[str, object]], run_sgd: Sequence[Dict[str, object]]) -> BoundReport:
    """Tendencia de convergencia e comparacao pareada com o SGD colaborativo.

    (a) Ajusta a media acumulada de ||grad l(W_t)||^2 a c / sqrt(T) + d e exige
    c > 0 (tendencia decrescente); serie constante resulta em 'flat'.
    (b) Exige media final (ultimos 10% das rodadas) da execucao com defesa
    <= 2x a do SGD.
    """
    dgp, sgd = _usable(run_dgp), _usable(run_sgd)
    if any(r.get('diverged') for r in dgp + sgd):
        return BoundReport('theorem2', 'invalid', notes=['execucao divergiu'])
    if not dgp or not sgd or any(r.get('full_grad_sq') is None for r in dgp + sgd):
        return BoundReport('theorem2', 'invalid', notes=['full_grad_sq ausente (track_full_gradient desligado?)'])
    values = np.array([float(r['full_grad_sq']) for r in dgp])
    baseline = np.array([float(r['full_grad_sq']) for r in sgd])
    window = THEORY_TOLERANCES['final_window']
    final_dgp, final_sgd = _final_mean(values, window), _final_mean(baseline, window)
    ratio_limit = THEORY_TOLERANCES['convergence_ratio']
    inputs = {'final_dgp': final_dgp, 'final_sgd': final_sgd, 'rounds': len(dgp)}
    if np.ptp(values) <= THEORY_TOLERANCES['flat_rtol'] * max(abs(values.mean()), np.finfo(float).tiny):
        return BoundReport('theorem2', 'flat', final_dgp, ratio_limit * final_sgd, inputs,
                           ['media do gradiente constante'])
    lengths, means = _prefix_means(values, THEORY_TOLERANCES['prefix_points'])
    notes = []
    try:
        (c, d), _ = curve_fit(lambda t, c, d: c / np.sqrt(t) + d, lengths.astype(float), means, p0=(means[0], 0.0))
    except (RuntimeError, ValueError) as e:
        c, d = float('nan'), float('nan')
        notes.append(f"ajuste falhou: {e}")
    inputs.update({'fit_c': float(c), 'fit_d': float(d)})
    decreasing = bool(np.isfinite(c) and c > 0)
    within = final_dgp <= ratio_limit * final_sgd
    if not decreasing:
        notes.append('tendencia nao decrescente')
    if not within:
        notes.append(f"final {final_dgp:.3e} > {ratio_limit} x SGD {final_sgd:.3e}")
    return BoundReport('theorem2', 'pass' if decreasing and within else 'fail',
                       final_dgp, ratio_limit * final_sgd, inputs, notes)
