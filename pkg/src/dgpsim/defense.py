"""
Defesas de gradiente aplicadas por cada usuario antes do envio.

Implementa Top-k, DGP (poda dupla: remove o topo k1 e a base k2 por tensor),
remocao pura do topo, ruido gaussiano (DP), a realimentacao de erro por
usuario e o protocolo alinhado ADGP, alem do formato de fio (wire format)
usado na contabilidade de bytes.

Regras de arredondamento (usadas pelos testes de contagem exata):
    - remocoes usam floor(k * n);
    - top-k mantem ceil(k * n);
    - empates de magnitude sao resolvidos pelo menor indice plano, numa unica
      ordenacao estavel, de modo que topo e base nunca se sobrepoem.
"""

import struct
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import custom_logging as logging
from .config import WIRE_FORMAT, DefenseConfig
from .exceptions import ConfigError, ShapeMismatchError
from .model import GradientSet
from .numerics import Rng, gaussian

logger = logging.getLogger(__name__)

_EPS_COUNT = 1e-9
_ENTRY_DTYPE = np.dtype([('index', '<u4'), ('value', '<f4')])


def floor_count(fraction: float, n: int) -> int:
    return int(np.floor(fraction * n + _EPS_COUNT))


def ceil_count(fraction: float, n: int) -> int:
    return min(n, int(np.ceil(fraction * n - _EPS_COUNT)))


def magnitude_ranking(values: np.ndarray) -> np.ndarray:
    """Indices planos ordenados por |valor| decrescente, empates pelo menor indice."""
    return np.argsort(-np.abs(values.ravel()), kind='stable')


@dataclass(frozen=True)
class DgpConfig:
    """Fracoes da poda dupla.

    Attributes:
        k1 (float): Fracao de maior magnitude removida, em [0, 1).
        k2 (float): Fracao de menor magnitude removida, em [0, 1).
    """

    k1: float
    k2: float

    def __post_init__(self):
        if not (0.0 <= self.k1 < 1.0 and 0.0 <= self.k2 < 1.0):
            raise ConfigError(f"k1/k2 fora de [0, 1): {self.k1}, {self.k2}")
        if self.k1 + self.k2 >= 1.0:
            raise ConfigError("k1 + k2 deve ser menor que 1 (banda retida vazia)")

    @property
    def p(self) -> float:
        if self.k2 <= 0:
            raise ValueError("p = k1/k2 indefinido para k2 = 0")
        return self.k1 / self.k2

    @property
    def sum_k(self) -> float:
        return self.k1 + self.k2

    @classmethod
    def from_sum_and_ratio(cls, sum_k: float, p: float) -> 'DgpConfig':
        """Constroi (k1, k2) a partir de k1 + k2 e p = k1/k2."""
        k2 = sum_k / (1.0 + p)
        return cls(sum_k - k2, k2)


@dataclass
class SparseGradient:
    """Mensagem de um usuario: entradas por tensor em indices planos crescentes.

    Internamente os valores ficam em float64; no fio viram float32. Entradas
    iguais a zero nunca sao armazenadas. `dense=True` marca mensagens densas
    (sem defesa ou DP), contabilizadas como 4 bytes por parametro.

    Attributes:
        shapes (dict): Formato denso de cada tensor, na ordem do modelo.
        indices (dict): Indices planos (int64, estritamente crescentes).
        values (dict): Valores correspondentes.
        dense (bool): Mensagem densa.
        warnings (list): Avisos nao fatais (ex.: banda vazia).
    """

    shapes: Dict[str, Tuple[int, ...]]
    indices: Dict[str, np.ndarray]
    values: Dict[str, np.ndarray]
    dense: bool = False
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        for key, shape in self.shapes.items():
            idx = np.asarray(self.indices.get(key, np.zeros(0)), dtype=np.int64)
            val = np.asarray(self.values.get(key, np.zeros(0)), dtype=np.float64)
            size = int(np.prod(shape, dtype=np.int64))
            if idx.shape != val.shape:
                raise ShapeMismatchError(f"{key}: {idx.size} indices para {val.size} valores")
            if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= size):
                raise ValueError(f"{key}: indices devem ser crescentes e dentro de [0, {size})")
            if np.any(val == 0.0):
                raise ValueError(f"{key}: zeros explicitos nao sao permitidos")
            self.indices[key] = idx
            self.values[key] = val

    @classmethod
    def from_selection(cls, source: GradientSet, selected: Mapping[str, np.ndarray],
                       dense: bool = False, warnings: Optional[List[str]] = None) -> 'SparseGradient':
        """Mantem, de cada tensor, as posicoes selecionadas que nao sao zero."""
        indices, values = {}, {}
        for key, tensor in source.items():
            flat = tensor.ravel()
            idx = np.sort(np.asarray(selected[key], dtype=np.int64))
            idx = idx[flat[idx] != 0.0]
            indices[key] = idx
            values[key] = flat[idx].copy()
        return cls(source.shapes(), indices, values, dense, list(warnings or []))

    @classmethod
    def from_dense(cls, source: GradientSet, dense: bool = True) -> 'SparseGradient':
        return cls.from_selection(source, {key: np.arange(t.size) for key, t in source.items()}, dense)

    def densify(self) -> GradientSet:
        tensors = {}
        for key, shape in self.shapes.items():
            flat = np.zeros(int(np.prod(shape, dtype=np.int64)))
            flat[self.indices[key]] = self.values[key]
            tensors[key] = flat.reshape(shape)
        return GradientSet(tensors)

    def mask(self) -> Dict[str, np.ndarray]:
        """Mascara booleana (formato denso) das posicoes presentes no fio.

        Mensagens densas cobrem todas as posicoes, inclusive zeros.
        """
        masks = {}
        for key, shape in self.shapes.items():
            flat = np.zeros(int(np.prod(shape, dtype=np.int64)), dtype=bool)
            if self.dense:
                flat[:] = True
            else:
                flat[self.indices[key]] = True
            masks[key] = flat.reshape(shape)
        return masks

    def nnz_per_tensor(self) -> Dict[str, int]:
        return {key: int(idx.size) for key, idx in self.indices.items()}

    @property
    def nnz(self) -> int:
        return int(sum(idx.size for idx in self.indices.values()))

    @property
    def param_count(self) -> int:
        return int(sum(int(np.prod(s, dtype=np.int64)) for s in self.shapes.values()))

    def dense_bytes(self) -> int:
        return WIRE_FORMAT['dense_value_bytes'] * self.param_count

    def sparse_bytes(self) -> int:
        entry = WIRE_FORMAT['index_bytes'] + WIRE_FORMAT['value_bytes']
        total = 0
        for key in self.shapes:
            header = WIRE_FORMAT['id_length_bytes'] + len(key.encode('utf-8')) + WIRE_FORMAT['count_bytes']
            total += header + entry * int(self.indices[key].size)
        return total

    def wire_bytes(self) -> int:
        return self.dense_bytes() if self.dense else self.sparse_bytes()

    def encode(self) -> bytes:
        """Serializa no formato de fio: por tensor, u8 len(id), id, u32 contagem, (u32 indice, f32 valor)*."""
        chunks = []
        for key in self.shapes:
            name = key.encode('utf-8')
            entries = np.empty(self.indices[key].size, dtype=_ENTRY_DTYPE)
            entries['index'] = self.indices[key]
            entries['value'] = self.values[key]
            chunks.append(struct.pack('<B', len(name)) + name + struct.pack('<I', entries.size))
            chunks.append(entries.tobytes())
        return b''.join(chunks)

    @classmethod
    def decode(cls, payload: bytes, shapes: Mapping[str, Tuple[int, ...]]) -> 'SparseGradient':
        """Inverso de `encode` (valores voltam como float32 promovido a float64)."""
        indices, values, offset = {}, {}, 0
        for _ in shapes:
            (length,) = struct.unpack_from('<B', payload, offset)
            offset += 1
            key = payload[offset:offset + length].decode('utf-8')
            offset += length
            (count,) = struct.unpack_from('<I', payload, offset)
            offset += 4
            entries = np.frombuffer(payload, dtype=_ENTRY_DTYPE, count=count, offset=offset)
            offset += entries.nbytes
            if key not in shapes:
                raise ShapeMismatchError(f"Tensor desconhecido no fio: {key}")
            indices[key] = entries['index'].astype(np.int64)
            values[key] = entries['value'].astype(np.float64)
        if offset != len(payload):
            raise ValueError("Bytes excedentes na mensagem")
        return cls(dict(shapes), indices, values)


class ErrorState:
    """Residuos por tensor da realimentacao de erro (e_0 = 0)."""

    def __init__(self, residual: GradientSet):
        self.residual = residual

    @classmethod
    def zeros(cls, like: GradientSet) -> 'ErrorState':
        return cls(like.zeros_like())

    def sq_norm(self) -> float:
        return self.residual.sq_norm()

    def __repr__(self):
        return f"ErrorState(norm={self.residual.norm():.4g})"


@dataclass
class LocationSet:
    """Mascara binaria de posicoes por tensor (conjunto I do ADGP).

    Attributes:
        masks (dict): Mascara booleana com o formato de cada tensor.
        leader (int, optional): Usuario que calculou o conjunto.
    """

    masks: Dict[str, np.ndarray]
    leader: Optional[int] = None

    def popcount(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks.values()))

    def popcount_per_tensor(self) -> Dict[str, int]:
        return {key: int(m.sum()) for key, m in self.masks.items()}

    def bitmask_bytes(self) -> int:
        return int(sum((m.size + 7) // 8 for m in self.masks.values()))

    def encode(self) -> bytes:
        return b''.join(np.packbits(m.ravel()).tobytes() for m in self.masks.values())

    def contains(self, wire: SparseGradient) -> bool:
        """Verdadeiro se todas as posicoes enviadas estao em I."""
        return all(bool(np.all(self.masks[key].ravel()[idx])) for key, idx in wire.indices.items())


def _band_selection(tensor: np.ndarray, n_top: int, n_bottom: int) -> np.ndarray:
    ranking = magnitude_ranking(tensor)
    return ranking[n_top:ranking.size - n_bottom]


def dgp_prune(grads: GradientSet, cfg: DgpConfig) -> SparseGradient:
    """Poda dupla por tensor: remove as floor(k1 n) maiores e as floor(k2 n) menores magnitudes.

    Args:
        grads (GradientSet): Gradiente (ou P compensado) do usuario.
        cfg (DgpConfig): Fracoes k1 e k2.

    Returns:
        SparseGradient: Banda intermediaria de cada tensor.

    Example:
        >>> v = GradientSet({'w': np.array([0.9, -0.8, 0.7, -0.6, 0.5, -0.4, 0.3, -0.2, 0.1, 0.05])})
        >>> dgp_prune(v, DgpConfig(0.2, 0.4)).indices['w']
        array([2, 3, 4, 5])
    """
    selected, warnings = {}, []
    for key, tensor in grads.items():
        n = tensor.size
        n_top, n_bottom = floor_count(cfg.k1, n), floor_count(cfg.k2, n)
        if n_top + n_bottom >= n:
            message = f"{key}: banda retida vazia (n={n}, topo={n_top}, base={n_bottom})"
            logger.warning(message)
            warnings.append(message)
            selected[key] = np.zeros(0, dtype=np.int64)
        else:
            selected[key] = _band_selection(tensor, n_top, n_bottom)
    return SparseGradient.from_selection(grads, selected, warnings=warnings)


def topk_prune(grads: GradientSet, k: float) -> SparseGradient:
    """Mantem as ceil(k n) entradas de maior magnitude de cada tensor.

    Raises:
        ValueError: Se k <= 0 ou k > 1.
    """
    if not 0.0 < k <= 1.0:
        raise ValueError(f"topk exige 0 < k <= 1, recebido {k}")
    selected = {key: magnitude_ranking(t)[:ceil_count(k, t.size)] for key, t in grads.items()}
    return SparseGradient.from_selection(grads, selected)


def top_prune(grads: GradientSet, k1: float) -> SparseGradient:
    """Remove apenas as floor(k1 n) maiores magnitudes (DGP sem a poda da base)."""
    if not 0.0 <= k1 < 1.0:
        raise ValueError(f"k1 fora de [0, 1): {k1}")
    selected = {key: magnitude_ranking(t)[floor_count(k1, t.size):] for key, t in grads.items()}
    return SparseGradient.from_selection(grads, selected)


def dp_noise(grads: GradientSet, std: float, rng: Rng) -> GradientSet:
    """Soma ruido N(0, std^2) independente a cada elemento (tensores na ordem do modelo)."""
    if std < 0:
        raise ValueError(f"std deve ser >= 0, recebido {std}")
    if std == 0:
        return grads.copy()
    return GradientSet({key: value + gaussian(rng, value.shape, 0.0, std) for key, value in grads.items()})


class Defense:
    """Defesa configurada: transforma o P de um usuario na mensagem enviada.

    Attributes:
        config (DefenseConfig): Nome e parametros.
        uses_error_feedback (bool): Falso para defesas densas (none, dp), cujo
            residuo e sempre zero ou seria ruido.
    """

    def __init__(self, config: DefenseConfig, rng: Optional[Rng] = None):
        self.config = config
        self.rng = rng
        self.elapsed = 0.0
        self.calls = 0
        if config.name == 'dp' and config.std > 0 and rng is None:
            raise ConfigError("Defesa dp exige um Rng")

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def uses_error_feedback(self) -> bool:
        return self.name in ('dgp', 'topk', 'top', 'adgp')

    def apply(self, grads: GradientSet) -> SparseGradient:
        start = time.perf_counter()
        cfg = self.config
        if cfg.name == 'none':
            wire = SparseGradient.from_dense(grads)
        elif cfg.name == 'dp':
            wire = SparseGradient.from_dense(dp_noise(grads, cfg.std, self.rng))
        elif cfg.name == 'dgp':
            wire = dgp_prune(grads, DgpConfig(cfg.k1, cfg.k2))
        elif cfg.name == 'topk':
            wire = topk_prune(grads, cfg.k)
        elif cfg.name == 'top':
            wire = top_prune(grads, cfg.k1)
        else:
            raise ConfigError("ADGP e aplicado em rodada conjunta (adgp_round), nao por usuario")
        self.elapsed += time.perf_counter() - start
        self.calls += 1
        return wire

    def mean_time(self) -> float:
        return self.elapsed / self.calls if self.calls else 0.0


def make_defense(config: DefenseConfig, rng: Optional[Rng] = None) -> Defense:
    return Defense(DefenseConfig.parse(config), rng)


def ef_round(user_grad: GradientSet, state: ErrorState, defense: Defense) -> Tuple[SparseGradient, ErrorState]:
    """Uma rodada de realimentacao de erro para um usuario.

    P = grad + e; wire = defesa(P); novo e = P - densify(wire).

    Raises:
        ShapeMismatchError: Residuo com estrutura diferente do gradiente.
    """
    user_grad.check_compatible(state.residual)
    compensated = user_grad + state.residual
    wire = defense.apply(compensated)
    return wire, ErrorState(compensated - wire.densify())


def adgp_select(compensated: GradientSet, locations: LocationSet, k1: float, k: float) -> SparseGradient:
    """Selecao de um usuario no ADGP.

    Remove o proprio T_k1(P) e envia as floor(k n) maiores magnitudes
    restantes que estao em I (menos, se a intersecao for menor).
    """
    selected = {}
    for key, tensor in compensated.items():
        n = tensor.size
        ranking = magnitude_ranking(tensor)
        candidates = ranking[floor_count(k1, n):]
        candidates = candidates[locations.masks[key].ravel()[candidates]]
        selected[key] = candidates[:floor_count(k, n)]
    return SparseGradient.from_selection(compensated, selected)


def leader_locations(compensated: GradientSet, k: float, leader: Optional[int] = None) -> LocationSet:
    """Conjunto I: as floor(2k n) maiores magnitudes de P de cada tensor."""
    masks = {}
    for key, tensor in compensated.items():
        flat = np.zeros(tensor.size, dtype=bool)
        flat[magnitude_ranking(tensor)[:floor_count(2 * k, tensor.size)]] = True
        masks[key] = flat.reshape(tensor.shape)
    return LocationSet(masks, leader)


def adgp_round(users: Sequence[Tuple[GradientSet, ErrorState]], k: float, cfg: DgpConfig,
               rng: Rng, error_feedback: bool = True) -> Tuple[List[SparseGradient], List[ErrorState], LocationSet]:
    """Rodada ADGP: lider sorteado calcula I, todos enviam apenas dentro de I.

    O lider usa o seu P compensado pelo erro. Cada usuario remove o proprio
    topo k1 e envia as floor(k n) maiores entradas elegiveis em I; k2 nao
    participa da selecao. O residuo de cada usuario e atualizado contra o
    que foi efetivamente enviado.

    Args:
        users (list): Pares (gradiente, ErrorState) de cada usuario.
        k (float): Orcamento de envio por tensor (I tem 2k).
        cfg (DgpConfig): k1 (topo removido) e k2.
        rng (Rng): Fluxo 'leader'.
        error_feedback (bool): Sem realimentacao, P = gradiente e o residuo fica zero.

    Returns:
        tuple: (mensagens, novos estados, LocationSet I).

    Raises:
        ConfigError: k1 >= k, 2k > 1 ou lista vazia.
    """
    if not users:
        raise ConfigError("ADGP exige ao menos um usuario")
    if not cfg.k1 < k:
        raise ConfigError(f"ADGP exige k1 < k (k1={cfg.k1}, k={k})")
    if 2 * k > 1.0:
        raise ConfigError(f"ADGP exige 2k <= 1 (k={k})")
    compensated = []
    for grads, state in users:
        grads.check_compatible(state.residual)
        compensated.append(grads + state.residual if error_feedback else grads)
    leader = int(rng.generator.integers(len(users)))
    locations = leader_locations(compensated[leader], k, leader)
    wires, states = [], []
    for p_user, (_, state) in zip(compensated, users):
        wire = adgp_select(p_user, locations, cfg.k1, k)
        wires.append(wire)
        states.append(ErrorState(p_user - wire.densify()) if error_feedback else state)
    logger.debug(f"ADGP: lider {leader}, |I| = {locations.popcount()}")
    return wires, states, locations


def aggregate(wires: Sequence[SparseGradient]) -> GradientSet:
    """Media das mensagens densificadas, somadas na ordem dos usuarios."""
    return GradientSet.mean([wire.densify() for wire in wires])
