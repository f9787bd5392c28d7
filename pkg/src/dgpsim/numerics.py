"""
Tensores densos, RNG determinista e otimizadores (SGD, Adam).

Todos os demais modulos constroem sobre estas pecas. Tensores sao arrays
`numpy` de float64 em ordem row-major; cada consumidor de aleatoriedade usa
o seu proprio fluxo nomeado (`Rng.stream`), de modo que ligar ou desligar uma
defesa nunca perturba a aleatoriedade dos demais consumidores.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from . import custom_logging as logging
from .config import RNG_STREAMS
from .exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float64]
Shape = Union[int, Sequence[int]]

_MASK64 = (1 << 64) - 1


def as_tensor(values, shape: Optional[Shape] = None, allow_nonfinite: bool = False) -> Tensor:
    """Converte valores para um tensor float64 validado.

    Args:
        values: Sequencia ou array com os dados.
        shape (tuple, optional): Formato esperado; os dados sao remodelados se
            o numero de elementos for igual ao produto das dimensoes.
        allow_nonfinite (bool): Permite NaN/inf quando marcado explicitamente.

    Returns:
        Tensor: Array float64 (copia independente).

    Raises:
        ShapeMismatchError: Numero de elementos diferente do produto das dimensoes.
        ValueError: Valores nao finitos sem a marcacao `allow_nonfinite`.
    """
    data = np.array(values, dtype=np.float64)
    if shape is not None:
        dims = (shape,) if isinstance(shape, int) else tuple(shape)
        if data.size != int(np.prod(dims, dtype=np.int64)):
            raise ShapeMismatchError(f"{data.size} valores nao cabem no formato {dims}")
        data = data.reshape(dims)
    if not allow_nonfinite and not np.all(np.isfinite(data)):
        raise ValueError("Tensor contem valores nao finitos")
    return data


class Rng:
    """Fluxo de numeros aleatorios identificado por (seed, stream_id).

    Sequencias com o mesmo par sao identicas bit a bit entre execucoes. Um
    `Rng` pertence a um unico consumidor; uso paralelo exige stream_ids
    distintos.

    Attributes:
        seed (int): Semente de 64 bits.
        stream_id (int): Identificador do fluxo (64 bits).
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        sequence = np.random.SeedSequence([self.seed, self.stream_id])
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    @classmethod
    def stream(cls, seed: int, name: str, index: int = 0) -> 'Rng':
        """Cria o fluxo nomeado (ver RNG_STREAMS), com sub-indice opcional.

        Example:
            >>> Rng.stream(7, 'batch', 3).stream_id
            6000003
        """
        if name not in RNG_STREAMS:
            raise KeyError(f"Fluxo de RNG desconhecido: {name}")
        return cls(seed, RNG_STREAMS[name] * 1_000_000 + int(index))

    def integer_seed(self) -> int:
        """Inteiro de 31 bits para bibliotecas que aceitam `random_state`."""
        return int(self.generator.integers(0, 2 ** 31 - 1))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"


def gaussian(rng: Rng, shape: Shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """Amostra N(mean, std^2) elemento a elemento usando apenas o `rng` dado.

    Raises:
        ValueError: Se std for negativo.

    Example:
        >>> gaussian(Rng(1), (3,), 0.0, 0.0)
        array([0., 0., 0.])
    """
    if std < 0:
        raise ValueError(f"Desvio padrao negativo: {std}")
    dims = (shape,) if isinstance(shape, int) else tuple(shape)
    if std == 0:
        return np.full(dims, float(mean), dtype=np.float64)
    return rng.generator.normal(float(mean), float(std), size=dims)


@dataclass
class AdamState:
    """Estado do otimizador Adam para um unico tensor.

    Attributes:
        first_moment (Tensor): Media movel do gradiente.
        second_moment (Tensor): Media movel do gradiente ao quadrado.
        step (int): Numero de passos ja aplicados.
    """

    first_moment: Tensor
    second_moment: Tensor
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, tensor: Tensor, **hyper) -> 'AdamState':
        return cls(np.zeros_like(tensor, dtype=np.float64), np.zeros_like(tensor, dtype=np.float64), **hyper)


def adam_step(state: AdamState, grad: Tensor, lr: float) -> Tensor:
    """Aplica um passo de Adam com correcao de vies.

    O estado e atualizado no lugar; o retorno e o delta a ser subtraido dos
    parametros.

    Args:
        state (AdamState): Momentos e contador de passos.
        grad (Tensor): Gradiente com o mesmo formato dos momentos.
        lr (float): Taxa de aprendizado.

    Returns:
        Tensor: Atualizacao lr * m_hat / (sqrt(v_hat) + eps).

    Raises:
        ShapeMismatchError: Formato do gradiente diferente do estado.
    """
    if grad.shape != state.first_moment.shape:
        raise ShapeMismatchError(f"Gradiente {grad.shape} incompativel com o estado {state.first_moment.shape}")
    state.step += 1
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step)
    return lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class SgdState:
    """Estado do SGD com momento (velocidade por tensor)."""

    velocity: Optional[Tensor] = None
    momentum: float = 0.0


def sgd_step(state: SgdState, grad: Tensor, lr: float) -> Tensor:
    """Passo de SGD; com momento 0 o delta e exatamente lr * grad."""
    if state.momentum == 0.0:
        return lr * grad
    if state.velocity is None:
        state.velocity = np.zeros_like(grad)
    if state.velocity.shape != grad.shape:
        raise ShapeMismatchError("Velocidade e gradiente com formatos diferentes")
    state.velocity = state.momentum * state.velocity + grad
    return lr * state.velocity


def step_decay(base_lr: float, progress: float, points: Tuple[float, ...], factor: float) -> float:
    """Taxa com decaimento em degraus: multiplica por `factor` a cada ponto ja passado."""
    passed = sum(1 for p in points if progress >= p)
    return base_lr * (factor ** passed)
