"""
Classificadores MLP diferenciaveis (ReLU, softmax com entropia cruzada).

Fornece forward, perda, gradientes analiticos por parametro, o produto
vetor-jacobiano do mapa entrada -> gradiente (usado pelos ataques por
otimizacao e pelo limite inferior da reconstrucao) e a insercao do modulo imprint
por um servidor malicioso.

Convencao de indices: a camada l calcula z[l] = h[l] @ W[l].T + b[l], com
h[0] = x, h[l+1] = ReLU(z[l]) e logits r = z[L-1].
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from . import custom_logging as logging
from .config import MODEL_CONFIG
from .exceptions import ShapeMismatchError
from .numerics import Rng, Tensor, gaussian

logger = logging.getLogger(__name__)


def weight_id(layer: int) -> str:
    return f"layer{layer}.weight"


def bias_id(layer: int) -> str:
    return f"layer{layer}.bias"


class GradientSet:
    """Conjunto ordenado de tensores nomeados (gradientes ou parametros).

    Os ids sao estaveis ('layer0.weight', 'layer0.bias', ...) e a ordem de
    iteracao segue a ordem das camadas.
    """

    __slots__ = ('_tensors',)

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors: Dict[str, Tensor] = {
            key: np.asarray(value, dtype=np.float64) for key, value in tensors.items()
        }

    def __getitem__(self, key: str) -> Tensor:
        return self._tensors[key]

    def __contains__(self, key) -> bool:
        return key in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def ids(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {key: value.shape for key, value in self._tensors.items()}

    @property
    def param_count(self) -> int:
        return int(sum(value.size for value in self._tensors.values()))

    def check_compatible(self, other: 'GradientSet') -> None:
        """Garante ids e formatos identicos.

        Raises:
            ShapeMismatchError: Se os conjuntos nao espelham a mesma estrutura.
        """
        if self.shapes() != other.shapes():
            raise ShapeMismatchError(f"Estruturas diferentes: {self.shapes()} vs {other.shapes()}")

    def map(self, fn) -> 'GradientSet':
        return GradientSet({key: fn(value) for key, value in self._tensors.items()})

    def zeros_like(self) -> 'GradientSet':
        return self.map(np.zeros_like)

    def copy(self) -> 'GradientSet':
        return self.map(np.copy)

    def __add__(self, other: 'GradientSet') -> 'GradientSet':
        self.check_compatible(other)
        return GradientSet({key: value + other[key] for key, value in self._tensors.items()})

    def __sub__(self, other: 'GradientSet') -> 'GradientSet':
        self.check_compatible(other)
        return GradientSet({key: value - other[key] for key, value in self._tensors.items()})

    def scale(self, factor: float) -> 'GradientSet':
        return self.map(lambda value: factor * value)

    def flatten(self) -> Tensor:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([value.ravel() for value in self._tensors.values()])

    def dot(self, other: 'GradientSet') -> float:
        self.check_compatible(other)
        return float(sum(np.vdot(value, other[key]) for key, value in self._tensors.items()))

    def sq_norm(self) -> float:
        return float(sum(np.vdot(value, value) for value in self._tensors.values()))

    def norm(self) -> float:
        return float(np.sqrt(self.sq_norm()))

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(value))) for value in self._tensors.values())

    def equals(self, other: 'GradientSet') -> bool:
        """Igualdade exata (bit a bit nos valores)."""
        return self.shapes() == other.shapes() and all(
            np.array_equal(value, other[key]) for key, value in self._tensors.items())

    @classmethod
    def from_flat(cls, flat: Tensor, shapes: Mapping[str, Tuple[int, ...]]) -> 'GradientSet':
        tensors, offset = {}, 0
        for key, shape in shapes.items():
            size = int(np.prod(shape, dtype=np.int64))
            tensors[key] = np.asarray(flat[offset:offset + size], dtype=np.float64).reshape(shape)
            offset += size
        if offset != flat.size:
            raise ShapeMismatchError(f"Vetor com {flat.size} elementos, estrutura pede {offset}")
        return cls(tensors)

    @classmethod
    def mean(cls, sets: Sequence['GradientSet']) -> 'GradientSet':
        """Media elemento a elemento (soma na ordem dada, depois divide por N)."""
        if not sets:
            raise ValueError("Media de lista vazia")
        total = sets[0].copy()
        for other in sets[1:]:
            total = total + other
        return total.scale(1.0 / len(sets)) if len(sets) > 1 else total

    def __repr__(self):
        return f"GradientSet({self.shapes()})"


@dataclass(frozen=True)
class Batch:
    """Lote de treinamento: entradas [B x d] e rotulos inteiros.

    Attributes:
        inputs (Tensor): Matriz B x d (pixels em [0, 1] para glyphs).
        labels (np.ndarray): Vetor de rotulos inteiros de tamanho B.
    """

    inputs: Tensor
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(self.labels, dtype=np.int64))
        if inputs.shape[0] < 1:
            raise ValueError("Lote vazio")
        if labels.shape != (inputs.shape[0],):
            raise ShapeMismatchError(f"{inputs.shape[0]} entradas para {labels.size} rotulos")
        object.__setattr__(self, 'inputs', inputs)
        object.__setattr__(self, 'labels', labels)

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, indices) -> 'Batch':
        return Batch(self.inputs[indices], self.labels[indices])


@dataclass(frozen=True)
class ImprintSpec:
    """Modulo imprint escolhido pelo atacante.

    Attributes:
        measurement (Tensor): Vetor de medida [d] (ex.: brilho medio).
        thresholds (Tensor): Limiares estritamente crescentes c_1..c_R (R >= 2).
        pass_through (bool): Concatena as entradas originais apos as saidas do
            imprint para que o classificador continue treinando.
        link_scale (float): Peso comum que liga cada linha do imprint a camada seguinte.
    """

    measurement: Tensor
    thresholds: Tensor
    pass_through: bool = True
    link_scale: float = MODEL_CONFIG['imprint_link_scale']

    def __post_init__(self):
        measurement = np.asarray(self.measurement, dtype=np.float64).ravel()
        thresholds = np.asarray(self.thresholds, dtype=np.float64).ravel()
        if thresholds.size < 2:
            raise ValueError("ImprintSpec exige R >= 2 limiares")
        if np.any(np.diff(thresholds) <= 0):
            raise ValueError("Limiares do imprint devem ser estritamente crescentes")
        object.__setattr__(self, 'measurement', measurement)
        object.__setattr__(self, 'thresholds', thresholds)

    @property
    def bins(self) -> int:
        return int(self.thresholds.size)

    @classmethod
    def from_quantiles(cls, reference_inputs: Tensor, bins: int, pass_through: bool = True) -> 'ImprintSpec':
        """Medida de brilho medio com limiares nos quantis de uma distribuicao publica.

        O limiar c_k e o quantil (k-1)/R da medida sobre `reference_inputs`,
        deslocado ligeiramente para baixo para que o menor exemplo ative a
        primeira linha.
        """
        reference = np.atleast_2d(reference_inputs)
        d = reference.shape[1]
        measurement = np.full(d, 1.0 / d)
        values = reference @ measurement
        quantiles = np.quantile(values, np.arange(bins) / bins)
        quantiles[0] = values.min() - 1e-6
        thresholds = np.maximum.accumulate(quantiles)
        for k in range(1, bins):
            if thresholds[k] <= thresholds[k - 1]:
                thresholds[k] = thresholds[k - 1] + 1e-9
        return cls(measurement, thresholds, pass_through)

    def to_dict(self):
        return {
            'measurement': self.measurement.tolist(),
            'thresholds': self.thresholds.tolist(),
            'pass_through': self.pass_through,
            'link_scale': self.link_scale,
        }

    @classmethod
    def from_dict(cls, data) -> 'ImprintSpec':
        return cls(data['measurement'], data['thresholds'], bool(data['pass_through']),
                   float(data['link_scale']))


@dataclass(frozen=True)
class MlpModel:
    """MLP com ReLU entre camadas e identidade na saida.

    Attributes:
        weights (tuple): Matrizes [out x in] por camada.
        biases (tuple): Vetores [out] por camada.
        frozen (dict): Mascaras booleanas (por id de tensor) das entradas que a
            agregacao nao atualiza; usado para congelar o modulo imprint.
        imprint (ImprintSpec, optional): Presente quando a camada 0 e um imprint.
    """

    weights: Tuple[Tensor, ...]
    biases: Tuple[Tensor, ...]
    frozen: Mapping[str, np.ndarray] = field(default_factory=dict)
    imprint: Optional[ImprintSpec] = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatchError("Numero de pesos e vieses deve coincidir e ser >= 1")
        previous = None
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatchError(f"Camada {l}: peso {w.shape} e vies {b.shape} inconsistentes")
            if previous is not None and w.shape[1] != previous:
                raise ShapeMismatchError(f"Camada {l}: entrada {w.shape[1]} nao encadeia com {previous}")
            previous = w.shape[0]

    @classmethod
    def initialize(cls, dims: Sequence[int], rng: Rng) -> 'MlpModel':
        """Inicializacao He-normal para pesos e vieses pequenos.

        Args:
            dims (list): [d, h_1, ..., C].
            rng (Rng): Fluxo 'init'.
        """
        if len(dims) < 2:
            raise ValueError("dims precisa de ao menos entrada e saida")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(gaussian(rng, (fan_out, fan_in), 0.0, float(np.sqrt(2.0 / fan_in))))
            biases.append(gaussian(rng, (fan_out,), 0.0, MODEL_CONFIG['bias_init_std']))
        return cls(tuple(weights), tuple(biases))

    @property
    def layer_count(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.weights[-1].shape[0])

    def params(self) -> GradientSet:
        tensors = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            tensors[weight_id(l)] = w
            tensors[bias_id(l)] = b
        return GradientSet(tensors)

    def with_params(self, params: GradientSet) -> 'MlpModel':
        self.params().check_compatible(params)
        weights = tuple(params[weight_id(l)].copy() for l in range(self.layer_count))
        biases = tuple(params[bias_id(l)].copy() for l in range(self.layer_count))
        return MlpModel(weights, biases, self.frozen, self.imprint)

    def apply_update(self, delta: GradientSet) -> 'MlpModel':
        """Retorna W - delta, preservando as entradas congeladas."""
        params = self.params()
        params.check_compatible(delta)
        updated = {}
        for key, value in params.items():
            step = delta[key]
            mask = self.frozen.get(key)
            if mask is not None:
                step = np.where(mask, 0.0, step)
            updated[key] = value - step
        return self.with_params(GradientSet(updated))

    def to_json(self) -> str:
        """Checkpoint {tensor_id: {shape, data}} com chaves em ordem determinista.

        Um modelo com imprint guarda tambem a medida/limiares (`imprint`) e as
        mascaras congeladas (`frozen`), para que o modulo continue intocado e
        atacavel apos a recarga.
        """
        payload = {key: {'shape': list(value.shape), 'data': value.ravel().tolist()}
                   for key, value in self.params().items()}
        if self.imprint is not None:
            payload['imprint'] = self.imprint.to_dict()
        if self.frozen:
            payload['frozen'] = {key: {'shape': list(mask.shape), 'data': mask.ravel().astype(int).tolist()}
                                 for key, mask in self.frozen.items()}
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> 'MlpModel':
        payload = json.loads(text)
        imprint = payload.pop('imprint', None)
        frozen = payload.pop('frozen', {})
        layers = sorted({int(key.split('.')[0][len('layer'):]) for key in payload})
        if layers != list(range(len(layers))):
            raise ShapeMismatchError("Checkpoint com camadas faltando")
        weights, biases = [], []
        for l in layers:
            w, b = payload[weight_id(l)], payload[bias_id(l)]
            weights.append(np.asarray(w['data'], dtype=np.float64).reshape(w['shape']))
            biases.append(np.asarray(b['data'], dtype=np.float64).reshape(b['shape']))
        masks = {key: np.asarray(mask['data'], dtype=bool).reshape(mask['shape'])
                 for key, mask in frozen.items()}
        spec = ImprintSpec.from_dict(imprint) if imprint is not None else None
        return cls(tuple(weights), tuple(biases), masks, spec)

    def save_checkpoint(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding='utf-8')

    @classmethod
    def load_checkpoint(cls, path) -> 'MlpModel':
        return cls.from_json(Path(path).read_text(encoding='utf-8'))


@dataclass
class ForwardCache:
    """Ativacoes guardadas no forward para o backward e o VJP."""

    activations: List[Tensor]
    pre_activations: List[Tensor]
    probs: Tensor

    @property
    def logits(self) -> Tensor:
        return self.pre_activations[-1]


def _as_matrix(model: MlpModel, inputs) -> Tensor:
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise ShapeMismatchError(f"Entrada de dimensao {x.shape[1]}, modelo espera {model.input_dim}")
    return x


def _forward_cache(model: MlpModel, inputs) -> ForwardCache:
    h = _as_matrix(model, inputs)
    activations, pre_activations = [h], []
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre_activations.append(z)
        if l < model.layer_count - 1:
            h = np.maximum(z, 0.0)
            activations.append(h)
    return ForwardCache(activations, pre_activations, softmax(pre_activations[-1], axis=1))


def forward(model: MlpModel, inputs) -> Tensor:
    """Logits r = W^L(...ReLU(W^1 x + b^1)...) + b^L.

    Aceita um vetor [d] (retorna [C]) ou uma matriz [B x d] (retorna [B x C]).

    Raises:
        ShapeMismatchError: Dimensao da entrada diferente da primeira camada.
    """
    logits = _forward_cache(model, inputs).logits
    return logits[0] if np.ndim(inputs) == 1 else logits


def one_hot(labels, classes: int) -> Tensor:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(labels < 0) or np.any(labels >= classes):
        raise ValueError(f"Rotulos fora de [0, {classes})")
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _backward(model: MlpModel, cache: ForwardCache, targets: Tensor) -> Tuple[GradientSet, List[Tensor]]:
    """Retropropagacao da entropia cruzada media contra distribuicoes-alvo [B x C]."""
    batch = targets.shape[0]
    deltas: List[Optional[Tensor]] = [None] * model.layer_count
    deltas[-1] = (cache.probs - targets) / batch
    for l in range(model.layer_count - 1, 0, -1):
        deltas[l - 1] = (deltas[l] @ model.weights[l]) * (cache.pre_activations[l - 1] > 0)
    tensors = {}
    for l in range(model.layer_count):
        tensors[weight_id(l)] = deltas[l].T @ cache.activations[l]
        tensors[bias_id(l)] = deltas[l].sum(axis=0)
    return GradientSet(tensors), deltas


def cross_entropy(logits: Tensor, targets: Tensor) -> float:
    """Entropia cruzada media, estabilizada com log-sum-exp."""
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    return float(-np.sum(targets * log_probs) / logits.shape[0])


def loss_and_grad(model: MlpModel, batch: Batch) -> Tuple[float, GradientSet]:
    """Perda media de entropia cruzada e gradientes analiticos exatos.

    Para B = 1 valem as identidades da ultima camada:
    dl/db_i = softmax_i - 1{i=y} e grad W^L = (dl/dr) h^T.

    Args:
        model (MlpModel): Modelo avaliado.
        batch (Batch): Lote com rotulos em [0, C).

    Returns:
        tuple: (perda, GradientSet espelhando o modelo).
    """
    targets = one_hot(batch.labels, model.num_classes)
    cache = _forward_cache(model, batch.inputs)
    grads, _ = _backward(model, cache, targets)
    return cross_entropy(cache.logits, targets), grads


def gradient_map(model: MlpModel, inputs, targets: Tensor) -> GradientSet:
    """Gradiente dos parametros para entradas e alvos suaves [B x C] (mapa phi(x, W))."""
    cache = _forward_cache(model, inputs)
    grads, _ = _backward(model, cache, np.atleast_2d(targets))
    return grads


def gradient_vjp(model: MlpModel, inputs, targets: Tensor,
                 cotangent: GradientSet) -> Tuple[GradientSet, Tensor, Tensor]:
    """Produto vetor-jacobiano do mapa (x, q) -> grad W (double backprop).

    Dado o cotangente G (mesma estrutura dos gradientes), calcula
    d<G, phi(x, q)>/dx e d<G, phi(x, q)>/dq atravessando o backward analitico.
    As mascaras ReLU sao constantes por partes, logo o resultado e exato
    em quase todo ponto.

    Args:
        model (MlpModel): Modelo fixo.
        inputs (Tensor): Entradas [B x d] (ou [d]).
        targets (Tensor): Distribuicoes-alvo [B x C].
        cotangent (GradientSet): Pesos do produto interno.

    Returns:
        tuple: (gradientes calculados, d/dx [B x d], d/dq [B x C]).
    """
    targets = np.atleast_2d(targets)
    cache = _forward_cache(model, inputs)
    grads, deltas = _backward(model, cache, targets)
    grads.check_compatible(cotangent)
    count = model.layer_count
    batch = targets.shape[0]

    adj_delta = []
    adj_act = [np.zeros_like(a) for a in cache.activations]
    for l in range(count):
        g_w, g_b = cotangent[weight_id(l)], cotangent[bias_id(l)]
        adj_delta.append(cache.activations[l] @ g_w.T + g_b)
        adj_act[l] += deltas[l] @ g_w
    for l in range(count - 1):
        adj_delta[l + 1] += (adj_delta[l] * (cache.pre_activations[l] > 0)) @ model.weights[l + 1].T

    adj_probs = adj_delta[-1] / batch
    adj_targets = -adj_probs
    adj_z = cache.probs * (adj_probs - np.sum(cache.probs * adj_probs, axis=1, keepdims=True))
    for l in range(count - 1, -1, -1):
        adj_act[l] += adj_z @ model.weights[l]
        if l >= 1:
            adj_z = adj_act[l] * (cache.pre_activations[l - 1] > 0)
    return grads, adj_act[0], adj_targets


def predict(model: MlpModel, inputs) -> np.ndarray:
    return np.argmax(_forward_cache(model, inputs).logits, axis=1)


def accuracy(model: MlpModel, batch: Batch) -> float:
    return float(np.mean(predict(model, batch.inputs) == batch.labels))


def _alternating_link(size: int, scale: float) -> Tensor:
    signs = np.where(np.arange(size) % 2 == 0, 1.0, -1.0)
    return scale * signs / np.sqrt(size)


def insert_imprint(model: MlpModel, spec: ImprintSpec) -> MlpModel:
    """Insere o modulo imprint como nova primeira camada.

    A linha k tem pesos = medida e vies = -c_k (com ReLU). Com pass_through, a
    camada recebe ainda 2d linhas (+I e -I, vies 0): como ReLU(x) - ReLU(-x) = x,
    a antiga primeira camada, replicada com sinal trocado nas colunas de -I,
    ve as entradas originais inclusive quando negativas. A camada e alargada
    ainda com R colunas identicas (vetor de ligacao), de modo que o sinal de
    retorno de cada linha ativa do imprint e o mesmo para uma dada amostra. O imprint e as colunas de ligacao ficam
    congelados.

    Args:
        model (MlpModel): Modelo original (entrada d).
        spec (ImprintSpec): Medida e limiares escolhidos pelo atacante.

    Returns:
        MlpModel: Novo modelo com `layer_count + 1` camadas.

    Raises:
        ShapeMismatchError: Medida com dimensao diferente da entrada.
    """
    d = model.input_dim
    if spec.measurement.size != d:
        raise ShapeMismatchError(f"Medida com {spec.measurement.size} entradas, modelo espera {d}")
    bins = spec.bins
    imprint_w = np.tile(spec.measurement, (bins, 1))
    imprint_b = -spec.thresholds.copy()
    first_w = model.weights[0]
    hidden = first_w.shape[0]
    link = np.tile(_alternating_link(hidden, spec.link_scale)[:, None], (1, bins))
    if spec.pass_through:
        imprint_w = np.vstack([imprint_w, np.eye(d), -np.eye(d)])
        imprint_b = np.concatenate([imprint_b, np.zeros(2 * d)])
        widened = np.hstack([link, first_w, -first_w])
    else:
        widened = link
    weights = (imprint_w, widened) + tuple(w.copy() for w in model.weights[1:])
    biases = (imprint_b, model.biases[0].copy()) + tuple(b.copy() for b in model.biases[1:])
    link_mask = np.zeros(widened.shape, dtype=bool)
    link_mask[:, :bins] = True
    frozen = {
        weight_id(0): np.ones(imprint_w.shape, dtype=bool),
        bias_id(0): np.ones(imprint_b.shape, dtype=bool),
        weight_id(1): link_mask,
    }
    logger.debug(f"Imprint inserido: {bins} linhas, pass_through={spec.pass_through}")
    return MlpModel(weights, biases, frozen, spec)
