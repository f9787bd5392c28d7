"""
Arquivo de configuracao central para o simulador dgpsim.

Este arquivo define os valores padrao de execucao, datasets, modelo, ataques,
formato de fio (wire format), fluxos de RNG e tolerancias das verificacoes
teoricas, alem das dataclasses `DefenseConfig` e `RunConfig` e da funcao que
carrega uma configuracao a partir de JSON, flags `--chave valor` e variaveis
de ambiente.

Attributes:
    RUN_DEFAULTS (dict): Valores padrao de cada chave de `RunConfig`.
    DATASET_CONFIG (dict): Parametros dos datasets sinteticos ('blobs', 'glyphs').
    MODEL_CONFIG (dict): Inicializacao do MLP e do modulo imprint.
    ATTACK_DEFAULTS (dict): Hiperparametros padrao dos ataques por otimizacao.
    WIRE_FORMAT (dict): Tamanhos em bytes usados na contabilidade de comunicacao.
    RNG_STREAMS (dict): Identificador numerico de cada fluxo nomeado de RNG.
    THEORY_TOLERANCES (dict): Folgas usadas pelas verificacoes do modulo theory.
    DEFENSE_NAMES (tuple): Defesas reconhecidas.

Example:
    >>> from dgpsim.config import RUN_DEFAULTS
    >>> print(RUN_DEFAULTS['users'])
    10
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

from . import custom_logging as logging
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

RUN_DEFAULTS = {
    'dataset': 'glyphs',
    'users': 10,
    'rounds': 100,
    'batch_size': 32,
    'lr': 0.1,
    'lr_milestones': [],
    'lr_gamma': 0.1,
    'momentum': 0.0,
    'defense': 'none',
    'error_feedback': True,
    'seed': 0,
    'eval_every': 10,
    'hidden': [32],
    'imprint_bins': 0,
    'n_train': 2000,
    'n_test': 500,
    'track_full_gradient': True,
    'track_dummy': False,
    'log_every': 50,
}

DATASET_CONFIG = {
    'blobs': {
        'features': 16,
        'classes': 4,
        'cluster_std': 1.0,
        'separation': 5.0,
    },
    'glyphs': {
        'side': 8,
        'classes': 4,
        'class_names': ('bar', 'cross', 'diag', 'ring'),
        'intensity_range': (0.6, 1.0),
        'noise_std': 0.1,
    },
}

MODEL_CONFIG = {
    'bias_init_std': 0.01,
    'imprint_link_scale': 0.5,
}

ATTACK_DEFAULTS = {
    'distance': 'euclidean',
    'iterations': 2000,
    'lr': 0.1,
    'init': 'gaussian',
    'init_mean': 0.5,
    'init_std': 0.25,
    'grad_provider': 'double_backprop',
    'restarts': 3,
    'clamp': True,
    'lr_decay_points': (3 / 8, 5 / 8, 7 / 8),
    'lr_decay_factor': 0.1,
    'tol': 1e-14,
    'finite_diff_h': 1e-4,
    'imprint_batch': 9,
}

WIRE_FORMAT = {
    'id_length_bytes': 1,
    'count_bytes': 4,
    'index_bytes': 4,
    'value_bytes': 4,
    'dense_value_bytes': 4,
}

RNG_STREAMS = {
    'data': 1,
    'init': 2,
    'dp': 3,
    'leader': 4,
    'attack': 5,
    'batch': 6,
    'partition': 7,
    'theory': 8,
}

THEORY_TOLERANCES = {
    'prop1_slack': 0.2,
    'convergence_ratio': 2.0,
    'flat_rtol': 1e-12,
    'final_window': 0.1,
    'prefix_points': 10,
    'power_iterations': 20,
    'prop1_h': 1e-5,
}

DEFENSE_NAMES = ('none', 'topk', 'dgp', 'adgp', 'dp', 'top')

# Numero de parametros numericos de cada defesa, na ordem da forma compacta
_DEFENSE_PARAMS = {
    'none': (),
    'topk': ('k',),
    'dgp': ('k1', 'k2'),
    'adgp': ('k1', 'k2', 'k'),
    'dp': ('std',),
    'top': ('k1',),
}


@dataclass(frozen=True)
class DefenseConfig:
    """Defesa aplicada por cada usuario antes do envio.

    Attributes:
        name (str): Uma de DEFENSE_NAMES.
        k1 (float): Fracao removida do topo (dgp, adgp, top).
        k2 (float): Fracao removida da base (dgp, adgp).
        k (float): Fracao mantida (topk) ou orcamento de envio (adgp).
        std (float): Desvio padrao do ruido gaussiano (dp).
    """

    name: str = 'none'
    k1: float = 0.0
    k2: float = 0.0
    k: float = 0.0
    std: float = 0.0

    def __post_init__(self):
        if self.name not in DEFENSE_NAMES:
            raise ConfigError(f"Defesa desconhecida: {self.name}")
        if self.name in ('dgp', 'adgp', 'top'):
            if not (0.0 <= self.k1 < 1.0 and 0.0 <= self.k2 < 1.0):
                raise ConfigError(f"k1/k2 fora de [0, 1): {self.k1}, {self.k2}")
            if self.k1 + self.k2 >= 1.0:
                raise ConfigError("k1 + k2 deve ser menor que 1 (banda retida vazia)")
        if self.name == 'topk' and not (0.0 < self.k <= 1.0):
            raise ConfigError(f"topk exige 0 < k <= 1, recebido {self.k}")
        if self.name == 'adgp':
            if not self.k1 < self.k:
                raise ConfigError("ADGP exige k1 < k")
            if 2 * self.k > 1.0:
                raise ConfigError("ADGP exige 2k <= 1")
        if self.name == 'dp' and self.std < 0:
            raise ConfigError("dp exige std >= 0")

    @classmethod
    def parse(cls, value):
        """Converte a forma compacta ('dgp:0.05,0.75') ou um dicionario.

        Args:
            value (str | dict | DefenseConfig): Descricao da defesa.

        Returns:
            DefenseConfig: A defesa validada.

        Raises:
            ConfigError: Se o texto ou os parametros forem invalidos.

        Example:
            >>> DefenseConfig.parse('adgp:0.05,0.75,0.2').k
            0.2
        """
        if isinstance(value, DefenseConfig):
            return value
        if isinstance(value, Mapping):
            data = dict(value)
            name = data.pop('name', 'none')
            unknown = set(data) - {'k1', 'k2', 'k', 'std'}
            if unknown:
                raise ConfigError(f"Parametros de defesa desconhecidos: {sorted(unknown)}")
            return cls(name=name, **{key: float(v) for key, v in data.items()})
        text = str(value).strip().lower()
        name, _, params = text.partition(':')
        if name not in _DEFENSE_PARAMS:
            raise ConfigError(f"Defesa desconhecida: {name}")
        keys = _DEFENSE_PARAMS[name]
        raw = [p for p in params.split(',') if p.strip()] if params else []
        if len(raw) != len(keys):
            raise ConfigError(f"Defesa '{name}' espera {len(keys)} parametro(s): {text}")
        try:
            numbers = [float(p) for p in raw]
        except ValueError as e:
            raise ConfigError(f"Parametro de defesa nao numerico em '{text}'") from e
        return cls(name=name, **dict(zip(keys, numbers)))

    @property
    def p(self):
        """Razao p = k1/k2 que regula privacidade contra acuracia."""
        if self.k2 <= 0:
            raise ValueError("p = k1/k2 indefinido para k2 = 0")
        return self.k1 / self.k2

    def compact(self):
        """Forma compacta, inversa de `parse`."""
        keys = _DEFENSE_PARAMS[self.name]
        if not keys:
            return self.name
        return f"{self.name}:" + ','.join(repr(getattr(self, key)) for key in keys)

    def to_dict(self):
        data = {'name': self.name}
        for key in _DEFENSE_PARAMS[self.name]:
            data[key] = getattr(self, key)
        return data


@dataclass(frozen=True)
class RunConfig:
    """Configuracao completa de uma execucao de treinamento colaborativo.

    As chaves documentadas em RUN_DEFAULTS sao aceitas em JSON e como flags
    `--chave valor` na CLI.
    """

    dataset: str = RUN_DEFAULTS['dataset']
    users: int = RUN_DEFAULTS['users']
    rounds: int = RUN_DEFAULTS['rounds']
    batch_size: int = RUN_DEFAULTS['batch_size']
    lr: float = RUN_DEFAULTS['lr']
    lr_milestones: Tuple[float, ...] = ()
    lr_gamma: float = RUN_DEFAULTS['lr_gamma']
    momentum: float = RUN_DEFAULTS['momentum']
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    error_feedback: bool = RUN_DEFAULTS['error_feedback']
    seed: int = RUN_DEFAULTS['seed']
    eval_every: int = RUN_DEFAULTS['eval_every']
    hidden: Tuple[int, ...] = (32,)
    imprint_bins: int = RUN_DEFAULTS['imprint_bins']
    n_train: int = RUN_DEFAULTS['n_train']
    n_test: int = RUN_DEFAULTS['n_test']
    track_full_gradient: bool = RUN_DEFAULTS['track_full_gradient']
    track_dummy: bool = RUN_DEFAULTS['track_dummy']
    log_every: int = RUN_DEFAULTS['log_every']

    def __post_init__(self):
        object.__setattr__(self, 'defense', DefenseConfig.parse(self.defense))
        object.__setattr__(self, 'lr_milestones', tuple(float(m) for m in self.lr_milestones))
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))
        if self.dataset not in DATASET_CONFIG:
            raise ConfigError(f"Dataset desconhecido: {self.dataset}")
        if self.users < 1 or self.rounds < 1:
            raise ConfigError("users e rounds devem ser >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size deve ser >= 1")
        if self.lr < 0:
            raise ConfigError("lr deve ser >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum deve estar em [0, 1)")
        if self.eval_every < 1:
            raise ConfigError("eval_every deve ser >= 1")
        if self.imprint_bins == 1 or self.imprint_bins < 0:
            raise ConfigError("imprint_bins deve ser 0 (desligado) ou >= 2")
        if any(not 0.0 < m < 1.0 for m in self.lr_milestones):
            raise ConfigError("lr_milestones sao fracoes de rodadas em (0, 1)")
        if self.n_train < self.users * self.batch_size:
            raise ConfigError("n_train insuficiente para particionar entre os usuarios")

    def with_overrides(self, **changes):
        """Copia com chaves substituidas (revalidada)."""
        return replace(self, **changes)

    def lr_at(self, round_index):
        """Taxa de aprendizado com decaimento em degraus nas fracoes `lr_milestones`."""
        passed = sum(1 for m in self.lr_milestones if round_index >= int(m * self.rounds))
        return self.lr * (self.lr_gamma ** passed)

    def to_dict(self):
        data = asdict(self)
        data['defense'] = self.defense.to_dict()
        data['lr_milestones'] = list(self.lr_milestones)
        data['hidden'] = list(self.hidden)
        return data

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Chaves de configuracao desconhecidas: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"Configuracao invalida: {e}") from e


def _coerce(key, raw):
    """Converte o texto de uma flag `--chave valor` para o tipo do padrao."""
    default = RUN_DEFAULTS[key]
    try:
        if key == 'defense':
            return DefenseConfig.parse(raw)
        if isinstance(default, bool):
            lowered = str(raw).lower()
            if lowered in ('1', 'true', 'yes', 'on', 'sim'):
                return True
            if lowered in ('0', 'false', 'no', 'off', 'nao'):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [p for p in str(raw).split(',') if p.strip()]
            cast = int if key == 'hidden' else float
            return [cast(p) for p in items]
        return str(raw)
    except ValueError as e:
        raise ConfigError(f"Valor invalido para --{key}: {raw}") from e


def parse_overrides(pairs: Sequence[str]) -> Dict[str, Any]:
    """Converte ['--users', '4', '--defense', 'dgp:0.05,0.75'] em dicionario tipado.

    Raises:
        ConfigError: Chave desconhecida ou valor ausente.
    """
    overrides = {}
    items = list(pairs)
    i = 0
    while i < len(items):
        token = items[i]
        if not token.startswith('--'):
            raise ConfigError(f"Argumento inesperado: {token}")
        key = token[2:].replace('-', '_')
        if '=' in key:
            key, value = key.split('=', 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigError(f"Flag sem valor: {token}")
            value = items[i + 1]
            i += 2
        if key not in RUN_DEFAULTS:
            raise ConfigError(f"Chave de configuracao desconhecida: {key}")
        overrides[key] = _coerce(key, value)
    return overrides


def load_run_config(path: Optional[str] = None,
                    overrides: Optional[Mapping[str, Any]] = None,
                    env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Carrega a configuracao: padroes < arquivo JSON < overrides < DGPSIM_SEED.

    Args:
        path (str, optional): Caminho do arquivo JSON de configuracao.
        overrides (dict, optional): Valores ja tipados (ver `parse_overrides`).
        env (dict, optional): Ambiente consultado para DGPSIM_SEED (padrao os.environ).

    Returns:
        RunConfig: Configuracao validada.

    Raises:
        ConfigError: Arquivo ausente, JSON invalido ou valores fora das invariantes.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"Arquivo de configuracao nao encontrado: {path}")
        try:
            loaded = json.loads(config_path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError(f"JSON invalido em {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} deve conter um objeto JSON")
        data.update(loaded)
    if overrides:
        data.update(overrides)
    environ = os.environ if env is None else env
    seed_env = environ.get('DGPSIM_SEED')
    if seed_env not in (None, ''):
        try:
            data['seed'] = int(seed_env)
        except ValueError as e:
            raise ConfigError(f"DGPSIM_SEED invalido: {seed_env}") from e
        logger.info(f"Semente sobrescrita por DGPSIM_SEED={data['seed']}")
    return RunConfig.from_dict(data)
