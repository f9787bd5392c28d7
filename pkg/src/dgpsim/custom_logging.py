"""
Sistema de logging compativel para o simulador dgpsim.

Configura o modulo `logging` uma unica vez (formato `hora [NIVEL] nome: msg`)
e expoe `getLogger`. Todos os logs vao para stderr, de modo que
nunca alteram os arquivos de resultado deterministas.
"""

import logging
import os

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'
LOG_DATEFMT = '%H:%M:%S'


def _level_from_env():
    name = os.environ.get('DGPSIM_LOG_LEVEL', 'INFO').upper()
    return getattr(logging, name, logging.INFO)


# Configurar logging basico
logging.basicConfig(
    level=_level_from_env(),
    format=LOG_FORMAT,
    datefmt=LOG_DATEFMT
)


def getLogger(name):
    """Retorna um logger configurado"""
    return logging.getLogger(name)


def set_level(level):
    """Ajusta o nivel do logger raiz (usado pela flag --log-level da CLI).

    Args:
        level (str): Nome do nivel, por exemplo 'DEBUG' ou 'WARNING'.

    Raises:
        ValueError: Se o nome do nivel nao existir.
    """
    value = getattr(logging, str(level).upper(), None)
    if not isinstance(value, int):
        raise ValueError(f"Nivel de log desconhecido: {level}")
    logging.getLogger().setLevel(value)


logger = getLogger(__name__)
