"""
Hierarquia de erros do dgpsim e codigos de saida estaveis da CLI.

Os codigos de saida formam um contrato para scripts:
0 sucesso, 2 erro de configuracao, 3 divergencia, 4 ataque inaplicavel.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_INAPPLICABLE = 4


class DgpSimError(Exception):
    """Erro base do simulador."""

    exit_code = 1


class ConfigError(DgpSimError):
    """Configuracao invalida, ausente ou inconsistente."""

    exit_code = EXIT_CONFIG


class DivergenceError(DgpSimError):
    """Perda nao finita durante o treinamento.

    Attributes:
        round_index (int): Rodada em que a divergencia foi detectada.
    """

    exit_code = EXIT_DIVERGENCE

    def __init__(self, message, round_index=None):
        super().__init__(message)
        self.round_index = round_index


class InapplicableAttackError(DgpSimError):
    """Ataque nao se aplica ao modelo ou a observacao (ex.: imprint sem camada imprint)."""

    exit_code = EXIT_INAPPLICABLE


class ShapeMismatchError(DgpSimError, ValueError):
    """Formatos de tensores incompativeis."""
