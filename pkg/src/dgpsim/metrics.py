"""
Metricas de distancia entre gradientes, qualidade de imagem e contabilidade
de comunicacao em bytes.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import custom_logging as logging
from .defense import LocationSet, SparseGradient
from .exceptions import ShapeMismatchError
from .model import GradientSet

logger = logging.getLogger(__name__)

SSIM_WINDOW = 4
GradLike = Union[GradientSet, SparseGradient]


def _dense(value: GradLike) -> GradientSet:
    return value.densify() if isinstance(value, SparseGradient) else value


def grad_distance(a: GradLike, b: GradLike, metric: str = 'euclidean') -> float:
    """Distancia entre dois gradientes sobre a concatenacao de todos os tensores.

    Args:
        a, b: GradientSet ou SparseGradient (densificado) com a mesma estrutura.
        metric (str): 'euclidean' (||a - b||) ou 'cosine' (1 - cos). Um operando
            de norma zero tem distancia cosseno 1 por convencao.

    Raises:
        ShapeMismatchError: Estruturas diferentes.
        ValueError: Metrica desconhecida.

    Example:
        >>> a = GradientSet({'w': np.array([1.0, 0.0])})
        >>> b = GradientSet({'w': np.array([0.0, 1.0])})
        >>> grad_distance(a, b, 'cosine')
        1.0
    """
    a, b = _dense(a), _dense(b)
    a.check_compatible(b)
    if metric == 'euclidean':
        return (a - b).norm()
    if metric == 'cosine':
        norms = a.norm() * b.norm()
        if norms == 0.0:
            return 1.0
        return float(1.0 - a.dot(b) / norms)
    raise ValueError(f"Metrica desconhecida: {metric}")


def relative_distance(full: GradLike, observed: GradLike) -> float:
    """||grad - g|| / ||grad||; zero quando o gradiente completo e nulo."""
    full = _dense(full)
    norm = full.norm()
    return grad_distance(full, observed, 'euclidean') / norm if norm > 0 else 0.0


@dataclass(frozen=True)
class QualityScores:
    """MSE, PSNR e SSIM de uma reconstrucao; psnr = inf sse mse = 0."""

    mse: float
    psnr: float
    ssim: float

    def to_dict(self) -> Dict[str, object]:
        return {
            'mse': self.mse,
            'psnr': 'inf' if np.isinf(self.psnr) else self.psnr,
            'ssim': self.ssim,
        }


def _as_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        side = int(round(np.sqrt(x.size)))
        return x.reshape(side, side) if side * side == x.size else x.reshape(1, -1)
    return x


def ssim(x: np.ndarray, y: np.ndarray, dynamic_range: float = 1.0) -> float:
    """SSIM com janela uniforme 4x4, passo 1, media sobre as janelas.

    Imagens menores que a janela usam uma unica janela global. Variancias
    e covariancia sao populacionais.
    """
    a, b = _as_image(x), _as_image(y)
    c1, c2 = (0.01 * dynamic_range) ** 2, (0.03 * dynamic_range) ** 2
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        wa, wb = a.reshape(1, -1), b.reshape(1, -1)
    else:
        shape = (SSIM_WINDOW, SSIM_WINDOW)
        wa = sliding_window_view(a, shape).reshape(-1, SSIM_WINDOW * SSIM_WINDOW)
        wb = sliding_window_view(b, shape).reshape(-1, SSIM_WINDOW * SSIM_WINDOW)
    mu_a, mu_b = wa.mean(axis=1), wb.mean(axis=1)
    var_a = ((wa - mu_a[:, None]) ** 2).mean(axis=1)
    var_b = ((wb - mu_b[:, None]) ** 2).mean(axis=1)
    cov = ((wa - mu_a[:, None]) * (wb - mu_b[:, None])).mean(axis=1)
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def image_quality(x: np.ndarray, x_rec: np.ndarray, dynamic_range: float = 1.0) -> QualityScores:
    """Compara a imagem original com a reconstruida.

    Raises:
        ShapeMismatchError: Formatos diferentes.
        ValueError: dynamic_range <= 0.
    """
    x, x_rec = np.asarray(x, dtype=np.float64), np.asarray(x_rec, dtype=np.float64)
    if x.shape != x_rec.shape:
        raise ShapeMismatchError(f"Imagens com formatos diferentes: {x.shape} vs {x_rec.shape}")
    if dynamic_range <= 0:
        raise ValueError("dynamic_range deve ser positivo")
    mse = float(np.mean((x - x_rec) ** 2))
    psnr = float('inf') if mse == 0.0 else float(10.0 * np.log10(dynamic_range ** 2 / mse))
    return QualityScores(mse, psnr, ssim(x, x_rec, dynamic_range))


def ledger_record(wire: Union[SparseGradient, GradientSet, LocationSet], direction: str = 'upload') -> int:
    """Bytes de uma mensagem segundo o formato de fio.

    SparseGradient esparso: soma por tensor de (1 + len(id) + 4 + 8 nnz);
    mensagens densas e GradientSet: 4 bytes por parametro; LocationSet
    (download do ADGP): 4 bytes por posicao de I mais a mascara de bits.
    """
    if direction not in ('upload', 'download'):
        raise ValueError(f"Direcao desconhecida: {direction}")
    if isinstance(wire, LocationSet):
        return 4 * wire.popcount() + wire.bitmask_bytes()
    if isinstance(wire, GradientSet):
        return 4 * wire.param_count
    return wire.wire_bytes()


@dataclass
class CommLedger:
    """Bytes enviados e recebidos por rodada e por usuario.

    Attributes:
        entries (list): Tuplas (rodada, usuario, upload, download).
        flags (list): Avisos como upload esparso maior que o denso.
    """

    entries: List[Tuple[int, int, int, int]] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    def record(self, round_index: int, user: int, upload: SparseGradient,
               download: Union[SparseGradient, GradientSet, LocationSet]) -> Tuple[int, int]:
        up = ledger_record(upload, 'upload')
        down = ledger_record(download, 'download')
        if not upload.dense and up >= upload.dense_bytes():
            flag = f"rodada {round_index} usuario {user}: upload esparso {up} >= denso {upload.dense_bytes()}"
            if not self.flags:
                logger.warning(flag)
            self.flags.append(flag)
        self.entries.append((round_index, user, up, down))
        return up, down

    @property
    def total_upload(self) -> int:
        return sum(e[2] for e in self.entries)

    @property
    def total_download(self) -> int:
        return sum(e[3] for e in self.entries)

    def rows(self) -> List[Dict[str, int]]:
        return [{'round': r, 'user': u, 'upload_bytes': up, 'download_bytes': down}
                for r, u, up, down in self.entries]
