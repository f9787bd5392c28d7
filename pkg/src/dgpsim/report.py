"""
Artefatos em disco: JSON Lines, CSV, imagens PGM (P2 ASCII) e graficos SVG.

Os graficos usam matplotlib com backend Agg e SVG sem data e com hashsalt
fixo, para que entradas iguais gerem arquivos identicos byte a byte.
"""

import csv
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import custom_logging as logging  # noqa: E402

logger = logging.getLogger(__name__)

matplotlib.rcParams['svg.hashsalt'] = 'dgpsim'
matplotlib.rcParams['svg.fonttype'] = 'none'

PGM_MAXVAL = 255


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    return value


def dumps(obj) -> str:
    """JSON determinista (chaves ordenadas, nao finitos viram null)."""
    return json.dumps(_jsonable(obj), sort_keys=True)


def write_jsonl(path, records: Iterable[Mapping]) -> int:
    count = 0
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        for record in records:
            handle.write(dumps(record) + '\n')
            count += 1
    return count


def read_jsonl(path) -> List[Dict]:
    with open(path, encoding='utf-8') as handle:
        return [json.loads(line) for line in handle if line.strip()]


def write_csv(path, rows: Sequence[Mapping], columns: Sequence[str]) -> None:
    """CSV com cabecalho fixo; valores ausentes ficam vazios."""
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns), lineterminator='\n', extrasaction='ignore')
        writer.writeheader()
        for row in rows:
            writer.writerow({key: ('' if row.get(key) is None else row.get(key)) for key in columns})


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, encoding='utf-8', newline='') as handle:
        return list(csv.DictReader(handle))


def write_pgm(path, image: np.ndarray, side: Optional[int] = None) -> None:
    """Grava imagem em [0, 1] como PGM ASCII (P2), 255 niveis."""
    pixels = np.asarray(image, dtype=np.float64)
    if pixels.ndim == 1:
        side = side or int(round(math.sqrt(pixels.size)))
        pixels = pixels.reshape(-1, side) if pixels.size % side == 0 else pixels.reshape(1, -1)
    levels = np.rint(np.clip(np.nan_to_num(pixels), 0.0, 1.0) * PGM_MAXVAL).astype(int)
    height, width = levels.shape
    lines = ['P2', f"{width} {height}", str(PGM_MAXVAL)]
    lines.extend(' '.join(str(v) for v in row) for row in levels)
    Path(path).write_text('\n'.join(lines) + '\n', encoding='ascii')


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding='ascii').split()
    if tokens[0] != 'P2':
        raise ValueError(f"{path}: nao e um PGM P2")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array([int(v) for v in tokens[4:4 + width * height]], dtype=np.float64)
    return values.reshape(height, width) / maxval


def accuracy_rows(runs: Mapping[str, Sequence[Mapping]]) -> List[Dict[str, object]]:
    """Linhas (run, round, test_accuracy) das rodadas avaliadas de cada execucao."""
    rows = []
    for label in sorted(runs):
        for record in runs[label]:
            if record.get('kind', 'round') == 'round' and record.get('test_accuracy') is not None:
                rows.append({'run': label, 'round': record['round'], 'test_accuracy': record['test_accuracy']})
    return rows


def _save_svg(fig, path) -> None:
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)


def plot_accuracy(path, rows: Sequence[Mapping]) -> None:
    """Curvas de acuracia de teste por rodada, uma por execucao."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted({row['run'] for row in rows}):
        points = [row for row in rows if row['run'] == label]
        ax.plot([p['round'] for p in points], [p['test_accuracy'] for p in points], '-o', markersize=3, label=label)
    ax.set_title("Acuracia de teste")
    ax.set_xlabel("Rodada")
    ax.set_ylabel("Acuracia")
    ax.grid(True)
    if rows:
        ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)


def plot_distance_scatter(path, rows: Sequence[Mapping]) -> None:
    """Dispersao distancia relativa do gradiente x MSE/SSIM do ataque."""
    filled = [row for row in rows if row.get('achieved') not in (None, '')]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.scatter([float(r['achieved']) for r in filled], [float(r['mse']) for r in filled], color='r')
    ax1.set_title("MSE")
    ax1.set_xlabel("Distancia relativa")
    ax1.grid(True)
    ax2.scatter([float(r['achieved']) for r in filled], [float(r['ssim']) for r in filled], color='b')
    ax2.set_title("SSIM")
    ax2.set_xlabel("Distancia relativa")
    ax2.grid(True)
    fig.tight_layout()
    _save_svg(fig, path)
