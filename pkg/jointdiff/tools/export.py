# jointdiff/tools/export.py
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def to_gray(grid: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255, rounding halves up."""
    grid = np.asarray(grid, dtype=np.float64)
    return np.clip(np.floor((grid + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def from_gray(gray: np.ndarray) -> np.ndarray:
    return np.asarray(gray, dtype=np.float64) / 127.5 - 1.0


def export_image(grid: np.ndarray, path: PathLike, png: bool = False) -> List[Path]:
    """Write a binary PGM (P5, maxval 255) and, if asked and available, a PNG.

    Args:
        grid: H x W values in [-1, 1].
        path: Target .pgm path.
        png: Also write a .png next to it when matplotlib is importable.

    Returns:
        Paths actually written.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"export_image expects a 2-D grid, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("export_image needs a finite grid")

    path = Path(path)
    gray = to_gray(grid)
    height, width = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(gray.tobytes())
    written = [path]

    if png:
        png_path = write_png(gray, path.with_suffix(".png"))
        if png_path is not None:
            written.append(png_path)
    return written


def write_png(gray: np.ndarray, path: PathLike) -> Optional[Path]:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping PNG export")
        return None
    plt.imsave(str(path), gray, cmap="gray", vmin=0, vmax=255)
    return Path(path)


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a binary P5 PGM written by `export_image`; returns values in [-1, 1]."""
    data = Path(path).read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path} has a truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"Only maxval 255 is supported, got {maxval}")
    payload = data[pos + 1:pos + 1 + width * height]
    if len(payload) != width * height:
        raise ValueError(f"{path} payload is truncated")
    return from_gray(np.frombuffer(payload, dtype=np.uint8).reshape(height, width))


def write_tsv(rows: Sequence[Dict[str, object]], path: PathLike, columns: Optional[Sequence[str]] = None) -> Path:
    """Plain tab-separated table with a header row; floats use repr precision."""
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_cell(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_tsv(path: PathLike) -> List[Dict[str, str]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        return []
    columns = lines[0].split("\t")
    return [dict(zip(columns, line.split("\t"))) for line in lines[1:] if line]


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(_cell(v) for v in value)
    return str(value)
