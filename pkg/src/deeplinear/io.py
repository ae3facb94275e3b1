"""Matrix text files, weight-stack directories and canonical JSON reports.

Matrix text format: a ``rows cols`` header line followed by ``rows`` lines of
``cols`` whitespace-separated decimal literals.  Values are written with 17
significant digits, which round-trips every float64 exactly.
"""

from __future__ import annotations

import enum
import json
import math
from pathlib import Path

import numpy as np

from .model import DatasetPair, NetworkShape, WeightStack


class MatrixFormatError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def parse_matrix(text: str, source: str = "<string>") -> np.ndarray:
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MatrixFormatError(source, 1, "empty file, expected 'rows cols' header")
    header = lines[0].split()
    try:
        rows, cols = (int(t) for t in header)
    except ValueError:
        raise MatrixFormatError(source, 1, f"bad header {lines[0]!r}, expected 'rows cols'") from None
    if rows < 1 or cols < 1:
        raise MatrixFormatError(source, 1, "dimensions must be positive")
    if len(lines) - 1 != rows:
        raise MatrixFormatError(source, len(lines), f"expected {rows} data lines, found {len(lines) - 1}")
    out = np.empty((rows, cols))
    for i, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if len(tokens) != cols:
            raise MatrixFormatError(source, i, f"expected {cols} values, found {len(tokens)}")
        for j, tok in enumerate(tokens):
            try:
                value = float(tok)
            except ValueError:
                raise MatrixFormatError(source, i, f"not a number: {tok!r}") from None
            if not math.isfinite(value):
                raise MatrixFormatError(source, i, f"non-finite value {tok!r}")
            out[i - 2, j] = value
    return out


def format_matrix(M) -> str:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    rows = [f"{M.shape[0]} {M.shape[1]}"]
    rows.extend(" ".join(f"{v:.17g}" for v in row) for row in M)
    return "\n".join(rows) + "\n"


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read matrix file {path}: {exc.strerror}") from None
    return parse_matrix(text, str(path))


def write_matrix(path, M):
    Path(path).write_text(format_matrix(M))


def load_dataset(x_path, y_path) -> DatasetPair:
    return DatasetPair(read_matrix(x_path), read_matrix(y_path))


MANIFEST = "manifest.json"


def save_weights(directory, W: WeightStack):
    """One matrix file per layer plus ``manifest.json`` listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for k in range(1, W.H + 2):
        name = f"W{k}.txt"
        write_matrix(directory / name, W[k])
        names.append(name)
    manifest = {"format": "matrix-text", "shape": list(W.shape.widths), "layers": names}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def load_weights(directory) -> WeightStack:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {directory / MANIFEST}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{directory / MANIFEST}: invalid JSON ({exc})") from None
    shape = NetworkShape(tuple(manifest["shape"]))
    layers = tuple(read_matrix(directory / name) for name in manifest["layers"])
    return WeightStack(shape, layers)


def to_jsonable(obj):
    """Recursively convert numpy values, enums and tuples into JSON-native types."""
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else repr(value)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(report) -> str:
    """Deterministic serialization: sorted keys, shortest round-trip float repr."""
    return json.dumps(to_jsonable(report), sort_keys=True, indent=2, allow_nan=False) + "\n"
