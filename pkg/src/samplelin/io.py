"""CSV storage for problem instances and experiment outputs.

Floats are written with ``repr`` so files round-trip exactly and identical
runs produce identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import scipy.sparse

from .errors import SchemaError
from .model import DenseDesign, NoisePrecision, Problem

__all__ = [
    "fmt",
    "write_csv",
    "read_csv",
    "write_matrix",
    "read_matrix",
    "write_coo",
    "read_coo",
    "load_matrix",
    "write_dataset",
    "read_dataset",
    "save_instance",
    "load_instance",
]


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path, expected_header=None):
    """Return ``(header, rows)`` with cells as strings."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        try:
            header = tuple(next(r))
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [row for row in r if row]
    if expected_header is not None and header != tuple(expected_header):
        raise SchemaError(f"{path}: header {header} does not match {tuple(expected_header)}")
    return header, rows


def _header(path, line: str, tag: str | None):
    parts = line.lstrip("#").split()
    if not line.startswith("#") or (tag is not None and (not parts or parts[0] != tag)):
        raise SchemaError(f"{path}: missing '# {tag + ' ' if tag else ''}rows cols' header")
    nums = parts[1:] if tag else parts
    try:
        return [int(p) for p in nums]
    except ValueError:
        raise SchemaError(f"{path}: malformed header {line!r}") from None


def write_matrix(path, A: np.ndarray) -> None:
    """Dense row-major CSV with a ``# rows cols`` header line."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    with open(path, "w") as fh:
        fh.write(f"# {A.shape[0]} {A.shape[1]}\n")
        for row in A:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix(path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty file")
    dims = _header(path, lines[0], None)
    if len(dims) != 2:
        raise SchemaError(f"{path}: expected '# rows cols'")
    rows, cols = dims
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != rows:
        raise SchemaError(f"{path}: header says {rows} rows, found {len(body)}")
    out = np.empty((rows, cols))
    for i, ln in enumerate(body):
        vals = ln.split(",")
        if len(vals) != cols:
            raise SchemaError(f"{path}: row {i} has {len(vals)} values, expected {cols}")
        out[i] = [float(v) for v in vals]
    return out


def write_coo(path, A) -> None:
    """Sparse triplets: ``# coo rows cols nnz`` then ``i,j,v`` lines."""
    A = scipy.sparse.coo_matrix(A)
    A.sum_duplicates()
    order = np.lexsort((A.col, A.row))
    with open(path, "w") as fh:
        fh.write(f"# coo {A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for t in order:
            fh.write(f"{int(A.row[t])},{int(A.col[t])},{float(A.data[t])!r}\n")


def read_coo(path) -> scipy.sparse.csr_matrix:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty file")
    dims = _header(path, lines[0], "coo")
    if len(dims) != 3:
        raise SchemaError(f"{path}: expected '# coo rows cols nnz'")
    rows, cols, nnz = dims
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != nnz:
        raise SchemaError(f"{path}: header says {nnz} entries, found {len(body)}")
    I = np.empty(nnz, dtype=np.intp)
    J = np.empty(nnz, dtype=np.intp)
    V = np.empty(nnz)
    for t, ln in enumerate(body):
        parts = ln.split(",")
        if len(parts) != 3:
            raise SchemaError(f"{path}: line {t + 2} is not an i,j,v triplet")
        I[t], J[t], V[t] = int(parts[0]), int(parts[1]), float(parts[2])
    if nnz and (I.max() >= rows or J.max() >= cols or I.min() < 0 or J.min() < 0):
        raise SchemaError(f"{path}: index outside {rows}x{cols}")
    return scipy.sparse.csr_matrix((V, (I, J)), shape=(rows, cols))


def load_matrix(path):
    """Dense or COO file, decided by the header line."""
    with open(path) as fh:
        first = fh.readline()
    return read_coo(path) if first.lstrip("#").split()[:1] == ["coo"] else read_matrix(path)


def write_dataset(path, ids, Y: np.ndarray) -> None:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    header = ["id"] + [f"y_{o + 1}" for o in range(Y.shape[1])]
    write_csv(path, header, ([i, *row] for i, row in zip(ids, Y)))


def read_dataset(path):
    header, rows = read_csv(path)
    if not header or header[0] != "id" or list(header[1:]) != [f"y_{o + 1}" for o in range(len(header) - 1)]:
        raise SchemaError(f"{path}: expected columns id,y_1..y_m, got {header}")
    ids = [r[0] for r in rows]
    Y = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), len(header) - 1)
    return ids, Y


def save_instance(directory, Phi, noise_blocks: np.ndarray, Y: np.ndarray, meta: dict) -> None:
    """Write ``phi.csv`` (dense or COO), ``noise.csv`` (the ``n`` stacked
    ``m x m`` blocks), ``dataset.csv`` and ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if scipy.sparse.issparse(Phi):
        write_coo(d / "phi.csv", Phi)
    else:
        write_matrix(d / "phi.csv", Phi)
    blocks = np.asarray(noise_blocks, dtype=np.float64)
    write_matrix(d / "noise.csv", blocks.reshape(-1, blocks.shape[-1]))
    write_dataset(d / "dataset.csv", range(len(Y)), Y)
    with open(d / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_instance(directory) -> tuple[Problem, dict]:
    d = Path(directory)
    for name in ("phi.csv", "noise.csv", "dataset.csv", "meta.json"):
        if not (d / name).exists():
            raise SchemaError(f"{d}: missing {name}")
    _, Y = read_dataset(d / "dataset.csv")
    n, m = Y.shape
    Phi = load_matrix(d / "phi.csv")
    blocks = read_matrix(d / "noise.csv")
    if blocks.shape != (n * m, m):
        raise SchemaError(f"{d}/noise.csv: expected {n * m}x{m} stacked blocks, got {blocks.shape}")
    with open(d / "meta.json") as fh:
        meta = json.load(fh)
    problem = Problem(DenseDesign(Phi, m=m), NoisePrecision(blocks.reshape(n, m, m)), Y)
    return problem, meta
