"""File formats: delimited matrix files, run configs and the binary model file.

Model file layout::

    magic (8 bytes) | header length (uint64, little-endian) | JSON header | blocks

The header is UTF-8 JSON with sorted keys and records the format version,
shapes, seed, configuration and, for each array block, its dtype, shape and
byte offset relative to the start of the block area.  Blocks are raw
little-endian 64-bit floats or integers, concatenated in header order.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .dictionary import MultiscaleDictionary
from .errors import ConfigError, DataError, ModelFileError, NoObservedEntries
from .gibbs import PosteriorDraws
from .inference import FittedModel
from .model import Hyperparams
from .tree import ClusterTree

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "read_matrix",
    "write_matrix",
    "write_table",
    "load_config",
    "model_to_bytes",
    "model_from_bytes",
    "save_model",
    "load_model",
]

MAGIC = b"GEODEMF\x00"
FORMAT_VERSION = 1

_MISSING_TOKENS = {"", "nan", "na"}


def _parse_cell(token: str) -> float | None:
    t = token.strip()
    if t.lower() in _MISSING_TOKENS:
        return np.nan
    try:
        return float(t)
    except ValueError:
        return None


def read_matrix(path, delimiter: str | None = None, require_observed: bool = True) -> np.ndarray:
    """Read a delimited numeric matrix; NaN or an empty field marks a missing entry.

    A first row that does not parse as numbers is treated as a header.  The
    delimiter is sniffed among comma, tab, semicolon and whitespace when not
    given.  An empty file gives a (0, 0) array.
    """
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return np.empty((0, 0))
    if delimiter is None:
        first = lines[0]
        delimiter = next((c for c in (",", "\t", ";") if c in first), None)
    if delimiter is None:
        rows = [ln.split() for ln in lines]
    else:
        rows = list(csv.reader(lines, delimiter=delimiter))
    parsed = [[_parse_cell(tok) for tok in row] for row in rows]
    if any(v is None for v in parsed[0]):
        parsed, rows = parsed[1:], rows[1:]
    if not parsed:
        return np.empty((0, len(rows[0]) if rows else 0))
    width = len(parsed[0])
    for i, row in enumerate(parsed):
        if len(row) != width:
            raise DataError(f"{path}: row {i + 1} has {len(row)} fields, expected {width}")
        if any(v is None for v in row):
            bad = rows[i][[v is None for v in row].index(True)]
            raise DataError(f"{path}: row {i + 1} has a non-numeric entry {bad!r}")
    Y = np.array(parsed, dtype=float)
    if require_observed and np.any(np.isnan(Y).all(axis=1)):
        i = int(np.flatnonzero(np.isnan(Y).all(axis=1))[0])
        raise NoObservedEntries(f"{path}: row {i + 1} has no observed entries")
    return Y


def write_matrix(path, Y, header=None) -> None:
    """Write ``Y`` as CSV with ``NaN`` for missing entries, at full float precision."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for row in Y:
            w.writerow(["NaN" if np.isnan(v) else repr(float(v)) for v in row])


def write_table(path, columns: dict) -> None:
    """Write named columns as CSV with a header; ``path`` of ``None`` or ``-`` returns the text."""
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for i in range(n):
        w.writerow([_fmt(columns[c][i]) for c in names])
    if path is None or str(path) == "-":
        return buf.getvalue()
    Path(path).write_text(buf.getvalue())
    return None


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def load_config(path) -> dict:
    """Load a JSON run configuration into a plain dict."""
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be an object of key/value pairs")
    return values


def _model_arrays(model: FittedModel) -> dict:
    tree, dic, dr = model.tree, model.dictionary, model.draws
    sizes = np.array([len(ix) for ix in tree.indices], dtype=np.int64)
    return {
        "tree/level": tree.level,
        "tree/position": tree.position,
        "tree/parent": tree.parent,
        "tree/left": tree.left,
        "tree/right": tree.right,
        "tree/index_sizes": sizes,
        "tree/indices": np.concatenate(tree.indices) if tree.indices else np.empty(0, np.int64),
        "dictionary/mu": dic.mu,
        "dictionary/basis": dic.basis,
        "dictionary/singular_values": dic.singular_values,
        "draws/membership": dr.membership,
        "draws/S": dr.S,
        "draws/R": dr.R,
        "draws/u": dr.u,
        "draws/tau": dr.tau,
        "draws/retained": dr.retained,
        "draws/sigma2": dr.sigma2,
        "draws/adapt_iters": dr.adapt_iters,
        "draws/adapt_retained": dr.adapt_retained,
        "draws/adapt_deleted": dr.adapt_deleted,
        "draws/adapt_reinserted": dr.adapt_reinserted,
    }


def model_to_bytes(model: FittedModel) -> bytes:
    blocks, entries, offset = [], {}, 0
    for name, arr in _model_arrays(model).items():
        arr = np.asarray(arr)
        if arr.dtype == bool:
            kind, raw = "bool", arr.astype("<i8")
        elif np.issubdtype(arr.dtype, np.integer):
            kind, raw = "int", arr.astype("<i8")
        else:
            kind, raw = "float", arr.astype("<f8")
        data = np.ascontiguousarray(raw).tobytes()
        entries[name] = {"kind": kind, "dtype": raw.dtype.str, "shape": list(arr.shape), "offset": offset}
        blocks.append(data)
        offset += len(data)
    header = {
        "format": "geode-model",
        "version": FORMAT_VERSION,
        "seed": model.hyperparams.seed,
        "config": model.hyperparams.to_dict(),
        "shapes": {
            "n_obs": model.tree.n_obs,
            "n_nodes": model.tree.n_nodes,
            "D": model.D,
            "d": model.d,
            "n_draws": model.n_draws,
        },
        "n_obs": model.draws.n_obs,
        "burn_in": model.draws.burn_in,
        "blocks": entries,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(text)) + text + b"".join(blocks)


def model_from_bytes(buf: bytes) -> FittedModel:
    if buf[: len(MAGIC)] != MAGIC:
        raise ModelFileError("not a geode model file (bad magic bytes)")
    try:
        (hlen,) = struct.unpack("<Q", buf[len(MAGIC) : len(MAGIC) + 8])
        start = len(MAGIC) + 8
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"corrupt model header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model file version {header.get('version')!r}")
    body = memoryview(buf)[start + hlen :]
    arrays = {}
    for name, e in header["blocks"].items():
        count = int(np.prod(e["shape"], dtype=np.int64))
        dtype = np.dtype(e["dtype"])
        end = e["offset"] + count * dtype.itemsize
        if end > len(body):
            raise ModelFileError(f"model file truncated inside block {name!r}")
        arr = np.frombuffer(body[e["offset"] : end], dtype=dtype).reshape(e["shape"])
        arr = arr.astype(bool) if e["kind"] == "bool" else arr.astype(dtype.newbyteorder("="))
        arrays[name] = arr

    sizes = arrays["tree/index_sizes"]
    flat = arrays["tree/indices"]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    tree = ClusterTree.from_arrays(
        arrays["tree/level"],
        arrays["tree/position"],
        arrays["tree/parent"],
        arrays["tree/left"],
        arrays["tree/right"],
        [flat[a:b] for a, b in zip(bounds[:-1], bounds[1:])],
        header["shapes"]["n_obs"],
    )
    dictionary = MultiscaleDictionary(
        mu=arrays["dictionary/mu"],
        basis=arrays["dictionary/basis"],
        singular_values=arrays["dictionary/singular_values"],
    )
    draws = PosteriorDraws(
        **{k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("draws/")},
        n_obs=header["n_obs"],
        burn_in=header["burn_in"],
    )
    try:
        hyper = Hyperparams.from_dict(header["config"])
    except ConfigError as exc:
        raise ModelFileError(f"model file carries an invalid configuration: {exc}") from exc
    return FittedModel(tree, dictionary, hyper, draws)


def save_model(model: FittedModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> FittedModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    return model_from_bytes(buf)
