"""Plain-text coordinate and factor files.

Coordinate (COO) files::

    # indices: i=146 j=168 k=5
    0 3 1 1.0
    ...

one 0-based entry per line, ``#`` lines are comments. Factor files carry a
``# factor <name> indices: i=146 r=5`` header and one row per cell,
``<coords> value`` optionally followed by the variational ``C D E L`` columns.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConflictingDuplicate, DataFormatError
from .tensor import Factor, SparseTensor

_HEADER = re.compile(r"^#\s*indices\s*:(.*)$")
_FACTOR_HEADER = re.compile(r"^#\s*factor\s+(\S+)\s+indices\s*:(.*)$")


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_dims(text, path, line):
    dims = {}
    for tok in text.split():
        name, eq, size = tok.partition("=")
        if not eq:
            raise DataFormatError(f"bad index declaration {tok!r}", line, path)
        try:
            dims[name] = int(size)
        except ValueError:
            raise DataFormatError(f"bad cardinality in {tok!r}", line, path) from None
        if dims[name] < 1:
            raise DataFormatError(f"cardinality of {name!r} must be >= 1", line, path)
    if not dims:
        raise DataFormatError("header declares no indices", line, path)
    return dims


def _format_dims(names, shape):
    return " ".join(f"{n}={s}" for n, s in zip(names, shape))


def parse_coo(text: str, path="<string>", reindex=False, dedupe=False, indices=None):
    """Parse COO text into a :class:`SparseTensor`.

    ``reindex`` shifts 1-based coordinates to 0-based. ``dedupe`` collapses
    repeated coordinates with equal values and raises
    :class:`ConflictingDuplicate` when values differ; without it any repeat is
    an error. Files without a header need ``indices``; their shape is then
    inferred from the largest coordinate.
    """
    dims = None
    seen = {}
    order = []
    width = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = _HEADER.match(line)
            if m:
                if dims is not None or order:
                    raise DataFormatError("header must come first and appear once", lineno, path)
                dims = _parse_dims(m.group(1), path, lineno)
                width = len(dims) + 1
            continue
        parts = line.split()
        if width is None:
            width = len(indices) + 1 if indices else len(parts)
        if len(parts) != width:
            raise DataFormatError(f"expected {width} fields, found {len(parts)}", lineno, path)
        try:
            coord = tuple(int(p) for p in parts[:-1])
            value = float(parts[-1])
        except ValueError:
            raise DataFormatError(f"cannot parse entry {line!r}", lineno, path) from None
        if reindex:
            coord = tuple(c - 1 for c in coord)
        if not np.isfinite(value) or value < 0:
            raise DataFormatError(f"value {value} is not a finite nonnegative number", lineno, path)
        if any(c < 0 for c in coord):
            raise DataFormatError(f"negative coordinate {coord}", lineno, path)
        if dims is not None and any(c >= s for c, s in zip(coord, dims.values())):
            raise DataFormatError(f"coordinate {coord} out of range for {_format_dims(dims, dims.values())}",
                                  lineno, path)
        if coord in seen:
            prev = seen[coord]
            if not dedupe:
                raise DataFormatError(f"duplicate coordinate {coord}", lineno, path)
            if prev != value:
                raise ConflictingDuplicate(
                    f"{path}:{lineno}: coordinate {coord} repeated with values {prev} and {value}"
                )
            continue
        seen[coord] = value
        order.append(coord)
    if dims is None:
        ndim = width - 1 if width else len(indices or ())
        names = tuple(indices) if indices else tuple(f"d{m}" for m in range(ndim))
        if len(names) != ndim:
            raise DataFormatError(f"{len(names)} index names for {ndim}-way data", None, path)
        shape = tuple(max((c[m] for c in order), default=0) + 1 for m in range(ndim))
        dims = dict(zip(names, shape))
    names = tuple(dims)
    coords = np.array(order, dtype=np.int64).reshape(-1, len(names))
    values = np.array([seen[c] for c in order], dtype=np.float64)
    return SparseTensor(names, tuple(dims.values()), coords, values)


def read_coo(path, **kw) -> SparseTensor:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataFormatError(f"cannot read data file: {e.strerror}", None, path) from None
    return parse_coo(text, path=path, **kw)


def format_coo(t: SparseTensor) -> str:
    lines = [f"# indices: {_format_dims(t.indices, t.shape)}"]
    for c, v in zip(t.coords, t.values):
        lines.append(" ".join(str(int(x)) for x in c) + f" {float(v)!r}")
    return "\n".join(lines) + "\n"


def write_coo(path, t: SparseTensor):
    atomic_write(path, format_coo(t))


def format_factor(f: Factor, shape_names=None) -> str:
    header = f"# factor {f.name} indices: {_format_dims(f.indices, f.shape)}"
    cols = ["values"]
    if f.has_vb:
        header += "\n# columns: " + " ".join(f.indices) + " value C D E L"
        cols += ["C", "D", "E", "L"]
    else:
        header += "\n# columns: " + " ".join(f.indices) + " value"
    arrays = [f.field("values").ravel()] + [getattr(f, k).ravel() for k in cols[1:]]
    grid = np.indices(f.shape).reshape(len(f.shape), -1).T
    lines = [header]
    for row, c in enumerate(grid):
        lines.append(" ".join(str(int(x)) for x in c) + " " + " ".join(repr(float(a[row])) for a in arrays))
    return "\n".join(lines) + "\n"


def write_factor(path, f: Factor):
    atomic_write(path, format_factor(f))


def read_factor(path) -> Factor:
    path = str(path)
    text = Path(path).read_text()
    name = dims = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = _FACTOR_HEADER.match(line)
            if m:
                name, dims = m.group(1), _parse_dims(m.group(2), path, lineno)
            continue
        if dims is None:
            raise DataFormatError("missing '# factor' header", lineno, path)
        rows.append([float(x) for x in line.split()])
    if dims is None:
        raise DataFormatError("missing '# factor' header", None, path)
    shape = tuple(dims.values())
    data = np.array(rows, dtype=np.float64).reshape(-1, len(shape) + (len(rows[0]) - len(shape) if rows else 1))
    idx = tuple(data[:, :len(shape)].astype(np.int64).T)
    fields = []
    for col in range(len(shape), data.shape[1]):
        a = np.zeros(shape)
        a[idx] = data[:, col]
        fields.append(a)
    kw = {}
    if len(fields) == 5:
        kw = dict(zip("CDEL", fields[1:]))
    return Factor(name, tuple(dims), fields[0], **kw)


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
