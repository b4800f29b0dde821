"""Readers and writers for matrices, point sets and sparse third-order tensors."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .errors import ParseError

FORMATS = ("csv", "matrixmarket", "tensor3", "points")


def _number(tok: str, line: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"not a number: {tok!r}", line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {tok!r}", line)
    return v


def _index(tok: str, bound: int, line: int) -> int:
    try:
        i = int(tok)
    except ValueError:
        raise ParseError(f"not an integer index: {tok!r}", line) from None
    if not 1 <= i <= bound:
        raise ParseError(f"index {i} outside 1..{bound}", line)
    return i - 1


def _is_float(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _content_lines(text: str, comment: str):
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if s and not s.startswith(comment):
            yield no, s


def read_csv(text: str) -> np.ndarray:
    """Comma-separated rows of numbers; blank lines and '#' comments skipped.
    A first row that does not parse as numbers is treated as a header."""
    rows, width = [], None
    for no, fields in enumerate(csv.reader(text.splitlines()), start=1):
        if not fields or not "".join(fields).strip() or fields[0].lstrip().startswith("#"):
            continue
        try:
            row = [_number(f.strip(), no) for f in fields]
        except ParseError:
            if not rows and width is None and not all(_is_float(f) for f in fields):
                width = len(fields)
                continue
            raise
        if width is not None and len(row) != width:
            raise ParseError(f"expected {width} fields, got {len(row)}", no)
        width = len(row)
        rows.append(row)
    if not rows:
        raise ParseError("no data rows")
    return np.array(rows, dtype=float)


def read_matrixmarket(text: str) -> np.ndarray:
    """MatrixMarket real/integer matrices, coordinate or array layout, general
    or symmetric.  Coordinate entries are densified; duplicates add up."""
    lines = text.splitlines()
    if not lines or not lines[0].lower().startswith("%%matrixmarket"):
        raise ParseError("missing %%MatrixMarket banner", 1)
    banner = lines[0].lower().split()
    if len(banner) < 5 or banner[1] != "matrix":
        raise ParseError("malformed banner", 1)
    layout, field, symmetry = banner[2], banner[3], banner[4]
    if layout not in ("coordinate", "array"):
        raise ParseError(f"unsupported layout {layout!r}", 1)
    if field not in ("real", "integer", "double"):
        raise ParseError(f"unsupported field {field!r}", 1)
    if symmetry not in ("general", "symmetric"):
        raise ParseError(f"unsupported symmetry {symmetry!r}", 1)
    body = list(_content_lines("\n".join(lines[1:]), "%"))
    body = [(no + 1, s) for no, s in body]
    if not body:
        raise ParseError("missing size line", len(lines))
    no, size = body[0]
    toks = size.split()
    want = 3 if layout == "coordinate" else 2
    if len(toks) != want:
        raise ParseError(f"size line needs {want} integers", no)
    try:
        dims = [int(t) for t in toks]
    except ValueError:
        raise ParseError("size line needs integers", no) from None
    if min(dims) < 0:
        raise ParseError("negative size", no)
    m, n = dims[0], dims[1]
    M = np.zeros((m, n))
    entries = body[1:]
    if layout == "coordinate":
        if len(entries) != dims[2]:
            raise ParseError(f"expected {dims[2]} entries, found {len(entries)}", entries[-1][0] if entries else no)
        for no, s in entries:
            t = s.split()
            if len(t) != 3:
                raise ParseError("entry needs 'row col value'", no)
            i, j, v = _index(t[0], m, no), _index(t[1], n, no), _number(t[2], no)
            M[i, j] += v
            if symmetry == "symmetric" and i != j:
                M[j, i] += v
    else:
        vals = []
        for no, s in entries:
            t = s.split()
            if len(t) != 1:
                raise ParseError("array layout needs one value per line", no)
            vals.append(_number(t[0], no))
        if symmetry == "general":
            if len(vals) != m * n:
                raise ParseError(f"expected {m * n} values, found {len(vals)}", entries[-1][0] if entries else no)
            M = np.array(vals).reshape(n, m).T
        else:
            need = n * (n + 1) // 2
            if m != n or len(vals) != need:
                raise ParseError(f"symmetric array needs {need} values", entries[-1][0] if entries else no)
            it = iter(vals)
            for j in range(n):
                for i in range(j, n):
                    M[i, j] = M[j, i] = next(it)
    return M


def read_tensor3(text: str) -> np.ndarray:
    """Header 'n1 n2 n3 nnz' then nnz lines 'i j k v' with 1-based indices."""
    body = list(_content_lines(text, "#"))
    if not body:
        raise ParseError("missing header", 1)
    no, head = body[0]
    t = head.split()
    if len(t) != 4:
        raise ParseError("header needs 'n1 n2 n3 nnz'", no)
    try:
        n1, n2, n3, nnz = (int(x) for x in t)
    except ValueError:
        raise ParseError("header needs integers", no) from None
    if min(n1, n2, n3) < 1 or nnz < 0:
        raise ParseError("dimensions must be positive", no)
    entries = body[1:]
    if len(entries) != nnz:
        raise ParseError(f"expected {nnz} entries, found {len(entries)}", entries[-1][0] if entries else no)
    T = np.zeros((n1, n2, n3))
    for no, s in entries:
        t = s.split()
        if len(t) != 4:
            raise ParseError("entry needs 'i j k value'", no)
        T[_index(t[0], n1, no), _index(t[1], n2, no), _index(t[2], n3, no)] += _number(t[3], no)
    return T


def ingest(path, fmt: str = "csv") -> np.ndarray:
    """Load a dense matrix (csv, matrixmarket, points) or a tensor (tensor3)."""
    if fmt not in FORMATS:
        raise ParseError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    text = Path(path).read_text()
    if fmt == "matrixmarket":
        return read_matrixmarket(text)
    if fmt == "tensor3":
        return read_tensor3(text)
    return read_csv(text)


def guess_format(path) -> str:
    suffix = Path(path).suffix.lower()
    return {".mtx": "matrixmarket", ".mm": "matrixmarket", ".tns": "tensor3", ".tensor": "tensor3"}.get(suffix, "csv")


def write_matrix(path, M) -> None:
    np.savetxt(path, np.atleast_2d(M), delimiter=",", fmt="%.17g")


def write_coreset(path, indices, weights) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "weight"])
        for i, x in zip(indices, weights):
            w.writerow([int(i), repr(float(x))])


def read_loss_table(path) -> dict[int, float]:
    """Lookup file 'center_index,loss' (0-based) for data selection."""
    M = read_csv(Path(path).read_text())
    if M.shape[1] != 2:
        raise ParseError("loss table needs two columns: center index, loss")
    return {int(i): float(v) for i, v in M}
