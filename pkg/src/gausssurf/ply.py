"""Minimal PLY reader/writer (binary little-endian and ASCII read, binary write)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_NUMPY_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
                 "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class PlyFormatError(ValueError):
    pass


class _Element:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        self.props: list[tuple[str, str, str | None]] = []  # (name, dtype, list count dtype)


def _parse_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise PlyFormatError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements: list[_Element] = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyFormatError("unterminated PLY header")
        tokens = line.decode("ascii", "replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "format":
            fmt = tokens[1]
        elif key == "element":
            elements.append(_Element(tokens[1], int(tokens[2])))
        elif key == "property":
            if not elements:
                raise PlyFormatError("property before any element")
            if tokens[1] == "list":
                elements[-1].props.append((tokens[4], _PLY_TYPES[tokens[3]], _PLY_TYPES[tokens[2]]))
            else:
                if tokens[1] not in _PLY_TYPES:
                    raise PlyFormatError(f"unknown property type {tokens[1]!r}")
                elements[-1].props.append((tokens[2], _PLY_TYPES[tokens[1]], None))
        elif key == "end_header":
            break
    if fmt not in ("binary_little_endian", "ascii"):
        raise PlyFormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path) -> dict[str, dict[str, np.ndarray]]:
    """Read a PLY file into ``{element: {property: array}}``.

    List properties come back as an object array of per-row arrays, or as a
    2D array when every row has the same length.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        body = fh.read()
    out: dict[str, dict[str, np.ndarray]] = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for el in elements:
            cols: dict[str, list] = {p[0]: [] for p in el.props}
            for _ in range(el.count):
                for name, dt, cnt_dt in el.props:
                    if cnt_dt is None:
                        cols[name].append(float(tokens[pos]))
                        pos += 1
                    else:
                        n = int(tokens[pos])
                        cols[name].append(np.array([float(t) for t in tokens[pos + 1:pos + 1 + n]], dtype=dt))
                        pos += 1 + n
            out[el.name] = {k: _finish_column(v, dt) for (k, dt, _), v in zip(el.props, cols.values())}
        return out

    offset = 0
    for el in elements:
        if all(p[2] is None for p in el.props):
            dtype = np.dtype([(name, "<" + dt) for name, dt, _ in el.props])
            nbytes = dtype.itemsize * el.count
            if offset + nbytes > len(body):
                raise PlyFormatError(f"truncated PLY body in element {el.name!r}")
            arr = np.frombuffer(body, dtype=dtype, count=el.count, offset=offset)
            offset += nbytes
            out[el.name] = {name: arr[name].copy() for name, _, _ in el.props}
        else:
            out[el.name], offset = _read_list_element(body, offset, el)
    return out


def _finish_column(values, dt):
    if values and isinstance(values[0], np.ndarray):
        lengths = {len(v) for v in values}
        if len(lengths) == 1:
            return np.stack(values)
        arr = np.empty(len(values), dtype=object)
        arr[:] = values
        return arr
    return np.asarray(values, dtype=dt)


def _read_list_element(body: bytes, offset: int, el: _Element):
    # fast path: a single list property with constant row length (triangle faces)
    if len(el.props) == 1 and el.count > 0:
        name, dt, cnt_dt = el.props[0]
        first = int(np.frombuffer(body, dtype="<" + cnt_dt, count=1, offset=offset)[0])
        row = np.dtype([("n", "<" + cnt_dt), ("v", "<" + dt, (first,))])
        if offset + row.itemsize * el.count <= len(body):
            arr = np.frombuffer(body, dtype=row, count=el.count, offset=offset)
            if np.all(arr["n"] == first):
                return {name: arr["v"].copy()}, offset + row.itemsize * el.count
    cols: dict[str, list] = {p[0]: [] for p in el.props}
    for _ in range(el.count):
        for name, dt, cnt_dt in el.props:
            if cnt_dt is None:
                v = np.frombuffer(body, dtype="<" + dt, count=1, offset=offset)[0]
                offset += np.dtype(dt).itemsize
                cols[name].append(v)
            else:
                n = int(np.frombuffer(body, dtype="<" + cnt_dt, count=1, offset=offset)[0])
                offset += np.dtype(cnt_dt).itemsize
                cols[name].append(np.frombuffer(body, dtype="<" + dt, count=n, offset=offset).copy())
                offset += n * np.dtype(dt).itemsize
    return {k: _finish_column(v, dt) for (k, dt, _), v in zip(el.props, cols.values())}, offset


def write_ply(path, elements: dict[str, dict[str, np.ndarray]], comments=()) -> None:
    """Write binary little-endian PLY.

    ``elements`` maps element name to an ordered ``{property: array}``.  2D
    integer arrays are written as ``list uchar <type>`` properties.
    """
    path = Path(path)
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    chunks = []
    for el_name, props in elements.items():
        counts = {len(v) for v in props.values()}
        if len(counts) != 1:
            raise ValueError(f"element {el_name!r} has ragged property lengths")
        count = counts.pop()
        header.append(f"element {el_name} {count}")
        fields = []
        for name, arr in props.items():
            arr = np.asarray(arr)
            if arr.ndim == 2:
                ptype = _NUMPY_TO_PLY[arr.dtype.str[1:]]
                header.append(f"property list uchar {ptype} {name}")
                fields.append((name + "__n", "u1"))
                fields.append((name, "<" + arr.dtype.str[1:], (arr.shape[1],)))
            else:
                header.append(f"property {_NUMPY_TO_PLY[arr.dtype.str[1:]]} {name}")
                fields.append((name, "<" + arr.dtype.str[1:]))
        rec = np.empty(count, dtype=fields)
        for name, arr in props.items():
            arr = np.asarray(arr)
            rec[name] = arr
            if arr.ndim == 2:
                rec[name + "__n"] = arr.shape[1]
        chunks.append(rec.tobytes())
    header.append("end_header")
    payload = ("\n".join(header) + "\n").encode("ascii") + b"".join(chunks)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write PLY to {str(path)!r}: {exc}") from exc
