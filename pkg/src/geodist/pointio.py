"""Point-set files: binary little-endian PLY and plain XYZ text."""
from __future__ import annotations

from pathlib import Path

import numpy as np

_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "u2", "uint16": "u2", "short": "i2", "int16": "i2",
    "uint": "u4", "uint32": "u4", "int": "i4", "int32": "i4",
}


def _prop_names(d: int, extra: dict | None) -> list[str]:
    if d == 3:
        names = ["x", "y", "z"]
    elif d == 6:
        names = ["x", "y", "z", "red", "green", "blue"]
    else:
        raise ValueError(f"points must have 3 or 6 channels, got {d}")
    return names + list(extra or {})


def write_ply(path, points: np.ndarray, comments: list[str] | None = None,
              extra: dict[str, np.ndarray] | None = None) -> None:
    """Write (N, 3|6) points as float32 vertex properties; ``extra`` adds per-point float32 columns."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        pts = pts.reshape(-1, 3)
    names = _prop_names(pts.shape[1], extra)
    cols = [pts[:, i] for i in range(pts.shape[1])]
    for name, vals in (extra or {}).items():
        vals = np.asarray(vals).reshape(-1)
        if len(vals) != len(pts):
            raise ValueError(f"extra property {name!r} has {len(vals)} rows, expected {len(pts)}")
        cols.append(vals)
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments or []]
    header.append(f"element vertex {len(pts)}")
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    blob = np.stack(cols, axis=1).astype("<f4") if len(pts) else np.zeros((0, len(names)), "<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(blob.tobytes())


def read_ply(path, with_extra: bool = False):
    """Read the vertex element of a PLY file (binary little-endian or ASCII)."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt, n, props, in_vertex = None, 0, [], False
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties in vertex element are not supported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    names = [p[0] for p in props]
    if fmt == "binary_little_endian":
        dt = np.dtype([(name, "<" + t) for name, t in props])
        arr = np.frombuffer(data, dtype=dt, count=n, offset=body_start)
        table = {name: arr[name].astype(np.float64) for name in names}
    elif fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")[:n]
        vals = np.array([[float(v) for v in r.split()[:len(names)]] for r in rows]).reshape(n, len(names))
        table = {name: vals[:, i] for i, name in enumerate(names)}
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    pos = ["x", "y", "z"]
    if any(p not in table for p in pos):
        raise ValueError(f"{path}: missing x/y/z properties")
    chans = pos + (["red", "green", "blue"] if all(c in table for c in ("red", "green", "blue")) else [])
    pts = np.stack([table[c] for c in chans], axis=1) if n else np.zeros((0, len(chans)))
    if with_extra:
        extra = {k: v for k, v in table.items() if k not in chans}
        return pts, extra
    return pts


def write_xyz(path, points: np.ndarray, comments: list[str] | None = None) -> None:
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        for c in comments or []:
            fh.write(f"# {c}\n")
        np.savetxt(fh, pts.reshape(len(pts), -1), fmt="%.9g")


def read_xyz(path) -> np.ndarray:
    pts = np.loadtxt(path, comments="#", ndmin=2)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.shape[1] not in (3, 6):
        raise ValueError(f"{path}: expected 3 or 6 columns, got {pts.shape[1]}")
    return pts


def read_points(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def write_points(path, points: np.ndarray, comments: list[str] | None = None) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(path, points, comments)
    else:
        write_xyz(path, points, comments)
