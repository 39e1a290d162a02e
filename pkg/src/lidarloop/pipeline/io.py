"""Point-cloud and trajectory file formats.

Point clouds: PLY (ascii and binary_little_endian, vertex x/y/z read as
float64) and whitespace-separated XYZ text.  Trajectories: TUM lines
``timestamp tx ty tz qx qy qz qw``.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core_math import RigidTransform, quat_to_rotation, rotation_to_quat


class DatasetIOError(OSError):
    """Unreadable or malformed input file; the message names the path."""


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh, path) -> tuple[str, list[tuple[str, int, list[tuple[str, str]]]]]:
    if fh.readline().strip() != b"ply":
        raise DatasetIOError(f"{path}: not a PLY file")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    while True:
        line = fh.readline()
        if not line:
            raise DatasetIOError(f"{path}: truncated PLY header")
        parts = line.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise DatasetIOError(f"{path}: property before element")
            if parts[1] == "list":
                raise DatasetIOError(f"{path}: list properties are not supported")
            if parts[1] not in _PLY_TYPES:
                raise DatasetIOError(f"{path}: unknown PLY type {parts[1]}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise DatasetIOError(f"{path}: unsupported PLY format {fmt}")
    return fmt, elements


def read_ply(path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            fmt, elements = _parse_ply_header(fh, path)
            if not elements or elements[0][0] != "vertex":
                raise DatasetIOError(f"{path}: first element must be vertex")
            _, count, props = elements[0]
            names = [n for n, _ in props]
            if not {"x", "y", "z"} <= set(names):
                raise DatasetIOError(f"{path}: vertex lacks x/y/z")
            if fmt == "ascii":
                rows = []
                for _ in range(count):
                    line = fh.readline()
                    if not line:
                        raise DatasetIOError(f"{path}: expected {count} vertices")
                    rows.append(line.split()[: len(names)])
                data = np.array(rows, dtype=float).reshape(count, len(names))
                cols = [names.index(k) for k in "xyz"]
                return data[:, cols].astype(float)
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            raw = fh.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise DatasetIOError(f"{path}: truncated vertex data")
            arr = np.frombuffer(raw, dtype=dtype, count=count)
            return np.stack([arr[k].astype(float) for k in "xyz"], axis=1)
    except (OSError, ValueError) as exc:
        if isinstance(exc, DatasetIOError):
            raise
        raise DatasetIOError(f"{path}: {exc}") from exc


def write_ply(path, points: np.ndarray, binary: bool = True) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n"
    )
    with open(Path(path), "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.astype("<f8").tobytes())
        else:
            for x, y, z in pts.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n".encode("ascii"))


def read_xyz(path) -> np.ndarray:
    path = Path(path)
    try:
        data = np.loadtxt(path, dtype=float, ndmin=2, comments="#")
    except (OSError, ValueError) as exc:
        raise DatasetIOError(f"{path}: {exc}") from exc
    if data.size == 0:
        return np.empty((0, 3))
    if data.shape[1] < 3:
        raise DatasetIOError(f"{path}: expected at least 3 columns")
    return data[:, :3]


def write_xyz(path, points: np.ndarray) -> None:
    np.savetxt(Path(path), np.asarray(points, dtype=float).reshape(-1, 3), fmt="%.17g")


def read_points(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def list_frames(directory) -> list[Path]:
    """Frame files (``.ply``, ``.xyz``, ``.txt``) of a directory in name order."""
    d = Path(directory)
    if not d.is_dir():
        raise DatasetIOError(f"{d}: not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".ply", ".xyz", ".txt"))


def read_tum(path) -> tuple[np.ndarray, list[RigidTransform]]:
    path = Path(path)
    stamps, poses = [], []
    try:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = [float(v) for v in line.split()]
                if len(vals) != 8:
                    raise DatasetIOError(f"{path}:{n}: expected 8 fields, got {len(vals)}")
                stamps.append(vals[0])
                poses.append(RigidTransform(quat_to_rotation(vals[4:8]), np.array(vals[1:4])))
    except (OSError, ValueError) as exc:
        if isinstance(exc, DatasetIOError):
            raise
        raise DatasetIOError(f"{path}: {exc}") from exc
    return np.array(stamps), poses


def write_tum(path, stamps: Sequence[float], poses: Sequence[RigidTransform]) -> None:
    if len(stamps) != len(poses):
        raise ValueError("timestamp / pose count mismatch")
    with open(Path(path), "w") as fh:
        for s, p in zip(stamps, poses):
            q = rotation_to_quat(p.rotation)
            vals = [float(s), *map(float, p.translation), *map(float, q)]
            fh.write(" ".join(repr(v) for v in vals) + "\n")


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
