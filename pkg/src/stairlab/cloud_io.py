"""Point cloud file formats: plain XYZ text and an ASCII PLY subset.

Both writers emit full-precision decimal floats so that a write/read
round trip reproduces the in-memory coordinates exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .sensor import PointCloud


def _lines(cloud: PointCloud) -> list[str]:
    return [f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}" for p in cloud.points]


def write_xyz(path, cloud: PointCloud) -> None:
    lines = _lines(cloud)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_xyz(path) -> PointCloud:
    pts = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}: line {lineno}: expected 'x y z', got {raw!r}")
        try:
            pts.append([float(parts[0]), float(parts[1]), float(parts[2])])
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: non-numeric value") from exc
    return PointCloud(np.asarray(pts, dtype=float).reshape(-1, 3))


def write_ply(path, cloud: PointCloud) -> None:
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    Path(path).write_text("\n".join(header + _lines(cloud)) + "\n")


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY file with exactly float x/y/z vertex properties.

    Binary PLY variants are rejected with a clear error.
    """
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file (missing 'ply' magic line)")

    vertex_count = None
    properties: list[str] = []
    body_start = None
    for i, raw in enumerate(lines[1:], start=1):
        line = raw.strip()
        if line.startswith("comment"):
            continue
        if line.startswith("format"):
            if "ascii" not in line:
                raise ValueError(f"{path}: binary PLY is not supported (got {line!r})")
        elif line.startswith("element vertex"):
            vertex_count = int(line.split()[2])
        elif line.startswith("element"):
            raise ValueError(f"{path}: unsupported element {line!r}")
        elif line.startswith("property"):
            parts = line.split()
            if len(parts) != 3 or parts[1] not in ("float", "float32", "double", "float64"):
                raise ValueError(f"{path}: unsupported property {line!r}")
            properties.append(parts[2])
        elif line == "end_header":
            body_start = i + 1
            break
    if body_start is None:
        raise ValueError(f"{path}: PLY header missing end_header")
    if vertex_count is None:
        raise ValueError(f"{path}: PLY header missing 'element vertex'")
    if properties != ["x", "y", "z"]:
        raise ValueError(f"{path}: expected float x, y, z properties, got {properties}")

    body = [ln for ln in lines[body_start:] if ln.strip()]
    if len(body) < vertex_count:
        raise ValueError(f"{path}: expected {vertex_count} vertices, found {len(body)}")
    pts = []
    for raw in body[:vertex_count]:
        parts = raw.split()
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed vertex line {raw!r}")
        pts.append([float(parts[0]), float(parts[1]), float(parts[2])])
    return PointCloud(np.asarray(pts, dtype=float).reshape(-1, 3))


def read_cloud(path) -> PointCloud:
    """Dispatch on extension: .ply goes through the PLY parser, else XYZ."""
    if str(path).lower().endswith(".ply"):
        return read_ply(path)
    return read_xyz(path)
