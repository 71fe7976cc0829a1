"""
pointcloud_io.py
================
Reading and writing of point sets (PLY ascii, PLY binary little-endian, plain
XYZ text) and of registration results (JSON transforms file).

Only the x, y, z vertex properties are used; every other vertex property and
every other element (faces, edges, ...) is skipped. Binary PLY is written as
little-endian doubles so a write/read cycle is bit-exact; text formats use
17 significant digits.

CHANGE LOG
----------
[2026-10-12] Unknown keys survive a round trip
  - read_transforms keeps top-level keys it does not know about in
    TransformFile.extra and write_transform_file emits them again.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from em_engine import RegistrationReport
from geometry import GeometryError, ModelParams, Points, PointSet, RigidTransform

# --- LOGGER ---
logger = logging.getLogger('pointcloud_io')
logger.setLevel(logging.INFO)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - 💾 IO - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
logger.propagate = False

PLY_ASCII = "ply_ascii"
PLY_BINARY_LE = "ply_binary_le"
XYZ_TEXT = "xyz_text"
FORMATS = (PLY_ASCII, PLY_BINARY_LE, XYZ_TEXT)

TRANSFORMS_FORMAT = "empmr-transforms"
TRANSFORMS_VERSION = 1

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_COORD_TYPES = {"f4", "f8"}

PathLike = Union[str, Path]


class PointCloudParseError(ValueError):
    pass


class TransformFileError(ValueError):
    pass


# ==============================================================================
# Point sets
# ==============================================================================

def infer_format(path: PathLike) -> str:
    """Guess the format from the extension; for .ply the header decides."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".xyz", ".txt", ".pts"):
        return XYZ_TEXT
    if suffix == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(256)
        if b"binary_little_endian" in head:
            return PLY_BINARY_LE
        return PLY_ASCII
    raise PointCloudParseError(f"{path}: cannot infer point-cloud format from extension '{suffix}'")


@dataclass
class _PlyElement:
    name: str
    count: int
    properties: List[Tuple[str, str]] = field(default_factory=list)   # (name, numpy type code)
    has_list: bool = False

    def dtype(self) -> np.dtype:
        return np.dtype([(name, "<" + code) for name, code in self.properties])


def _parse_ply_header(path: Path, raw: bytes) -> Tuple[str, List[_PlyElement], int, int]:
    """Returns (format, elements, byte offset of the body, number of header lines)."""
    marker = raw.find(b"end_header")
    if not raw.startswith(b"ply") or marker < 0:
        raise PointCloudParseError(f"{path}: malformed PLY header (missing 'ply' magic or 'end_header')")
    newline = raw.find(b"\n", marker)
    body_offset = len(raw) if newline < 0 else newline + 1
    lines = raw[:marker].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements: List[_PlyElement] = []
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2:
                raise PointCloudParseError(f"{path}:{lineno}: malformed format line")
            if tokens[1] == "ascii":
                fmt = PLY_ASCII
            elif tokens[1] == "binary_little_endian":
                fmt = PLY_BINARY_LE
            elif tokens[1] == "binary_big_endian":
                raise PointCloudParseError(f"{path}:{lineno}: big-endian binary PLY is not supported")
            else:
                raise PointCloudParseError(f"{path}:{lineno}: unknown PLY format '{tokens[1]}'")
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise PointCloudParseError(f"{path}:{lineno}: malformed element line '{line}'")
            elements.append(_PlyElement(tokens[1], int(tokens[2])))
        elif tokens[0] == "property":
            if not elements:
                raise PointCloudParseError(f"{path}:{lineno}: property before any element")
            if len(tokens) >= 2 and tokens[1] == "list":
                elements[-1].has_list = True
                continue
            if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                raise PointCloudParseError(f"{path}:{lineno}: malformed property line '{line}'")
            elements[-1].properties.append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise PointCloudParseError(f"{path}:{lineno}: unexpected header keyword '{tokens[0]}'")

    if fmt is None:
        raise PointCloudParseError(f"{path}: malformed PLY header (no format line)")
    return fmt, elements, body_offset, len(lines) + 1


def _vertex_element(path: Path, elements: List[_PlyElement]) -> Tuple[int, _PlyElement]:
    for position, el in enumerate(elements):
        if el.name == "vertex":
            names = dict(el.properties)
            for axis in ("x", "y", "z"):
                if axis not in names:
                    raise PointCloudParseError(f"{path}: vertex element has no '{axis}' property")
                if names[axis] not in _COORD_TYPES:
                    raise PointCloudParseError(f"{path}: vertex property '{axis}' must be float or double")
            if el.has_list:
                raise PointCloudParseError(f"{path}: list properties on vertices are not supported")
            return position, el
    raise PointCloudParseError(f"{path}: malformed PLY header (no vertex element)")


def _read_ply_binary(path: Path, raw: bytes, elements: List[_PlyElement], offset: int) -> Points:
    position, vertex = _vertex_element(path, elements)
    for el in elements[:position]:
        if el.has_list:
            raise PointCloudParseError(f"{path}: cannot skip list element '{el.name}' stored before the vertices")
        offset += el.count * el.dtype().itemsize

    dtype = vertex.dtype()
    needed = vertex.count * dtype.itemsize
    available = len(raw) - offset
    if available < needed:
        raise PointCloudParseError(
            f"{path}: vertex count mismatch, header declares {vertex.count} vertices "
            f"({needed} bytes from byte offset {offset}) but only {max(available, 0)} bytes follow")
    table = np.frombuffer(raw, dtype=dtype, count=vertex.count, offset=offset)
    points = np.column_stack([table[a].astype(np.float64) for a in ("x", "y", "z")]) \
        if vertex.count else np.empty((0, 3))

    bad = np.flatnonzero(~np.all(np.isfinite(points), axis=1))
    if bad.size:
        raise PointCloudParseError(
            f"{path}: non-finite coordinate in vertex {bad[0]} at byte offset {offset + bad[0] * dtype.itemsize}")
    return points


def _read_ply_ascii(path: Path, raw: bytes, elements: List[_PlyElement], offset: int, header_lines: int) -> Points:
    position, vertex = _vertex_element(path, elements)
    lines = raw[offset:].decode("ascii", errors="replace").splitlines()
    skip = sum(el.count for el in elements[:position])
    columns = [i for i, (name, _) in enumerate(vertex.properties) if name in ("x", "y", "z")]
    order = [name for name, _ in vertex.properties if name in ("x", "y", "z")]
    width = len(vertex.properties)

    body = lines[skip:skip + vertex.count]
    if len(body) < vertex.count:
        raise PointCloudParseError(
            f"{path}: vertex count mismatch, header declares {vertex.count} vertices but the file has {len(body)}")
    trailing = [ln for ln in lines[skip + vertex.count:] if ln.strip()]
    if trailing and position == len(elements) - 1:
        raise PointCloudParseError(
            f"{path}:{header_lines + skip + vertex.count + 1}: vertex count mismatch, "
            f"more data lines than the {vertex.count} declared")

    points = np.empty((vertex.count, 3))
    for k, line in enumerate(body):
        lineno = header_lines + skip + k + 1
        tokens = line.split()
        if len(tokens) < width:
            raise PointCloudParseError(f"{path}:{lineno}: expected {width} values, found {len(tokens)}")
        try:
            values = {name: float(tokens[c]) for name, c in zip(order, columns)}
        except ValueError:
            raise PointCloudParseError(f"{path}:{lineno}: cannot parse coordinates from '{line.strip()}'")
        row = (values["x"], values["y"], values["z"])
        if not np.all(np.isfinite(row)):
            raise PointCloudParseError(f"{path}:{lineno}: non-finite coordinate")
        points[k] = row
    return points


def _read_xyz(path: Path) -> Points:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            tokens = stripped.replace(",", " ").split()
            if len(tokens) < 3:
                raise PointCloudParseError(f"{path}:{lineno}: expected 3 coordinates, found {len(tokens)}")
            try:
                row = (float(tokens[0]), float(tokens[1]), float(tokens[2]))
            except ValueError:
                raise PointCloudParseError(f"{path}:{lineno}: cannot parse coordinates from '{stripped}'")
            if not np.all(np.isfinite(row)):
                raise PointCloudParseError(f"{path}:{lineno}: non-finite coordinate")
            rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def read_points(path: PathLike, format: Optional[str] = None) -> Points:
    """Raw (N, 3) coordinates; N may be 0."""
    path = Path(path)
    fmt = format or infer_format(path)
    if fmt not in FORMATS:
        raise PointCloudParseError(f"unknown point-cloud format '{fmt}' (expected one of {', '.join(FORMATS)})")
    if fmt == XYZ_TEXT:
        return _read_xyz(path)

    raw = path.read_bytes()
    header_fmt, elements, offset, header_lines = _parse_ply_header(path, raw)
    if header_fmt != fmt:
        raise PointCloudParseError(f"{path}: requested {fmt} but the header declares {header_fmt}")
    if fmt == PLY_BINARY_LE:
        return _read_ply_binary(path, raw, elements, offset)
    return _read_ply_ascii(path, raw, elements, offset, header_lines)


def read_point_set(path: PathLike, format: Optional[str] = None, scale: float = 1.0,
                   index: int = 0, name: Optional[str] = None) -> PointSet:
    if not scale > 0:
        raise PointCloudParseError(f"scale must be positive, got {scale}")
    path = Path(path)
    points = read_points(path, format)
    if points.shape[0] == 0:
        raise PointCloudParseError(f"{path}: empty point set")
    if scale != 1.0:
        points = points * scale
    logger.info(f"Read {points.shape[0]} points from {path}")
    try:
        return PointSet(index, points, name or path.stem)
    except GeometryError as e:
        raise PointCloudParseError(f"{path}: {e}")


def write_point_set(point_set: Union[PointSet, Points], path: PathLike, format: Optional[str] = None) -> None:
    """Accepts a PointSet or a raw (N, 3) array; N = 0 writes a valid, empty file."""
    path = Path(path)
    points = point_set.points if isinstance(point_set, PointSet) else np.asarray(point_set, dtype=np.float64).reshape(-1, 3)
    if format is None:
        format = XYZ_TEXT if path.suffix.lower() in (".xyz", ".txt", ".pts") else PLY_BINARY_LE
    if format not in FORMATS:
        raise PointCloudParseError(f"unknown point-cloud format '{format}'")
    path.parent.mkdir(parents=True, exist_ok=True)

    if format == XYZ_TEXT:
        np.savetxt(path, points, fmt="%.17g", delimiter=" ")
    else:
        kind = "binary_little_endian" if format == PLY_BINARY_LE else "ascii"
        header = (f"ply\nformat {kind} 1.0\nelement vertex {points.shape[0]}\n"
                  "property double x\nproperty double y\nproperty double z\nend_header\n")
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            if format == PLY_BINARY_LE:
                fh.write(np.ascontiguousarray(points, dtype="<f8").tobytes())
            else:
                for x, y, z in points:
                    fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n".encode("ascii"))
    logger.info(f"Wrote {points.shape[0]} points to {path} ({format})")


# ==============================================================================
# Transforms file
# ==============================================================================

@dataclass
class TransformEntry:
    name: str
    transform: RigidTransform


@dataclass
class TransformFile:
    entries: List[TransformEntry]
    sigma2: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = TRANSFORMS_VERSION
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def transforms(self) -> Tuple[RigidTransform, ...]:
        return tuple(e.transform for e in self.entries)

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def write_transform_file(tf: TransformFile, path: PathLike) -> None:
    document = {
        "format": TRANSFORMS_FORMAT,
        "version": tf.version,
        "sets": [{"name": e.name,
                  "rotation": e.transform.rotation.tolist(),
                  "translation": e.transform.translation.tolist()} for e in tf.entries],
    }
    if tf.sigma2 is not None:
        document["sigma2"] = float(tf.sigma2)
    document["metadata"] = tf.metadata
    for key, value in tf.extra.items():
        document.setdefault(key, value)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2, default=_json_default)
        fh.write("\n")
    logger.info(f"Wrote {len(tf.entries)} transforms to {path}")


def write_transforms(params: ModelParams, report: Optional[RegistrationReport], path: PathLike,
                     names: Optional[Sequence[str]] = None, metadata: Optional[Dict[str, Any]] = None) -> TransformFile:
    names = list(names) if names is not None else [f"set_{i:02d}" for i in range(params.M)]
    if len(names) != params.M:
        raise TransformFileError(f"got {len(names)} names for {params.M} transforms")
    meta: Dict[str, Any] = {"w": params.w}
    if report is not None:
        meta.update({"iterations": report.iterations_run, "converged": report.converged})
    meta.update(metadata or {})
    tf = TransformFile([TransformEntry(n, T) for n, T in zip(names, params.transforms)], params.sigma2, meta)
    write_transform_file(tf, path)
    return tf


def read_transforms(path: PathLike) -> TransformFile:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except json.JSONDecodeError as e:
        raise TransformFileError(f"{path}:{e.lineno}: not a valid transforms file ({e.msg})")

    if not isinstance(document, dict) or document.get("format") != TRANSFORMS_FORMAT:
        raise TransformFileError(f"{path}: missing '{TRANSFORMS_FORMAT}' format tag")
    version = document.get("version")
    if version != TRANSFORMS_VERSION:
        raise TransformFileError(f"{path}: unsupported transforms file version {version}")
    sets = document.get("sets")
    if not isinstance(sets, list):
        raise TransformFileError(f"{path}: 'sets' must be a list")

    entries = []
    for position, item in enumerate(sets):
        name = item.get("name", f"set_{position:02d}") if isinstance(item, dict) else f"set_{position:02d}"
        try:
            R = np.asarray(item["rotation"], dtype=np.float64)
            t = np.asarray(item["translation"], dtype=np.float64)
            entries.append(TransformEntry(name, RigidTransform(R, t)))
        except (KeyError, TypeError, ValueError) as e:
            raise TransformFileError(f"{path}: invalid transform for set '{name}': {e}")

    sigma2 = document.get("sigma2")
    known = {"format", "version", "sets", "sigma2", "metadata"}
    extra = {k: v for k, v in document.items() if k not in known}
    return TransformFile(entries, None if sigma2 is None else float(sigma2),
                         dict(document.get("metadata") or {}), version, extra)
