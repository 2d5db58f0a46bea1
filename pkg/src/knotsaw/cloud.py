"""Point clouds and their on-disk formats (ASCII XYZ, binary PLY)."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInput

NO_LABEL = -1


@dataclass
class PointCloud:
    """Unordered surface samples in millimetres.

    ``labels`` holds one knot id per point, ``NO_LABEL`` for unlabeled
    points, or is ``None`` when the cloud carries no labels at all.
    """

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInput(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("point coordinates must be finite")
        self.points = pts
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (len(pts),):
                raise InvalidInput("labels must have one entry per point")
            self.labels = lab

    def __len__(self):
        return len(self.points)

    def subset(self, index):
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.points[index], labels)


def read_xyz(path):
    """Read ``x y z [label]`` lines; ``label`` may be an integer or ``none``."""
    pts, labels = [], []
    has_labels = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.replace(",", " ").split()
            if len(tok) not in (3, 4):
                raise FormatError(f"expected 3 or 4 fields, got {len(tok)}", lineno)
            if has_labels is None:
                has_labels = len(tok) == 4
            elif has_labels != (len(tok) == 4):
                raise FormatError("inconsistent column count", lineno)
            try:
                pts.append([float(t) for t in tok[:3]])
                if has_labels:
                    lab = tok[3].lower()
                    labels.append(NO_LABEL if lab in ("none", "-1") else int(lab))
            except ValueError as exc:
                raise FormatError(str(exc), lineno) from None
    return PointCloud(np.array(pts, dtype=float).reshape(-1, 3),
                      np.array(labels, dtype=np.int64) if has_labels else None)


def write_xyz(cloud, path):
    with open(path, "w") as fh:
        if cloud.labels is None:
            for x, y, z in cloud.points:
                fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
        else:
            for (x, y, z), lab in zip(cloud.points, cloud.labels):
                fh.write(f"{x:.6f} {y:.6f} {z:.6f} {int(lab)}\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path):
    """Read the vertex element of a binary little-endian PLY file.

    Only ``x``, ``y``, ``z`` and an optional integer ``label`` property are
    used; other vertex properties are skipped.
    """
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    fmt = None
    elements = []
    for lineno, line in enumerate(header, 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before element", lineno)
            if tok[1] == "list":
                raise FormatError("list properties are not supported", lineno)
            if tok[1] not in _PLY_TYPES:
                raise FormatError(f"unknown property type {tok[1]!r}", lineno)
            elements[-1][2].append((tok[2], "<" + _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(f"unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise FormatError("vertex must be the first element")
    _, count, props = elements[0]
    data = np.frombuffer(raw, dtype=np.dtype(props), count=count, offset=body_start)
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise FormatError(f"missing vertex property {axis!r}")
    pts = np.column_stack([data["x"], data["y"], data["z"]]).astype(float)
    labels = data["label"].astype(np.int64) if "label" in names else None
    return PointCloud(pts, labels)


def write_ply(cloud, path):
    props = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    lines = ["ply", "format binary_little_endian 1.0",
             f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z"]
    if cloud.labels is not None:
        props.append(("label", "<i4"))
        lines.append("property int label")
    lines.append("end_header")
    arr = np.empty(len(cloud), dtype=np.dtype(props))
    arr["x"], arr["y"], arr["z"] = cloud.points.T
    if cloud.labels is not None:
        arr["label"] = cloud.labels
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def read_cloud(path):
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def write_cloud(cloud, path):
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(cloud, path)
    else:
        write_xyz(cloud, path)
