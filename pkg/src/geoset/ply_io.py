"""PLY point-cloud files (ASCII / binary little-endian) and the GSL1 label sidecar."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FileFormatError
from .geometry import PointCloud

_SCALAR_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

LABEL_MAGIC = b"GSL1"


def write_ply(path, cloud: PointCloud, binary=True):
    """Write positions (and normals when present) as float32 vertex properties."""
    has_normals = cloud.normals is not None
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {len(cloud)}")
    header += ["property float x", "property float y", "property float z"]
    if has_normals:
        header += ["property float nx", "property float ny", "property float nz"]
    header.append("end_header")

    data = cloud.positions
    if has_normals:
        data = np.concatenate([cloud.positions, cloud.normals], axis=1)
    data = data.astype("<f4")

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(data.tobytes())
        else:
            for row in data:
                f.write((" ".join(f"{x:.9g}" for x in row) + "\n").encode("ascii"))


def read_ply(path) -> PointCloud:
    """Read a PLY vertex cloud; extra scalar vertex properties are skipped."""
    with open(path, "rb") as f:
        raw = f.read()

    if not raw.startswith(b"ply"):
        raise FileFormatError("missing 'ply' magic", path=path, byte_offset=0)

    # --- header ---
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype_code)])
    offset = 0
    end = raw.find(b"end_header")
    if end < 0:
        raise FileFormatError("missing end_header", path=path, byte_offset=len(raw))
    while True:
        nl = raw.find(b"\n", offset)
        if nl < 0:
            raise FileFormatError("truncated header", path=path, byte_offset=offset)
        line = raw[offset:nl].decode("ascii", errors="replace").strip()
        line_offset = offset
        offset = nl + 1
        if line == "end_header":
            break
        tokens = line.split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise FileFormatError(f"unsupported format '{tokens[1]}'",
                                      path=path, byte_offset=line_offset)
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise FileFormatError("property before element", path=path, byte_offset=line_offset)
            if tokens[1] == "list":
                raise FileFormatError("list properties are not supported",
                                      path=path, byte_offset=line_offset)
            if tokens[1] not in _SCALAR_TYPES:
                raise FileFormatError(f"unknown property type '{tokens[1]}'",
                                      path=path, byte_offset=line_offset)
            elements[-1][2].append((tokens[2], _SCALAR_TYPES[tokens[1]]))
    if fmt is None:
        raise FileFormatError("missing format line", path=path, byte_offset=0)

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise FileFormatError("no vertex element", path=path, byte_offset=0)
    for name, count, _ in elements:
        if name != "vertex" and count > 0:
            raise FileFormatError(f"unsupported element '{name}'", path=path, byte_offset=0)

    _, count, props = vertex
    names = [p[0] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise FileFormatError(f"vertex element lacks property '{axis}'", path=path, byte_offset=0)
    has_normals = all(n in names for n in ("nx", "ny", "nz"))

    # --- body ---
    if fmt == "binary":
        dtype = np.dtype([(n, "<" + c) for n, c in props])
        expected = dtype.itemsize * count
        body = raw[offset:offset + expected]
        if len(body) < expected:
            raise FileFormatError(
                f"vertex data truncated: expected {expected} bytes, got {len(body)}",
                path=path, byte_offset=offset + len(body))
        table = np.frombuffer(body, dtype=dtype, count=count)
    else:
        rows = []
        body_offset = offset
        text = raw[offset:]
        lines = text.split(b"\n")
        idx = 0
        for line in lines:
            if idx == count:
                break
            stripped = line.strip()
            if not stripped:
                body_offset += len(line) + 1
                continue
            values = stripped.split()
            if len(values) != len(props):
                raise FileFormatError(
                    f"vertex row has {len(values)} values, expected {len(props)}",
                    path=path, byte_offset=body_offset)
            rows.append([float(v) for v in values])
            body_offset += len(line) + 1
            idx += 1
        if idx != count:
            raise FileFormatError(f"expected {count} vertex rows, got {idx}",
                                  path=path, byte_offset=body_offset)
        arr = np.asarray(rows, dtype=np.float64)
        table = {name: arr[:, i] for i, (name, _) in enumerate(props)}

    positions = np.stack([np.asarray(table["x"], dtype=np.float64),
                          np.asarray(table["y"], dtype=np.float64),
                          np.asarray(table["z"], dtype=np.float64)], axis=1)
    normals = None
    if has_normals:
        normals = np.stack([np.asarray(table["nx"], dtype=np.float64),
                            np.asarray(table["ny"], dtype=np.float64),
                            np.asarray(table["nz"], dtype=np.float64)], axis=1)
    return PointCloud(positions, normals)


def write_labels(path, labels):
    """Write per-point labels in the GSL1 sidecar format (magic, u32 count, u32 labels)."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D array")
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<I", len(labels)))
        f.write(labels.astype("<u4").tobytes())


def read_labels(path):
    """Read a GSL1 label sidecar back into a uint32 array."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != LABEL_MAGIC:
        raise FileFormatError("bad magic, expected 'GSL1'", path=path, byte_offset=0)
    if len(raw) < 8:
        raise FileFormatError("truncated header", path=path, byte_offset=len(raw))
    (count,) = struct.unpack("<I", raw[4:8])
    expected = 8 + 4 * count
    if len(raw) < expected:
        raise FileFormatError(f"label data truncated: expected {expected} bytes, got {len(raw)}",
                              path=path, byte_offset=len(raw))
    return np.frombuffer(raw[8:expected], dtype="<u4").copy()
