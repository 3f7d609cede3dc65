"""File formats: XYZ / PLY point clouds, OBJ / PLY triangle meshes, segment lists.

The PLY writer adds two per-vertex properties on top of position and normal:
``uchar label`` (0 = off-edge, 1 = edge-zone, 2 = generated-edge) and
``float weight`` (the power-diagram weight).  Binary files use little-endian
layout.
"""

from __future__ import annotations

import struct

import numpy as np

from .cloud import OrientedCloud, PointLabel
from .errors import InvalidInput

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


def read_xyz(path):
    """Read an ASCII ``x y z [nx ny nz]`` cloud, one point per line."""
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if data.size == 0:
        raise InvalidInput(f"{path}: empty XYZ file")
    if data.shape[1] not in (3, 6):
        raise InvalidInput(f"{path}: expected 3 or 6 columns, got {data.shape[1]}")
    positions = data[:, :3]
    normals = None
    if data.shape[1] == 6:
        normals = data[:, 3:6]
        lens = np.linalg.norm(normals, axis=1)
        lens[lens == 0] = 1.0
        normals = normals / lens[:, None]
    return OrientedCloud(positions, normals)


def write_xyz(path, cloud: OrientedCloud):
    data = np.hstack([cloud.positions, cloud.normals])
    np.savetxt(path, data, fmt="%.17g")


def _parse_ply_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise InvalidInput("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype, is_list, count_dtype)])
    while True:
        line = fh.readline()
        if not line:
            raise InvalidInput("unexpected end of PLY header")
        tokens = line.decode("ascii", "replace").split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise InvalidInput("PLY property before any element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], _PLY_TYPES[tokens[3]], True,
                                        _PLY_TYPES[tokens[2]]))
            else:
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]], False, None))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise InvalidInput(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_ply_elements(path):
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        out = {}
        if fmt == "ascii":
            text = fh.read().decode("ascii", "replace").split()
            pos = 0
            for name, count, props in elements:
                rows = []
                for _ in range(count):
                    row = {}
                    for pname, dtype, is_list, _cdt in props:
                        if is_list:
                            m = int(text[pos]); pos += 1
                            row[pname] = np.array(text[pos:pos + m], dtype=np.float64)
                            pos += m
                        else:
                            row[pname] = float(text[pos]); pos += 1
                    rows.append(row)
                out[name] = rows
        else:
            for name, count, props in elements:
                fixed = all(not p[2] for p in props)
                if fixed:
                    dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                    arr = np.frombuffer(fh.read(dt.itemsize * count), dtype=dt,
                                        count=count)
                    out[name] = [{p[0]: row[p[0]] for p in props} for row in arr]
                else:
                    rows = []
                    for _ in range(count):
                        row = {}
                        for pname, dtype, is_list, cdt in props:
                            if is_list:
                                csize = np.dtype(cdt).itemsize
                                m = int(np.frombuffer(fh.read(csize), dtype="<" + cdt)[0])
                                isize = np.dtype(dtype).itemsize
                                row[pname] = np.frombuffer(
                                    fh.read(isize * m), dtype="<" + dtype
                                ).astype(np.float64)
                            else:
                                isize = np.dtype(dtype).itemsize
                                row[pname] = float(
                                    np.frombuffer(fh.read(isize), dtype="<" + dtype)[0]
                                )
                        rows.append(row)
                    out[name] = rows
    return out


def read_ply_cloud(path) -> OrientedCloud:
    """Read a PLY point cloud (ASCII or binary little-endian)."""
    elements = _read_ply_elements(path)
    if "vertex" not in elements:
        raise InvalidInput(f"{path}: PLY file has no vertex element")
    rows = elements["vertex"]
    if not rows:
        raise InvalidInput(f"{path}: PLY file has zero vertices")
    positions = np.array([[r["x"], r["y"], r["z"]] for r in rows])
    normals = None
    if all(k in rows[0] for k in ("nx", "ny", "nz")):
        normals = np.array([[r["nx"], r["ny"], r["nz"]] for r in rows])
        lens = np.linalg.norm(normals, axis=1)
        lens[lens == 0] = 1.0
        normals = normals / lens[:, None]
    labels = None
    if "label" in rows[0]:
        labels = np.array([r["label"] for r in rows], dtype=np.uint8)
    weights = None
    if "weight" in rows[0]:
        weights = np.array([r["weight"] for r in rows], dtype=np.float64)
    return OrientedCloud(positions, normals, labels, weights)


def write_ply_cloud(path, cloud: OrientedCloud, binary=True):
    """Write positions, normals, label and weight channels for every point."""
    n = len(cloud)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property double x", "property double y", "property double z",
        "property double nx", "property double ny", "property double nz",
        "property uchar label",
        "property float weight",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            dt = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                           ("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8"),
                           ("label", "u1"), ("weight", "<f4")])
            rec = np.empty(n, dtype=dt)
            for j, name in enumerate(("x", "y", "z")):
                rec[name] = cloud.positions[:, j]
            for j, name in enumerate(("nx", "ny", "nz")):
                rec[name] = cloud.normals[:, j]
            rec["label"] = cloud.labels
            rec["weight"] = cloud.weights.astype(np.float32)
            fh.write(rec.tobytes())
        else:
            for i in range(n):
                px, py, pz = cloud.positions[i]
                nx, ny, nz = cloud.normals[i]
                fh.write((f"{px:.17g} {py:.17g} {pz:.17g} "
                          f"{nx:.17g} {ny:.17g} {nz:.17g} "
                          f"{int(cloud.labels[i])} "
                          f"{float(np.float32(cloud.weights[i])):.9g}\n").encode())


def read_mesh(path):
    """Read an OBJ or PLY triangle mesh; returns (vertices, triangles)."""
    path = str(path)
    if path.lower().endswith(".obj"):
        return read_obj(path)
    if path.lower().endswith(".ply"):
        return read_ply_mesh(path)
    raise InvalidInput(f"unsupported mesh format: {path}")


def read_obj(path):
    vertices, faces = [], []
    with open(path, "r") as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                vertices.append([float(tok[1]), float(tok[2]), float(tok[3])])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                for j in range(1, len(idx) - 1):  # fan for polygon faces
                    faces.append([idx[0], idx[j], idx[j + 1]])
    if not vertices:
        raise InvalidInput(f"{path}: OBJ file has no vertices")
    return np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_obj(path, vertices, triangles):
    with open(path, "w") as fh:
        for v in np.asarray(vertices, dtype=np.float64):
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in np.asarray(triangles, dtype=np.int64).reshape(-1, 3):
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_ply_mesh(path):
    elements = _read_ply_elements(path)
    if "vertex" not in elements:
        raise InvalidInput(f"{path}: PLY file has no vertex element")
    rows = elements["vertex"]
    vertices = np.array([[r["x"], r["y"], r["z"]] for r in rows])
    faces = []
    for face_row in elements.get("face", []):
        key = "vertex_indices" if "vertex_indices" in face_row else "vertex_index"
        idx = [int(v) for v in face_row[key]]
        for j in range(1, len(idx) - 1):
            faces.append([idx[0], idx[j], idx[j + 1]])
    return vertices, np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_ply_mesh(path, vertices, triangles):
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    header = [
        "ply", "format binary_little_endian 1.0",
        f"element vertex {len(vertices)}",
        "property double x", "property double y", "property double z",
        f"element face {len(triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(vertices.astype("<f8").tobytes())
        for t in triangles:
            fh.write(struct.pack("<Biii", 3, int(t[0]), int(t[1]), int(t[2])))


def read_segments(path):
    """Read feature segments: one ``x1 y1 z1 x2 y2 z2`` line per segment."""
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if data.shape[1] != 6:
        raise InvalidInput(f"{path}: expected 6 floats per segment line")
    return data.reshape(-1, 2, 3)


def write_segments(path, segments):
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 6)
    np.savetxt(path, segments, fmt="%.17g")
