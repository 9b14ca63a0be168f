"""File formats: array container, legacy VTK, plain-text mesh dump.

Container layout (all integers little-endian)::

    8 bytes   magic b"PODOCP01"
    8 bytes   uint64 header length L
    L bytes   UTF-8 JSON header (sorted keys)
    payload   arrays back to back, each as '<f8' or '<i8' in C order

The header holds the user metadata under ``"meta"`` and, under
``"arrays"``, one entry ``{"name", "dtype", "shape", "offset"}`` per array
(offset in bytes from the start of the payload).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import scipy.io

from .errors import InvalidArgumentError

MAGIC = b"PODOCP01"
_DTYPES = {"f8": "<f8", "i8": "<i8"}


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_container(path, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray) and ``meta`` to ``path``.

    Output is deterministic: identical inputs give identical bytes.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        kind = "i8" if np.issubdtype(a.dtype, np.integer) or a.dtype == bool else "f8"
        data = np.ascontiguousarray(a, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "dtype": kind, "shape": list(a.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": _to_jsonable(meta or {}), "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_container(path):
    """Inverse of :func:`save_container`; returns ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise InvalidArgumentError(f"{path} is not a podocp container")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    base = 16 + n
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        a = np.frombuffer(raw, dtype=dt, count=count, offset=start).reshape(e["shape"])
        arrays[e["name"]] = a.astype(dt.newbyteorder("="), copy=True)
    return arrays, header["meta"]


# -- VTK ----------------------------------------------------------------------------

VTK_QUADRATIC_TRIANGLE = 22


def write_vtk(path, layout, point_data=None, title="podocp fields"):
    """Legacy ASCII VTK file on the quadratic-triangle mesh.

    ``point_data`` maps names to arrays over the P2 nodes: velocity-like
    arrays of length ``2 * n_nodes`` (component-major) become vectors,
    P1 pressure arrays are interpolated to the P2 nodes.
    """
    pts = layout.node_coords
    cells = layout.element_nodes
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(pts)} double"]
    lines += [f"{x:.16e} {y:.16e} 0" for x, y in pts]
    lines.append(f"CELLS {len(cells)} {len(cells) * 7}")
    lines += ["6 " + " ".join(str(int(i)) for i in c) for c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(VTK_QUADRATIC_TRIANGLE)] * len(cells)
    if point_data:
        lines.append(f"POINT_DATA {len(pts)}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.size == layout.n_velocity:
                vec = values.reshape(2, -1).T
                lines.append(f"VECTORS {name} double")
                lines += [f"{a:.16e} {b:.16e} 0" for a, b in vec]
                continue
            if values.size == layout.n_pressure:
                values = p1_to_p2_nodes(layout, values)
            if values.size != len(pts):
                raise InvalidArgumentError(
                    f"field {name!r} has {values.size} entries; cannot map to {len(pts)} nodes")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [f"{a:.16e}" for a in values]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def p1_to_p2_nodes(layout, p):
    """Values of a P1 field at all P2 nodes (vertices, then edge midpoints)."""
    e = layout.mesh.edges
    return np.concatenate([p, 0.5 * (p[e[:, 0]] + p[e[:, 1]])])


def write_mesh_text(path, mesh):
    """Plain-text dump: vertices, triangles with subdomain, tagged boundary edges."""
    with open(path, "w") as fh:
        fh.write(f"# mesh {mesh.name} h={mesh.h}\n")
        fh.write(f"vertices {len(mesh.vertices)}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.16e} {y:.16e}\n")
        fh.write(f"triangles {len(mesh.triangles)}\n")
        for tri, sub in zip(mesh.triangles, mesh.subdomains):
            fh.write(f"{tri[0]} {tri[1]} {tri[2]} {sub}\n")
        fh.write(f"boundary_edges {len(mesh.boundary_edges)}\n")
        for e, tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            a, b = mesh.edges[e]
            fh.write(f"{a} {b} {tag}\n")


def write_matrix_market(path, matrix, comment=""):
    scipy.io.mmwrite(path, matrix, comment=comment)
