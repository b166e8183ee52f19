"""Mesh file I/O.

Native ASCII formats:

  tsurf: triangle surface with optional integer tag arrays
  tmesh: tetrahedral mesh with per-element component codes and node flags

Coordinates are written with 17 significant digits everywhere except OBJ,
so every double survives a write/read round trip bit-exactly. OBJ is an
export-only convenience at 9 digits.

Also supported: OBJ export, legacy-VTK export and a minimal legacy-VTK
reader covering the files this package writes.
"""

import numpy as np

from .meshes import TriSurface, TetMesh

_F9 = "%.9g"
_F17 = "%.17g"


def _coord_lines(vertices, fmt):
    row = " ".join([fmt] * 3)
    return [row % tuple(v) for v in vertices]


def _int_lines(arr):
    if arr.ndim == 1:
        return [str(int(v)) for v in arr]
    return [" ".join(str(int(x)) for x in row) for row in arr]


class _Cursor:
    def __init__(self, text):
        self.lines = [ln.strip() for ln in text.splitlines()]
        self.lines = [ln for ln in self.lines if ln]
        self.i = 0

    def next(self):
        if self.i >= len(self.lines):
            raise ValueError("unexpected end of file")
        ln = self.lines[self.i]
        self.i += 1
        return ln

    def peek(self):
        return self.lines[self.i] if self.i < len(self.lines) else None


def _read_block(cur, n, dtype, width):
    out = np.empty((n, width), dtype=dtype)
    for k in range(n):
        parts = cur.next().split()
        if len(parts) < width:
            raise ValueError("short row in block")
        out[k] = [dtype(p) for p in parts[:width]]
    return out if width > 1 else out[:, 0]


# ---------------------------------------------------------------------------
# tsurf

def write_tsurf(surface, path):
    out = ["tsurf 1", "vertices %d" % surface.n_vertices]
    out += _coord_lines(surface.vertices, _F17)
    out.append("faces %d" % surface.n_faces)
    out += _int_lines(surface.faces)
    for name in sorted(surface.vertex_tags):
        out.append("vertex_tag %s" % name)
        out += _int_lines(np.asarray(surface.vertex_tags[name]))
    for name in sorted(surface.face_tags):
        out.append("face_tag %s" % name)
        out += _int_lines(np.asarray(surface.face_tags[name]))
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def read_tsurf(path):
    with open(path) as fh:
        cur = _Cursor(fh.read())
    if cur.next().split() != ["tsurf", "1"]:
        raise ValueError("not a tsurf file")
    kw, nv = cur.next().split()
    assert kw == "vertices"
    verts = _read_block(cur, int(nv), float, 3)
    kw, nf = cur.next().split()
    assert kw == "faces"
    faces = _read_block(cur, int(nf), int, 3)
    surf = TriSurface(verts, faces)
    while cur.peek() is not None:
        kw, name = cur.next().split()
        if kw == "vertex_tag":
            surf.vertex_tags[name] = _read_block(cur, int(nv), int, 1)
        elif kw == "face_tag":
            surf.face_tags[name] = _read_block(cur, int(nf), int, 1)
        else:
            raise ValueError("unknown tsurf section %r" % kw)
    return surf


# ---------------------------------------------------------------------------
# tmesh

def write_tmesh(mesh, path):
    out = ["tmesh 1", "vertices %d" % mesh.n_vertices]
    out += _coord_lines(mesh.vertices, _F17)
    out.append("tets %d" % mesh.n_tets)
    out += _int_lines(mesh.tets)
    out.append("components")
    out += _int_lines(mesh.element_component)
    for name in sorted(mesh.node_flags):
        out.append("node_flag %s" % name)
        out += _int_lines(np.asarray(mesh.node_flags[name], dtype=np.int64))
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def read_tmesh(path):
    with open(path) as fh:
        cur = _Cursor(fh.read())
    if cur.next().split() != ["tmesh", "1"]:
        raise ValueError("not a tmesh file")
    kw, nv = cur.next().split()
    assert kw == "vertices"
    verts = _read_block(cur, int(nv), float, 3)
    kw, nt = cur.next().split()
    assert kw == "tets"
    tets = _read_block(cur, int(nt), int, 4)
    assert cur.next() == "components"
    comp = _read_block(cur, int(nt), int, 1)
    mesh = TetMesh(verts, tets, comp)
    while cur.peek() is not None:
        kw, name = cur.next().split()
        if kw != "node_flag":
            raise ValueError("unknown tmesh section %r" % kw)
        mesh.node_flags[name] = _read_block(cur, int(nv), int, 1)
    return mesh


# ---------------------------------------------------------------------------
# OBJ (export only)

def write_obj(surface, path):
    out = ["v " + (_F9 % v[0]) + " " + (_F9 % v[1]) + " " + (_F9 % v[2])
           for v in surface.vertices]
    out += ["f %d %d %d" % (a + 1, b + 1, c + 1) for a, b, c in surface.faces]
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# legacy VTK

def write_vtk(mesh, path, title="cmac mesh"):
    """Unstructured-grid export for TriSurface or TetMesh."""
    if isinstance(mesh, TetMesh):
        cells, ctype = mesh.tets, 10
        cdata = mesh.element_component
    else:
        cells, ctype = mesh.faces, 5
        cdata = mesh.face_tags.get("component")
    n, w = cells.shape
    out = ["# vtk DataFile Version 3.0", title, "ASCII",
           "DATASET UNSTRUCTURED_GRID",
           "POINTS %d double" % len(mesh.vertices)]
    out += _coord_lines(mesh.vertices, _F17)
    out.append("CELLS %d %d" % (n, n * (w + 1)))
    out += ["%d " % w + " ".join(str(int(x)) for x in row) for row in cells]
    out.append("CELL_TYPES %d" % n)
    out += [str(ctype)] * n
    if cdata is not None:
        out += ["CELL_DATA %d" % n, "SCALARS component int 1",
                "LOOKUP_TABLE default"]
        out += _int_lines(np.asarray(cdata))
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def read_vtk(path):
    """Reads the legacy-VTK unstructured grids written by write_vtk.

    Returns a TetMesh when every cell is a tetrahedron, otherwise a
    TriSurface of the triangle cells.
    """
    with open(path) as fh:
        text = fh.read()
    cur = _Cursor(text)
    cur.next()            # version comment
    cur.next()            # title
    if cur.next().upper() != "ASCII":
        raise ValueError("only ASCII VTK supported")
    if cur.next().split()[-1].upper() != "UNSTRUCTURED_GRID":
        raise ValueError("only unstructured grids supported")
    kw = cur.next().split()
    assert kw[0] == "POINTS"
    nv = int(kw[1])
    verts = _read_points(cur, nv)
    kw = cur.next().split()
    assert kw[0] == "CELLS"
    ncell = int(kw[0 + 1])
    cells = []
    for _ in range(ncell):
        parts = [int(p) for p in cur.next().split()]
        if parts[0] != len(parts) - 1:
            raise ValueError("inconsistent cell row")
        cells.append(parts[1:])
    kw = cur.next().split()
    assert kw[0] == "CELL_TYPES"
    types = [int(cur.next()) for _ in range(ncell)]
    cdata = None
    while cur.peek() is not None:
        ln = cur.next()
        if ln.startswith("SCALARS") and "component" in ln:
            cur.next()    # LOOKUP_TABLE
            cdata = np.array([int(cur.next()) for _ in range(ncell)])
    if ncell and all(t == 10 for t in types):
        mesh = TetMesh(verts, np.array(cells, dtype=np.int64), cdata)
        return mesh
    tris = [c for c, t in zip(cells, types) if t == 5]
    surf = TriSurface(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))
    if cdata is not None and len(tris) == ncell:
        surf.face_tags["component"] = cdata
    return surf


def _read_points(cur, nv):
    vals = []
    while len(vals) < 3 * nv:
        vals += [float(p) for p in cur.next().split()]
    return np.array(vals[:3 * nv]).reshape(nv, 3)


# ---------------------------------------------------------------------------
# TetGen exchange

def write_tetgen_node(vertices, path):
    out = ["%d 3 0 0" % len(vertices)]
    out += ["%d " % (i + 1) + (_F17 % v[0]) + " " + (_F17 % v[1]) + " "
            + (_F17 % v[2]) for i, v in enumerate(vertices)]
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def write_tetgen_poly(surface, path):
    """Piecewise linear complex with inline nodes, 1-based indices."""
    out = ["%d 3 0 0" % surface.n_vertices]
    out += ["%d " % (i + 1) + (_F17 % v[0]) + " " + (_F17 % v[1]) + " "
            + (_F17 % v[2]) for i, v in enumerate(surface.vertices)]
    out.append("%d 0" % surface.n_faces)
    for a, b, c in surface.faces:
        out.append("1")
        out.append("3 %d %d %d" % (a + 1, b + 1, c + 1))
    out.append("0")       # holes
    out.append("0")       # regions
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def _strip_tetgen(text):
    lines = []
    for ln in text.splitlines():
        ln = ln.split("#", 1)[0].strip()
        if ln:
            lines.append(ln)
    return lines


def read_tetgen_node(path):
    with open(path) as fh:
        lines = _strip_tetgen(fh.read())
    n = int(lines[0].split()[0])
    base = int(lines[1].split()[0]) if n else 0
    verts = np.empty((n, 3))
    for k in range(n):
        parts = lines[1 + k].split()
        idx = int(parts[0]) - base
        verts[idx] = [float(p) for p in parts[1:4]]
    return verts


def read_tetgen_ele(path):
    with open(path) as fh:
        lines = _strip_tetgen(fh.read())
    n = int(lines[0].split()[0])
    base = int(lines[1].split()[0]) if n else 0
    tets = np.empty((n, 4), dtype=np.int64)
    for k in range(n):
        parts = lines[1 + k].split()
        idx = int(parts[0]) - base
        tets[idx] = [int(p) - base for p in parts[1:5]]
    return tets


# ---------------------------------------------------------------------------
# dispatch by extension

def load_tet_mesh(path):
    if path.endswith(".tmesh"):
        return read_tmesh(path)
    if path.endswith(".vtk"):
        mesh = read_vtk(path)
        if not isinstance(mesh, TetMesh):
            raise ValueError("%s does not hold a tetrahedral mesh" % path)
        return mesh
    raise ValueError("unsupported tet mesh format: %s" % path)


def save_tet_mesh(mesh, path):
    if path.endswith(".tmesh"):
        write_tmesh(mesh, path)
    elif path.endswith(".vtk"):
        write_vtk(mesh, path)
    else:
        raise ValueError("unsupported tet mesh format: %s" % path)


def load_surface(path):
    if path.endswith(".tsurf"):
        return read_tsurf(path)
    if path.endswith(".vtk"):
        mesh = read_vtk(path)
        if not isinstance(mesh, TriSurface):
            raise ValueError("%s does not hold a triangle surface" % path)
        return mesh
    raise ValueError("unsupported surface format: %s" % path)


def save_surface(surface, path, title="cmac surface"):
    if path.endswith(".tsurf"):
        write_tsurf(surface, path)
    elif path.endswith(".obj"):
        write_obj(surface, path)
    elif path.endswith(".vtk"):
        write_vtk(surface, path, title)
    else:
        raise ValueError("unsupported surface format: %s" % path)
