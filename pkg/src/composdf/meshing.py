"""Triangle mesh extraction from the implicit map, and mesh file I/O.

The decoded field is evaluated on a regular lattice, masked by the
octree's allocated volume, and contoured at the zero level with the
classic 256-case marching cubes tables. Any cell touching a lattice
vertex outside the map is skipped rather than extrapolated, so meshes
end cleanly at the mapped boundary. Iso vertices are deduplicated by
the global lattice edge they sit on, which makes the surface watertight
wherever the field itself is closed.

The zero crossing of the trained field coincides with the surface even
though the decoder predicts a scaled distance, so no un-scaling happens
here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mc_tables import MC_EDGES, MC_TRIANGLES
from .sampler import ParseError

DEGENERATE_AREA = 1e-12
WELD_SNAP = 1e-6           # vertex weld quantum, in cell units

# cube corner offsets in the table's vertex order
CUBE_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=np.int64)

# each cube edge as (offset of its lattice-lower endpoint, axis it runs along)
EDGE_BASE = np.array([
    [0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0],
    [0, 0, 1], [1, 0, 1], [0, 1, 1], [0, 0, 1],
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
], dtype=np.int64)
EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2], dtype=np.int64)


@dataclass
class MeshGrid:
    """Regular evaluation lattice: origin corner, cell size, vertex counts,
    and (once sampled) per-vertex field values and in-map validity."""

    lo: np.ndarray
    cell: float
    shape: tuple
    values: np.ndarray = None
    valid: np.ndarray = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        if any(n < 2 for n in self.shape):
            raise ValueError("grid needs at least 2 vertices per axis")

    @classmethod
    def from_bounds(cls, lo, hi, cell):
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if cell <= 0:
            raise ValueError("cell size must be positive")
        if np.any(hi <= lo):
            raise ValueError("bounds must have positive extent")
        shape = tuple(int(np.ceil((hi[a] - lo[a]) / cell)) + 1 for a in range(3))
        return cls(lo, float(cell), shape)

    @property
    def n_vertices(self):
        return int(np.prod(self.shape))

    def vertex_coords(self):
        """(N,3) world positions of all lattice vertices, x fastest in the
        last reshape axis order (C order over (nx,ny,nz))."""
        axes = [self.lo[a] + np.arange(self.shape[a]) * self.cell for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def grid_for_tree(tree, cell, margin=None):
    """Lattice covering the octree's allocated extent plus one-cell margin."""
    lo, hi = tree.allocated_bounds()
    pad = cell if margin is None else margin
    return MeshGrid.from_bounds(lo - pad, hi + pad, cell)


def sample_grid(field, grid: MeshGrid, chunk=65536, valid_fn=None):
    """Evaluate the field on the lattice, marking out-of-map vertices invalid.

    ``field`` is either a map state (``phi_eval``/``hit_mask``) or a plain
    callable on (N,3) points; ``valid_fn`` overrides the validity source.
    Evaluation is chunked but pointwise, so the fill order cannot change
    the result.
    """
    pts = grid.vertex_coords()
    phi_fn = field.phi_eval if hasattr(field, "phi_eval") else field
    if valid_fn is None and hasattr(field, "hit_mask"):
        valid_fn = field.hit_mask
    values = np.empty(len(pts), dtype=np.float64)
    valid = np.ones(len(pts), dtype=bool)
    for i in range(0, len(pts), chunk):
        sl = slice(i, i + chunk)
        values[sl] = np.asarray(phi_fn(pts[sl]), dtype=np.float64)
        if valid_fn is not None:
            valid[sl] = valid_fn(pts[sl])
    return MeshGrid(grid.lo, grid.cell, grid.shape,
                    values=values.reshape(grid.shape),
                    valid=valid.reshape(grid.shape))


@dataclass
class TriangleMesh:
    vertices: np.ndarray       # (N,3) float32, meters
    triangles: np.ndarray      # (M,3) int32

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("vertices must be finite")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def triangle_areas(self):
        a = self.vertices[self.triangles[:, 0]].astype(np.float64)
        b = self.vertices[self.triangles[:, 1]].astype(np.float64)
        c = self.vertices[self.triangles[:, 2]].astype(np.float64)
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_counts(self):
        """Unique undirected edges and how many triangles share each."""
        e = np.concatenate([self.triangles[:, [0, 1]],
                            self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]]).astype(np.int64)
        e.sort(axis=1)
        packed = e[:, 0] * (self.n_vertices + 1) + e[:, 1]
        uniq, counts = np.unique(packed, return_counts=True)
        return uniq, counts


def empty_mesh():
    return TriangleMesh(np.zeros((0, 3), dtype=np.float32),
                        np.zeros((0, 3), dtype=np.int32))


def marching_cubes(grid: MeshGrid, iso=0.0):
    """Contour the sampled grid at the iso level.

    Standard 256-case extraction with linear interpolation along crossing
    edges; cells with any invalid corner are skipped. Vertices are shared
    between cells through their global lattice edge, and triangles thinner
    than the degeneracy threshold are dropped.
    """
    if grid.values is None:
        raise ValueError("grid has not been sampled")
    v = np.asarray(grid.values, dtype=np.float64)
    valid = (np.ones(grid.shape, dtype=bool) if grid.valid is None
             else np.asarray(grid.valid, dtype=bool))
    nx, ny, nz = grid.shape

    def corner_view(arr, c):
        dx, dy, dz = CUBE_CORNERS[c]
        return arr[dx: nx - 1 + dx, dy: ny - 1 + dy, dz: nz - 1 + dz]

    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    cell_ok = np.ones_like(case, dtype=bool)
    for c in range(8):
        case |= (corner_view(v, c) < iso).astype(np.int32) << c
        cell_ok &= corner_view(valid, c)
    active = np.flatnonzero(((MC_EDGES[case] != 0) & cell_ok).ravel())
    if len(active) == 0:
        return empty_mesh()

    cx, cy, cz = np.unravel_index(active, case.shape)
    rows = MC_TRIANGLES[case.ravel()[active]].astype(np.int64)   # (A,16)
    entries = rows[:, :15].reshape(-1, 5, 3)                     # (A,5,3) edge ids
    tri_mask = entries[:, :, 0] >= 0                             # (A,5)
    a_idx, t_idx = np.nonzero(tri_mask)
    tri_edges = entries[a_idx, t_idx]                            # (T,3)

    # map each (cell, edge) to its global lattice edge
    base = np.stack([cx[a_idx], cy[a_idx], cz[a_idx]], axis=1)   # (T,3)
    corner = base[:, None, :] + EDGE_BASE[tri_edges]             # (T,3,3)
    axis = EDGE_AXIS[tri_edges]                                  # (T,3)
    key = ((corner[:, :, 0] * ny + corner[:, :, 1]) * nz
           + corner[:, :, 2]) * 3 + axis
    uniq_keys, tri_verts = np.unique(key.ravel(), return_inverse=True)
    # the tables wind clockwise seen from outside in this axis convention;
    # swap to outward-facing order
    tri_verts = tri_verts.reshape(-1, 3).astype(np.int64)[:, ::-1]

    # interpolate one position per unique lattice edge
    ukey = uniq_keys // 3
    uaxis = uniq_keys % 3
    gz = ukey % nz
    gy = (ukey // nz) % ny
    gx = ukey // (nz * ny)
    ga = np.stack([gx, gy, gz], axis=1)
    gb = ga.copy()
    gb[np.arange(len(gb)), uaxis] += 1
    va = v[ga[:, 0], ga[:, 1], ga[:, 2]]
    vb = v[gb[:, 0], gb[:, 1], gb[:, 2]]
    t = (iso - va) / (vb - va)
    pos = ga.astype(np.float64)
    pos[np.arange(len(pos)), uaxis] += t

    # crossings at (or within rounding noise of) t = 0 or 1 sit on a shared
    # lattice vertex and are produced once per incident edge; weld them so
    # dropping the resulting sliver triangles cannot open pinholes
    qpos = np.round(pos / WELD_SNAP).astype(np.int64)
    _, first, remap = np.unique(qpos, axis=0, return_index=True,
                                return_inverse=True)
    tri_verts = remap[tri_verts]
    verts = (grid.lo + pos[first] * grid.cell).astype(np.float32)

    mesh = TriangleMesh(verts, tri_verts.astype(np.int32))
    keep = mesh.triangle_areas() > DEGENERATE_AREA
    mesh = TriangleMesh(mesh.vertices, mesh.triangles[keep])
    return _without_unused_vertices(mesh)


def _without_unused_vertices(mesh: TriangleMesh):
    used, inverse = np.unique(mesh.triangles.ravel(), return_inverse=True)
    if len(used) == len(mesh.vertices):
        return mesh
    return TriangleMesh(mesh.vertices[used],
                        inverse.reshape(-1, 3).astype(np.int32))


# ---------------------------------------------------------------------------
# mesh file formats
# ---------------------------------------------------------------------------


MESH_FORMATS = ("ply_binary", "obj_ascii")


def write_mesh(mesh: TriangleMesh, path, fmt="ply_binary", comments=None):
    """Write a mesh; `comments` are embedded as header/comment lines."""
    if fmt == "ply_binary":
        _write_ply(mesh, path, comments)
    elif fmt == "obj_ascii":
        _write_obj(mesh, path, comments)
    else:
        raise ValueError(f"unknown mesh format {fmt!r}")


def read_mesh(path, fmt=None):
    if fmt is None:
        fmt = "obj_ascii" if str(path).endswith(".obj") else "ply_binary"
    if fmt == "ply_binary":
        return _read_ply(path)
    if fmt == "obj_ascii":
        return _read_obj(path)
    raise ValueError(f"unknown mesh format {fmt!r}")


def _comment_lines(comments):
    out = []
    for c in comments or ():
        c = str(c).replace("\n", " ").replace("\r", " ")
        out.append(c.encode("ascii", "replace").decode("ascii"))
    return out


def _write_ply(mesh, path, comments=None):
    comment_block = "".join(f"comment {c}\n" for c in _comment_lines(comments))
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"{comment_block}"
        f"element vertex {mesh.n_vertices}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        f"element face {mesh.n_triangles}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    face_dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    faces = np.empty(mesh.n_triangles, dtype=face_dt)
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(mesh.vertices.astype("<f4").tobytes())
        f.write(faces.tobytes())


def _read_ply(path):
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a ply file")
    header = blob[:end].decode("ascii", "replace").splitlines()
    n_vertex = n_face = None
    if "format binary_little_endian 1.0" not in header:
        raise ParseError(f"{path}: expected binary little-endian ply")
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vertex = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
    if n_vertex is None or n_face is None:
        raise ParseError(f"{path}: missing vertex or face element")
    body = blob[end + len(b"end_header\n"):]
    need_v = 12 * n_vertex
    face_dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    if len(body) != need_v + face_dt.itemsize * n_face:
        raise ParseError(f"{path}: body size does not match header counts")
    verts = np.frombuffer(body[:need_v], dtype="<f4").reshape(-1, 3).copy()
    faces = np.frombuffer(body[need_v:], dtype=face_dt)
    if n_face and not np.all(faces["n"] == 3):
        raise ParseError(f"{path}: only triangle faces are supported")
    return TriangleMesh(verts, faces["idx"].copy())


def _write_obj(mesh, path, comments=None):
    with open(path, "w") as f:
        for c in _comment_lines(comments):
            f.write(f"# {c}\n")
        for x, y, z in mesh.vertices:
            f.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles + 1:     # obj indices are 1-based
            f.write(f"f {a} {b} {c}\n")


def _read_obj(path):
    verts = []
    faces = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0] not in ("v", "f"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                else:
                    faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
            except ValueError as exc:
                raise ParseError(f"{path}:{ln}: {exc}") from None
    verts = (np.array(verts, dtype=np.float32) if verts
             else np.zeros((0, 3), dtype=np.float32))
    faces = (np.array(faces, dtype=np.int32) if faces
             else np.zeros((0, 3), dtype=np.int32))
    return TriangleMesh(verts, faces)
