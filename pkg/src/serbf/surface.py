"""Triangle meshes: marching cubes extraction, sampling, and file I/O.

The extractor walks a regular scalar grid with the classic 256-case
tables and welds shared vertices through global edge ids, so the result
is a proper indexed mesh rather than a triangle soup.  Winding follows
the table convention: triangles face the side where values are at or
above the isolevel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from serbf.mc_tables import (
    CASE_EDGES,
    CASE_TRIANGLES,
    CORNER_OFFSETS,
    EDGE_ENDPOINTS,
)


@dataclass
class TriangleMesh:
    """Indexed triangle mesh with float64 vertices.

    Attributes:
        vertices: (V, 3) positions.
        faces: (F, 3) vertex indices, counterclockwise as seen from the
            front side.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("non-finite vertex coordinates")
        if len(self.faces) and (
            self.faces.min() < 0 or self.faces.max() >= len(self.vertices)
        ):
            raise ValueError("face index out of range")

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def face_cross(self) -> np.ndarray:
        """Unnormalized face normals (cross product of the edge vectors)."""
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return np.cross(b - a, c - a)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit face normals; degenerate faces get a zero vector."""
        cross = self.face_cross()
        norm = np.linalg.norm(cross, axis=1)
        out = np.zeros_like(cross)
        ok = norm > 0.0
        out[ok] = cross[ok] / norm[ok, None]
        return out

    def boundary_edge_count(self) -> int:
        """Number of undirected edges not shared by exactly two faces.

        Zero means every edge is interior, the closed-surface condition
        the extractor is expected to satisfy on a grid whose boundary the
        surface does not touch.
        """
        if len(self.faces) == 0:
            return 0
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int(np.sum(counts != 2))

    def is_closed(self) -> bool:
        return self.boundary_edge_count() == 0


def marching_cubes(values, origin, spacing, isolevel: float) -> TriangleMesh:
    """Extracts the isosurface of a scalar grid as a welded triangle mesh.

    Args:
        values: (nx, ny, nz) scalars; entry [i, j, k] sits at
            origin + spacing * (i, j, k).
        origin: 3-vector of the grid corner.
        spacing: scalar grid step (same along every axis).
        isolevel: surface level; corner n of a cell sets case bit n when
            its value is strictly below this.

    Returns:
        TriangleMesh with vertices welded across cell boundaries; empty
        when the level set does not cross the grid.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError("need a (nx, ny, nz) grid with nx, ny, nz >= 2")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite grid values")
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    spacing = float(spacing)
    if spacing <= 0.0:
        raise ValueError("spacing must be positive")
    nx, ny, nz = v.shape

    below = v < isolevel
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for n, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        case |= (
            below[ox : ox + nx - 1, oy : oy + ny - 1, oz : oz + nz - 1].astype(np.int64)
            << n
        )
    ci, cj, ck = np.nonzero((case != 0) & (case != 255))
    if len(ci) == 0:
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    cell_case = case[ci, cj, ck]
    edge_mask = CASE_EDGES[cell_case]

    # Global edge id: axis * #lattice + linear index of the edge's base
    # lattice point, so an edge shared by up to four cells gets one id.
    lattice = nx * ny * nz

    def lattice_id(i, j, k):
        return (i * ny + j) * nz + k

    base = np.stack([ci, cj, ck], axis=1)
    corner_ids = np.empty((len(ci), 8), dtype=np.int64)
    for n in range(8):
        p = base + CORNER_OFFSETS[n]
        corner_ids[:, n] = lattice_id(p[:, 0], p[:, 1], p[:, 2])

    # Edge axis derived from its endpoint offsets (0 x, 1 y, 2 z), and the
    # base corner is the endpoint with the smaller offset along that axis.
    edge_axis = np.argmax(
        CORNER_OFFSETS[EDGE_ENDPOINTS[:, 0]] != CORNER_OFFSETS[EDGE_ENDPOINTS[:, 1]],
        axis=1,
    )
    edge_base_end = np.where(
        CORNER_OFFSETS[EDGE_ENDPOINTS[:, 0], edge_axis]
        <= CORNER_OFFSETS[EDGE_ENDPOINTS[:, 1], edge_axis],
        EDGE_ENDPOINTS[:, 0],
        EDGE_ENDPOINTS[:, 1],
    )

    global_edge = np.empty((len(ci), 12), dtype=np.int64)
    for e in range(12):
        global_edge[:, e] = edge_axis[e] * lattice + corner_ids[:, edge_base_end[e]]

    cell_rows, local_edges = np.nonzero((edge_mask[:, None] >> np.arange(12)) & 1)
    keys = global_edge[cell_rows, local_edges]
    uniq_keys, first_pos = np.unique(keys, return_index=True)

    # Interpolated position for each unique crossed edge.
    ua = EDGE_ENDPOINTS[local_edges[first_pos], 0]
    ub = EDGE_ENDPOINTS[local_edges[first_pos], 1]
    cell_sel = cell_rows[first_pos]
    pa_idx = base[cell_sel] + CORNER_OFFSETS[ua]
    pb_idx = base[cell_sel] + CORNER_OFFSETS[ub]
    va = v[pa_idx[:, 0], pa_idx[:, 1], pa_idx[:, 2]]
    vb = v[pb_idx[:, 0], pb_idx[:, 1], pb_idx[:, 2]]
    # A crossed edge has one endpoint strictly below the level, so the
    # denominator cannot vanish.
    t = (isolevel - va) / (vb - va)
    verts = origin + spacing * (pa_idx + t[:, None] * (pb_idx - pa_idx))

    # Map each cell's local edge ids to welded vertex rows.
    vertex_of = np.searchsorted(uniq_keys, global_edge)
    tri_rows = CASE_TRIANGLES[cell_case][:, :15].reshape(-1, 5, 3)
    valid = tri_rows[:, :, 0] >= 0
    cell_of_tri, slot = np.nonzero(valid)
    local = tri_rows[cell_of_tri, slot]
    faces = vertex_of[cell_of_tri[:, None], local]
    return TriangleMesh(verts, faces)


def sample_surface(mesh: TriangleMesh, count: int, seed: int = 0):
    """Uniform-by-area random points on a mesh.

    Faces are drawn with probability proportional to area, then a point
    is placed uniformly in each drawn face.  Degenerate meshes with zero
    total area are rejected.

    Returns:
        (points, normals): (count, 3) positions and the unit normal of
        the face each point lies on.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if mesh.face_count == 0:
        raise ValueError("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0.0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.Generator(np.random.PCG64(seed))
    face_idx = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.random(count)
    w = rng.random(count)
    flip = u + w > 1.0
    u[flip] = 1.0 - u[flip]
    w[flip] = 1.0 - w[flip]
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + w[:, None] * (
        tri[:, 2] - tri[:, 0]
    )
    normals = mesh.face_normals()[face_idx]
    return pts, normals


def write_obj(path, mesh: TriangleMesh) -> None:
    """Writes vertices and faces in Wavefront OBJ with full precision."""
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def read_obj(path) -> TriangleMesh:
    """Reads an OBJ mesh; polygons with more than 3 corners are fanned."""
    verts: list = []
    faces: list = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                ids = [int(p.split("/")[0]) for p in parts[1:]]
                ids = [i - 1 if i > 0 else len(verts) + i for i in ids]
                for k in range(1, len(ids) - 1):
                    faces.append([ids[0], ids[k], ids[k + 1]])
    if not verts:
        raise ValueError(f"no vertices in {path}")
    return TriangleMesh(
        np.asarray(verts, dtype=np.float64),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )


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


def read_ply(path) -> TriangleMesh:
    """Reads a binary little-endian PLY mesh (fixed vertex properties plus
    one list property per face; extra vertex properties are skipped)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path} is not a PLY file")
    header = data[:end].decode("ascii", "replace").splitlines()
    body = data[end + len(b"end_header\n") :]

    fmt = next((ln.split()[1] for ln in header if ln.startswith("format ")), None)
    if fmt != "binary_little_endian":
        raise ValueError(f"unsupported PLY format {fmt!r}")

    elements: list = []  # (name, count, [(prop_name, dtype) or ('list', idx_t, val_t)])
    for ln in header:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property" and elements:
            if parts[1] == "list":
                elements[-1][2].append(("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                elements[-1][2].append((parts[-1], _PLY_TYPES[parts[1]]))

    verts = None
    faces: list = []
    offset = 0
    for name, count, props in elements:
        if any(p[0] == "list" for p in props):
            if len(props) != 1:
                raise ValueError("mixed list/scalar PLY elements are unsupported")
            _, idx_t, val_t = props[0]
            idx_dt = np.dtype("<" + idx_t)
            val_dt = np.dtype("<" + val_t)
            for _ in range(count):
                n = int(np.frombuffer(body, idx_dt, 1, offset)[0])
                offset += idx_dt.itemsize
                ids = np.frombuffer(body, val_dt, n, offset).astype(np.int64)
                offset += n * val_dt.itemsize
                if name == "face":
                    for k in range(1, n - 1):
                        faces.append([ids[0], ids[k], ids[k + 1]])
        else:
            dt = np.dtype([(pname, "<" + pt) for pname, pt in props])
            rows = np.frombuffer(body, dt, count, offset)
            offset += count * dt.itemsize
            if name == "vertex":
                verts = np.stack(
                    [rows["x"], rows["y"], rows["z"]], axis=1
                ).astype(np.float64)
    if verts is None:
        raise ValueError(f"no vertex element in {path}")
    return TriangleMesh(verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh(path) -> TriangleMesh:
    """Reads a mesh file, choosing the parser by extension (.obj, .ply)."""
    p = str(path)
    if p.lower().endswith(".ply"):
        return read_ply(p)
    return read_obj(p)
