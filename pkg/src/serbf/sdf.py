"""Signed distance sources: analytic shapes and triangle meshes.

Sign convention is negative inside, zero on the surface, positive
outside.  Mesh distances are exact point-to-triangle distances; the sign
comes from ray parity on closed meshes and falls back to angle-weighted
pseudonormals (with a warning) when the mesh has boundary edges.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.spatial import cKDTree

from serbf.surface import TriangleMesh

ANALYTIC_SHAPES = ("sphere", "box", "torus")

# Fixed ray directions for parity tests; oblique to the axes so lattice
# points rarely graze edges, with fallbacks for the points that do.
_RAY_DIRECTIONS = np.array(
    [
        [0.8017837257372732, 0.5345224838248488, 0.2672612419124244],
        [-0.3584302336565661, 0.8602325560757456, 0.3625141038833914],
        [0.2672612419124244, -0.5345224838248488, 0.8017837257372732],
        [-0.6154574548966636, -0.4923659639173309, -0.6154574548966636],
    ]
)


def analytic_sdf(shape: str, **params):
    """Returns a vectorized signed distance function for a named shape.

    Shapes and parameters (all centered at the origin):
        sphere: radius (default 0.5).
        box: half_extents (default (0.5, 0.5, 0.5)).
        torus: major_radius (default 0.35, ring in the xy plane) and
            minor_radius (default 0.15).
    """
    if shape == "sphere":
        r = float(params.pop("radius", 0.5))
        _check_params(shape, params, r > 0.0, "radius must be positive")

        def f(points):
            p = _as_points(points)
            return np.linalg.norm(p, axis=1) - r

        return f
    if shape == "box":
        he = np.asarray(
            params.pop("half_extents", (0.5, 0.5, 0.5)), dtype=np.float64
        ).reshape(3)
        _check_params(shape, params, np.all(he > 0.0), "half_extents must be positive")

        def f(points):
            p = _as_points(points)
            q = np.abs(p) - he
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return outside + inside

        return f
    if shape == "torus":
        big = float(params.pop("major_radius", 0.35))
        small = float(params.pop("minor_radius", 0.15))
        _check_params(
            shape, params, 0.0 < small < big, "need 0 < minor_radius < major_radius"
        )

        def f(points):
            p = _as_points(points)
            ring = np.hypot(np.hypot(p[:, 0], p[:, 1]) - big, p[:, 2])
            return ring - small

        return f
    raise ValueError(f"unknown shape {shape!r}; choose from {ANALYTIC_SHAPES}")


def _check_params(shape, leftovers, ok, msg):
    if leftovers:
        raise ValueError(f"unknown {shape} parameters: {sorted(leftovers)}")
    if not ok:
        raise ValueError(msg)


def _as_points(points):
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def analytic_surface_samples(shape: str, count: int, seed: int = 0, **params):
    """Exact uniform-by-area random points on an analytic shape's surface."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    if shape == "sphere":
        r = float(params.pop("radius", 0.5))
        _check_params(shape, params, r > 0.0, "radius must be positive")
        vec = rng.normal(size=(count, 3))
        vec /= np.linalg.norm(vec, axis=1, keepdims=True)
        return r * vec
    if shape == "box":
        he = np.asarray(
            params.pop("half_extents", (0.5, 0.5, 0.5)), dtype=np.float64
        ).reshape(3)
        _check_params(shape, params, np.all(he > 0.0), "half_extents must be positive")
        # Pick a face pair by area, then a sign, then a uniform point.
        areas = np.array([he[1] * he[2], he[0] * he[2], he[0] * he[1]])
        axis = rng.choice(3, size=count, p=areas / areas.sum())
        side = rng.choice([-1.0, 1.0], size=count)
        pts = rng.uniform(-1.0, 1.0, size=(count, 3)) * he
        pts[np.arange(count), axis] = side * he[axis]
        return pts
    if shape == "torus":
        big = float(params.pop("major_radius", 0.35))
        small = float(params.pop("minor_radius", 0.15))
        _check_params(
            shape, params, 0.0 < small < big, "need 0 < minor_radius < major_radius"
        )
        out = np.empty((0, 3))
        while len(out) < count:
            n = 2 * (count - len(out)) + 16
            u = rng.uniform(0.0, 2.0 * np.pi, n)
            v = rng.uniform(0.0, 2.0 * np.pi, n)
            keep = rng.random(n) < (big + small * np.cos(v)) / (big + small)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            pts = np.stack(
                [ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1
            )
            out = np.vstack([out, pts])
        return out[:count]
    raise ValueError(f"unknown shape {shape!r}; choose from {ANALYTIC_SHAPES}")


def _closest_on_triangles(p, a, b, c):
    """Closest point on each triangle (a, b, c) to each p, plus its
    barycentric coordinates; all inputs are (K, 3) aligned rows."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    k = len(p)
    bary = np.empty((k, 3))
    done = np.zeros(k, dtype=bool)

    def settle(mask, wa, wb, wc):
        m = mask & ~done
        bary[m, 0] = wa[m] if isinstance(wa, np.ndarray) else wa
        bary[m, 1] = wb[m] if isinstance(wb, np.ndarray) else wb
        bary[m, 2] = wc[m] if isinstance(wc, np.ndarray) else wc
        done[m] = True

    zeros = np.zeros(k)
    settle((d1 <= 0.0) & (d2 <= 0.0), np.ones(k), zeros, zeros)
    settle((d3 >= 0.0) & (d4 <= d3), zeros, np.ones(k), zeros)
    settle((d6 >= 0.0) & (d5 <= d6), zeros, zeros, np.ones(k))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    settle((vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0), 1.0 - t_ab, t_ab, zeros)
    settle((vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0), 1.0 - t_ac, zeros, t_ac)
    settle(
        (va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0), zeros, 1.0 - t_bc, t_bc
    )
    if not np.all(done):
        denom = va + vb + vc
        w2 = vb / denom
        w3 = vc / denom
        settle(np.ones(k, dtype=bool), 1.0 - w2 - w3, w2, w3)
    closest = bary[:, 0, None] * a + bary[:, 1, None] * b + bary[:, 2, None] * c
    return closest, bary


def _nearest_face(points, mesh: TriangleMesh):
    """Exact nearest triangle per point.

    Candidate faces come from a centroid tree: the nearest centroid gives
    an upper bound, and every face whose centroid ball could beat that
    bound is then checked exactly.

    Returns (distance, face index, closest point, barycentrics).
    """
    tri = mesh.vertices[mesh.faces]
    centroids = tri.mean(axis=1)
    radii = np.linalg.norm(tri - centroids[:, None, :], axis=2).max(axis=1)
    max_radius = float(radii.max())
    tree = cKDTree(centroids)
    d_c, _ = tree.query(points)
    bound = d_c + max_radius
    lists = tree.query_ball_point(points, bound + max_radius, return_sorted=True)

    counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(points))
    pair_pt = np.repeat(np.arange(len(points), dtype=np.int64), counts)
    pair_face = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists])
    p = points[pair_pt]
    closest, bary = _closest_on_triangles(
        p,
        tri[pair_face, 0],
        tri[pair_face, 1],
        tri[pair_face, 2],
    )
    dist = np.linalg.norm(p - closest, axis=1)

    best = np.full(len(points), np.inf)
    np.minimum.at(best, pair_pt, dist)
    # First pair achieving the minimum, fixed order for reproducibility.
    order = np.flatnonzero(dist <= best[pair_pt])
    pts_of = pair_pt[order]
    # np.unique keeps the first occurrence, so ties resolve to the lowest
    # face index, a fixed order for reproducibility.
    firsts, first_pos = np.unique(pts_of, return_index=True)
    first = np.zeros(len(points), dtype=np.int64)
    first[firsts] = order[first_pos]
    return best, pair_face[first], closest[first], bary[first]


def _ray_parity_sign(points, mesh: TriangleMesh):
    """-1 inside / +1 outside by counting ray crossings.

    Runs one direction for all points and recasts only the points whose
    hits graze an edge, using the next fixed direction.
    """
    tri = mesh.vertices[mesh.faces]
    edge1 = tri[:, 1] - tri[:, 0]
    edge2 = tri[:, 2] - tri[:, 0]
    pending = np.arange(len(points))
    sign = np.ones(len(points))
    eps = 1e-12
    graze = 1e-9
    for d in _RAY_DIRECTIONS:
        if len(pending) == 0:
            break
        pts = points[pending]
        hits = np.zeros(len(pts), dtype=np.int64)
        suspect = np.zeros(len(pts), dtype=bool)
        pvec = np.cross(d, edge2)
        det = np.einsum("fj,fj->f", edge1, pvec)
        ok_f = np.abs(det) > eps
        inv = np.zeros_like(det)
        inv[ok_f] = 1.0 / det[ok_f]
        for f in np.flatnonzero(ok_f):
            tvec = pts - tri[f, 0]
            u = (tvec @ pvec[f]) * inv[f]
            qvec = np.cross(tvec, edge1[f])
            v = (qvec @ d) * inv[f]
            t = (qvec @ edge2[f]) * inv[f]
            inside = (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
            hits += inside
            near = (
                (np.abs(u) < graze)
                | (np.abs(v) < graze)
                | (np.abs(1.0 - u - v) < graze)
                | (np.abs(t) < graze)
            )
            suspect |= inside & near
            suspect |= near & (u > -graze) & (v > -graze) & (u + v < 1.0 + graze) & (
                t > -graze
            )
        settled = ~suspect
        sign[pending[settled]] = np.where(hits[settled] % 2 == 1, -1.0, 1.0)
        pending = pending[suspect]
    if len(pending):
        # Every direction grazed; accept the last parity rather than fail.
        sign[pending] = np.where(hits[suspect] % 2 == 1, -1.0, 1.0)
    return sign


def _pseudonormal_sign(points, mesh: TriangleMesh, face, closest, bary):
    """Sign from the angle-weighted pseudonormal at the closest feature."""
    fn = mesh.face_normals()
    tol = 1e-9

    # Vertex normals: incident-angle weighted face normal sums.
    tri = mesh.vertices[mesh.faces]
    vnorm = np.zeros((mesh.vertex_count, 3))
    for corner in range(3):
        a = tri[:, corner]
        b = tri[:, (corner + 1) % 3]
        c = tri[:, (corner + 2) % 3]
        u = b - a
        v = c - a
        cosang = np.einsum("ij,ij->i", u, v) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1) + 1e-300
        )
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(vnorm, mesh.faces[:, corner], ang[:, None] * fn)

    # Edge normals: sum of the adjacent faces' normals.
    edge_map: dict = {}
    for fi, (a, b, c) in enumerate(mesh.faces):
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            edge_map.setdefault(key, []).append(fi)

    n = np.empty_like(points)
    zero = bary < tol
    nz = zero.sum(axis=1)
    for i in range(len(points)):
        f = face[i]
        if nz[i] == 0:
            n[i] = fn[f]
        elif nz[i] == 1:
            keep = np.flatnonzero(~zero[i])
            va, vb = mesh.faces[f][keep]
            adj = edge_map.get((min(va, vb), max(va, vb)), [f])
            n[i] = fn[adj].sum(axis=0)
        else:
            corner = int(np.flatnonzero(~zero[i])[0])
            n[i] = vnorm[mesh.faces[f, corner]]
    side = np.einsum("ij,ij->i", points - closest, n)
    return np.where(side < 0.0, -1.0, 1.0)


def mesh_sdf(points, mesh: TriangleMesh):
    """Signed distance from each point to a triangle mesh.

    Magnitudes are exact nearest-triangle distances.  On a closed mesh
    the sign comes from ray parity; an open mesh triggers a warning and
    the angle-weighted pseudonormal sign instead.
    """
    pts = _as_points(points)
    if mesh.face_count == 0:
        raise ValueError("mesh has no faces")
    dist, face, closest, bary = _nearest_face(pts, mesh)
    if mesh.is_closed():
        sign = _ray_parity_sign(pts, mesh)
    else:
        warnings.warn(
            "mesh has boundary edges; sign falls back to pseudonormals",
            RuntimeWarning,
            stacklevel=2,
        )
        sign = _pseudonormal_sign(pts, mesh, face, closest, bary)
    return sign * dist
