"""Layered octree grids, radius queries, and per-basis point screening.

The octree is built over surface samples only: a cell subdivides exactly
when it contains at least one surface point and has not reached the depth
limit.  Grid points are the cell corners, and each corner is assigned to
the shallowest layer that introduces it, so layer i holds the corners that
first appear when depth-i cells are created.  Layer indices therefore run
1..max_depth with layer 1 being the eight corners of the root cube.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from serbf.core import ErbfBasis, ErbfModel, SURFACE_LAYER


@dataclass
class GridLayer:
    index: int
    points: np.ndarray
    sdf: np.ndarray | None = None


@dataclass
class OctreeGrid:
    """Grid-point layers G^1..G^l over a padded cubic root cell."""

    layers: list[GridLayer]
    max_depth: int
    origin: np.ndarray
    size: float

    def spacing(self, layer_index: int) -> float:
        """Cell edge length at a layer (the corner lattice pitch)."""
        if not 1 <= layer_index <= self.max_depth:
            raise ValueError(f"layer index {layer_index} outside 1..{self.max_depth}")
        return self.size / float(2 ** (layer_index - 1))

    @property
    def all_points(self) -> np.ndarray:
        return np.vstack([lay.points for lay in self.layers])


@dataclass
class GridSamples:
    """Flat merged sample rows: octree grid points plus surface samples.

    ``layer`` is the octree layer per row, with SURFACE_LAYER marking
    surface samples; ``sdf`` is the physical signed distance (0 on the
    surface rows).
    """

    points: np.ndarray
    sdf: np.ndarray
    layer: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.sdf = np.ascontiguousarray(self.sdf, dtype=np.float64)
        self.layer = np.ascontiguousarray(self.layer, dtype=np.int64)
        n = len(self.points)
        if self.points.shape != (n, 3) or self.sdf.shape != (n,) or self.layer.shape != (n,):
            raise ValueError("points, sdf, layer must have matching length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def surface_mask(self) -> np.ndarray:
        return self.layer == SURFACE_LAYER

    @property
    def max_layer(self) -> int:
        grid = self.layer[self.layer != SURFACE_LAYER]
        return int(grid.max()) if len(grid) else 0

    @classmethod
    def from_octree(cls, grid: OctreeGrid, surface_points: np.ndarray) -> "GridSamples":
        """Stacks filled octree layers (ascending) then the surface rows."""
        for lay in grid.layers:
            if lay.sdf is None:
                raise ValueError(f"layer {lay.index} has no SDF values")
        surface_points = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
        points = np.vstack([lay.points for lay in grid.layers] + [surface_points])
        sdf = np.concatenate(
            [lay.sdf for lay in grid.layers] + [np.zeros(len(surface_points))]
        )
        layer = np.concatenate(
            [np.full(len(lay.points), lay.index, dtype=np.int64) for lay in grid.layers]
            + [np.full(len(surface_points), SURFACE_LAYER, dtype=np.int64)]
        )
        return cls(points=points, sdf=sdf, layer=layer)


def _root_cube(points: np.ndarray) -> tuple[np.ndarray, float]:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0.0:
        raise ValueError("degenerate bounding box: surface points have zero extent")
    size = extent * 1.10  # 5% padding per side
    origin = (lo + hi) / 2.0 - size / 2.0
    return origin, size


def build_octree(surface_points, max_depth: int) -> OctreeGrid:
    """Builds the layered corner grid of an occupancy octree.

    Args:
        surface_points: (K, 3) samples on the target surface.
        max_depth: total number of layers; the root cell counts as depth 1.

    Returns:
        OctreeGrid whose layer i holds the corners newly introduced at
        depth i, deduplicated against shallower layers.  SDF values are
        left unfilled.

    Raises:
        ValueError: on a zero-extent bounding box or max_depth < 1.
    """
    pts = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no surface points")
    max_depth = int(max_depth)
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    origin, size = _root_cube(pts)

    # Corner coordinates are tracked on the finest lattice as integers so
    # cross-layer deduplication is exact.
    fine = 2 ** (max_depth - 1)
    enc = np.int64(fine + 1)
    offsets = np.array(
        [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
    )

    def encode(coords: np.ndarray) -> np.ndarray:
        return (coords[:, 0] * enc + coords[:, 1]) * enc + coords[:, 2]

    layers: list[GridLayer] = []
    seen = np.empty(0, dtype=np.int64)
    # Cells existing at the current depth, as indices on the 2^(depth-1)
    # lattice.  The root always exists; at each later depth the existing
    # cells are the eight children of every subdivided (occupied) cell.
    existing = np.zeros((1, 3), dtype=np.int64)
    for depth in range(1, max_depth + 1):
        cells_per_axis = 2 ** (depth - 1)
        scale = fine // cells_per_axis  # corner pitch on the finest lattice
        corners = (existing[:, None, :] + offsets[None, :, :]).reshape(-1, 3) * scale
        keys = np.unique(encode(corners))
        new = np.setdiff1d(keys, seen, assume_unique=True)
        seen = np.union1d(seen, new)
        coords = np.empty((len(new), 3), dtype=np.int64)
        coords[:, 2] = new % enc
        coords[:, 1] = (new // enc) % enc
        coords[:, 0] = new // (enc * enc)
        layer_pts = origin + coords * (size / fine)
        layers.append(GridLayer(index=depth, points=layer_pts))
        if depth == max_depth:
            break
        # Occupancy is hereditary, so the cells containing points at this
        # depth are exactly the ones that subdivide (depth limit permitting).
        cell = np.floor((pts - origin) / (size / cells_per_axis)).astype(np.int64)
        np.clip(cell, 0, cells_per_axis - 1, out=cell)
        occupied = np.unique(cell, axis=0)
        existing = (occupied[:, None, :] * 2 + offsets[None, :, :]).reshape(-1, 3)
    return OctreeGrid(layers=layers, max_depth=max_depth, origin=origin, size=size)


def screening_radius(basis: ErbfBasis, epsilon: float) -> float:
    """Support radius beyond which the kernel value falls below epsilon."""
    epsilon = float(epsilon)
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    lam = min(a * a for a in basis.axes)
    if lam <= 0.0:
        raise ValueError("axes must be strictly positive")
    return float(np.sqrt(-np.log(epsilon) / lam))


def _screening_radii(axes: np.ndarray, epsilon: float) -> np.ndarray:
    lam = np.min(np.asarray(axes, dtype=np.float64) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        return np.sqrt(-np.log(float(epsilon)) / lam)


@dataclass
class ScreenIndex:
    """Per-basis neighbor lists under the support-radius rule.

    For basis j, ``neighbors[j]`` holds exactly the indices of points with
    ||c_j - v|| <= radii[j] (boundary included), sorted ascending.
    """

    neighbors: list[np.ndarray]
    radii: np.ndarray
    point_count: int


def _query_radii(
    tree: cKDTree, centers: np.ndarray, radii: np.ndarray, workers: int = 1
) -> list:
    # Clamp unbounded or huge radii to a per-center distance that already
    # covers every point, so the tree query stays finite and exact.
    lo = tree.mins
    hi = tree.maxes
    corners = np.array([(x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)])
    box = lo + corners * (hi - lo)
    cover = np.linalg.norm(centers[:, None, :] - box[None, :, :], axis=2).max(axis=1) + 1.0
    r = np.minimum(radii, cover)
    return tree.query_ball_point(centers, r, return_sorted=True, workers=workers)


def build_screen_index(
    points, model: ErbfModel, epsilon: float, workers: int = 1
) -> ScreenIndex:
    """Exact radius neighborhoods of every basis center over the points."""
    if model.basis_count == 0:
        raise ValueError("model has no bases")
    if not 0.0 < float(epsilon) < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    radii = _screening_radii(model.axes, epsilon)
    tree = cKDTree(pts)
    lists = _query_radii(tree, model.centers, radii, workers=workers)
    neighbors = [np.asarray(ix, dtype=np.int64) for ix in lists]
    return ScreenIndex(neighbors=neighbors, radii=radii, point_count=len(pts))


def neighbors_within(points, query, radius: float) -> np.ndarray:
    """Indices of points with Euclidean distance <= radius from the query."""
    if radius < 0.0:
        raise ValueError("radius must be nonnegative")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(query, dtype=np.float64).reshape(3)
    idx = cKDTree(pts).query_ball_point(q, float(radius), return_sorted=True)
    return np.asarray(idx, dtype=np.int64)


def support_pairs(
    tree: cKDTree,
    centers: np.ndarray,
    axes: np.ndarray,
    epsilon: float,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Flat (point, basis) incidence under the screening rule.

    Returns two aligned int64 arrays sorted by (basis, point); the pair
    list is the sparse support of the feature matrix over the tree's
    points and is rebuilt whenever centers or axes move materially.
    """
    radii = _screening_radii(axes, epsilon)
    lists = _query_radii(tree, centers, radii, workers=workers)
    counts = np.fromiter((len(ix) for ix in lists), dtype=np.int64, count=len(lists))
    if counts.sum() == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    pair_pt = np.concatenate([np.asarray(ix, dtype=np.int64) for ix in lists])
    pair_basis = np.repeat(np.arange(len(lists), dtype=np.int64), counts)
    return pair_pt, pair_basis


def octree_from_samples(samples: GridSamples) -> tuple[OctreeGrid, np.ndarray]:
    """Rebuilds the layered grid (and the surface rows) from flat samples.

    Layer 1 always holds exactly the root cube's 8 corners, which pins
    the cube's origin and size without storing them separately.
    """
    grid_mask = ~samples.surface_mask
    if not np.any(grid_mask):
        raise ValueError("samples contain no grid rows")
    tags = samples.layer[grid_mask]
    depth = int(tags.max())
    if tags.min() != 1:
        raise ValueError("grid rows must start at layer 1")
    layers = []
    for i in range(1, depth + 1):
        rows = grid_mask & (samples.layer == i)
        if not np.any(rows):
            raise ValueError(f"layer {i} has no rows")
        layers.append(GridLayer(index=i, points=samples.points[rows], sdf=samples.sdf[rows]))
    roots = layers[0].points
    if len(roots) != 8:
        raise ValueError(f"layer 1 must hold the 8 root corners, got {len(roots)}")
    lo = roots.min(axis=0)
    hi = roots.max(axis=0)
    size = float(np.max(hi - lo))
    if size <= 0.0:
        raise ValueError("root corners are degenerate")
    grid = OctreeGrid(layers=layers, max_depth=depth, origin=lo, size=size)
    return grid, samples.points[samples.surface_mask]
