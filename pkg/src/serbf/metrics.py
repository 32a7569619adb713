"""Surface comparison metrics over point samples.

All three metrics are symmetric in their two point sets.  Distances are
Euclidean nearest-neighbor distances; the normal consistency score uses
the unsigned cosine so opposite orientations of the same surface agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be nonempty")
    return a, b


def hausdorff(points_a, points_b) -> float:
    """max over both directions of the largest nearest-neighbor distance."""
    a, b = _pair(points_a, points_b)
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(max(d_ab.max(), d_ba.max()))


def chamfer(points_a, points_b) -> float:
    """Mean nearest-neighbor distance, averaged over both directions."""
    a, b = _pair(points_a, points_b)
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(0.5 * d_ab.mean() + 0.5 * d_ba.mean())


def cosine_similarity(points_a, normals_a, points_b, normals_b) -> float:
    """Mean |cos| between each point's normal and its nearest neighbor's,
    averaged over both directions; 1 means perfectly aligned surfaces."""
    a, b = _pair(points_a, points_b)
    na = _unit_normals(normals_a, len(a))
    nb = _unit_normals(normals_b, len(b))
    idx_ab = cKDTree(b).query(a)[1]
    idx_ba = cKDTree(a).query(b)[1]
    ab = np.abs(np.einsum("ij,ij->i", na, nb[idx_ab])).mean()
    ba = np.abs(np.einsum("ij,ij->i", nb, na[idx_ba])).mean()
    return float(0.5 * (ab + ba))


def _unit_normals(normals, count):
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(n) != count:
        raise ValueError("normals must align with points")
    norm = np.linalg.norm(n, axis=1)
    if np.any(norm == 0.0):
        raise ValueError("zero-length normal")
    return n / norm[:, None]


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation summary for one reconstructed surface.

    param_count is always 10 * basis_count: three center coordinates,
    three axis scales, three rotation angles, and one weight per basis.
    """

    hd: float
    cd: float
    cs: float
    sample_count: int
    runtime: float
    basis_count: int
    param_count: int

    def __post_init__(self):
        if self.param_count != 10 * self.basis_count:
            raise ValueError("param_count must equal 10 * basis_count")

    @classmethod
    def measure(
        cls,
        points_a,
        normals_a,
        points_b,
        normals_b,
        runtime: float,
        basis_count: int,
    ) -> "MetricsReport":
        a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
        return cls(
            hd=hausdorff(points_a, points_b),
            cd=chamfer(points_a, points_b),
            cs=cosine_similarity(points_a, normals_a, points_b, normals_b),
            sample_count=len(a),
            runtime=float(runtime),
            basis_count=int(basis_count),
            param_count=10 * int(basis_count),
        )
