"""Inscribed-sphere center selection and isotropic axis-length setup.

Initial centers are picked greedily: the interior point farthest from the
surface seeds a sphere of that radius, covered interior points are
discarded, and the loop repeats until no interior point remains.  The
printed removal rule compares squared point distances against the
unsquared radius; both that convention and the strictly metric one are
available, since they only change the initial center density.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

CONVENTIONS = ("as_printed", "squared")


def inscribed_sphere_init(
    interior_points,
    interior_labels,
    surface_points,
    convention: str = "as_printed",
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy maximal-inscribed-sphere selection of centers and weights.

    Args:
        interior_points: (K, 3) interior grid points.
        interior_labels: (K,) normalized labels, each strictly in (1, 2).
        surface_points: (P, 3) surface samples used for the
            distance-to-surface field.
        convention: removal rule; "as_printed" discards points with
            squared distance <= the unsquared radius, "squared" uses the
            metric ball (distance <= radius).

    Returns:
        (centers, weights): selected subset of the interior points with
        their labels as weights, in selection order.
    """
    pts = np.asarray(interior_points, dtype=np.float64).reshape(-1, 3)
    lab = np.asarray(interior_labels, dtype=np.float64).reshape(-1)
    surf = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no interior points to initialize from")
    if len(pts) != len(lab):
        raise ValueError("interior points and labels must have equal length")
    if np.any(lab <= 1.0) or np.any(lab >= 2.0):
        raise ValueError("interior labels must lie strictly in (1, 2)")
    if len(surf) == 0:
        raise ValueError("no surface points")
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}")

    d_in, _ = cKDTree(surf).query(pts)
    centers = []
    weights = []
    while len(pts):
        i = int(np.argmax(d_in))
        r = float(d_in[i])
        centers.append(pts[i])
        weights.append(lab[i])
        dk = np.sum((pts - pts[i]) ** 2, axis=1)
        # The selected point always has dk = 0 <= r, so each pass strictly
        # shrinks the set and the loop terminates.
        keep = dk > (r if convention == "as_printed" else r * r)
        pts, lab, d_in = pts[keep], lab[keep], d_in[keep]
    return np.asarray(centers, dtype=np.float64), np.asarray(weights, dtype=np.float64)


def axis_length_init(
    centers, weights, gamma: float, surface_points=None
) -> np.ndarray:
    """Isotropic inverse-length scales from nearest-center spacing.

    Each kernel's value at its nearest neighboring center is forced down
    to gamma, giving d = 2*sqrt(-ln(gamma / w^2)) / spacing.  With a
    single center there is no neighbor, so its distance to the nearest
    surface sample stands in for the spacing, keeping the kernel
    supported inside the shape.

    Returns:
        (M, 3) array with identical entries per row, all positive.
    """
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(c) != len(w) or len(c) == 0:
        raise ValueError("centers and weights must be nonempty and aligned")
    gamma = float(gamma)
    wsq = w * w
    if gamma <= 0.0 or np.any(gamma >= wsq):
        raise ValueError("need 0 < gamma < w_j^2 for every weight")
    if len(c) >= 2:
        dist, _ = cKDTree(c).query(c, k=2)
        spacing = dist[:, 1]
    else:
        if surface_points is None:
            raise ValueError("single center needs surface points for its spacing")
        surf = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
        spacing = cKDTree(surf).query(c)[0]
    if np.any(spacing <= 0.0):
        raise ValueError("coincident centers give no usable spacing")
    d = 2.0 * np.sqrt(-np.log(gamma / wsq)) / spacing
    return np.repeat(d[:, None], 3, axis=1)
