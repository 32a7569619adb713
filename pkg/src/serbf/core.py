"""Model data types, SDF normalization, rotations, and network evaluation.

An ellipsoidal Gaussian basis evaluates as

    phi(x) = exp(-|| D R (x - c) ||^2)

with D = diag(d1, d2, d3) the inverse-length scales of the principal axes
and R the composed rotation R(theta_z) @ R(theta_y) @ R(theta_x).  A model
is an ordered collection of such bases; its output at a point is

    psi(x) = sum_j  w_j * |w_j| * phi_j(x)

so each basis contributes with a definite sign while the magnitude stays
differentiable in w.  Physical signed distances are fitted through the
normalization map s_hat = 2 * exp(-h * (s - m)^2), which sends the deepest
interior value m to 2, the surface to 1, and the far exterior toward 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Layer tag reserved for on-surface samples in merged training sets.
SURFACE_LAYER = -1

_NORM_H_RTOL = 1e-12


@dataclass(frozen=True)
class ErbfBasis:
    """One ellipsoidal Gaussian kernel: 10 scalars.

    Attributes:
        center: kernel center in world units.
        axes: strictly positive inverse-length scales (d1, d2, d3).
        angles: rotation angles (theta_x, theta_y, theta_z) in radians.
        weight: signed output coefficient; the kernel contributes w*|w|.
    """

    center: tuple[float, float, float]
    axes: tuple[float, float, float]
    angles: tuple[float, float, float]
    weight: float

    def __post_init__(self):
        for name in ("center", "axes", "angles"):
            vec = tuple(float(v) for v in getattr(self, name))
            if len(vec) != 3 or not all(math.isfinite(v) for v in vec):
                raise ValueError(f"{name} must be 3 finite reals, got {vec!r}")
            object.__setattr__(self, name, vec)
        if any(a <= 0.0 for a in self.axes):
            raise ValueError(f"axes must be strictly positive, got {self.axes!r}")
        w = float(self.weight)
        if not math.isfinite(w):
            raise ValueError("weight must be finite")
        object.__setattr__(self, "weight", w)


@dataclass
class ErbfModel:
    """Ordered basis collection plus the normalization constants.

    Parameter arrays are kept in struct-of-arrays form so batched math does
    not have to repack per-basis records.  ``norm_m`` is the minimum raw
    signed distance of the training grid (negative by construction) and
    ``norm_h = ln(2) / norm_m**2``; both are stored so decoding predictions
    back to physical SDF never needs the original sample set.
    """

    centers: np.ndarray
    axes: np.ndarray
    angles: np.ndarray
    weights: np.ndarray
    norm_m: float
    norm_h: float

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        self.axes = np.ascontiguousarray(self.axes, dtype=np.float64)
        self.angles = np.ascontiguousarray(self.angles, dtype=np.float64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        m = self.centers.shape[0] if self.centers.ndim == 2 else -1
        if (
            self.centers.shape != (m, 3)
            or self.axes.shape != (m, 3)
            or self.angles.shape != (m, 3)
            or self.weights.shape != (m,)
        ):
            raise ValueError("parameter arrays must be (M,3)x3 plus (M,) weights")
        if not (
            np.all(np.isfinite(self.centers))
            and np.all(np.isfinite(self.axes))
            and np.all(np.isfinite(self.angles))
            and np.all(np.isfinite(self.weights))
        ):
            raise ValueError("model parameters must be finite")
        if m > 0 and not np.all(self.axes > 0.0):
            raise ValueError("axes must be strictly positive")
        self.norm_m = float(self.norm_m)
        self.norm_h = float(self.norm_h)
        if not self.norm_m < 0.0:
            raise ValueError("norm_m must be negative (an interior sample must exist)")
        href = math.log(2.0) / (self.norm_m * self.norm_m)
        if not math.isclose(self.norm_h, href, rel_tol=_NORM_H_RTOL, abs_tol=0.0):
            raise ValueError(f"norm_h {self.norm_h!r} inconsistent with norm_m {self.norm_m!r}")

    @property
    def basis_count(self) -> int:
        return self.centers.shape[0]

    @property
    def bases(self) -> list[ErbfBasis]:
        """Materializes the per-basis record view, in model order."""
        return [
            ErbfBasis(
                center=tuple(self.centers[j]),
                axes=tuple(self.axes[j]),
                angles=tuple(self.angles[j]),
                weight=float(self.weights[j]),
            )
            for j in range(self.basis_count)
        ]

    @classmethod
    def from_bases(cls, bases, norm_m: float, norm_h: float) -> "ErbfModel":
        bases = list(bases)
        return cls(
            centers=np.array([b.center for b in bases], dtype=np.float64).reshape(-1, 3),
            axes=np.array([b.axes for b in bases], dtype=np.float64).reshape(-1, 3),
            angles=np.array([b.angles for b in bases], dtype=np.float64).reshape(-1, 3),
            weights=np.array([b.weight for b in bases], dtype=np.float64),
            norm_m=norm_m,
            norm_h=norm_h,
        )

    def copy(self) -> "ErbfModel":
        return ErbfModel(
            centers=self.centers.copy(),
            axes=self.axes.copy(),
            angles=self.angles.copy(),
            weights=self.weights.copy(),
            norm_m=self.norm_m,
            norm_h=self.norm_h,
        )


@dataclass
class SampleSet:
    """Merged training points: octree grid points plus surface samples.

    Labels are normalized SDF values in (0, 2]; surface samples carry the
    label exactly 1 and the reserved layer tag ``SURFACE_LAYER``.
    """

    points: np.ndarray
    labels: np.ndarray
    layer: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        self.layer = np.ascontiguousarray(self.layer, dtype=np.int64)
        n = len(self.points)
        if self.points.shape != (n, 3) or self.labels.shape != (n,) or self.layer.shape != (n,):
            raise ValueError("points, labels, layer must have matching length")
        if n and (np.min(self.labels) <= 0.0 or np.max(self.labels) > 2.0):
            raise ValueError("labels must lie in (0, 2]")
        surf = self.layer == SURFACE_LAYER
        if np.any(self.labels[surf] != 1.0):
            raise ValueError("surface samples must carry label exactly 1")

    def __len__(self) -> int:
        return len(self.points)


def normalization_constants(norm_m: float) -> tuple[float, float]:
    """Returns (m, h) with h = ln(2)/m**2 for a given negative minimum."""
    norm_m = float(norm_m)
    if not norm_m < 0.0:
        raise ValueError("normalization needs a negative minimum signed distance")
    return norm_m, math.log(2.0) / (norm_m * norm_m)


def normalize_sdf(raw) -> tuple[np.ndarray, float, float]:
    """Maps raw signed distances onto (0, 2] labels.

    Args:
        raw: nonempty array of physical signed distances whose minimum is
            negative (at least one interior sample).

    Returns:
        (labels, norm_m, norm_h) with labels = 2*exp(-h*(s - m)^2),
        m = min(raw), h = ln(2)/m^2.  Interior values (s < 0) land in
        (1, 2], the surface maps to 1, exterior values into (0, 1).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("normalize_sdf needs at least one sample")
    if not np.all(np.isfinite(raw)):
        raise ValueError("signed distances must be finite")
    norm_m, norm_h = normalization_constants(np.min(raw))
    return normalize_with(raw, norm_m, norm_h), norm_m, norm_h


def normalize_with(raw, norm_m: float, norm_h: float) -> np.ndarray:
    """Applies the normalization map with fixed constants (m, h)."""
    raw = np.asarray(raw, dtype=np.float64)
    d = raw - norm_m
    return 2.0 * np.exp(-norm_h * d * d)


def denormalize_sdf(label, norm_m: float, norm_h: float):
    """Inverts the normalization on the branch s >= m.

    Args:
        label: value(s) in (0, 2].
        norm_m: negative minimum used by the forward map.
        norm_h: ln(2)/norm_m**2.

    Returns:
        m + sqrt(-ln(label/2)/h), scalar for scalar input.
    """
    arr = np.asarray(label, dtype=np.float64)
    if np.any(arr <= 0.0) or np.any(arr > 2.0):
        raise ValueError("labels must lie in (0, 2]")
    out = norm_m + np.sqrt(-np.log(arr / 2.0) / norm_h)
    if np.isscalar(label) or arr.ndim == 0:
        return float(out)
    return out


def axis_rotations(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-axis factors (Rx, Ry, Rz) for a batch of angle triples.

    The y factor carries -sin(theta_y) in the (0, 2) slot and +sin in
    (2, 0), the transpose of the textbook y rotation.  The convention is
    kept as is; the composed matrix is still orthogonal and the model
    class it parameterizes is unchanged.
    """
    a = np.asarray(angles, dtype=np.float64).reshape(-1, 3)
    m = a.shape[0]
    cx, sx = np.cos(a[:, 0]), np.sin(a[:, 0])
    cy, sy = np.cos(a[:, 1]), np.sin(a[:, 1])
    cz, sz = np.cos(a[:, 2]), np.sin(a[:, 2])
    rx = np.zeros((m, 3, 3))
    rx[:, 0, 0] = 1.0
    rx[:, 1, 1], rx[:, 1, 2] = cx, -sx
    rx[:, 2, 1], rx[:, 2, 2] = sx, cx
    ry = np.zeros((m, 3, 3))
    ry[:, 0, 0], ry[:, 0, 2] = cy, -sy
    ry[:, 1, 1] = 1.0
    ry[:, 2, 0], ry[:, 2, 2] = sy, cy
    rz = np.zeros((m, 3, 3))
    rz[:, 0, 0], rz[:, 0, 1] = cz, -sz
    rz[:, 1, 0], rz[:, 1, 1] = sz, cz
    rz[:, 2, 2] = 1.0
    return rx, ry, rz


def rotation_matrices(angles: np.ndarray) -> np.ndarray:
    """Composed rotations R = Rz @ Ry @ Rx for an (M, 3) angle array."""
    rx, ry, rz = axis_rotations(angles)
    return rz @ ry @ rx


def rotation_matrix(angles) -> np.ndarray:
    """Composed rotation for a single angle triple (theta_x, theta_y, theta_z)."""
    a = np.asarray(angles, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError("angles must be a 3-vector")
    if not np.all(np.isfinite(a)):
        raise ValueError("angles must be finite")
    return rotation_matrices(a[None, :])[0]


def erbf_eval(points, basis: ErbfBasis) -> np.ndarray | float:
    """Evaluates one kernel at a point or an (N, 3) block of points."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    r = rotation_matrix(basis.angles)
    u = (p - np.asarray(basis.center)) @ r.T
    q = (u * np.asarray(basis.axes)) ** 2
    out = np.exp(-q.sum(axis=1))
    return float(out[0]) if single else out


def model_eval(points, model: ErbfModel, screening=None) -> np.ndarray:
    """Network output psi at each point, accumulated in ascending basis index.

    Args:
        points: (N, 3) evaluation points.
        model: nonempty model.
        screening: optional ScreenIndex built on these same points; bases
            whose screening radius excludes a point then contribute exactly
            zero there.

    Returns:
        (N,) array of psi values.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if model.basis_count == 0:
        raise ValueError("model has no bases")
    if screening is not None and screening.point_count != len(p):
        raise ValueError("screening index was built for a different point set")
    rot = rotation_matrices(model.angles)
    sw = model.weights * np.abs(model.weights)
    out = np.zeros(len(p))
    # Per-basis accumulation keeps the reduction order fixed regardless of
    # how callers partition the points.
    for j in range(model.basis_count):
        if screening is None:
            u = (p - model.centers[j]) @ rot[j].T
            q = (u * model.axes[j]) ** 2
            out += sw[j] * np.exp(-q.sum(axis=1))
        else:
            idx = screening.neighbors[j]
            if len(idx) == 0:
                continue
            u = (p[idx] - model.centers[j]) @ rot[j].T
            q = (u * model.axes[j]) ** 2
            out[idx] += sw[j] * np.exp(-q.sum(axis=1))
    return out
