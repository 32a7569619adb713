"""Filtered losses, active-point selection, and analytic gradients.

All gradients are derived from the signed-magnitude output form

    psi(x) = sum_j w_j |w_j| exp(-sum_k (d_jk u_jk)^2),   u_j = R_j (x - c_j)

by the chain rule, with the residual E_i = psi_i - t_i taken over active
points only.  Writing s = (d^2 * u) elementwise and g = 4 E phi:

    dL2/dw_j      =  sum_i g |w_j|
    dL2/dd_jk     = -sum_i g w|w| d_jk u_k^2
    dL2/dc_j      =  sum_i g w|w| R^T s
    dL2/dtheta_a  = -sum_i g w|w| s . (B_a (x - c)),

where B_x = Rz Ry Rx', B_y = Rz Ry' Rx, B_z = Rz' Ry Rx are the composed
rotations with one factor differentiated.  Central finite differences of
the filtered L2 loss are the ground truth these formulas are tested
against.  The L1 term contributes sign(w) to the weight slot only, with
the subgradient at w = 0 taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from serbf.core import ErbfModel, axis_rotations, model_eval, rotation_matrices

_ALPHA_DEGENERATE = 1e-18


@dataclass(frozen=True)
class LossWeights:
    """Convex pair (alpha, beta): alpha scales L2, beta scales L1."""

    alpha: float
    beta: float


@dataclass
class GradientBundle:
    """Per-parameter-group gradients, shapes tied to the basis count M."""

    d_center: np.ndarray
    d_axes: np.ndarray
    d_angles: np.ndarray
    d_weight: np.ndarray
    d_weight_l1: np.ndarray


def select_active(labels, preds, tau1: float, tau2: float) -> np.ndarray:
    """Indices taking part in the loss: the near-surface band plus
    side-violating points.

    id0 holds labels strictly inside (tau1, tau2); id1 exterior labels
    whose prediction strays above tau1; id2 interior labels predicted
    below tau2.  Points that are far from the surface and predicted on
    the correct side drop out entirely.
    """
    t = np.asarray(labels, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError("labels and preds must have the same length")
    if not (tau1 < 1.0 < tau2):
        raise ValueError("need tau1 < 1 < tau2")
    id0 = (t > tau1) & (t < tau2)
    id1 = (t <= tau1) & (p > tau1)
    id2 = (t >= tau2) & (p < tau2)
    return np.flatnonzero(id0 | id1 | id2)


def loss_l2(preds, labels, active) -> float:
    """Sum of squared residuals over the active indices."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    idx = np.asarray(active, dtype=np.int64)
    if len(idx) == 0:
        return 0.0
    e = p[idx] - t[idx]
    return float(e @ e)


def loss_l1(weights) -> float:
    """L1 norm of the output weights."""
    return float(np.sum(np.abs(np.asarray(weights, dtype=np.float64))))


def residuals(preds, labels, active) -> np.ndarray:
    """E_i = psi_i - t_i for the active indices, in active order."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    idx = np.asarray(active, dtype=np.int64)
    return p[idx] - t[idx]


def rotation_derivative_factors(angles) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Composed rotation stacks with one axis factor differentiated.

    Returns (B_x, B_y, B_z), each (M, 3, 3), for an (M, 3) angle array.
    """
    a = np.asarray(angles, dtype=np.float64).reshape(-1, 3)
    m = a.shape[0]
    rx, ry, rz = axis_rotations(a)
    cx, sx = np.cos(a[:, 0]), np.sin(a[:, 0])
    cy, sy = np.cos(a[:, 1]), np.sin(a[:, 1])
    cz, sz = np.cos(a[:, 2]), np.sin(a[:, 2])
    dx = np.zeros((m, 3, 3))
    dx[:, 1, 1], dx[:, 1, 2] = -sx, -cx
    dx[:, 2, 1], dx[:, 2, 2] = cx, -sx
    dy = np.zeros((m, 3, 3))
    dy[:, 0, 0], dy[:, 0, 2] = -sy, -cy
    dy[:, 2, 0], dy[:, 2, 2] = cy, -sy
    dz = np.zeros((m, 3, 3))
    dz[:, 0, 0], dz[:, 0, 1] = -sz, -cz
    dz[:, 1, 0], dz[:, 1, 1] = cz, -sz
    return rz @ ry @ dx, rz @ dy @ rx, dz @ ry @ rx


def pair_phi(points, pair_pt, pair_basis, centers, axes, rot):
    """Kernel values along a (point, basis) pair list.

    Returns (delta, u, phi) so gradient accumulation can reuse the
    forward products.
    """
    delta = points[pair_pt] - centers[pair_basis]
    u = np.einsum("pij,pj->pi", rot[pair_basis], delta)
    q = (u * axes[pair_basis]) ** 2
    phi = np.exp(-q.sum(axis=1))
    return delta, u, phi


def accumulate_pair_gradients(
    pair_pt,
    pair_basis,
    delta,
    u,
    phi,
    e_full,
    axes,
    weights,
    rot,
    rot_derivs,
    basis_count: int,
) -> GradientBundle:
    """Per-basis L2 gradient sums over a pair list.

    ``e_full`` is the per-point residual with zeros at inactive points,
    which makes excluded and side-correct points contribute exactly
    nothing.  Accumulation uses bincount per basis index, a fixed
    sequential order, so results are reproducible for a given pair list.
    """
    m = basis_count
    if len(pair_pt) == 0:
        z3 = np.zeros((m, 3))
        return GradientBundle(
            d_center=z3,
            d_axes=z3.copy(),
            d_angles=z3.copy(),
            d_weight=np.zeros(m),
            d_weight_l1=np.sign(weights),
        )
    d = axes[pair_basis]
    w = weights[pair_basis]
    sw = w * np.abs(w)
    g = 4.0 * e_full[pair_pt] * phi
    gsw = g * sw
    s = d * d * u

    d_weight = np.bincount(pair_basis, weights=g * np.abs(w), minlength=m)
    d_axes = np.empty((m, 3))
    d_center = np.empty((m, 3))
    d_angles = np.empty((m, 3))
    rts = np.einsum("pik,pi->pk", rot[pair_basis], s)
    ax_terms = -gsw[:, None] * (d * u * u)
    ce_terms = gsw[:, None] * rts
    for k in range(3):
        d_axes[:, k] = np.bincount(pair_basis, weights=ax_terms[:, k], minlength=m)
        d_center[:, k] = np.bincount(pair_basis, weights=ce_terms[:, k], minlength=m)
    for a, deriv in enumerate(rot_derivs):
        bd = np.einsum("pij,pj->pi", deriv[pair_basis], delta)
        terms = -gsw * np.einsum("pi,pi->p", s, bd)
        d_angles[:, a] = np.bincount(pair_basis, weights=terms, minlength=m)
    return GradientBundle(
        d_center=d_center,
        d_axes=d_axes,
        d_angles=d_angles,
        d_weight=d_weight,
        d_weight_l1=np.sign(weights),
    )


def grad_all(points, labels, model: ErbfModel, active, screening=None) -> GradientBundle:
    """Analytic gradients of the filtered L2 loss, plus the L1 weight term.

    Args:
        points: (N, 3) batch points.
        labels: (N,) batch labels.
        model: nonempty model.
        active: indices from select_active over this batch.
        screening: optional ScreenIndex on these points; excluded
            (point, basis) pairs contribute exactly zero.

    Returns:
        GradientBundle with d_center/d_axes/d_angles (M, 3), d_weight (M,)
        for L2, and d_weight_l1 = sign(w).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(labels, dtype=np.float64)
    idx = np.asarray(active, dtype=np.int64)
    m = model.basis_count
    if m == 0:
        raise ValueError("model has no bases")
    if len(idx) == 0:
        raise ValueError("active set is empty")
    rot = rotation_matrices(model.angles)
    derivs = rotation_derivative_factors(model.angles)
    preds = model_eval(pts, model, screening)
    e_full = np.zeros(len(pts))
    e_full[idx] = preds[idx] - t[idx]
    if screening is None:
        pair_pt = np.tile(idx, m)
        pair_basis = np.repeat(np.arange(m, dtype=np.int64), len(idx))
    else:
        pt_lists = []
        counts = np.empty(m, dtype=np.int64)
        for j in range(m):
            sub = np.intersect1d(idx, screening.neighbors[j], assume_unique=True)
            pt_lists.append(sub)
            counts[j] = len(sub)
        pair_pt = (
            np.concatenate(pt_lists) if counts.sum() else np.empty(0, dtype=np.int64)
        )
        pair_basis = np.repeat(np.arange(m, dtype=np.int64), counts)
    delta, u, phi = pair_phi(pts, pair_pt, pair_basis, model.centers, model.axes, rot)
    return accumulate_pair_gradients(
        pair_pt,
        pair_basis,
        delta,
        u,
        phi,
        e_full,
        model.axes,
        model.weights,
        rot,
        derivs,
        m,
    )


def dynamic_weights(gw_l2, gw_l1) -> LossWeights:
    """Accuracy/sparsity trade-off from the two weight-gradient directions.

    alpha is the minimum-norm-combination coefficient on the L2 gradient,
    clipped to [0, 1]; beta = 1 - alpha.  A degenerate denominator (the
    two gradients coincide) falls back to pure accuracy (1, 0).
    """
    g2 = np.asarray(gw_l2, dtype=np.float64).ravel()
    g1 = np.asarray(gw_l1, dtype=np.float64).ravel()
    if g1.shape != g2.shape:
        raise ValueError("gradient vectors must have equal length")
    diff = g1 - g2
    den = float(diff @ diff)
    if den < _ALPHA_DEGENERATE:
        return LossWeights(alpha=1.0, beta=0.0)
    alpha = float(np.clip(float(diff @ g1) / den, 0.0, 1.0))
    return LossWeights(alpha=alpha, beta=1.0 - alpha)
