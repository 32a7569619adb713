"""Training loop: Adam updates, sparsity scheduling, and basis adaptation.

One optimization run proceeds in epochs over shuffled mini-batches.  Each
batch evaluates the network on its screened support, selects the active
points, and applies one Adam step on the combined gradient

    alpha * dL2/dtheta  (+ beta * sign(w) on the weight slots),

where (alpha, beta) comes from the dynamic trade-off only while the
sparsity term is enabled and the batch's worst active error is already
small; otherwise the step is pure accuracy, (1, 0).

The sparsity flag itself follows a state machine: it switches on when the
per-epoch L2 loss has stabilized, and basis addition fires once the
effective basis count has also been stable for a while, after which the
flag drops so the new kernels can train unregularized.  Weak kernels are
pruned on a fixed epoch cadence while the flag is up.  Grid layers are
appended coarse-to-fine inside a fixed epoch window, and after the cutoff
epoch the run finishes with pure L2 under a cosine-annealed learning rate.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from serbf.core import (
    ErbfModel,
    SampleSet,
    SURFACE_LAYER,
    normalization_constants,
    normalize_with,
    rotation_matrices,
)
from serbf.grad import (
    accumulate_pair_gradients,
    dynamic_weights,
    pair_phi,
    rotation_derivative_factors,
    select_active,
)
from serbf.initialization import axis_length_init, inscribed_sphere_init
from serbf.spatial import GridSamples, OctreeGrid, support_pairs

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingAbort(RuntimeError):
    """Raised when optimization hits a non-recoverable state."""


@dataclass
class TrainConfig:
    """Every threshold and schedule constant of the training loop."""

    batch_size: int = 10000
    max_epochs: int = 2000
    l1_cutoff_epoch: int = 1600
    lr: float = 0.01
    lr_final: float = 1e-3
    lr_final_min: float = 1e-5
    l_max: int = 10
    l_s: int | None = None  # None selects the third-to-last layer rule
    tau1: float = 0.9
    tau2: float = 1.1
    tau_m: float = 0.02
    tau_d: float = 0.01
    tau_l1: float = 5.0
    tau_l2: float = 0.5
    k_l1: int = 50
    k_l2: int = 10
    gamma: float = 1e-3
    epsilon: float = 1e-7
    layer_advance_window: tuple[int, int] = (400, 800)
    layer_advance_every: int = 100
    inscribed_radius_convention: str = "as_printed"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # A zero-epoch run is allowed (it returns the initialization), so
        # the cutoff ordering only binds when training actually happens.
        if self.max_epochs > 0 and not self.l1_cutoff_epoch < self.max_epochs:
            raise ValueError("need l1_cutoff_epoch < max_epochs")
        if not (self.tau1 < 1.0 < self.tau2):
            raise ValueError("need tau1 < 1 < tau2")
        for name in ("lr", "lr_final", "lr_final_min", "tau_m", "tau_d", "tau_l1", "tau_l2", "gamma", "epsilon"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.k_l1 < 1 or self.k_l2 < 1:
            raise ValueError("history windows must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class AdamState:
    """First/second moments per parameter group plus the shared step count."""

    step: int
    moments: dict[str, tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros(cls, shapes: dict[str, tuple]) -> "AdamState":
        return cls(
            step=0,
            moments={k: (np.zeros(s), np.zeros(s)) for k, s in shapes.items()},
        )


def adam_step(params, grads, moments, lr: float, step: int):
    """One bias-corrected Adam update for a single parameter group.

    Args:
        params: current values.
        grads: gradient of the loss at params.
        moments: (m, v) running first/second moments.
        lr: learning rate for this step.
        step: 1-based update count used for bias correction.

    Returns:
        (new_params, (new_m, new_v)).
    """
    g = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise TrainingAbort("non-finite gradient")
    m, v = moments
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
    mhat = m / (1.0 - ADAM_BETA1**step)
    vhat = v / (1.0 - ADAM_BETA2**step)
    return params - lr * mhat / (np.sqrt(vhat) + ADAM_EPS), (m, v)


@dataclass
class OptimState:
    """Mutable training status threaded through the epoch loop."""

    epoch: int = 1
    l1_active: bool = False
    add_point_pending: bool = False
    current_layer: int = 1
    max_layer: int = 1
    norm_m: float = -1.0
    norm_h: float = math.log(2.0)
    adam: AdamState | None = None
    loss_history: deque = field(default_factory=deque)
    count_history: deque = field(default_factory=deque)


@dataclass(frozen=True)
class EpochRecord:
    """Per-epoch progress row emitted to the progress sink."""

    epoch: int
    l2: float
    l1: float
    alpha: float
    basis_count: int
    active_size: int
    layer: int


def l1_activation_check(loss_history, max_active_error: float, config: TrainConfig) -> bool:
    """True when the L2 trace has stabilized and the worst error is small.

    Both parts must hold: std of the last k_l2 per-epoch L2 values below
    tau_l2, and the maximum absolute active-set error below tau_m.  A
    history shorter than k_l2 is not yet judgeable and returns False.
    """
    return _l2_stable(loss_history, config) and float(max_active_error) < config.tau_m


def _l2_stable(loss_history, config: TrainConfig) -> bool:
    hist = list(loss_history)
    if len(hist) < config.k_l2:
        return False
    return float(np.std(np.asarray(hist[-config.k_l2 :], dtype=np.float64))) < config.tau_l2


def basis_stability_check(count_history, config: TrainConfig) -> bool:
    """True when the effective basis count moved less than tau_l1 over the
    last k_l1 epochs; shorter histories return False."""
    hist = list(count_history)
    if len(hist) < config.k_l1:
        return False
    window = np.asarray(hist[-config.k_l1 :], dtype=np.float64)
    return float(window.max() - window.min()) < config.tau_l1


def prune_basis(model: ErbfModel, tau_d: float) -> ErbfModel:
    """Removes every basis with |w| < tau_d, keeping survivor order."""
    keep = np.abs(model.weights) >= tau_d
    if not np.any(keep):
        raise TrainingAbort(
            f"pruning at tau_d={tau_d} would remove all {model.basis_count} bases"
        )
    if np.all(keep):
        return model
    return ErbfModel(
        centers=model.centers[keep],
        axes=model.axes[keep],
        angles=model.angles[keep],
        weights=model.weights[keep],
        norm_m=model.norm_m,
        norm_h=model.norm_h,
    )


def add_basis(
    error_vec,
    active_points,
    config: TrainConfig,
    surface_points,
    neighborhood_radius: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """New kernels at local maxima of the active-set error field.

    Candidates are active points with |E| > tau_m / 2; a candidate
    survives when its |E| is >= every neighbor's within the given radius.
    Each survivor seeds an isotropic kernel that cancels its residual:
    weight -sign(E)|E|, axes sqrt(-ln(epsilon/|E|)) / dbar with dbar the
    distance to the nearest surface sample, zero angles.

    Returns:
        (centers, axes, angles, weights), possibly all empty.
    """
    e = np.asarray(error_vec, dtype=np.float64).reshape(-1)
    pts = np.asarray(active_points, dtype=np.float64).reshape(-1, 3)
    if len(e) != len(pts):
        raise ValueError("error vector must align with active points")
    empty = (
        np.empty((0, 3)),
        np.empty((0, 3)),
        np.empty((0, 3)),
        np.empty(0),
    )
    ae = np.abs(e)
    cand = np.flatnonzero(ae > config.tau_m / 2.0)
    if len(cand) == 0:
        return empty
    tree = cKDTree(pts)
    lists = tree.query_ball_point(
        pts[cand], float(neighborhood_radius), return_sorted=True, workers=config.threads
    )
    survive = np.fromiter(
        (ae[i] >= ae[np.asarray(nb, dtype=np.int64)].max() for i, nb in zip(cand, lists)),
        dtype=bool,
        count=len(cand),
    )
    ext = cand[survive]
    if len(ext) == 0:
        return empty
    centers = pts[ext]
    weights = -e[ext]  # equals -sign(E)|E|
    surf = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    stree = cKDTree(surf)
    dbar = stree.query(centers)[0]
    if np.any(dbar <= 0.0):
        # A surface sample can itself be an extreme error point; use the
        # nearest strictly positive distance, else the neighborhood radius.
        k = min(len(surf), 8)
        dists = stree.query(centers, k=k)[0].reshape(len(centers), -1)
        for row in np.flatnonzero(dbar <= 0.0):
            positive = dists[row][dists[row] > 0.0]
            dbar[row] = positive[0] if len(positive) else float(neighborhood_radius)
    iso = np.sqrt(-np.log(config.epsilon / ae[ext])) / dbar
    axes = np.repeat(iso[:, None], 3, axis=1)
    angles = np.zeros((len(ext), 3))
    return centers, axes, angles, weights


def advance_layer(state: OptimState, octree: OctreeGrid, samples: SampleSet) -> SampleSet:
    """Appends the next grid layer's points and labels to the training set.

    No-op (with the flag cleared) when every available layer is already
    in use.  Labels are produced with the run's fixed normalization
    constants so late layers are consistent with early ones.
    """
    if not state.add_point_pending:
        raise ValueError("no layer advance is pending")
    state.add_point_pending = False
    if state.current_layer >= state.max_layer:
        return samples
    nxt = state.current_layer + 1
    layer = next(lay for lay in octree.layers if lay.index == nxt)
    if layer.sdf is None:
        raise ValueError(f"layer {nxt} has no SDF values")
    labels = normalize_with(layer.sdf, state.norm_m, state.norm_h)
    state.current_layer = nxt
    return SampleSet(
        points=np.vstack([samples.points, layer.points]),
        labels=np.concatenate([samples.labels, labels]),
        layer=np.concatenate(
            [samples.layer, np.full(len(layer.points), nxt, dtype=np.int64)]
        ),
    )


def default_start_layer(octree: OctreeGrid) -> int:
    """Third-to-last layer, pushed deeper until it has over 100 interior
    points (or the deepest layer is reached)."""
    for lay in octree.layers:
        if lay.sdf is None:
            raise ValueError(f"layer {lay.index} has no SDF values")
    l_s = max(1, octree.max_depth - 2)
    by_index = {lay.index: lay for lay in octree.layers}
    while l_s < octree.max_depth:
        interior = int(np.sum(by_index[l_s].sdf < 0.0))
        if interior > 100:
            break
        l_s += 1
    return l_s


def _initial_samples(octree: OctreeGrid, surface_points: np.ndarray, l_s: int, norm_m, norm_h) -> SampleSet:
    pts, labels, layer = [], [], []
    for lay in octree.layers:
        if lay.index > l_s:
            continue
        pts.append(lay.points)
        labels.append(normalize_with(lay.sdf, norm_m, norm_h))
        layer.append(np.full(len(lay.points), lay.index, dtype=np.int64))
    pts.append(surface_points)
    labels.append(np.ones(len(surface_points)))
    layer.append(np.full(len(surface_points), SURFACE_LAYER, dtype=np.int64))
    return SampleSet(
        points=np.vstack(pts),
        labels=np.concatenate(labels),
        layer=np.concatenate(layer),
    )


def _final_lr(config: TrainConfig, epoch: int) -> float:
    span = config.max_epochs - config.l1_cutoff_epoch
    frac = (epoch - config.l1_cutoff_epoch) / span
    lo, hi = config.lr_final_min, config.lr_final
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * frac))


def fit(
    octree: OctreeGrid,
    surface_points,
    config: TrainConfig,
    progress_sink=None,
) -> ErbfModel:
    """Runs the full optimization and returns the fitted model.

    Args:
        octree: layered grid with SDF values filled on every layer.
        surface_points: (P, 3) surface samples (label exactly 1).
        config: all thresholds and schedule constants.
        progress_sink: optional callable receiving an EpochRecord per
            epoch.

    Returns:
        The trained model; with max_epochs = 0 the initialization is
        returned unchanged.

    Raises:
        TrainingAbort: on non-finite losses or model collapse, with the
            failing epoch in the message.
    """
    surface_points = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    if len(surface_points) == 0:
        raise ValueError("no surface points")
    all_sdf = np.concatenate([lay.sdf for lay in octree.layers if lay.sdf is not None])
    if len(all_sdf) == 0 or any(lay.sdf is None for lay in octree.layers):
        raise ValueError("octree SDF values are not populated")
    norm_m, norm_h = normalization_constants(np.min(all_sdf))

    max_layer = min(config.l_max, octree.max_depth)
    l_s = config.l_s if config.l_s is not None else default_start_layer(octree)
    l_s = min(l_s, max_layer)
    samples = _initial_samples(octree, surface_points, l_s, norm_m, norm_h)

    grid_rows = samples.layer != SURFACE_LAYER
    interior = grid_rows & (samples.labels > 1.0) & (samples.labels < 2.0)
    centers0, weights0 = inscribed_sphere_init(
        samples.points[interior],
        samples.labels[interior],
        surface_points,
        convention=config.inscribed_radius_convention,
    )
    axes0 = axis_length_init(centers0, weights0, config.gamma, surface_points)

    centers = centers0.copy()
    axes = axes0.copy()
    angles = np.zeros_like(centers)
    weights = weights0.copy()

    def shapes():
        m = len(weights)
        return {"centers": (m, 3), "axes": (m, 3), "angles": (m, 3), "weights": (m,)}

    state = OptimState(
        epoch=1,
        current_layer=l_s,
        max_layer=max_layer,
        norm_m=norm_m,
        norm_h=norm_h,
        adam=AdamState.zeros(shapes()),
        loss_history=deque(maxlen=config.k_l2),
        count_history=deque(maxlen=config.k_l1),
    )
    rng = np.random.Generator(np.random.PCG64(config.seed))

    pairs_dirty = True
    tree = None
    pair_pt = pair_basis = None
    pos = None

    def rebuild_pairs():
        nonlocal tree, pair_pt, pair_basis, pos, pairs_dirty
        tree = cKDTree(samples.points)
        pair_pt, pair_basis = support_pairs(
            tree, centers, axes, config.epsilon, workers=config.threads
        )
        pos = np.full(len(samples), -1, dtype=np.int64)
        pairs_dirty = False

    def finish() -> ErbfModel:
        final_axes = np.abs(axes)
        # The kernel only sees axes squared, so the sign fold changes
        # nothing; an exact zero is nudged to stay inside the model class.
        final_axes[final_axes == 0.0] = np.finfo(np.float64).tiny
        return ErbfModel(
            centers=centers.copy(),
            axes=final_axes,
            angles=angles.copy(),
            weights=weights.copy(),
            norm_m=norm_m,
            norm_h=norm_h,
        )

    window_lo, window_hi = config.layer_advance_window
    final_phase = False

    while state.epoch < config.max_epochs:
        state.epoch += 1
        e_p = state.epoch

        if state.add_point_pending:
            new_samples = advance_layer(state, octree, samples)
            if new_samples is not samples:
                samples = new_samples
                pairs_dirty = True
        if pairs_dirty:
            rebuild_pairs()

        n = len(samples)
        perm = rng.permutation(n)
        lr_now = _final_lr(config, e_p) if final_phase else config.lr
        epoch_l2 = 0.0
        epoch_l1 = float(np.sum(np.abs(weights)))
        epoch_alpha = 1.0
        epoch_active = 0

        for start in range(0, n, config.batch_size):
            bidx = perm[start : start + config.batch_size]
            b = len(bidx)
            pos[bidx] = np.arange(b)
            sel = pos[pair_pt] >= 0
            bp_pt = pos[pair_pt[sel]]
            bp_basis = pair_basis[sel]
            pos[bidx] = -1

            rot = rotation_matrices(angles)
            derivs = rotation_derivative_factors(angles)
            bpts = samples.points[bidx]
            blab = samples.labels[bidx]
            delta, u, phi = pair_phi(bpts, bp_pt, bp_basis, centers, axes, rot)
            sw = weights * np.abs(weights)
            psi = np.bincount(bp_pt, weights=sw[bp_basis] * phi, minlength=b)

            active = select_active(blab, psi, config.tau1, config.tau2)
            e_full = np.zeros(b)
            e_full[active] = psi[active] - blab[active]
            l2 = float(e_full @ e_full)
            if not math.isfinite(l2):
                raise TrainingAbort(
                    f"non-finite L2 at epoch {e_p} (bases={len(weights)}, "
                    f"layer={state.current_layer}, active={len(active)})"
                )
            epoch_l2 += l2
            epoch_active += len(active)
            max_err = float(np.max(np.abs(e_full[active]))) if len(active) else 0.0

            bundle = accumulate_pair_gradients(
                bp_pt, bp_basis, delta, u, phi, e_full,
                axes, weights, rot, derivs, len(weights),
            )
            if state.l1_active and max_err < config.tau_m:
                lw = dynamic_weights(bundle.d_weight, bundle.d_weight_l1)
            else:
                lw = None
            alpha = lw.alpha if lw is not None else 1.0
            beta = lw.beta if lw is not None else 0.0
            epoch_alpha = alpha

            gw = alpha * bundle.d_weight + beta * bundle.d_weight_l1
            state.adam.step += 1
            step = state.adam.step
            mom = state.adam.moments
            centers, mom["centers"] = adam_step(
                centers, alpha * bundle.d_center, mom["centers"], lr_now, step
            )
            axes, mom["axes"] = adam_step(
                axes, alpha * bundle.d_axes, mom["axes"], lr_now, step
            )
            angles, mom["angles"] = adam_step(
                angles, alpha * bundle.d_angles, mom["angles"], lr_now, step
            )
            weights, mom["weights"] = adam_step(
                weights, gw, mom["weights"], lr_now, step
            )

        l1_just_activated = False
        if not final_phase:
            # Prune on the fixed cadence while sparsity pressure is up.
            if e_p % config.k_l2 == 0 and state.l1_active and e_p < config.l1_cutoff_epoch:
                keep = np.abs(weights) >= config.tau_d
                if not np.any(keep):
                    raise TrainingAbort(
                        f"pruning removed every basis at epoch {e_p}"
                    )
                if not np.all(keep):
                    centers, axes, angles, weights = (
                        centers[keep], axes[keep], angles[keep], weights[keep]
                    )
                    mom = state.adam.moments
                    for key in mom:
                        mom[key] = (mom[key][0][keep], mom[key][1][keep])
                    pairs_dirty = True

            state.loss_history.append(epoch_l2)
            if not state.l1_active and _l2_stable(state.loss_history, config):
                state.l1_active = True
                l1_just_activated = True

            b_f = int(np.sum(np.abs(weights) >= config.tau_d))
            state.count_history.append(b_f)

            if state.l1_active and basis_stability_check(state.count_history, config):
                if pairs_dirty:
                    rebuild_pairs()
                new = _addition_pass(
                    samples, centers, axes, angles, weights,
                    pair_pt, pair_basis, config, surface_points,
                    octree.spacing(state.current_layer), state,
                )
                if new is not None:
                    centers, axes, angles, weights = new
                    pairs_dirty = True
                state.l1_active = False

            in_window = window_lo <= e_p <= window_hi
            if in_window and state.current_layer < state.max_layer:
                if l1_just_activated or e_p % config.layer_advance_every == 0:
                    state.add_point_pending = True

            if e_p == config.l1_cutoff_epoch:
                final_phase = True
                state.l1_active = False
                state.add_point_pending = False

        if progress_sink is not None:
            progress_sink(
                EpochRecord(
                    epoch=e_p,
                    l2=epoch_l2,
                    l1=epoch_l1,
                    alpha=epoch_alpha,
                    basis_count=int(np.sum(np.abs(weights) >= config.tau_d)),
                    active_size=epoch_active,
                    layer=state.current_layer,
                )
            )

    return finish()


def _addition_pass(
    samples, centers, axes, angles, weights,
    pair_pt, pair_basis, config, surface_points, spacing, state,
):
    """Full-training-set error pass feeding add_basis; returns extended
    parameter arrays (and zero-extends Adam moments) or None."""
    rot = rotation_matrices(angles)
    _, _, phi = pair_phi(samples.points, pair_pt, pair_basis, centers, axes, rot)
    sw = weights * np.abs(weights)
    psi = np.bincount(pair_pt, weights=sw[pair_basis] * phi, minlength=len(samples))
    active = select_active(samples.labels, psi, config.tau1, config.tau2)
    if len(active) == 0:
        return None
    err = psi[active] - samples.labels[active]
    c_a, d_a, a_a, w_a = add_basis(
        err, samples.points[active], config, surface_points,
        neighborhood_radius=2.0 * spacing,
    )
    if len(w_a) == 0:
        return None
    mom = state.adam.moments
    grow3 = lambda arr, k: np.vstack([arr, np.zeros((k, 3))])
    k = len(w_a)
    for key in ("centers", "axes", "angles"):
        mom[key] = (grow3(mom[key][0], k), grow3(mom[key][1], k))
    mom["weights"] = (
        np.concatenate([mom["weights"][0], np.zeros(k)]),
        np.concatenate([mom["weights"][1], np.zeros(k)]),
    )
    return (
        np.vstack([centers, c_a]),
        np.vstack([axes, d_a]),
        np.vstack([angles, a_a]),
        np.concatenate([weights, w_a]),
    )
