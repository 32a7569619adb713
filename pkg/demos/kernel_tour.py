"""
Anatomy of one ellipsoidal kernel
=================================

A model is a sum of terms w|w| exp(-||D R (x - c)||^2): a Gaussian bump
squeezed per axis by D = diag(d1, d2, d3), turned by the rotation R, and
scaled by the signed weight.  This script pokes at a single kernel to
show what each of its ten scalars does.
"""

import numpy as np

from serbf import (
    ErbfBasis,
    ErbfModel,
    denormalize_sdf,
    model_eval,
    normalize_sdf,
    screening_radius,
)

# One kernel at the origin, rotated 45 degrees about world z.  The axis
# scales are inverse lengths: d1 = 2 squeezes the local x direction hard,
# d2 = d3 = 0.5 leave local y and z wide.
model = ErbfModel(
    centers=np.array([[0.0, 0.0, 0.0]]),
    axes=np.array([[2.0, 0.5, 0.5]]),
    angles=np.array([[0.0, 0.0, np.pi / 4]]),
    weights=np.array([1.2]),
    norm_m=-0.25,
    norm_h=np.log(2.0) / 0.25**2,
)

# Walk away from the center along three directions.  The 45-degree turn
# maps the (1,-1) diagonal onto the squeezed local x axis and the (1,1)
# diagonal onto the wide local y axis, with world x in between.
steps = np.linspace(0.0, 2.0, 9)
for name, direction in [
    ("diag (1,-1)", [2**-0.5, -(2**-0.5), 0]),
    ("world x", [1, 0, 0]),
    ("diag (1,1)", [2**-0.5, 2**-0.5, 0]),
]:
    pts = steps[:, None] * np.asarray(direction)[None, :]
    vals = model_eval(pts, model)
    print(f"{name:12s}: " + " ".join(f"{v:.3f}" for v in vals))

# Screening: beyond this radius the kernel is below epsilon = 1e-7 and
# the evaluator is allowed to treat it as exactly zero.  The radius is
# set by the widest direction (the smallest axis scale).
basis = ErbfBasis(
    center=(0.0, 0.0, 0.0),
    axes=(2.0, 0.5, 0.5),
    angles=(0.0, 0.0, np.pi / 4),
    weight=1.2,
)
r = screening_radius(basis, 1e-7)
along_z = np.array([r * 0.999, r * 1.001])
inside, outside = np.exp(-((0.5 * along_z) ** 2))
print(f"\nscreening radius for axes {basis.axes}: {r:.4f}")
print(f"kernel just inside: {inside:.2e}   just outside: {outside:.2e}")

# Labels: training never sees raw signed distances.  They pass through
# 2 exp(-h (S - m)^2), which maps the most negative distance m to 2, the
# surface to exactly 1, and far exteriors toward 0.  The map is invertible
# on (0, 2], which is how predictions turn back into distances.
raw = np.array([-0.25, -0.1, 0.0, 0.1, 0.5])
labels, m, h = normalize_sdf(raw)
back = denormalize_sdf(labels, m, h)
print("\nraw distances:", raw)
print("labels:       ", np.round(labels, 6))
print("recovered:    ", np.round(back, 15))
