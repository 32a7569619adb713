"""
Watching the training schedule work
===================================

The fit is not a flat gradient descent: it climbs the octree from coarse
to fine layers, switches a sparsity term on once the accuracy loss
flattens, grows new kernels where the residual clusters, prunes kernels
whose weights collapse, and finishes with a pure-accuracy polish.  This
script runs the full default schedule on a sphere and replays the
recorded epochs as a timeline of those events.  Expect a few minutes of
wall time; the interesting part is the printout at the end.
"""

import os

import numpy as np

from serbf import TrainConfig, analytic_sdf, analytic_surface_samples, build_octree, fit

surface = analytic_surface_samples("sphere", 40000, seed=11, radius=0.4)
sdf = analytic_sdf("sphere", radius=0.4)
octree = build_octree(surface, max_depth=6)
for layer in octree.layers:
    layer.sdf = sdf(layer.points)

# The defaults: 2000 epochs, sparsity machinery allowed until epoch
# 1600, then a pure-accuracy polish under a cosine-annealed learning
# rate.  Only the thread count is ours.
config = TrainConfig(threads=min(8, os.cpu_count() or 1))

history = []
model = fit(octree, surface, config, progress_sink=history.append)

# Replay the recorded epochs: a heartbeat row every 100 epochs plus a
# row for each milestone (layer advance, first epoch where the sparsity
# term shares the gradient, the polish cutoff).  The kernel count shown
# is the number of weights clearing the pruning threshold, so it swells
# during addition bursts and breathes hard while the sparsity term
# squeezes weights through the threshold, before settling.
last_layer, seen_l1 = None, False
for rec in history:
    events = []
    if rec.layer != last_layer:
        events.append(f"training on layers 1..{rec.layer}")
        last_layer = rec.layer
    if not seen_l1 and rec.alpha < 1.0:
        events.append(f"sparsity term active (alpha {rec.alpha:.3f})")
        seen_l1 = True
    if rec.epoch == config.l1_cutoff_epoch:
        events.append("pure-accuracy polish begins")
    if events or rec.epoch % 100 == 0:
        print(f"epoch {rec.epoch:4d}  kernels {rec.basis_count:5d}  "
              f"l2 {rec.l2:9.3e}  " + "; ".join(events))

peak = max(rec.basis_count for rec in history)
final = history[-1]
print(f"\nfinal: {model.basis_count} kernels (peak {peak}), "
      f"loss {final.l2:.3e} after {len(history)} epochs")
