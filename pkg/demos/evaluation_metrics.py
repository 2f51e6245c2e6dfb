"""
Evaluation metrics on hand-made fields
======================================

Moran's I, ROC/AUC and calibration on inputs whose answers are known.
"""
import numpy as np
from scipy.ndimage import uniform_filter

from dcemu import metrics as mt

# Moran's I with rook neighbours: -1 for a checkerboard, near +1 for
# two flat halves, near 0 for white noise.
board = (np.indices((8, 8)).sum(0) % 2).astype(float)
halves = np.repeat([[0.0] * 4 + [1.0] * 4], 8, axis=0)
noise = np.random.default_rng(0).normal(size=(64, 64))
for name, field in (("checkerboard", board), ("halves", halves), ("noise", noise)):
    print(f"{name:12s} I = {mt.morans_i(field):+.4f}")

# Smoothing the noise raises I; this is the over-smoothing signal that
# separates an emulator from a noisy teacher.
print("smoothed     I =", f"{mt.morans_i(uniform_filter(noise, 3)):+.4f}")

# AUC of a noisy score against binary labels
rng = np.random.default_rng(1)
labels = rng.uniform(size=5000) < 0.6
score = labels + rng.normal(scale=0.8, size=5000)
sweep = mt.threshold_sweep(1 / (1 + np.exp(-score)), labels.astype(int))
print(f"AUC {sweep.auc:.4f}, best accuracy {sweep.best_accuracy:.4f} "
      f"at threshold {sweep.best_threshold:.3f}")

# Calibration: honest variances track the identity, overconfident ones
# (halved) cover too little.
n = 20_000
mean = rng.uniform(0.1, 0.3, size=(1, n, 1))
var = np.full_like(mean, 1e-4)
truth = mean + 0.01 * rng.standard_normal(mean.shape)
ones = np.ones((1, n))
for label, v in (("honest", var), ("halved", var / 2)):
    cc = mt.calibration_curve(mt.RasterPair(truth, ones, mean, v, ones), 0)
    print(f"{label:7s}", " ".join(f"{f:.2f}" for f in cc.frequency))
print("levels ", " ".join(f"{l:.2f}" for l in cc.levels))
