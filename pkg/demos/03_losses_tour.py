"""
A tour of the two training losses
=================================

The detector head is trained to be repeatable (cosine similarity of
warped heatmaps, plus a peakiness term that forbids the flat-heatmap
shortcut) and the descriptor head to be reliable (a differentiable
average-precision surrogate, gated per pixel by the reliability map).
This script evaluates both on hand-built inputs where the right answer
is obvious.
"""

import numpy as np

from relfeat.autograd import Tensor
from relfeat.losses import (
    LossConfig,
    ap_kappa_loss,
    cosim_loss,
    exact_ap,
    peakiness_loss,
    repeatability_loss,
    soft_ap,
)

rng = np.random.default_rng(0)

# ---------------------------------------------------------------
# repeatability: cosine of corresponding heatmap patches
# ---------------------------------------------------------------

# a peaked 16x16 heatmap with maxima every 4 pixels
yy, xx = np.mgrid[0:16, 0:16]
peaks = ((yy % 4 == 2) & (xx % 4 == 2)).astype(np.float32)
flat = np.full((16, 16), 0.5, dtype=np.float32)
noise = rng.random((16, 16)).astype(np.float32)
valid = np.ones((16, 16), dtype=bool)

print("cosim(peaks, peaks)  =", round(cosim_loss(peaks, peaks, valid, 4).item(), 4), " (identical maps)")
print("cosim(peaks, noise)  =", round(cosim_loss(peaks, noise, valid, 4).item(), 4), " (unrelated maps)")
print("cosim(flat, flat)    =", round(cosim_loss(flat, flat, valid, 4).item(), 4), " (flat is 'repeatable' too...)")

# ...which is why the peakiness term exists: flat maps pay full price
print("\npeakiness(peaks)     =", round(peakiness_loss(peaks, 4).item(), 4))
print("peakiness(flat)      =", round(peakiness_loss(flat, 4).item(), 4), " (max - mean = 0, loss stuck at 1)")

# the combined repeatability loss warps the second map with a flow
# field; with identity flow and identical maps only peakiness remains
U = np.stack([xx, yy], axis=-1).astype(np.float64)
cfg = LossConfig(patch_size=4, peaky_weight=0.5)
lr_same = repeatability_loss(peaks, peaks, U, valid, cfg)
lr_diff = repeatability_loss(peaks, noise, U, valid, cfg)
print("\nrepeatability_loss(peaks vs peaks) =", round(lr_same.item(), 4))
print("repeatability_loss(peaks vs noise) =", round(lr_diff.item(), 4))

# ---------------------------------------------------------------
# exact AP on ranked labels: the test oracle's reference
# ---------------------------------------------------------------

print("\nexact_ap([1,0,0,0]) =", exact_ap([1, 0, 0, 0]), " (positive ranked first)")
print("exact_ap([0,0,0,1]) =", exact_ap([0, 0, 0, 1]), " (positive ranked last)")
print("exact_ap([1,0,1,0]) =", exact_ap([1, 0, 1, 0]), " (= mean(1/1, 2/3))")

# ---------------------------------------------------------------
# soft AP: the differentiable surrogate the loss actually uses
# ---------------------------------------------------------------

def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)

# database of four unit descriptors, entry 0 is the true match
db = np.stack([unit([1, 0.05, 0]), unit([0, 1, 0]), unit([0, 0, 1]), unit([1, -1, 0])])
labels = np.array([1, 0, 0, 0])

good_query = unit([1, 0.04, 0])    # close to the positive
bad_query = unit([0.1, 0.9, 0.4])  # closer to a negative

ap_good = soft_ap(Tensor(good_query), Tensor(db), labels, Q=25)
ap_bad = soft_ap(Tensor(bad_query), Tensor(db), labels, Q=25)
print("\nsoft AP, query near its positive :", round(ap_good.item(), 4))
print("soft AP, query near a negative   :", round(ap_bad.item(), 4))

# gradients flow to the descriptors, which is the whole point; note the
# sharpness trade-off: large Q makes ranks nearly hard (saturated
# sigmoids, tiny gradients), small Q keeps the surrogate informative
for Q in (25, 2):
    q = Tensor(bad_query, requires_grad=True)
    loss = 1.0 - soft_ap(q, Tensor(db), labels, Q=Q)
    loss.backward()
    print(f"Q={Q:2d}: d(1-AP)/d(query) largest component = {np.abs(q.grad).max():.4f}")

# ---------------------------------------------------------------
# the reliability gate
# ---------------------------------------------------------------

# kappa is the rent for declaring a pixel unreliable: with R=0 the loss
# is 1-kappa no matter how bad the AP; with R=1 it is 1-AP exactly
kappa = 0.5
for ap in (0.9, 0.5, 0.1):
    full = ap_kappa_loss(Tensor(np.array(ap)), Tensor(np.array(1.0)), kappa).item()
    none = ap_kappa_loss(Tensor(np.array(ap)), Tensor(np.array(0.0)), kappa).item()
    print(f"AP={ap:.1f}:  loss at R=1 -> {full:.3f}   at R=0 -> {none:.3f}")
print("so pixels that cannot beat AP=kappa are better declared unreliable,")
print("and pixels that can are better kept: the map learns the split.")
