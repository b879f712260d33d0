"""
Synthetic scenes and homography pairs
=====================================

Walk through the data side of the pipeline: procedural scenes, random
homographies, warped views, and the dense correspondence field that
self-supervised training consumes.  Writes a handful of PPM images to
demo_out/ so you can look at what the trainer sees.
"""

import os

import numpy as np

from relfeat.fileio import write_ppm
from relfeat.synth import (
    HomographyRanges,
    SceneSpec,
    apply_homography,
    build_correspondences,
    make_scene,
    make_training_pair,
    sample_homography,
    warp_image,
)

out_dir = os.path.join(os.path.dirname(__file__), "demo_out")
os.makedirs(out_dir, exist_ok=True)

# ---------------------------------------------------------------
# four scene kinds, one sample each
# ---------------------------------------------------------------

for kind in ("checkerboard_triangle", "random_polygons", "texture_noise", "gradient_sky"):
    scene = make_scene(SceneSpec(kind=kind, size=192, seed=7))
    path = os.path.join(out_dir, f"scene_{kind}.ppm")
    write_ppm(path, scene.image)
    print(f"{kind:24s} -> {path}  annotations: {sorted(scene.annotations)}")

# the checkerboard scene annotates its geometry; the acceptance tests
# lean on these to find corners and flat background without guessing
scene = make_scene(SceneSpec(kind="checkerboard_triangle", size=192, seed=7))
print("\ncheckerboard cell size:", scene.annotations["checker_cell"])
print("board bounding box   :", scene.annotations["checker_bbox"])
print("triangle vertices    :\n", np.asarray(scene.annotations["triangle_vertices"]))

# ---------------------------------------------------------------
# a random homography and its warp
# ---------------------------------------------------------------

H = sample_homography(seed=3, ranges=HomographyRanges(), size=(192, 192))
print("\nsampled homography (h22 normalized to 1):\n", np.round(H, 4))

warped, coverage = warp_image(scene.image, H)
write_ppm(os.path.join(out_dir, "scene_warped.ppm"), warped)
print("warp coverage fraction:", round(float(coverage.mean()), 3))

# the correspondence field maps image-1 pixels to image-2 positions;
# valid marks pixels whose target lands inside image 2
field = build_correspondences(H, scene.image.shape[:2], warped.shape[:2])
print("correspondence field U shape:", field.U.shape, " valid:", round(float(field.valid.mean()), 3))

# spot check: the field must agree with applying H directly
pts = np.array([[40.0, 50.0], [100.0, 120.0]])
direct = apply_homography(H, pts)
via_field = field.U[50, 40], field.U[120, 100]
print("H @ (40,50)  =", np.round(direct[0], 3), " field:", np.round(via_field[0], 3))
print("H @ (100,120)=", np.round(direct[1], 3), " field:", np.round(via_field[1], 3))

# ---------------------------------------------------------------
# a full training pair: crop, warp, photometric jitter
# ---------------------------------------------------------------

rng = np.random.default_rng(11)
jitter = SceneSpec(kind="checkerboard_triangle", size=192, seed=7)
pair = make_training_pair(scene.image, HomographyRanges(), crop_size=96, rng=rng,
                          jitter=jitter)
write_ppm(os.path.join(out_dir, "pair_a.ppm"), pair.image1)
write_ppm(os.path.join(out_dir, "pair_b.ppm"), pair.image2)
print("\ntraining pair shapes:", pair.image1.shape, pair.image2.shape)
print("valid correspondence fraction:", round(float(pair.field.valid.mean()), 3))
print("done; images under", out_dir)
