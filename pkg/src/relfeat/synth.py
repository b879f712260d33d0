"""Synthetic training data: procedural scenes, homography sampling,
warping, color jitter, and exact correspondence fields.

Coordinate convention used everywhere: a pixel at row i, column j has
coordinates (x, y) = (j, i); homographies act on column vectors
(x, y, 1).  A point is inside an H×W image iff 0 <= x <= W-1 and
0 <= y <= H-1 (the bilinear sampling domain).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INVALID_COORD = -1e6


class UnusablePair(Exception):
    """Raised when a synthesized pair has no usable correspondences."""


# ---------------------------------------------------------------------
# homographies
# ---------------------------------------------------------------------

@dataclass
class HomographyRanges:
    rotation_deg: float = 25.0
    scale_min: float = 0.8
    scale_max: float = 1.25
    translation_frac: float = 0.15
    perspective: float = 8e-4


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Project (N, 2) points through a 3x3 homography."""
    pts = np.asarray(pts, dtype=np.float64)
    ones = np.ones((pts.shape[0], 1))
    q = np.concatenate([pts, ones], axis=1) @ H.T
    return q[:, :2] / q[:, 2:3]


def sample_homography(seed, ranges: HomographyRanges, size) -> np.ndarray:
    """Seeded random homography: translation . rotation . scale .
    perspective, with rotation/scale/perspective taken about the image
    center, normalized so the bottom-right entry is 1.

    `seed` may be an int or a Generator.  `size` is (H, W) or a single
    side length; the translation range is a fraction of it.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = (size, size) if np.isscalar(size) else size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    center = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    uncenter = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)

    for _ in range(32):
        theta = np.deg2rad(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg))
        sx = rng.uniform(ranges.scale_min, ranges.scale_max)
        sy = rng.uniform(ranges.scale_min, ranges.scale_max)
        tx = rng.uniform(-ranges.translation_frac, ranges.translation_frac) * w
        ty = rng.uniform(-ranges.translation_frac, ranges.translation_frac) * h
        px = rng.uniform(-ranges.perspective, ranges.perspective)
        py = rng.uniform(-ranges.perspective, ranges.perspective)

        rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                        [np.sin(theta), np.cos(theta), 0],
                        [0, 0, 1]], dtype=np.float64)
        scale = np.diag([sx, sy, 1.0])
        persp = np.array([[1, 0, 0], [0, 1, 0], [px, py, 1]], dtype=np.float64)
        trans = np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]], dtype=np.float64)

        H = trans @ center @ rot @ scale @ persp @ uncenter
        if abs(np.linalg.det(H)) > 1e-8 and H[2, 2] != 0:
            return H / H[2, 2]
    raise ValueError("could not sample a non-degenerate homography")


# ---------------------------------------------------------------------
# warping and correspondences
# ---------------------------------------------------------------------

def _bilinear_np(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Plain-numpy bilinear sampling with an in-bounds mask."""
    Hs, Ws = img.shape[:2]
    inside = (x >= 0) & (x <= Ws - 1) & (y >= 0) & (y <= Hs - 1)
    xc = np.clip(x, 0, Ws - 1)
    yc = np.clip(y, 0, Hs - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(Ws - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(Hs - 2, 0))
    fx = (xc - x0)[..., None] if img.ndim == 3 else (xc - x0)
    fy = (yc - y0)[..., None] if img.ndim == 3 else (yc - y0)
    x1 = np.minimum(x0 + 1, Ws - 1)
    y1 = np.minimum(y0 + 1, Hs - 1)
    out = ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
           + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])
    return out, inside


def warp_image(image: np.ndarray, H: np.ndarray, out_shape=None):
    """Warp by inverse mapping: output pixel p gets image[H^-1 p].

    Returns (warped, coverage); pixels whose source falls outside the
    image are zeroed and flagged uncovered.
    """
    if out_shape is None:
        out_shape = image.shape[:2]
    oh, ow = out_shape
    Hinv = np.linalg.inv(H)
    ys, xs = np.mgrid[0:oh, 0:ow]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = apply_homography(Hinv, pts)
    vals, inside = _bilinear_np(image, src[:, 0], src[:, 1])
    out = vals.reshape(oh, ow, *image.shape[2:]).astype(image.dtype)
    mask = inside.reshape(oh, ow)
    out[~mask] = 0
    return out, mask


@dataclass
class CorrespondenceField:
    """U: H×W×2 sub-pixel (x, y) targets in image-2 coordinates;
    valid: H×W bool.  Invalid entries hold a sentinel and must never
    be read."""
    U: np.ndarray
    valid: np.ndarray


def build_correspondences(H: np.ndarray, shape1, shape2) -> CorrespondenceField:
    h1, w1 = shape1
    h2, w2 = shape2
    ys, xs = np.mgrid[0:h1, 0:w1]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    tgt = apply_homography(H, pts)
    valid = ((tgt[:, 0] >= 0) & (tgt[:, 0] <= w2 - 1)
             & (tgt[:, 1] >= 0) & (tgt[:, 1] <= h2 - 1)).reshape(h1, w1)
    U = tgt.reshape(h1, w1, 2).astype(np.float64)
    U[~valid] = INVALID_COORD
    return CorrespondenceField(U=U, valid=valid)


# ---------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------

SCENE_KINDS = ("checkerboard_triangle", "random_polygons", "texture_noise", "gradient_sky")

# scene size / divisor = checker cell size in pixels
CHECKER_CELL_DIVISORS = (9, 12, 15)

# shade range for the non-dark cells; None reuses the background shade,
# which removes every brightness cue except structure itself
CHECKER_LIGHT_RANGE = None


@dataclass
class SceneSpec:
    kind: str = "checkerboard_triangle"
    size: int = 288
    seed: int = 0
    brightness: float = 0.1
    contrast: float = 0.1
    gain: float = 0.1

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; choose from {SCENE_KINDS}")


@dataclass
class Scene:
    image: np.ndarray
    annotations: dict = field(default_factory=dict)


def _fill_triangle(img, verts, color):
    ys, xs = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    inside = np.ones(img.shape[:2], dtype=bool)
    for k in range(3):
        x0, y0 = verts[k]
        x1, y1 = verts[(k + 1) % 3]
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside &= cross >= 0
    img[inside] = color
    return inside


def make_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    img = np.empty((s, s, 3), dtype=np.float32)

    if spec.kind == "checkerboard_triangle":
        bg = rng.uniform(0.62, 0.78)
        img[:] = bg
        # checkerboard block in the left half; cell size scales with the
        # scene so the board looks alike at any resolution
        cell = max(4, s // int(rng.choice(CHECKER_CELL_DIVISORS)))
        ncells = max(3, int(s * 0.5) // cell)
        side = ncells * cell
        cx0 = int(rng.integers(s // 16, max(s // 16 + 1, s // 2 - side)))
        cy0 = int(rng.integers(s // 16, s - side - s // 16))
        dark = rng.uniform(0.05, 0.18)
        light = bg if CHECKER_LIGHT_RANGE is None else rng.uniform(*CHECKER_LIGHT_RANGE)
        ii, jj = np.mgrid[0:side, 0:side]
        board = np.where(((ii // cell + jj // cell) % 2) == 0, light, dark).astype(np.float32)
        img[cy0:cy0 + side, cx0:cx0 + side, :] = board[..., None]
        corners = [
            (cx0 + cell * i, cy0 + cell * j)
            for i in range(1, ncells)
            for j in range(1, ncells)
        ]
        # lone dark triangle in the right half
        tx0 = int(s * 0.58)
        span = int(s * 0.34)
        base = np.array([tx0 + span * 0.1, s * 0.3])
        v = base + rng.uniform(0, span * 0.9, size=(3, 2)) * np.array([1.0, 1.2])
        v = np.clip(v, [tx0, s * 0.08], [s - s // 16, s - s // 16])
        # enforce counter-clockwise order for the edge test
        c = v.mean(axis=0)
        v = v[np.argsort(np.arctan2(v[:, 1] - c[1], v[:, 0] - c[0]))]
        tri_color = rng.uniform(0.02, 0.12)
        _fill_triangle(img, v, tri_color)
        ann = {
            "checker_bbox": (cx0, cy0, cx0 + side, cy0 + side),
            "checker_cell": cell,
            "checker_corners": corners,
            "triangle_bbox": (float(v[:, 0].min()), float(v[:, 1].min()),
                              float(v[:, 0].max()), float(v[:, 1].max())),
            "triangle_vertices": v.tolist(),
        }
        return Scene(image=np.clip(img, 0, 1), annotations=ann)

    if spec.kind == "random_polygons":
        base = rng.uniform(0.3, 0.7, size=3).astype(np.float32)
        img[:] = base
        ys, xs = np.mgrid[0:s, 0:s]
        for _ in range(int(rng.integers(8, 14))):
            cx, cy = rng.uniform(0.1 * s, 0.9 * s, 2)
            nv = int(rng.integers(3, 7))
            angles = np.sort(rng.uniform(0, 2 * np.pi, nv))
            radii = rng.uniform(0.04 * s, 0.16 * s, nv)
            vx = cx + radii * np.cos(angles)
            vy = cy + radii * np.sin(angles)
            color = rng.uniform(0.05, 0.95, 3).astype(np.float32)
            inside = np.ones((s, s), dtype=bool)
            for k in range(nv):
                x0p, y0p = vx[k], vy[k]
                x1p, y1p = vx[(k + 1) % nv], vy[(k + 1) % nv]
                inside &= (x1p - x0p) * (ys - y0p) - (y1p - y0p) * (xs - x0p) >= 0
            img[inside] = color
        return Scene(image=np.clip(img, 0, 1), annotations={})

    if spec.kind == "texture_noise":
        # mid-frequency noise: coarse seeded lattice, bilinear upsampled
        coarse_n = max(4, s // 12)
        out = np.zeros((s, s, 3), dtype=np.float32)
        ys = (np.arange(s) + 0.5) * (coarse_n / s) - 0.5
        xs = (np.arange(s) + 0.5) * (coarse_n / s) - 0.5
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        for c in range(3):
            coarse = rng.uniform(0.1, 0.9, size=(coarse_n, coarse_n))
            vals, _ = _bilinear_np(coarse, gx.ravel(), gy.ravel())
            out[:, :, c] = vals.reshape(s, s)
        out += rng.normal(0, 0.02, size=out.shape)
        return Scene(image=np.clip(out, 0, 1).astype(np.float32), annotations={})

    # gradient_sky: near-featureless gradient plus a couple of soft blobs
    theta = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:s, 0:s]
    t = (np.cos(theta) * xs + np.sin(theta) * ys) / s
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    top = rng.uniform(0.4, 0.9, 3)
    bot = rng.uniform(0.1, 0.6, 3)
    img = (t[..., None] * top + (1 - t[..., None]) * bot).astype(np.float32)
    for _ in range(int(rng.integers(1, 4))):
        bx, by = rng.uniform(0.2 * s, 0.8 * s, 2)
        rad = rng.uniform(0.05 * s, 0.15 * s)
        blob = np.exp(-(((xs - bx) ** 2 + (ys - by) ** 2) / (2 * rad * rad)))
        img += 0.15 * blob[..., None].astype(np.float32)
    return Scene(image=np.clip(img, 0, 1), annotations={})


def color_jitter(image: np.ndarray, spec: SceneSpec, rng=None) -> np.ndarray:
    """Photometric jitter: brightness shift, contrast about 0.5, then
    per-channel gain; clamped to [0,1].  Geometry untouched."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(
        spec.seed if rng is None else rng)
    b = rng.uniform(-spec.brightness, spec.brightness)
    c = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast)
    g = rng.uniform(1.0 - spec.gain, 1.0 + spec.gain, size=3)
    out = (image - 0.5) * c + 0.5 + b
    out = out * g[None, None, :].astype(image.dtype)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------
# training pairs
# ---------------------------------------------------------------------

@dataclass
class TrainingPair:
    image1: np.ndarray
    image2: np.ndarray
    field: CorrespondenceField
    crop_homography: np.ndarray  # maps image1-crop coords to image2-crop coords


def _translation(tx, ty):
    return np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]], dtype=np.float64)


def make_training_pair(scene_image: np.ndarray, hranges: HomographyRanges,
                       crop_size: int, rng, jitter: SceneSpec | None = None,
                       min_valid_frac: float = 0.5,
                       attempts: int = 20) -> TrainingPair:
    """Warp a scene by a random homography and cut corresponding crops.

    The second crop is centered on the projection of the first crop's
    center.  Rejection-samples until the crop-to-crop correspondence
    field is >= min_valid_frac valid; signals UnusablePair otherwise.
    """
    s_h, s_w = scene_image.shape[:2]
    c = crop_size
    if c > min(s_h, s_w):
        raise ValueError(f"crop {c} larger than scene {s_h}x{s_w}")

    for _ in range(attempts):
        H = sample_homography(rng, hranges, (s_h, s_w))
        warped, coverage = warp_image(scene_image, H)

        ox1 = int(rng.integers(0, s_w - c + 1))
        oy1 = int(rng.integers(0, s_h - c + 1))
        center = np.array([[ox1 + (c - 1) / 2.0, oy1 + (c - 1) / 2.0]])
        pc = apply_homography(H, center)[0]
        ox2 = int(np.clip(round(pc[0] - (c - 1) / 2.0), 0, s_w - c))
        oy2 = int(np.clip(round(pc[1] - (c - 1) / 2.0), 0, s_h - c))

        Hc = _translation(-ox2, -oy2) @ H @ _translation(ox1, oy1)
        fld = build_correspondences(Hc, (c, c), (c, c))

        # a valid target must also land on covered (non-border) content
        cov_crop = coverage[oy2:oy2 + c, ox2:ox2 + c]
        if fld.valid.any():
            tgt = fld.U[fld.valid]
            ti = np.clip(np.rint(tgt[:, 1]).astype(int), 0, c - 1)
            tj = np.clip(np.rint(tgt[:, 0]).astype(int), 0, c - 1)
            ok = cov_crop[ti, tj]
            vv = fld.valid.copy()
            vv[fld.valid] = ok
            fld = CorrespondenceField(U=np.where(vv[..., None], fld.U, INVALID_COORD),
                                      valid=vv)

        if fld.valid.mean() >= min_valid_frac:
            img1 = scene_image[oy1:oy1 + c, ox1:ox1 + c].copy()
            img2 = warped[oy2:oy2 + c, ox2:ox2 + c].copy()
            if jitter is not None:
                img1 = color_jitter(img1, jitter, rng)
                img2 = color_jitter(img2, jitter, rng)
            return TrainingPair(image1=img1, image2=img2, field=fld,
                                crop_homography=Hc)

    raise UnusablePair(f"no crop with >= {min_valid_frac:.0%} valid flow after {attempts} attempts")


def pick_scene_kind(scene_mix: dict, rng) -> str:
    kinds = sorted(scene_mix)
    weights = np.array([scene_mix[k] for k in kinds], dtype=np.float64)
    if weights.sum() <= 0:
        raise ValueError("scene mix weights must sum to a positive value")
    return kinds[rng.choice(len(kinds), p=weights / weights.sum())]


# ---------------------------------------------------------------------
# user-supplied photos (same homography machinery, different source)
# ---------------------------------------------------------------------

def list_image_directory(path) -> list:
    """Sorted .ppm/.pgm paths under a directory."""
    import os
    names = sorted(n for n in os.listdir(path)
                   if n.lower().endswith((".ppm", ".pgm")))
    if not names:
        raise ValueError(f"no .ppm/.pgm images in {path}")
    return [os.path.join(path, n) for n in names]


def load_photo_scene(paths: list, size: int, rng) -> np.ndarray:
    """Random photo resized to cover `size`, then randomly cropped
    square; stands in for a procedural scene."""
    from .fileio import read_image
    img = read_image(paths[int(rng.integers(0, len(paths)))])
    h, w = img.shape[:2]
    s = size / min(h, w)
    if s > 1.0 or min(h, w) > 2 * size:  # cover, but also cap huge photos
        nh, nw = max(size, int(round(h * s))), max(size, int(round(w * s)))
        ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
        xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        vals, _ = _bilinear_np(img, gx.ravel(), gy.ravel())
        img = vals.reshape(nh, nw, 3).astype(np.float32)
        h, w = nh, nw
    oy = int(rng.integers(0, h - size + 1))
    ox = int(rng.integers(0, w - size + 1))
    return img[oy:oy + size, ox:ox + size].copy()
