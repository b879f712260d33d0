"""Test-time keypoint extraction.

Scale pyramid by 2^(1/4) steps, strict 3x3 local maxima on the
repeatability map (reliability map under the detect_on switch), scores
as the S*R product at the detection pixel, and a cross-scale top-K
shortlist.  Each level's coordinates map back to the original image by
dividing by that level's nominal scale factor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .fileio import atomic_write
from .network import DESCRIPTOR_DIM, MIN_INPUT_SIZE

KEYPOINT_MAGIC = b"R2KP"
KEYPOINT_VERSION = 1

PYRAMID_FACTOR = 2.0 ** 0.25


@dataclass
class Keypoint:
    x: float
    y: float
    scale: float   # pyramid scale factor, 1.0 = original resolution
    score: float   # S * R at the detection pixel
    descriptor: np.ndarray


@dataclass
class KeypointSet:
    keypoints: list
    image_hw: tuple | None   # None when loaded from a file (format has no size)

    def __len__(self):
        return len(self.keypoints)

    def coords(self) -> np.ndarray:
        return np.array([[k.x, k.y] for k in self.keypoints], dtype=np.float64).reshape(-1, 2)

    def descriptors(self) -> np.ndarray:
        if not self.keypoints:
            return np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32)
        return np.stack([k.descriptor for k in self.keypoints])


@dataclass
class ExtractConfig:
    pyramid_factor: float = PYRAMID_FACTOR
    min_size: int = 128
    threshold_s: float = 0.7
    threshold_r: float = 0.7
    detect_on: str = "repeatability"   # or "reliability"

    def __post_init__(self):
        if self.pyramid_factor <= 1.0:
            raise ValueError("pyramid_factor must exceed 1")
        if self.detect_on not in ("repeatability", "reliability"):
            raise ValueError("detect_on must be 'repeatability' or 'reliability'")


def _resize_np(image: np.ndarray, out_hw) -> np.ndarray:
    """Bilinear resize with half-pixel centers (numpy, no gradients)."""
    from .synth import _bilinear_np
    h, w = image.shape[:2]
    oh, ow = out_hw
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    vals, _ = _bilinear_np(image, gx.ravel(), gy.ravel())
    return vals.reshape(oh, ow, *image.shape[2:]).astype(image.dtype)


def build_pyramid(image: np.ndarray, factor: float = PYRAMID_FACTOR,
                  min_size: int = 128):
    """[(scale, image)] pairs with scale = factor^-k and dimensions rounded
    from the ORIGINAL size, kept while min(H, W) >= min_size.  The
    original is always level 0 even if already below min_size."""
    if image.size == 0:
        raise ValueError("empty image")
    h, w = image.shape[:2]
    levels = [(1.0, image)]
    k = 1
    while True:
        s = factor ** (-k)
        nh, nw = int(round(h * s)), int(round(w * s))
        if min(nh, nw) < min_size:
            break
        levels.append((s, _resize_np(image, (nh, nw))))
        k += 1
    return levels


def nms_local_maxima(S: np.ndarray, R: np.ndarray, thresholds=(0.7, 0.7)):
    """(i, j) pixels strictly above all 8 neighbors with S >= thr_s and
    R >= thr_r; the 1-px border frame never detects."""
    if S.shape != R.shape:
        raise ValueError("S and R must share a shape")
    thr_s, thr_r = thresholds
    if min(S.shape) < 3:
        return []
    c = S[1:-1, 1:-1]
    strict = np.ones_like(c, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            strict &= c > S[1 + di:S.shape[0] - 1 + di, 1 + dj:S.shape[1] - 1 + dj]
    strict &= (c >= thr_s) & (R[1:-1, 1:-1] >= thr_r)
    ii, jj = np.nonzero(strict)
    return [(int(i) + 1, int(j) + 1) for i, j in zip(ii, jj)]


def extract_keypoints(image: np.ndarray, network, K: int,
                      cfg: ExtractConfig | None = None) -> KeypointSet:
    """Detect on every pyramid level, map coordinates back to the
    original resolution, keep the best K by descending score."""
    if K < 1:
        raise ValueError("K must be >= 1")
    cfg = cfg or ExtractConfig()
    rows = []  # (score, level, i, j, x, y, scale, descriptor)
    for level, (s, img) in enumerate(build_pyramid(image, cfg.pyramid_factor, cfg.min_size)):
        if min(img.shape[:2]) < MIN_INPUT_SIZE:
            continue
        out = network.forward(img)
        S = out.S.data
        R = out.R.data
        det_map = S if cfg.detect_on == "repeatability" else R
        aux = R if cfg.detect_on == "repeatability" else S
        thr = ((cfg.threshold_s, cfg.threshold_r) if cfg.detect_on == "repeatability"
               else (cfg.threshold_r, cfg.threshold_s))
        for (i, j) in nms_local_maxima(det_map, aux, thr):
            rows.append((float(S[i, j] * R[i, j]), level, i, j,
                         j / s, i / s, s, out.X.data[i, j].copy()))

    # deterministic: score desc, then level, then pixel position
    rows.sort(key=lambda r: (-r[0], r[1], r[2], r[3]))
    kps = [Keypoint(x=r[4], y=r[5], scale=r[6], score=r[0], descriptor=r[7])
           for r in rows[:K]]
    return KeypointSet(keypoints=kps, image_hw=image.shape[:2])


# ---------------------------------------------------------------------
# keypoint file format
# ---------------------------------------------------------------------

def write_keypoints(path, kset: KeypointSet) -> None:
    with atomic_write(path, "wb") as f:
        f.write(KEYPOINT_MAGIC)
        f.write(struct.pack("<III", KEYPOINT_VERSION, len(kset.keypoints), DESCRIPTOR_DIM))
        for kp in kset.keypoints:
            d = np.asarray(kp.descriptor, dtype="<f4")
            if d.shape != (DESCRIPTOR_DIM,):
                raise ValueError(f"descriptor must be {DESCRIPTOR_DIM}-dim")
            f.write(struct.pack("<ffff", kp.x, kp.y, kp.scale, kp.score))
            f.write(d.tobytes())


def read_keypoints(path) -> KeypointSet:
    """The format carries no image size: image_hw comes back None and
    callers that need bounds (repeatability, M-score) must attach it."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != KEYPOINT_MAGIC:
            raise ValueError(f"bad keypoint file magic {magic!r}")
        version, count, dim = struct.unpack("<III", f.read(12))
        if version != KEYPOINT_VERSION:
            raise ValueError(f"unsupported keypoint file version {version}")
        if dim != DESCRIPTOR_DIM:
            raise ValueError(f"descriptor dim {dim} != {DESCRIPTOR_DIM}")
        kps = []
        rec = 16 + 4 * dim
        for _ in range(count):
            buf = f.read(rec)
            if len(buf) != rec:
                raise ValueError("truncated keypoint file")
            x, y, scale, score = struct.unpack("<ffff", buf[:16])
            desc = np.frombuffer(buf[16:], dtype="<f4").copy()
            kps.append(Keypoint(x=x, y=y, scale=scale, score=score, descriptor=desc))
    return KeypointSet(keypoints=kps, image_hw=None)
