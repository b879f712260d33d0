"""File formats and atomic writing.

Binary formats are little-endian throughout.  Every writer goes through
`atomic_write`: content lands in a temp file in the destination
directory and is renamed into place, so interrupted runs never leave
truncated artifacts.
"""

from __future__ import annotations

import contextlib
import os
import struct
import tempfile

import numpy as np


@contextlib.contextmanager
def atomic_write(path, mode: str = "wb"):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------
# tensor blocks (shared by the model and checkpoint formats)
# ---------------------------------------------------------------------

def write_tensor_block(f, arr: np.ndarray) -> None:
    """u32 ndim, u32 dims..., raw float32 little-endian."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes())


def read_tensor_block(f) -> np.ndarray:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError("truncated tensor block header")
    (ndim,) = struct.unpack("<I", raw)
    if ndim > 8:
        raise ValueError(f"implausible tensor rank {ndim}")
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = f.read(4 * count)
    if len(data) != 4 * count:
        raise ValueError("truncated tensor block data")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------
# PPM (P6) / PGM (P5) images, binary, maxval 255
# ---------------------------------------------------------------------

def _read_pnm_tokens(f, n):
    """Read n whitespace-separated header tokens, skipping '#' comments."""
    tokens = []
    while len(tokens) < n:
        c = f.read(1)
        if not c:
            raise ValueError("truncated PNM header")
        if c in b" \t\r\n":
            continue
        if c == b"#":
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        tok = c
        while True:
            c = f.read(1)
            if c in b" \t\r\n" or not c:
                break
            tok += c
        tokens.append(tok)
    return tokens


def read_image(path) -> np.ndarray:
    """Read a P6 (RGB) or P5 (gray, replicated to RGB) image as float
    H×W×3 in [0, 1]."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
        w, h, maxval = (int(t) for t in _read_pnm_tokens(f, 3))
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
        ch = 3 if magic == b"P6" else 1
        data = f.read(w * h * ch)
        if len(data) != w * h * ch:
            raise ValueError(f"{path}: truncated pixel data")
    img = np.frombuffer(data, dtype=np.uint8).reshape(h, w, ch).astype(np.float32) / 255.0
    if ch == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def write_ppm(path, img: np.ndarray) -> None:
    """Write H×W×3 float [0,1] as binary P6."""
    h, w, _ = img.shape
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with atomic_write(path) as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write H×W float [0,1] as binary P5 (linearly scaled to 0..255)."""
    h, w = gray.shape
    u8 = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    with atomic_write(path) as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


# ---------------------------------------------------------------------
# small text formats
# ---------------------------------------------------------------------

def read_homography_file(path) -> np.ndarray:
    """9 whitespace-separated decimals, row-major, normalized to h22=1."""
    with open(path) as f:
        vals = [float(t) for t in f.read().split()]
    if len(vals) != 9:
        raise ValueError(f"{path}: expected 9 numbers, got {len(vals)}")
    m = np.array(vals, dtype=np.float64).reshape(3, 3)
    if m[2, 2] == 0:
        raise ValueError(f"{path}: bottom-right entry must be nonzero")
    return m / m[2, 2]


def write_homography_file(path, m: np.ndarray) -> None:
    m = np.asarray(m, dtype=np.float64)
    with atomic_write(path, "w") as f:
        for row in m:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_pair_list(path):
    """One 'imageA imageB homographyFile' triple per line; '#' comments
    and blank lines ignored.  Paths are resolved relative to the list."""
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 fields, got {len(parts)}")
            pairs.append(tuple(os.path.join(base, p) for p in parts))
    return pairs


def write_matches_file(path, matches) -> None:
    """One 'idxA idxB distance' triple per line."""
    with atomic_write(path, "w") as f:
        for a, b, d in matches:
            f.write(f"{a} {b} {d:.8f}\n")


def read_matches_file(path):
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            a, b, d = line.split()
            out.append((int(a), int(b), float(d)))
    return out
