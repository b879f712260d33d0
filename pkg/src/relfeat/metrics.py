"""Matching plus the three evaluation metrics: repeatability score,
mean matching accuracy over pixel thresholds, and the symmetric
matching score.

Geometry can be given either as a 3x3 homography (exact, invertible,
always valid) or as a dense correspondence field with a validity mask;
the matching-score metric requires the homography form because its
second direction uses the exact inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .synth import CorrespondenceField, apply_homography


@dataclass
class MatchSet:
    a_idx: np.ndarray
    b_idx: np.ndarray
    distance: np.ndarray
    mutual: bool = True

    def __len__(self):
        return int(self.a_idx.size)


def _pairwise_dist(da: np.ndarray, db: np.ndarray) -> np.ndarray:
    d2 = ((da * da).sum(1)[:, None] + (db * db).sum(1)[None, :]
          - 2.0 * (da @ db.T))
    return np.sqrt(np.maximum(d2, 0.0))


def mutual_nn_match(A, B) -> MatchSet:
    """Mutual nearest neighbors in descriptor space; ties go to the
    lowest index.  Either side empty gives an empty MatchSet."""
    empty = MatchSet(a_idx=np.zeros(0, np.intp), b_idx=np.zeros(0, np.intp),
                     distance=np.zeros(0))
    if len(A) == 0 or len(B) == 0:
        return empty
    D = _pairwise_dist(A.descriptors().astype(np.float64),
                       B.descriptors().astype(np.float64))
    nn_b = D.argmin(axis=1)   # argmin takes the first minimum: lowest index
    nn_a = D.argmin(axis=0)
    rows = np.flatnonzero(nn_a[nn_b] == np.arange(D.shape[0]))
    cols = nn_b[rows]
    return MatchSet(a_idx=rows.astype(np.intp), b_idx=cols.astype(np.intp),
                    distance=D[rows, cols])


def _project(U, pts: np.ndarray):
    """Project (N, 2) image-1 points; returns (targets, valid_flags)."""
    if isinstance(U, np.ndarray) and U.shape == (3, 3):
        return apply_homography(U, pts), np.ones(pts.shape[0], dtype=bool)
    if isinstance(U, CorrespondenceField):
        h, w = U.valid.shape
        x = np.clip(pts[:, 0], 0, w - 1)
        y = np.clip(pts[:, 1], 0, h - 1)
        x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
        y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
        x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
        ok = (U.valid[y0, x0] & U.valid[y0, x1]
              & U.valid[y1, x0] & U.valid[y1, x1])
        fx, fy = (x - x0)[:, None], (y - y0)[:, None]
        val = ((1 - fx) * (1 - fy) * U.U[y0, x0] + fx * (1 - fy) * U.U[y0, x1]
               + (1 - fx) * fy * U.U[y1, x0] + fx * fy * U.U[y1, x1])
        return val, ok
    raise TypeError("U must be a 3x3 homography or a CorrespondenceField")


def _inbounds(pts: np.ndarray, hw) -> np.ndarray:
    h, w = hw
    return ((pts[:, 0] >= 0) & (pts[:, 0] <= w - 1)
            & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1))


def _require_hw(kset, what: str):
    # keypoint files carry no image size; bounds-based metrics need it
    if kset.image_hw is None or min(kset.image_hw) < 1:
        raise ValueError(f"{what} needs KeypointSet.image_hw (got "
                         f"{kset.image_hw}); attach the image size")


def repeatability_score(A, B, U, tol_px: float) -> float:
    """One-to-one geometric matches (greedy nearest-first) over
    min(|A projecting into image 2|, |B|).  Descriptors never enter."""
    if len(A) == 0 and len(B) == 0:
        raise ValueError("repeatability undefined for two empty sets")
    if len(A) == 0 or len(B) == 0:
        return 0.0
    _require_hw(B, "repeatability_score")
    proj, ok = _project(U, A.coords())
    ok &= _inbounds(proj, B.image_hw)
    proj = proj[ok]
    denom = min(int(ok.sum()), len(B))
    if denom == 0:
        return 0.0
    D = np.linalg.norm(proj[:, None, :] - B.coords()[None, :, :], axis=2)
    ia, ib = np.nonzero(D <= tol_px)
    order = np.lexsort((ib, ia, D[ia, ib]))
    used_a = np.zeros(proj.shape[0], bool)
    used_b = np.zeros(len(B), bool)
    hits = 0
    for k in order:
        i, j = ia[k], ib[k]
        if not used_a[i] and not used_b[j]:
            used_a[i] = used_b[j] = True
            hits += 1
    return hits / denom


def mma(matches: MatchSet, A, B, U, thresholds) -> dict:
    """Fraction of mutual matches with reprojection error within each
    threshold; matches whose A-side has no valid flow are excluded from
    both numerator and denominator.  An empty set scores 0."""
    out = {float(t): 0.0 for t in thresholds}
    if len(matches) == 0:
        return out
    pa = A.coords()[matches.a_idx]
    pb = B.coords()[matches.b_idx]
    proj, ok = _project(U, pa)
    if not ok.any():
        return out
    err = np.linalg.norm(proj[ok] - pb[ok], axis=1)
    for t in thresholds:
        out[float(t)] = float((err <= t).mean())
    return out


@dataclass
class MScoreResult:
    status: str                    # "ok" or "skipped"
    value: float | None
    correct_ab: int = 0
    correct_ba: int = 0
    shared_a: int = 0
    shared_b: int = 0


def matching_score(A, B, H: np.ndarray, tol_px: float) -> MScoreResult:
    """Mean over both directions of (correct mutual matches) /
    (features projecting into the shared region); the reverse direction
    uses the exact homography inverse.  A direction with an empty
    shared region marks the pair skipped."""
    if not (isinstance(H, np.ndarray) and H.shape == (3, 3)):
        raise TypeError("matching_score needs the exact 3x3 homography")
    if len(A) == 0 or len(B) == 0:
        return MScoreResult(status="skipped", value=None)
    _require_hw(A, "matching_score")
    _require_hw(B, "matching_score")
    Hinv = np.linalg.inv(H)
    proj_a = apply_homography(H, A.coords())
    proj_b = apply_homography(Hinv, B.coords())
    shared_a = int(_inbounds(proj_a, B.image_hw).sum())
    shared_b = int(_inbounds(proj_b, A.image_hw).sum())
    if shared_a == 0 or shared_b == 0:
        return MScoreResult(status="skipped", value=None,
                            shared_a=shared_a, shared_b=shared_b)
    m = mutual_nn_match(A, B)
    if len(m) == 0:
        return MScoreResult(status="ok", value=0.0,
                            shared_a=shared_a, shared_b=shared_b)
    pa, pb = A.coords()[m.a_idx], B.coords()[m.b_idx]
    err_ab = np.linalg.norm(apply_homography(H, pa) - pb, axis=1)
    err_ba = np.linalg.norm(apply_homography(Hinv, pb) - pa, axis=1)
    c_ab = int((err_ab <= tol_px).sum())
    c_ba = int((err_ba <= tol_px).sum())
    value = 0.5 * (c_ab / shared_a + c_ba / shared_b)
    return MScoreResult(status="ok", value=value, correct_ab=c_ab,
                        correct_ba=c_ba, shared_a=shared_a, shared_b=shared_b)


# ---------------------------------------------------------------------
# pair evaluation and reporting
# ---------------------------------------------------------------------

@dataclass
class EvalResult:
    repeatability: float
    mma_at: dict
    m_score: MScoreResult
    n_a: int = 0
    n_b: int = 0
    n_matches: int = 0


def evaluate_pair(A, B, H: np.ndarray, thresholds, tol_px: float) -> EvalResult:
    rep = repeatability_score(A, B, H, tol_px) if (len(A) or len(B)) else 0.0
    m = mutual_nn_match(A, B)
    return EvalResult(
        repeatability=rep,
        mma_at=mma(m, A, B, H, thresholds),
        m_score=matching_score(A, B, H, tol_px),
        n_a=len(A), n_b=len(B), n_matches=len(m),
    )


def build_eval_report(names, results, thresholds) -> dict:
    """JSON-ready report: one entry per pair plus aggregate means;
    skipped pairs stay out of the matching-score mean."""
    pairs = []
    for name, r in zip(names, results):
        pairs.append({
            "pair": name,
            "repeatability": r.repeatability,
            "mma": {str(t): r.mma_at[float(t)] for t in thresholds},
            "m_score": r.m_score.value,
            "m_score_status": r.m_score.status,
            "keypoints_a": r.n_a,
            "keypoints_b": r.n_b,
            "mutual_matches": r.n_matches,
        })
    scored = [r.m_score.value for r in results if r.m_score.status == "ok"]
    agg = {
        "repeatability": float(np.mean([r.repeatability for r in results])) if results else 0.0,
        "mma": {str(t): float(np.mean([r.mma_at[float(t)] for r in results])) if results else 0.0
                for t in thresholds},
        "m_score": float(np.mean(scored)) if scored else None,
        "pairs_scored": len(scored),
        "pairs_skipped": len(results) - len(scored),
    }
    return {"pairs": pairs, "aggregate": agg}
