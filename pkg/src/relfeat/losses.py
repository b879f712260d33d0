"""Training objectives.

Three pieces fit together:

1. Repeatability: a patch-cosine agreement term between the first
   heatmap and the warped second heatmap, plus a peakiness term on each
   heatmap that penalizes flatness (max minus mean inside every N by N
   patch).
2. Descriptor ranking: a differentiable average-precision surrogate per
   query pixel, gated by the reliability map so the network may opt out
   of hard regions at a fixed cost kappa.
3. A batch sampler that turns a dense correspondence field into
   query/database descriptor sets with binary relevance labels.

The AP surrogate is a smooth-rank estimator: each positive's rank is
estimated by summing sigmoids of pairwise distance differences at a
temperature tied to the configured number of quantization bins
(temperature = bin width / TEMP_REFINE).  It is exact on a database
holding a single positive, strictly monotone on two-point databases,
and stays within the oracle tolerance of exact AP on random instances;
any surrogate meeting those bars is acceptable here, and this one is
both cheaper and smoother than assigning distances to discrete bins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (Tensor, bilinear_sample, box_sum, minimum, relu,
                       sigmoid, sqrt, window_max)
from .synth import UnusablePair

# smooth-rank temperature = (2 / (Q - 1)) / TEMP_REFINE
TEMP_REFINE = 32.0


@dataclass
class LossConfig:
    patch_size: int = 16          # N
    peaky_weight: float = 0.5     # weight on the two peakiness terms
    kappa: float = 0.5            # minimum expected AP
    q_bins: int = 25              # AP distance-resolution knob
    grid_step: int = 8            # query sampling stride, px
    positive_radius: float = 4.0
    negative_radius: float = 8.0

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        if self.q_bins < 2:
            raise ValueError("q_bins must be >= 2")
        if not self.positive_radius < self.negative_radius:
            raise ValueError("positive_radius must be < negative_radius")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _np_box_count(mask: np.ndarray, n: int) -> np.ndarray:
    """Valid-pixel count inside every stride-1 n x n patch."""
    pad = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    pad[1:, 1:] = mask.astype(np.int64)
    ii = pad.cumsum(0).cumsum(1)
    h, w = mask.shape
    return (ii[n:h + 1, n:w + 1] - ii[:h - n + 1, n:w + 1]
            - ii[n:h + 1, :w - n + 1] + ii[:h - n + 1, :w - n + 1])


def _check_patch_size(shape, n: int):
    if n > min(shape):
        raise ValueError(f"patch size {n} exceeds heatmap {shape[0]}x{shape[1]}")


# ---------------------------------------------------------------------
# repeatability
# ---------------------------------------------------------------------

def cosim_loss(S, S_warped, valid: np.ndarray, N: int):
    """1 - mean patchwise cosine between the two heatmaps.

    Every stride-1 N x N patch participates; both patches are zeroed
    outside the validity mask first.  Patches containing no valid pixel
    are skipped, a zero-norm patch contributes cosine 0.
    """
    S = _as_tensor(S)
    S_warped = _as_tensor(S_warped)
    _check_patch_size(S.data.shape, N)
    if S.data.shape != S_warped.data.shape or S.data.shape != valid.shape:
        raise ValueError("heatmaps and mask must share one shape")

    counts = _np_box_count(valid, N)
    keep = counts > 0
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise UnusablePair("no patch contains a valid correspondence")

    m = valid.astype(S.data.dtype)
    a = S * m
    b = S_warped * m
    dot = box_sum(a * b, N)
    # the integral-image difference can round a near-zero sum of squares
    # slightly negative in float32, so clamp before the product under the sqrt
    na = relu(box_sum(a * a, N))
    nb = relu(box_sum(b * b, N))
    # +1e-16 keeps sqrt smooth; zero-norm patches land at cosine 0
    cos = dot / sqrt(na * nb + 1e-16)
    return 1.0 - (cos * keep.astype(S.data.dtype)).sum() / n_kept


def peakiness_loss(S, N: int):
    """1 - mean over stride-1 N x N patches of (max - mean)."""
    S = _as_tensor(S)
    _check_patch_size(S.data.shape, N)
    peak = window_max(S, N)
    mean = box_sum(S, N) * (1.0 / (N * N))
    return 1.0 - (peak - mean).mean()


def _inbounds(U: np.ndarray, shape2) -> np.ndarray:
    h2, w2 = shape2
    return ((U[..., 0] >= 0) & (U[..., 0] <= w2 - 1)
            & (U[..., 1] >= 0) & (U[..., 1] <= h2 - 1))


def repeatability_loss(S, S_prime, U: np.ndarray, valid: np.ndarray, cfg: LossConfig):
    """Cosine term against the flow-warped second heatmap, plus
    weighted peakiness of both raw heatmaps."""
    S = _as_tensor(S)
    S_prime = _as_tensor(S_prime)
    h, w = S.data.shape
    vmask = valid & _inbounds(U, S_prime.data.shape)
    coords = np.clip(U.reshape(-1, 2), 0.0, None)  # sentinels clamp; masked anyway
    warped = bilinear_sample(S_prime, coords).reshape(h, w)
    lc = cosim_loss(S, warped, vmask, cfg.patch_size)
    lp = peakiness_loss(S, cfg.patch_size) + peakiness_loss(S_prime, cfg.patch_size)
    return lc + cfg.peaky_weight * lp


# ---------------------------------------------------------------------
# descriptor ranking
# ---------------------------------------------------------------------

def exact_ap(ranked_labels) -> float:
    """AP of an already-ranked binary relevance list (rank 1 first).

    Callers sort by ascending distance with ties broken by ascending
    database index before calling.
    """
    labels = np.asarray(ranked_labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("ranked_labels must be a non-empty 1-D binary list")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if labels.sum() == 0:
        raise ValueError("AP undefined without a positive")
    ranks = np.flatnonzero(labels) + 1
    cum = np.cumsum(labels)[ranks - 1]
    return float(np.mean(cum / ranks))


def _check_unit_norm(x: np.ndarray, what: str):
    norms = np.sqrt((x * x).sum(axis=-1))
    if np.abs(norms - 1.0).max() > 1e-3:
        raise ValueError(f"{what} must be unit-norm (max deviation "
                         f"{np.abs(norms - 1.0).max():.2e})")


def soft_ap(query, database, labels, Q: int):
    """Differentiable AP of one query against a labeled database.

    Unit-norm descriptors in, Euclidean distances in [0, 2].  Each
    positive's rank r_i = 1 + sum_j sigmoid((d_i - d_j) / tau) with the
    self term removed; AP = mean_i r+_i / r_i.  tau shrinks as Q grows,
    so Q keeps its role as the distance-resolution knob.
    """
    if Q < 2:
        raise ValueError("Q must be >= 2")
    query = _as_tensor(query)
    database = _as_tensor(database)
    labels = np.asarray(labels)
    if query.data.ndim != 1 or database.data.ndim != 2:
        raise ValueError("query must be (D,), database (N, D)")
    if database.data.shape[1] != query.data.shape[0]:
        raise ValueError("descriptor dimensions differ")
    if labels.shape != (database.data.shape[0],):
        raise ValueError("labels must have one entry per database row")
    _check_unit_norm(query.data, "query")
    _check_unit_norm(database.data, "database")
    pos = np.flatnonzero(labels)
    if pos.size == 0:
        raise ValueError("AP undefined without a positive")

    d_dim = query.data.shape[0]
    sims = database @ query.reshape(d_dim, 1)            # (N, 1)
    dist = minimum(sqrt(relu(2.0 - 2.0 * sims) + 1e-8), 2.0)
    tau = 2.0 / ((Q - 1) * TEMP_REFINE)
    diff = (dist[pos] - dist.transpose()) * (1.0 / tau)  # (P, N)
    sig = sigmoid(diff)
    # +0.5 = 1 (rank base) - sigmoid(0) (self term)
    rank_all = sig.sum(axis=1) + 0.5
    rank_pos = (sig * labels.astype(sig.data.dtype).reshape(1, -1)).sum(axis=1) + 0.5
    return (rank_pos / rank_all).mean()


def ap_kappa_loss(ap, reliability, kappa: float):
    """1 - [AP * R + kappa * (1 - R)]: the network earns kappa for
    declaring a pixel unreliable, the actual AP otherwise."""
    ap = _as_tensor(ap)
    reliability = _as_tensor(reliability)
    tol = 1e-5
    for name, t in (("ap", ap), ("reliability", reliability)):
        if t.data.min() < -tol or t.data.max() > 1.0 + tol:
            raise ValueError(f"{name} must lie in [0, 1]")
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    return 1.0 - (ap * reliability + kappa * (1.0 - reliability))


# ---------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------

@dataclass
class TrainingBatch:
    query_xy: np.ndarray      # (Nq, 2) int pixel coords in image 1
    query_desc: Tensor        # (Nq, D)
    query_valid: np.ndarray   # (Nq,) bool
    db_xy: np.ndarray         # (Ndb, 2) int pixel coords in image 2
    db_desc: Tensor           # (Ndb, D)
    labels: np.ndarray        # (Nq, Ndb) uint8, 1 = positive
    keep: np.ndarray          # (Nq, Ndb) bool, False = dropped for that query


def _grid_coords(h: int, w: int, step: int):
    off = step // 2
    ys = np.arange(off, h, step)
    xs = np.arange(off, w, step)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return gx.ravel(), gy.ravel()


def sample_training_batch(pair, U: np.ndarray, valid: np.ndarray,
                          X1, X2, cfg: LossConfig) -> TrainingBatch:
    """Grid queries from image 1, database = their rounded ground-truth
    targets plus a grid over image 2.  Per query: database points within
    positive_radius of its target are positives, beyond negative_radius
    are negatives, in between they are dropped."""
    X1 = _as_tensor(X1)
    X2 = _as_tensor(X2)
    h1, w1 = X1.data.shape[:2]
    h2, w2 = X2.data.shape[:2]
    if pair is not None:
        im1, im2 = (pair.image1, pair.image2) if hasattr(pair, "image1") else pair
        if im1.shape[:2] != (h1, w1) or im2.shape[:2] != (h2, w2):
            raise ValueError("pair images do not match descriptor map shapes")

    qx, qy = _grid_coords(h1, w1, cfg.grid_step)
    ok = valid[qy, qx]
    qx, qy = qx[ok], qy[ok]
    if qx.size == 0:
        raise UnusablePair("no valid query on the sampling grid")
    targets = U[qy, qx]  # (Nq, 2) float (x, y) in image 2

    tj = np.clip(np.rint(targets[:, 0]), 0, w2 - 1).astype(np.intp)
    ti = np.clip(np.rint(targets[:, 1]), 0, h2 - 1).astype(np.intp)
    gx2, gy2 = _grid_coords(h2, w2, cfg.grid_step)
    db_x = np.concatenate([tj, gx2])
    db_y = np.concatenate([ti, gy2])

    dx = db_x[None, :] - targets[:, 0:1]
    dy = db_y[None, :] - targets[:, 1:2]
    dpx = np.sqrt(dx * dx + dy * dy)
    labels = (dpx <= cfg.positive_radius).astype(np.uint8)
    keep = (dpx <= cfg.positive_radius) | (dpx > cfg.negative_radius)

    q_desc = X1[(qy, qx)]
    db_desc = X2[(db_y, db_x)]
    return TrainingBatch(
        query_xy=np.stack([qx, qy], axis=1),
        query_desc=q_desc,
        query_valid=np.ones(qx.size, dtype=bool),
        db_xy=np.stack([db_x, db_y], axis=1),
        db_desc=db_desc,
        labels=labels,
        keep=keep,
    )


@dataclass
class TotalLossResult:
    total: Tensor
    l_cosim: float
    l_peaky_1: float
    l_peaky_2: float
    l_ap_mean: float
    n_queries: int


def _gated_ap_loss(batch: TrainingBatch, r_all, Q: int, kappa: float,
                   gate_reliability: bool):
    """Mean over queries of the reliability-gated AP loss, computed for
    every query at once.  All queries rank against the shared database,
    so the per-positive smooth ranks flatten into one (total positives,
    database) block; per-query means are recovered with 1/P weights.
    Agrees with a per-query soft_ap loop to float precision."""
    nq = batch.labels.shape[0]
    sims = batch.query_desc @ batch.db_desc.transpose()       # (Nq, Ndb)
    dist = minimum(sqrt(relu(2.0 - 2.0 * sims) + 1e-8), 2.0)

    q_idx, p_idx = np.nonzero(batch.labels & batch.keep)      # positives, flattened
    tau = 2.0 / ((Q - 1) * TEMP_REFINE)
    dpos = dist[(q_idx, p_idx)].reshape(q_idx.size, 1)
    dall = dist[q_idx]                                        # (Npairs, Ndb)
    sig = sigmoid((dpos - dall) * (1.0 / tau))
    keep_rows = batch.keep[q_idx].astype(sig.data.dtype)
    pos_rows = (batch.labels & batch.keep)[q_idx].astype(sig.data.dtype)
    rank_all = (sig * keep_rows).sum(axis=1) + 0.5
    rank_pos = (sig * pos_rows).sum(axis=1) + 0.5
    ratio = rank_pos / rank_all                               # (Npairs,)

    pos_per_q = np.bincount(q_idx, minlength=nq).astype(sig.data.dtype)
    w = 1.0 / pos_per_q[q_idx]                                # mean over each query's positives
    if gate_reliability:
        r_pairs = r_all[q_idx]
        gained = (ratio * r_pairs * w).sum() + kappa * (float(nq) - r_all.sum())
    else:
        gained = (ratio * w).sum()
    return 1.0 - gained * (1.0 / nq)


def total_loss(outputs1, outputs2, U: np.ndarray, valid: np.ndarray,
               cfg: LossConfig, include_repeatability: bool = True,
               gate_reliability: bool = True) -> TotalLossResult:
    """Repeatability term plus the mean reliability-gated AP loss over
    sampled queries; reliability is read from image 1's map at each
    query pixel.  The ablation switches drop the repeatability term
    (detector trained by reliability alone) or pin R to 1 (plain AP
    loss on every query)."""
    S1, S2 = outputs1.S, outputs2.S
    h, w = S1.data.shape
    vmask = valid & _inbounds(U, S2.data.shape)

    batch = sample_training_batch(None, U, vmask, outputs1.X, outputs2.X, cfg)
    qx, qy = batch.query_xy[:, 0], batch.query_xy[:, 1]
    r_all = outputs1.R[(qy, qx)]  # (Nq,)
    nq = batch.query_xy.shape[0]
    l_ap = _gated_ap_loss(batch, r_all, cfg.q_bins, cfg.kappa, gate_reliability)

    if include_repeatability:
        coords = np.clip(U.reshape(-1, 2), 0.0, None)
        warped = bilinear_sample(S2, coords).reshape(h, w)
        lc = cosim_loss(S1, warped, vmask, cfg.patch_size)
        lp1 = peakiness_loss(S1, cfg.patch_size)
        lp2 = peakiness_loss(S2, cfg.patch_size)
        total = lc + cfg.peaky_weight * (lp1 + lp2) + l_ap
        return TotalLossResult(total=total, l_cosim=lc.item(),
                               l_peaky_1=lp1.item(), l_peaky_2=lp2.item(),
                               l_ap_mean=l_ap.item(), n_queries=nq)
    return TotalLossResult(total=l_ap, l_cosim=0.0, l_peaky_1=0.0,
                           l_peaky_2=0.0, l_ap_mean=l_ap.item(), n_queries=nq)
