"""Built-in verification: gradient suite and oracle checks.

Run via the CLI selfcheck subcommand (exit 3 on any failure) and
re-used verbatim by the acceptance test suite.  Gradient checks are
central finite differences in float64 with inputs constructed away from
non-differentiable points; oracle checks compare implementations
against hand-computed values and an exact-AP reference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .extract import Keypoint, KeypointSet
from .gradcheck import (LOSS_TOL, PRIMITIVE_TOL, _spread, gradcheck,
                        run_primitive_suite)
from .losses import (LossConfig, ap_kappa_loss, cosim_loss, exact_ap,
                     peakiness_loss, repeatability_loss, soft_ap)
from .metrics import matching_score, mma, mutual_nn_match, repeatability_score
from .optim import adam_init, adam_step


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


# ---------------------------------------------------------------------
# frozen random AP instances (the soft-vs-exact oracle population)
# ---------------------------------------------------------------------

def ap_instance(index: int, n_db: int = 20, dim: int = 8):
    """Deterministic ranking instance #index: clustered positives on
    even indices, spread-angle instances with random labels on odd
    (the near-tie stress case).  Returns (query, database, labels)."""
    rng = np.random.default_rng([12345, index])
    n_pos = int(rng.integers(2, 6))
    q = rng.normal(size=dim)
    q /= np.linalg.norm(q)
    if index % 2 == 0:
        pos = q[None] + 0.35 * rng.normal(size=(n_pos, dim))
        neg = rng.normal(size=(n_db - n_pos, dim))
        db = np.vstack([pos / np.linalg.norm(pos, axis=1, keepdims=True),
                        neg / np.linalg.norm(neg, axis=1, keepdims=True)])
        labels = np.concatenate([np.ones(n_pos, int), np.zeros(n_db - n_pos, int)])
        perm = rng.permutation(n_db)
        return q, db[perm], labels[perm]
    thetas = rng.uniform(0.15, np.pi - 0.15, n_db)
    raw = rng.normal(size=(n_db, dim))
    raw -= (raw @ q)[:, None] * q[None]
    u = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    db = np.cos(thetas)[:, None] * q[None] + np.sin(thetas)[:, None] * u
    labels = np.zeros(n_db, int)
    labels[rng.choice(n_db, n_pos, replace=False)] = 1
    return q, db, labels


def exact_ap_of_instance(q, db, labels) -> float:
    d = np.linalg.norm(db - q, axis=1)
    order = np.lexsort((np.arange(len(d)), d))  # distance asc, index tiebreak
    return exact_ap(labels[order])


def ap_oracle_stats(count: int = 1000, Q: int = 25):
    errs = np.empty(count)
    for t in range(count):
        q, db, labels = ap_instance(t)
        s = soft_ap(Tensor(q), Tensor(db), labels, Q).item()
        errs[t] = abs(s - exact_ap_of_instance(q, db, labels))
    return float(errs.mean()), float(errs.max())


# ---------------------------------------------------------------------
# FD-safe loss instances
# ---------------------------------------------------------------------

def _ap_check_instance(rng, n_db: int = 12, dim: int = 8, n_pos: int = 3):
    """Unit-norm descriptors with distances well inside (0, 2): smooth
    everywhere for the h = 1e-5 probes."""
    q = rng.normal(size=dim)
    q /= np.linalg.norm(q)
    thetas = rng.uniform(0.35, 2.4, n_db)
    raw = rng.normal(size=(n_db, dim))
    raw -= (raw @ q)[:, None] * q[None]
    u = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    db = np.cos(thetas)[:, None] * q[None] + np.sin(thetas)[:, None] * u
    labels = np.zeros(n_db, int)
    labels[rng.choice(n_db, n_pos, replace=False)] = 1
    return q, db, labels


def loss_gradient_checks(trials: int = 20):
    """Yield (name, worst_rel_err) over `trials` seeded instances per
    loss; compare against LOSS_TOL."""
    cfg = LossConfig(patch_size=6, q_bins=25)

    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([77, t])
        S = rng.uniform(0.2, 1.0, (12, 12))
        Sw = rng.uniform(0.2, 1.0, (12, 12))
        valid = rng.uniform(0, 1, (12, 12)) > (0.15 if t % 2 else -1.0)
        worst = max(worst, gradcheck(
            lambda a, b: cosim_loss(a, b, valid, 6), [S, Sw]))
    yield "loss.cosim", worst

    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([78, t])
        S = _spread(rng, (12, 12)) / 2.0
        worst = max(worst, gradcheck(lambda a: peakiness_loss(a, 6), [S]))
    yield "loss.peakiness", worst

    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([79, t])
        S = _spread(rng, (12, 12)) / 2.2
        Sp = _spread(rng, (12, 12)) / 2.2
        ys, xs = np.mgrid[0:12, 0:12].astype(np.float64)
        U = np.stack([xs + rng.uniform(0.25, 0.72),
                      ys + rng.uniform(0.25, 0.72)], axis=-1)
        valid = np.ones((12, 12), bool)
        worst = max(worst, gradcheck(
            lambda a, b: repeatability_loss(a, b, U, valid, cfg), [S, Sp]))
    yield "loss.repeatability", worst

    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([80, t])
        q, db, labels = _ap_check_instance(rng)
        worst = max(worst, gradcheck(
            lambda a, b: soft_ap(a, b, labels, 25), [q, db], h=1e-5))
    yield "loss.soft_ap", worst

    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([81, t])
        q, db, labels = _ap_check_instance(rng)
        r = np.asarray(rng.uniform(0.2, 0.8))
        worst = max(worst, gradcheck(
            lambda a, b, c: ap_kappa_loss(soft_ap(a, b, labels, 25), c, 0.5),
            [q, db, r], h=1e-5))
    yield "loss.ap_kappa_gated", worst


def run_gradient_suite(trials: int = 20):
    """Primitive + loss gradient checks; returns (results, elapsed_s)."""
    t0 = time.time()
    results = []
    for name, err, passed in run_primitive_suite(trials=trials, seed=0):
        results.append(CheckResult(f"primitive.{name}", passed,
                                   f"max rel err {err:.2e} (tol {PRIMITIVE_TOL:g})"))
    for name, err in loss_gradient_checks(trials=trials):
        results.append(CheckResult(name, err <= LOSS_TOL,
                                   f"max rel err {err:.2e} (tol {LOSS_TOL:g})"))
    return results, time.time() - t0


# ---------------------------------------------------------------------
# oracle checks
# ---------------------------------------------------------------------

def _close(a, b, tol=1e-6):
    return abs(a - b) <= tol


def oracle_checks(ap_instances: int = 1000):
    results = []

    # exact_ap hand cases
    cases = [([1, 0, 0], 1.0), ([0, 1], 0.5), ([1, 0, 1], (1.0 + 2.0 / 3.0) / 2.0)]
    ok = all(_close(exact_ap(c), v, 1e-12) for c, v in cases)
    results.append(CheckResult("oracle.exact_ap_hand_cases", ok,
                               "[1,0,0]->1, [0,1]->0.5, [1,0,1]->0.8333"))

    # soft vs exact over the frozen population
    mean_err, max_err = ap_oracle_stats(ap_instances)
    results.append(CheckResult(
        "oracle.soft_ap_population", mean_err <= 0.05 and max_err <= 0.15,
        f"mean {mean_err:.4f} (<=0.05), max {max_err:.4f} (<=0.15) over {ap_instances}"))

    # separated-instance identity and single-positive identity
    e = np.zeros(8)
    e[0] = 1.0
    neg = -np.tile(e, (4, 1))
    db = np.vstack([np.tile(e, (3, 1)), neg])
    sep = soft_ap(Tensor(e), Tensor(db), np.array([1, 1, 1, 0, 0, 0, 0]), 25).item()
    single = soft_ap(Tensor(e), Tensor(e[None]), np.array([1]), 25).item()
    results.append(CheckResult("oracle.soft_ap_identities",
                               sep >= 0.999 and _close(single, 1.0),
                               f"separated {sep:.6f} (>=0.999), single-positive {single}"))

    # loss limit identities
    rng = np.random.default_rng(3)
    S = Tensor(rng.uniform(0.1, 0.9, (24, 24)))
    allv = np.ones((24, 24), bool)
    i1 = cosim_loss(S, S, allv, 16).item()
    i2 = peakiness_loss(Tensor(np.full((20, 20), 0.3)), 16).item()
    spike = np.zeros((16, 16))
    spike[5, 11] = 1.0
    i3 = peakiness_loss(Tensor(spike), 16).item()
    i4 = ap_kappa_loss(0.123, 0.0, 0.5).item()
    const = Tensor(np.full((20, 20), 0.4))
    ys, xs = np.mgrid[0:20, 0:20].astype(np.float64)
    U_id = np.stack([xs, ys], axis=-1)
    i5 = repeatability_loss(const, const, U_id, allv[:20, :20],
                            LossConfig(patch_size=16, peaky_weight=0.5)).item()
    ok = (_close(i1, 0.0) and _close(i2, 1.0) and _close(i3, 1.0 / 256.0)
          and _close(i4, 0.5) and _close(i5, 1.0))
    results.append(CheckResult(
        "oracle.loss_identities", ok,
        f"cosim(S,S)={i1:.2e}, peaky(const)={i2:.8f}, spike={i3:.8f} "
        f"(1/256={1 / 256:.8f}), apk(R=0)={i4}, rep(const,id)={i5:.8f}"))

    # Adam first-step hand case (with and without weight decay)
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([0.5])
    st = adam_init([p], lr=0.001, weight_decay=0.0)
    adam_step([p], st)
    want = 1.0 - 0.001 * 0.5 / (0.5 + 1e-8)
    ok1 = _close(float(p.data[0]), want, 1e-12)
    p2 = Tensor(np.array([2.0]), requires_grad=True)
    p2.grad = np.array([0.5])
    st2 = adam_init([p2], lr=0.001, weight_decay=0.0005)
    adam_step([p2], st2)
    g = 0.5 + 0.0005 * 2.0
    want2 = 2.0 - 0.001 * g / (g + 1e-8)
    ok2 = _close(float(p2.data[0]), want2, 1e-12)
    results.append(CheckResult("oracle.adam_first_step", ok1 and ok2,
                               f"plain {float(p.data[0]):.9f} vs {want:.9f}; "
                               f"decayed {float(p2.data[0]):.9f} vs {want2:.9f}"))

    results.extend(metric_hand_checks())
    return results


def _kset(coords, descs, hw=(64, 64)):
    kps = [Keypoint(x=float(c[0]), y=float(c[1]), scale=1.0, score=0.9,
                    descriptor=np.asarray(d, np.float32))
           for c, d in zip(coords, descs)]
    return KeypointSet(keypoints=kps, image_hw=hw)


def metric_hand_checks():
    I3 = np.eye(3)
    e = np.eye(10)

    def unit(v):
        v = np.asarray(v, np.float64)
        return v / np.linalg.norm(v)

    results = []

    # mutual NN: a1's NN is b1, but b1 prefers a2 -> (a1, b1) excluded
    A = _kset([(1, 1), (2, 2)], [unit([1, 0.3, 0]), unit([1, 0.05, 0])])
    B = _kset([(5, 5), (6, 6)], [unit([1, 0, 0]), unit([0, 1, 0])])
    m = mutual_nn_match(A, B)
    ok = list(zip(m.a_idx.tolist(), m.b_idx.tolist())) == [(1, 0)]
    results.append(CheckResult("oracle.mutual_nn_exclusion", ok,
                               f"matches {list(zip(m.a_idx.tolist(), m.b_idx.tolist()))}"))

    # repeatability 2/3: 3 vs 4 keypoints, exactly 2 within tol
    A = _kset([(10, 10), (20, 20), (30, 30)], [e[i] for i in range(3)])
    B = _kset([(10.5, 10), (20, 21), (50, 50), (55, 55)], [e[i] for i in range(4)])
    rep = repeatability_score(A, B, I3, 2.0)
    results.append(CheckResult("oracle.repeatability_two_thirds",
                               _close(rep, 2.0 / 3.0, 1e-12), f"{rep}"))

    # MMA 3/4 at t = 3 with errors {0.5, 1.5, 2.5, 9}
    A = _kset([(0, 0), (10, 0), (20, 0), (30, 0)], [e[i] for i in range(4)])
    B = _kset([(0.5, 0), (11.5, 0), (22.5, 0), (39, 0)], [e[i] for i in range(4)])
    r = mma(mutual_nn_match(A, B), A, B, I3, [3.0])
    results.append(CheckResult("oracle.mma_three_quarters",
                               _close(r[3.0], 0.75, 1e-12), f"{r[3.0]}"))

    # M-score 0.4: 10 shared features, 4 correct per direction
    coords = [(5.0 + 5 * i, 10.0) for i in range(10)]
    descs = [e[i] for i in range(10)]
    bcoords = [c if i < 4 else (c[0], c[1] + 20) for i, c in enumerate(coords)]
    ms = matching_score(_kset(coords, descs), _kset(bcoords, descs), I3, 3.0)
    results.append(CheckResult("oracle.m_score_two_fifths",
                               ms.status == "ok" and _close(ms.value, 0.4, 1e-12),
                               f"{ms.status} {ms.value}"))
    return results


# ---------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------

def run_selfcheck(trials: int = 20, ap_instances: int = 1000):
    """-> (results, gradient_suite_seconds)."""
    grad_results, elapsed = run_gradient_suite(trials=trials)
    results = grad_results + oracle_checks(ap_instances=ap_instances)
    return results, elapsed


def format_report(results, elapsed: float) -> str:
    lines = []
    for r in results:
        lines.append(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"gradient suite wall time: {elapsed:.1f}s")
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
