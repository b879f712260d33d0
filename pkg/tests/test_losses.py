"""Training objectives: limit identities, hand-built batch geometry,
vectorized-vs-loop AP agreement, and descent sanity."""

import numpy as np
import pytest

from relfeat.autograd import Tensor, backward
from relfeat.losses import (
    LossConfig,
    TEMP_REFINE,
    UnusablePair,
    _gated_ap_loss,
    ap_kappa_loss,
    cosim_loss,
    exact_ap,
    peakiness_loss,
    repeatability_loss,
    sample_training_batch,
    soft_ap,
    total_loss,
)


class Outputs:
    """Stands in for a network forward result."""

    def __init__(self, S, X, R):
        self.S, self.X, self.R = Tensor(S), Tensor(X), Tensor(R)


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def identity_field(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


# ---------------------------------------------------------------------
# repeatability terms
# ---------------------------------------------------------------------

def test_cosim_identical_heatmaps_is_zero():
    rng = np.random.default_rng(0)
    S = rng.uniform(0.1, 1.0, (24, 24))
    valid = np.ones((24, 24), bool)
    assert abs(cosim_loss(S, S, valid, 8).item()) <= 1e-6
    valid[5:15, :] = False
    assert abs(cosim_loss(S, S, valid, 8).item()) <= 1e-6


def test_cosim_disjoint_support_is_one():
    S = np.zeros((16, 16))
    Sp = np.zeros((16, 16))
    S[2, 2] = 1.0
    Sp[9, 9] = 1.0  # never shares a pixel of support with S per patch? it does
    # disjoint support per pixel: dot is 0 in every patch regardless
    valid = np.ones((16, 16), bool)
    assert abs(cosim_loss(S, Sp, valid, 4).item() - 1.0) <= 1e-6


def test_cosim_input_validation():
    S = np.ones((8, 8))
    with pytest.raises(UnusablePair):
        cosim_loss(S, S, np.zeros((8, 8), bool), 4)
    with pytest.raises(ValueError):
        cosim_loss(S, np.ones((8, 9)), np.ones((8, 8), bool), 4)
    with pytest.raises(ValueError):
        cosim_loss(S, S, np.ones((8, 8), bool), 9)


def test_cosim_zero_region_stays_finite():
    # float32 integral images can round window sums of squares negative
    S = Tensor(np.zeros((32, 32), dtype=np.float32), requires_grad=True)
    S.data[0, 0] = 1.0
    out = cosim_loss(S, S.data.copy(), np.ones((32, 32), bool), 8)
    assert np.isfinite(out.item())
    backward(out)
    assert np.isfinite(S.grad).all()


def test_peakiness_limits():
    assert abs(peakiness_loss(np.full((20, 20), 0.37), 8).item() - 1.0) <= 1e-6
    spike = np.zeros((16, 16))
    spike[7, 7] = 1.0
    assert abs(peakiness_loss(spike, 16).item() - 1.0 / 256.0) <= 1e-6
    rng = np.random.default_rng(1)
    val = peakiness_loss(rng.uniform(0, 1, (30, 30)), 8).item()
    assert 0.0 <= val <= 1.0
    with pytest.raises(ValueError):
        peakiness_loss(np.ones((8, 8)), 16)


def test_repeatability_identity_flow_reduces_to_peakiness():
    rng = np.random.default_rng(2)
    S = rng.uniform(0.05, 0.95, (24, 24))
    cfg = LossConfig(patch_size=8)
    U = identity_field(24, 24)
    valid = np.ones((24, 24), bool)
    got = repeatability_loss(S, S.copy(), U, valid, cfg).item()
    want = 2.0 * cfg.peaky_weight * peakiness_loss(S, 8).item()
    assert abs(got - want) <= 1e-9
    # constant heatmaps under identity flow: cosine 1, peakiness 1 each
    const = np.full((24, 24), 0.5)
    got = repeatability_loss(const, const.copy(), U, valid, cfg).item()
    assert abs(got - 1.0) <= 1e-6


def test_repeatability_peaky_weight_zero_isolates_cosim():
    rng = np.random.default_rng(3)
    S = rng.uniform(0.05, 0.95, (24, 24))
    Sp = rng.uniform(0.05, 0.95, (24, 24))
    cfg = LossConfig(patch_size=8, peaky_weight=0.0)
    U = identity_field(24, 24)
    valid = np.ones((24, 24), bool)
    got = repeatability_loss(S, Sp, U, valid, cfg).item()
    want = cosim_loss(S, Sp, valid, 8).item()
    assert abs(got - want) <= 1e-9


# ---------------------------------------------------------------------
# AP pieces
# ---------------------------------------------------------------------

def test_exact_ap_hand_cases():
    assert exact_ap([1, 0, 0]) == 1.0
    assert exact_ap([0, 1]) == 0.5
    assert abs(exact_ap([1, 0, 1]) - (1.0 + 2.0 / 3.0) / 2.0) <= 1e-12
    with pytest.raises(ValueError):
        exact_ap([])
    with pytest.raises(ValueError):
        exact_ap([0, 0])
    with pytest.raises(ValueError):
        exact_ap([1, 2])


def test_soft_ap_exact_when_separated():
    # distances spaced far beyond tau saturate every sigmoid
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(20):
        n, Q = 10, 25
        # spacing stays far beyond tau = 2 / ((Q-1) * TEMP_REFINE)
        thetas = np.linspace(0.3, 2.4, n) + rng.uniform(-0.05, 0.05, n)
        labels = np.zeros(n, dtype=np.uint8)
        labels[rng.choice(n, 3, replace=False)] = 1
        q = np.zeros(8)
        q[0] = 1.0
        db = np.zeros((n, 8))
        db[:, 0] = np.cos(thetas)
        db[:, 1] = np.sin(thetas)
        order = np.argsort(2.0 - 2.0 * np.cos(thetas))
        want = exact_ap(labels[order])
        got = soft_ap(q, db, labels, Q).item()
        worst = max(worst, abs(got - want))
    assert worst <= 1e-3


def test_soft_ap_single_positive_far_negatives():
    q = np.array([1.0, 0.0])
    db = np.array([[np.cos(0.3), np.sin(0.3)],
                   [np.cos(1.5), np.sin(1.5)],
                   [np.cos(2.5), np.sin(2.5)]])
    assert abs(soft_ap(q, db, [1, 0, 0], 25).item() - 1.0) <= 1e-6
    assert abs(soft_ap(q, db, [0, 0, 1], 25).item() - 1.0 / 3.0) <= 1e-6


def test_soft_ap_validation():
    q = np.array([1.0, 0.0])
    db = np.eye(2)
    with pytest.raises(ValueError):
        soft_ap(q * 2.0, db, [1, 0], 25)
    with pytest.raises(ValueError):
        soft_ap(q, db * 0.5, [1, 0], 25)
    with pytest.raises(ValueError):
        soft_ap(q, db, [0, 0], 25)
    with pytest.raises(ValueError):
        soft_ap(q, db, [1, 0], 1)
    with pytest.raises(ValueError):
        soft_ap(q, np.eye(3), [1, 0, 0], 25)
    with pytest.raises(ValueError):
        soft_ap(q, db, [1, 0, 0], 25)


def test_ap_kappa_identities():
    assert abs(ap_kappa_loss(0.77, 0.0, 0.5).item() - 0.5) <= 1e-6
    assert abs(ap_kappa_loss(0.77, 1.0, 0.5).item() - 0.23) <= 1e-6
    assert abs(ap_kappa_loss(0.6, 0.25, 0.0).item() - (1.0 - 0.15)) <= 1e-9
    with pytest.raises(ValueError):
        ap_kappa_loss(1.2, 0.5, 0.5)
    with pytest.raises(ValueError):
        ap_kappa_loss(0.5, -0.2, 0.5)
    with pytest.raises(ValueError):
        ap_kappa_loss(0.5, 0.5, 1.5)


# ---------------------------------------------------------------------
# batch sampling geometry
# ---------------------------------------------------------------------

def test_batch_radius_rules():
    h = w = 32
    rng = np.random.default_rng(5)
    X1 = unit_rows(rng, h * w, 4).reshape(h, w, 4)
    X2 = unit_rows(rng, h * w, 4).reshape(h, w, 4)
    valid = np.zeros((h, w), bool)
    valid[4, 4] = True  # exactly one grid query at (x=4, y=4)
    U = np.zeros((h, w, 2))
    U[4, 4] = (15.0, 4.0)
    cfg = LossConfig()  # positive 4 px, negative 8 px, grid step 8
    batch = sample_training_batch(None, U, valid, X1, X2, cfg)
    assert batch.query_xy.tolist() == [[4, 4]]
    labels, keep = batch.labels[0], batch.keep[0]
    by_xy = {tuple(p): i for i, p in enumerate(batch.db_xy.tolist())}
    # rounded target: distance 0 -> positive
    assert labels[0] == 1 and keep[0]
    # grid point 3 px from the target -> positive
    i = by_xy[(12, 4)]
    assert labels[i] == 1 and keep[i]
    # 5 px lands between the radii -> dropped
    i = by_xy[(20, 4)]
    assert labels[i] == 0 and not keep[i]
    # 11 px and beyond -> negatives
    for xy in [(4, 4), (28, 4), (12, 12)]:
        i = by_xy[xy]
        assert labels[i] == 0 and keep[i]


def test_batch_grid_covers_standard_crop():
    h = w = 192
    rng = np.random.default_rng(6)
    X = unit_rows(rng, h * w, 2).reshape(h, w, 2)
    U = identity_field(h, w)
    batch = sample_training_batch(None, U, np.ones((h, w), bool), X, X,
                                  LossConfig())
    assert batch.query_xy.shape == (576, 2)  # 24 x 24 grid at stride 8
    assert batch.query_valid.all()
    assert batch.db_xy.shape == (2 * 576, 2)
    # identity flow: every query's own target is its first positive
    assert batch.labels[np.arange(576), np.arange(576)].all()


def test_batch_requires_valid_queries():
    X = np.ones((16, 16, 2)) / np.sqrt(2.0)
    with pytest.raises(UnusablePair):
        sample_training_batch(None, identity_field(16, 16),
                              np.zeros((16, 16), bool), X, X, LossConfig())


def test_batch_image_shape_check():
    X = np.ones((16, 16, 2)) / np.sqrt(2.0)
    pair = (np.zeros((8, 8, 3)), np.zeros((16, 16, 3)))
    with pytest.raises(ValueError):
        sample_training_batch(pair, identity_field(16, 16),
                              np.ones((16, 16), bool), X, X, LossConfig())


# ---------------------------------------------------------------------
# vectorized AP against the per-query loop
# ---------------------------------------------------------------------

def make_batch(dtype, seed=7, h=24, w=24):
    rng = np.random.default_rng(seed)
    X1 = unit_rows(rng, h * w, 6).reshape(h, w, 6).astype(dtype)
    X2 = unit_rows(rng, h * w, 6).reshape(h, w, 6).astype(dtype)
    U = identity_field(h, w) + rng.uniform(-5.0, 5.0, (h, w, 2))
    U = np.clip(U, 0.0, w - 1.0)
    valid = np.ones((h, w), bool)
    batch = sample_training_batch(None, U, valid, X1, X2, LossConfig(q_bins=7))
    r = rng.uniform(0.2, 0.8, batch.labels.shape[0]).astype(dtype)
    return batch, r


def loop_gated_loss(batch, r, Q, kappa):
    total = 0.0
    nq = batch.labels.shape[0]
    for qi in range(nq):
        kept = batch.keep[qi]
        labels = batch.labels[qi][kept]
        if labels.sum() == 0:
            ap = 0.0
        else:
            ap = soft_ap(Tensor(batch.query_desc.data[qi].astype(np.float64)),
                         Tensor(batch.db_desc.data[kept].astype(np.float64)),
                         labels, Q).item()
        total += ap * r[qi] + kappa * (1.0 - r[qi])
    return 1.0 - total / nq


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-9), (np.float32, 1e-5)])
def test_gated_ap_matches_loop(dtype, tol):
    batch, r = make_batch(dtype)
    assert (~batch.keep).any(), "fixture should drop some pairs"
    got = _gated_ap_loss(batch, Tensor(r), 7, 0.5, True).item()
    want = loop_gated_loss(batch, r.astype(np.float64), 7, 0.5)
    assert abs(got - want) <= tol


def test_ungated_equals_reliability_one():
    batch, r = make_batch(np.float64, seed=8)
    ungated = _gated_ap_loss(batch, Tensor(r), 7, 0.5, False).item()
    pinned = _gated_ap_loss(batch, Tensor(np.ones_like(r)), 7, 0.5, True).item()
    assert abs(ungated - pinned) <= 1e-12
    assert abs(ungated - loop_gated_loss(batch, np.ones_like(r), 7, 0.5)) <= 1e-9


# ---------------------------------------------------------------------
# total loss composition
# ---------------------------------------------------------------------

def make_outputs(seed, h=24, w=24, d=6):
    rng = np.random.default_rng(seed)
    S = rng.uniform(0.05, 0.95, (h, w))
    X = unit_rows(rng, h * w, d).reshape(h, w, d)
    R = rng.uniform(0.1, 0.9, (h, w))
    return Outputs(S, X, R)


def test_total_loss_composes_its_terms():
    o1, o2 = make_outputs(10), make_outputs(11)
    h, w = 24, 24
    rng = np.random.default_rng(12)
    U = np.clip(identity_field(h, w) + rng.uniform(-4, 4, (h, w, 2)), 0, w - 1)
    valid = np.ones((h, w), bool)
    cfg = LossConfig(patch_size=8, q_bins=7)
    res = total_loss(o1, o2, U, valid, cfg)
    want = (res.l_cosim + cfg.peaky_weight * (res.l_peaky_1 + res.l_peaky_2)
            + res.l_ap_mean)
    assert abs(res.total.item() - want) <= 1e-7
    assert res.n_queries == 9
    # ablation: no repeatability term
    res2 = total_loss(o1, o2, U, valid, cfg, include_repeatability=False)
    assert res2.l_cosim == 0.0 and res2.l_peaky_1 == 0.0
    assert abs(res2.total.item() - res2.l_ap_mean) <= 1e-12
    # ablation: ungated AP changes the value in general
    res3 = total_loss(o1, o2, U, valid, cfg, gate_reliability=False)
    assert abs(res3.l_ap_mean - res.l_ap_mean) > 1e-6


def test_total_loss_bounds():
    for seed in range(3):
        o1, o2 = make_outputs(20 + seed), make_outputs(40 + seed)
        U = identity_field(24, 24)
        res = total_loss(o1, o2, U, np.ones((24, 24), bool),
                         LossConfig(patch_size=8, q_bins=7))
        assert 0.0 <= res.l_ap_mean <= 1.0
        assert 0.0 <= res.l_cosim <= 2.0
        assert 0.0 <= res.l_peaky_1 <= 1.0
        assert np.isfinite(res.total.item())


# ---------------------------------------------------------------------
# gradients actually descend
# ---------------------------------------------------------------------

def test_one_step_descent_per_loss():
    wins = {"peaky": 0, "cosim": 0, "soft_ap": 0}
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)

        S0 = rng.uniform(0.2, 0.8, (16, 16))
        t = Tensor(S0.copy(), requires_grad=True)
        l0 = peakiness_loss(t, 8)
        backward(l0)
        l1 = peakiness_loss(np.clip(S0 - 0.05 * t.grad, 0, 1), 8)
        wins["peaky"] += l1.item() < l0.item()

        Sp = rng.uniform(0.2, 0.8, (16, 16))
        valid = np.ones((16, 16), bool)
        t = Tensor(S0.copy(), requires_grad=True)
        l0 = cosim_loss(t, Sp, valid, 8)
        backward(l0)
        l1 = cosim_loss(S0 - 0.05 * t.grad, Sp, valid, 8)
        wins["cosim"] += l1.item() < l0.item()

        thetas = rng.uniform(0.4, 2.2, 12)
        labels = np.zeros(12, dtype=np.uint8)
        labels[rng.choice(12, 3, replace=False)] = 1
        db = np.zeros((12, 4))
        db[:, 0], db[:, 1] = np.cos(thetas), np.sin(thetas)
        q0 = np.array([np.cos(0.2), np.sin(0.2), 0.0, 0.0])
        t = Tensor(q0.copy(), requires_grad=True)
        l0 = 1.0 - soft_ap(t, db, labels, 5)
        backward(l0)
        q1 = q0 - 0.05 * t.grad
        q1 /= np.linalg.norm(q1)
        l1 = 1.0 - soft_ap(q1, db, labels, 5)
        wins["soft_ap"] += l1.item() < l0.item()

    for name, n in wins.items():
        assert n >= 8, f"{name}: descent won only {n}/10 trials"
