import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rince_lab.analysis import (
    NegativeModel,
    PenaltyQuery,
    curve_flags,
    equilibrium_curve,
    k_grid,
    relative_penalty,
    solve_root,
    tradeoff_k,
)
from rince_lab.losses import SimilarityBatch, TemperatureSchedule, log_in, rince


def _ratio_oracle(q: PenaltyQuery, which: str, target: int) -> float:
    p2, neg = list(q.p2), list(q.negatives)
    if which == "n_wrt_p2":
        res = log_in(SimilarityBatch((tuple(p2),), tuple(neg)), q.tau2)
        return abs(res.grad_negatives[target]) / abs(res.grad_positives_by_rank[0][0])
    res = log_in(SimilarityBatch(((q.p1,),), tuple(p2 + neg)), q.tau1)
    idx = target if which == "p2_wrt_p1" else len(p2) + target
    return abs(res.grad_negatives[idx]) / abs(res.grad_positives_by_rank[0][0])


def _random_query(rng, n_p2=None, n_neg=None):
    n_p2 = int(rng.integers(1, 4)) if n_p2 is None else n_p2
    n_neg = int(rng.integers(2, 20)) if n_neg is None else n_neg
    tau1 = rng.uniform(0.05, 0.3)
    return PenaltyQuery(
        rng.uniform(-1, 1), tuple(rng.uniform(-1, 1, n_p2)), tuple(rng.uniform(-1, 1, n_neg)),
        tau1, tau1 + rng.uniform(0.01, 0.6),
    )


def test_literal_penalty_equal_negatives_is_one():
    q = PenaltyQuery(0.8, (0.5,), (0.2, 0.2), 0.1, 0.2)
    assert relative_penalty(q, "n_wrt_p2", 0, literal=True) == pytest.approx(1.0, abs=1e-15)


def test_gradient_penalty_equal_negatives_is_share():
    q = PenaltyQuery(0.8, (0.5,), (0.2, 0.2), 0.1, 0.2)
    assert relative_penalty(q, "n_wrt_p2", 0) == pytest.approx(0.5, abs=1e-15)


def test_literal_single_negative_errors():
    q = PenaltyQuery(0.8, (0.5,), (0.2,), 0.1, 0.2)
    with pytest.raises(ValueError, match="empty"):
        relative_penalty(q, "n_wrt_p2", 0, literal=True)


@pytest.mark.parametrize("which", ["n_wrt_p2", "n_wrt_p1", "p2_wrt_p1"])
@pytest.mark.parametrize("literal", [False, True])
def test_penalty_increasing_in_target(which, literal):
    base = PenaltyQuery(0.9, (0.4, 0.3), (0.1, -0.2, 0.05), 0.1, 0.2)
    vals = []
    for s in np.linspace(-0.9, 0.9, 30):
        if which == "p2_wrt_p1":
            q = PenaltyQuery(base.p1, (s, 0.3), base.negatives, 0.1, 0.2)
        else:
            q = PenaltyQuery(base.p1, base.p2, (s, -0.2, 0.05), 0.1, 0.2)
        vals.append(relative_penalty(q, which, 0, literal=literal))
    assert np.all(np.diff(vals) > 0)


@pytest.mark.parametrize("which", ["n_wrt_p2", "n_wrt_p1", "p2_wrt_p1"])
def test_penalty_matches_gradient_ratio(which):
    rng = np.random.default_rng(2)
    for _ in range(200):
        q = _random_query(rng)
        target = int(rng.integers(0, len(q.p2) if which == "p2_wrt_p1" else len(q.negatives)))
        assert relative_penalty(q, which, target) == pytest.approx(_ratio_oracle(q, which, target), rel=1e-10)


def test_penalty_bad_inputs():
    q = PenaltyQuery(0.8, (0.5,), (0.2, 0.1), 0.1, 0.2)
    with pytest.raises(ValueError):
        relative_penalty(q, "bogus", 0)
    with pytest.raises(IndexError):
        relative_penalty(q, "n_wrt_p1", 5)


def test_k_limits():
    neg = np.full(16, 0.1)
    assert tradeoff_k(0.5, -1.0, neg, 0.1, 0.2) < 0
    assert tradeoff_k(0.5, 1.0, neg, 0.05, 0.5) > 0


def test_k_equals_signed_gradient_sum():
    rng = np.random.default_rng(4)
    for _ in range(300):
        h1, h2 = rng.uniform(-1, 1, 2)
        neg = rng.uniform(-1, 1, int(rng.integers(1, 30)))
        t1 = rng.uniform(0.05, 0.3)
        t2 = t1 + rng.uniform(0.01, 0.6)
        res = rince(SimilarityBatch(((h1,), (h2,)), tuple(neg)), TemperatureSchedule((t1, t2)), "rince_in")
        assert tradeoff_k(h1, h2, neg, t1, t2) == pytest.approx(res.grad_positives_by_rank[1][0], rel=1e-10, abs=1e-14)


def test_k_with_extra_rank2_matches_term_gradients():
    neg = [0.1, 0.0, -0.3]
    h1, h2, other = 0.8, 0.5, 0.35
    push = log_in(SimilarityBatch(((h1,),), (h2, other, *neg)), 0.1).grad_negatives[0]
    pull = log_in(SimilarityBatch(((h2,),), tuple(neg)), 0.2).grad_positives_by_rank[0][0]
    k = tradeoff_k(h1, h2, neg, 0.1, 0.2, extra_p2=[other])
    assert k == pytest.approx(push + pull, rel=1e-12)
    assert k < tradeoff_k(h1, h2, neg, 0.1, 0.2)


@given(st.floats(-1, 1), st.floats(0.05, 0.3), st.floats(0.01, 0.6), st.integers(0, 2**31))
def test_k_strictly_increasing_in_h2(h1, t1, dt, seed):
    neg = np.random.default_rng(seed).normal(0.1, 0.1, 16).clip(-1, 1)
    h2 = np.linspace(-1, 1, 50)
    ks = [tradeoff_k(h1, x, neg, t1, t1 + dt) for x in h2]
    assert np.all(np.diff(ks) > 0)


def test_k_grid_shape():
    h = np.round(np.arange(-1, 1.0001, 0.01), 10)
    g = k_grid(0.1, 0.2, h[:5], h, NegativeModel().draw()[0])
    assert g.shape == (5, 201)


@pytest.mark.parametrize("mode", ["sample", "expectation"])
def test_k_grid_matches_scalar(mode):
    neg, lw = NegativeModel(mode=mode, count=12).draw()
    h = np.linspace(-1, 1, 9)
    g = k_grid(0.1, 0.7, h, h, neg, lw)
    ref = [[tradeoff_k(a, b, neg, 0.1, 0.7, neg_log_weights=lw) for b in h] for a in h]
    np.testing.assert_allclose(g, ref, rtol=1e-12, atol=1e-14)


def test_solve_root_no_sign_change():
    # one negative at -1, h1=-1: push 10/3 beats pull 1 even at h2=-1
    assert tradeoff_k(-1.0, -1.0, [-1.0], 0.1, 0.5) > 0
    assert np.isnan(solve_root(-1.0, [-1.0], 0.1, 0.5))
    neg = np.full(4, 0.1)
    r = solve_root(0.8, neg, 0.1, 0.2)
    assert abs(tradeoff_k(0.8, r, neg, 0.1, 0.2)) < 1e-6


def test_equilibrium_unique_root_by_sign_scan():
    neg, _ = NegativeModel().draw()
    h2 = np.linspace(-1, 1, 1000)
    for h1 in (-0.5, 0.3, 0.9):
        signs = np.sign([tradeoff_k(h1, x, neg, 0.1, 0.2) for x in h2])
        assert np.count_nonzero(np.diff(signs)) <= 1


def test_equilibrium_observations():
    grid = np.round(np.arange(-1, 1.0001, 0.01), 10)
    c12 = equilibrium_curve(0.1, 0.2, grid)
    c17 = equilibrium_curve(0.1, 0.7, grid)
    c21 = equilibrium_curve(0.2, 0.1, grid)
    assert c12.is_non_decreasing()
    high = grid >= 0.8
    assert np.all(c12.h2_root[high] < grid[high])
    assert np.all(c17.h2_root < c12.h2_root)
    assert np.max(c21.slopes(0.5, 1.0)) < np.max(c12.slopes(0.5, 1.0))
    flags = curve_flags(c12)
    assert flags["roots_found"] == 201


def test_expectation_mode_close_to_sampled_with_many_negatives():
    grid = np.linspace(0.5, 1.0, 6)
    a = equilibrium_curve(0.1, 0.2, grid, NegativeModel(count=4096))
    b = equilibrium_curve(0.1, 0.2, grid, NegativeModel(count=4096, mode="expectation"))
    np.testing.assert_allclose(a.h2_root, b.h2_root, atol=0.01)


def test_curve_grid_validation():
    with pytest.raises(ValueError):
        equilibrium_curve(0.1, 0.2, [0.5, 0.4])
