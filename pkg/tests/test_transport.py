import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snapgp import diffcore as dc
from snapgp.transport import (PointCloud, cost_matrix, epsilon_schedule, exact_w2,
                              sinkhorn_divergence, sum_transport_cost, w2_distance)

from _oracles import brute_force_w2, loop_cost_matrix


def _cloud(rng, n, d=3, scale=1.0):
    return PointCloud(rng.normal(scale=scale, size=(n, d)))


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError, match="sum"):
        PointCloud(np.zeros((2, 1)), np.array([0.5, 0.6]))
    with pytest.warns(UserWarning, match="renormalizing"):
        pc = PointCloud(np.zeros((2, 1)), np.array([0.5, 0.5 + 1e-8]))
    assert pc.weights.sum() == pytest.approx(1.0, abs=1e-15)


def test_cost_matrix_cases():
    rng = np.random.default_rng(0)
    a = _cloud(rng, 4)
    np.testing.assert_allclose(np.diag(cost_matrix(a, a)), 0.0, atol=1e-12)
    C = cost_matrix(PointCloud(np.array([[0.0, 0.0]])), PointCloud(np.array([[3.0, 4.0]])))
    np.testing.assert_allclose(C, [[25.0]])
    a, b = _cloud(rng, 5), _cloud(rng, 7)
    pa, pb = a.points.tolist(), b.points.tolist()
    np.testing.assert_allclose(cost_matrix(a, b), loop_cost_matrix(pa, pb), atol=1e-12)
    np.testing.assert_allclose(cost_matrix(a, b, p=1), loop_cost_matrix(pa, pb, p=1), atol=1e-12)
    with pytest.raises(ValueError, match="dimension"):
        cost_matrix(a, _cloud(rng, 3, d=2))


def test_epsilon_schedule_shape():
    eps = epsilon_schedule(4.0, 0.05, 0.5)
    assert eps[0] == 16.0 and eps[-1] == pytest.approx(0.0025)
    ratios = np.array(eps[1:-1]) / np.array(eps[:-2])
    np.testing.assert_allclose(ratios[1:], 0.25, rtol=1e-12)
    with pytest.raises(ValueError):
        epsilon_schedule(1.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        epsilon_schedule(1.0, 0.1, 1.0)


def test_sinkhorn_identical_and_singletons():
    rng = np.random.default_rng(1)
    a = _cloud(rng, 10)
    assert sinkhorn_divergence(a, PointCloud(a.points.copy())).cost <= 1e-9
    s = sinkhorn_divergence(PointCloud(np.array([[0.0, 0.0]])), PointCloud(np.array([[3.0, 0.0]])))
    assert s.cost == pytest.approx(9.0, abs=1e-3)


def test_sinkhorn_result_fields():
    rng = np.random.default_rng(2)
    r = sinkhorn_divergence(_cloud(rng, 6), _cloud(rng, 6))
    assert r.iterations >= 1 and r.converged
    r = sinkhorn_divergence(_cloud(rng, 6), _cloud(rng, 5), max_iter=50)
    assert r.f.shape == (6,) and r.g.shape == (5,)
    r = sinkhorn_divergence(_cloud(rng, 30), _cloud(rng, 30), max_iter=3)
    assert not r.converged and np.isfinite(r.cost)


def test_sinkhorn_close_to_exact_at_small_blur():
    rng = np.random.default_rng(3)
    for _ in range(5):
        a, b = _cloud(rng, 6), _cloud(rng, 6)
        ex = exact_w2(a, b)
        assert abs(sinkhorn_divergence(a, b, blur=0.005).cost - ex) < 1e-2 * ex


def test_sinkhorn_approaches_exact_as_blur_shrinks():
    rng = np.random.default_rng(4)
    for _ in range(3):
        a, b = _cloud(rng, 8), _cloud(rng, 8)
        ex = exact_w2(a, b)
        gaps = [abs(sinkhorn_divergence(a, b, blur=bl).cost - ex) for bl in (0.5, 0.05, 0.005)]
        assert gaps[0] > gaps[1] > gaps[2] - 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 9), m=st.integers(1, 9))
def test_sinkhorn_symmetric_and_nonnegative(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = _cloud(rng, n, 2), _cloud(rng, m, 2)
    ab = sinkhorn_divergence(a, b).cost
    assert ab == sinkhorn_divergence(b, a).cost
    assert ab >= -1e-9


def test_sinkhorn_gradient_unrolled_matches_fd():
    rng = np.random.default_rng(5)
    y = rng.normal(size=(4, 2))
    x0 = rng.normal(size=(4, 2))
    rep = dc.grad_check(
        lambda x: sinkhorn_divergence(PointCloud(x), PointCloud(y), unroll=True, iters_per_level=5).loss,
        {"x": x0}, step=1e-5, tol=1e-4)
    assert rep.passed, rep


def test_sinkhorn_envelope_gradient_at_convergence():
    rng = np.random.default_rng(6)
    y = rng.normal(size=(4, 2))
    x0 = rng.normal(size=(4, 2))
    rep = dc.grad_check(
        lambda x: sinkhorn_divergence(PointCloud(x), PointCloud(y), tol=1e-13, max_iter=5000).loss,
        {"x": x0}, step=1e-5, tol=1e-4)
    assert rep.passed, rep


def test_exact_w2_small_cases():
    a = PointCloud(np.array([[1.0, 2.0]]))
    b = PointCloud(np.array([[4.0, 6.0]]))
    assert exact_w2(a, b) == pytest.approx(25.0)
    assert w2_distance(a, b) == pytest.approx(5.0)
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(6, 3))
    assert exact_w2(PointCloud(pts), PointCloud(pts[rng.permutation(6)])) == pytest.approx(0.0, abs=1e-12)


def test_exact_w2_matches_permutation_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(20):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        assert abs(exact_w2(PointCloud(a), PointCloud(b)) - brute_force_w2(a, b)) < 1e-9


def test_exact_w2_weighted_and_uneven():
    # mass 1/2 at 0 and 1/2 at 2 against a single point at 1: every unit moves distance 1
    a = PointCloud(np.array([[0.0], [2.0]]))
    b = PointCloud(np.array([[1.0]]))
    assert exact_w2(a, b) == pytest.approx(1.0)
    w = PointCloud(np.array([[0.0], [3.0]]), np.array([0.25, 0.75]))
    assert exact_w2(w, PointCloud(np.array([[0.0]]))) == pytest.approx(0.75 * 9)


def test_exact_w2_rejects():
    a = PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValueError, match="cap"):
        exact_w2(a, a, max_entries=4)
    with pytest.raises(ValueError, match="dimension"):
        exact_w2(a, PointCloud(np.zeros((3, 1))))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_exact_w2_translation_and_triangle(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(int(rng.integers(2, 7)), 2)) for _ in range(3))
    v = rng.normal(size=2) * 3
    base = exact_w2(PointCloud(a), PointCloud(b))
    assert exact_w2(PointCloud(a + v), PointCloud(b + v)) == pytest.approx(base, abs=1e-9)
    d = lambda x, y: w2_distance(PointCloud(x), PointCloud(y))
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-9


def test_sum_transport_cost():
    rng = np.random.default_rng(9)
    obs = {1.0: _cloud(rng, 5), 2.0: _cloud(rng, 4)}
    gen = {1.0: _cloud(rng, 5), 2.0: _cloud(rng, 4)}
    total, per = sum_transport_cost(obs, gen)
    ref = sinkhorn_divergence(obs[1.0], gen[1.0]).cost + sinkhorn_divergence(obs[2.0], gen[2.0]).cost
    assert float(total) == pytest.approx(ref, abs=1e-12)
    same, _ = sum_transport_cost(obs, {t: PointCloud(p.points.copy()) for t, p in obs.items()})
    assert float(same) <= 2e-9
    one, _ = sum_transport_cost({1.0: obs[1.0]}, {1.0: gen[1.0]})
    assert float(one) == sinkhorn_divergence(obs[1.0], gen[1.0]).cost
    with pytest.raises(KeyError, match="missing"):
        sum_transport_cost(obs, {1.0: gen[1.0]})
