import numpy as np
from hypothesis import given, settings, strategies as st

from ramp_odo.correction import (SIGMA_MAX, bilinear_sample, correlation_lookup, correlation_lookup_batch,
                                 estimate_oracle, estimate_softargmax, softargmax, CorrelationGrid)


def test_bilinear_sample_on_lattice_and_between(rng):
    f = rng.normal(size=(3, 5, 6))
    np.testing.assert_allclose(bilinear_sample(f, np.array([2.0, 3.0])), f[:, 3, 2])
    mid = bilinear_sample(f, np.array([2.5, 3.0]))
    np.testing.assert_allclose(mid, 0.5 * (f[:, 3, 2] + f[:, 3, 3]))


def test_one_hot_self_correlation_peaks_at_center():
    H, W = 20, 20
    m = np.eye(H * W).reshape(H * W, H, W)
    g = correlation_lookup(m, m, (40.0, 44.0), (40.0, 44.0))
    assert not g.masked
    assert np.unravel_index(np.argmax(g.scores), g.scores.shape) == (3, 3)


def test_constant_maps_give_flat_grid():
    m = np.ones((4, 20, 20))
    g = correlation_lookup(m, m, (40.0, 40.0), (42.0, 38.0))
    np.testing.assert_allclose(g.scores, g.scores[0, 0])


def test_lookup_matches_naive_recomputation(rng):
    m_i, m_j = rng.normal(size=(8, 20, 24)), rng.normal(size=(8, 20, 24))
    src = np.array([37.3, 41.9])
    pc = np.array([45.6, 38.2])
    g = correlation_lookup(m_i, m_j, src, pc)
    f = bilinear_sample(m_j, src / 4)
    naive = np.zeros((7, 7))
    for dy in range(-3, 4):
        for dx in range(-3, 4):
            naive[dy + 3, dx + 3] = bilinear_sample(m_i, pc / 4 + np.array([dx, dy])) @ f
    np.testing.assert_allclose(g.scores, naive, atol=1e-10)
    sc, mk = correlation_lookup_batch(m_i, f[None], pc[None])
    np.testing.assert_allclose(sc[0], naive, atol=1e-10)
    assert not mk[0]


def test_out_of_margin_is_masked(rng):
    m = rng.normal(size=(4, 20, 20))
    g = correlation_lookup(m, m, (40.0, 40.0), (2.0, 40.0))
    assert g.masked and not g.scores.any()
    _, mk = correlation_lookup_batch(m, np.ones((1, 4)), np.array([[2.0, 40.0]]))
    assert mk[0]


def test_softargmax_spike():
    g = np.zeros((7, 7))
    g[3 - 1, 3 + 2] = 10.0       # offset (dx, dy) = (2, -1)
    d, s = softargmax(g, tau=0.01)
    np.testing.assert_allclose(d, [8.0, -4.0], atol=1e-9)
    # zero variance: the weight saturates at 1 / eps, inside the SIGMA_MAX clip
    np.testing.assert_allclose(s, 1 / 1e-3, rtol=1e-9)
    assert np.all(s <= SIGMA_MAX)


def test_softargmax_uniform_and_masked():
    d, s = softargmax(np.zeros((7, 7)), tau=0.1)
    np.testing.assert_allclose(d, 0.0, atol=1e-12)
    # variance of a uniform grid over offsets -3..3 is 4
    np.testing.assert_allclose(s, 1 / (1e-3 + 4.0))
    est = estimate_softargmax(CorrelationGrid(3, np.zeros((7, 7)), masked=True))
    assert not est.delta.any() and not est.sigma.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_softargmax_matches_explicit_softmax(seed, tau):
    g = np.random.default_rng(seed).normal(size=(7, 7))
    w = np.exp(g / tau - (g / tau).max())
    w /= w.sum()
    o = np.arange(-3, 4)
    mx, my = (w.sum(0) * o).sum(), (w.sum(1) * o).sum()
    vx = (w.sum(0) * o**2).sum() - mx**2
    d, s = softargmax(g, tau)
    np.testing.assert_allclose(d, [4 * mx, 4 * my], atol=1e-9)
    np.testing.assert_allclose(s[0], min(1 / (1e-3 + vx), SIGMA_MAX), rtol=1e-9)


def test_oracle_estimator(rng):
    assert not estimate_oracle((5.0, 6.0), (5.0, 6.0)).delta.any()
    np.testing.assert_allclose(estimate_oracle((8.0, 10.0), (5.0, 6.0)).delta, [3, 4])
    draws = np.array([estimate_oracle((8.0, 10.0), (5.0, 6.0), 0.5, rng).delta for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(0) - [3, 4]) < 3 * 0.5 / 100)
    np.testing.assert_array_equal(estimate_oracle((1, 1), (0, 0)).sigma, [1, 1])
