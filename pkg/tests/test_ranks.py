"""Rank maps, collision local times, and the ranked log-weight decomposition."""

import numpy as np
import pytest

from spt_lab import markets, paths, ranks
from spt_lab.errors import InvalidArgumentError


def test_rank_order_basic_and_ties():
    np.testing.assert_array_equal(ranks.rank_order(np.array([0.2, 0.5, 0.3])),
                                  [1, 2, 0])
    # ties resolve to the lowest stock index
    np.testing.assert_array_equal(ranks.rank_order(np.array([0.4, 0.4, 0.2])),
                                  [0, 1, 2])
    np.testing.assert_array_equal(ranks.rank_order(np.array([0.7, 0.2, 0.1])),
                                  [0, 1, 2])


def test_ranked_weights_sorted_and_conserved():
    rng = np.random.default_rng(5)
    w = rng.dirichlet(np.ones(5), size=300)
    ranked, order = ranks.ranked_weight_path(w)
    assert np.all(np.diff(ranked, axis=1) <= 0)
    np.testing.assert_allclose(ranked.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(np.take_along_axis(w, order, axis=1), ranked)


def test_local_time_zero_without_sign_change():
    rng = np.random.default_rng(1)
    y = 0.5 + np.abs(np.cumsum(rng.normal(size=400))) * 0.01
    lam = ranks.estimate_local_time(y)
    np.testing.assert_array_equal(lam, np.zeros(400))
    # flipping the whole path changes nothing
    np.testing.assert_array_equal(ranks.estimate_local_time(-y), np.zeros(400))


def test_local_time_single_crossing_value():
    lam = ranks.estimate_local_time(np.array([0.3, -0.2, -0.1]))
    # one crossing: |after| - |before| - sign(before)(after - before) = 2|after|
    np.testing.assert_allclose(lam, [0.0, 0.4, 0.4], rtol=0, atol=1e-15)


def test_local_time_monotone_and_starts_at_zero():
    rng = np.random.default_rng(2)
    y = np.cumsum(rng.normal(size=(32, 1_000)) * 0.03, axis=1)
    lam = ranks.estimate_local_time(y)
    assert lam.shape == y.shape
    assert np.all(lam[:, 0] == 0.0)
    assert np.all(np.diff(lam, axis=1) >= -1e-15)
    with pytest.raises(InvalidArgumentError):
        ranks.estimate_local_time(np.array([1.0]))


def test_local_time_mean_matches_reflected_brownian_expectation():
    """E of the accumulated local time of W at zero over [0, 1] is sqrt(2/pi)."""
    rng = np.random.default_rng(33)
    k_steps, n_paths = 100, 40_000
    w = np.cumsum(rng.standard_normal((n_paths, k_steps)) * np.sqrt(1.0 / k_steps),
                  axis=1)
    w = np.concatenate([np.zeros((n_paths, 1)), w], axis=1)
    lam = ranks.estimate_local_time(w)[:, -1]
    se = lam.std(ddof=1) / np.sqrt(n_paths)
    assert abs(lam.mean() - 0.7978845608028654) < 3.0 * se


def test_local_time_pathwise_error_shrinks_with_the_step():
    """Successive refinements of the same Brownian paths converge pathwise."""
    rng = np.random.default_rng(8)
    n_paths, k_fine = 256, 10_000
    dw = rng.standard_normal((n_paths, k_fine)) * np.sqrt(1.0 / k_fine)
    gaps = []
    ref = None
    for factor in (1, 10, 100):
        inc = dw.reshape(n_paths, k_fine // factor, factor).sum(axis=2)
        w = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(inc, axis=1)], axis=1)
        lam = ranks.estimate_local_time(w)[:, -1]
        if ref is None:
            ref = lam
        else:
            gaps.append(np.abs(lam - ref).mean())
    assert gaps[1] > gaps[0] > 0.0


def test_adjacent_gap_crossing_value():
    w = np.array([[0.6, 0.4], [0.45, 0.55], [0.44, 0.56]])
    lam = ranks.adjacent_gap_local_times(w)
    assert lam.shape == (3, 1)
    assert lam[0, 0] == 0.0
    # the pair swaps once; the increment is twice the new log gap
    np.testing.assert_allclose(lam[1, 0], 2.0 * abs(np.log(0.45 / 0.55)), rtol=1e-12)
    np.testing.assert_allclose(lam[2, 0], lam[1, 0], rtol=0, atol=0)
    assert np.all(np.diff(lam, axis=0) >= 0.0)


def test_adjacent_gap_no_crossings_is_zero():
    w = np.array([[0.7, 0.2, 0.1], [0.6, 0.3, 0.1], [0.65, 0.25, 0.1]])
    np.testing.assert_array_equal(ranks.adjacent_gap_local_times(w),
                                  np.zeros((3, 2)))
    with pytest.raises(InvalidArgumentError):
        ranks.adjacent_gap_local_times(np.zeros((2, 2, 2)))


def _ou_path(seed, k_steps=2_000, horizon=2.0):
    model = markets.ou_two_stock(alpha=0.5)
    grid = paths.make_grid(horizon, k_steps)
    f = paths.generate_factors(grid, 2, max(seed + 1, 1), master_seed=13)
    return model, markets.integrate_log_euler(model, f, seed), f.path_increments(seed)


def test_top_pair_local_time_flat_while_leader_is_clear():
    """No collision time accrues while the top weight sits well above one half."""
    model, path, _ = _ou_path(0)
    w = path.weights
    lam = ranks.adjacent_gap_local_times(w)[:, 0]
    inc = np.diff(lam)
    clear = (w.max(axis=1) > 0.55)[:-1]
    assert inc[clear].max(initial=0.0) == 0.0


def test_ranked_decomposition_two_stocks_is_exact():
    """Bookkeeping with named increments plus boundary terms telescopes."""
    model, path, dw = _ou_path(1)
    out = ranks.ranked_decomposition(model, path)
    assert set(out) >= {"local_times", "residual_named", "order", "relative_named"}
    assert out["relative_named"] < 1e-12
    # collisions actually happened, so the boundary term is active
    assert out["local_times"][-1, 0] > 0.0
    np.testing.assert_array_equal(out["order"], ranks.rank_order(path.weights))


def test_ranked_decomposition_model_residual_shrinks():
    model = markets.ou_two_stock(alpha=0.5)
    rel = []
    for k_steps in (500, 2_000):
        grid = paths.make_grid(2.0, k_steps)
        f = paths.generate_factors(grid, 2, 8, master_seed=21)
        vals = []
        for i in range(8):
            path = markets.integrate_log_euler(model, f, i)
            out = ranks.ranked_decomposition(model, path,
                                             factor_increments=f.path_increments(i))
            vals.append(out["relative_model"])
        rel.append(np.mean(vals))
    assert rel[1] < rel[0]


def test_ranked_decomposition_three_stocks_small_residual():
    model = markets.constant_market(b=[0.02, 0.0, 0.04], sigma=0.3 * np.eye(3),
                                    x0=[1.0, 1.05, 0.95])
    grid = paths.make_grid(1.0, 4_000)
    f = paths.generate_factors(grid, 3, 4, master_seed=3)
    for i in range(4):
        path = markets.integrate_log_euler(model, f, i)
        out = ranks.ranked_decomposition(model, path)
        assert out["residual_named"].shape == path.log_prices.shape
        assert out["relative_named"] < 0.05
