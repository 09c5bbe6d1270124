"""Rank paths, boundary local times, and the ranked-weight decomposition.

Ranking is by descending weight with ties broken toward the lower stock
index, so the identity of each ranked slot is well defined on every grid
point.  Local time at zero is estimated with a discrete Tanaka sum on a
signed path: each step contributes

    |y_next| - |y| - sign(y) (y_next - y)

which is zero when no sign change occurs, 2 |y_next| on a crossing, and
|y_next| when starting exactly at zero.  Every contribution is nonnegative,
so the estimate is nondecreasing without any flooring.  Feeding a
nonnegative path (a gap that never crosses) therefore yields identically
zero, which is the correct degenerate answer for that input.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from . import markets as _markets
from . import portfolios as _portfolios

__all__ = [
    "rank_order",
    "ranked_weight_path",
    "estimate_local_time",
    "adjacent_gap_local_times",
    "ranked_decomposition",
]


def rank_order(w: np.ndarray) -> np.ndarray:
    """Indices sorting weights descending, lowest index first on ties."""
    return np.argsort(-np.asarray(w, dtype=float), axis=-1, kind="stable")


def ranked_weight_path(w: np.ndarray):
    """Sorted (descending) weights and the stock index occupying each rank."""
    order = rank_order(w)
    ranked = np.take_along_axis(np.asarray(w, dtype=float), order, axis=-1)
    return ranked, order


def estimate_local_time(path: np.ndarray) -> np.ndarray:
    """Cumulative local time at zero of a signed scalar path, shape (K+1,).

    Works on batches; the path axis is the last one.
    """
    y = np.asarray(path, dtype=float)
    if y.shape[-1] < 2:
        raise InvalidArgumentError("need at least two grid points")
    ynext = y[..., 1:]
    ynow = y[..., :-1]
    inc = np.abs(ynext) - np.abs(ynow) - np.sign(ynow) * (ynext - ynow)
    out = np.zeros(y.shape)
    np.cumsum(inc, axis=-1, out=out[..., 1:])
    return out


def adjacent_gap_local_times(weight_path: np.ndarray) -> np.ndarray:
    """Local times of the log gaps between adjacent ranked weights.

    Input (K+1, n); output (K+1, n-1), column k holding the accumulated
    collision time between ranks k and k+1.  Each step follows the pair of
    stock names that occupy the two ranks at the left endpoint.  Ranking
    makes the left-endpoint gap nonnegative (ties included), so the Tanaka
    increment from the positive side reduces to twice the overshoot below
    zero: it is positive exactly when the pair swaps order by the right
    endpoint.
    """
    w = np.asarray(weight_path, dtype=float)
    if w.ndim != 2:
        raise InvalidArgumentError("expected one weight path, shape (K+1, n)")
    lw = np.log(w)
    order = rank_order(w)
    hi = order[:-1, :-1]
    lo = order[:-1, 1:]
    s_next = np.take_along_axis(lw[1:], hi, axis=1) - np.take_along_axis(
        lw[1:], lo, axis=1
    )
    inc = 2.0 * np.maximum(0.0, -s_next)
    out = np.zeros((w.shape[0], w.shape[1] - 1))
    np.cumsum(inc, axis=0, out=out[1:])
    return out


def ranked_decomposition(model, price_path, factor_increments=None):
    """Check the evolution of each ranked log weight on one simulated path.

    The log weight of rank k should move by the named increment of whichever
    stock holds rank k at the left endpoint, plus half the net local time
    collected at the rank boundaries above and below.  Two residual paths
    are reported per rank:

    * ``residual_named`` re-derives ranked moves from the measured named
      log-weight increments; it probes only the ranking and local-time
      bookkeeping, not the integrator.
    * ``residual_model`` replaces the measured named increments by the
      model's defining drift and volatility acting on the factor
      increments; it converges at the usual Euler rate.

    Returns a dict with the residual arrays (K+1, n), the gap local times
    (K+1, n-1), and scalar relative sups normalized by the largest observed
    terminal ranked log weight magnitude (floored at log 2, the two-stock
    minimum spread scale).
    """
    grid = price_path.grid
    lx = price_path.log_prices
    if lx.ndim != 2:
        raise InvalidArgumentError("expected one price path")
    k_steps, n = lx.shape[0] - 1, lx.shape[1]
    w = price_path.weights
    lw = np.log(w)
    ranked, order = ranked_weight_path(w)
    lam = adjacent_gap_local_times(w)
    dlam = np.diff(lam, axis=0)

    # half net local time per rank: gained at the lower boundary, ceded at
    # the upper one; the top rank has no boundary above, the bottom none below
    pad = np.zeros((k_steps, 1))
    below = np.concatenate([dlam, pad], axis=1)
    above = np.concatenate([pad, dlam], axis=1)
    boundary = 0.5 * (below - above)

    ranked_log = np.log(ranked)
    d_ranked = np.diff(ranked_log, axis=0)

    hold = order[:-1]
    named_inc = np.take_along_axis(np.diff(lw, axis=0), hold, axis=1)
    res_named = np.zeros((k_steps + 1, n))
    np.cumsum(d_ranked - named_inc - boundary, axis=0, out=res_named[1:])

    out = {
        "local_times": lam,
        "residual_named": res_named,
        "order": order,
    }
    scale = max(np.log(2.0), np.abs(ranked_log[-1]).max())
    out["relative_named"] = float(np.abs(res_named).max() / scale)

    if factor_increments is not None:
        dv = _markets._vol_increments(model, factor_increments[None])[0]
        a = model.vol.a
        times = grid.times
        gamma = _markets.growth_rates_along(
            model, lx, times, aux=price_path.aux
        )
        mu_gamma = _portfolios.excess_growth(w, a) + np.sum(w * gamma, axis=-1)
        # named log-weight move from the model: (gamma_i - gamma_mu) dt
        #   + (sigma dW)_i - mu' sigma dW, all at the left endpoint
        dt = grid.step_sizes[:, None]
        g_named = np.take_along_axis(gamma[:-1], hold, axis=1)
        mkt_noise = np.sum(w[:-1] * dv, axis=1, keepdims=True)
        model_inc = (
            (g_named - mu_gamma[:-1, None]) * dt
            + np.take_along_axis(dv, hold, axis=1)
            - mkt_noise
        )
        res_model = np.zeros((k_steps + 1, n))
        np.cumsum(d_ranked - model_inc - boundary, axis=0, out=res_model[1:])
        out["residual_model"] = res_model
        out["relative_model"] = float(np.abs(res_model).max() / scale)
    return out
