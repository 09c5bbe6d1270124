"""Portfolio weight rules, growth algebra, and wealth integration.

Weights are rows summing to 1.  A rule maps a simulated log-price path to a
weight path; wealth is then integrated with one of two schemes:

* all-long rules compound the portfolio-weighted gross returns of the
  stocks, in log space.  This makes the market portfolio's wealth track
  total capitalization exactly and a single-stock portfolio track its stock
  exactly, to float precision.
* rules with short positions (mirror constructions) update the log of the
  wealth ratio to the market portfolio: measured log-weight increments enter
  linearly and the excess-growth correction enters through the covariance,
  so the update stays finite even when a one-step gross return of the
  short-leveraged basket would not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "market_weights",
    "diversity_weighted",
    "mirror_weights",
    "excess_growth",
    "relative_covariance",
    "relative_variance",
    "numeraire_invariance_residual",
    "WeightRule",
    "MarketRule",
    "DiversityWeightedRule",
    "SingleStockRule",
    "ConstantWeightsRule",
    "MirrorRule",
    "value_from_weights",
    "relative_log_value",
    "market_value",
    "strategy_value",
]

_SUM_TOL = 1e-9


def _check_weights(w, allow_short=True):
    w = np.asarray(w, dtype=float)
    if not np.isfinite(w).all():
        raise InvalidArgumentError("weights must be finite")
    s = w.sum(axis=-1)
    if np.max(np.abs(s - 1.0)) > _SUM_TOL:
        raise InvalidArgumentError("weights must sum to 1")
    if not allow_short and w.min() < -1e-12:
        raise InvalidArgumentError("weights must be nonnegative")
    return w


def market_weights(log_prices: np.ndarray) -> np.ndarray:
    """Capitalization weights from log prices; stable under large spreads."""
    lx = np.asarray(log_prices, dtype=float)
    mx = lx.max(axis=-1, keepdims=True)
    e = np.exp(lx - mx)
    return e / e.sum(axis=-1, keepdims=True)


def diversity_weighted(mu: np.ndarray, p: float) -> np.ndarray:
    """Weights proportional to mu_i**p, 0 < p <= 1.

    p below 1 damps concentration: the largest weight shrinks and the
    smallest grows relative to the market.  p = 1 returns the input.
    """
    if not 0 < p <= 1:
        raise InvalidArgumentError("p must lie in (0, 1]")
    mu = np.asarray(mu, dtype=float)
    if mu.min() <= 0:
        raise InvalidArgumentError("market weights must be strictly positive")
    if p == 1.0:
        return mu.copy()
    w = mu**p
    return w / w.sum(axis=-1, keepdims=True)


def mirror_weights(pi: np.ndarray, anchor: np.ndarray, p: float) -> np.ndarray:
    """Affine combination p * pi + (1 - p) * anchor; p outside [0, 1] shorts."""
    pi = np.asarray(pi, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    return p * pi + (1.0 - p) * anchor


def excess_growth(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    """(1/2) (sum_i w_i a_ii - w' a w), vectorized over leading axes."""
    w = np.asarray(w, dtype=float)
    lin = w @ np.diag(a)
    quad = np.einsum("...i,ij,...j->...", w, a, w)
    return 0.5 * (lin - quad)


def relative_covariance(a: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Covariance of log returns measured relative to the portfolio rho.

    tau_ij = a_ij - (a rho)_i - (a rho)_j + rho' a rho.  The matrix is
    positive semidefinite and annihilates rho.
    """
    rho = np.asarray(rho, dtype=float)
    ar = a @ rho
    rar = float(rho @ ar)
    return a - ar[:, None] - ar[None, :] + rar


def relative_variance(a: np.ndarray, rho: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Quadratic form w' tau^rho w = (w - rho)' a (w - rho)."""
    d = np.asarray(w, dtype=float) - np.asarray(rho, dtype=float)
    return np.einsum("...i,ij,...j->...", d, a, d)


def numeraire_invariance_residual(w: np.ndarray, rho: np.ndarray, a: np.ndarray) -> float:
    """How far the excess growth moves when recomputed relative to rho (zero
    in exact arithmetic, for any baseline portfolio rho)."""
    tau = relative_covariance(a, rho)
    via_rho = 0.5 * (w @ np.diag(tau) - np.einsum("...i,ij,...j->...", w, tau, w))
    return np.abs(excess_growth(w, a) - via_rho)


# ---------------------------------------------------------------------------
# weight rules
# ---------------------------------------------------------------------------

class WeightRule:
    """Maps a log-price path (single or batch) to a weight path."""

    all_long: bool = True
    name: str = "rule"

    def weight_path(self, log_prices: np.ndarray, times: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class MarketRule(WeightRule):
    name = "market"

    def weight_path(self, log_prices, times):
        return market_weights(log_prices)


class DiversityWeightedRule(WeightRule):
    def __init__(self, p: float):
        if not 0 < p <= 1:
            raise InvalidArgumentError("p must lie in (0, 1]")
        self.p = float(p)
        self.name = f"diversity_p{p:g}"

    def weight_path(self, log_prices, times):
        return diversity_weighted(market_weights(log_prices), self.p)


class SingleStockRule(WeightRule):
    def __init__(self, index: int):
        self.index = int(index)
        self.name = f"stock_{index}"

    def weight_path(self, log_prices, times):
        lx = np.asarray(log_prices)
        w = np.zeros(lx.shape)
        w[..., self.index] = 1.0
        return w


class ConstantWeightsRule(WeightRule):
    def __init__(self, w):
        self.w = _check_weights(np.asarray(w, dtype=float))
        self.all_long = bool(self.w.min() >= 0)
        self.name = "constant_weights"

    def weight_path(self, log_prices, times):
        lx = np.asarray(log_prices)
        return np.broadcast_to(self.w, lx.shape).copy()


class MirrorRule(WeightRule):
    """p times a base rule plus (1 - p) times an anchor rule."""

    def __init__(self, base: WeightRule, p: float, anchor: WeightRule | None = None):
        self.base = base
        self.anchor = anchor if anchor is not None else MarketRule()
        self.p = float(p)
        self.all_long = bool(
            0 <= p <= 1 and self.base.all_long and self.anchor.all_long
        )
        self.name = f"mirror_p{p:g}_{base.name}"

    def weight_path(self, log_prices, times):
        return mirror_weights(
            self.base.weight_path(log_prices, times),
            self.anchor.weight_path(log_prices, times),
            self.p,
        )


# ---------------------------------------------------------------------------
# wealth integration
# ---------------------------------------------------------------------------

def market_value(log_prices: np.ndarray, z0: float = None) -> np.ndarray:
    """Wealth of the market portfolio: z0 * (total cap / initial total cap).

    With z0 left unset the initial total capitalization is used, so the
    value equals total capitalization along the whole path.
    """
    lx = np.asarray(log_prices, dtype=float)
    mx = lx.max(axis=-1, keepdims=True)
    s = np.exp(lx - mx).sum(axis=-1) * np.exp(mx[..., 0])
    if z0 is None:
        return s.copy()
    return z0 * s / s[..., :1]


def value_from_weights(
    weights: np.ndarray,
    log_prices: np.ndarray,
    times: np.ndarray,
    z0: float = 1.0,
    a: np.ndarray | None = None,
    scheme: str = "auto",
) -> np.ndarray:
    """Wealth path of a weight rule, single path or batch.

    Parameters
    ----------
    weights, log_prices : (..., K+1, n)
    times : (K+1,)
    z0 : initial wealth.
    a : covariance matrix; required by the relative scheme.
    scheme : "auto" | "gross" | "relative"
        "gross" compounds portfolio-weighted gross returns (all-long only),
        "relative" integrates the log wealth ratio to the market.  "auto"
        picks "gross" for nonnegative weight paths.
    """
    w = _check_weights(weights)
    lx = np.asarray(log_prices, dtype=float)
    if w.shape != lx.shape:
        raise InvalidArgumentError("weights and log prices must share a shape")
    if scheme == "auto":
        scheme = "gross" if w.min() >= -1e-12 else "relative"
    if scheme == "gross":
        if w.min() < -1e-12:
            raise InvalidArgumentError("gross-return scheme needs all-long weights")
        dlx = np.diff(lx, axis=-2)
        gross = np.sum(w[..., :-1, :] * np.exp(dlx), axis=-1)
        logz = np.concatenate(
            [
                np.zeros(gross.shape[:-1] + (1,)),
                np.cumsum(np.log(gross), axis=-1),
            ],
            axis=-1,
        )
        return z0 * np.exp(logz)
    if scheme == "relative":
        if a is None:
            raise InvalidArgumentError("relative scheme needs the covariance matrix a")
        lr = relative_log_value(w, lx, times, a)
        return market_value(lx, z0) * np.exp(lr)
    raise InvalidArgumentError(f"unknown scheme {scheme!r}")


def relative_log_value(
    weights: np.ndarray, log_prices: np.ndarray, times: np.ndarray, a: np.ndarray
) -> np.ndarray:
    """Cumulative log(Z / Z_market) for an arbitrary (possibly short) rule.

    Per step: sum_i (w_i - mu_i) dlog mu_i plus the excess-growth spread
    times dt, both read at the left endpoint.
    """
    w = np.asarray(weights, dtype=float)
    lx = np.asarray(log_prices, dtype=float)
    mu = market_weights(lx)
    dlm = np.diff(np.log(mu), axis=-2)
    lin = np.sum((w - mu)[..., :-1, :] * dlm, axis=-1)
    gap = excess_growth(w, a) - excess_growth(mu, a)
    dt = np.diff(np.asarray(times, dtype=float))
    drift = gap[..., :-1] * dt
    return np.concatenate(
        [
            np.zeros(lin.shape[:-1] + (1,)),
            np.cumsum(lin + drift, axis=-1),
        ],
        axis=-1,
    )


def strategy_value(
    phi,
    log_prices: np.ndarray,
    times: np.ndarray,
    r: float = 0.0,
    z0: float = 1.0,
):
    """Wealth of a dollar-holdings trading strategy.

    ``phi`` is either an array of dollar positions per stock, shape
    (K+1, n) (the row at the horizon is unused), or a callable
    ``phi(k, t, z, prices_row) -> row`` evaluated at left endpoints.  The
    residual z - sum(phi) earns the money-market rate.  Wealth may go
    negative; the caller decides whether that disqualifies the strategy.
    """
    lx = np.asarray(log_prices, dtype=float)
    if lx.ndim != 2:
        raise InvalidArgumentError("strategy_value works on a single path")
    t = np.asarray(times, dtype=float)
    k_steps = lx.shape[0] - 1
    prices = np.exp(lx)
    gross = np.exp(np.diff(lx, axis=0))
    bank = np.exp(r * np.diff(t))
    z = np.empty(k_steps + 1)
    z[0] = z0
    if callable(phi):
        for k in range(k_steps):
            row = np.asarray(phi(k, t[k], z[k], prices[k]), dtype=float)
            z[k + 1] = z[k] * bank[k] + row @ (gross[k] - bank[k])
        return z
    phi = np.asarray(phi, dtype=float)
    if phi.shape != lx.shape:
        raise InvalidArgumentError("phi must match the price path shape")
    gains = np.sum(phi[:-1] * (gross - bank[:, None]), axis=1)
    # z_k = B_k (z0 + sum_{j<k} gains_j / B_{j+1}) with B_k the bank account
    disc = np.exp(r * t)
    acc = np.concatenate([[0.0], np.cumsum(gains / disc[1:])])
    return disc * (z0 + acc)
