"""Deflator construction, Monte Carlo hedge pricing, and related studies.

The deflator multiplies each path's payoff before averaging: log L moves by
-theta' dW - ||theta||^2 dt / 2 per step, with theta the market price of
risk read at the left endpoint and dW the same factor increments that drove
the prices.  Because theta is known at the start of each step, every step
factor has conditional mean one, so the sample mean of L(T) estimates 1
without discretization bias.  In markets whose continuous-time deflator is
a strict local martingale, the compensating mass sits in astronomically
rare explosive paths; a finite sample essentially never draws them, and the
sample mean instead hugs the continuous-time expectation, which is below
one.  The studies report that deficit as statistical evidence (mean,
standard error, persistence under step halving), never as a proof.

Monte Carlo reductions store one value per path slot and reduce once with
compensated (exact) summation, so results are independent of batch
scheduling and worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError
from . import markets as _markets
from . import paths as _paths
from . import portfolios as _portfolios

__all__ = [
    "Claim",
    "call_claim",
    "exchange_claim",
    "market_price_of_risk",
    "deflator_log_terminals",
    "hedge_price",
    "slm_deficit_study",
    "call_decay_study",
    "decay_envelope",
    "parity_witness_study",
    "parity_control_study",
    "deflated_wealth_check",
]


@dataclass(frozen=True)
class Claim:
    """Nonnegative payoff functional of the terminal market state."""

    descriptor: str
    payoff: object = field(repr=False)  # callable (lx_block, times, aux) -> (B,)


def call_claim(index: int, strike: float) -> Claim:
    if strike < 0:
        raise InvalidArgumentError("strike must be nonnegative")

    def payoff(lx, times, aux):
        return np.maximum(np.exp(lx[:, -1, index]) - strike, 0.0)

    return Claim(f"call(stock={index}, strike={strike:g})", payoff)


def exchange_claim(i: int, j: int) -> Claim:
    def payoff(lx, times, aux):
        return np.maximum(np.exp(lx[:, -1, i]) - np.exp(lx[:, -1, j]), 0.0)

    return Claim(f"exchange({i}, {j})", payoff)


def market_price_of_risk(model, log_prices: np.ndarray, times, aux=None) -> np.ndarray:
    """theta = sigma' (sigma sigma')^{-1} (b - r 1) along a path or batch."""
    sigma = model.vol.sigma
    proj = sigma.T @ np.linalg.inv(model.vol.a)
    b = _markets.rates_of_return_along(model, log_prices, times, aux=aux)
    theta = (b - model.r) @ proj.T
    if not np.isfinite(theta).all():
        raise NumericFailureError("market price of risk is not finite")
    return theta


def _deflator_log_terminal_block(model, lx, dw, times, aux) -> np.ndarray:
    """Per-path terminal log L for one simulated block."""
    theta = market_price_of_risk(model, lx, times, aux=aux)[:, :-1, :]
    dt = np.diff(np.asarray(times, dtype=float))
    steps = -np.sum(theta * dw, axis=2) - 0.5 * np.sum(theta**2, axis=2) * dt
    return np.sum(steps, axis=1)


def deflator_log_terminals(
    model, factors: _paths.FactorPaths, batch_size: int = 1024, workers: int = 1
) -> np.ndarray:
    """Terminal log L per path, streamed in fixed batches."""
    times = factors.grid.times
    out = np.empty(factors.n_paths)

    def consume(lo, hi, lx, aux):
        dw = factors.block(lo, hi)
        out[lo:hi] = _deflator_log_terminal_block(model, lx, dw, times, aux)

    _markets.run_batches(model, factors, consume, batch_size=batch_size, workers=workers)
    return out


def _compensated_mean_se(values: np.ndarray):
    n = values.shape[0]
    mean = math.fsum(values) / n
    if n < 2:
        return mean, float("inf")
    var = math.fsum((values - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def _normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def call_price_closed_form(
    spot: float, strike: float, rate: float, vol: float, horizon: float
) -> float:
    """Lognormal call price for a constant-coefficient stock.

    ``vol`` is the stock's own log volatility, the square root of its
    diagonal covariance entry.
    """
    if spot <= 0 or strike <= 0:
        raise InvalidArgumentError("spot and strike must be positive")
    if vol <= 0 or horizon <= 0:
        raise InvalidArgumentError("vol and horizon must be positive")
    sq = vol * math.sqrt(horizon)
    d1 = (math.log(spot / strike) + (rate + 0.5 * vol * vol) * horizon) / sq
    d2 = d1 - sq
    return spot * _normal_cdf(d1) - strike * math.exp(-rate * horizon) * _normal_cdf(d2)


def hedge_price(
    model,
    factors: _paths.FactorPaths,
    claim: Claim,
    batch_size: int = 1024,
    workers: int = 1,
) -> dict:
    """Monte Carlo estimate of E[Y * L(T) / B(T)] with its standard error."""
    times = factors.grid.times
    horizon = factors.grid.horizon
    bank = math.exp(model.r * horizon)
    vals = np.empty(factors.n_paths)

    def consume(lo, hi, lx, aux):
        dw = factors.block(lo, hi)
        logl = _deflator_log_terminal_block(model, lx, dw, times, aux)
        y = np.asarray(claim.payoff(lx, times, aux), dtype=float)
        if y.min() < 0:
            raise InvalidArgumentError("claim payoff must be nonnegative")
        vals[lo:hi] = y * np.exp(logl) / bank

    _markets.run_batches(model, factors, consume, batch_size=batch_size, workers=workers)
    mean, se = _compensated_mean_se(vals)
    return {
        "price": mean,
        "se": se,
        "claim": claim.descriptor,
        "n_paths": factors.n_paths,
        "zero_fraction": float(np.mean(vals == 0.0)),
    }


# ---------------------------------------------------------------------------
# strict-local-martingale evidence
# ---------------------------------------------------------------------------

def slm_deficit_study(
    model,
    horizon: float,
    steps_fine: int,
    n_paths: int,
    master_seed: int,
    batch_size: int = 1024,
    workers: int = 1,
) -> dict:
    """Sample mean of L(T) at two step sizes sharing the same noise.

    The fine grid's increments are pair-summed for the coarse run, so the
    comparison isolates the step-size effect.  A genuine deficit shows the
    same sign and comparable size at both resolutions; see the module
    docstring for why this is evidence rather than proof.
    """
    grid = _paths.make_grid(horizon, steps_fine)
    fine = _paths.generate_factors(grid, model.m, n_paths, master_seed)
    out = {}
    for tag, factors in (("fine", fine), ("coarse", fine.coarsened(2))):
        logl = deflator_log_terminals(
            model, factors, batch_size=batch_size, workers=workers
        )
        mean, se = _compensated_mean_se(np.exp(logl))
        out[tag] = {
            "dt": factors.grid.dt,
            "mean": mean,
            "se": se,
            "deficit": 1.0 - mean,
            "t_stat": (1.0 - mean) / se if se > 0 else float("inf"),
        }
    return out


def decay_envelope(
    total_capital: float, n: int, p: float, eps: float, delta: float, horizon: float
) -> float:
    """Analytic ceiling for the deflated price of one stock in a weakly
    diverse elliptic market: total capital times n**((1-p)/p) times
    exp(-eps * delta * (1-p) * horizon / 2)."""
    if not 0 < p < 1:
        raise InvalidArgumentError("p must lie in (0, 1)")
    return (
        total_capital
        * float(n) ** ((1.0 - p) / p)
        * math.exp(-eps * delta * (1.0 - p) * horizon / 2.0)
    )


def call_decay_study(
    model,
    strike: float,
    horizons,
    steps_per_unit: int,
    n_paths: int,
    master_seed: int,
    p_bound: float = 0.5,
    index: int = 0,
    batch_size: int = 1024,
    workers: int = 1,
) -> dict:
    """Deflated call prices across a horizon ladder, plus the stock bound.

    All horizons reuse the same master seed, so shorter paths are exact
    prefixes of longer ones and the monotonicity comparison is paired
    rather than independent.  For each horizon the study also estimates the
    deflated stock price E[L X / B] and the analytic envelope it must stay
    under in a weakly diverse elliptic market.
    """
    if model.r <= 0:
        raise InvalidArgumentError("the decay study needs a positive interest rate")
    delta = model.params.get("delta")
    if delta is None:
        raise InvalidArgumentError("the decay study expects a diversity-controlled model")
    eps = model.vol.eps
    total0 = float(model.x0.sum())
    claim = call_claim(index, strike)
    rows = []
    for t in horizons:
        grid = _paths.make_grid(float(t), int(round(steps_per_unit * t)))
        factors = _paths.generate_factors(grid, model.m, n_paths, master_seed)
        times = grid.times
        bank = math.exp(model.r * float(t))
        call_vals = np.empty(n_paths)
        stock_vals = np.empty(n_paths)

        def consume(lo, hi, lx, aux):
            dw = factors.block(lo, hi)
            logl = _deflator_log_terminal_block(model, lx, dw, times, aux)
            defl = np.exp(logl) / bank
            call_vals[lo:hi] = claim.payoff(lx, times, aux) * defl
            stock_vals[lo:hi] = np.exp(lx[:, -1, index]) * defl

        _markets.run_batches(
            model, factors, consume, batch_size=batch_size, workers=workers
        )
        h, h_se = _compensated_mean_se(call_vals)
        s, s_se = _compensated_mean_se(stock_vals)
        rows.append(
            {
                "horizon": float(t),
                "price": h,
                "se": h_se,
                "stock_price": s,
                "stock_se": s_se,
                "envelope": decay_envelope(
                    total0, model.n, p_bound, eps, delta, float(t)
                ),
            }
        )
    return {"strike": strike, "spot": float(model.x0[index]), "rows": rows}


# ---------------------------------------------------------------------------
# put-call parity gap
# ---------------------------------------------------------------------------

def parity_witness_study(
    model,
    factors: _paths.FactorPaths,
    p: float,
    batch_size: int = 128,
    workers: int = 1,
) -> dict:
    """Deflated prices of two assets that start equal yet price apart.

    Asset one is the market portfolio's value, asset two the value of the
    short-the-market mirror of the first stock with exponent p; both start
    at one unit of capital, so any gap in their deflated prices breaks the
    parity that would tie the two jointly european claims together.  The
    gap is estimated pathwise (paired), which removes most of the variance.
    """
    if model.r != 0.0:
        raise InvalidArgumentError("the parity witness assumes a zero interest rate")
    times = factors.grid.times
    a = model.vol.a
    n = model.n
    e1 = np.zeros(n)
    e1[0] = 1.0
    h1_vals = np.empty(factors.n_paths)
    h2_vals = np.empty(factors.n_paths)

    def consume(lo, hi, lx, aux):
        dw = factors.block(lo, hi)
        logl = _deflator_log_terminal_block(model, lx, dw, times, aux)
        zmu = _portfolios.market_value(lx, 1.0)[:, -1]
        mu = _portfolios.market_weights(lx)
        what = _portfolios.mirror_weights(e1, mu, p)
        rel = _portfolios.relative_log_value(what, lx, times, a)[:, -1]
        l = np.exp(logl)
        h1_vals[lo:hi] = l * zmu
        h2_vals[lo:hi] = l * zmu * np.exp(rel)

    _markets.run_batches(model, factors, consume, batch_size=batch_size, workers=workers)
    h1, h1_se = _compensated_mean_se(h1_vals)
    h2, h2_se = _compensated_mean_se(h2_vals)
    gap, gap_se = _compensated_mean_se(h1_vals - h2_vals)
    return {
        "h1": h1,
        "h1_se": h1_se,
        "h2": h2,
        "h2_se": h2_se,
        "gap": gap,
        "gap_se": gap_se,
        "initial_difference": 0.0,
        "t_stat": gap / gap_se if gap_se > 0 else float("inf"),
    }


def parity_control_study(
    model,
    factors: _paths.FactorPaths,
    i: int = 0,
    j: int = 1,
    batch_size: int = 1024,
    workers: int = 1,
) -> dict:
    """Two plain stocks under a bounded market price of risk: their deflated
    discounted prices must sit at the initial prices, so the paired gap
    matches the initial difference within Monte Carlo error."""
    times = factors.grid.times
    horizon = factors.grid.horizon
    bank = math.exp(model.r * horizon)
    vals = np.empty(factors.n_paths)

    def consume(lo, hi, lx, aux):
        dw = factors.block(lo, hi)
        logl = _deflator_log_terminal_block(model, lx, dw, times, aux)
        diff = np.exp(lx[:, -1, i]) - np.exp(lx[:, -1, j])
        vals[lo:hi] = diff * np.exp(logl) / bank

    _markets.run_batches(model, factors, consume, batch_size=batch_size, workers=workers)
    gap, gap_se = _compensated_mean_se(vals)
    expected = float(model.x0[i] - model.x0[j])
    return {
        "gap": gap,
        "gap_se": gap_se,
        "expected": expected,
        "t_stat": (gap - expected) / gap_se if gap_se > 0 else float("inf"),
    }


def deflated_wealth_check(
    model,
    factors: _paths.FactorPaths,
    rule: _portfolios.WeightRule,
    z0: float = 1.0,
    batch_size: int = 512,
    workers: int = 1,
) -> dict:
    """Sample mean of L(T) Z(T) / B(T) against Z(0): the deflated wealth of
    any portfolio is a supermartingale, so the mean must not exceed the
    start by more than noise."""
    times = factors.grid.times
    horizon = factors.grid.horizon
    bank = math.exp(model.r * horizon)
    a = model.vol.a
    vals = np.empty(factors.n_paths)

    def consume(lo, hi, lx, aux):
        dw = factors.block(lo, hi)
        logl = _deflator_log_terminal_block(model, lx, dw, times, aux)
        w = rule.weight_path(lx, times)
        z = _portfolios.value_from_weights(w, lx, times, z0, a=a)[:, -1]
        vals[lo:hi] = z * np.exp(logl) / bank

    _markets.run_batches(model, factors, consume, batch_size=batch_size, workers=workers)
    mean, se = _compensated_mean_se(vals)
    return {
        "mean": mean,
        "se": se,
        "initial": z0,
        "excess_t": (mean - z0) / se if se > 0 else float("inf"),
    }
