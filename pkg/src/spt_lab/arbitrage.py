"""Monte Carlo verification of relative-arbitrage constructions.

Each study simulates a batch of market paths, computes per-path wealth
comparisons, and reduces them to fractions plus worst-case slacks.  A
"probability one" claim is tested as: the comparison holds on every path,
with the worst per-path slack reported.  Inequalities that are exact in
continuous time are asserted elsewhere with a discretization budget of a
few multiples of the measured one-step-scheme residual at the same step
size; the studies here only measure and report.

Per-path reductions happen inside fixed-size batches; cross-path
reductions run once over full preallocated arrays, so results do not
depend on worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from . import markets as _markets
from . import paths as _paths
from . import portfolios as _portfolios

__all__ = [
    "ArbitrageStudy",
    "threshold_horizon",
    "mirror_exponent",
    "master_formula_check",
    "master_formula_order_study",
    "outperformance_study",
    "slack_monotonicity_probe",
    "mirror_study",
    "mirror_identity_order_study",
    "dominance_study",
    "dominance_refinement_study",
]


@dataclass(frozen=True)
class ArbitrageStudy:
    """Reduced record of one pathwise-comparison experiment."""

    n_paths: int
    terminal_log_ratio: np.ndarray   # per path, log of the wealth ratio at T
    fraction: float                  # paths where the tested comparison holds
    slack: np.ndarray                # per path, LHS - RHS of the bound
    worst_path: int                  # index attaining the smallest slack

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise InvalidArgumentError("fraction must lie in [0, 1]")
        if self.slack.shape[0] != self.n_paths:
            raise InvalidArgumentError("need one slack entry per path")


def threshold_horizon(n: int, p: float, eps: float, delta: float) -> float:
    """Horizon beyond which the concavely reweighted portfolio must lead:
    2 log(n) / (p * eps * delta)."""
    if n < 2 or not 0 < p < 1 or eps <= 0 or not 0 < delta < 1:
        raise InvalidArgumentError("need n >= 2, p in (0,1), eps > 0, delta in (0,1)")
    return 2.0 * np.log(n) / (p * eps * delta)


def mirror_exponent(eps: float, delta: float, horizon: float, top0: float) -> float:
    """Smallest mirror exponent that forces underperformance by the horizon:
    1 + 2 log(1/top0) / (eps * delta**2 * horizon)."""
    if eps <= 0 or not 0 < delta < 1 or horizon <= 0 or not 0 < top0 < 1:
        raise InvalidArgumentError("bad mirror threshold inputs")
    return 1.0 + 2.0 * np.log(1.0 / top0) / (eps * delta**2 * horizon)


def _gross_log_values(w: np.ndarray, lx: np.ndarray) -> np.ndarray:
    """log wealth path of an all-long weight path under the gross-return
    compounding scheme, starting from log wealth 0."""
    dlx = np.diff(lx, axis=-2)
    gross = np.sum(w[..., :-1, :] * np.exp(dlx), axis=-1)
    out = np.zeros(gross.shape[:-1] + (gross.shape[-1] + 1,))
    np.cumsum(np.log(gross), axis=-1, out=out[..., 1:])
    return out


# ---------------------------------------------------------------------------
# master formula
# ---------------------------------------------------------------------------

def master_formula_check(
    model, factors: _paths.FactorPaths, p: float, batch_size: int = 256, workers: int = 1
) -> dict:
    """Decompose the reweighted portfolio's lead over the market.

    Left side: terminal log wealth ratio.  Right side: log change of the
    concentration measure plus (1 - p) times the quadrature of the
    portfolio's excess growth.  The quadrature reads the excess growth off
    each step's realized log-weight moves (their variance under the
    left-endpoint weights); the measure change already carries the same
    realized second-order terms, so they cancel and the residual shrinks
    at first order in the step.  The model-covariance quadrature, whose
    mismatch with the realized one fluctuates at half order, is reported
    alongside.  The measure term can never fall below
    -(1-p)/p * log n; its margin over that floor is returned too.
    """
    if not 0 < p < 1:
        raise InvalidArgumentError("p must lie in (0, 1)")
    n = model.n
    a = model.vol.a
    dt = factors.grid.step_sizes
    npaths = factors.n_paths
    lhs = np.empty(npaths)
    rhs = np.empty(npaths)
    rhs_model_cov = np.empty(npaths)
    floor_margin = np.empty(npaths)

    floor = -(1.0 - p) / p * np.log(n)

    def consume(lo, hi, lx, aux):
        mu = _portfolios.market_weights(lx)
        pi = _portfolios.diversity_weighted(mu, p)
        lr = _gross_log_values(pi, lx) - _gross_log_values(mu, lx)
        lhs[lo:hi] = lr[:, -1]
        dterm = (1.0 / p) * (
            np.log(np.sum(mu[:, -1, :] ** p, axis=-1))
            - np.log(np.sum(mu[:, 0, :] ** p, axis=-1))
        )
        dlm = np.diff(np.log(mu), axis=1)
        pim = pi[:, :-1, :]
        m1 = np.sum(pim * dlm, axis=2)
        realized = 0.5 * (np.sum(pim * dlm * dlm, axis=2) - m1 * m1)
        rhs[lo:hi] = dterm + (1.0 - p) * np.sum(realized, axis=1)
        growth = np.sum(_portfolios.excess_growth(pim, a) * dt, axis=-1)
        rhs_model_cov[lo:hi] = dterm + (1.0 - p) * growth
        floor_margin[lo:hi] = dterm - floor

    _markets.run_batches(model, factors, consume, batch_size=batch_size, workers=workers)
    res = lhs - rhs
    res_model = lhs - rhs_model_cov
    return {
        "lhs": lhs,
        "rhs": rhs,
        "residual": res,
        "max_abs_residual": float(np.abs(res).max()),
        "mean_abs_residual": float(np.abs(res).mean()),
        "residual_model_cov": res_model,
        "max_abs_residual_model_cov": float(np.abs(res_model).max()),
        "floor_margin_min": float(floor_margin.min()),
    }


def master_formula_order_study(
    model,
    p: float,
    horizon: float,
    steps_fine: int,
    n_paths: int,
    master_seed: int,
    refine: int = 2,
) -> dict:
    """Self-convergence of the master-formula residual on shared noise.

    The fine grid's factor increments are summed pairwise to drive the
    coarse run, so both step sizes see the same underlying path and the
    residual ratio estimates the weak order directly.
    """
    grid = _paths.make_grid(horizon, steps_fine)
    fine = _paths.generate_factors(grid, model.m, n_paths, master_seed)
    coarse = fine.coarsened(refine)
    r_fine = master_formula_check(model, fine, p)
    r_coarse = master_formula_check(model, coarse, p)
    ratio = r_coarse["mean_abs_residual"] / max(r_fine["mean_abs_residual"], 1e-300)
    return {
        "dt_fine": grid.dt,
        "dt_coarse": coarse.grid.dt,
        "residual_fine": r_fine["mean_abs_residual"],
        "residual_coarse": r_coarse["mean_abs_residual"],
        "max_residual_fine": r_fine["max_abs_residual"],
        "ratio": float(ratio),
        "order": float(np.log(ratio) / np.log(refine)),
    }


# ---------------------------------------------------------------------------
# outperformance past the threshold horizon
# ---------------------------------------------------------------------------

def outperformance_study(
    model,
    factors: _paths.FactorPaths,
    p: float,
    delta: float | None = None,
    batch_size: int = 128,
    workers: int = 1,
) -> dict:
    """Reweighted portfolio versus the market beyond the threshold horizon.

    The pathwise lower bound is evaluated with each path's own realized
    average diversity margin (left-endpoint average of the top weight), so
    it is a per-path conditional check rather than a model hypothesis.
    Also counts violations of the pointwise weight comparisons: the
    reweighted top weight never exceeds the market's, the reweighted
    bottom never falls under the market's.
    """
    if not 0 < p < 1:
        raise InvalidArgumentError("p must lie in (0, 1)")
    n = model.n
    eps = model.vol.eps
    dt = factors.grid.step_sizes
    horizon = factors.grid.horizon
    npaths = factors.n_paths

    term = np.empty(npaths)
    slack = np.empty(npaths)
    delta_avg = np.empty(npaths)
    delta_max = np.empty(npaths)
    order_viol = np.zeros(npaths, dtype=np.int64)

    def consume(lo, hi, lx, aux):
        mu = _portfolios.market_weights(lx)
        pi = _portfolios.diversity_weighted(mu, p)
        lr = _gross_log_values(pi, lx) - _gross_log_values(mu, lx)
        term[lo:hi] = lr[:, -1]
        top = mu.max(axis=2)
        top_avg = np.sum(top[:, :-1] * dt, axis=1) / horizon
        d = 1.0 - top_avg
        delta_avg[lo:hi] = d
        delta_max[lo:hi] = 1.0 - top.max(axis=1)
        bound = (1.0 - p) * (eps * d * horizon / 2.0 - np.log(n) / p)
        slack[lo:hi] = lr[:, -1] - bound
        hi_ok = pi.max(axis=2) <= mu.max(axis=2) + 1e-12
        lo_ok = pi.min(axis=2) >= mu.min(axis=2) - 1e-12
        order_viol[lo:hi] = np.sum(~(hi_ok & lo_ok), axis=1)

    _markets.run_batches(model, factors, consume, batch_size=batch_size, workers=workers)
    if delta is not None:
        # fixed-margin variant of the bound, for certified models
        bound = (1.0 - p) * (eps * delta * horizon / 2.0 - np.log(n) / p)
        fixed_slack = term - bound
    else:
        fixed_slack = None
    worst = int(np.argmin(slack))
    study = ArbitrageStudy(
        n_paths=npaths,
        terminal_log_ratio=term,
        fraction=float(np.mean(term > 0.0)),
        slack=slack,
        worst_path=worst,
    )
    return {
        "study": study,
        "delta_avg": delta_avg,
        "delta_max": delta_max,
        "fixed_slack": fixed_slack,
        "min_slack": float(slack.min()),
        "weight_order_violations": int(order_viol.sum()),
    }


def slack_monotonicity_probe(
    model, p: float, horizons, n_steps_per_unit: int, n_paths: int, master_seed: int
) -> list:
    """Minimum pathwise bound slack for a ladder of horizons, shared seeds."""
    out = []
    for t in horizons:
        grid = _paths.make_grid(float(t), int(round(n_steps_per_unit * t)))
        factors = _paths.generate_factors(grid, model.m, n_paths, master_seed)
        res = outperformance_study(model, factors, p)
        out.append(res["min_slack"])
    return out


# ---------------------------------------------------------------------------
# mirror constructions
# ---------------------------------------------------------------------------

def mirror_study(
    model,
    factors: _paths.FactorPaths,
    p: float | None = None,
    margin: float = 1.1,
    batch_size: int = 128,
    workers: int = 1,
) -> dict:
    """Short-the-market mirror of the first stock, plus its all-long wraps.

    With exponent p above the threshold, the mirror must finish strictly
    behind the market on every path.  Along the way the study records, per
    path:

    * the running ceiling gap: log wealth ratio minus p times the log move
      of the first stock's weight (nonpositive in continuous time);
    * the accumulated relative variance of the first stock versus the
      market, whose lower bound powers the threshold;
    * the worst sign margins of the two buy-and-hold wraps: the one that
      drowns the mirror in market holdings (underperformer) and the one
      that shorts the mirror against market holdings (outperformer); both
      must stay all-long, and their terminal values must straddle the
      market's, scaled by their starting capital.
    """
    if model.kind not in ("diverse", "patched"):
        raise InvalidArgumentError("mirror study expects a diversity-controlled model")
    delta = model.params["delta"]
    eps = model.vol.eps
    times = factors.grid.times
    dt = factors.grid.step_sizes
    horizon = factors.grid.horizon
    top0 = float(np.max(model.x0 / model.x0.sum()))
    beta = top0
    p_star = mirror_exponent(eps, delta, horizon, top0)
    if p is None:
        p = margin * p_star
    if p <= 1:
        raise InvalidArgumentError("mirror exponent must exceed 1")
    a = model.vol.a
    n = model.n
    npaths = factors.n_paths
    e1 = np.zeros(n)
    e1[0] = 1.0
    cap82 = (p - 1.0) / beta**p
    z82 = 1.0 + cap82
    zeta83 = p / beta**p - 1.0

    term = np.empty(npaths)
    ceil_gap_max = np.empty(npaths)
    tau_int = np.empty(npaths)
    wrap82_margin = np.empty(npaths)
    wrap83_margin = np.empty(npaths)
    base_term_ratio = np.empty(npaths)

    def consume(lo, hi, lx, aux):
        mu = _portfolios.market_weights(lx)
        what = _portfolios.mirror_weights(e1, mu, p)
        lr = _portfolios.relative_log_value(what, lx, times, a)
        term[lo:hi] = lr[:, -1]
        mu1 = mu[..., 0]
        lead = np.log(mu1) - np.log(mu1[:, :1])
        ceil_gap_max[lo:hi] = np.max(lr - p * lead, axis=1)
        diff = e1 - mu[:, :-1, :]
        tau = np.einsum("bki,ij,bkj->bk", diff, a, diff)
        tau_int[lo:hi] = np.sum(tau * dt, axis=1)
        base_term_ratio[lo:hi] = mu1[:, -1] / mu1[:, 0]
        ratio = np.exp(lr)
        # wrap weights stay nonnegative iff these margins do
        wrap82_margin[lo:hi] = np.min(cap82 - (p - 1.0) * ratio, axis=1)
        wrap83_margin[lo:hi] = np.min(
            (p / beta**p) * mu1 - (p - (p - 1.0) * mu1) * ratio, axis=1
        )

    _markets.run_batches(model, factors, consume, batch_size=batch_size, workers=workers)

    eta_needed = 2.0 * np.log(1.0 / beta) / (p - 1.0)
    ratio_t = np.exp(term)
    wrap82_term_gap = (1.0 - ratio_t) / z82       # positive iff value < z * market
    wrap83_term_gap = (1.0 - ratio_t) / zeta83    # positive iff value > zeta * market
    worst = int(np.argmax(term))
    study = ArbitrageStudy(
        n_paths=npaths,
        terminal_log_ratio=term,
        fraction=float(np.mean(term < 0.0)),
        slack=-term,
        worst_path=worst,
    )
    return {
        "study": study,
        "p": float(p),
        "p_threshold": float(p_star),
        "beta": beta,
        "eta_model": float(eps * delta**2 * horizon),
        "eta_needed": float(eta_needed),
        "tau_integral": tau_int,
        "tau_integral_min": float(tau_int.min()),
        "hypothesis_fraction": float(
            np.mean((tau_int >= eta_needed) & (base_term_ratio <= 1.0 / beta + 1e-12))
        ),
        "ceiling_gap_max": ceil_gap_max,
        "worst_ceiling_gap": float(ceil_gap_max.max()),
        "wrap82_weight_margin_min": float(wrap82_margin.min()),
        "wrap83_weight_margin_min": float(wrap83_margin.min()),
        "wrap82_capital": float(z82),
        "wrap83_capital": float(zeta83),
        "wrap82_term_gap": wrap82_term_gap,
        "wrap83_term_gap": wrap83_term_gap,
        "wrap82_fraction": float(np.mean(wrap82_term_gap > 0.0)),
        "wrap83_fraction": float(np.mean(wrap83_term_gap > 0.0)),
    }


def mirror_identity_order_study(
    model,
    p: float,
    horizon: float,
    steps_fine: int,
    n_paths: int,
    master_seed: int,
    refine: int = 2,
) -> dict:
    """Self-convergence of the mirror value identity on shared noise.

    The identity ties the mirror's log wealth ratio to p times the base
    portfolio's plus a relative-variance integral.  Valued step-for-step
    the discrete identity is exact, so the study quadratures the integral
    with the trapezoid rule instead; the leftover is pure time-integration
    error and shrinks at first order.
    """
    grid = _paths.make_grid(horizon, steps_fine)
    fine = _paths.generate_factors(grid, model.m, n_paths, master_seed)
    a = model.vol.a
    n = model.n
    e1 = np.zeros(n)
    e1[0] = 1.0

    def residuals(factors):
        times = factors.grid.times
        npaths = factors.n_paths
        out = np.empty(npaths)

        def consume(lo, hi, lx, aux):
            mu = _portfolios.market_weights(lx)
            what = _portfolios.mirror_weights(e1, mu, p)
            lhs = _portfolios.relative_log_value(what, lx, times, a)[:, -1]
            base = _portfolios.relative_log_value(
                np.broadcast_to(e1, lx.shape).copy(), lx, times, a
            )[:, -1]
            diff = e1 - mu
            tau = np.einsum("bki,ij,bkj->bk", diff, a, diff)
            integral = np.trapezoid(tau, times, axis=1)
            out[lo:hi] = np.abs(lhs - (p * base + 0.5 * p * (1.0 - p) * integral))

        _markets.run_batches(model, factors, consume, batch_size=256)
        return out

    r_fine = residuals(fine)
    r_coarse = residuals(fine.coarsened(refine))
    ratio = float(r_coarse.mean() / max(r_fine.mean(), 1e-300))
    return {
        "dt_fine": grid.dt,
        "residual_fine": float(r_fine.mean()),
        "residual_coarse": float(r_coarse.mean()),
        "ratio": ratio,
        "order": float(np.log(ratio) / np.log(refine)),
    }


# ---------------------------------------------------------------------------
# instantaneous dominance
# ---------------------------------------------------------------------------

def dominance_study(
    model, factors: _paths.FactorPaths, batch_size: int = 512, workers: int = 1
) -> dict:
    """All-in on the runaway stock until it gives back half its head start.

    On each path the strategy holds only the second stock throughout the
    early phase, handing back to the market at the first grid time the log
    lead drops to half the deterministic head start (the early power drift,
    in force while the lead stays inside the inner band) or at the end of
    that phase, whichever comes first.  Up to the handback the lead sits at
    or above a strictly positive barrier, so in continuous time the
    strategy beats the market at every positive time with certainty; on a
    grid the only failures are single steps that dive through the barrier
    and zero at once, and those vanish under refinement.  Both stocks start
    equal, so the strategy is ahead at every positive grid time exactly
    when the lead is positive at every grid time up to the handback;
    afterwards the wealth ratio is frozen.
    """
    if model.kind != "dominance":
        raise InvalidArgumentError("dominance study needs the dominance model")
    npaths = factors.n_paths
    k_steps = factors.grid.n_steps
    eta = model.params["eta"]
    alpha = model.params["alpha"]
    barrier = 0.5 * np.power(factors.grid.times[1:], alpha)

    min_lead = np.empty(npaths)
    switch_idx = np.zeros(npaths, dtype=np.int64)
    exit_idx = np.zeros(npaths, dtype=np.int64)
    switch_found = np.zeros(npaths, dtype=bool)
    confinement_breaches = np.zeros(npaths, dtype=np.int64)
    capped = np.zeros(npaths, dtype=np.int64)

    def consume(lo, hi, lx, aux):
        y = lx[..., 1] - lx[..., 0]
        hit = y[:, 1:] <= barrier[None, :]
        found = hit.any(axis=1)
        t2 = np.where(found, np.argmax(hit, axis=1) + 1, k_steps)
        t1 = aux["exit_index"]
        exit_state = np.where(t1 >= 0, np.maximum(t1, 1), k_steps)
        handback = np.minimum(t2, exit_state)
        switch_found[lo:hi] = handback < k_steps
        switch_idx[lo:hi] = handback
        runmin = np.minimum.accumulate(y[:, 1:], axis=1)
        min_lead[lo:hi] = runmin[np.arange(y.shape[0]), handback - 1]
        exit_idx[lo:hi] = t1
        after_exit = (
            np.arange(1, k_steps + 1)[None, :] > np.where(t1 >= 0, t1, k_steps)[:, None]
        )
        confinement_breaches[lo:hi] = np.sum(
            after_exit & (np.abs(y[:, 1:]) >= eta), axis=1
        )
        capped[lo:hi] = aux["capped_steps"]

    _markets.run_batches(model, factors, consume, batch_size=batch_size, workers=workers)
    ok = min_lead > 0.0
    return {
        "n_paths": npaths,
        "fraction": float(np.mean(ok)),
        "min_lead": min_lead,
        "worst_lead": float(min_lead.min()),
        "switch_index": switch_idx,
        "switch_found_fraction": float(np.mean(switch_found)),
        "exit_index": exit_idx,
        "confinement_breaches": int(confinement_breaches.sum()),
        "capped_steps": int(capped.sum()),
    }


def dominance_refinement_study(
    model,
    horizon: float,
    steps_fine: int,
    n_paths: int,
    master_seed: int,
    t_min: float = 1e-8,
    refine: int = 2,
) -> dict:
    """Dominance fractions on a fine early grid and its pairwise coarsening."""
    grid = _paths.geometric_grid(horizon, steps_fine, t_min)
    fine = _paths.generate_factors(grid, model.m, n_paths, master_seed)
    res_fine = dominance_study(model, fine)
    res_coarse = dominance_study(model, fine.coarsened(refine))
    return {
        "fraction_fine": res_fine["fraction"],
        "fraction_coarse": res_coarse["fraction"],
        "worst_lead_fine": res_fine["worst_lead"],
        "worst_lead_coarse": res_coarse["worst_lead"],
    }
