"""Market models: n stocks driven by m Brownian factors.

All models evolve log prices by an Euler step

    log X_i(t_{k+1}) = log X_i(t_k) + growth_i(t_k, state) dt_k + (sigma dW_k)_i

with constant dispersion ``sigma``.  Growth rates are log-drifts; arithmetic
rates of return are ``b_i = growth_i + a_ii / 2`` with ``a = sigma sigma^T``.
State-dependent growth rules read the left-endpoint state only, so a path is
a pure function of (model, factor increments).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import IntegrationFailureError, InvalidArgumentError, InvalidModelError
from .paths import FactorPaths, PathGrid

__all__ = [
    "Dispersion",
    "MarketModel",
    "PricePath",
    "constant_market",
    "diverse_market",
    "ou_two_stock",
    "patched_weakly_diverse",
    "instantaneous_dominance_market",
    "integrate_log_euler",
    "simulate_block",
    "run_batches",
    "growth_rates_along",
    "rates_of_return_along",
]

# Per-step displacement cap on singular drifts.  The continuous dynamics never
# reach the pole, so the cap only binds on discretization overshoots; capped
# steps are counted and reported, never silent.
DRIFT_STEP_CAP = 0.25

# Floor for the log-distance to the barrier inside singular drift rules.
Q_FLOOR = 1e-8


@dataclass(frozen=True)
class Dispersion:
    """Constant dispersion matrix with its ellipticity certificate.

    ``eps`` and ``big_m`` are the extreme eigenvalues of ``a = sigma sigma^T``:
    every unit vector xi satisfies eps <= xi' a xi <= big_m.  A rank-deficient
    sigma (eps ~ 0) is rejected.
    """

    sigma: np.ndarray
    a: np.ndarray = field(init=False)
    eps: float = field(init=False)
    big_m: float = field(init=False)

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if s.ndim != 2 or not np.isfinite(s).all():
            raise InvalidModelError("sigma must be a finite 2-d matrix")
        n, m = s.shape
        if m < n:
            raise InvalidModelError("need at least as many factors as stocks")
        a = s @ s.T
        w = np.linalg.eigvalsh(a)
        if w[0] <= 1e-12:
            raise InvalidModelError(
                f"sigma sigma^T is numerically singular (min eigenvalue {w[0]:.3e})"
            )
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "eps", float(w[0]))
        object.__setattr__(self, "big_m", float(w[-1]))

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    @property
    def m(self) -> int:
        return self.sigma.shape[1]


@dataclass(frozen=True)
class MarketModel:
    kind: str
    vol: Dispersion
    x0: np.ndarray
    r: float = 0.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.vol.n,):
            raise InvalidModelError(f"x0 must have shape ({self.vol.n},)")
        if not (np.isfinite(x0).all() and (x0 > 0).all()):
            raise InvalidModelError("initial prices must be positive and finite")
        if not np.isfinite(self.r):
            raise InvalidModelError("r must be finite")
        object.__setattr__(self, "x0", x0)

    @property
    def n(self) -> int:
        return self.vol.n

    @property
    def m(self) -> int:
        return self.vol.m


@dataclass
class PricePath:
    """One simulated path: log prices on the grid plus integration records."""

    grid: PathGrid
    log_prices: np.ndarray  # (K+1, n)
    aux: dict

    @property
    def prices(self) -> np.ndarray:
        return np.exp(self.log_prices)

    @property
    def weights(self) -> np.ndarray:
        lx = self.log_prices
        mx = lx.max(axis=1, keepdims=True)
        e = np.exp(lx - mx)
        return e / e.sum(axis=1, keepdims=True)


def _as_vector(v, n, name):
    out = np.asarray(v, dtype=float)
    if out.shape == ():
        out = np.full(n, float(out))
    if out.shape != (n,):
        raise InvalidModelError(f"{name} must be a scalar or length-{n} vector")
    if not np.isfinite(out).all():
        raise InvalidModelError(f"{name} must be finite")
    return out


def constant_market(b, sigma, x0, r: float = 0.0) -> MarketModel:
    """Constant-coefficient market (geometric Brownian motions).

    Parameters
    ----------
    b : array_like
        Arithmetic rates of return, one per stock.
    sigma : array_like
        Dispersion matrix, shape (n, m) with m >= n.
    x0 : array_like
        Positive initial prices.
    r : float
        Money-market rate.
    """
    vol = Dispersion(sigma)
    b = _as_vector(b, vol.n, "b")
    return MarketModel(kind="constant", vol=vol, x0=x0, r=r, params={"b": b})


def diverse_market(
    sigma,
    g,
    delta: float,
    x0,
    big_m: float | None = None,
    r: float = 0.0,
    q_floor: float = Q_FLOOR,
    step_cap: float = DRIFT_STEP_CAP,
) -> MarketModel:
    """Market whose current leader is log-repelled from the weight barrier.

    Non-leading stocks carry constant growth rates ``g``; the stock holding
    the largest weight (lowest index on ties) gets growth
    ``-(big_m/delta) / log((1-delta)/mu_max)``, which diverges as the top
    weight approaches ``1 - delta`` and keeps the market diverse.

    Parameters
    ----------
    sigma : array_like
        Dispersion matrix; its certificate upper bound is the default drift
        scale ``big_m``.
    g : array_like
        Growth rates for non-leading stocks.
    delta : float
        Barrier parameter in (0, 1): the top weight is repelled from 1-delta.
    x0 : array_like
        Initial prices; the initial top weight must sit below the barrier.
    big_m : float, optional
        Drift scale; must be at least the certificate upper bound.
    """
    vol = Dispersion(sigma)
    g = _as_vector(g, vol.n, "g")
    if not 0 < delta < 1:
        raise InvalidModelError("delta must lie in (0, 1)")
    if big_m is None:
        big_m = vol.big_m
    if big_m < vol.big_m * (1 - 1e-12):
        raise InvalidModelError(
            f"big_m {big_m} is below the certificate upper bound {vol.big_m}"
        )
    x0v = _as_vector(x0, vol.n, "x0")
    if x0v.max() / x0v.sum() >= 1 - delta:
        raise InvalidModelError("initial top weight already at or past the barrier")
    if q_floor <= 0 or step_cap <= 0:
        raise InvalidModelError("q_floor and step_cap must be positive")
    return MarketModel(
        kind="diverse",
        vol=vol,
        x0=x0,
        r=r,
        params={
            "g": g,
            "delta": float(delta),
            "big_m": float(big_m),
            "q_floor": float(q_floor),
            "step_cap": float(step_cap),
        },
    )


def ou_two_stock(
    alpha: float, x0=(1.0, 1.0), switch_time: float = 1.0, r: float = 0.0
) -> MarketModel:
    """Two stocks with unit quadratic variation of the log spread.

    Stock 1 has zero rate of return.  After ``switch_time`` stock 2's rate
    of return is ``-alpha * Z(t)`` where Z is the log price spread, making Z
    an Ornstein-Uhlenbeck process; before the switch Z is a standard
    Brownian motion.  With alpha = 1/2 the spread is stationary N(0, 1) from
    t = switch_time on.
    """
    if not alpha > 0:
        raise InvalidModelError("alpha must be positive")
    if switch_time < 0:
        raise InvalidModelError("switch_time must be nonnegative")
    sigma = np.diag([1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0)])
    return MarketModel(
        kind="ou_pair",
        vol=Dispersion(sigma),
        x0=x0,
        r=r,
        params={"alpha": float(alpha), "switch_time": float(switch_time)},
    )


def patched_weakly_diverse(base: MarketModel, eta: float, horizon: float) -> MarketModel:
    """Drop the repelling drift until the top weight first reaches 1 - eta.

    The repelling drift of ``base`` is switched on at the first time S the
    top weight hits 1 - eta, and only if S lands in the first half of the
    horizon; otherwise every stock keeps zero rate of return for the whole
    run.  The result is weakly diverse for half the base barrier parameter
    even though single time points can concentrate.
    """
    if base.kind != "diverse":
        raise InvalidModelError("patched construction needs a diverse base model")
    delta = base.params["delta"]
    if not delta < eta < 0.5:
        raise InvalidModelError("need base delta < eta < 1/2")
    if not horizon > 0:
        raise InvalidModelError("horizon must be positive")
    params = dict(base.params)
    params.update({"eta": float(eta), "horizon": float(horizon)})
    return MarketModel(kind="patched", vol=base.vol, x0=base.x0, r=base.r, params=params)


def instantaneous_dominance_market(
    alpha: float,
    delta: float = 0.2,
    delta_prime: float = 0.35,
    cdrift: float = 1.0,
    r: float = 0.0,
    step_cap: float = DRIFT_STEP_CAP,
) -> MarketModel:
    """Two equal-priced stocks where stock 2 takes the lead immediately.

    Stock 2's cumulative log drift is t**alpha (alpha in (0, 1/2)) until the
    log gap Y first leaves (-eta', eta'); afterwards a two-pole drift
    confines Y inside (-eta, eta), with eta = log((1-delta)/delta).  The
    power drift beats the Brownian fluctuation at small times, so stock 2
    dominates right away, yet the market stays diverse.
    """
    if not 0 < alpha < 0.5:
        raise InvalidModelError("alpha must lie in (0, 1/2)")
    if not 0 < delta < delta_prime < 0.5:
        raise InvalidModelError("need 0 < delta < delta_prime < 1/2")
    eta = float(np.log((1 - delta) / delta))
    eta_prime = float(np.log((1 - delta_prime) / delta_prime))
    if cdrift <= 0 or step_cap <= 0:
        raise InvalidModelError("cdrift and step_cap must be positive")
    return MarketModel(
        kind="dominance",
        vol=Dispersion(np.eye(2)),
        x0=(1.0, 1.0),
        r=r,
        params={
            "alpha": float(alpha),
            "delta": float(delta),
            "delta_prime": float(delta_prime),
            "eta": eta,
            "eta_prime": eta_prime,
            "cdrift": float(cdrift),
            "step_cap": float(step_cap),
        },
    )


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def _vol_increments(model: MarketModel, dw: np.ndarray) -> np.ndarray:
    # per-path matmul keeps the arithmetic independent of batch size
    B = dw.shape[0]
    out = np.empty((B, dw.shape[1], model.n))
    st = model.vol.sigma.T
    for b in range(B):
        np.matmul(dw[b], st, out=out[b])
    return out


def simulate_block(model: MarketModel, factors: FactorPaths, lo: int, hi: int):
    """Integrate paths lo..hi-1.  Returns (log_prices (B, K+1, n), aux dict).

    Pure in (model, factors, path index): identical inputs give identical
    float results regardless of batch boundaries or calling thread.
    """
    if factors.m != model.m:
        raise InvalidArgumentError(
            f"factors carry {factors.m} factors but the model needs {model.m}"
        )
    grid = factors.grid
    dw = factors.block(lo, hi)
    dv = _vol_increments(model, dw)
    dt = grid.step_sizes
    times = grid.times
    logx0 = np.log(model.x0)
    p = model.params
    aux: dict = {}

    if model.kind == "constant":
        growth = p["b"] - 0.5 * np.diag(model.vol.a)
        drift = growth[None, None, :] * dt[None, :, None]
        logx = np.concatenate(
            [
                np.broadcast_to(logx0, (hi - lo, 1, model.n)),
                logx0[None, None, :] + np.cumsum(drift + dv, axis=1),
            ],
            axis=1,
        )
    else:
        kern = _kernels.active_kernels()[model.kind]
        if model.kind == "diverse":
            logx, caps = kern(
                logx0, dv, dt, p["g"], p["delta"], p["big_m"], p["q_floor"], p["step_cap"]
            )
            aux["capped_steps"] = caps
        elif model.kind == "ou_pair":
            a_half = 0.5 * float(model.vol.a[0, 0])
            logx = kern(logx0, dv, dt, times, p["alpha"], p["switch_time"], a_half)
        elif model.kind == "patched":
            logx, caps, s_time = kern(
                logx0,
                dv,
                dt,
                times,
                p["g"],
                p["delta"],
                p["big_m"],
                p["q_floor"],
                p["step_cap"],
                np.diag(model.vol.a).copy(),
                p["eta"],
                0.5 * p["horizon"],
            )
            aux["capped_steps"] = caps
            aux["trigger_time"] = s_time
        elif model.kind == "dominance":
            logx, big_gamma, t1_idx, caps = kern(
                logx0,
                dv,
                dt,
                times,
                p["alpha"],
                p["eta"],
                p["eta_prime"],
                p["cdrift"],
                p["step_cap"],
            )
            aux["cumulative_drift"] = big_gamma
            aux["exit_index"] = t1_idx
            aux["capped_steps"] = caps
        else:
            raise InvalidModelError(f"unknown model kind {model.kind!r}")

    if not np.isfinite(logx).all():
        bad = np.argwhere(~np.isfinite(logx))
        b, k, _ = bad[0]
        raise IntegrationFailureError(
            f"non-finite log price at path {lo + b}, step {k}",
            path_index=int(lo + b),
            step=int(k),
        )
    return logx, aux


def integrate_log_euler(model: MarketModel, factors: FactorPaths, path_index: int) -> PricePath:
    """Single-path convenience wrapper around ``simulate_block``."""
    logx, aux = simulate_block(model, factors, path_index, path_index + 1)
    return PricePath(
        grid=factors.grid,
        log_prices=logx[0],
        aux={k: v[0] for k, v in aux.items()},
    )


# batch size is fixed (not derived from worker count) so that the arithmetic
# seen by any single path never depends on parallelism
DEFAULT_BATCH = 1024


def run_batches(
    model: MarketModel,
    factors: FactorPaths,
    consume,
    batch_size: int = DEFAULT_BATCH,
    workers: int = 1,
):
    """Integrate all paths in fixed batches and feed each to ``consume``.

    ``consume(lo, hi, log_prices, aux)`` must only write to per-path slots
    of preallocated arrays; under ``workers > 1`` batches run concurrently
    but batch boundaries (and hence all float results) are unchanged.
    """
    n = factors.n_paths
    spans = [(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]
    if workers <= 1:
        for lo, hi in spans:
            logx, aux = simulate_block(model, factors, lo, hi)
            consume(lo, hi, logx, aux)
        return

    def job(span):
        lo, hi = span
        logx, aux = simulate_block(model, factors, lo, hi)
        consume(lo, hi, logx, aux)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for fut in [pool.submit(job, s) for s in spans]:
            fut.result()


# ---------------------------------------------------------------------------
# pointwise drift reconstruction along a stored path
# ---------------------------------------------------------------------------

def growth_rates_along(model: MarketModel, log_prices: np.ndarray, times: np.ndarray, aux: dict | None = None) -> np.ndarray:
    """Growth rates gamma_i(t_k) the integrator applied at each grid point.

    Drift caps are not reflected here: this is the model's defining rule,
    which checkers compare against theory.  Shape (K+1, n) for a single path
    or (B, K+1, n) for a batch.
    """
    lx = np.asarray(log_prices, dtype=float)
    single = lx.ndim == 2
    if single:
        lx = lx[None]
    B, K1, n = lx.shape
    p = model.params
    if model.kind == "constant":
        g = np.broadcast_to(p["b"] - 0.5 * np.diag(model.vol.a), (B, K1, n)).copy()
    elif model.kind == "diverse":
        g = _diverse_growth(lx, p)
    elif model.kind == "ou_pair":
        a_half = 0.5 * float(model.vol.a[0, 0])
        z = lx[:, :, 1] - lx[:, :, 0]
        b2 = np.where(times[None, :] >= p["switch_time"], -p["alpha"] * z, 0.0)
        g = np.empty((B, K1, 2))
        g[:, :, 0] = -a_half
        g[:, :, 1] = b2 - a_half
    elif model.kind == "patched":
        if aux is None or "trigger_time" not in aux:
            raise InvalidArgumentError(
                "patched models need the integration aux records to rebuild drifts"
            )
        s_time = np.atleast_1d(np.asarray(aux["trigger_time"], dtype=float))
        active = (s_time[:, None] <= 0.5 * p["horizon"]) & (
            times[None, :] >= s_time[:, None]
        )
        g = np.where(
            active[:, :, None],
            _diverse_growth(lx, p),
            np.broadcast_to(-0.5 * np.diag(model.vol.a), (B, K1, n)),
        )
    else:
        raise InvalidArgumentError(
            f"growth rates along a path are not defined for kind {model.kind!r}"
        )
    return g[0] if single else g


def _diverse_growth(lx: np.ndarray, p: dict) -> np.ndarray:
    B, K1, n = lx.shape
    mx = lx.max(axis=2)
    lead = lx.argmax(axis=2)
    s = np.exp(lx - mx[:, :, None]).sum(axis=2)
    q = np.maximum(np.log(1.0 - p["delta"]) + np.log(s), p["q_floor"])
    g = np.broadcast_to(p["g"], (B, K1, n)).copy()
    bb, kk = np.meshgrid(np.arange(B), np.arange(K1), indexing="ij")
    g[bb, kk, lead] = -(p["big_m"] / p["delta"]) / q
    return g


def rates_of_return_along(model: MarketModel, log_prices: np.ndarray, times: np.ndarray, aux: dict | None = None) -> np.ndarray:
    """Arithmetic rates of return b_i(t_k) = gamma_i(t_k) + a_ii / 2."""
    g = growth_rates_along(model, log_prices, times, aux)
    return g + 0.5 * np.diag(model.vol.a)
