"""Hot integration loops with two interchangeable backends.

Every market kind that needs per-step state gets two implementations of the
same stepping arithmetic:

* a scalar-loop form, compiled with numba when available, and
* a vectorized numpy form that steps through time on a whole batch at once.

The active backend is chosen once at import: set ``SPT_LAB_NUMBA=0`` (or
``false``/``no``/``off``) to force the numpy fallback.  Both backends are
deterministic run to run; bit patterns may differ between backends in the
last ulp, so reproducibility guarantees hold per backend.

Kernel contract: ``logx0 (n,)``, ``dv (B, K, n)`` volatility increments
already multiplied by the dispersion matrix, ``dt (K,)`` step sizes,
``times (K+1,)`` grid.  Kernels return the full log-price batch
``(B, K+1, n)`` plus kind-specific per-path records.  No cross-path
reduction happens inside a kernel, so results never depend on how paths
were split into batches.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("SPT_LAB_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _flag not in ("0", "false", "no", "off")

try:
    if not NUMBA_REQUESTED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # pragma: no cover - trivial passthrough
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def backend_name() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# repelled-leader market (singular log-drift on the current top stock)
# ---------------------------------------------------------------------------

def _repelled_leader_loops(logx0, dv, dt, g, delta, big_m, q_floor, step_cap):
    B, K, n = dv.shape
    out = np.empty((B, K + 1, n))
    caps = np.zeros(B, np.int64)
    log_barrier = np.log(1.0 - delta)
    for b in range(B):
        for i in range(n):
            out[b, 0, i] = logx0[i]
        for k in range(K):
            lead = 0
            mx = out[b, k, 0]
            for i in range(1, n):
                if out[b, k, i] > mx:
                    mx = out[b, k, i]
                    lead = i
            s = 0.0
            for i in range(n):
                s += np.exp(out[b, k, i] - mx)
            # s = 1/mu_lead, so this is log((1-delta)/mu_lead)
            q = log_barrier + np.log(s)
            if q < q_floor:
                q = q_floor
            for i in range(n):
                if i == lead:
                    gam = -(big_m / delta) / q
                else:
                    gam = g[i]
                disp = gam * dt[k]
                if disp > step_cap:
                    disp = step_cap
                    caps[b] += 1
                elif disp < -step_cap:
                    disp = -step_cap
                    caps[b] += 1
                out[b, k + 1, i] = out[b, k, i] + disp + dv[b, k, i]
    return out, caps


def _repelled_leader_vec(logx0, dv, dt, g, delta, big_m, q_floor, step_cap):
    B, K, n = dv.shape
    out = np.empty((B, K + 1, n))
    out[:, 0, :] = logx0
    caps = np.zeros(B, np.int64)
    log_barrier = np.log(1.0 - delta)
    rows = np.arange(B)
    cur = out[:, 0, :].copy()
    for k in range(K):
        lead = np.argmax(cur, axis=1)
        mx = cur[rows, lead]
        s = np.exp(cur - mx[:, None]).sum(axis=1)
        q = np.maximum(log_barrier + np.log(s), q_floor)
        gam = np.repeat(g[None, :], B, axis=0)
        gam[rows, lead] = -(big_m / delta) / q
        disp = gam * dt[k]
        over = np.abs(disp) > step_cap
        caps += over.sum(axis=1)
        np.clip(disp, -step_cap, step_cap, out=disp)
        cur = cur + disp + dv[:, k, :]
        out[:, k + 1, :] = cur
    return out, caps


# ---------------------------------------------------------------------------
# two-stock mean-reverting spread market
# ---------------------------------------------------------------------------

def _spread_reversion_loops(logx0, dv, dt, times, alpha, switch_time, a_half):
    B, K, _ = dv.shape
    out = np.empty((B, K + 1, 2))
    for b in range(B):
        out[b, 0, 0] = logx0[0]
        out[b, 0, 1] = logx0[1]
        for k in range(K):
            z = out[b, k, 1] - out[b, k, 0]
            b2 = -alpha * z if times[k] >= switch_time else 0.0
            out[b, k + 1, 0] = out[b, k, 0] - a_half * dt[k] + dv[b, k, 0]
            out[b, k + 1, 1] = out[b, k, 1] + (b2 - a_half) * dt[k] + dv[b, k, 1]
    return out


def _spread_reversion_vec(logx0, dv, dt, times, alpha, switch_time, a_half):
    B, K, _ = dv.shape
    out = np.empty((B, K + 1, 2))
    out[:, 0, :] = logx0
    cur0 = out[:, 0, 0].copy()
    cur1 = out[:, 0, 1].copy()
    for k in range(K):
        if times[k] >= switch_time:
            b2 = -alpha * (cur1 - cur0)
        else:
            b2 = 0.0
        cur0 = cur0 - a_half * dt[k] + dv[:, k, 0]
        cur1 = cur1 + (b2 - a_half) * dt[k] + dv[:, k, 1]
        out[:, k + 1, 0] = cur0
        out[:, k + 1, 1] = cur1
    return out


# ---------------------------------------------------------------------------
# repelled-leader drift patched in only after the top weight first hits a
# trigger level (and only if that happens in the first half of the horizon)
# ---------------------------------------------------------------------------

def _patched_trigger_loops(
    logx0, dv, dt, times, g, delta, big_m, q_floor, step_cap, a_diag, eta, half_t
):
    B, K, n = dv.shape
    out = np.empty((B, K + 1, n))
    caps = np.zeros(B, np.int64)
    s_time = np.full(B, np.inf)
    log_barrier = np.log(1.0 - delta)
    trigger = 1.0 / (1.0 - eta)  # mu_max >= 1-eta  <=>  sum exp(logx-mx) <= this
    for b in range(B):
        for i in range(n):
            out[b, 0, i] = logx0[i]
        for k in range(K):
            lead = 0
            mx = out[b, k, 0]
            for i in range(1, n):
                if out[b, k, i] > mx:
                    mx = out[b, k, i]
                    lead = i
            s = 0.0
            for i in range(n):
                s += np.exp(out[b, k, i] - mx)
            if s_time[b] == np.inf and s <= trigger:
                s_time[b] = times[k]
            active = s_time[b] <= half_t and times[k] >= s_time[b]
            q = log_barrier + np.log(s)
            if q < q_floor:
                q = q_floor
            for i in range(n):
                if active:
                    if i == lead:
                        gam = -(big_m / delta) / q
                    else:
                        gam = g[i]
                else:
                    gam = -0.5 * a_diag[i]
                disp = gam * dt[k]
                if disp > step_cap:
                    disp = step_cap
                    caps[b] += 1
                elif disp < -step_cap:
                    disp = -step_cap
                    caps[b] += 1
                out[b, k + 1, i] = out[b, k, i] + disp + dv[b, k, i]
    return out, caps, s_time


def _patched_trigger_vec(
    logx0, dv, dt, times, g, delta, big_m, q_floor, step_cap, a_diag, eta, half_t
):
    B, K, n = dv.shape
    out = np.empty((B, K + 1, n))
    out[:, 0, :] = logx0
    caps = np.zeros(B, np.int64)
    s_time = np.full(B, np.inf)
    log_barrier = np.log(1.0 - delta)
    trigger = 1.0 / (1.0 - eta)
    rows = np.arange(B)
    cur = out[:, 0, :].copy()
    base = -0.5 * a_diag
    for k in range(K):
        lead = np.argmax(cur, axis=1)
        mx = cur[rows, lead]
        s = np.exp(cur - mx[:, None]).sum(axis=1)
        hit = (s_time == np.inf) & (s <= trigger)
        s_time[hit] = times[k]
        active = (s_time <= half_t) & (times[k] >= s_time)
        q = np.maximum(log_barrier + np.log(s), q_floor)
        gam = np.repeat(base[None, :], B, axis=0)
        gam[active] = g
        gam[rows[active], lead[active]] = -(big_m / delta) / q[active]
        disp = gam * dt[k]
        over = np.abs(disp) > step_cap
        caps += over.sum(axis=1)
        np.clip(disp, -step_cap, step_cap, out=disp)
        cur = cur + disp + dv[:, k, :]
        out[:, k + 1, :] = cur
    return out, caps, s_time


# ---------------------------------------------------------------------------
# two-stock upstart market: stock 2 carries an integrable power drift until
# the log gap first leaves (-eta', eta'), then a confining two-pole drift
# ---------------------------------------------------------------------------

def _upstart_loops(logx0, dv, dt, times, alpha, eta, eta_prime, cdrift, step_cap):
    B, K, _ = dv.shape
    out = np.empty((B, K + 1, 2))
    big_gamma = np.empty((B, K + 1))
    t1_idx = np.full(B, -1, np.int64)
    caps = np.zeros(B, np.int64)
    margin = 1e-9 * eta
    for b in range(B):
        out[b, 0, 0] = logx0[0]
        out[b, 0, 1] = logx0[1]
        big_gamma[b, 0] = 0.0
        confined = False
        for k in range(K):
            y = out[b, k, 1] - out[b, k, 0]
            if not confined and (y >= eta_prime or y <= -eta_prime):
                confined = True
                t1_idx[b] = k
            if confined:
                yc = y
                if yc > eta - margin:
                    yc = eta - margin
                elif yc < -eta + margin:
                    yc = -eta + margin
                dgam = cdrift * (1.0 / (eta + yc) - 1.0 / (eta - yc)) * dt[k]
                if dgam > step_cap:
                    dgam = step_cap
                    caps[b] += 1
                elif dgam < -step_cap:
                    dgam = -step_cap
                    caps[b] += 1
            else:
                # exact integral of the power drift over the step
                dgam = times[k + 1] ** alpha - times[k] ** alpha
            out[b, k + 1, 0] = out[b, k, 0] + dv[b, k, 0]
            out[b, k + 1, 1] = out[b, k, 1] + dgam + dv[b, k, 1]
            big_gamma[b, k + 1] = big_gamma[b, k] + dgam
    return out, big_gamma, t1_idx, caps


def _upstart_vec(logx0, dv, dt, times, alpha, eta, eta_prime, cdrift, step_cap):
    B, K, _ = dv.shape
    out = np.empty((B, K + 1, 2))
    big_gamma = np.empty((B, K + 1))
    out[:, 0, :] = logx0
    big_gamma[:, 0] = 0.0
    t1_idx = np.full(B, -1, np.int64)
    caps = np.zeros(B, np.int64)
    confined = np.zeros(B, bool)
    margin = 1e-9 * eta
    cur0 = out[:, 0, 0].copy()
    cur1 = out[:, 0, 1].copy()
    gcum = big_gamma[:, 0].copy()
    for k in range(K):
        y = cur1 - cur0
        newly = ~confined & (np.abs(y) >= eta_prime)
        t1_idx[newly] = k
        confined |= newly
        dgam = np.full(B, times[k + 1] ** alpha - times[k] ** alpha)
        if confined.any():
            yc = np.clip(y[confined], -eta + margin, eta - margin)
            push = cdrift * (1.0 / (eta + yc) - 1.0 / (eta - yc)) * dt[k]
            over = np.abs(push) > step_cap
            caps[confined] += over
            dgam[confined] = np.clip(push, -step_cap, step_cap)
        cur0 = cur0 + dv[:, k, 0]
        cur1 = cur1 + dgam + dv[:, k, 1]
        gcum = gcum + dgam
        out[:, k + 1, 0] = cur0
        out[:, k + 1, 1] = cur1
        big_gamma[:, k + 1] = gcum
    return out, big_gamma, t1_idx, caps


_LOOP_IMPLS = {
    "diverse": _repelled_leader_loops,
    "ou_pair": _spread_reversion_loops,
    "patched": _patched_trigger_loops,
    "dominance": _upstart_loops,
}

_VEC_IMPLS = {
    "diverse": _repelled_leader_vec,
    "ou_pair": _spread_reversion_vec,
    "patched": _patched_trigger_vec,
    "dominance": _upstart_vec,
}

_compiled: dict = {}


def numba_kernels():
    """Compile (once) and return the numba versions of the loop kernels."""
    if not HAVE_NUMBA:
        raise RuntimeError("numba backend unavailable or disabled")
    if not _compiled:
        for name, fn in _LOOP_IMPLS.items():
            _compiled[name] = njit(cache=True, nogil=True)(fn)
    return _compiled


def numpy_kernels():
    return dict(_VEC_IMPLS)


def active_kernels():
    return numba_kernels() if HAVE_NUMBA else numpy_kernels()
