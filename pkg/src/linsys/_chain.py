"""Gillespie engine for the pair chains and their difference chains.

The state is an integer vector: (X, X~) concatenated for a pair chain, the
difference D alone for a difference chain. Rates depend on the state only
through D = X - X~ (or D itself), so moves are tabulated per "special" D
(a finite set containing the interaction region) plus one free table used
everywhere else. Special D are found through a dense lookup on the box
|D|_inf <= rho.

The weight integrand v(D) is constant between jumps, so log e_t is
integrated exactly. Per jump the RNG is consumed as: standard exponential,
then one uniform for the move.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _key(state, pair, d, rho):
    """Lookup index of D in the (2 rho + 1)^d box, or -1 outside it."""
    idx = 0
    mult = 1
    for i in range(d):
        c = state[i] - state[d + i] if pair else state[i]
        if c > rho or c < -rho:
            return -1
        idx += (c + rho) * mult
        mult *= 2 * rho + 1
    return idx


@njit(cache=True, nogil=True)
def _pick(cdf, lo, hi, u):
    # cdf holds running totals within [lo, hi)
    for j in range(lo, hi - 1):
        if u < cdf[j]:
            return j
    return hi - 1


@njit(cache=True, nogil=True)
def run_chain(
    start, pair, d, rho, lookup, ptr, moves, cdf, total, integrand, region,
    free_moves, free_cdf, free_total, times, budget, rng,
    out_state, out_logw, out_occ0, out_last,
):
    """One path; fills per-checkpoint arrays. Returns the number of jumps, or -1 on budget.

    out_occ0[i]: time spent at D = 0 up to times[i];
    out_last[i]: last time up to times[i] at which D was in the region (-1 if never).
    """
    n = start.shape[0]
    s = start.copy()
    t = 0.0
    logw = 0.0
    occ0 = 0.0
    last = -1.0
    jumps = 0
    k = 0
    nt = times.shape[0]
    while k < nt:
        key = _key(s, pair, d, rho)
        sp = lookup[key] if key >= 0 else -1
        if sp >= 0:
            q = total[sp]
            v = integrand[sp]
            at0 = key == lookup.shape[0] // 2
            inreg = region[sp]
        else:
            q = free_total
            v = 0.0
            at0 = False
            inreg = False
        dt = rng.standard_exponential() / q if q > 0.0 else np.inf
        # close every checkpoint passed during this holding interval
        while k < nt and t + dt > times[k]:
            h = times[k] - t
            for i in range(n):
                out_state[k, i] = s[i]
            out_logw[k] = logw + v * h
            out_occ0[k] = occ0 + (h if at0 else 0.0)
            out_last[k] = times[k] if inreg else last
            k += 1
        if k >= nt:
            break
        if jumps >= budget:
            return -1
        t += dt
        logw += v * dt
        if at0:
            occ0 += dt
        if inreg:
            last = t
        u = rng.random() * q
        if sp >= 0:
            j = _pick(cdf, ptr[sp], ptr[sp + 1], u)
            for i in range(n):
                s[i] += moves[j, i]
        else:
            j = _pick(free_cdf, 0, free_cdf.shape[0], u)
            for i in range(n):
                s[i] += free_moves[j, i]
        jumps += 1
    return jumps


@njit(cache=True, nogil=True)
def run_skeleton_returns(start, d, rho, lookup, ptr, moves, cdf, total, free_moves, free_cdf, free_total, t_max, budget, rng):
    """Difference chain from ``start`` until it first hits D = 0 or time ``t_max``.

    Returns the hitting time (inf if none before t_max), or -1.0 on budget.
    """
    n = start.shape[0]
    s = start.copy()
    t = 0.0
    jumps = 0
    origin = lookup.shape[0] // 2
    while True:
        key = _key(s, False, d, rho)
        if key == origin and jumps > 0:
            return t
        sp = lookup[key] if key >= 0 else -1
        q = total[sp] if sp >= 0 else free_total
        if q <= 0.0:
            return np.inf
        t += rng.standard_exponential() / q
        if t > t_max:
            return np.inf
        if jumps >= budget:
            return -1.0
        u = rng.random() * q
        if sp >= 0:
            j = _pick(cdf, ptr[sp], ptr[sp + 1], u)
            for i in range(n):
                s[i] += moves[j, i]
        else:
            j = _pick(free_cdf, 0, free_cdf.shape[0], u)
            for i in range(n):
                s[i] += free_moves[j, i]
        jumps += 1
