"""Event-driven core for the forward and dual linear systems.

Sites live on a dense ``L**d`` grid addressed by C-order linear indices, but
the grid only stores ``pos[cell]``: the slot of the cell in the active list
(-1 when inactive). Values sit in compact arrays in active-list order,
``vals[slot, c]`` for channel ``c``. Channels share every clock and kernel
draw, which is how coupled copies (eta^x and eta^x~ under the same
randomness) are simulated.

Only clocks at active sites run. Forward: the occupied sites. Dual: the sites
``z`` with some occupied ``z + u``, ``u`` a kernel offset; ``cover[slot]``
counts those ``u``. The next event is an exponential race of rate
``n_active`` with the site uniform over the active list.

Per event the RNG is consumed in a fixed order (standard exponential, then
two uniforms for site and atom) so :mod:`linsys._reference` can replay a
trajectory exactly.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

OK = 0
OUT_OF_BOUNDS = 1
BUDGET = 2

RESCALE_AT = 1e150


@njit(cache=True, nogil=True)
def _push(cell, cells, vals, cover, pos, n):
    cells[n] = cell
    pos[cell] = n
    for c in range(vals.shape[1]):
        vals[n, c] = 0.0
    cover[n] = 0
    return n + 1


@njit(cache=True, nogil=True)
def _pop(slot, cells, vals, cover, pos, n):
    """Swap-remove the entry in ``slot``."""
    last = n - 1
    pos[cells[slot]] = -1
    if slot != last:
        moved = cells[last]
        cells[slot] = moved
        pos[moved] = slot
        for c in range(vals.shape[1]):
            vals[slot, c] = vals[last, c]
        cover[slot] = cover[last]
    return last


@njit(cache=True, nogil=True)
def _occupied(vals, slot):
    for c in range(vals.shape[1]):
        if vals[slot, c] > 0.0:
            return True
    return False


@njit(cache=True, nogil=True)
def _pick_atom(cdf, u):
    n = cdf.shape[0]
    for a in range(n - 1):
        if u < cdf[a]:
            return a
    return n - 1


@njit(cache=True, nogil=True)
def place_forward(init_cells, init, cells, vals, cover, pos, state):
    n = state[0]
    for i in range(init_cells.shape[0]):
        cell = init_cells[i]
        p = pos[cell]
        if p < 0:
            n = _push(cell, cells, vals, cover, pos, n)
            p = n - 1
        for c in range(vals.shape[1]):
            vals[p, c] += init[i, c]
        if not _occupied(vals, p):
            n = _pop(p, cells, vals, cover, pos, n)
    state[0] = n


@njit(cache=True, nogil=True)
def _cover_add(z, deltas, cells, vals, cover, pos, n):
    for j in range(deltas.shape[0]):
        other = z - deltas[j]
        p = pos[other]
        if p < 0:
            n = _push(other, cells, vals, cover, pos, n)
            p = n - 1
        cover[p] += 1
    return n


@njit(cache=True, nogil=True)
def _cover_remove(z, deltas, cells, vals, cover, pos, n):
    for j in range(deltas.shape[0]):
        other = z - deltas[j]
        p = pos[other]
        cover[p] -= 1
        if cover[p] == 0:
            n = _pop(p, cells, vals, cover, pos, n)
    return n


@njit(cache=True, nogil=True)
def place_dual(init_cells, init, deltas, cells, vals, cover, pos, state):
    n = state[0]
    for i in range(init_cells.shape[0]):
        cell = init_cells[i]
        occupied = False
        for c in range(init.shape[1]):
            if init[i, c] > 0.0:
                occupied = True
        if not occupied:
            continue
        p = pos[cell]
        was = p >= 0 and _occupied(vals, p)
        if not was:
            n = _cover_add(cell, deltas, cells, vals, cover, pos, n)
            p = pos[cell]
        for c in range(vals.shape[1]):
            vals[p, c] += init[i, c]
    state[0] = n


@njit(cache=True, nogil=True)
def _rescale(vals, n, mass, log_scale):
    f = 1.0 / RESCALE_AT
    for i in range(n):
        for c in range(vals.shape[1]):
            vals[i, c] *= f
    for c in range(mass.shape[0]):
        mass[c] *= f
    log_scale[0] += math.log(RESCALE_AT)


@njit(cache=True, nogil=True)
def _max(a):
    m = 0.0
    for c in range(a.shape[0]):
        if a[c] > m:
            m = a[c]
    return m


@njit(cache=True, nogil=True)
def advance_forward(
    cells, vals, cover, pos, border, deltas, atom_vals, atom_sums, cdf, mass, log_scale, clock, state, t_target,
    budget, rng,
):
    """Run forward events until the next event time exceeds ``t_target``.

    clock = [t]; state = [n_active, n_events]. Returns a status code.
    """
    n = state[0]
    events = state[1]
    nS = deltas.shape[0]
    nC = vals.shape[1]
    t = clock[0]
    status = OK
    v = np.empty(nC)
    while n > 0:
        dt = rng.standard_exponential() / n
        if t + dt > t_target:
            break
        if events >= budget:
            status = BUDGET
            break
        t += dt
        i = int(rng.random() * n)
        if i >= n:
            i = n - 1
        a = _pick_atom(cdf, rng.random())
        events += 1
        z = cells[i]
        for c in range(nC):
            v[c] = vals[i, c]
            vals[i, c] = atom_vals[a, 0] * v[c]
            mass[c] += (atom_sums[a] - 1.0) * v[c]
        for j in range(1, nS):
            w = atom_vals[a, j]
            if w == 0.0:
                continue
            cell = z + deltas[j]
            p = pos[cell]
            if p < 0:
                if border[cell]:
                    status = OUT_OF_BOUNDS
                    break
                n = _push(cell, cells, vals, cover, pos, n)
                p = n - 1
            for c in range(nC):
                vals[p, c] += w * v[c]
        if status != OK:
            break
        if not _occupied(vals, i):
            n = _pop(i, cells, vals, cover, pos, n)
        if _max(mass) > RESCALE_AT:
            _rescale(vals, n, mass, log_scale)
    if status == OK:
        t = t_target
    clock[0] = t
    state[0] = n
    state[1] = events
    return status


@njit(cache=True, nogil=True)
def advance_dual(
    cells, vals, cover, pos, border, deltas, atom_vals, cdf, mass, log_scale, clock, state, t_target, budget, rng
):
    """Dual events: zeta_z <- sum_j K_{u_j} zeta_{z + u_j}."""
    n = state[0]
    events = state[1]
    nS = deltas.shape[0]
    nC = vals.shape[1]
    t = clock[0]
    status = OK
    s = np.empty(nC)
    while n > 0:
        dt = rng.standard_exponential() / n
        if t + dt > t_target:
            break
        if events >= budget:
            status = BUDGET
            break
        t += dt
        i = int(rng.random() * n)
        if i >= n:
            i = n - 1
        a = _pick_atom(cdf, rng.random())
        events += 1
        z = cells[i]
        for c in range(nC):
            s[c] = 0.0
        for j in range(nS):
            w = atom_vals[a, j]
            if w == 0.0:
                continue
            p = pos[z + deltas[j]]
            if p >= 0:
                for c in range(nC):
                    s[c] += w * vals[p, c]
        was = _occupied(vals, i)
        now = False
        for c in range(nC):
            mass[c] += s[c] - vals[i, c]
            vals[i, c] = s[c]
            if s[c] > 0.0:
                now = True
        if was and not now:
            n = _cover_remove(z, deltas, cells, vals, cover, pos, n)
        elif now and not was:
            if border[z]:
                status = OUT_OF_BOUNDS
                break
            n = _cover_add(z, deltas, cells, vals, cover, pos, n)
        if _max(mass) > RESCALE_AT:
            _rescale(vals, n, mass, log_scale)
    if status == OK:
        t = t_target
    clock[0] = t
    state[0] = n
    state[1] = events
    return status


@njit(cache=True, nogil=True)
def gather(cells, vals, n):
    """Occupied entries in active-list order."""
    count = 0
    for i in range(n):
        if _occupied(vals, i):
            count += 1
    out_cells = np.empty(count, np.int64)
    out = np.empty((count, vals.shape[1]))
    k = 0
    for i in range(n):
        if _occupied(vals, i):
            out_cells[k] = cells[i]
            for c in range(vals.shape[1]):
                out[k, c] = vals[i, c]
            k += 1
    return out_cells, out


@njit(cache=True, nogil=True)
def clear(cells, pos, n):
    for i in range(n):
        pos[cells[i]] = -1
