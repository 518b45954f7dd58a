"""Pure-Python twins of the event engine, for audits on small instances.

:func:`replay` mirrors :mod:`linsys._engine` slot for slot and draw for draw,
so for the same generator state it must produce the same trajectory.
:func:`naive_box_run` runs a clock at every site of a box and applies each
event with the plain rules from :mod:`linsys.dynamics`; :func:`thinned_run`
consumes the same event stream but skips sites outside the active set.
"""
from __future__ import annotations

import numpy as np

from .dynamics import (
    DUAL,
    FORWARD,
    ProcessState,
    active_sites,
    apply_event_dual,
    apply_event_forward,
)
from .kernels import KernelLaw
from .lattice import SparseField, iter_box


class _Slots:
    def __init__(self, channels: int):
        self.cells: list[tuple] = []
        self.vals: list[list[float]] = []
        self.cover: list[int] = []
        self.pos: dict[tuple, int] = {}
        self.channels = channels

    def push(self, cell):
        self.pos[cell] = len(self.cells)
        self.cells.append(cell)
        self.vals.append([0.0] * self.channels)
        self.cover.append(0)
        return len(self.cells) - 1

    def pop(self, slot):
        last = len(self.cells) - 1
        del self.pos[self.cells[slot]]
        if slot != last:
            moved = self.cells[last]
            self.cells[slot] = moved
            self.pos[moved] = slot
            self.vals[slot] = self.vals[last]
            self.cover[slot] = self.cover[last]
        self.cells.pop()
        self.vals.pop()
        self.cover.pop()

    def occupied(self, slot):
        return any(v > 0.0 for v in self.vals[slot])


def _add(a, b):
    return tuple(x + y for x, y in zip(a, b))


def _sub(a, b):
    return tuple(x - y for x, y in zip(a, b))


def replay(law: KernelLaw, init: list[SparseField], t_end: float, rng: np.random.Generator, kind: str = FORWARD):
    """Reference trajectory; returns (per-channel SparseFields, events, t)."""
    C = len(init)
    d = law.dimension
    offsets = [tuple(u) for u in law.offsets.tolist()]
    atom_vals = law.values.tolist()
    cdf = np.cumsum(law.probs)
    cdf[-1] = 1.0
    S = _Slots(C)
    keys = sorted(set().union(*[set(f) for f in init]))
    for x in keys:
        v = [f[x] for f in init]
        if not any(w > 0 for w in v):
            continue
        if kind == FORWARD:
            p = S.pos.get(x)
            if p is None:
                p = S.push(x)
            for c in range(C):
                S.vals[p][c] += v[c]
        else:
            p = S.pos.get(x)
            if p is None or not S.occupied(p):
                for u in offsets:
                    o = _sub(x, u)
                    q = S.pos.get(o)
                    if q is None:
                        q = S.push(o)
                    S.cover[q] += 1
                p = S.pos[x]
            for c in range(C):
                S.vals[p][c] += v[c]
    t = 0.0
    events = 0
    while S.cells:
        n = len(S.cells)
        dt = rng.standard_exponential() / n
        if t + dt > t_end:
            break
        t += dt
        i = min(int(rng.random() * n), n - 1)
        u01 = rng.random()
        a = next((j for j in range(len(cdf) - 1) if u01 < cdf[j]), len(cdf) - 1)
        events += 1
        z = S.cells[i]
        K = atom_vals[a]
        if kind == FORWARD:
            v = list(S.vals[i])
            S.vals[i] = [K[0] * w for w in v]
            for j in range(1, len(offsets)):
                if K[j] == 0.0:
                    continue
                cell = _add(z, offsets[j])
                p = S.pos.get(cell)
                if p is None:
                    p = S.push(cell)
                for c in range(C):
                    S.vals[p][c] += K[j] * v[c]
            if not S.occupied(i):
                S.pop(i)
        else:
            s = [0.0] * C
            for j, u in enumerate(offsets):
                if K[j] == 0.0:
                    continue
                p = S.pos.get(_add(z, u))
                if p is not None:
                    for c in range(C):
                        s[c] += K[j] * S.vals[p][c]
            was = S.occupied(i)
            S.vals[i] = s
            now = any(w > 0.0 for w in s)
            if was and not now:
                for u in offsets:
                    q = S.pos[_sub(z, u)]
                    S.cover[q] -= 1
                    if S.cover[q] == 0:
                        S.pop(q)
            elif now and not was:
                for u in offsets:
                    o = _sub(z, u)
                    q = S.pos.get(o)
                    if q is None:
                        q = S.push(o)
                    S.cover[q] += 1
    fields = [
        SparseField(d, {cell: S.vals[p][c] for cell, p in S.pos.items() if S.vals[p][c] > 0.0}) for c in range(C)
    ]
    return fields, events, t


def box_events(law: KernelLaw, box_radius: int, t_end: float, rng: np.random.Generator):
    """Poisson clocks of rate 1 at every box site: list of (t, site, atom)."""
    sites = list(iter_box(law.dimension, box_radius))
    cdf = np.cumsum(law.probs)
    cdf[-1] = 1.0
    out = []
    t = 0.0
    rate = len(sites)
    while True:
        t += rng.standard_exponential() / rate
        if t > t_end:
            return out
        z = sites[min(int(rng.random() * rate), rate - 1)]
        a = int(np.searchsorted(cdf, rng.random(), side="right"))
        out.append((t, z, min(a, law.n_atoms - 1)))


def naive_box_run(law: KernelLaw, init: SparseField, events, kind: str = FORWARD) -> SparseField:
    """Apply every event of the shared stream."""
    state = ProcessState(0.0, init, kind)
    step = apply_event_forward if kind == FORWARD else apply_event_dual
    for t, z, a in events:
        state.t = t
        step(state, z, law.atom(a))
    return state.config


def thinned_run(law: KernelLaw, init: SparseField, events, kind: str = FORWARD):
    """Apply only events at currently active sites; returns (config, applied count)."""
    state = ProcessState(0.0, init, kind)
    step = apply_event_forward if kind == FORWARD else apply_event_dual
    applied = 0
    for t, z, a in events:
        if z in active_sites(state.config, law, kind):
            state.t = t
            step(state, z, law.atom(a))
            applied += 1
    return state.config, applied


__all__ = ["replay", "box_events", "naive_box_run", "thinned_run", "DUAL", "FORWARD"]
