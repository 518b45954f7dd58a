"""Forward and dual linear systems started from finite configurations.

Forward event at site z with kernel draw K::

    eta_z <- K_0 eta_z,    eta_x <- eta_x + K_{x-z} eta_z   (x != z)

Dual (transposed) event::

    zeta_z <- sum_y K_{y-z} zeta_y

The Monte Carlo path runs in :mod:`linsys._engine`; the functions
:func:`apply_event_forward` / :func:`apply_event_dual` are the plain reference
rules used for audits and small examples.
"""
from __future__ import annotations

import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _engine
from .kernels import KernelLaw, moments
from .lattice import SparseField
from .rng import TAG_DUAL, TAG_FORWARD, stream

FORWARD = "forward"
DUAL = "dual"
DEFAULT_BUDGET = 10**7


class SimulationError(RuntimeError):
    pass


@dataclass
class ProcessState:
    """One replica of eta (forward) or zeta (dual) for the reference rules."""

    t: float
    config: SparseField
    kind: str = FORWARD
    rng: np.random.Generator | None = None
    event_count: int = 0


def apply_event_forward(state: ProcessState, z, K: SparseField) -> ProcessState:
    if state.kind != FORWARD:
        raise SimulationError("forward event applied to a dual state")
    z = tuple(z)
    d = state.config.dimension
    v = state.config[z]
    if v == 0.0:
        state.event_count += 1
        return state
    origin = (0,) * d
    entries = dict(state.config.items())
    entries[z] = K[origin] * v
    for u, w in K.items():
        if u == origin:
            continue
        x = tuple(a + b for a, b in zip(z, u))
        entries[x] = entries.get(x, 0.0) + w * v
    state.config = SparseField(d, entries)
    state.event_count += 1
    return state


def apply_event_dual(state: ProcessState, z, K: SparseField) -> ProcessState:
    if state.kind != DUAL:
        raise SimulationError("dual event applied to a forward state")
    z = tuple(z)
    d = state.config.dimension
    new = math.fsum(w * state.config[tuple(a + b for a, b in zip(z, u))] for u, w in K.items())
    entries = dict(state.config.items())
    entries[z] = new
    state.config = SparseField(d, entries)
    state.event_count += 1
    return state


def dual_active_sites(config: SparseField, law: KernelLaw) -> set[tuple]:
    """Sites whose dual clock can change the configuration."""
    offs = [tuple(u) for u in law.offsets.tolist()]
    out = set()
    for y in config:
        for u in offs:
            out.add(tuple(a - b for a, b in zip(y, u)))
    return out


def active_sites(config: SparseField, law: KernelLaw, kind: str) -> set[tuple]:
    return set(config) if kind == FORWARD else dual_active_sites(config, law)


# ---------------------------------------------------------------------------
# snapshots


@dataclass
class NormalizedSnapshot:
    """Normalized configuration e^{-(|k|-1)t} eta_t at time ``t``.

    ``values`` has one column per coupled channel.
    """

    t: float
    sites: np.ndarray
    values: np.ndarray
    mass: np.ndarray
    raw_mass: np.ndarray
    truncated: bool = False

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.mass[0])

    @property
    def alive(self) -> bool:
        return self.sites.shape[0] > 0

    def channel(self, c: int = 0) -> SparseField:
        return SparseField.from_arrays(self.sites, self.values[:, c])

    @property
    def field(self) -> SparseField:
        return self.channel(0)

    def recomputed_mass(self) -> np.ndarray:
        return np.array([math.fsum(col) for col in self.values.T.tolist()]) if self.values.size else np.zeros(self.n_channels)


@dataclass
class SimulationResult:
    snapshots: list[NormalizedSnapshot]
    events: int
    truncated: bool
    grid_size: int


# ---------------------------------------------------------------------------
# grid engine


class _Grid:
    """Dense position map plus compact per-slot storage, reused across replicas."""

    def __init__(self, d: int, L: int, channels: int, margin: int):
        self.d, self.L, self.channels, self.margin = d, L, channels, margin
        n = L**d
        self.center = L // 2
        self.strides = np.array([L ** (d - 1 - i) for i in range(d)], dtype=np.int64)
        self.pos = np.full(n, -1, dtype=np.int32)
        self.cells_buf = np.zeros(n, dtype=np.int64)
        self.vals = np.zeros((n, channels))
        self.cover = np.zeros(n, dtype=np.int32)
        ax = np.arange(L)
        edge = (ax < margin) | (ax >= L - margin)
        border = np.zeros((L,) * d, dtype=np.bool_)
        for i in range(d):
            shape = [1] * d
            shape[i] = L
            border |= edge.reshape(shape)
        self.border = border.reshape(-1)

    def cells(self, sites: np.ndarray) -> np.ndarray:
        return (np.asarray(sites, dtype=np.int64) + self.center) @ self.strides

    def coords(self, cells: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(cells, (self.L,) * self.d), axis=-1).astype(np.int64) - self.center

    def fits(self, sites: np.ndarray) -> bool:
        if sites.size == 0:
            return True
        lo = sites.min() + self.center
        hi = sites.max() + self.center
        return lo >= self.margin and hi < self.L - self.margin


class _LawArrays:
    def __init__(self, law: KernelLaw, d: int):
        self.law = law
        self.offsets = law.offsets
        self.atom_vals = np.ascontiguousarray(law.values, dtype=float)
        self.atom_sums = self.atom_vals.sum(axis=1)
        cdf = np.cumsum(law.probs)
        cdf[-1] = 1.0
        self.cdf = cdf
        self.reach = int(np.abs(law.offsets).max()) if law.offsets.size else 0
        self.growth = moments(law).mass - 1.0


class Simulator:
    """Runs replicas of one law; holds a grid that only ever grows."""

    def __init__(self, law: KernelLaw, kind: str | None = None, channels: int = 1, grid: int = 0):
        self.law = law
        self.kind = kind or (DUAL if law.is_dual else FORWARD)
        if self.kind not in (FORWARD, DUAL):
            raise SimulationError(f"unknown process kind {self.kind!r}")
        self.channels = channels
        self.arrays = _LawArrays(law, law.dimension)
        self.margin = (2 if self.kind == DUAL else 1) * max(self.arrays.reach, 1)
        self._grid: _Grid | None = None
        self._min_L = grid

    def _ensure(self, init_sites: np.ndarray) -> _Grid:
        d = self.law.dimension
        g = self._grid
        if g is not None and g.fits(init_sites) and g.L >= self._min_L:
            return g
        span = int(np.abs(init_sites).max()) if init_sites.size else 0
        base = 2 * (span + self.margin) + (32 if d >= 3 else 128)
        L = max(base, self._min_L, g.L if g else 0)
        self._grid = _Grid(d, L, self.channels, self.margin)
        return self._grid

    def _grow(self) -> None:
        g = self._grid
        new = int(math.ceil(g.L * (1.5 if self.law.dimension >= 3 else 2.0)))
        self._min_L = new
        self._grid = _Grid(g.d, new, self.channels, self.margin)

    def run(
        self,
        init_sites: np.ndarray,
        init_vals: np.ndarray,
        times: Sequence[float],
        rng_factory: Callable[[], np.random.Generator],
        budget: int = DEFAULT_BUDGET,
        on_snapshot: Callable[[NormalizedSnapshot], object] | None = None,
    ):
        """Simulate one replica; returns (snapshots or reduced values, events, truncated)."""
        init_sites = np.asarray(init_sites, dtype=np.int64).reshape(-1, self.law.dimension)
        init_vals = np.asarray(init_vals, dtype=float).reshape(len(init_sites), self.channels)
        if np.any(init_vals < 0):
            raise SimulationError("initial configuration must be non-negative")
        times = [float(t) for t in times]
        if any(b < a for a, b in zip(times, times[1:])) or (times and times[0] < 0):
            raise SimulationError("snapshot times must be non-negative and sorted")
        while True:
            g = self._ensure(init_sites)
            result = self._attempt(g, init_sites, init_vals, times, rng_factory(), budget, on_snapshot)
            if result is not None:
                return result
            self._grow()

    def _attempt(self, g, init_sites, init_vals, times, rng, budget, on_snapshot):
        A = self.arrays
        deltas = g.cells(A.offsets) - g.cells(np.zeros((1, g.d), dtype=np.int64))[0]
        init_cells = g.cells(init_sites)
        state = np.zeros(2, dtype=np.int64)
        if self.kind == FORWARD:
            _engine.place_forward(init_cells, init_vals, g.cells_buf, g.vals, g.cover, g.pos, state)
        else:
            _engine.place_dual(init_cells, init_vals, deltas, g.cells_buf, g.vals, g.cover, g.pos, state)
        mass = init_vals.sum(axis=0).astype(float)
        log_scale = np.zeros(1)
        clock = np.zeros(1)
        out = []
        truncated = False
        try:
            for t in times:
                if not truncated:
                    if self.kind == FORWARD:
                        status = _engine.advance_forward(
                            g.cells_buf, g.vals, g.cover, g.pos, g.border, deltas, A.atom_vals, A.atom_sums,
                            A.cdf, mass, log_scale, clock, state, t, budget, rng,
                        )
                    else:
                        status = _engine.advance_dual(
                            g.cells_buf, g.vals, g.cover, g.pos, g.border, deltas, A.atom_vals, A.cdf,
                            mass, log_scale, clock, state, t, budget, rng,
                        )
                    if status == _engine.OUT_OF_BOUNDS:
                        return None
                    truncated = status == _engine.BUDGET
                snap = self._snapshot(g, state, mass, log_scale, t, truncated)
                out.append(on_snapshot(snap) if on_snapshot else snap)
            return out, int(state[1]), truncated
        finally:
            _engine.clear(g.cells_buf, g.pos, int(state[0]))

    def _snapshot(self, g, state, mass, log_scale, t, truncated) -> NormalizedSnapshot:
        cells, vals = _engine.gather(g.cells_buf, g.vals, int(state[0]))
        # log-space normalization e^{log_scale - (|k|-1) t}
        log_norm = log_scale[0] - self.arrays.growth * t
        factor = math.exp(log_norm)
        raw = mass * math.exp(log_scale[0]) if log_scale[0] < 700 else np.full_like(mass, np.inf)
        return NormalizedSnapshot(
            t=t,
            sites=g.coords(cells),
            values=vals * factor,
            mass=mass * factor,
            raw_mass=raw,
            truncated=truncated,
        )

    @property
    def grid_size(self) -> int:
        return self._grid.L if self._grid else 0


def _init_arrays(init, channels: int):
    if isinstance(init, SparseField):
        sites, vals = init.to_arrays()
        return sites, vals.reshape(-1, 1)
    # sequence of SparseFields = coupled channels
    fields = list(init)
    d = fields[0].dimension
    keys = sorted(set().union(*[set(f) for f in fields]))
    sites = np.array(keys, dtype=np.int64).reshape(len(keys), d)
    vals = np.array([[f[x] for f in fields] for x in keys], dtype=float).reshape(len(keys), len(fields))
    return sites, vals


def simulate(
    law: KernelLaw,
    init,
    horizon: float,
    snapshot_times: Sequence[float] | None = None,
    rng: np.random.Generator | None = None,
    kind: str | None = None,
    budget: int = DEFAULT_BUDGET,
) -> SimulationResult:
    """Run one replica from ``init`` up to ``horizon``.

    ``init`` is a SparseField, or a list of SparseFields simulated as coupled
    channels under shared randomness.
    """
    if rng is None:
        rng = np.random.default_rng()
    times = sorted(set(list(snapshot_times or []) + [horizon]))
    if times and times[-1] > horizon:
        raise SimulationError("snapshot times beyond the horizon")
    channels = 1 if isinstance(init, SparseField) else len(init)
    sites, vals = _init_arrays(init, channels)
    sim = Simulator(law, kind, channels)
    # the grid may be rebuilt; replay from a saved generator state
    saved = rng.bit_generator.state

    def factory():
        rng.bit_generator.state = saved
        return rng

    snaps, events, truncated = sim.run(sites, vals, times, factory, budget)
    return SimulationResult(snaps, events, truncated, sim.grid_size)


# ---------------------------------------------------------------------------
# replicas


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("LINSYS_THREADS", "1")))
    except ValueError:
        return 1


def run_replicas(
    law: KernelLaw,
    init,
    times: Sequence[float],
    n_replicas: int,
    seed: int,
    kind: str | None = None,
    reducer: Callable[[NormalizedSnapshot], object] | None = None,
    threads: int | None = None,
    budget: int = DEFAULT_BUDGET,
    tag: int | None = None,
    start: int = 0,
) -> list:
    """Simulate replicas ``start .. start+n-1``; replica i uses stream (seed, tag, i).

    Returns, per replica, a list with one entry per time: the snapshot, or
    ``reducer(snapshot)`` when a reducer is given. Results are in replica
    order regardless of ``threads``.
    """
    kind = kind or (DUAL if law.is_dual else FORWARD)
    tag = tag if tag is not None else (TAG_DUAL if kind == DUAL else TAG_FORWARD)
    channels = 1 if isinstance(init, SparseField) else len(init)
    sites, vals = _init_arrays(init, channels)
    times = sorted(float(t) for t in times)
    threads = threads or default_threads()
    local = threading.local()
    out = [None] * n_replicas

    def one(i: int):
        sim = getattr(local, "sim", None)
        if sim is None:
            sim = local.sim = Simulator(law, kind, channels)
        snaps, _, _ = sim.run(sites, vals, times, lambda: stream(seed, tag, start + i), budget, reducer)
        out[i] = snaps

    if threads == 1:
        for i in range(n_replicas):
            one(i)
    else:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(one, range(n_replicas)))
    return out


# ---------------------------------------------------------------------------
# survival


@dataclass
class SurvivalStats:
    replicas: int
    survivors: int
    survival_freq: float
    mean_mass: float
    var_mass: float
    mean_mass_survived: float
    var_mass_survived: float
    truncated: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "replicas", "survivors", "survival_freq", "mean_mass", "var_mass",
            "mean_mass_survived", "var_mass_survived", "truncated")}


def survival_stats(final) -> SurvivalStats:
    """Survival frequency and mass moments at a common horizon.

    ``final`` is a sequence of snapshots (one per replica) or of
    ``(mass, alive)`` pairs.
    """
    rows = []
    truncated = 0
    for s in final:
        if isinstance(s, NormalizedSnapshot):
            rows.append((s.total_mass, s.alive))
            truncated += int(s.truncated)
        else:
            rows.append((float(s[0]), bool(s[1])))
    if not rows:
        raise SimulationError("survival statistics need at least one replica")
    mass = np.array([r[0] for r in rows])
    alive = np.array([r[1] for r in rows])
    n = len(rows)
    ns = int(alive.sum())
    surv = mass[alive]
    return SurvivalStats(
        replicas=n,
        survivors=ns,
        survival_freq=ns / n,
        mean_mass=float(mass.mean()),
        var_mass=float(mass.var(ddof=1)) if n > 1 else 0.0,
        mean_mass_survived=float(surv.mean()) if ns else 0.0,
        var_mass_survived=float(surv.var(ddof=1)) if ns > 1 else 0.0,
        truncated=truncated,
    )


def mean_and_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
