"""Sparse fields on Z^d and the Green function of the symmetrized walk.

A :class:`SparseField` is a finitely supported real function on the integer
lattice. Box-shaped data (Green tables, h-functions) are plain numpy arrays of
shape ``(2R+1,) * d`` with the origin at index ``(R,) * d``.

The Green function of the continuous-time walk with jump rates
``s_u = (k_u + k_{-u}) / 2`` is

    G_S(x) = (2 pi)^{-d} \\int_{[-pi, pi]^d} cos(theta . x) / phi(theta) dtheta,
    phi(theta) = sum_u k_u (1 - cos(theta . u)),

evaluated with a midpoint product rule whose nodes are offset by half a cell,
so the pole at theta = 0 is never sampled. The midpoint sum is a shifted DFT
and is computed with a single FFT per grid.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np


class LatticeError(ValueError):
    pass


class DivergentGreenError(LatticeError):
    """The walk is recurrent (d < 3) or degenerate, so G_S is infinite."""


Site = tuple


def _site(x, d: int) -> tuple:
    s = tuple(int(v) for v in x)
    if len(s) != d:
        raise LatticeError(f"site {s} has length {len(s)}, expected dimension {d}")
    return s


class SparseField:
    """Finitely supported map Z^d -> R with no stored zeros."""

    __slots__ = ("dimension", "_entries")

    def __init__(self, dimension: int, entries: Mapping | Iterable | None = None):
        if dimension < 1:
            raise LatticeError("dimension must be >= 1")
        self.dimension = int(dimension)
        self._entries: dict[tuple, float] = {}
        if entries is None:
            return
        items = entries.items() if isinstance(entries, Mapping) else entries
        for x, v in items:
            s = _site(x, self.dimension)
            v = self._entries.get(s, 0.0) + float(v)
            if v == 0.0:
                self._entries.pop(s, None)
            else:
                self._entries[s] = v

    @classmethod
    def delta(cls, dimension: int, site=None, value: float = 1.0) -> "SparseField":
        site = (0,) * dimension if site is None else site
        return cls(dimension, {tuple(site): value})

    @classmethod
    def from_arrays(cls, sites: np.ndarray, values: np.ndarray) -> "SparseField":
        sites = np.asarray(sites)
        out = cls(sites.shape[1])
        for s, v in zip(map(tuple, sites.tolist()), np.asarray(values, dtype=float).tolist()):
            if v != 0.0:
                out._entries[s] = out._entries.get(s, 0.0) + v
        return out

    # mapping protocol
    def __getitem__(self, x) -> float:
        return self._entries.get(tuple(x), 0.0)

    def __contains__(self, x) -> bool:
        return tuple(x) in self._entries

    def __iter__(self) -> Iterator[tuple]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def support(self) -> list[tuple]:
        return sorted(self._entries)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        keys = self.support()
        sites = np.array(keys, dtype=np.int64).reshape(len(keys), self.dimension)
        values = np.array([self._entries[k] for k in keys], dtype=float)
        return sites, values

    # algebra
    def total(self) -> float:
        return math.fsum(self._entries.values())

    def norm1(self) -> float:
        return math.fsum(abs(v) for v in self._entries.values())

    def reflect(self) -> "SparseField":
        """The field x -> f(-x)."""
        return SparseField(self.dimension, {tuple(-c for c in x): v for x, v in self._entries.items()})

    def scale(self, c: float) -> "SparseField":
        return SparseField(self.dimension, {x: c * v for x, v in self._entries.items()})

    def shift(self, a) -> "SparseField":
        a = _site(a, self.dimension)
        return SparseField(
            self.dimension, {tuple(xi + ai for xi, ai in zip(x, a)): v for x, v in self._entries.items()}
        )

    def __add__(self, other: "SparseField") -> "SparseField":
        _check_dims(self, other)
        out = SparseField(self.dimension, self._entries)
        for x, v in other.items():
            w = out._entries.get(x, 0.0) + v
            if w == 0.0:
                out._entries.pop(x, None)
            else:
                out._entries[x] = w
        return out

    def __neg__(self) -> "SparseField":
        return self.scale(-1.0)

    def __sub__(self, other: "SparseField") -> "SparseField":
        return self + (-other)

    def radius(self) -> int:
        """Largest l1-norm in the support (0 for the empty field)."""
        return max((sum(abs(c) for c in x) for x in self._entries), default=0)

    def linf_radius(self) -> int:
        return max((max(abs(c) for c in x) for x in self._entries), default=0)

    def prune(self, tol: float) -> "SparseField":
        return SparseField(self.dimension, {x: v for x, v in self._entries.items() if abs(v) > tol})

    def allclose(self, other: "SparseField", atol: float) -> bool:
        _check_dims(self, other)
        keys = set(self._entries) | set(other._entries)
        return all(abs(self[x] - other[x]) <= atol for x in keys)

    def to_json(self) -> list[dict]:
        return [{"site": list(x), "value": v} for x, v in sorted(self._entries.items())]

    @classmethod
    def from_json(cls, dimension: int, rows: Iterable[Mapping]) -> "SparseField":
        return cls(dimension, [(r["site"], r["value"]) for r in rows])

    def __eq__(self, other) -> bool:
        return isinstance(other, SparseField) and self.dimension == other.dimension and self._entries == other._entries

    def __repr__(self) -> str:
        body = ", ".join(f"{x}: {v:.6g}" for x, v in sorted(self._entries.items())[:8])
        more = ", ..." if len(self) > 8 else ""
        return f"SparseField(d={self.dimension}, {{{body}{more}}})"


def _check_dims(f: SparseField, g: SparseField) -> None:
    if f.dimension != g.dimension:
        raise LatticeError(f"dimension mismatch: {f.dimension} vs {g.dimension}")


def inner(f: SparseField, g: SparseField) -> float:
    """<f, g> = sum_x f_x g_x."""
    _check_dims(f, g)
    if len(f) > len(g):
        f, g = g, f
    return math.fsum(v * g[x] for x, v in f.items())


def convolve(f: SparseField, g: SparseField) -> SparseField:
    """(f * g)_x = sum_y f_{x-y} g_y."""
    _check_dims(f, g)
    acc: dict[tuple, float] = {}
    for x, a in f.items():
        for y, b in g.items():
            z = tuple(xi + yi for xi, yi in zip(x, y))
            acc[z] = acc.get(z, 0.0) + a * b
    return SparseField(f.dimension, acc)


def symmetrized(k: SparseField) -> SparseField:
    """Jump rates (k + k_check)/2 of the symmetrized walk, origin dropped."""
    s = (k + k.reflect()).scale(0.5)
    zero = (0,) * k.dimension
    return SparseField(k.dimension, {x: v for x, v in s.items() if x != zero})


# ---------------------------------------------------------------------------
# box-shaped fields


def box_sites(d: int, R: int) -> np.ndarray:
    """All sites with |x|_inf <= R, in C order of the box array."""
    ax = np.arange(-R, R + 1)
    return np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)


def box_index(x, R: int) -> tuple:
    return tuple(int(c) + R for c in x)


def box_to_field(values: np.ndarray, radius: int | None = None) -> SparseField:
    d = values.ndim
    R = (values.shape[0] - 1) // 2
    r = R if radius is None else radius
    sl = tuple(slice(R - r, R + r + 1) for _ in range(d))
    sites = box_sites(d, r)
    return SparseField.from_arrays(sites, values[sl].reshape(-1))


def crop(values: np.ndarray, radius: int) -> np.ndarray:
    """Copy of the central radius-``radius`` box."""
    R = (values.shape[0] - 1) // 2
    if radius > R:
        raise LatticeError(f"cannot crop radius {R} box to radius {radius}")
    return values[tuple(slice(R - radius, R + radius + 1) for _ in range(values.ndim))].copy()


def shifted(values: np.ndarray, u, radius: int) -> np.ndarray:
    """Box of radius ``radius`` holding h(x + u) for |x|_inf <= radius (a read-only view)."""
    R = (values.shape[0] - 1) // 2
    if radius + max(abs(c) for c in u) > R:
        raise LatticeError(f"shift {tuple(u)} leaves the radius-{R} box")
    view = values[tuple(slice(R - radius + c, R + radius + 1 + c) for c in u)]
    view.flags.writeable = False
    return view


def apply_L_S(k: SparseField, h: np.ndarray, radius: int | None = None) -> np.ndarray:
    """(L_S h)(x) = sum_y (k_{x-y}+k_{y-x})/2 (h(y) - h(x)) on an interior box.

    ``h`` is a box array of radius R. The result has radius ``radius``
    (default: R minus the l_inf reach of the rates); asking for more raises.
    """
    s = symmetrized(k)
    R = (h.shape[0] - 1) // 2
    reach = s.linf_radius()
    r = R - reach if radius is None else radius
    if r < 0 or r + reach > R:
        raise LatticeError(f"evaluation radius {r} plus rate reach {reach} exceeds box radius {R}")
    center = crop(h, r)
    out = np.zeros_like(center)
    for u, w in s.items():
        out += w * (shifted(h, u, r) - center)
    return out


def box_convolve(f: SparseField, values: np.ndarray, radius: int) -> np.ndarray:
    """(f * g)(x) for |x|_inf <= radius, g given as a box array."""
    out = np.zeros((2 * radius + 1,) * values.ndim)
    for y, w in f.items():
        out += w * shifted(values, tuple(-c for c in y), radius)
    return out


# ---------------------------------------------------------------------------
# Green function


def _symbol(s: SparseField, n: int) -> np.ndarray:
    d = s.dimension
    th = -np.pi + (np.arange(n) + 0.5) * (2 * np.pi / n)
    grids = np.meshgrid(*([th] * d), indexing="ij", sparse=True)
    phi = np.zeros((n,) * d)
    for u, w in s.items():
        phase = sum(ui * g for ui, g in zip(u, grids) if ui != 0)
        phi = phi + w * (1.0 - np.cos(phase))
    return phi


def midpoint_green(k: SparseField, R: int, n: int) -> np.ndarray:
    """Raw midpoint-rule values of G_S on the radius-R box with n nodes per axis."""
    d = k.dimension
    if d < 3:
        raise DivergentGreenError(f"d = {d}: the walk is recurrent and G_S diverges")
    s = symmetrized(k)
    if len(s) == 0 or s.total() <= 0.0:
        raise DivergentGreenError("symmetrized rate field vanishes: degenerate walk")
    if 2 * R >= n:
        raise LatticeError(f"box radius {R} too large for {n} nodes per axis")
    phi = _symbol(s, n)
    if phi.min() <= 0.0:
        raise DivergentGreenError("phi vanishes at a quadrature node: walk is not truly d-dimensional")
    F = np.fft.ifftn(1.0 / phi)
    idx = np.arange(-R, R + 1) % n
    block = F[np.ix_(*([idx] * d))]
    a = np.pi / n - np.pi
    ax = np.arange(-R, R + 1)
    phase = sum(np.meshgrid(*([ax] * d), indexing="ij", sparse=True))
    vals = (np.exp(1j * a * phase) * block).real
    # G_S(x) = G_S(-x) holds for the exact integral; remove FFT rounding asymmetry
    return 0.5 * (vals + vals[(slice(None, None, -1),) * d])


@dataclass(frozen=True)
class GreenTable:
    """Tabulated G_S on the box |x|_inf <= R.

    ``values`` is the Richardson combination 2 G_N - G_{N/2} of two midpoint
    grids; ``site_error`` compares it with the same combination one level
    coarser, and ``error_bound`` is its maximum over the box.
    """

    dimension: int
    radius: int
    nodes: int
    values: np.ndarray
    rates: SparseField
    site_error: np.ndarray
    error_bound: float
    meta: dict = field(default_factory=dict)

    def __getitem__(self, x) -> float:
        x = tuple(x)
        if max(abs(c) for c in x) > self.radius:
            raise LatticeError(f"site {x} outside the tabulated radius {self.radius}")
        return float(self.values[box_index(x, self.radius)])

    def error_at(self, x) -> float:
        return float(self.site_error[box_index(x, self.radius)])

    @property
    def origin(self) -> float:
        return self[(0,) * self.dimension]

    def as_field(self, radius: int | None = None) -> SparseField:
        return box_to_field(self.values, radius)

    def box(self, radius: int) -> np.ndarray:
        return crop(self.values, radius)

    def inner(self, f: SparseField) -> float:
        """<f, G_S> for f supported inside the table."""
        if f.linf_radius() > self.radius:
            raise LatticeError(f"field reaches radius {f.linf_radius()} > table radius {self.radius}")
        return math.fsum(v * self[x] for x, v in f.items())

    def inner_error(self, f: SparseField) -> float:
        return math.fsum(abs(v) * self.error_at(x) for x, v in f.items())

    def convolve_box(self, f: SparseField, radius: int | None = None) -> np.ndarray:
        """(f * G_S)(x) on the largest box the table supports."""
        r = self.radius - f.linf_radius() if radius is None else radius
        if r < 0:
            raise LatticeError("table too small for this convolution")
        return box_convolve(f, self.values, r)

    def metadata(self) -> dict:
        return {
            "dimension": self.dimension,
            "radius": self.radius,
            "nodes": self.nodes,
            "error_bound": self.error_bound,
            "rates": self.rates.to_json(),
            **self.meta,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.metadata(), sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(self.dimension)] + ["value"])
        for x, v in zip(box_sites(self.dimension, self.radius).tolist(), self.values.reshape(-1).tolist()):
            w.writerow(x + [repr(v)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GreenTable":
        lines = text.splitlines()
        meta = json.loads(lines[0][2:])
        d, R = meta.pop("dimension"), meta.pop("radius")
        values = np.zeros((2 * R + 1,) * d)
        for row in csv.reader(lines[2:]):
            values[box_index(row[:d], R)] = float(row[d])
        rates = SparseField.from_json(d, meta.pop("rates"))
        bound = meta.pop("error_bound")
        nodes = meta.pop("nodes")
        return cls(d, R, nodes, values, rates, np.full_like(values, bound), bound, meta)


def green(k: SparseField, R: int = 12, n_nodes: int = 128) -> GreenTable:
    """Tabulate G_S for the mean kernel ``k`` on |x|_inf <= R.

    Needs ``n_nodes`` divisible by 4 with ``n_nodes / 4 > 2 R`` so that the
    coarsest grid used for the error estimate still resolves the box.
    """
    if n_nodes % 4:
        raise LatticeError("n_nodes must be divisible by 4")
    if n_nodes // 4 <= 2 * R:
        raise LatticeError(f"n_nodes = {n_nodes} too small for radius {R}: need n_nodes/4 > 2R")
    g1 = midpoint_green(k, R, n_nodes)
    g2 = midpoint_green(k, R, n_nodes // 2)
    g4 = midpoint_green(k, R, n_nodes // 4)
    fine = 2.0 * g1 - g2
    coarse = 2.0 * g2 - g4
    err = np.abs(fine - coarse)
    return GreenTable(
        dimension=k.dimension,
        radius=R,
        nodes=n_nodes,
        values=fine,
        rates=symmetrized(k),
        site_error=err,
        error_bound=float(err.max()),
        meta={"midpoint_error_origin": float(abs(g1 - g2)[(R,) * k.dimension])},
    )


def srw_kernel(d: int, rate: float = 1.0) -> SparseField:
    """Mean kernel with mass rate/(2d) on each unit vector."""
    entries = {}
    for i in range(d):
        for sgn in (1, -1):
            e = [0] * d
            e[i] = sgn
            entries[tuple(e)] = rate / (2 * d)
    return SparseField(d, entries)


def return_probability(d: int, n_nodes: int = 128, with_error: bool = False):
    """Return probability pi_d of the discrete-time simple random walk.

    pi_d = 1 - 1/G(0), G the discrete-time Green function at the origin,
    which equals G_S(0) for the unit-rate continuous-time walk.
    """
    if d < 3:
        raise DivergentGreenError(f"d = {d}: simple random walk is recurrent")
    radius = max(1, n_nodes // 8 - 1)
    table = green(srw_kernel(d), R=min(radius, 2), n_nodes=n_nodes)
    g0 = table.origin
    pi = 1.0 - 1.0 / g0
    if not with_error:
        return pi
    e0 = table.error_at((0,) * d)
    return pi, e0 / (g0 - e0) ** 2


def submultiplicative_violations(table: GreenTable, radius: int | None = None, tol: float | None = None) -> list[tuple]:
    """Pairs (x, y) with G(x+y) G(0) < G(x) G(y) - tol.

    x ranges over |x|_inf <= radius, y over every table site with x + y
    still tabulated.
    """
    d, R = table.dimension, table.radius
    r = R if radius is None else radius
    g0 = table.origin
    tol = 3 * table.error_bound * (g0 + 1.0) if tol is None else tol
    vals = table.values
    bad = []
    for x in iter_box(d, r):
        # y window: |y| <= R and |x + y| <= R
        ysl = tuple(slice(max(-R, -R - c) + R, min(R, R - c) + R + 1) for c in x)
        zsl = tuple(slice(a.start + c, a.stop + c) for a, c in zip(ysl, x))
        gx = vals[box_index(x, R)]
        viol = vals[zsl] * g0 < gx * vals[ysl] - tol
        for idx in np.argwhere(viol):
            y = tuple(int(i + s.start) - R for i, s in zip(idx, ysl))
            bad.append((x, y))
    return bad


def iter_box(d: int, R: int) -> Iterator[tuple]:
    return itertools.product(range(-R, R + 1), repeat=d)
