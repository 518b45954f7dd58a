"""The diffusivity criterion <beta, G_S> < 2 and the h-functions behind it.

Two routes to the verdict are kept apart on purpose: the direct route pairs
the enumerated beta with a Green table of the law's own mean kernel, the
closed-form routes (bcpp, potlatch/smoothing) go through pi_d or through
E[W^2] and <G_S * k, k>. Every comparison against 2 carries the propagated
quadrature error, and a value within that error of 2 is "inconclusive".
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import MomentBundle, bcpp, moments
from .lattice import (
    GreenTable,
    LatticeError,
    SparseField,
    apply_L_S,
    box_convolve,
    box_sites,
    crop,
    green,
    return_probability,
    symmetrized,
)

DIFFUSIVE = "diffusive"
NON_DIFFUSIVE = "non_diffusive"
INCONCLUSIVE = "inconclusive"


class RegimeError(ValueError):
    """Input outside the regime an operation is defined for."""


def verdict_for(value: float, error: float) -> str:
    if value + error < 2.0:
        return DIFFUSIVE
    if value - error >= 2.0:
        return NON_DIFFUSIVE
    return INCONCLUSIVE


@dataclass
class RegimeReport:
    beta_green: float
    error_bound: float
    verdict: str
    closed_form: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "beta_green": self.beta_green,
            "error_bound": self.error_bound,
            "verdict": self.verdict,
            "closed_form": self.closed_form,
            "meta": self.meta,
        }


def _check_cover(m: MomentBundle, G: GreenTable) -> None:
    if m.dimension != G.dimension:
        raise LatticeError(f"moments in d = {m.dimension}, Green table in d = {G.dimension}")
    if m.beta.linf_radius() > G.radius:
        raise LatticeError(f"Green box radius {G.radius} does not cover supp(beta) (radius {m.beta.linf_radius()})")


def _gk_k(k: SparseField, G: GreenTable) -> tuple[float, float]:
    """<G_S * k, k> = sum_{x,y} k_x k_y G_S(x - y) and its error."""
    items = list(k.items())
    terms, errs = [], []
    for x, a in items:
        for y, b in items:
            z = tuple(p - q for p, q in zip(x, y))
            terms.append(a * b * G[z])
            errs.append(abs(a * b) * G.error_at(z))
    return math.fsum(terms), math.fsum(errs)


def bcpp_closed_form(d: int, lam: float, n_nodes: int = 128) -> dict:
    """<beta, G_S> = G_S(0) = ((2d lam + 1)/(2d lam)) / (1 - pi_d) and lam* = 1/(2d(1 - 2 pi_d))."""
    pi, pi_err = return_probability(d, n_nodes, with_error=True)
    scale = (2 * d * lam + 1) / (2 * d * lam)
    value = scale / (1.0 - pi)
    err = scale * pi_err / (1.0 - pi) ** 2
    lam_star = 1.0 / (2 * d * (1.0 - 2.0 * pi)) if pi < 0.5 else math.inf
    return {
        "route": "bcpp",
        "pi_d": pi,
        "pi_d_error": pi_err,
        "lambda": lam,
        "lambda_star": lam_star,
        "inequality": f"lambda = {lam!r} > 1/(2d(1-2 pi_d)) = {lam_star!r}",
        "holds": bool(lam > lam_star),
        "beta_green": value,
        "error_bound": err,
        "verdict": verdict_for(value, err),
    }


def potlatch_closed_form(m: MomentBundle, G: GreenTable) -> dict:
    """E[W^2] < (2|k| - 1) G_S(0) / <G_S * k, k>, from the W atoms and k alone."""
    w_atoms = m.params["w_atoms"]
    k = m.params["k"]
    ew2 = math.fsum(p * v * v for v, p in w_atoms)
    mass = k.total()
    gkk, gkk_err = _gk_k(k, G)
    g0, e0 = G.origin, G.error_at((0,) * G.dimension)
    threshold = (2 * mass - 1) * g0 / gkk
    value = ew2 * gkk + 2.0 - (2 * mass - 1) * g0
    err = ew2 * gkk_err + abs(2 * mass - 1) * e0
    return {
        "route": "potlatch",
        "w_second_moment": ew2,
        "gk_k": gkk,
        "threshold": threshold,
        "inequality": f"E[W^2] = {ew2!r} < (2|k|-1) G_S(0) / <G_S*k,k> = {threshold!r}",
        "holds": bool(ew2 < threshold),
        "beta_green": value,
        "error_bound": err,
        "verdict": verdict_for(value, err),
    }


def classify(m: MomentBundle, G: GreenTable) -> RegimeReport:
    """Direct <beta, G_S> with propagated error; closed forms where they exist."""
    _check_cover(m, G)
    value = G.inner(m.beta)
    err = G.inner_error(m.beta)
    closed = None
    if m.provenance == "bcpp":
        closed = bcpp_closed_form(m.dimension, m.params["lambda"], G.nodes)
    elif m.provenance in ("potlatch", "smoothing"):
        closed = potlatch_closed_form(m, G)
    return RegimeReport(
        beta_green=value,
        error_bound=err,
        verdict=verdict_for(value, err),
        closed_form=closed,
        meta={"green_radius": G.radius, "nodes": G.nodes, "beta_total": m.beta_total},
    )


def bcpp_threshold(d: int = 3, R: int = 4, n_nodes: int = 128, tol: float = 1e-5) -> float:
    """lambda at which the direct route crosses 2, by bisection on fresh Green tables."""
    def excess(lam):
        m = moments(bcpp(d, lam))
        return green(m.k, R, n_nodes).inner(m.beta) - 2.0

    lo, hi = 0.05, 5.0
    if excess(lo) <= 0 or excess(hi) >= 0:
        raise RegimeError("bcpp threshold not bracketed")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# h-functions


@dataclass
class HReport:
    """An h-field on a box with its residual on the interior."""

    h: np.ndarray
    residual: np.ndarray
    max_residual: float
    tolerance: float
    constant: float
    h_min: float
    h_max: float
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.max_residual <= self.tolerance

    def to_json(self) -> dict:
        return {
            "max_residual": self.max_residual,
            "tolerance": self.tolerance,
            "constant": self.constant,
            "h_min": self.h_min,
            "h_max": self.h_max,
            "ok": self.ok,
            **self.extra,
        }


def _require_diffusive(m: MomentBundle, G: GreenTable) -> RegimeReport:
    rep = classify(m, G)
    if rep.verdict != DIFFUSIVE:
        raise RegimeError(f"<beta, G_S> = {rep.beta_green:.6g} (+- {rep.error_bound:.2g}) is not below 2")
    return rep


def _rate_norm(m: MomentBundle) -> tuple[SparseField, float, int]:
    s = symmetrized(m.k)
    return s, 2.0 * s.total(), s.linf_radius()


def _delta_box(d: int, r: int) -> np.ndarray:
    out = np.zeros((2 * r + 1,) * d)
    out[(r,) * d] = 1.0
    return out


def _field_box(f: SparseField, r: int) -> np.ndarray:
    out = np.zeros((2 * r + 1,) * f.dimension)
    for x, v in f.items():
        if max(abs(c) for c in x) <= r:
            out[tuple(c + r for c in x)] = v
    return out


def h_condition_b(m: MomentBundle, G: GreenTable) -> HReport:
    """h = 1 + c G_S, c = <beta,1>/(2 - <beta,G_S>); residual L_S h + (1/2) delta_0 <beta, h>."""
    rep = _require_diffusive(m, G)
    c = m.beta_total / (2.0 - rep.beta_green)
    h = 1.0 + c * G.values
    s, norm, reach = _rate_norm(m)
    r = G.radius - reach
    bh = math.fsum(v * h[tuple(q + G.radius for q in x)] for x, v in m.beta.items())
    res = apply_L_S(m.k, h, r) + 0.5 * bh * _delta_box(m.dimension, r)
    # |L_S e| <= 2 |s| max|e|; c enters through the coefficient and through <beta, G>
    dc = m.beta_total * rep.error_bound / (2.0 - rep.beta_green - rep.error_bound) ** 2 if c else 0.0
    tol = 4.0 * (c * norm * G.error_bound + 0.5 * c * G.inner_error(m.beta) + dc * (1 + 0.5 * rep.beta_green)) + 1e-12
    return HReport(
        h=h,
        residual=res,
        max_residual=float(np.abs(res).max()),
        tolerance=tol,
        constant=c,
        h_min=float(h.min()),
        h_max=float(h.max()),
        extra={"upper": 1.0 + c * G.origin, "beta_h": bh},
    )


def beta_conv_green(m: MomentBundle, G: GreenTable, radius: int | None = None) -> np.ndarray:
    return G.convolve_box(m.beta, radius)


def _conv_error(m: MomentBundle, G: GreenTable, r: int) -> np.ndarray:
    """Per-site error of (beta * G_S) on the radius-r box."""
    absb = SparseField(m.dimension, {x: abs(v) for x, v in m.beta.items()})
    return box_convolve(absb, G.site_error, r)


def h_condition_bprime(m: MomentBundle, G: GreenTable) -> HReport:
    """h = 2 - <beta,G_S> + beta * G_S; residual L_S h + (1/2) h(0) beta."""
    rep = _require_diffusive(m, G)
    r0 = G.radius - m.beta.linf_radius()
    bg = beta_conv_green(m, G, r0)
    center = (r0,) * m.dimension
    # (beta * G)(0) = <beta, G> for symmetric G; subtracting the computed value keeps h(0) = 2 exactly
    h = 2.0 + (bg - bg[center])
    s, norm, reach = _rate_norm(m)
    r = r0 - reach
    if r < 0:
        raise LatticeError("Green box too small for the b' residual")
    res = apply_L_S(m.k, h, r) + 0.5 * h[center] * _field_box(m.beta, r)
    err = _conv_error(m, G, r0)
    tol = 4.0 * norm * float(err.max()) + 1e-12
    limit = 2.0 - rep.beta_green
    # tail: h - limit = beta * G_S which vanishes at infinity; compare on the outer shell
    sites = box_sites(m.dimension, r0)
    shell = np.abs(sites).max(axis=1) == r0
    gap = float(np.abs(h.reshape(-1)[shell] - limit).max())
    decay = float(np.abs(bg.reshape(-1)[shell]).max())
    return HReport(
        h=h,
        residual=res,
        max_residual=float(np.abs(res).max()),
        tolerance=tol,
        constant=limit,
        h_min=float(h.min()),
        h_max=float(h.max()),
        extra={
            "h_origin": float(h[center]),
            "tail_limit": limit,
            "tail_gap": gap,
            "tail_decay_bound": decay + rep.error_bound + float(err.max()),
            "positive": bool(h.min() > 0.0),
        },
    )


def h0_closed_form(m: MomentBundle, G: GreenTable, kind: str = "YY", radius: int | None = None) -> np.ndarray:
    """h0 predicted from the Green table.

    YY: 1 + c G_S with c = <beta,1>/(2 - <beta,G_S>).
    XX: 1 + (beta * G_S)/(2 - <beta,G_S>), the solution of
    L_S h0 = -(1/2) h0(0) beta that tends to 1 at infinity.
    """
    rep = _require_diffusive(m, G)
    if kind == "YY":
        c = m.beta_total / (2.0 - rep.beta_green)
        return 1.0 + c * (G.values if radius is None else crop(G.values, radius))
    if kind == "XX":
        r = G.radius - m.beta.linf_radius() if radius is None else radius
        return 1.0 + beta_conv_green(m, G, r) / (2.0 - rep.beta_green)
    raise RegimeError(f"unknown h0 kind {kind!r}")


@dataclass
class ComparisonReport:
    radius: int
    checked: int
    violations: list
    max_deficit: float

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {
            "radius": self.radius,
            "checked": self.checked,
            "violations": [list(x) for x in self.violations],
            "max_deficit": self.max_deficit,
            "ok": self.ok,
        }


def check_green_comparison(m: MomentBundle, G: GreenTable, radius: int | None = None) -> ComparisonReport:
    """(beta * G)(x) >= (G(x)/G(0)) ((beta * G)(0) - 2) + 2 delta_{0,x} on |x|_inf <= radius."""
    _check_cover(m, G)
    rmax = G.radius - m.beta.linf_radius()
    r = rmax if radius is None else radius
    if r > rmax:
        raise LatticeError(f"radius {r} needs a Green table of radius >= {r + m.beta.linf_radius()}")
    d = m.dimension
    bg = beta_conv_green(m, G, r)
    center = (r,) * d
    g = crop(G.values, r)
    g0 = G.origin
    rhs = g / g0 * (bg[center] - 2.0) + 2.0 * _delta_box(d, r)
    conv_err = _conv_error(m, G, r)
    gerr = crop(G.site_error, r)
    tol = 3.0 * (conv_err + gerr / g0 * abs(bg[center] - 2.0) + g / g0 * (conv_err[center] + G.error_at((0,) * d)))
    tol = tol + 1e-12
    deficit = rhs - bg
    bad = np.argwhere(deficit > tol)
    return ComparisonReport(
        radius=r,
        checked=int(deficit.size),
        violations=[tuple(int(i) - r for i in idx) for idx in bad],
        max_deficit=float(deficit.max()),
    )


# ---------------------------------------------------------------------------
# the subgroup generated by the symmetrized support


def hermite_basis(vectors) -> np.ndarray:
    """Row-style Hermite normal form of the integer lattice spanned by ``vectors``."""
    A = [list(map(int, v)) for v in vectors if any(v)]
    if not A:
        return np.zeros((0, 0), dtype=np.int64)
    d = len(A[0])
    rows = [r[:] for r in A]
    basis = []
    col = 0
    while rows and col < d:
        nz = [r for r in rows if r[col] != 0]
        zero = [r for r in rows if r[col] == 0]
        if not nz:
            col += 1
            continue
        # Euclid on column col
        while len(nz) > 1:
            nz.sort(key=lambda r: abs(r[col]))
            piv = nz[0]
            rest = []
            for r in nz[1:]:
                q = r[col] // piv[col]
                r = [a - q * b for a, b in zip(r, piv)]
                (rest if r[col] != 0 else zero).append(r)
            nz = [piv] + rest
        piv = nz[0]
        if piv[col] < 0:
            piv = [-a for a in piv]
        basis.append(piv)
        rows = [r for r in zero if any(r)]
        col += 1
    return np.array(basis, dtype=np.int64)


def subgroup_H(m: MomentBundle) -> np.ndarray:
    """Hermite basis of the subgroup generated by {x : k_x + k_{-x} > 0}."""
    s = symmetrized(m.k)
    return hermite_basis([x for x, v in s.items() if v > 0])


def in_subgroup(basis: np.ndarray, x) -> bool:
    """Membership by back-substitution along the echelon basis."""
    r = np.array(x, dtype=np.int64)
    for row in basis:
        col = int(np.flatnonzero(row)[0])
        if r[col] % row[col]:
            return False
        r = r - (r[col] // row[col]) * row
    return not r.any()


def is_full_lattice(basis: np.ndarray, d: int) -> bool:
    return basis.shape[0] == d and all(in_subgroup(basis, e) for e in np.eye(d, dtype=np.int64))
