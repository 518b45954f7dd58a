"""Random kernel laws and their exact moments.

A kernel law is a finite mixture of non-negative, finitely supported vectors
``K``. All moment objects are computed by enumerating the atoms:

* ``k_x = E[K_x]``
* ``beta_{x,y} = E[(K - delta_0)_x (K - delta_0)_y]`` and ``beta_x = sum_y beta_{x+y,y}``
* ``beta_tilde_x = sum_y E[K_y K_{x+y}]``
* ``<beta, 1> = E[(|K| - 1)^2]``

Continuous multipliers ``W`` for potlatch laws have to be discretized by the
caller before they are handed to :func:`potlatch`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .lattice import SparseField

PROB_TOL = 1e-12
MEAN_TOL = 1e-9

PROVENANCES = ("bcpp", "potlatch", "smoothing", "custom")


class KernelError(ValueError):
    pass


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class KernelLaw:
    """Finite distribution of the random kernel ``K``.

    ``offsets`` lists the union of the atom supports with the origin always
    in row 0; ``values[a, j]`` is ``K_{offsets[j]}`` under atom ``a``.
    """

    dimension: int
    probs: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    provenance: str = "custom"
    params: dict = field(default_factory=dict)
    bound: float = 0.0
    radius: int = 0
    basis_warning: bool = False

    @property
    def n_atoms(self) -> int:
        return len(self.probs)

    @property
    def is_dual(self) -> bool:
        """Smoothing laws run the transposed (dual) dynamics."""
        return self.provenance == "smoothing"

    def atom(self, i: int) -> SparseField:
        return SparseField(self.dimension, zip(map(tuple, self.offsets.tolist()), self.values[i].tolist()))

    def atoms(self) -> list[tuple[float, SparseField]]:
        return [(float(p), self.atom(i)) for i, p in enumerate(self.probs)]

    def to_spec(self) -> dict:
        if self.provenance == "bcpp":
            return {"dimension": self.dimension, "type": "bcpp", "lambda": self.params["lambda"]}
        if self.provenance in ("potlatch", "smoothing"):
            return {
                "dimension": self.dimension,
                "type": self.provenance,
                "w_atoms": [{"value": v, "prob": p} for v, p in self.params["w_atoms"]],
                "k": self.params["k"].to_json(),
            }
        return {
            "dimension": self.dimension,
            "type": "custom",
            "atoms": [{"prob": p, "entries": a.to_json()} for p, a in self.atoms()],
        }


def _spans(sites: Sequence[tuple], d: int) -> bool:
    pts = [s for s in sites if any(s)]
    if not pts:
        return False
    return int(np.linalg.matrix_rank(np.array(pts, dtype=float))) == d


def _assemble(
    d: int,
    atoms: Sequence[tuple[float, SparseField]],
    provenance: str = "custom",
    params: dict | None = None,
) -> KernelLaw:
    if d < 1:
        raise KernelError("dimension must be >= 1")
    if not atoms:
        raise KernelError("a kernel law needs at least one atom")
    probs = np.array([float(p) for p, _ in atoms])
    if np.any(probs < 0) or np.any(~np.isfinite(probs)):
        raise KernelError("atom probabilities must be finite and non-negative")
    if abs(probs.sum() - 1.0) > PROB_TOL:
        raise KernelError(f"atom probabilities sum to {probs.sum()!r}, not 1")
    origin = (0,) * d
    sites = {origin}
    for _, a in atoms:
        if a.dimension != d:
            raise KernelError(f"atom of dimension {a.dimension} in a dimension-{d} law")
        for x, v in a.items():
            if not math.isfinite(v) or v < 0:
                raise KernelError(f"kernel values must be finite and non-negative, got {v} at {x}")
        sites.update(a)
    order = [origin] + sorted(sites - {origin})
    offsets = np.array(order, dtype=np.int64).reshape(len(order), d)
    values = np.array([[a[x] for x in order] for _, a in atoms], dtype=float)
    k_sites = [x for j, x in enumerate(order) if float(probs @ values[:, j]) != 0.0]
    return KernelLaw(
        dimension=d,
        probs=_freeze(probs),
        offsets=_freeze(offsets),
        values=_freeze(values),
        provenance=provenance,
        params=dict(params or {}),
        bound=float(values.max()) if values.size else 0.0,
        radius=max((sum(abs(c) for c in x) for x in order), default=0),
        basis_warning=not _spans(k_sites, d),
    )


def unit_vectors(d: int) -> list[tuple]:
    out = []
    for i in range(d):
        for sgn in (1, -1):
            e = [0] * d
            e[i] = sgn
            out.append(tuple(e))
    return out


def bcpp(d: int, lam: float) -> KernelLaw:
    """Binary contact path process: duplicate onto a neighbour or die."""
    if not lam > 0:
        raise KernelError("bcpp needs lambda > 0")
    z = 2 * d * lam + 1
    origin = (0,) * d
    atoms = [(lam / z, SparseField(d, {origin: 1.0, e: 1.0})) for e in unit_vectors(d)]
    atoms.append((1.0 / z, SparseField(d)))
    # probabilities are exact fractions of z; renormalize rounding away
    return _assemble(d, atoms, "bcpp", {"lambda": float(lam)})


def potlatch(w_atoms: Sequence[tuple[float, float]], k: SparseField, smoothing: bool = False) -> KernelLaw:
    """K = W k with W a discrete mean-one multiplier given as (value, prob) pairs."""
    w_atoms = [(float(v), float(p)) for v, p in w_atoms]
    for v, p in w_atoms:
        if v < 0 or p < 0:
            raise KernelError("W values and probabilities must be non-negative")
    total = math.fsum(p for _, p in w_atoms)
    if abs(total - 1.0) > PROB_TOL:
        raise KernelError(f"W probabilities sum to {total!r}, not 1")
    mean = math.fsum(v * p for v, p in w_atoms)
    if abs(mean - 1.0) > MEAN_TOL:
        raise KernelError(f"W must have mean one, got {mean!r}")
    for x, v in k.items():
        if v < 0:
            raise KernelError(f"k must be non-negative, got {v} at {x}")
    atoms = [(p, k.scale(v)) for v, p in w_atoms]
    kind = "smoothing" if smoothing else "potlatch"
    return _assemble(k.dimension, atoms, kind, {"w_atoms": w_atoms, "k": k})


def smoothing(w_atoms: Sequence[tuple[float, float]], k: SparseField) -> KernelLaw:
    return potlatch(w_atoms, k, smoothing=True)


def custom(d: int, atoms: Sequence[tuple[float, SparseField | Mapping]]) -> KernelLaw:
    fixed = [(p, a if isinstance(a, SparseField) else SparseField(d, a)) for p, a in atoms]
    return _assemble(d, fixed, "custom")


def build_law(spec: Mapping[str, Any]) -> KernelLaw:
    """Construct a law from its JSON description."""
    try:
        d = int(spec["dimension"])
        kind = spec["type"]
    except (KeyError, TypeError, ValueError) as exc:
        raise KernelError(f"kernel spec needs 'dimension' and 'type': {exc}") from exc
    if kind == "bcpp":
        if "lambda" not in spec:
            raise KernelError("bcpp spec needs 'lambda'")
        return bcpp(d, float(spec["lambda"]))
    if kind in ("potlatch", "smoothing"):
        if "w_atoms" not in spec or "k" not in spec:
            raise KernelError(f"{kind} spec needs 'w_atoms' and 'k'")
        w = [(a["value"], a["prob"]) for a in spec["w_atoms"]]
        return potlatch(w, SparseField.from_json(d, spec["k"]), smoothing=kind == "smoothing")
    if kind == "custom":
        if "atoms" not in spec:
            raise KernelError("custom spec needs 'atoms'")
        return custom(d, [(a["prob"], SparseField.from_json(d, a["entries"])) for a in spec["atoms"]])
    raise KernelError(f"unknown kernel type {kind!r}; expected one of {PROVENANCES}")


def sample_index(law: KernelLaw, rng: np.random.Generator, size: int | None = None):
    cdf = np.cumsum(law.probs)
    u = rng.random(size)
    return np.minimum(np.searchsorted(cdf, u, side="right"), law.n_atoms - 1)


def sample_kernel(law: KernelLaw, rng: np.random.Generator) -> SparseField:
    """One draw of K."""
    return law.atom(int(sample_index(law, rng)))


# ---------------------------------------------------------------------------
# moments


@dataclass(frozen=True)
class MomentBundle:
    dimension: int
    k: SparseField
    beta_pair: dict
    beta: SparseField
    beta_tilde: SparseField
    beta_total: float
    mass: float
    drift: np.ndarray
    diffusion: np.ndarray
    provenance: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def k_check(self) -> SparseField:
        return self.k.reflect()

    def to_json(self) -> dict:
        return {
            "dimension": self.dimension,
            "provenance": self.provenance,
            "k": self.k.to_json(),
            "beta": self.beta.to_json(),
            "beta_tilde": self.beta_tilde.to_json(),
            "beta_pair": [{"x": list(x), "y": list(y), "value": v} for (x, y), v in sorted(self.beta_pair.items())],
            "beta_total": self.beta_total,
            "mass": self.mass,
            "drift": self.drift.tolist(),
            "diffusion": self.diffusion.tolist(),
        }


def _diff_sum(offsets: list[tuple], mat: np.ndarray, d: int) -> SparseField:
    """x -> sum of mat[i, j] over pairs with offsets[i] - offsets[j] = x."""
    acc: dict[tuple, float] = {}
    terms: dict[tuple, list] = {}
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            v = mat[i, j]
            if v != 0.0:
                terms.setdefault(tuple(p - q for p, q in zip(a, b)), []).append(v)
    for x, vs in terms.items():
        acc[x] = math.fsum(vs)
    return SparseField(d, acc)


def moments(law: KernelLaw) -> MomentBundle:
    """Exact moments of ``law`` by enumeration over its atoms."""
    d = law.dimension
    p = law.probs
    K = law.values
    offsets = [tuple(x) for x in law.offsets.tolist()]
    with np.errstate(over="raise", invalid="raise"):
        try:
            kvec = p @ K
            V = K.copy()
            V[:, 0] -= 1.0  # origin is column 0
            B = V.T @ (p[:, None] * V)
            M = K.T @ (p[:, None] * K)
        except FloatingPointError as exc:
            raise KernelError(f"moment arithmetic overflowed: {exc}") from exc
    k = SparseField(d, zip(offsets, kvec.tolist()))
    pairs = {}
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            if B[i, j] != 0.0:
                pairs[(a, b)] = float(B[i, j])
    beta = _diff_sum(offsets, B, d)
    beta_tilde = _diff_sum(offsets, M, d)
    beta_total = math.fsum(pairs.values())
    X = law.offsets.astype(float)
    drift = X.T @ kvec
    diffusion = (X * kvec[:, None]).T @ X
    return MomentBundle(
        dimension=d,
        k=k,
        beta_pair=pairs,
        beta=beta,
        beta_tilde=beta_tilde,
        beta_total=beta_total,
        mass=math.fsum(kvec.tolist()),
        drift=_freeze(drift),
        diffusion=_freeze(diffusion),
        provenance=law.provenance,
        params=dict(law.params),
    )


def second_moment_of_mass(law: KernelLaw) -> float:
    """E[(|K| - 1)^2] enumerated directly from the atoms."""
    return math.fsum(float(p) * (math.fsum(row) - 1.0) ** 2 for p, row in zip(law.probs, law.values.tolist()))


def w_second_moment(law: KernelLaw) -> float:
    if law.provenance not in ("potlatch", "smoothing"):
        raise KernelError("E[W^2] is only defined for potlatch/smoothing laws")
    return math.fsum(p * v * v for v, p in law.params["w_atoms"])


def trivial_flag(m: MomentBundle) -> bool:
    """|k| = 1 and beta = 0: the normalization e^{-(|k|-1)t} is the identity."""
    return abs(m.mass - 1.0) < PROB_TOL and m.beta.norm1() < PROB_TOL
