"""Checks of the diffusive scaling limit on replicated snapshots.

A snapshot is reduced to its rescaled profile: sites mapped to
(x - m t)/sqrt(t) and weighted by the normalized configuration. The target
is the centered Gaussian nu with covariance sum_x x x^T k_x. Test functions
are bounded, continuous and have closed-form integrals against nu.

Replica data are summarized per checkpoint (:class:`ReplicaSummary`), so a
run over 10^4 large configurations never holds more than one snapshot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import DUAL, FORWARD, NormalizedSnapshot
from .kernels import MomentBundle


class CLTError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianTarget:
    covariance: np.ndarray

    @property
    def dimension(self) -> int:
        return self.covariance.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return np.zeros(self.dimension)

    @classmethod
    def from_moments(cls, m: MomentBundle) -> "GaussianTarget":
        cov = np.array(m.diffusion, dtype=float)
        if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-12:
            raise CLTError("covariance must be symmetric positive semidefinite")
        return cls(cov)

    def variance_along(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(u @ self.covariance @ u)

    def integrate(self, f: "TestFunction") -> float:
        return f.integral(self)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.covariance, size=n, method="eigh")


def drift_for(m: MomentBundle, kind: str = FORWARD) -> np.ndarray:
    """Mass of the dual process moves against the kernel offsets, so its drift is -m."""
    return -np.asarray(m.drift, dtype=float) if kind == DUAL else np.asarray(m.drift, dtype=float)


# ---------------------------------------------------------------------------
# test functions


class TestFunction:
    """Bounded continuous f on R^d with a closed-form integral against nu."""

    __test__ = False
    name = "f"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def integral(self, target: GaussianTarget) -> float:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError

    def __mul__(self, other: "TestFunction") -> "TestFunction":
        return Product(self, other)


class Constant(TestFunction):
    name = "one"

    def __call__(self, z):
        return np.ones(len(z))

    def integral(self, target):
        return 1.0

    def to_json(self):
        return {"type": "constant"}


class HalfSpace(TestFunction):
    """1{u.z > c}, with value 1/2 on the hyperplane.

    Rescaled lattice points land exactly on the median hyperplane with
    positive probability; the half weight keeps the lattice sum symmetric.
    """

    def __init__(self, u, c: float = 0.0):
        self.u = np.asarray(u, dtype=float)
        self.c = float(c)
        self.name = f"half[{','.join(f'{v:g}' for v in self.u)}>{self.c:g}]"

    def __call__(self, z):
        s = np.asarray(z, dtype=float) @ self.u
        return np.where(s > self.c, 1.0, np.where(s == self.c, 0.5, 0.0))

    def integral(self, target):
        var = target.variance_along(self.u)
        if var <= 0:
            return 1.0 if 0.0 > self.c else (0.5 if self.c == 0.0 else 0.0)
        return 0.5 * math.erfc(self.c / math.sqrt(2.0 * var))

    def to_json(self):
        return {"type": "halfspace", "u": self.u.tolist(), "c": self.c}


class Cosine(TestFunction):
    """cos(u.z); its nu-integral is exp(-u^T Sigma u / 2)."""

    def __init__(self, u):
        self.u = np.asarray(u, dtype=float)
        self.name = f"cos[{','.join(f'{v:g}' for v in self.u)}]"

    def __call__(self, z):
        return np.cos(np.asarray(z, dtype=float) @ self.u)

    def integral(self, target):
        return math.exp(-0.5 * target.variance_along(self.u))

    def to_json(self):
        return {"type": "cosine", "u": self.u.tolist()}


class Shifted(TestFunction):
    """f - c, typically with c chosen so the nu-integral vanishes."""

    def __init__(self, f: TestFunction, c: float):
        self.f = f
        self.c = float(c)
        self.name = f"{f.name}-{self.c:.6g}"

    def __call__(self, z):
        return self.f(z) - self.c

    def integral(self, target):
        return self.f.integral(target) - self.c

    def to_json(self):
        return {"type": "shifted", "f": self.f.to_json(), "c": self.c}


class Product(TestFunction):
    """Product of factors.

    Two cosines integrate by the sum formula. Otherwise the factors must
    depend on Sigma-orthogonal directions, which makes them independent
    under nu and the integral factorizes.
    """

    def __init__(self, *factors: TestFunction):
        flat = []
        for f in factors:
            flat.extend(f.factors if isinstance(f, Product) else [f])
        self.factors = flat
        self.name = "*".join(f.name for f in flat)

    def __call__(self, z):
        out = np.ones(len(z))
        for f in self.factors:
            out = out * f(z)
        return out

    def integral(self, target):
        fs = [f for f in self.factors if not isinstance(f, Constant)]
        if len(fs) == 2 and all(isinstance(f, Cosine) for f in fs):
            a, b = fs[0].u, fs[1].u
            return 0.5 * (
                math.exp(-0.5 * target.variance_along(a + b)) + math.exp(-0.5 * target.variance_along(a - b))
            )
        dirs = []
        for f in fs:
            if not hasattr(f, "u"):
                raise CLTError(f"no closed-form integral for a product involving {f.name}")
            dirs.append(f.u)
        for i in range(len(dirs)):
            for j in range(i + 1, len(dirs)):
                if abs(dirs[i] @ target.covariance @ dirs[j]) > 1e-12:
                    raise CLTError("product factors must use Sigma-orthogonal directions")
        return math.prod(f.integral(target) for f in fs)

    def to_json(self):
        return {"type": "product", "factors": [f.to_json() for f in self.factors]}


def function_from_json(spec: dict) -> TestFunction:
    kind = spec.get("type")
    if kind == "constant":
        return Constant()
    if kind == "halfspace":
        return HalfSpace(spec["u"], spec.get("c", 0.0))
    if kind == "cosine":
        return Cosine(spec["u"])
    if kind == "shifted":
        return Shifted(function_from_json(spec["f"]), spec["c"])
    if kind == "product":
        return Product(*[function_from_json(f) for f in spec["factors"]])
    raise CLTError(f"unknown test function type {kind!r}")


def centered(f: TestFunction, target: GaussianTarget) -> Shifted:
    return Shifted(f, f.integral(target))


def default_library(d: int) -> list[TestFunction]:
    """Constant, median half-space, coordinate cosines with |u| in {0.5, 1}, and a product."""
    e = np.eye(d)
    lib: list[TestFunction] = [Constant(), HalfSpace(e[0]), Cosine(0.5 * e[0]), Cosine(e[0])]
    if d >= 2:
        lib.append(Product(Cosine(0.5 * e[0]), Cosine(0.5 * e[1])))
    return lib


# ---------------------------------------------------------------------------
# profiles


@dataclass
class RescaledProfile:
    t: float
    positions: np.ndarray
    weights: np.ndarray
    total_mass: float

    def integrate(self, f: TestFunction) -> float:
        return float(f(self.positions) @ self.weights) if len(self.weights) else 0.0


def profile(snapshot: NormalizedSnapshot, drift, channel: int = 0) -> RescaledProfile:
    if snapshot.t <= 0:
        raise CLTError("profiles need t > 0")
    t = snapshot.t
    w = snapshot.values[:, channel]
    keep = w > 0
    pos = (snapshot.sites[keep].astype(float) - np.asarray(drift, dtype=float) * t) / math.sqrt(t)
    return RescaledProfile(t, pos, w[keep], float(snapshot.mass[channel]))


@dataclass
class ReplicaSummary:
    """Per-replica statistics of one snapshot."""

    t: float
    mass: float
    alive: bool
    first: np.ndarray
    second: np.ndarray
    projections: np.ndarray

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "mass": self.mass,
            "alive": self.alive,
            "first": self.first.tolist(),
            "second": self.second.tolist(),
            "projections": self.projections.tolist(),
        }


def summarize(snapshot: NormalizedSnapshot, drift, library: Sequence[TestFunction]) -> ReplicaSummary:
    """Mass-weighted sums of z, z z^T and f(z) over the rescaled profile."""
    p = profile(snapshot, drift)
    d = snapshot.sites.shape[1] if snapshot.sites.ndim == 2 else len(drift)
    if len(p.weights) == 0:
        return ReplicaSummary(p.t, 0.0, False, np.zeros(d), np.zeros((d, d)), np.zeros(len(library)))
    wz = p.weights[:, None] * p.positions
    return ReplicaSummary(
        t=p.t,
        mass=p.total_mass,
        alive=True,
        first=wz.sum(axis=0),
        second=wz.T @ p.positions,
        projections=np.array([p.integrate(f) for f in library]),
    )


def summarizer(drift, library: Sequence[TestFunction]):
    """Reducer for :func:`linsys.dynamics.run_replicas`."""
    return lambda snap: summarize(snap, drift, library)


# ---------------------------------------------------------------------------
# the tests


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.inf


@dataclass
class CheckpointReport:
    t: float
    replicas: int
    survivors: int
    mean_mass: float
    mean_mass_se: float
    conditioned_mass: float
    mean_position: list
    mean_position_se: list
    covariance: list
    covariance_se: list
    projections: dict
    l2: dict
    checks: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dict(self.__dict__)


def checkpoint_report(
    summaries: Sequence[ReplicaSummary],
    target: GaussianTarget,
    library: Sequence[TestFunction],
    mean_sigmas: float = 4.0,
    projection_sigmas: float = 3.0,
    covariance_rtol: float = 0.10,
) -> CheckpointReport:
    if not summaries:
        raise CLTError("no replicas")
    t = summaries[0].t
    mass = np.array([s.mass for s in summaries])
    alive = np.array([s.alive for s in summaries])
    surv = [s for s in summaries if s.alive and s.mass > 0]
    if not surv:
        raise CLTError(f"all {len(summaries)} replicas extinct at t = {t}: no data")
    d = target.dimension
    M = np.array([s.mass for s in surv])
    mu = np.array([s.first / s.mass for s in surv])
    S = np.array([s.second / s.mass for s in surv])
    F = np.array([s.projections / s.mass for s in surv])
    mean_pos = mu.mean(axis=0)
    mean_se = np.array([_se(mu[:, i]) for i in range(d)])
    cov = S.mean(axis=0)
    cov_se = S.std(axis=0, ddof=1) / math.sqrt(len(surv)) if len(surv) > 1 else np.full((d, d), math.inf)
    target_cov = target.covariance
    scale = float(np.abs(np.diag(target_cov)).max())
    projections = {}
    l2 = {}
    all_F = np.zeros((len(summaries), len(library)))
    all_F[alive] = np.array([s.projections for s in summaries if s.alive])
    for j, f in enumerate(library):
        exact = f.integral(target)
        est = float(F[:, j].mean())
        se = _se(F[:, j])
        projections[f.name] = {
            "estimate": est,
            "std_error": se,
            "target": exact,
            "ok": bool(abs(est - exact) <= projection_sigmas * se + 1e-12),
        }
        dev = all_F[:, j] - mass * exact
        l2[f.name] = {"mean_square": float(np.mean(dev**2)), "std_error": _se(dev**2)}
    checks = {
        "mean_zero": bool(np.all(np.abs(mean_pos) <= mean_sigmas * mean_se)),
        "covariance": bool(np.all(np.abs(cov - target_cov) <= covariance_rtol * scale)),
        "projections": all(v["ok"] for v in projections.values()),
        "mass_identity": bool(
            abs(mass.mean() - alive.mean() * (M.mean() if len(M) else 0.0)) <= 1e-12 * max(1.0, abs(mass.mean()))
        ),
    }
    return CheckpointReport(
        t=t,
        replicas=len(summaries),
        survivors=len(surv),
        mean_mass=float(mass.mean()),
        mean_mass_se=_se(mass),
        conditioned_mass=float(M.mean()),
        mean_position=mean_pos.tolist(),
        mean_position_se=mean_se.tolist(),
        covariance=cov.tolist(),
        covariance_se=np.asarray(cov_se).tolist(),
        projections=projections,
        l2=l2,
        checks=checks,
    )


def _slope(ts, ys) -> float:
    lt, ly = np.log(np.asarray(ts, dtype=float)), np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(lt, ly, 1)[0])


def test_d(
    per_checkpoint: dict,
    target: GaussianTarget,
    library: Sequence[TestFunction],
    mass_sigmas: float = 4.0,
    initial_mass: float = 1.0,
    **kw,
) -> dict:
    """Full report over checkpoints: {t: [ReplicaSummary, ...]}.

    The headline verdict uses the last checkpoint; the L^2 statistic and the
    1/sqrt(t) decay of the center of mass are reported across checkpoints.
    """
    ts = sorted(per_checkpoint)
    if not ts:
        raise CLTError("no checkpoints")
    reps = {t: checkpoint_report(per_checkpoint[t], target, library, **kw) for t in ts}
    last = reps[ts[-1]]
    rms = []
    for t in ts:
        surv = [s for s in per_checkpoint[t] if s.alive and s.mass > 0]
        mu = np.array([s.first / s.mass for s in surv])
        rms.append(float(np.sqrt((mu**2).sum(axis=1).mean())))
    l2_trend = {}
    for f in library:
        vals = [reps[t].l2[f.name]["mean_square"] for t in ts]
        ses = [reps[t].l2[f.name]["std_error"] for t in ts]
        steps = [vals[i + 1] - vals[i] <= 3 * math.hypot(ses[i], ses[i + 1]) for i in range(len(ts) - 1)]
        l2_trend[f.name] = {"values": vals, "std_errors": ses, "non_increasing": all(steps)}
    martingale = {
        str(t): bool(abs(reps[t].mean_mass - initial_mass) <= mass_sigmas * reps[t].mean_mass_se) for t in ts
    }
    return {
        "checkpoints": {str(t): reps[t].to_json() for t in ts},
        "center_rms": rms,
        "center_rms_slope": _slope(ts, rms) if len(ts) > 1 and min(rms) > 0 else None,
        "l2_trend": l2_trend,
        "martingale": martingale,
        "library": [f.to_json() for f in library],
        "calibration": {
            "mean_sigmas": kw.get("mean_sigmas", 4.0),
            "projection_sigmas": kw.get("projection_sigmas", 3.0),
            "covariance_rtol": kw.get("covariance_rtol", 0.10),
            "note": "finite-t tolerances are calibration choices",
        },
        "pass": all(last.checks[c] for c in ("mean_zero", "covariance", "projections", "mass_identity")),
    }


test_d.__test__ = False
