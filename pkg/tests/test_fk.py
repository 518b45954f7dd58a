import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linsys import cltstat, fk, kernels, lattice, regime
from linsys.lattice import SparseField, iter_box
from strategies import custom_laws, lazy_potlatch


def _pairs(d, r=2):
    zero = (0,) * d
    return [(x, zero) for x in iter_box(d, r)] + [(x, y) for x in iter_box(d, 1) for y in iter_box(d, 1)]


def _Q(chain, x, xt):
    """Full generator row including the diagonal entry."""
    row = chain.rates(x, xt)
    row[(x, xt)] = row.get((x, xt), 0.0) + chain.rate_sum(x, xt) - math.fsum(chain.rates(x, xt).values())
    return row


@settings(max_examples=60, deadline=None)
@given(custom_laws(dims=(1, 2)))
def test_rate_sums_and_transpose(law):
    m = kernels.moments(law)
    xx, yy = fk.build_pair_chain(m, fk.XX), fk.build_pair_chain(m, fk.YY)
    for x, xt in _pairs(law.dimension):
        assert abs(xx.rate_sum(x, xt) - xx.expected_rate_sum(m, x, xt)) < 1e-12
        assert abs(yy.rate_sum(x, xt) - yy.expected_rate_sum(m, x, xt)) < 1e-12
        assert all(r >= 0 for r in xx.rates(x, xt).values())
        # Q_YY(s, s') = Q_XX(s', s)
        for tgt, r in _Q(yy, x, xt).items():
            assert abs(_Q(xx, *tgt).get((x, xt), 0.0) - r) < 1e-12
        for tgt, r in _Q(xx, x, xt).items():
            assert abs(_Q(yy, *tgt).get((x, xt), 0.0) - r) < 1e-12


@pytest.mark.parametrize("law", [kernels.bcpp(3, 1.0), kernels.potlatch([(0.5, 0.5), (1.5, 0.5)], lattice.srw_kernel(3)),
                                 kernels.potlatch([(0.0, 0.5), (2.0, 0.5)], SparseField(2, {(1, 0): 0.3, (0, 1): 0.3, (0, 0): 0.6}))])
def test_fixture_rate_sums(law):
    m = kernels.moments(law)
    d = law.dimension
    for kind in (fk.XX, fk.YY):
        ch = fk.build_pair_chain(m, kind)
        for x, xt in _pairs(d, 1):
            assert abs(ch.rate_sum(x, xt) - ch.expected_rate_sum(m, x, xt)) < 1e-12


def test_bcpp_yy_off_diagonal_rate_sum(bcpp3_m):
    yy = fk.build_pair_chain(bcpp3_m, fk.YY)
    assert abs(yy.rate_sum((1, 0, 0), (0, 0, 0)) - 2 * (bcpp3_m.mass - 1)) < 1e-15
    assert yy.weight((1, 0, 0), (0, 0, 0)) == 0.0 and yy.weight((2, 1, 0), (2, 1, 0)) == 1.0


def test_bcpp_xx_joint_moves_coalesce(bcpp3_m):
    xx = fk.build_pair_chain(bcpp3_m, fk.XX)
    # beta_{a,b} diagonal: joint jumps only from the diagonal back onto it
    for (y, yt), r in xx.rates((1, 0, 0), (0, 0, 0)).items():
        assert sum(map(abs, y)) + sum(map(abs, yt)) <= 3
    joint = {t: r for t, r in xx.rates((0, 0, 0), (0, 0, 0)).items() if t[0] == t[1]}
    assert set(joint) == {(tuple(-c for c in e), tuple(-c for c in e)) for e in kernels.unit_vectors(3)}


@settings(max_examples=40, deadline=None)
@given(custom_laws(dims=(1, 2)))
def test_difference_projection_matches_closed_form(law):
    m = kernels.moments(law)
    for kind, dkind in ((fk.XX, fk.XMX), (fk.YY, fk.YMY)):
        proj = fk.build_pair_chain(m, kind).difference()
        direct = fk.difference_chain(m, dkind)
        for x in iter_box(law.dimension, 3):
            a, b = proj.rates(x), direct.rates(x)
            for y in set(a) | set(b):
                assert abs(a.get(y, 0.0) - b.get(y, 0.0)) < 1e-12
            assert proj.weight(x) == direct.weight(x)


def test_negative_combined_rate_rejected():
    tab = fk._Table(1, 1, pair=False)
    tab.special[(0,)] = {(1,): -0.5}
    with pytest.raises(fk.ChainError):
        fk._finalize(tab, "test")


def test_unknown_kinds_rejected(bcpp3_m):
    with pytest.raises(fk.ChainError):
        fk.build_pair_chain(bcpp3_m, "ZZ")
    with pytest.raises(fk.ChainError):
        fk.difference_chain(bcpp3_m, "ZZ")


def test_estimate_helpers():
    e = fk.estimate_from([1.0, 2.0, 3.0], 1.0, scale=2.0, tag="x")
    assert e.value == 4.0 and math.isclose(e.std_error, 2 / math.sqrt(3)) and e.meta == {"tag": "x"}
    assert e.agrees(4.5) and not e.agrees(10.0)
    assert e.agrees(fk.Estimate(5.0, 0.5, 3, 1.0))


def test_two_point_t0_exact(bcpp3_m):
    z = (0, 0, 0)
    e = (1, 0, 0)
    out = fk.fk_two_point(bcpp3_m, z, e, z, e, 0.0, 10, 0)
    assert out["chainXX"].value == out["chainYY"].value == 1.0
    out = fk.fk_two_point(bcpp3_m, z, e, e, e, 0.0, 10, 0)
    assert out["chainXX"].value == out["chainYY"].value == 0.0


def test_xx_yy_agree_bcpp_d1():
    m = kernels.moments(kernels.bcpp(1, 1.0))
    for y, yt in [((0,), (1,)), ((1,), (1,)), ((-1,), (2,))]:
        out = fk.fk_two_point(m, (0,), (1,), y, yt, 1.0, 20000, 3)
        assert out["chainXX"].agrees(out["chainYY"], 3.0)


def test_three_way_potlatch_d1(pot1):
    m = kernels.moments(pot1)
    pts = [(-1,), (0,), (1,)]
    rows = fk.three_way(pot1, m, ((0,), (1,)), [(a, b) for a in pts for b in pts], [0.0, 1.0], 4000, 5)
    assert len(rows) == 18 and all(r["ok"] for r in rows)


def test_h0_trivial_law(trivial3):
    m = kernels.moments(trivial3)
    G = lattice.green(lattice.srw_kernel(3), 4, 64)
    assert fk.h0_estimate(m, (0, 0, 0), fk.YY, 100.0, 10, 0, G).value == 1.0


def test_h0_bcpp_regenerative(bcpp3_m, bcpp3_G):
    h = regime.h0_closed_form(bcpp3_m, bcpp3_G, "YY")
    for x in [(0, 0, 0), (1, 0, 0)]:
        est = fk.h0_estimate(bcpp3_m, x, fk.YY, 1000.0, 10000, 1, bcpp3_G, method="regenerative")
        assert est.agrees(float(h[tuple(c + 12 for c in x)]), 3.0)


def test_h0_potlatch_direct_and_horizon_stability(pot3_m, pot3_G):
    exact = 1 + pot3_m.beta_total / (2 - pot3_G.inner(pot3_m.beta)) * pot3_G.origin
    a = fk.h0_estimate(pot3_m, (0, 0, 0), fk.YY, 500.0, 10000, 2, pot3_G)
    b = fk.h0_estimate(pot3_m, (0, 0, 0), fk.YY, 1000.0, 10000, 2, pot3_G)
    assert a.agrees(exact, 3.0) and b.agrees(exact, 3.0)
    assert a.agrees(b, 3.0)


def test_h0_refusals(bcpp3_m, bcpp3_G):
    with pytest.raises(fk.ChainError):
        fk.h0_estimate(bcpp3_m, (0, 0, 0), fk.XX, 10.0, 10, 0, bcpp3_G, method="regenerative")
    with pytest.raises(fk.ChainError):
        fk.h0_estimate(bcpp3_m, (0, 0, 0), fk.YY, 10.0, 10, 0, bcpp3_G, method="nope")
    m = kernels.moments(kernels.bcpp(3, 0.4))
    with pytest.raises(regime.RegimeError):
        fk.h0_estimate(m, (0, 0, 0), fk.YY, 10.0, 10, 0, lattice.green(m.k, 4, 64))


def test_h2_constant_on_subgroup():
    m = kernels.moments(lazy_potlatch())
    G = lattice.green(m.k, 8, 128)
    sites = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 0, 0), (0, 1, 1)]
    rep = fk.h2_constancy(m, G, sites, 1000.0, 4000, 6)
    assert rep["ok"]
    assert abs(rep["constant"] - rep["predicted_constant"]) <= 3 * max(rep["std_errors"])


def test_pair_green_closed_form_cases(bcpp3_m, bcpp3_G, pot3_m, pot3_G):
    # bcpp: the affine coefficient vanishes
    for x in [(0, 0, 0), (1, 0, 0), (1, 1, 1)]:
        assert math.isclose(fk.pair_green_closed_form(bcpp3_m, bcpp3_G, x), 0.5 * bcpp3_G[x], rel_tol=1e-12)
    base = fk.pair_green_closed_form(pot3_m, pot3_G, (0, 0, 0))
    coef = 0.5 * (pot3_G.inner(pot3_m.beta) - pot3_m.beta_total * pot3_G.origin)
    assert math.isclose(base, 0.5 * pot3_G.origin / (1 - coef), rel_tol=1e-12)


@pytest.mark.parametrize("lam", [0.4, 1.0])
def test_threshold_product_both_sides(lam):
    m = kernels.moments(kernels.bcpp(3, lam))
    G = lattice.green(m.k, 4, 128)
    rep = fk.green_pair_identity(m, G, [(0, 0, 0)], 4000, 8, require_diffusive=False)
    assert rep["sites"][0]["ok"]
    assert (rep["threshold_product"] < 1) == (rep["beta_green"] < 2)
    with pytest.raises(regime.RegimeError) if lam < 0.5 else _nullcontext():
        fk.green_pair_identity(m, G, [(0, 0, 0)], 10, 8)


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *a):
        return False


def test_weighted_chain_clt_limit(pot3_m, pot3_G):
    target = cltstat.GaussianTarget.from_moments(pot3_m)
    fs = [cltstat.Constant(), cltstat.HalfSpace((1, 0, 0)), cltstat.centered(cltstat.Cosine((1, 0, 0)), target)]
    h0 = fk.h0_estimate(pot3_m, (0, 0, 0), fk.YY, 1000.0, 20000, 3, pot3_G)
    rep = fk.weighted_chain_clt(pot3_m, fs, 100.0, 20000, 4, G=pot3_G, h0=h0)
    for name, row in rep["functions"].items():
        assert row["finite_t_ok"] and row["limit_ok"], name
    assert abs(rep["functions"][fs[2].name]["nu_integral"]) < 1e-15
    assert rep["functions"]["half[1,0,0>0]"]["limit_target"] == 0.5 * h0.value


def test_weighted_chain_clt_finite_t_bcpp(bcpp3_m, bcpp3_G):
    # e_infinity has infinite variance for bcpp, so only the same-path finite-t comparison is meaningful
    target = cltstat.GaussianTarget.from_moments(bcpp3_m)
    fs = [cltstat.HalfSpace((1, 0, 0)), cltstat.Cosine((0.5, 0, 0)), cltstat.centered(cltstat.Cosine((1, 0, 0)), target)]
    rep = fk.weighted_chain_clt(bcpp3_m, fs, 100.0, 20000, 4, G=bcpp3_G)
    assert all(row["finite_t_ok"] for row in rep["functions"].values())


def test_pth_moment_bcpp(bcpp3_m):
    rep = fk.pth_moment_diagnostic(bcpp3_m, 1.2, [12.5, 25, 50, 100], 20000, 4, burn_in=10)
    assert rep["ok"] and len(rep["steps"]) == 3
    # beta >= 0 for bcpp: the weight only grows, so the moment rises towards its limit
    assert all(s["increase"] >= 0 for s in rep["steps"])
