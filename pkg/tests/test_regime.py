import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linsys import kernels, lattice, regime
from linsys.lattice import SparseField
from strategies import potlatch_laws


def test_verdict_rule():
    assert regime.verdict_for(1.9, 0.05) == regime.DIFFUSIVE
    assert regime.verdict_for(2.1, 0.05) == regime.NON_DIFFUSIVE
    assert regime.verdict_for(2.0, 0.0) == regime.NON_DIFFUSIVE
    assert regime.verdict_for(1.99, 0.02) == regime.INCONCLUSIVE


def test_bcpp_classify(bcpp3_m, bcpp3_G):
    rep = regime.classify(bcpp3_m, bcpp3_G)
    assert rep.verdict == regime.DIFFUSIVE
    # beta = delta_0, so <beta, G_S> is G_S(0)
    assert rep.beta_green == bcpp3_G.origin
    cf = rep.closed_form
    assert cf["holds"] and cf["verdict"] == regime.DIFFUSIVE
    assert abs(cf["beta_green"] - rep.beta_green) <= cf["error_bound"] + rep.error_bound
    assert abs(cf["lambda_star"] - 0.5227) < 2e-3


@pytest.mark.parametrize("lam,verdict", [(0.3, regime.NON_DIFFUSIVE), (0.4, regime.NON_DIFFUSIVE),
                                         (0.7, regime.DIFFUSIVE), (1.0, regime.DIFFUSIVE), (2.0, regime.DIFFUSIVE)])
def test_bcpp_routes_agree(lam, verdict):
    m = kernels.moments(kernels.bcpp(3, lam))
    rep = regime.classify(m, lattice.green(m.k, 4, 128))
    assert rep.verdict == rep.closed_form["verdict"] == verdict
    assert abs(rep.beta_green - rep.closed_form["beta_green"]) <= rep.error_bound + rep.closed_form["error_bound"]


def test_bcpp_threshold_bisection():
    pi = lattice.return_probability(3, 128)
    lam_star = regime.bcpp_threshold()
    assert abs(lam_star - 1 / (6 * (1 - 2 * pi))) < 2e-3
    assert abs(lam_star - 0.5227) < 2e-3


def test_near_threshold_is_inconclusive():
    m = kernels.moments(kernels.bcpp(3, 0.5226))
    assert regime.classify(m, lattice.green(m.k, 2, 32)).verdict == regime.INCONCLUSIVE


def test_trivial_law(trivial3):
    m = kernels.moments(trivial3)
    G = lattice.green(lattice.srw_kernel(3), 4, 64)
    rep = regime.classify(m, G)
    assert rep.beta_green == 0.0 and rep.verdict == regime.DIFFUSIVE
    hb = regime.h_condition_b(m, G)
    assert hb.constant == 0 and np.all(hb.h == 1.0) and hb.max_residual == 0.0
    hp = regime.h_condition_bprime(m, G)
    assert np.all(hp.h == 2.0) and hp.max_residual == 0.0


def test_potlatch_routes_agree(pot3_m, pot3_G):
    rep = regime.classify(pot3_m, pot3_G)
    cf = rep.closed_form
    assert rep.verdict == cf["verdict"] == regime.DIFFUSIVE
    assert abs(rep.beta_green - cf["beta_green"]) <= rep.error_bound + cf["error_bound"]
    assert cf["w_second_moment"] == 1.25 and cf["threshold"] > 1.25


def test_potlatch_threshold_flip(pot3_m, pot3_G):
    thr = regime.potlatch_closed_form(pot3_m, pot3_G)["threshold"]
    k = lattice.srw_kernel(3)
    for ew2, verdict in [(thr - 0.2, regime.DIFFUSIVE), (thr + 0.2, regime.NON_DIFFUSIVE)]:
        # two-point W on {0, b} with mean 1 has E[W^2] = b
        m = kernels.moments(kernels.potlatch([(0.0, 1 - 1 / ew2), (ew2, 1 / ew2)], k))
        rep = regime.classify(m, pot3_G)
        assert rep.verdict == rep.closed_form["verdict"] == verdict


def test_refuses_small_table(bcpp3_m):
    m = kernels.moments(kernels.potlatch([(0.5, 0.5), (1.5, 0.5)], SparseField(3, {(3, 0, 0): 0.5, (-3, 0, 0): 0.5,
                                                                                   (0, 1, 0): 0.5, (0, 0, 1): 0.5})))
    with pytest.raises(lattice.LatticeError):
        regime.classify(m, lattice.green(m.k, 2, 32))


def test_h_condition_b_bcpp(bcpp3_m, bcpp3_G):
    hb = regime.h_condition_b(bcpp3_m, bcpp3_G)
    assert hb.ok
    assert math.isclose(hb.constant, 1 / (2 - bcpp3_G.origin), rel_tol=1e-14)
    assert hb.h_min >= 1.0 and hb.h_max <= hb.extra["upper"] + 1e-15


def test_h_condition_bprime_bcpp(bcpp3_m, bcpp3_G):
    hp = regime.h_condition_bprime(bcpp3_m, bcpp3_G)
    assert hp.ok and hp.extra["h_origin"] == 2.0
    r0 = bcpp3_G.radius
    assert np.allclose(hp.h, 2 - bcpp3_G.origin + bcpp3_G.values, atol=1e-14)


def test_h_conditions_potlatch(pot3_m, pot3_G):
    assert regime.h_condition_b(pot3_m, pot3_G).ok
    hp = regime.h_condition_bprime(pot3_m, pot3_G)
    assert hp.ok and hp.extra["positive"]
    assert hp.extra["tail_gap"] <= hp.extra["tail_decay_bound"]


def test_h_refused_outside_regime():
    m = kernels.moments(kernels.bcpp(3, 0.4))
    G = lattice.green(m.k, 4, 64)
    with pytest.raises(regime.RegimeError):
        regime.h_condition_b(m, G)
    with pytest.raises(regime.RegimeError):
        regime.h0_closed_form(m, G)


def test_h_residual_shrinks_with_resolution(pot3_m):
    reps = [regime.h_condition_b(pot3_m, lattice.green(pot3_m.k, 4, n)) for n in (40, 80, 160)]
    # the quadrature Green function solves the discrete equation to roundoff at every resolution,
    # so what shrinks is the propagated tolerance
    assert all(r.max_residual < 1e-13 for r in reps)
    assert reps[0].tolerance > reps[1].tolerance > reps[2].tolerance


def test_h0_closed_forms_bcpp(bcpp3_m, bcpp3_G):
    yy = regime.h0_closed_form(bcpp3_m, bcpp3_G, "YY")
    xx = regime.h0_closed_form(bcpp3_m, bcpp3_G, "XX", radius=bcpp3_G.radius)
    # beta = delta_0 and <beta,1> = 1 make both kinds coincide
    assert np.allclose(yy, xx, atol=1e-15)


def test_green_comparison_bcpp(bcpp3_m, bcpp3_G):
    rep = regime.check_green_comparison(bcpp3_m, bcpp3_G, 10)
    assert rep.ok and rep.checked == 21**3
    # equality at the origin
    bg = regime.beta_conv_green(bcpp3_m, bcpp3_G, 10)
    assert abs(bg[10, 10, 10] - bcpp3_G.origin) < 1e-15


@settings(max_examples=100, deadline=None)
@given(potlatch_laws())
def test_green_comparison_random_potlatch(law):
    m = kernels.moments(law)
    G = lattice.green(m.k, 6, 64)
    assert regime.check_green_comparison(m, G, 4).ok


def test_subgroup_full_and_proper():
    assert regime.is_full_lattice(regime.subgroup_H(kernels.moments(kernels.bcpp(3, 1.0))), 3)
    B = regime.hermite_basis([(2, 0, 0), (0, 2, 0), (1, 1, 1)])
    assert regime.in_subgroup(B, (1, 1, -1)) and regime.in_subgroup(B, (0, 0, 2))
    assert not regime.in_subgroup(B, (1, 0, 0))
    assert not regime.is_full_lattice(B, 3)


def _index(vectors, d):
    # gcd of the maximal minors: the index of the generated lattice in Z^d
    g = 0
    for rows in itertools.combinations(vectors, d):
        g = math.gcd(g, int(round(abs(np.linalg.det(np.array(rows, dtype=float))))))
    return g


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(*[st.integers(-4, 4)] * 3), min_size=3, max_size=6))
def test_hermite_basis_properties(vectors):
    B = regime.hermite_basis(vectors)
    for v in vectors:
        assert regime.in_subgroup(B, v)
    idx = _index(vectors, 3)
    if idx:
        assert B.shape[0] == 3
        assert abs(round(np.linalg.det(B.astype(float)))) == idx
