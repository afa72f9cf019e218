import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbc.gaussian import GaussianMeasure, RngStream
from gbc.kernel import SectionFamily
from gbc.models import family_factory, get_model
from gbc.zeros import (TestFunction, TransversalityError, find_zeros, mc_expected_current, pair_current,
                       quadrature_expectation, run_samples, sample_section, zero_index)


@pytest.fixture(scope="module")
def sphere_fam():
    return get_model("sphere-tangent").family()


@pytest.fixture(scope="module")
def torus_fam():
    return get_model("torus-curved").family()


@pytest.mark.parametrize("v", [(0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.3, -0.4, 0.5)])
def test_height_function_gradient_zeros(sphere_fam, v):
    # P_x v vanishes exactly at x = +-v/|v|, both nondegenerate with index +1
    v = np.array(v)
    zs = find_zeros(v, sphere_fam)
    assert not zs.degenerate
    assert len(zs.zeros) == 2
    assert [z.index for z in zs.zeros] == [1, 1]
    u = v / np.linalg.norm(v)
    found = sorted([z.ambient for z in zs.zeros], key=lambda a: a @ u)
    assert np.allclose(found[0], -u, atol=1e-9) and np.allclose(found[1], u, atol=1e-9)


def _fourier_coef(fam, terms):
    """Coefficients for sum of (component, wave vector, 'cos'/'sin', amplitude)."""
    c = np.zeros(fam.N)
    ks = [tuple(k) for k in fam.ks]
    nk = len(ks)
    for alpha, k, kind, amp in terms:
        b = 1 + ks.index(k) + (nk if kind == "sin" else 0)
        c[b * 2 + alpha] = amp
    return c


def test_torus_known_section():
    fam = get_model("torus-flat").family("fourier")
    coef = _fourier_coef(fam, [(0, (1, 0), "cos", 1.0), (1, (0, 1), "cos", 1.0)])
    zs = find_zeros(coef, fam)
    assert not zs.degenerate
    got = sorted((round(z.coords[0] / np.pi, 9), round(z.coords[1] / np.pi, 9), z.index) for z in zs.zeros)
    # index = sign(sin x1 sin x2) at (pi/2 or 3pi/2)^2
    assert got == [(0.5, 0.5, 1), (0.5, 1.5, -1), (1.5, 0.5, -1), (1.5, 1.5, 1)]
    assert zs.signed_count == 0


def test_zero_section_is_degenerate(sphere_fam):
    zs = find_zeros(np.zeros(3), sphere_fam)
    assert zs.degenerate
    with pytest.raises(TransversalityError):
        pair_current(zs, TestFunction("one"), sphere_fam.model)


@settings(max_examples=25)
@given(st.integers(0, 2**63 - 1))
def test_sphere_signed_count_rigid(sphere_fam, seed):
    zs = find_zeros(sample_section(sphere_fam, RngStream(seed)), sphere_fam)
    if not zs.degenerate:
        assert zs.signed_count == 2
        assert pair_current(zs, TestFunction("one"), sphere_fam.model) == 2


@settings(max_examples=15)
@given(st.integers(0, 2**63 - 1))
def test_torus_signed_count_rigid(torus_fam, seed):
    zs = find_zeros(sample_section(torus_fam, RngStream(seed)), torus_fam)
    if not zs.degenerate:
        assert zs.signed_count == 0


@pytest.mark.parametrize("seed", [1, 2, 3, 4])
def test_zeros_are_zeros(torus_fam, seed):
    coef = sample_section(torus_fam, RngStream(seed))
    zs = find_zeros(coef, torus_fam)
    for z in zs.zeros:
        val = torus_fam.values(z.chart, z.coords[None])[0] @ coef
        assert np.abs(val).max() < 1e-9 * zs.scale


@pytest.mark.parametrize("seed", [5, 6, 7])
def test_seed_refinement_stable(sphere_fam, torus_fam, seed):
    for fam in (sphere_fam, torus_fam):
        coef = sample_section(fam, RngStream(seed))
        a = find_zeros(coef, fam, seed_n=32)
        b = find_zeros(coef, fam, seed_n=48)
        assert len(a.zeros) == len(b.zeros)
        for za, zb in zip(a.zeros, b.zeros):
            assert np.allclose(za.ambient, zb.ambient, atol=1e-8)
            assert za.index == zb.index


@given(st.integers(0, 2**32 - 1))
def test_index_ignores_connection_at_a_zero(seed):
    rng = np.random.default_rng(seed)
    Jac = rng.standard_normal((2, 2))
    conn = rng.standard_normal((2, 2, 2))
    assert zero_index(Jac, conn, np.zeros(2)) == zero_index(Jac)


@pytest.mark.parametrize("seed", [8, 9])
def test_index_equals_covariant_jacobian_sign(torus_fam, seed):
    coef = sample_section(torus_fam, RngStream(seed))
    zs = find_zeros(coef, torus_fam)
    for z in zs.zeros:
        jet = torus_fam.jet(z.chart, z.coords[None])
        cov = np.einsum("ian,n->ai", jet.d1[0], coef)      # covariant derivative, rows = component
        assert zero_index(cov) == z.index


def test_test_functions():
    model = get_model("sphere-tangent")
    p = np.array([[0.4, 1.0]])
    z = np.cos(0.4)
    assert TestFunction("x3")(model, "polar", p)[0] == pytest.approx(z)
    assert TestFunction("x3sq")(model, "polar", p)[0] == pytest.approx(z * z)
    f = TestFunction("custom-fourier", 0.5, ((1, 0, 2.0, 0.0), (0, 1, 0.0, 3.0)))
    assert f(model, "polar", p)[0] == pytest.approx(0.5 + 2.0 * np.cos(0.4) + 3.0 * np.sin(1.0))
    with pytest.raises(ValueError):
        TestFunction("cubic")(model, "polar", p)


def test_quadrature_expectations(sphere_fam):
    assert quadrature_expectation(sphere_fam, TestFunction("one")) == pytest.approx(2.0, abs=1e-10)
    assert abs(quadrature_expectation(sphere_fam, TestFunction("x3"))) < 1e-12
    assert quadrature_expectation(sphere_fam, TestFunction("x3sq")) == pytest.approx(2 / 3, abs=1e-10)


def test_run_samples_independent_of_jobs():
    fac = family_factory("sphere-tangent")
    fns = [TestFunction("x3sq")]
    a = run_samples(fac, fns, 40, seed=3, jobs=1, chunk=10)
    b = run_samples(fac, fns, 40, seed=3, jobs=2, chunk=10)
    c = run_samples(fac, fns, 40, seed=3, jobs=1, chunk=40)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.values, c.values)
    assert np.all(a.signed_counts == 2)


def test_mc_small_run():
    est = mc_expected_current(family_factory("sphere-tangent"), TestFunction("x3sq"), 400, seed=5)
    assert est.failures == 0
    assert abs(est.mean - est.quadrature) < 4 * est.stderr


class _Null(SectionFamily):
    def local(self, chart_id, pts, order=2):
        return get_model("sphere-tangent").family().local(chart_id, pts, order)


def _null_factory():
    return _Null(get_model("sphere-tangent"), GaussianMeasure(np.zeros((3, 3))))


def test_persistent_degeneracy_raises():
    with pytest.raises(TransversalityError):
        run_samples(_null_factory, [TestFunction("one")], 2, seed=1)
