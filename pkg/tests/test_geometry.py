import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import gamma

from gbc.geometry import (DimensionMismatchError, QuadratureGrid, UnsupportedRankError, check_skew_form,
                          euler_density, integrate_density, perfect_matchings, pfaffian_of_form, pfaffian_sum,
                          signed_permutations, sphere_quadrature, torus_quadrature)


def random_skew(rng, r):
    a = rng.standard_normal((r, r))
    return a - a.T


def test_pf_two_by_two():
    assert pfaffian_sum(np.array([[0.0, 2.5], [-2.5, 0.0]])) == 2.5


@pytest.mark.parametrize("r", [2, 4, 6, 8])
def test_pf_symplectic_is_one(r):
    J = np.kron(np.eye(r // 2), np.array([[0.0, 1.0], [-1.0, 0.0]]))
    assert pfaffian_sum(J) == 1.0


def test_pf_four_by_four_closed_form(rng):
    for _ in range(20):
        a = random_skew(rng, 4)
        want = a[0, 1] * a[2, 3] - a[0, 2] * a[1, 3] + a[0, 3] * a[1, 2]
        assert pfaffian_sum(a) == pytest.approx(want, rel=1e-13, abs=1e-14)


@pytest.mark.parametrize("r", [2, 4, 6, 8])
def test_pf_squared_is_det(rng, r):
    for _ in range(30):
        a = random_skew(rng, r)
        pf = pfaffian_sum(a)
        assert pf * pf == pytest.approx(np.linalg.det(a), rel=1e-10)


def test_pf_antisymmetrizes_input(rng):
    m = rng.standard_normal((4, 4))
    assert pfaffian_sum(m) == pytest.approx(pfaffian_sum(0.5 * (m - m.T)), rel=1e-13)


@pytest.mark.parametrize("r", [1, 3, 5, 10])
def test_pf_rank_errors(r):
    with pytest.raises(UnsupportedRankError):
        pfaffian_sum(np.zeros((r, r)))


@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 6]))
def test_pf_congruence(seed, r):
    rng = np.random.default_rng(seed)
    a = random_skew(rng, r)
    G = rng.standard_normal((r, r))
    lhs = pfaffian_sum(G.T @ a @ G)
    rhs = np.linalg.det(G) * pfaffian_sum(a)
    assert lhs == pytest.approx(rhs, rel=1e-8, abs=1e-12)


def test_permutation_tables():
    perms, signs = signed_permutations(4)
    assert len(perms) == 24 and signs.sum() == 0
    match, msign = perfect_matchings(6)
    assert len(match) == 15  # (2h-1)!! matchings


def random_form(rng, m, r):
    F = rng.standard_normal((m, m, r, r))
    F = F - np.swapaxes(F, 0, 1)
    return F - np.swapaxes(F, 2, 3)


def test_euler_density_flat_is_zero():
    assert euler_density(np.zeros((2, 2, 2, 2))) == 0.0


def test_euler_density_rank_two_closed_form(rng):
    F = random_form(rng, 2, 2)
    assert euler_density(F, 1.7) == pytest.approx(F[0, 1, 0, 1] / (2 * np.pi) / 1.7, rel=1e-14)


def test_euler_density_product_bundle(rng):
    # a product of two rank-2 bundles over a product surface: densities multiply
    F = np.zeros((4, 4, 4, 4))
    a, b = rng.standard_normal(2)
    F[0, 1, 0, 1], F[1, 0, 0, 1], F[0, 1, 1, 0], F[1, 0, 1, 0] = a, -a, -a, a
    F[2, 3, 2, 3], F[3, 2, 2, 3], F[2, 3, 3, 2], F[3, 2, 3, 2] = b, -b, -b, b
    assert euler_density(F) == pytest.approx(a / (2 * np.pi) * b / (2 * np.pi), rel=1e-12)


def test_euler_density_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        pfaffian_of_form(np.zeros((2, 2, 4, 4)))


@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4]))
def test_euler_density_frame_invariance(seed, r):
    rng = np.random.default_rng(seed)
    F = random_form(rng, r, r)
    Q, R = np.linalg.qr(rng.standard_normal((r, r)))
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1
    G = np.einsum("ab,jkbc,dc->jkad", Q, F, Q)
    assert euler_density(G) == pytest.approx(euler_density(F), rel=1e-10, abs=1e-12)


def test_check_skew_form(rng):
    F = random_form(rng, 2, 2)
    assert check_skew_form(F) < 1e-15
    F[0, 1, 0, 0] = 1.0
    assert check_skew_form(F) > 0.01


def test_sphere_area():
    g = sphere_quadrature()
    assert integrate_density(g, np.ones(len(g))) == pytest.approx(4 * np.pi, rel=1e-8)


def test_torus_area():
    g = torus_quadrature(48)
    assert abs(integrate_density(g, np.ones(len(g))) - 4 * np.pi**2) < 1e-10


def _monomial_integral(a, b, c):
    # integral over the unit sphere of x^a y^b z^c
    if a % 2 or b % 2 or c % 2:
        return 0.0
    A, B, C = (a + 1) / 2, (b + 1) / 2, (c + 1) / 2
    return 2 * gamma(A) * gamma(B) * gamma(C) / gamma(A + B + C)


@pytest.mark.parametrize("a,b,c", [(2, 0, 0), (0, 0, 2), (2, 2, 2), (4, 0, 6), (1, 0, 3), (8, 6, 10), (0, 20, 0)])
def test_sphere_quadrature_monomials(a, b, c):
    g = sphere_quadrature(32, 64)
    t, p = g.nodes[:, 0], g.nodes[:, 1]
    x, y, z = np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)
    got = integrate_density(g, x**a * y**b * z**c)
    assert got == pytest.approx(_monomial_integral(a, b, c), abs=1e-8)


@given(st.integers(-23, 23), st.integers(-23, 23))
def test_torus_quadrature_trig_exact(k, l):
    g = torus_quadrature(48)
    x = g.nodes
    got = integrate_density(g, np.cos(k * x[:, 0] + l * x[:, 1]))
    want = 4 * np.pi**2 if k == l == 0 else 0.0
    assert abs(got - want) < 1e-12


def test_quadrature_weights_positive():
    with pytest.raises(ValueError):
        QuadratureGrid("x", np.zeros((2, 2)), np.array([1.0, -1.0]))


def test_integrate_empty_grid():
    with pytest.raises(ValueError):
        integrate_density(QuadratureGrid("x", np.zeros((0, 2)), np.zeros(0)), np.zeros(0))


def test_integrate_order_independent(rng):
    g = torus_quadrature(16)
    v = rng.standard_normal(len(g))
    perm = rng.permutation(len(g))
    g2 = QuadratureGrid("torus", g.nodes[perm], g.weights[perm])
    assert abs(integrate_density(g, v) - integrate_density(g2, v[perm])) < 1e-13
