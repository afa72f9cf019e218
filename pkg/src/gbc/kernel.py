"""Covariance-kernel geometry of a Gaussian family of sections.

A family is a finite basis of sections Psi_n with a Gaussian measure on the
coefficients. Its covariance kernel C(x, y) = Psi(x) T Psi(y)^T defines a
metric on the dual bundle, and its one-sided diagonal derivatives define a
connection and curvature. All matrices are expressed in the chart's reference
frame, which is orthonormal for the model's reference metric.

Array layouts (P = number of points, m = base dim, r = rank, N = basis size):
  values (P, r, N), d1 (P, m, r, N), d2 (P, m, m, r, N) with d2[:, i, j] = D_i D_j Psi,
  connection matrices (P, m, r, r), curvature (P, m, m, r, r).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_sylvester

from .gaussian import GaussianMeasure
from .geometry import euler_density as _euler_density


class DegenerateKernelError(RuntimeError):
    def __init__(self, msg, node=None):
        super().__init__(msg)
        self.node = node


def _T(a):
    return np.swapaxes(a, -1, -2)


def _sym_sqrt(C):
    lam, V = np.linalg.eigh(C)
    return np.einsum("...ab,...b,...cb->...ac", V, np.sqrt(lam), V)


@dataclass
class SectionJet:
    """Values and reference-covariant derivatives of a basis at points of one chart."""
    values: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    omega: np.ndarray
    F0: np.ndarray
    volume: np.ndarray

    @property
    def m(self):
        return self.d1.shape[1]

    @property
    def r(self):
        return self.values.shape[1]


def covariant_jet(values, partials, second, omega, domega, F0, volume) -> SectionJet:
    """Turn raw partial derivatives of frame components into covariant ones.

    ``domega[:, i, j]`` is the partial derivative along x^i of omega_j.
    """
    d1 = partials + np.einsum("pmab,pbn->pman", omega, values)
    d2 = (second
          + np.einsum("pijab,pbn->pijan", domega, values)
          + np.einsum("pjab,pibn->pijan", omega, partials)
          + np.einsum("piab,pjbn->pijan", omega, d1))
    return SectionJet(values, d1, d2, omega, F0, volume)


class SectionFamily:
    """Basis sections of a bundle model with a Gaussian coefficient measure.

    Subclasses implement ``local(chart_id, pts)`` returning the frame components
    of the basis and their first and second coordinate partials.
    """

    def __init__(self, model, measure: GaussianMeasure, name="family"):
        self.model = model
        self.measure = measure
        self.name = name

    @property
    def N(self):
        return self.measure.dim

    @property
    def r(self):
        return self.model.r

    def local(self, chart_id, pts, order=2):
        raise NotImplementedError

    def values(self, chart_id, pts):
        return self.local(chart_id, pts, order=0)[0]

    def jet(self, chart_id, pts) -> SectionJet:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vals, d1, d2 = self.local(chart_id, pts, order=2)
        omega, domega = self.model.connection(chart_id, pts)
        F0 = self.model.reference_curvature(chart_id, pts)
        vol = self.model.chart(chart_id).volume_factor(pts)
        return covariant_jet(vals, d1, d2, omega, domega, F0, vol)


class FiniteDifferenceFamily(SectionFamily):
    """Family given only by a value function; derivatives by Richardson-extrapolated differences.

    Differencing the frame components in the first slot and adding the
    connection term is the same as differencing the stencil C(x + h e_i, x).
    """

    def __init__(self, model, fn: Callable, measure, h1=1e-5, h2=1e-4, name="fd-family"):
        super().__init__(model, measure, name)
        self.fn = fn
        self.h1 = h1
        self.h2 = h2

    def local(self, chart_id, pts, order=2):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        f = lambda p: np.asarray(self.fn(chart_id, p), dtype=float)
        v = f(pts)
        if order == 0:
            return v, None, None
        m = pts.shape[1]
        E = np.eye(m)

        def first(i, h):
            return (f(pts + h * E[i]) - f(pts - h * E[i])) / (2 * h)

        def second(i, j, h):
            if i == j:
                return (f(pts + h * E[i]) - 2 * v + f(pts - h * E[i])) / h**2
            return (f(pts + h * (E[i] + E[j])) - f(pts + h * (E[i] - E[j]))
                    - f(pts - h * (E[i] - E[j])) + f(pts - h * (E[i] + E[j]))) / (4 * h * h)

        h1, h2 = self.h1, self.h2
        d1 = np.stack([(4 * first(i, h1 / 2) - first(i, h1)) / 3 for i in range(m)], axis=1)
        d2 = None
        if order >= 2:
            d2 = np.empty(v.shape[:1] + (m, m) + v.shape[1:])
            for i in range(m):
                for j in range(i, m):
                    d2[:, i, j] = (4 * second(i, j, h2 / 2) - second(i, j, h2)) / 3
                    d2[:, j, i] = d2[:, i, j]
        return v, d1, d2


class KernelGeometry:
    """Diagonal kernel data and the derived special pair at a set of points.

    C: (P, r, r) kernel on the diagonal (metric on the dual bundle)
    X: (P, m, r, r) first-slot covariant derivative D_{x^i} C(x, y) at x = y
    XX: (P, m, m, r, r) D_{x^i} D_{x^j} C at x = y
    YX: (P, m, m, r, r) D_{y^i} D_{x^j} C at x = y
    """

    def __init__(self, jet: SectionJet, covariance, degeneracy_rtol=1e-12):
        T = np.asarray(covariance, dtype=float)
        self.jet = jet
        P0 = jet.values
        TP = np.einsum("nk,pbk->pbn", T, P0)          # T Psi^T, as (P, r, N)
        self.C = np.einsum("pan,pbn->pab", P0, TP)
        self.X = np.einsum("pian,pbn->piab", jet.d1, TP)
        self.XX = np.einsum("pijan,pbn->pijab", jet.d2, TP)
        Td1 = np.einsum("nk,pibk->pibn", T, jet.d1)
        self.YX = np.einsum("pjan,pibn->pijab", jet.d1, Td1)
        lam = np.linalg.eigvalsh(self.C)
        bad = lam[:, 0] <= degeneracy_rtol * np.maximum(lam[:, -1], 1e-300)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise DegenerateKernelError(
                f"kernel degenerate at node {k}: eigenvalues {lam[k]}", node=k)
        self.Cinv = np.linalg.inv(self.C)

    @classmethod
    def from_family(cls, family: SectionFamily, chart_id, pts):
        return cls(family.jet(chart_id, pts), family.measure.covariance)

    @property
    def m(self):
        return self.X.shape[1]

    def metric(self):
        return self.Cinv

    def dC(self):
        """Covariant derivative of the diagonal kernel: both one-sided terms."""
        return self.X + _T(self.X)

    def dCinv(self):
        Ci = self.Cinv[:, None]
        return -Ci @ self.dC() @ Ci

    def connection_form(self):
        """Gamma_i = (plain first-slot derivative of C) C^{-1}; the connection is d - Gamma."""
        plain = self.X - self.jet.omega @ self.C[:, None]
        return plain @ self.Cinv[:, None]

    def relative_connection(self):
        """A_i = -D_{x^i} C(x, y)|_{x=y} C^{-1}, so the induced connection is D0 + A."""
        return -self.X @ self.Cinv[:, None]

    def curvature(self):
        """F = F0 + D_i A_j - D_j A_i + [A_i, A_j], in the reference frame."""
        A = self.relative_connection()
        Ci = self.Cinv[:, None, None]
        dCi = self.dCinv()                                   # (P, i, r, r)
        # D_i A_j = -(XX_ij + YX_ij) C^{-1} - X_j D_i(C^{-1})
        DA = -(self.XX + self.YX) @ Ci - self.X[:, None, :] @ dCi[:, :, None]
        F = self.jet.F0 + DA - np.swapaxes(DA, 1, 2)
        F = F + A[:, :, None] @ A[:, None, :] - A[:, None, :] @ A[:, :, None]
        return F

    def curvature_direct(self):
        """-dGamma + Gamma^Gamma, valid when the reference connection is trivial in-chart."""
        if np.any(self.jet.omega != 0):
            raise ValueError("direct curvature form needs a flat in-chart reference connection")
        G = self.connection_form()
        Ci = self.Cinv[:, None, None]
        # d_i Gamma_j = (XX_ij + YX_ij) C^{-1} + X_j d_i(C^{-1})
        dG = (self.XX + self.YX) @ Ci + self.X[:, None, :] @ self.dCinv()[:, :, None]
        F = -(dG - np.swapaxes(dG, 1, 2))
        F = F + G[:, :, None] @ G[:, None, :] - G[:, None, :] @ G[:, :, None]
        return F

    def orthonormal_frame(self):
        """S = C^{1/2}; the frame e S is orthonormal for the induced metric C^{-1}."""
        return _sym_sqrt(self.C)

    def orthonormal_curvature(self):
        S = self.orthonormal_frame()
        Si = np.linalg.inv(S)
        return Si[:, None, None] @ self.curvature() @ S[:, None, None]

    def orthonormal_connection(self):
        """Connection matrices of the induced connection in the induced-orthonormal frame e S."""
        S = self.orthonormal_frame()
        Si = np.linalg.inv(S)
        # plain derivative of C, then of its square root via S dS + dS S = dC
        dC_plain = self.dC() - (self.jet.omega @ self.C[:, None] - self.C[:, None] @ self.jet.omega)
        W = self.jet.omega + self.relative_connection()
        out = np.empty_like(W)
        for p in range(S.shape[0]):
            for i in range(self.m):
                dS = solve_sylvester(S[p], S[p], dC_plain[p, i])
                out[p, i] = Si[p] @ W[p, i] @ S[p] + Si[p] @ dS
        return out

    def euler_density(self):
        return _euler_density(self.orthonormal_curvature(), self.jet.volume)

    def skewness_defect(self):
        """max |F + C F^T C^{-1}| relative to max(1, max |F|): metric skewness of the curvature."""
        F = self.curvature()
        C = self.C[:, None, None]
        Ci = self.Cinv[:, None, None]
        d = F + C @ _T(F) @ Ci
        return float(np.abs(d).max() / max(np.abs(F).max(), 1.0))


# operation-style entry points ---------------------------------------------

@dataclass
class AmplenessReport:
    min_singular: float
    node: int
    passed: bool


def check_ample(family: SectionFamily, chart_id, pts, tol=1e-8) -> AmplenessReport:
    """Smallest r-th singular value of the evaluation matrix over the given nodes."""
    v = family.values(chart_id, np.atleast_2d(pts))
    L = family.measure.factor
    s = np.linalg.svd(v @ L, compute_uv=False)[:, -1]
    k = int(np.argmin(s))
    return AmplenessReport(float(s[k]), k, bool(s[k] > tol))


def covariance_kernel(family: SectionFamily, chart_id, x, y):
    """C(x, y) = Psi(x) T Psi(y)^T for matching arrays of points x and y."""
    vx = family.values(chart_id, np.atleast_2d(x))
    vy = family.values(chart_id, np.atleast_2d(y))
    return np.einsum("pan,nk,pbk->pab", vx, family.measure.covariance, vy)


def induced_metric(kg: KernelGeometry):
    return kg.metric()


def connection_form(kg: KernelGeometry):
    return kg.connection_form()


def relative_connection(kg: KernelGeometry):
    return kg.relative_connection()


def curvature_from_kernel(kg: KernelGeometry):
    return kg.curvature()


class EmbeddedPair:
    """Metric and projection connection of a rank-r subbundle of a trivial bundle.

    ``projection(pts)`` returns orthogonal projections (P, K, K). Frames are
    B = P V (V^T P V)^{-1/2} for a fixed V taken at ``base``; ``orient(pts)``
    (optional, (P, K, r)) fixes the orientation by requiring det(B^T orient) > 0.
    """

    def __init__(self, projection: Callable, r: int, base, orient: Optional[Callable] = None, h=1e-5):
        self.projection = projection
        self.r = r
        self.orient = orient
        self.h = h
        P0 = projection(np.atleast_2d(base))[0]
        lam, V = np.linalg.eigh(P0)
        self.V = V[:, -r:]

    def frame(self, pts):
        P = self.projection(pts)
        rank = np.linalg.matrix_rank(P, tol=1e-8)
        if np.any(rank != self.r):
            raise DegenerateKernelError("projection rank drop", node=int(np.argmax(rank != self.r)))
        PV = P @ self.V
        G = np.swapaxes(PV, -1, -2) @ PV
        B = PV @ np.linalg.inv(_sym_sqrt(G))
        if self.orient is not None:
            flip = np.linalg.det(np.swapaxes(B, -1, -2) @ self.orient(pts)) < 0
            B[flip, :, -1] *= -1
        return B

    def _diff(self, fn, pts, i):
        h = self.h
        e = np.zeros(pts.shape[1])
        e[i] = 1.0
        d = lambda s: (fn(pts + s * e) - fn(pts - s * e)) / (2 * s)
        return (4 * d(h / 2) - d(h)) / 3

    def metric(self, pts):
        B = self.frame(pts)
        return np.swapaxes(B, -1, -2) @ B

    def connection(self, pts):
        """omega_i = B^T dB/dx^i, i.e. the matrices of P d in the frame B."""
        pts = np.atleast_2d(pts)
        B = self.frame(pts)
        Bt = np.swapaxes(B, -1, -2)
        return np.stack([Bt @ self._diff(self.frame, pts, i) for i in range(pts.shape[1])], axis=1)

    def curvature(self, pts):
        """F_ij = B^T [dP_i, dP_j] B."""
        pts = np.atleast_2d(pts)
        B = self.frame(pts)
        Bt = np.swapaxes(B, -1, -2)
        m = pts.shape[1]
        dP = [self._diff(self.projection, pts, i) for i in range(m)]
        F = np.zeros((len(pts), m, m, self.r, self.r))
        for i in range(m):
            for j in range(m):
                F[:, i, j] = Bt @ (dP[i] @ dP[j] - dP[j] @ dP[i]) @ B
        return F


def special_pair_from_embedding(projection, r, base, orient=None) -> EmbeddedPair:
    return EmbeddedPair(projection, r, base, orient)


def family_projection(family: SectionFamily, chart_id):
    """Projection field onto the span of the dual frame inside the coefficient space.

    Columns of M(x) = (Psi(x) L)^T embed the dual frame; L is the covariance factor.
    Returns (projection, orient) callables for ``EmbeddedPair``.
    """
    L = family.measure.factor

    def M(pts):
        return np.swapaxes(family.values(chart_id, np.atleast_2d(pts)) @ L, -1, -2)

    def proj(pts):
        A = M(pts)
        G = np.swapaxes(A, -1, -2) @ A
        return A @ np.linalg.inv(G) @ np.swapaxes(A, -1, -2)

    return proj, M
