"""Charts, quadrature grids, Pfaffians and the Euler density of a curvature form.

Curvature arrays use the layout ``F[..., j, k, a, b]``: for each pair of
coordinate directions (j, k) an r x r endomorphism matrix in the bundle frame.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np


class UnsupportedRankError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Chart:
    """Coordinate chart on an axis-aligned box.

    ``metric_at`` maps an array of points (P, m) to metric tensors (P, m, m).
    ``periodic`` marks coordinate directions that wrap (torus charts).
    """
    id: str
    lower: tuple
    upper: tuple
    metric_at: Callable[[np.ndarray], np.ndarray]
    periodic: bool = False
    orientation: int = 1

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, pts, pad=0.0):
        pts = np.atleast_2d(pts)
        lo = np.asarray(self.lower) - pad
        hi = np.asarray(self.upper) + pad
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def volume_factor(self, pts):
        g = self.metric_at(np.atleast_2d(pts))
        return np.sqrt(np.linalg.det(g))


@dataclass
class QuadratureGrid:
    """Nodes in one chart with weights for integrating densities against metric volume.

    ``weights`` already include the metric volume factor and the partition of
    unity, so a density ``f`` integrates as ``sum(weights * f)``.
    """
    chart_id: str
    nodes: np.ndarray
    weights: np.ndarray
    pou: np.ndarray = field(default=None)
    shape: Optional[tuple] = None

    def __post_init__(self):
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.pou is None:
            self.pou = np.ones(len(self.weights))
        if len(self.weights) and np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")

    def __len__(self):
        return len(self.weights)


def sphere_quadrature(n_theta=64, n_phi=128) -> QuadratureGrid:
    """Gauss-Legendre in cos(theta) times the uniform rule in phi, in polar coordinates.

    Exact for spherical harmonics of degree below min(2 n_theta, n_phi).
    """
    z, wz = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(z)[::-1]
    wz = wz[::-1]
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    W = np.outer(wz, np.full(n_phi, 2 * np.pi / n_phi))
    nodes = np.stack([T.ravel(), P.ravel()], axis=-1)
    return QuadratureGrid("polar", nodes, W.ravel(), shape=(n_theta, n_phi))


def torus_quadrature(n=48, side=2 * np.pi) -> QuadratureGrid:
    """Uniform periodic trapezoid grid on a flat square torus."""
    h = side / n
    x = h * np.arange(n)
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    nodes = np.stack([X1.ravel(), X2.ravel()], axis=-1)
    return QuadratureGrid("torus", nodes, np.full(n * n, h * h), shape=(n, n))


def integrate_density(grid: QuadratureGrid, values) -> float:
    """Integrate pointwise density values against the grid's metric volume weights."""
    values = np.asarray(values, dtype=float)
    if len(grid) == 0:
        raise ValueError("empty quadrature grid")
    if values.shape != grid.weights.shape:
        raise ValueError(f"expected {grid.weights.shape} values, got {values.shape}")
    # np.sum reduces pairwise, so the result does not depend on how nodes were produced
    return float(np.sum(grid.weights * values))


# permutations -------------------------------------------------------------

def perm_sign(p) -> int:
    p = list(p)
    s = 1
    for i in range(len(p)):
        while p[i] != i:
            j = p[i]
            p[i], p[j] = p[j], p[i]
            s = -s
    return s


@lru_cache(maxsize=None)
def signed_permutations(r):
    perms = np.array(list(itertools.permutations(range(r))), dtype=int)
    signs = np.array([perm_sign(p) for p in perms], dtype=float)
    return perms, signs


@lru_cache(maxsize=None)
def ordered_pair_permutations(r):
    """Permutations with p[2j] < p[2j+1] for every j, with their signs."""
    perms, signs = signed_permutations(r)
    keep = np.all(perms[:, 0::2] < perms[:, 1::2], axis=1)
    return perms[keep], signs[keep]


@lru_cache(maxsize=None)
def perfect_matchings(r):
    """Ordered-pair permutations whose pair leaders also increase: one per matching."""
    perms, signs = ordered_pair_permutations(r)
    keep = np.all(np.diff(perms[:, 0::2], axis=1) > 0, axis=1) if r > 2 else np.ones(len(perms), bool)
    return perms[keep], signs[keep]


def _check_even_rank(r, max_r):
    if r % 2 or r == 0 or r > max_r:
        raise UnsupportedRankError(f"rank {r} unsupported (need even r <= {max_r})")


def pfaffian_sum(a) -> float:
    """Pfaffian of a skew matrix of even size r <= 8.

    The input is antisymmetrized first. Small ranks use the permutation sum
    directly, larger ones expand along the first row.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("square matrix expected")
    r = a.shape[0]
    _check_even_rank(r, 8)
    a = 0.5 * (a - a.T)
    if r <= 4:
        return _pf_perm(a)
    return _pf_expand(a)


def _pf_perm(a):
    r = a.shape[0]
    h = r // 2
    perms, signs = signed_permutations(r)
    terms = np.prod(a[perms[:, 0::2], perms[:, 1::2]], axis=1)
    return float(np.dot(signs, terms) / (2**h * math.factorial(h)))


def _pf_expand(a):
    r = a.shape[0]
    if r == 2:
        return float(a[0, 1])
    if r <= 4:
        return _pf_perm(a)
    total = 0.0
    for j in range(1, r):
        if a[0, j] == 0.0:
            continue
        rest = [k for k in range(1, r) if k != j]
        sub = a[np.ix_(rest, rest)]
        total += (-1) ** (j + 1) * a[0, j] * _pf_expand(sub)
    return float(total)


def pfaffian_of_form(F):
    """(1/h!) sum over ordered-pair permutations of the curvature pairing, for m = r.

    ``F`` has layout (..., m, m, r, r); returns an array over the leading axes.
    This is the top-degree coefficient of pf(-F) on the coordinate frame.
    """
    F = np.asarray(F, dtype=float)
    m, r = F.shape[-4], F.shape[-1]
    if m != r or F.shape[-3] != m or F.shape[-2] != r:
        raise DimensionMismatchError(f"need m = r, got m={m}, r={r}")
    _check_even_rank(r, 8)
    h = r // 2
    perms, signs = ordered_pair_permutations(r)
    out = np.zeros(F.shape[:-4])
    for sig, s_sig in zip(perms, signs):
        for phi, s_phi in zip(perms, signs):
            term = np.ones(F.shape[:-4])
            for j in range(h):
                term = term * F[..., phi[2 * j], phi[2 * j + 1], sig[2 * j], sig[2 * j + 1]]
            out = out + s_sig * s_phi * term
    return out / math.factorial(h)


def euler_density(F, frame_volume=1.0):
    """Density of the Euler form against the metric volume.

    ``F`` is the curvature in a positively oriented orthonormal bundle frame,
    layout (..., m, m, r, r) with coordinate indices first; ``frame_volume``
    is sqrt(det g) of the coordinates at each point.
    """
    F = np.asarray(F, dtype=float)
    r = F.shape[-1]
    pf = pfaffian_of_form(F)
    return pf / (2 * np.pi) ** (r // 2) / np.asarray(frame_volume, dtype=float)


def check_skew_form(F, tol=1e-10) -> float:
    """Largest violation of antisymmetry in either index pair, relative to max |F|."""
    F = np.asarray(F, dtype=float)
    scale = max(np.max(np.abs(F)), 1e-300)
    d1 = np.max(np.abs(F + np.swapaxes(F, -1, -2)))
    d2 = np.max(np.abs(F + np.swapaxes(F, -3, -4)))
    return max(d1, d2) / scale
