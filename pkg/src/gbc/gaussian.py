"""Centered Gaussian measures on coefficient spaces and the Gaussian determinant average."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import UnsupportedRankError, perfect_matchings, signed_permutations

DEGENERACY_RTOL = 1e-12


class RngStream:
    """Counter-based normal generator keyed by (seed, stream).

    Uses numpy's Philox4x64 bit generator with the 128-bit key (seed, stream),
    so every stream index is an independent, reproducible substream and the
    output never depends on which worker consumes it.
    """
    algorithm = "philox4x64-10"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & (2**64 - 1)
        self.stream = int(stream) & (2**64 - 1)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def substream(self, index: int) -> "RngStream":
        # mixes the parent stream into the child's so nested families stay disjoint
        return RngStream(self.seed, (self.stream * 0x9E3779B97F4A7C15 + int(index) + 1) % 2**64)


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    """Centered Gaussian on R^N with covariance ``covariance`` in the declared basis."""
    covariance: np.ndarray

    def __post_init__(self):
        T = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if T.shape[0] != T.shape[1]:
            raise ValueError("covariance must be square")
        if not np.allclose(T, T.T, rtol=0, atol=1e-12 * max(1.0, np.abs(T).max())):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "covariance", 0.5 * (T + T.T))

    @classmethod
    def diagonal(cls, variances):
        return cls(np.diag(np.asarray(variances, dtype=float)))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @cached_property
    def _eig(self):
        lam, V = np.linalg.eigh(self.covariance)
        return lam, V

    @cached_property
    def factor(self) -> np.ndarray:
        """Symmetric square root; negative rounding noise in the spectrum is clipped."""
        lam, V = self._eig
        return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T

    @property
    def nondegenerate(self) -> bool:
        lam, _ = self._eig
        top = lam.max() if lam.size else 0.0
        return bool(top > 0 and lam.min() > DEGENERACY_RTOL * top)


def sample(measure: GaussianMeasure, rng: RngStream, size=None):
    """Draw T^{1/2} z with z standard normal; ``size`` adds leading sample axes."""
    shape = (measure.dim,) if size is None else tuple(np.atleast_1d(size)) + (measure.dim,)
    z = rng.normal(shape)
    return z @ measure.factor.T


def pushforward(L, measure: GaussianMeasure) -> GaussianMeasure:
    L = np.atleast_2d(np.asarray(L, dtype=float))
    return GaussianMeasure(L @ measure.covariance @ L.T)


def gaussian_det_average(u) -> float:
    """E[det(u_ij . tau)] for tau standard Gaussian, in closed form.

    ``u`` has shape (r, r, K). The expectation equals
    Z * sum_{s,p in S_r} sgn(s) sgn(p) prod_j <u[p_{2j-1}, s_{2j-1}], u[p_{2j}, s_{2j}]>
    with Z = 1/(2^h h!). The summand is invariant under reordering pairs and
    swapping inside a pair simultaneously in s and p, so s only needs to run
    over one representative per perfect matching and the 1/(2^h h!) cancels.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 3 or u.shape[0] != u.shape[1]:
        raise ValueError("u must have shape (r, r, K)")
    r = u.shape[0]
    if r % 2 or r == 0 or r > 6:
        raise UnsupportedRankError(f"rank {r} unsupported (need even r <= 6)")
    h = r // 2
    G = np.einsum("abk,cdk->abcd", u, u)
    sig, s_sig = perfect_matchings(r)
    phi, s_phi = signed_permutations(r)
    total = 0.0
    for s, ss in zip(sig, s_sig):
        prod = np.ones(len(phi))
        for j in range(h):
            prod *= G[phi[:, 2 * j], s[2 * j], phi[:, 2 * j + 1], s[2 * j + 1]]
        total += ss * np.dot(s_phi, prod)
    return float(total)


def det_average_q(u) -> float:
    """The unreduced double sum Q over S_r x S_r (reference implementation, small r)."""
    u = np.asarray(u, dtype=float)
    r = u.shape[0]
    h = r // 2
    G = np.einsum("abk,cdk->abcd", u, u)
    perms, signs = signed_permutations(r)
    total = 0.0
    for s, ss in zip(perms, signs):
        prod = np.ones(len(perms))
        for j in range(h):
            prod *= G[perms[:, 2 * j], s[2 * j], perms[:, 2 * j + 1], s[2 * j + 1]]
        total += ss * np.dot(signs, prod)
    return float(total)


def det_average_normalizer(r) -> float:
    h = r // 2
    return 1.0 / (2**h * math.factorial(h))


def det_average_mc(u, n, rng: RngStream, chunk=50_000):
    """Monte Carlo mean and standard error of det(u_ij . tau)."""
    u = np.asarray(u, dtype=float)
    K = u.shape[2]
    s1 = 0.0
    s2 = 0.0
    done = 0
    while done < n:
        k = min(chunk, n - done)
        tau = rng.normal((k, K))
        d = np.linalg.det(np.einsum("ijk,sk->sij", u, tau))
        s1 += d.sum()
        s2 += (d * d).sum()
        done += k
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0) * n / (n - 1)
    return mean, math.sqrt(var / n)
