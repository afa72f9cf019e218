"""Smoothed spectral ensembles of a lattice covariant Laplacian on the torus.

Sections live on an n x n periodic grid with spacing h. The reference
connection enters through orthogonal link matrices U_i(x) = exp(h omega_i)
(omega evaluated at the edge midpoint), which transport values from x + h e_i
back to x. With the forward difference D_i u(x) = (U_i(x) u(x + h e_i) - u(x)) / h
the Laplacian is L = sum_i D_i^T D_i: symmetric, positive semidefinite, and the
plain five-point Laplacian on each component when omega = 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg
from scipy import integrate, stats
from scipy.special import gamma as gamma_fn

from .gaussian import GaussianMeasure
from .kernel import KernelGeometry, SectionFamily, SectionJet
from .models import ModelError, get_model

RESOLUTION_GUARD = 8.0
# modes with weight below this fraction of w(0) are dropped for non-compact profiles
WEIGHT_FLOOR = 1e-30
DENSE_MAX_N = 48


class EmptyEnsembleError(ValueError):
    pass


class EigenSolveError(RuntimeError):
    pass


# profiles -----------------------------------------------------------------

@dataclass(frozen=True)
class Profile:
    """Even cutoff profile: 'bump' exp(1 - 1/(1 - (t/T)^2)) on |t| < T, or 'gaussian' exp(-(t/T)^2)."""
    name: str = "bump"
    width: float = 4.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.name not in ("bump", "gaussian"):
            raise ValueError(f"unknown profile {self.name!r}")
        if not (self.width > 0 and self.amplitude > 0):
            raise ValueError("profile width and amplitude must be positive")

    @property
    def support(self):
        return self.width if self.name == "bump" else math.inf

    def __call__(self, t):
        t = np.abs(np.asarray(t, dtype=float)) / self.width
        if self.name == "gaussian":
            return self.amplitude * np.exp(-t * t)
        out = np.zeros_like(t)
        inside = t < 1
        out[inside] = np.exp(1 - 1 / (1 - t[inside] ** 2))
        return self.amplitude * out

    def cutoff(self):
        """Largest t with a retained weight."""
        if self.name == "bump":
            return self.width
        return self.width * math.sqrt(-math.log(WEIGHT_FLOOR))


def kappa(w: Profile, m=2):
    """(kappa, kappa_tilde) with kappa = vol(S^{m-1}) * int_0^inf w(t) t^{m-1} dt and kappa_tilde = kappa / (2 pi)^m."""
    sphere = 2 * math.pi ** (m / 2) / gamma_fn(m / 2)
    f = lambda t: float(w(np.array([t]))[0]) * t ** (m - 1)
    upper = w.support
    val, err = integrate.quad(f, 0, upper, epsabs=0, epsrel=1e-13, limit=200)
    k = sphere * val
    return k, k / (2 * math.pi) ** m


# lattice ------------------------------------------------------------------

@dataclass
class DiscretizedBundle:
    n: int
    h: float
    r: int
    links: np.ndarray          # (m, n, n, r, r): U_i at node (a, b) for the edge towards +e_i
    forward: list              # sparse D_i
    central: list              # sparse central covariant differences
    laplacian: sp.csr_matrix
    model_name: str = ""

    @property
    def nodes(self):
        x = self.h * np.arange(self.n)
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        return np.stack([X1.ravel(), X2.ravel()], -1)

    @property
    def mass(self):
        return self.h * self.h

    def node_index(self, pts, tol=1e-9):
        pts = np.atleast_2d(pts)
        g = pts / self.h
        k = np.rint(g)
        if np.abs(g - k).max() > tol:
            raise ValueError("points are not lattice nodes")
        k = np.mod(k.astype(int), self.n)
        return k[:, 0] * self.n + k[:, 1]


def _skew_expm(W):
    """exp of a batch of skew matrices."""
    if W.shape[-1] == 2:
        t = W[..., 1, 0]
        c, s = np.cos(t), np.sin(t)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    return np.stack([scipy.linalg.expm(w) for w in W.reshape(-1, *W.shape[-2:])]).reshape(W.shape)


def assemble_laplacian(model, n=48) -> DiscretizedBundle:
    side = 2 * np.pi
    h = side / n
    r = model.r
    x = h * np.arange(n)
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    nodes = np.stack([X1.ravel(), X2.ravel()], -1)
    links = np.empty((2, n, n, r, r))
    for i in range(2):
        mid = nodes.copy()
        mid[:, i] += h / 2
        w = model.connection("torus", mid)[0][:, i]
        if np.abs(w + np.swapaxes(w, -1, -2)).max() > 1e-12:
            raise ModelError(f"{model.name}: reference connection is not skew; links would not be orthogonal")
        links[i] = _skew_expm(h * w).reshape(n, n, r, r)

    idx = np.arange(n * n).reshape(n, n)
    N = n * n * r

    def shifted(i, step):
        return np.roll(idx, -step, axis=i).ravel()

    def block_op(blocks, cols, scale):
        # rows: node p, component a; cols: node cols[p], component b; value blocks[p, a, b]
        P = n * n
        rows = (np.arange(P)[:, None, None] * r + np.arange(r)[None, :, None]).repeat(r, 2)
        cc = (cols[:, None, None] * r + np.arange(r)[None, None, :]).repeat(r, 1)
        return sp.csr_matrix((scale * blocks.ravel(), (rows.ravel(), cc.ravel())), shape=(N, N))

    eye = sp.identity(N, format="csr")
    forward, central = [], []
    for i in range(2):
        U = links[i].reshape(-1, r, r)
        Ub = np.swapaxes(np.roll(links[i], 1, axis=i).reshape(-1, r, r), -1, -2)   # U_i(x - h e_i)^T
        fwd = block_op(U, shifted(i, 1), 1 / h) - eye / h
        cen = block_op(U, shifted(i, 1), 1 / (2 * h)) - block_op(Ub, shifted(i, -1), 1 / (2 * h))
        forward.append(fwd.tocsr())
        central.append(cen.tocsr())
    L = forward[0].T @ forward[0] + forward[1].T @ forward[1]
    L = ((L + L.T) * 0.5).tocsr()
    L.sort_indices()
    return DiscretizedBundle(n, h, r, links, forward, central, L, model.name)


@dataclass
class Eigenpairs:
    lam: np.ndarray
    vecs: np.ndarray           # l2-orthonormal columns
    h: float

    @property
    def sections(self):
        """Eigensections normalized in the discrete L2 product with mass h^2."""
        return self.vecs / self.h


def eigensections(bundle: DiscretizedBundle, lam_max=None, count=None) -> Eigenpairs:
    """Eigenpairs with eigenvalue <= lam_max (or the ``count`` smallest), ascending."""
    L = bundle.laplacian
    N = L.shape[0]
    norm = float(abs(L).sum(axis=1).max())
    if bundle.n <= DENSE_MAX_N:
        A = L.toarray()
        if count is not None:
            lam, V = scipy.linalg.eigh(A, subset_by_index=(0, min(count, N) - 1))
        elif lam_max is not None and np.isfinite(lam_max) and lam_max < norm:
            lam, V = scipy.linalg.eigh(A, subset_by_value=(-np.inf, lam_max))
        else:
            lam, V = scipy.linalg.eigh(A)
    else:
        k = count if count is not None else None
        if k is None:
            # Weyl estimate for the number of modes below lam_max, then grow until covered
            area = (2 * np.pi) ** 2
            k = int(1.3 * bundle.r * area * lam_max / (4 * np.pi)) + 16
        while True:
            k = min(k, N - 2)
            lam, V = scipy.sparse.linalg.eigsh(L.tocsc(), k=k, sigma=-1e-3, which="LM", tol=1e-12)
            order = np.argsort(lam)
            lam, V = lam[order], V[:, order]
            if count is not None or lam[-1] > lam_max or k >= N - 2:
                break
            k = int(k * 1.5)
        if count is None:
            keep = lam <= lam_max
            lam, V = lam[keep], V[:, keep]
    if len(lam):
        resid = np.abs(L @ V - V * lam).max()
        if resid > 1e-8 * norm:
            raise EigenSolveError(f"eigen residual {resid:.3g} exceeds 1e-8 ||L|| = {1e-8 * norm:.3g}")
    return Eigenpairs(lam, V, bundle.h)


# ensembles ----------------------------------------------------------------

class GridEnsembleFamily(SectionFamily):
    """Eigensections with variances w(eps sqrt(lambda)), evaluated at lattice nodes.

    Covariant derivatives are central lattice differences with the same links
    as the Laplacian.
    """

    def __init__(self, model, bundle: DiscretizedBundle, eig: Eigenpairs, eps, profile: Profile):
        lam = np.clip(eig.lam, 0.0, None)
        wts = profile(eps * np.sqrt(lam))
        keep = wts > WEIGHT_FLOOR * profile(np.zeros(1))[0]
        if not keep.any():
            raise EmptyEnsembleError(f"no modes retained at eps={eps:g}")
        self.bundle = bundle
        self.eps = eps
        self.profile = profile
        self.retained = np.flatnonzero(keep)
        self.lam = eig.lam[keep]
        self.basis = eig.sections[:, keep]
        super().__init__(model, GaussianMeasure.diagonal(wts[keep]), f"spectral eps={eps:g}")
        self._derivs = None

    def _grid(self, a):
        n, r = self.bundle.n, self.bundle.r
        return a.reshape(n * n, r, -1)

    def _derivatives(self):
        if self._derivs is None:
            Dc = self.bundle.central
            d1 = [Dc[i] @ self.basis for i in range(2)]
            d2 = [[Dc[i] @ d1[j] for j in range(2)] for i in range(2)]
            self._derivs = (d1, d2)
        return self._derivs

    def local(self, chart_id, pts, order=2):
        k = self.bundle.node_index(pts)
        v = self._grid(self.basis)[k]
        if order == 0:
            return v, None, None
        raise ModelError("lattice ensembles provide covariant differences only; use jet()")

    def jet(self, chart_id, pts) -> SectionJet:
        pts = np.atleast_2d(pts)
        k = self.bundle.node_index(pts)
        d1, d2 = self._derivatives()
        vals = self._grid(self.basis)[k]
        D1 = np.stack([self._grid(d)[k] for d in d1], 1)
        D2 = np.stack([np.stack([self._grid(d)[k] for d in row], 1) for row in d2], 1)
        omega, _ = self.model.connection(chart_id, pts)
        F0 = self.model.reference_curvature(chart_id, pts)
        return SectionJet(vals, D1, D2, omega, F0, np.ones(len(pts)))


def build_ensemble(model, bundle, eig, eps, profile: Profile) -> GridEnsembleFamily:
    return GridEnsembleFamily(model, bundle, eig, eps, profile)


def grid_kernel_geometry(family: GridEnsembleFamily, chunk=576) -> KernelGeometry:
    """KernelGeometry at every lattice node, assembled chunk by chunk in node order."""
    nodes = family.bundle.nodes
    parts = [KernelGeometry(family.jet("torus", nodes[s:s + chunk]), family.measure.covariance)
             for s in range(0, len(nodes), chunk)]
    kg = parts[0]
    if len(parts) > 1:
        jet = SectionJet(*[np.concatenate([getattr(p.jet, f) for p in parts])
                           for f in ("values", "d1", "d2", "omega", "F0", "volume")])
        kg = KernelGeometry.__new__(KernelGeometry)
        kg.jet = jet
        for f in ("C", "X", "XX", "YX", "Cinv"):
            setattr(kg, f, np.concatenate([getattr(p, f) for p in parts]))
    return kg


# convergence sweep --------------------------------------------------------

@dataclass
class SweepRow:
    eps: float
    modes: int
    metric_error: float
    metric_spread: float
    connection_defect: float
    curvature_error: float
    balance: float


@dataclass
class SlopeFit:
    quantity: str
    slope: float
    intercept: float
    residual: float
    ci_low: float
    ci_high: float
    valid: bool


@dataclass
class ConvergenceReport:
    model: str
    n: int
    h: float
    profile: Profile
    kappa: float
    kappa_tilde: float
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)
    nested: bool = True
    balance_ratios: list = field(default_factory=list)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])


def fit_slope(eps, err, quantity="") -> SlopeFit:
    """Least-squares slope of log err against log eps with a 95% t-interval."""
    eps = np.asarray(eps, float)
    err = np.asarray(err, float)
    if len(eps) < 3 or np.any(err <= 0) or not np.all(np.isfinite(err)):
        return SlopeFit(quantity, 0.0, 0.0, 0.0, 0.0, 0.0, False)
    x, y = np.log(eps), np.log(err)
    (slope, icpt), res, *_ = np.polyfit(x, y, 1, full=True)
    ssr = float(res[0]) if len(res) else 0.0
    dof = len(x) - 2
    sxx = float(np.sum((x - x.mean()) ** 2))
    se = math.sqrt(ssr / dof / sxx) if dof > 0 else 0.0
    t = stats.t.ppf(0.975, dof) if dof > 0 else 0.0
    return SlopeFit(quantity, float(slope), float(icpt), math.sqrt(ssr / len(x)), slope - t * se, slope + t * se, True)


def dyadic_eps(h, count=4, start=RESOLUTION_GUARD):
    """Decreasing dyadic list start*h*2^(count-1), ..., start*h."""
    return [start * h * 2.0 ** k for k in range(count - 1, -1, -1)]


@lru_cache(maxsize=4)
def _cached_spectrum(model_name, model_items, n, lam_max):
    model = get_model(model_name, **dict(model_items))
    bundle = assemble_laplacian(model, n)
    return model, bundle, eigensections(bundle, lam_max=lam_max)


def convergence_sweep(model, eps_list, profile: Profile, n=48, jobs=1) -> ConvergenceReport:
    """Build the ensemble at each eps, compare its induced pair with the model's reference pair.

    Errors are sup norms over lattice nodes of the entries of
      eps^2 C - kappa_tilde I   (kernel diagonal, the metric on the dual bundle),
      A_i                       (induced minus reference connection),
      F_12 - F0_12              (curvature in the reference frame),
    plus the mixed second-derivative balance eps^2 (XX_ii + YX_ii).
    """
    h = 2 * np.pi / n
    k, kt = kappa(profile, 2)
    rep = ConvergenceReport(model.name, n, h, profile, k, kt)
    eps_ok = []
    for e in sorted(eps_list, reverse=True):
        if e < RESOLUTION_GUARD * h * (1 - 1e-12):
            rep.rejected.append(e)
        else:
            eps_ok.append(float(e))
    if not eps_ok:
        raise ValueError("no eps entry passes the resolution guard eps >= 8h")
    lam_max = (profile.cutoff() / min(eps_ok)) ** 2
    _, bundle, eig = _cached_spectrum(model.name, tuple(sorted(model.init_params().items())), n, lam_max)
    args = [(model.name, model.init_params(), bundle, eig, e, profile, kt) for e in eps_ok]
    if jobs > 1 and len(args) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as ex:
            out = list(ex.map(_sweep_entry, args))
    else:
        out = [_sweep_entry(a) for a in args]
    rep.rows = [o[0] for o in out]
    retained = [o[1] for o in out]
    # coarser eps keeps a subset of the finer eps modes (profile non-increasing)
    rep.nested = all(set(retained[i]).issubset(retained[i + 1]) for i in range(len(retained) - 1))
    eps = rep.column("eps")
    for q in ("metric_error", "connection_defect", "curvature_error"):
        rep.slopes[q] = fit_slope(eps, rep.column(q), q)
    b = rep.column("balance")
    rep.balance_ratios = [float(b[i + 1] / b[i]) if b[i] > 0 else math.inf for i in range(len(b) - 1)]
    return rep


def _sweep_entry(args):
    name, params, bundle, eig, eps, profile, kt = args
    model = get_model(name, **params)   # rebuilt here so workers never pickle the model
    fam = build_ensemble(model, bundle, eig, eps, profile)
    kg = grid_kernel_geometry(fam)
    I = np.eye(bundle.r)
    met = eps ** 2 * kg.C
    A = kg.relative_connection()
    F = kg.curvature()
    F0 = kg.jet.F0
    bal = eps ** 2 * np.stack([kg.XX[:, i, i] + kg.YX[:, i, i] for i in range(kg.m)], 1)
    row = SweepRow(
        eps=eps,
        modes=len(fam.retained),
        metric_error=float(np.abs(met - kt * I).max()),
        metric_spread=float((met.max(0) - met.min(0)).max()),
        connection_defect=float(np.abs(A).max()),
        curvature_error=float(np.abs(F[:, 0, 1] - F0[:, 0, 1]).max()),
        balance=float(np.abs(bal).max()),
    )
    return row, fam.retained.tolist()
