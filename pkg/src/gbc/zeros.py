"""Zeros of random sections (base dimension equal to rank) and Monte Carlo pairing with test functions."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .gaussian import RngStream, sample
from .geometry import integrate_density
from .kernel import KernelGeometry

COND_MAX = 1e8
MAX_NEWTON = 50
MAX_RESAMPLE = 1000
# zeros closer than this in ambient coordinates are one zero; genuine close pairs
# are kept apart because every seed cell's winding number must match its zeros
MERGE_RADIUS = 1e-6
# top-level seed cells are offset by these fractions of a cell so that zeros at
# symmetric points (poles, multiples of pi/2) do not sit on cell boundaries,
# where the boundary winding number is undefined
GRID_SHIFT = np.array([0.3819660112501051, 0.2360679774997897])


class TransversalityError(RuntimeError):
    pass


@dataclass
class Zero:
    chart: str
    coords: np.ndarray
    ambient: np.ndarray
    index: int
    cond: float
    residual: float


@dataclass
class SignedZeroSet:
    coefficients: np.ndarray
    zeros: list = field(default_factory=list)
    degenerate: bool = False
    reason: str = ""
    scale: float = 1.0
    radius: float = 0.0
    stalled: int = 0
    refined: int = 0

    @property
    def signed_count(self) -> int:
        return sum(z.index for z in self.zeros)


@dataclass
class MCEstimate:
    n: int
    mean: float
    stderr: float
    failures: int
    quadrature: float = float("nan")

    @property
    def failure_rate(self):
        return self.failures / max(self.n, 1)


@dataclass(frozen=True)
class TestFunction:
    """Scalar field on a model, by name.

    'x3' is the third ambient coordinate (height on the sphere, cos x2 on the
    torus); 'custom-fourier' is c0 + sum a cos(k.q) + b sin(k.q) in the model's
    angular coordinates q, with terms given as (k1, k2, a, b).
    """
    __test__ = False
    name: str
    c0: float = 0.0
    terms: tuple = ()

    def __call__(self, model, chart_id, pts):
        pts = np.atleast_2d(pts)
        if self.name == "one":
            return np.ones(len(pts))
        if self.name == "x3":
            return model.ambient(chart_id, pts)[:, 2]
        if self.name == "x3sq":
            return model.ambient(chart_id, pts)[:, 2] ** 2
        if self.name == "custom-fourier":
            q = model.angles(chart_id, pts)
            out = np.full(len(pts), float(self.c0))
            for k1, k2, a, b in self.terms:
                ph = k1 * q[:, 0] + k2 * q[:, 1]
                out += a * np.cos(ph) + b * np.sin(ph)
            return out
        raise ValueError(f"unknown test function {self.name!r}")


TEST_FUNCTIONS = ("one", "x3", "x3sq", "custom-fourier")


def sample_section(family, rng: RngStream):
    return sample(family.measure, rng)


def _seed_grid(chart, n):
    lo = np.asarray(chart.lower, float)
    hi = np.asarray(chart.upper, float)
    if chart.periodic:
        ax = [lo[i] + (hi[i] - lo[i]) * np.arange(n + 1) / n for i in range(2)]
    else:
        ax = [np.linspace(lo[i], hi[i], n + 1) for i in range(2)]
    return ax


def _newton(family, chart_id, coef, u0, tol_abs, periodic, period):
    """Vectorized Newton on the local representative; returns points, residuals, jacobians, converged."""
    u = u0.copy()
    conv = np.zeros(len(u), bool)
    res = np.full(len(u), np.inf)
    Jm = np.zeros((len(u), 2, 2))
    active = np.ones(len(u), bool)
    for _ in range(MAX_NEWTON):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        v, d1, _ = family.local(chart_id, u[idx], order=1)
        s = v @ coef
        Jac = np.einsum("pian,n->pai", d1, coef)
        res[idx] = np.linalg.norm(s, axis=1)
        Jm[idx] = Jac
        done = res[idx] < tol_abs
        conv[idx[done]] = True
        active[idx[done]] = False
        idx, s, Jac = idx[~done], s[~done], Jac[~done]
        if len(idx) == 0:
            break
        det = np.linalg.det(Jac)
        ok = np.abs(det) > 1e-300
        step = np.zeros_like(s)
        step[ok] = np.linalg.solve(Jac[ok], s[ok][..., None])[..., 0]
        active[idx[~ok]] = False
        # backtracking: halve the step until the residual decreases
        t = np.ones(len(idx))
        r0 = np.linalg.norm(s, axis=1)
        for _ in range(12):
            trial = u[idx] - t[:, None] * step
            r1 = np.linalg.norm(family.values(chart_id, trial) @ coef, axis=1)
            worse = r1 >= r0
            if not worse.any():
                break
            t[worse] *= 0.5
        u[idx] -= t[:, None] * step
        if periodic:
            u[idx] = np.mod(u[idx], period)
        # iterates that wander far outside the chart are dropped
        active[idx[np.any(np.abs(u[idx]) > 1e3, axis=1)]] = False
    # final polish so reported residual and jacobian belong to the returned point
    if conv.any():
        k = np.flatnonzero(conv)
        v, d1, _ = family.local(chart_id, u[k], order=1)
        s = v @ coef
        Jac = np.einsum("pian,n->pai", d1, coef)
        step = np.linalg.solve(Jac, s[..., None])[..., 0]
        u[k] -= step
        if periodic:
            u[k] = np.mod(u[k], period)
        v, d1, _ = family.local(chart_id, u[k], order=1)
        res[k] = np.linalg.norm(v @ coef, axis=1)
        Jm[k] = np.einsum("pian,n->pai", d1, coef)
    return u, res, Jm, conv


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _cell_scan(family, chart_id, coef, lo, hi, n, q=4):
    """Sample the section on an n x n cell grid over [lo, hi] with q points per cell edge.

    Returns cell axes, corner bracketing flags and boundary winding numbers per cell.
    """
    nq = n * q
    ax = [np.linspace(lo[i], hi[i], nq + 1) for i in range(2)]
    key = (chart_id, tuple(lo), tuple(hi), n, q)
    cache = family.__dict__.setdefault("_scan_cache", {})
    basis = cache.get(key)
    if basis is None:
        U1, U2 = np.meshgrid(ax[0], ax[1], indexing="ij")
        basis = family.values(chart_id, np.stack([U1.ravel(), U2.ravel()], -1))
        if len(cache) < 8:          # only the top-level scans repeat across samples
            cache[key] = basis
    s = (basis @ coef).reshape(nq + 1, nq + 1, 2)
    ang = np.arctan2(s[..., 1], s[..., 0])
    ex = _wrap(np.diff(ang, axis=0)).reshape(n, q, nq + 1).sum(1)[:, ::q]   # (n, n+1)
    ey = _wrap(np.diff(ang, axis=1)).reshape(nq + 1, n, q).sum(2)[::q, :]   # (n+1, n)
    wind = np.rint((ex[:, :-1] + ey[1:, :] - ex[:, 1:] - ey[:-1, :]) / (2 * np.pi)).astype(int)
    c = s[::q, ::q]
    c4 = np.stack([c[:-1, :-1], c[1:, :-1], c[:-1, 1:], c[1:, 1:]], 0)
    brk = np.all((c4.min(0) <= 0) & (c4.max(0) >= 0), axis=-1)
    return [a[::q] for a in ax], brk, wind, s


def _search(family, chart_id, coef, lo, hi, n, tol_abs, periodic, period, depth, stats):
    """Zeros inside the box [lo, hi), consistent with the winding of every cell.

    Returns a list of (u, residual, jacobian) or None when some cell stays inconsistent.
    """
    ax, brk, wind, _ = _cell_scan(family, chart_id, coef, lo, hi, n)
    cand = brk | (wind != 0)
    i, j = np.nonzero(cand)
    zeros = []
    if len(i):
        centers = np.stack([(ax[0][i] + ax[0][i + 1]) / 2, (ax[1][j] + ax[1][j + 1]) / 2], -1)
        u, res, Jm, conv = _newton(family, chart_id, coef, centers, tol_abs, periodic, period)
        stats["stalled"] += int(np.sum(~conv))
        for k in np.flatnonzero(conv):
            uk = u[k]
            if periodic:
                uk = lo + np.mod(uk - lo, period)
            if np.all(uk >= lo) and np.all(uk < hi):
                if all(np.linalg.norm(uk - z[0]) > 1e-7 for z in zeros):
                    zeros.append((uk, res[k], Jm[k]))
    h = (np.asarray(hi) - np.asarray(lo)) / n
    found = np.zeros((n, n), dtype=int)
    cell_of = []
    for u, _, Jac in zeros:
        c = np.minimum(((u - lo) // h).astype(int), n - 1)
        cell_of.append(tuple(c))
        found[c[0], c[1]] += int(np.sign(np.linalg.det(Jac)))
    bad = np.argwhere(found != wind)
    if len(bad) == 0:
        return zeros
    if depth == 0:
        return None
    stats["refined"] += len(bad)
    bad_set = {tuple(b) for b in bad}
    keep = [z for z, c in zip(zeros, cell_of) if c not in bad_set]
    for a, b in bad:
        clo = np.array([ax[0][a], ax[1][b]])
        chi = np.array([ax[0][a + 1], ax[1][b + 1]])
        sub = _search(family, chart_id, coef, clo, chi, 4, tol_abs, False, period, depth - 1, stats)
        if sub is None:
            return None
        keep.extend(sub)
    return keep


def find_zeros(coef, family, seed_n=32, rtol=1e-10, max_depth=3) -> SignedZeroSet:
    """Locate the zeros of the section sum_n coef_n Psi_n with their indices.

    Seed cells whose corners bracket zero in both frame components, or whose
    boundary winding number is nonzero, start a damped Newton iteration at
    their center. The net index of the zeros found in each cell must match
    that cell's winding number; inconsistent cells are subdivided, and a
    sample is flagged degenerate if that does not resolve them. Copies of a
    zero found from two charts are merged (ambient distance below
    MERGE_RADIUS) and the chart with the larger partition-of-unity weight
    keeps it. The index is the sign of the Jacobian determinant of the frame
    components.
    """
    model = family.model
    if model.m != 2 or model.r != 2:
        raise ValueError("zero finding needs m = r = 2")
    coef = np.asarray(coef, dtype=float)
    out = SignedZeroSet(coefficients=coef)
    scale = 0.0
    for cid in model.zero_charts:
        chart = model.chart(cid)
        ax = _seed_grid(chart, seed_n)
        U1, U2 = np.meshgrid(ax[0], ax[1], indexing="ij")
        corners = np.stack([U1.ravel(), U2.ravel()], -1)
        scale = max(scale, np.abs(family.values(cid, corners) @ coef).max())
    out.scale = float(scale)
    out.radius = MERGE_RADIUS
    if scale == 0:
        out.degenerate = True
        out.reason = "zero section"
        return out
    stats = {"stalled": 0, "refined": 0}
    entries = []
    for cid in model.zero_charts:
        chart = model.chart(cid)
        lo = np.asarray(chart.lower, float)
        hi = np.asarray(chart.upper, float)
        cell = (hi - lo) / seed_n
        if chart.periodic:
            lo, hi = lo + GRID_SHIFT * cell, hi + GRID_SHIFT * cell
        else:
            lo, hi = lo - GRID_SHIFT * cell, hi + (1 - GRID_SHIFT) * cell
        zs = _search(family, cid, coef, lo, hi, seed_n, rtol * scale, chart.periodic, hi - lo, max_depth, stats)
        if zs is None:
            out.degenerate = True
            out.reason = "cell winding inconsistent with located zeros"
            return out
        for u, res, Jac in zs:
            amb = model.ambient(cid, u[None])[0]
            w = float(model.pou_weight(cid, u[None])[0])
            entries.append((cid, u, amb, w, res, Jac))
    out.stalled = stats["stalled"]
    out.refined = stats["refined"]
    # the same zero seen from two charts: keep the copy with the larger chart weight
    kept = []
    for e in sorted(entries, key=lambda e: -e[3]):
        if all(np.linalg.norm(e[2] - k[2]) > MERGE_RADIUS for k in kept):
            kept.append(e)
    kept.sort(key=lambda e: tuple(np.round(e[2], 9)))
    for cid, u, amb, w, res, Jac in kept:
        sv = np.linalg.svd(Jac, compute_uv=False)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
        if cond > COND_MAX:
            out.degenerate = True
            out.reason = f"jacobian condition {cond:.3g} at a zero"
        out.zeros.append(Zero(cid, u, amb, int(np.sign(np.linalg.det(Jac))), cond, float(res)))
    return out


def zero_index(jacobian, connection_term=None, value=None) -> int:
    """sign det of the linearization at a zero; a connection term times the (zero) value drops out."""
    Jac = np.asarray(jacobian, float)
    if connection_term is not None and value is not None:
        Jac = Jac + np.einsum("iab,b->ai", connection_term, value)
    return int(np.sign(np.linalg.det(Jac)))


def pair_current(zs: SignedZeroSet, f, model) -> float:
    """sum over zeros of index * f(zero)."""
    if zs.degenerate:
        raise TransversalityError(f"refusing to pair a degenerate zero set: {zs.reason}")
    total = 0.0
    for z in zs.zeros:
        total += z.index * float(f(model, z.chart, z.coords[None])[0])
    return total


# Monte Carlo --------------------------------------------------------------

def _sample_values(family, fns, seed, i, seed_n):
    """Accepted sample i: resample on degeneracy with deterministic child streams."""
    base = RngStream(seed, i)
    for attempt in range(MAX_RESAMPLE):
        rng = base if attempt == 0 else base.substream(attempt)
        coef = sample_section(family, rng)
        zs = find_zeros(coef, family, seed_n)
        if not zs.degenerate:
            vals = [pair_current(zs, f, family.model) for f in fns]
            return vals, zs.signed_count, len(zs.zeros), attempt
    raise TransversalityError(f"sample {i}: {MAX_RESAMPLE} consecutive degenerate draws")


def _mc_chunk(args):
    family_factory, fns, seed, lo, hi, seed_n = args
    family = family_factory()
    vals = np.empty((hi - lo, len(fns)))
    counts = np.empty(hi - lo, dtype=np.int64)
    nz = np.empty(hi - lo, dtype=np.int64)
    fails = np.empty(hi - lo, dtype=np.int64)
    for k, i in enumerate(range(lo, hi)):
        v, c, z, a = _sample_values(family, fns, seed, i, seed_n)
        vals[k] = v
        counts[k] = c
        nz[k] = z
        fails[k] = a
    return lo, vals, counts, nz, fails


@dataclass
class MCRun:
    values: np.ndarray      # (n, n_functions) per-sample pairings
    signed_counts: np.ndarray
    zero_counts: np.ndarray
    resamples: np.ndarray

    def estimate(self, k) -> MCEstimate:
        v = self.values[:, k]
        n = len(v)
        mean = float(np.mean(v))
        sd = float(np.std(v, ddof=1)) if n > 1 else 0.0
        return MCEstimate(n, mean, sd / math.sqrt(n), int(self.resamples.sum()))


def run_samples(family_factory, fns, n, seed, jobs=1, seed_n=32, chunk=250) -> MCRun:
    """Process samples 0..n-1, each on its own substream; output is independent of ``jobs``.

    ``family_factory`` must be picklable when jobs > 1 (e.g. functools.partial).
    """
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    tasks = [(family_factory, tuple(fns), seed, lo, hi, seed_n) for lo, hi in bounds]
    if jobs <= 1 or len(tasks) == 1:
        parts = [_mc_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_mc_chunk, tasks))
    parts.sort(key=lambda p: p[0])
    run = MCRun(np.concatenate([p[1] for p in parts]), np.concatenate([p[2] for p in parts]),
                np.concatenate([p[3] for p in parts]), np.concatenate([p[4] for p in parts]))
    rate = run.resamples.sum() / max(n, 1)
    if rate >= 1e-3:
        raise TransversalityError(f"degenerate-draw rate {rate:.3g} exceeds 1e-3; "
                                  "the family is likely not generically transversal")
    return run


def quadrature_expectation(family, f, sizes=None) -> float:
    """Integral of f against the Euler density of the family's induced pair."""
    model = family.model
    grids = model.quadrature() if sizes is None else model.quadrature(sizes)
    total = 0.0
    for g in grids:
        kg = KernelGeometry.from_family(family, g.chart_id, g.nodes)
        total += integrate_density(g, f(model, g.chart_id, g.nodes) * kg.euler_density())
    return total


def mc_expected_current(family_factory, f, n, seed, jobs=1, seed_n=32) -> MCEstimate:
    if n < 100:
        raise ValueError("need at least 100 samples")
    run = run_samples(family_factory, [f], n, seed, jobs, seed_n)
    est = run.estimate(0)
    est.quadrature = quadrature_expectation(family_factory(), f)
    return est
