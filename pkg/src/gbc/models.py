"""Built-in bundle models: the tangent bundle of the round sphere and rank-2 bundles on a flat torus.

Each model carries charts, a reference frame per chart that is orthonormal for
the reference metric, the reference connection as matrices omega_i in that
frame (with partials), and one or more analytic section families.
"""
from __future__ import annotations

import numpy as np

from .gaussian import GaussianMeasure
from .geometry import Chart, sphere_quadrature, torus_quadrature
from .kernel import SectionFamily

J = np.array([[0.0, -1.0], [1.0, 0.0]])
TWO_PI = 2 * np.pi


class ModelError(ValueError):
    pass


class BundleModel:
    name = ""
    m = 2
    r = 2
    euler_number = 0
    geometry_chart = ""
    zero_charts: tuple = ()

    def __init__(self):
        self.charts = {}

    def chart(self, chart_id) -> Chart:
        return self.charts[chart_id]

    def params(self) -> dict:
        return {}

    def init_params(self) -> dict:
        """Keyword arguments that rebuild this model through get_model."""
        return {}

    def describe(self) -> str:
        p = ", ".join(f"{k}={v}" for k, v in self.params().items())
        return f"{self.name}: m={self.m} r={self.r} chi={self.euler_number}; {self.reference}" + (f" [{p}]" if p else "")

    def connection(self, chart_id, pts):
        raise NotImplementedError

    def reference_curvature(self, chart_id, pts):
        """F0_ij = d_i omega_j - d_j omega_i + [omega_i, omega_j]."""
        w, dw = self.connection(chart_id, pts)
        F = dw - np.swapaxes(dw, 1, 2)
        return F + w[:, :, None] @ w[:, None, :] - w[:, None, :] @ w[:, :, None]

    def check_compatible(self, chart_id, pts, tol=1e-12):
        w, _ = self.connection(chart_id, pts)
        if np.abs(w + np.swapaxes(w, -1, -2)).max() > tol:
            raise ModelError(f"{self.name}: reference connection is not skew in the orthonormal frame")


# sphere ------------------------------------------------------------------

def _polar_frame(pts, order=2):
    """Frame (e_theta, e_phi) of the unit sphere as (P, 3, 2) plus partials."""
    th, ph = pts[:, 0], pts[:, 1]
    ct, st, cp, sp = np.cos(th), np.sin(th), np.cos(ph), np.sin(ph)
    z = np.zeros_like(th)
    e_t = np.stack([ct * cp, ct * sp, -st], -1)
    e_p = np.stack([-sp, cp, z], -1)
    E = np.stack([e_t, e_p], -1)
    if order == 0:
        return E, None, None
    x = np.stack([st * cp, st * sp, ct], -1)
    dE = np.empty(E.shape[:1] + (2,) + E.shape[1:])
    dE[:, 0, :, 0] = -x
    dE[:, 1, :, 0] = ct[:, None] * e_p
    dE[:, 0, :, 1] = 0.0
    dE[:, 1, :, 1] = np.stack([-cp, -sp, z], -1)
    if order == 1:
        return E, dE, None
    d2 = np.zeros(E.shape[:1] + (2, 2) + E.shape[1:])
    d2[:, 0, 0, :, 0] = -e_t
    d2[:, 0, 1, :, 0] = -st[:, None] * e_p
    d2[:, 1, 0, :, 0] = d2[:, 0, 1, :, 0]
    d2[:, 1, 1, :, 0] = np.stack([-ct * cp, -ct * sp, z], -1)
    d2[:, 1, 1, :, 1] = np.stack([sp, -cp, z], -1)
    return E, dE, d2


_SOUTH = np.diag([1.0, -1.0, -1.0])


def _stereo_frame(u, south=False, order=1):
    """Orthonormal frame d_i x / lambda of inverse stereographic projection, with first partials.

    The south chart is the north chart rotated by pi about the first axis.
    """
    u1, u2 = u[:, 0], u[:, 1]
    D = 1 + u1 * u1 + u2 * u2
    one = np.ones_like(u1)
    zero = np.zeros_like(u1)
    N1 = np.stack([D - 2 * u1 * u1, -2 * u1 * u2, -2 * u1], -1)
    N2 = np.stack([-2 * u1 * u2, D - 2 * u2 * u2, -2 * u2], -1)
    E = np.stack([N1, N2], -1) / D[:, None, None]
    x = np.stack([2 * u1, 2 * u2, 1 - u1 * u1 - u2 * u2], -1) / D[:, None]
    if order == 0:
        return (x @ _SOUTH, _SOUTH @ E, None) if south else (x, E, None)
    dN = np.empty(E.shape[:1] + (2,) + E.shape[1:])
    dN[:, 0, :, 0] = np.stack([-2 * u1, -2 * u2, -2 * one], -1)
    dN[:, 1, :, 0] = np.stack([2 * u2, -2 * u1, zero], -1)
    dN[:, 0, :, 1] = np.stack([-2 * u2, 2 * u1, zero], -1)
    dN[:, 1, :, 1] = np.stack([-2 * u1, -2 * u2, -2 * one], -1)
    dD = 2 * u
    dE = (dN - E[:, None] * dD[:, :, None, None]) / D[:, None, None, None]
    if south:
        E = _SOUTH @ E
        dE = _SOUTH @ dE
        x = x @ _SOUTH
    return x, E, dE


def stereo_inverse(x, south=False):
    """Chart coordinates of ambient unit vectors."""
    x = np.atleast_2d(x)
    if south:
        x = x @ _SOUTH
    return x[:, :2] / (1 + x[:, 2:3])


class SphereTangent(BundleModel):
    """Tangent bundle of the unit sphere with the round metric and Levi-Civita connection."""
    name = "sphere-tangent"
    euler_number = 2
    reference = "round metric, Levi-Civita connection"
    geometry_chart = "polar"
    zero_charts = ("north", "south")
    stereo_box = 1.25

    def __init__(self):
        super().__init__()
        b = self.stereo_box
        conformal = lambda u: (2 / (1 + np.sum(u * u, -1)))[:, None, None] ** 2 * np.eye(2)
        self.charts = {
            "polar": Chart("polar", (0.0, 0.0), (np.pi, TWO_PI),
                           lambda p: np.einsum("pi,ij->pij", np.stack([np.ones(len(p)), np.sin(p[:, 0]) ** 2], -1), np.eye(2))),
            "north": Chart("north", (-b, -b), (b, b), conformal),
            "south": Chart("south", (-b, -b), (b, b), conformal),
        }

    def frame(self, chart_id, pts, order=1):
        pts = np.atleast_2d(pts)
        if chart_id == "polar":
            return _polar_frame(pts, order)[: order + 1]
        _, E, dE = _stereo_frame(pts, chart_id == "south")
        return (E, dE)[: order + 1]

    def ambient(self, chart_id, pts):
        pts = np.atleast_2d(pts)
        if chart_id == "polar":
            th, ph = pts[:, 0], pts[:, 1]
            return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1)
        return _stereo_frame(pts, chart_id == "south", 0)[0]

    def angles(self, chart_id, pts):
        x = self.ambient(chart_id, pts)
        return np.stack([np.arccos(np.clip(x[:, 2], -1, 1)), np.mod(np.arctan2(x[:, 1], x[:, 0]), TWO_PI)], -1)

    def pou_weight(self, chart_id, pts):
        z = self.ambient(chart_id, pts)[:, 2]
        return (1 + z) / 2 if chart_id == "north" else (1 - z) / 2

    def connection(self, chart_id, pts):
        if chart_id != "polar":
            raise ModelError("sphere geometry is evaluated in the polar chart")
        pts = np.atleast_2d(pts)
        th = pts[:, 0]
        w = np.zeros((len(pts), 2, 2, 2))
        w[:, 1] = np.cos(th)[:, None, None] * J
        dw = np.zeros((len(pts), 2, 2, 2, 2))
        dw[:, 0, 1] = -np.sin(th)[:, None, None] * J
        return w, dw

    def quadrature(self, sizes=(64, 128)):
        return [sphere_quadrature(*sizes)]

    def family(self, kind="default", **kw):
        if kind not in ("default", "projection"):
            raise ModelError(f"unknown family {kind!r} for {self.name}")
        return SphereProjectionFamily(self)


class SphereProjectionFamily(SectionFamily):
    """Sections x -> P_x v for v in R^3 with the standard Gaussian on v."""

    def __init__(self, model):
        super().__init__(model, GaussianMeasure(np.eye(3)), "projection")

    def local(self, chart_id, pts, order=2):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if chart_id == "polar":
            E, dE, d2E = _polar_frame(pts, order)
        else:
            if order > 1:
                raise ModelError("second derivatives are only provided in the polar chart")
            _, E, dE = _stereo_frame(pts, chart_id == "south", order)
            d2E = None
        v = np.swapaxes(E, -1, -2)
        d1 = None if dE is None else np.swapaxes(dE, -1, -2)
        d2 = None if d2E is None else np.swapaxes(d2E, -1, -2)
        return v, d1, d2


# torus -------------------------------------------------------------------

class FlatTorusBundle(BundleModel):
    """Trivial rank-2 bundle on the square torus of side 2 pi, flat metric, reference connection d + omega."""
    name = "torus-flat"
    euler_number = 0
    reference = "trivial metric, trivial connection"
    geometry_chart = "torus"
    zero_charts = ("torus",)

    def __init__(self):
        super().__init__()
        self.charts = {
            "torus": Chart("torus", (0.0, 0.0), (TWO_PI, TWO_PI),
                           lambda p: np.broadcast_to(np.eye(2), (len(p), 2, 2)), periodic=True),
        }

    def ambient(self, chart_id, pts):
        pts = np.atleast_2d(pts)
        return np.stack([np.cos(pts[:, 0]), np.sin(pts[:, 0]), np.cos(pts[:, 1]), np.sin(pts[:, 1])], -1)

    def angles(self, chart_id, pts):
        return np.mod(np.atleast_2d(pts), TWO_PI)

    def pou_weight(self, chart_id, pts):
        return np.ones(len(np.atleast_2d(pts)))

    def connection(self, chart_id, pts):
        P = len(np.atleast_2d(pts))
        return np.zeros((P, 2, 2, 2)), np.zeros((P, 2, 2, 2, 2))

    def link_connection(self, midpoints):
        """Connection matrices at lattice edge midpoints (P, m, r, r)."""
        return self.connection("torus", midpoints)[0]

    def quadrature(self, sizes=(48,)):
        return [torus_quadrature(sizes[0])]

    def family(self, kind="default", order=2, n_mixed=6, seed=20240611):
        if kind in ("default", "fourier"):
            return TorusFourierFamily(self, order)
        if kind == "mixed":
            return TorusMixedFamily(self, n_mixed, seed)
        raise ModelError(f"unknown family {kind!r} for {self.name}")


class CurvedTorusBundle(FlatTorusBundle):
    """Trivial rank-2 bundle with the compatible connection d + a sin(x2) J dx1.

    Its curvature is F0_12 = -a cos(x2) J, which has zero total Euler form.
    """
    name = "torus-curved"
    reference = "trivial metric, connection d + a*sin(x2)*J dx1"

    def __init__(self, amplitude=0.25):
        super().__init__()
        self.amplitude = float(amplitude)

    def params(self):
        return {"profile": "a*sin(x2)", "a": self.amplitude}

    def init_params(self):
        return {"amplitude": self.amplitude}

    def connection(self, chart_id, pts):
        pts = np.atleast_2d(pts)
        a = self.amplitude
        w = np.zeros((len(pts), 2, 2, 2))
        w[:, 0] = (a * np.sin(pts[:, 1]))[:, None, None] * J
        dw = np.zeros((len(pts), 2, 2, 2, 2))
        dw[:, 1, 0] = (a * np.cos(pts[:, 1]))[:, None, None] * J
        return w, dw

    def family(self, kind="default", order=2, n_mixed=6, seed=20240611):
        if kind == "default":
            kind = "mixed"
        return super().family(kind, order, n_mixed, seed)


def _fourier_basis(order):
    """Wave vectors of a half lattice: k with |k|_inf <= order, k > 0 lexicographically."""
    ks = [(k1, k2) for k1 in range(-order, order + 1) for k2 in range(-order, order + 1)
          if (k1, k2) > (0, 0)]
    return np.array(ks, dtype=float).reshape(-1, 2)


def _trig_jet(ks, pts, order):
    """Values and partials of [1, cos(k.x), sin(k.x)] as (P, B), (P, m, B), (P, m, m, B)."""
    ph = pts @ ks.T
    c, s = np.cos(ph), np.sin(ph)
    one = np.ones((len(pts), 1))
    zero = np.zeros((len(pts), 1))
    f = np.concatenate([one, c, s], 1)
    if order == 0:
        return f, None, None
    d1 = np.stack([np.concatenate([zero, -s * ks[:, i], c * ks[:, i]], 1) for i in range(2)], 1)
    d2 = None
    if order >= 2:
        d2 = np.stack([np.stack([np.concatenate([zero, -c * ks[:, i] * ks[:, j], -s * ks[:, i] * ks[:, j]], 1)
                                 for j in range(2)], 1) for i in range(2)], 1)
    return f, d1, d2


class TorusFourierFamily(SectionFamily):
    """f_b(x) e_alpha for trigonometric f_b up to a given order; kernel c(x - y) I."""

    def __init__(self, model, order=2):
        self.ks = _fourier_basis(order)
        nb = 1 + 2 * len(self.ks)
        super().__init__(model, GaussianMeasure(np.eye(2 * nb)), f"fourier-{order}")
        self.order = order

    def local(self, chart_id, pts, order=2):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        f, d1, d2 = _trig_jet(self.ks, pts, order)
        E = np.eye(2)
        # basis index n = b * 2 + alpha
        expand = lambda a: None if a is None else np.einsum("...b,ac->...abc", a, E).reshape(a.shape[:-1] + (2, -1))
        return expand(f), expand(d1), expand(d2)


class TorusMixedFamily(SectionFamily):
    """Constant frame sections plus fixed pseudo-random trigonometric sections of order 1.

    The covariance kernel is not translation invariant, so its induced
    curvature is nonzero; constants make the family ample everywhere.
    """

    def __init__(self, model, n_mixed=6, seed=20240611):
        self.ks = _fourier_basis(1)
        nb = 1 + 2 * len(self.ks)
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
        M = np.zeros((2 + n_mixed, 2, nb))
        M[0, 0, 0] = M[1, 1, 0] = 1.0
        M[2:] = rng.standard_normal((n_mixed, 2, nb)) / np.sqrt(nb)
        self.coef = M
        super().__init__(model, GaussianMeasure(np.eye(2 + n_mixed)), "mixed")

    def local(self, chart_id, pts, order=2):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        f, d1, d2 = _trig_jet(self.ks, pts, order)
        proj = lambda a: None if a is None else np.einsum("nab,...b->...an", self.coef, a)
        return proj(f), proj(d1), proj(d2)


MODELS = {
    "sphere-tangent": SphereTangent,
    "torus-flat": FlatTorusBundle,
    "torus-curved": CurvedTorusBundle,
}


def get_model(name, **params) -> BundleModel:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**params)


def catalog() -> str:
    return "\n".join(get_model(n).describe() for n in MODELS)


def build_family(model_name, kind="default", model_params=None, **kw):
    return get_model(model_name, **(model_params or {})).family(kind, **kw)


def family_factory(model_name, kind="default", model_params=None, **kw):
    """Picklable zero-argument constructor for a model's family (for worker processes)."""
    from functools import partial
    return partial(build_family, model_name, kind, model_params, **kw)
