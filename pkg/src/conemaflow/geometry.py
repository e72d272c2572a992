"""Model surfaces, the regularizing potential chi, and the regularized metric.

Two one-complex-dimensional models are provided:

* ``torus``: the flat unit torus R^2/Z^2 with one cone point at the origin.
  The section norm is the sin^2-based surrogate ``(sin^2(pi x1) + sin^2(pi x2))/2``
  (max-normalized to 1), which has exact periodicity, closed-form derivatives
  and a first-order zero at the cone point.  The reference Laplacian is the
  standard 5-point stencil, the area weight is h^2 per node, total volume 1.

* ``football``: rotationally invariant functions on the 2-sphere in the chart
  rho = log|z|^2, truncated to [-rho_max, rho_max]; the two cone points sit at
  rho = -inf/+inf, off the grid.  The section norm is e^rho/(1+e^rho)^2, the
  background density w(rho) = e^rho/(1+e^rho)^2 per d(rho)d(theta), and the
  reference Laplacian is u''(rho)/w(rho) discretized with 4th-order stencils.

The deformed area density of a potential phi is ``1 + lap(phi)`` in both
models; that single scalar is the Monge-Ampere ratio in complex dimension 1.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from . import _kernels

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Invalid geometry or regularization configuration."""


# ---------------------------------------------------------------------------
# chi: the regularizing potential
# ---------------------------------------------------------------------------

def _chi_integrand(u, e2, beta):
    if u == 0.0:
        return beta * e2 ** (beta - 1.0) if e2 > 0.0 else 0.0
    return ((e2 + u) ** beta - e2 ** beta) / u


def chi_eps(eps: float, s2: float, beta: float) -> float:
    """Regularizer value chi = (1/beta) * int_0^{s2} ((eps^2+u)^beta - eps^(2beta))/u du.

    Evaluated by adaptive quadrature with the integrand extended continuously
    at u = 0 by its limit beta*eps^(2(beta-1)).  Closed forms are used for the
    exact cases beta = 1 (chi = s2) and eps = 0 (chi = s2^beta / beta^2).
    """
    if eps < 0.0 or s2 < 0.0:
        raise GeometryError("chi_eps: eps and s2 must be nonnegative")
    if not 0.0 < beta <= 1.0:
        raise GeometryError("chi_eps: beta must lie in (0,1]")
    if s2 == 0.0:
        return 0.0
    if beta == 1.0:
        return float(s2)
    if eps == 0.0:
        return float(s2 ** beta / beta ** 2)
    e2 = eps * eps
    val, _ = quad(_chi_integrand, 0.0, s2, args=(e2, beta),
                  epsabs=1e-13, epsrel=1e-11, limit=200)
    return float(val / beta)


# Gauss-Legendre nodes/weights reused by the cumulative table builder.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)


@lru_cache(maxsize=128)
def _chi_table(eps: float, beta: float, r_max: float):
    """Cubic spline of chi in xi = log r; interpolation error < 1e-9.

    All xi-derivatives of chi are uniformly bounded (by ~(eps^2+r)^beta times
    small combinatorial factors), so a uniform xi-grid with step 0.01 keeps the
    cubic error below (0.01)^4 * max|d4 chi/dxi4| / 384 ~ 5e-10.
    """
    e2 = eps * eps
    r_floor = min(1e-12, e2 * 1e-4)
    xi = np.arange(math.log(r_floor), math.log(r_max) + 0.02, 0.01)
    r = np.exp(xi)
    # cumulative 10-point Gauss-Legendre over each [r_k, r_{k+1}], vectorized
    a, b = r[:-1], r[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    u = mid[:, None] + half[:, None] * _GL_X[None, :]
    g = ((e2 + u) ** beta - e2 ** beta) / u
    seg = (half[:, None] * _GL_W[None, :] * g).sum(axis=1)
    # head piece [0, r_0]: integrand is analytic at 0, same rule from 0
    u0 = 0.5 * r[0] + 0.5 * r[0] * _GL_X
    g0 = ((e2 + u0) ** beta - e2 ** beta) / u0
    head = 0.5 * r[0] * float((_GL_W * g0).sum())
    vals = np.concatenate(([head], head + np.cumsum(seg))) / beta
    return CubicSpline(xi, vals), r_floor


def chi_field(eps: float, beta: float, s2: np.ndarray) -> np.ndarray:
    """chi evaluated on a grid of section-norm values via the memoized table."""
    if not 0.0 < beta <= 1.0:
        raise GeometryError("chi_field: beta must lie in (0,1]")
    if eps < 0.0:
        raise GeometryError("chi_field: eps must be nonnegative")
    s2 = np.asarray(s2, dtype=float)
    if beta == 1.0:
        return s2.copy()
    if eps == 0.0:
        return s2 ** beta / beta ** 2
    # a quantized table range keeps the memoized spline shared across fields
    r_max = 1.02 * max(1.0, math.ceil(float(s2.max())))
    spline, r_floor = _chi_table(float(eps), float(beta), float(r_max))
    out = np.empty_like(s2)
    tiny = s2 <= r_floor
    # below the table floor chi is linear to relative error < 1e-8
    out[tiny] = eps ** (2.0 * (beta - 1.0)) * s2[tiny]
    out[~tiny] = spline(np.log(s2[~tiny]))
    return out


# ---------------------------------------------------------------------------
# Fornberg finite-difference weights
# ---------------------------------------------------------------------------

def fd_weights(xs, x0, m):
    """Weights of the m-th derivative at x0 from nodes xs (Fornberg recursion)."""
    xs = np.asarray(xs, dtype=float)
    n = len(xs)
    c = np.zeros((n, m + 1))
    c1, c4 = 1.0, xs[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, xs[i] - x0
        for j in range(i):
            c3 = xs[i] - xs[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


# ---------------------------------------------------------------------------
# Operator bundles
# ---------------------------------------------------------------------------

class TorusOps:
    """Discrete operators on the N x N periodic grid (h = 1/N)."""

    def __init__(self, n: int):
        self.n = n
        self.h = 1.0 / n
        self.inv_h2 = float(n) ** 2
        k = np.arange(n)
        # exact symbol of the 5-point Laplacian (rfft2 layout)
        s1 = -4.0 * self.inv_h2 * np.sin(np.pi * k / n) ** 2
        self._sym = s1[:, None] + s1[None, : n // 2 + 1]

    def lap(self, f):
        return _kernels.lap5_periodic(f, self.inv_h2)

    def grad_sq(self, f):
        gx = (np.roll(f, -1, 0) - np.roll(f, 1, 0)) / (2 * self.h)
        gy = (np.roll(f, -1, 1) - np.roll(f, 1, 1)) / (2 * self.h)
        return gx * gx + gy * gy

    def grad(self, f):
        gx = (np.roll(f, -1, 0) - np.roll(f, 1, 0)) / (2 * self.h)
        gy = (np.roll(f, -1, 1) - np.roll(f, 1, 1)) / (2 * self.h)
        return gx, gy

    def poisson_solve(self, g):
        """Mean-zero solution of lap(psi) = g - mean(g); exact in the discrete symbol."""
        gh = np.fft.rfft2(g)
        sym = self._sym.copy()
        sym[0, 0] = 1.0
        gh = gh / sym
        gh[0, 0] = 0.0
        return np.fft.irfft2(gh, s=g.shape)

    def helmholtz_solve(self, r, a, b):
        """(a*I - b*lap)^{-1} r by FFT; requires a > 0, b >= 0."""
        rh = np.fft.rfft2(r)
        return np.fft.irfft2(rh / (a - b * self._sym), s=r.shape)


class FootballOps:
    """Discrete operators on the truncated rho-grid of the radial model.

    The second-derivative matrix D2 uses 4th-order centered stencils with
    4th-order one-sided closures at the chart ends; lap(f) = (D2 f)/w.
    """

    def __init__(self, n: int, rho_max: float):
        self.n = n
        rho = np.linspace(-rho_max, rho_max, n)
        rho = np.where(np.abs(rho) < 1e-300, 0.0, rho)
        # enforce exact antipodal symmetry of the node set
        rho = 0.5 * (rho - rho[::-1])
        self.rho = rho
        self.h = self.rho[1] - self.rho[0]
        # cancellation-free symmetric form of e^rho/(1+e^rho)^2
        em = np.exp(-np.abs(rho))
        self.w = em / (1.0 + em) ** 2
        self._build_matrices()
        self._ell = None

    def _stencil_rows(self, m):
        """(row, cols, weights) triplets for derivative order m at 4th order."""
        n, h = self.n, self.h
        rows = []
        npts = 6 if m == 2 else 5
        for i in range(n):
            if 2 <= i <= n - 3:
                off = np.arange(-2, 3)
            elif i < 2:
                off = np.arange(0, npts) - i
            else:
                off = np.arange(n - npts, n) - i
            w = fd_weights(off * h, 0.0, m)
            rows.append((i, i + off, w))
        return rows

    def _build_matrices(self):
        n = self.n
        data2, rows2, cols2 = [], [], []
        data1, rows1, cols1 = [], [], []
        for i, cols, w in self._stencil_rows(2):
            rows2 += [i] * len(cols)
            cols2 += list(cols)
            data2 += list(w)
        for i, cols, w in self._stencil_rows(1):
            rows1 += [i] * len(cols)
            cols1 += list(cols)
            data1 += list(w)
        self.D2 = sparse.csr_matrix((data2, (rows2, cols2)), shape=(n, n))
        self.D1 = sparse.csr_matrix((data1, (rows1, cols1)), shape=(n, n))

    @staticmethod
    def _to_banded(mat, kl, ku):
        n = mat.shape[0]
        ab = np.zeros((kl + ku + 1, n))
        coo = mat.tocoo()
        ab[ku + coo.row - coo.col, coo.col] = coo.data
        return ab

    def newton_banded(self, row_scale, fprime, dt):
        """Banded form of I - dt*diag(row_scale) D2 - dt*diag(fprime), vectorized."""
        if not hasattr(self, "_d2_banded"):
            self._d2_banded = self._to_banded(self.D2, 5, 5)
        ku = 5
        n = self.n
        ab = np.zeros_like(self._d2_banded)
        for d in range(-5, 6):
            cols = np.arange(max(0, -d), min(n, n - d))
            rows = cols + d
            ab[ku + d, cols] = -dt * row_scale[rows] * self._d2_banded[ku + d, cols]
        ab[ku, :] += 1.0 - dt * fprime
        return ab

    def lap(self, f):
        return (self.D2 @ f) / self.w

    def lap_flux(self, f):
        """Symmetric flux-form Laplacian (2nd order, natural end closures).

        Negative semidefinite by construction, so backward-Euler systems built
        on it are provably invertible for every dt; used for the *deviation*
        part of flow densities, where its end-row flux error scales with the
        deviation rather than with the full conical field.
        """
        if not hasattr(self, "_aflux"):
            n, h = self.n, self.h
            main = np.full(n, -2.0)
            main[0] = main[-1] = -1.0
            self._aflux = sparse.diags(
                [np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1],
                format="csr") / h ** 2
        return (self._aflux @ f) / self.w

    def flux_banded(self, row_scale, fprime, dt):
        """Tridiagonal banded form of I - dt*diag(row_scale) A_flux - dt*diag(fprime)."""
        n, h = self.n, self.h
        inv_h2 = 1.0 / h ** 2
        main = np.full(n, 2.0)
        main[0] = main[-1] = 1.0
        ab = np.zeros((3, n))
        ab[0, 1:] = -dt * row_scale[:-1] * inv_h2      # superdiagonal (row i, col i+1)
        ab[2, :-1] = -dt * row_scale[1:] * inv_h2      # subdiagonal
        ab[1, :] = 1.0 + dt * row_scale * main * inv_h2 - dt * fprime
        return ab

    def d1(self, f):
        return self.D1 @ f

    def grad_sq(self, f):
        g = self.D1 @ f
        return g * g / self.w

    def banded_solve(self, mat, rhs):
        kl = ku = 5
        return solve_banded((kl, ku), self._to_banded(mat, kl, ku), rhs)

    def _bc_system(self):
        """Poisson matrix with the end rows replaced by zero-flux (Neumann) rows.

        The kernel of the pure second-derivative matrix contains constants and
        linear functions; the two first-derivative closure rows remove the
        linear mode so only the constant gauge remains.
        """
        if getattr(self, "_bc", None) is not None:
            return self._bc
        A = (sparse.diags(1.0 / self.w) @ self.D2).tolil()
        for i in (0, self.n - 1):
            cols, wts = self._one_sided_d1(i)
            A.rows[i] = [int(c) for c in cols]
            A.data[i] = [float(v) for v in wts]
        k = self.n // 2
        A_pin = A.copy()
        A_pin.rows[k] = [k]
        A_pin.data[k] = [1.0]
        A_pin = A_pin.tocsr()
        # left null vector of the unpinned BC operator, by shifted inverse iteration
        At = (A.tocsr().T).tocsr() + sparse.identity(self.n, format="csr") * 1e-13
        y = np.full(self.n, 1.0)
        for _ in range(3):
            y = self.banded_solve(At, y)
            y /= np.linalg.norm(y)
        if y.sum() < 0:
            y = -y
        self._bc = (A_pin, k, y)
        return self._bc

    def _one_sided_d1(self, i):
        npts = 5
        off = (np.arange(0, npts) - i) if i < npts else (np.arange(self.n - npts, self.n) - i)
        return i + off, fd_weights(off * self.h, 0.0, 1)

    def compat_weights(self):
        """Interior compatibility functional of the Neumann-closed Laplacian.

        The raw left null vector of the closed operator carries O(1) flux-dual
        entries on the two closure rows; its interior part is the w-shaped
        quadrature rule against which the Poisson RHS must have zero mass.
        Entries on the closure rows and the gauge row are zeroed.
        """
        if self._ell is None:
            _, _, y = self._bc_system()
            ell = y.copy()
            ell[[0, -1]] = 0.0
            if ell.sum() < 0:
                ell = -ell
            self._ell = ell
        return self._ell

    def poisson_solve(self, g, phi_ref=None):
        """Solve lap(psi) = g with zero-flux closures, mean-zero gauge.

        When ``phi_ref`` is supplied the system is solved for the deviation
        eta = psi - phi_ref, which keeps the zero-flux closure error at the
        size of the deviation instead of the full conical flux through the
        chart ends.  Returns (psi, interior residual sup-norm).
        """
        A_pin, k, _ = self._bc_system()
        ell = self.compat_weights()
        if phi_ref is not None:
            g_eff = g - self.lap(phi_ref)
        else:
            g_eff = np.asarray(g, dtype=float)
        # distribute the compatibility defect along ell (the interior part of the
        # operator's left null vector) so the dropped gauge-row equation stays
        # consistent; the gauge node's equation participates in the functional
        v = ell / float(ell @ ell)
        b = g_eff - float(ell @ g_eff) * v
        b[0] = 0.0
        b[-1] = 0.0
        b[k] = 0.0
        eta = self.banded_solve(A_pin, b)
        r = b - A_pin @ eta
        eta = eta + self.banded_solve(A_pin, r)
        psi = eta if phi_ref is None else phi_ref + eta
        psi = psi - psi.mean()
        res = (self.D2 @ psi) / self.w - g
        return psi, float(np.max(np.abs(res[1:-1])))


@dataclass(frozen=True, eq=False)
class ConeGeometry:
    """Immutable model-surface bundle (grids, section norm, weights, operators)."""

    kind: str
    beta: float
    n: int
    rho_max: float
    section_sq: np.ndarray
    weights: np.ndarray
    volume: float
    divisor_points: tuple
    ops: object = field(repr=False)

    @property
    def shape(self):
        return self.section_sq.shape

    def lap(self, f):
        return self.ops.lap(f)

    def grad_sq(self, f):
        return self.ops.grad_sq(f)

    def integrate(self, f):
        return float(np.sum(f * self.weights))

    def dist_to_divisor(self):
        if self.kind == "torus":
            x = np.arange(self.n) / self.n
            d = np.minimum(x, 1.0 - x)
            return np.sqrt(d[:, None] ** 2 + d[None, :] ** 2)
        rho = self.ops.rho
        d_south = 2.0 * np.arctan(np.exp(rho / 2.0))
        d_north = 2.0 * np.arctan(np.exp(-rho / 2.0))
        return np.minimum(d_south, d_north)


def make_geometry(kind: str, beta: float, n: int, rho_max: float = 12.0) -> ConeGeometry:
    if not 0.0 < beta <= 1.0:
        raise GeometryError("beta must lie in (0,1]")
    if n < 8:
        raise GeometryError("grid resolution too small (n >= 8)")
    if kind == "torus":
        x = np.arange(n) / n
        s2 = 0.5 * (np.sin(np.pi * x[:, None]) ** 2 + np.sin(np.pi * x[None, :]) ** 2)
        s2[0, 0] = 0.0  # exact zero at the divisor node
        ops = TorusOps(n)
        weights = np.full((n, n), ops.h ** 2)
        geom = ConeGeometry("torus", beta, n, 0.0, s2, weights, 1.0, ((0.0, 0.0),), ops)
    elif kind == "football":
        ops = FootballOps(n, rho_max)
        s2 = ops.w.copy()
        tw = np.full(n, ops.h)
        tw[0] = tw[-1] = ops.h / 2.0
        weights = TWO_PI * ops.w * tw
        sig = 1.0 / (1.0 + np.exp(-rho_max))
        volume = TWO_PI * (2.0 * sig - 1.0)
        geom = ConeGeometry("football", beta, n, rho_max, s2, weights, volume,
                            (float("-inf"), float("inf")), ops)
    else:
        raise GeometryError(f"unknown surface kind: {kind!r}")
    geom.section_sq.setflags(write=False)
    geom.weights.setflags(write=False)
    return geom


def section_norm_sq(geom: ConeGeometry, x) -> float:
    """Section norm value at a grid node (index tuple)."""
    return float(geom.section_sq[tuple(np.atleast_1d(x))])


def football_exact_potential(geom: ConeGeometry) -> np.ndarray:
    """Potential of the constant-curvature two-cone metric relative to the round one.

    phi0 = (1/beta) log(1+e^{beta rho}) - log(1+e^rho), written in the even,
    cancellation-free form; it is an exact stationary solution of the conical
    flow with forcing F(v) = 2 beta v - log beta (curvature 2 beta, area equal
    to the round sphere).
    """
    if geom.kind != "football":
        raise GeometryError("exact football potential requires the football model")
    beta = geom.beta
    a = np.abs(geom.ops.rho)
    return np.log1p(np.exp(-beta * a)) / beta - np.log1p(np.exp(-a))


def football_exact_density(geom: ConeGeometry) -> np.ndarray:
    """Area density of the exact cone metric relative to the round background."""
    if geom.kind != "football":
        raise GeometryError("exact football density requires the football model")
    beta = geom.beta
    a = np.abs(geom.ops.rho)
    emb = np.exp(-beta * a)
    em = np.exp(-a)
    return beta * emb / (1.0 + emb) ** 2 * (1.0 + em) ** 2 / em


# ---------------------------------------------------------------------------
# Regularization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegularizationParams:
    eps: float
    delta: float = 0.1
    rho: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.eps <= 1.0:
            raise GeometryError("eps must lie in (0,1]")
        if self.delta < 0.0:
            raise GeometryError("delta must be nonnegative")
        if not 0.0 < self.rho < 1.0:
            raise GeometryError("rho must lie in (0,1)")

    def check_rho_window(self, beta: float) -> bool:
        """True when 1 - rho exceeds max{beta, 1-beta, |2beta-1|} (proof window)."""
        return 1.0 - self.rho > max(beta, 1.0 - beta, abs(2.0 * beta - 1.0))


def omega_eps_density(geom: ConeGeometry, reg: RegularizationParams) -> np.ndarray:
    """Density of the regularized metric relative to the background: 1 + delta*lap(chi)."""
    chi = chi_field(reg.eps, geom.beta, geom.section_sq)
    dens = 1.0 + reg.delta * geom.lap(chi)
    if np.any(dens <= 0.0):
        raise GeometryError("delta too large: regularized density is nonpositive")
    return dens


def f_eps_field(geom: ConeGeometry, reg: RegularizationParams) -> np.ndarray:
    """Bounded density defect f_eps = log(omega_eps density * (eps^2+|s|^2)^(1-beta))."""
    dens = omega_eps_density(geom, reg)
    return np.log(dens) + (1.0 - geom.beta) * np.log(reg.eps ** 2 + geom.section_sq)


def psi_rho_field(geom: ConeGeometry, reg: RegularizationParams) -> np.ndarray:
    """Auxiliary weight with exponent rho (same integral family as chi)."""
    return chi_field(reg.eps, reg.rho, geom.section_sq)


def resolve_delta(geom: ConeGeometry, eps_list, delta0: float, gamma_floor: float = 0.05):
    """Halve delta until the omega_eps-density floor holds uniformly in eps.

    The eps -> 0 cone limit is included in the floor loop: chi' saturates as
    eps decreases, so guarding only the configured family would let the floor
    erode when the family is later refined.  Returns (delta, gamma) with gamma
    the recorded family-min density.
    """
    delta = delta0
    probes = list(eps_list) + [0.0]
    for _ in range(41):
        gamma = math.inf
        ok = True
        for eps in probes:
            chi = chi_field(eps, geom.beta, geom.section_sq)
            dens = 1.0 + delta * geom.lap(chi)
            m = float(dens.min())
            if eps > 0.0:
                gamma = min(gamma, m)
            if m < gamma_floor:
                ok = False
                break
        if ok:
            return delta, gamma
        delta *= 0.5
    raise GeometryError("delta too large: density floor unreachable after 40 halvings")


@dataclass(frozen=True, eq=False)
class RegularizedGeometry:
    """Per-(geometry, eps) precomputed fields shared by flow and estimates."""

    geom: ConeGeometry
    reg: RegularizationParams
    chi: np.ndarray
    omega_density: np.ndarray
    gamma: float
    f_eps: np.ndarray
    sup_f_eps: float
    source: np.ndarray  # (1-beta) * log(eps^2 + |s|^2)


def make_regularized(geom: ConeGeometry, reg: RegularizationParams,
                     warn_rho: bool = True) -> RegularizedGeometry:
    if warn_rho and not reg.check_rho_window(geom.beta):
        warnings.warn(
            f"rho={reg.rho} violates 1-rho > max(beta,1-beta,|2beta-1|) for beta={geom.beta}; "
            "the auxiliary-weight diagnostic window is void", stacklevel=2)
    chi = chi_field(reg.eps, geom.beta, geom.section_sq)
    dens = 1.0 + reg.delta * geom.lap(chi)
    if np.any(dens <= 0.0):
        raise GeometryError("delta too large: regularized density is nonpositive")
    f_eps = np.log(dens) + (1.0 - geom.beta) * np.log(reg.eps ** 2 + geom.section_sq)
    src = (1.0 - geom.beta) * np.log(reg.eps ** 2 + geom.section_sq)
    for a in (chi, dens, f_eps, src):
        a.setflags(write=False)
    return RegularizedGeometry(geom, reg, chi, dens, float(dens.min()),
                               f_eps, float(np.max(np.abs(f_eps))), src)
