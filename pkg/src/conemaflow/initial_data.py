"""Weak initial potentials and their heat-kernel mollifications.

The test corpus is continuous but nonsmooth: Lipschitz kinks and discontinuous
discrete densities, always with 1 + lap(phi0) >= 0 nodewise (the discrete weak
positivity).  A finite grid cannot distinguish bounded from continuous data;
every shipped potential is C^0 with density in a measured L^p class.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct, idct

from .geometry import ConeGeometry


class InitialDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InitialData:
    phi0: np.ndarray
    density: np.ndarray
    p_exponent: float
    lp_norm: float          # L^p norm of the density at p = p_exponent
    kind: str
    params: dict


def _torus_dist_sq(n, center):
    x = np.arange(n) / n
    dx = np.abs(x[:, None] - center[0])
    dy = np.abs(x[None, :] - center[1])
    dx = np.minimum(dx, 1.0 - dx)
    dy = np.minimum(dy, 1.0 - dy)
    return dx ** 2 + dy ** 2


def _tail_p_estimate(density, weights):
    """Tail-fit estimate of the integrability exponent of the density.

    Fits |{f > lam}| ~ lam^(-a) over the top decade of values; f is then in
    L^p for p < a.  Flat densities (no tail) report the cap 99.0.
    """
    f = density.ravel()
    w = np.broadcast_to(weights, density.shape).ravel()
    top = float(f.max())
    med = float(np.median(f))
    if top <= 1.05 * max(med, 1e-12):
        return 99.0
    lams = np.geomspace(max(med, 1e-12) * 1.2, top * 0.8, 12)
    mass = np.array([w[f > lam].sum() for lam in lams])
    keep = mass > 0
    if keep.sum() < 3:
        return 99.0
    slope = np.polyfit(np.log(lams[keep]), np.log(mass[keep]), 1)[0]
    return float(min(max(-slope, 1.0), 99.0))


def _finalize(geom, phi0, kind, params, floor=0.0, max_halvings=40):
    """Scale the candidate until the discrete weak positivity holds."""
    for _ in range(max_halvings + 1):
        dens = 1.0 + geom.lap(phi0)
        if dens.min() >= floor:
            p_est = _tail_p_estimate(dens, geom.weights)
            p_use = min(p_est, 8.0)
            lp = float(geom.integrate(np.abs(dens) ** p_use) ** (1.0 / p_use))
            phi0 = phi0.copy()
            phi0.setflags(write=False)
            dens.setflags(write=False)
            return InitialData(phi0, dens, p_est, lp, kind, dict(params))
        phi0 = 0.5 * phi0
    raise InitialDataError("positivity projection failed after 40 halvings of amplitude")


def make_test_potential(geom: ConeGeometry, kind: str, **params) -> InitialData:
    """Construct a weak potential of the requested kind.

    cone_bump:  amp * (max(0, r0^2 - d^2)/r0^2)^gamma, a radial bump with a
                Lipschitz kink on the circle d = r0 (gamma = 1) or an
                unbounded-density crease (gamma in (1,2)).
    kinked_bump: sum of two cone bumps with radii (kink_radius, outer_radius);
                gradient jumps along both circles.
    random_fourier_clipped: seeded low-pass random field, scaled down until
                the discrete density is strictly positive.
    """
    if geom.kind != "torus" and kind != "zero":
        raise InitialDataError("test potentials are defined on the torus model")
    if kind == "zero":
        phi0 = np.zeros(geom.shape)
        return _finalize(geom, phi0, kind, params)
    if kind == "cone_bump":
        amp = params.get("amplitude", 0.01)
        r0 = params.get("radius", 0.35)
        gamma = params.get("gamma", 1.0)
        center = params.get("center", (0.5, 0.5))
        if not 0.0 < r0 < 0.5:
            raise InitialDataError("cone_bump radius must lie in (0, 1/2)")
        d2 = _torus_dist_sq(geom.n, center)
        prof = np.maximum(0.0, r0 ** 2 - d2) / r0 ** 2
        phi0 = amp * prof ** gamma
        return _finalize(geom, phi0, kind, params)
    if kind == "kinked_bump":
        amp = params.get("amplitude", 0.01)
        r0 = params.get("kink_radius", 0.25)
        r1 = params.get("outer_radius", min(2.0 * r0, 0.45))
        center = params.get("center", (0.5, 0.5))
        d2 = _torus_dist_sq(geom.n, center)
        phi0 = amp * (np.maximum(0.0, r0 ** 2 - d2) / r0 ** 2
                      + 0.5 * np.maximum(0.0, r1 ** 2 - d2) / r1 ** 2)
        return _finalize(geom, phi0, kind, params)
    if kind == "random_fourier_clipped":
        amp = params.get("amplitude", 0.05)
        kmax = params.get("kmax", 6)
        seed = params.get("seed", 1234)
        rng = np.random.default_rng(seed)
        n = geom.n
        coef = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        k = np.fft.fftfreq(n, d=1.0 / n)
        keep = (np.abs(k[:, None]) <= kmax) & (np.abs(k[None, :]) <= kmax)
        coef[~keep] = 0.0
        coef[0, 0] = 0.0
        field = np.fft.ifft2(coef).real
        field *= amp / max(np.abs(field).max(), 1e-300)
        return _finalize(geom, field, kind, params, floor=np.finfo(float).tiny)
    raise InitialDataError(f"unknown initial-data kind: {kind!r}")


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------

def _heat_smooth_torus(field, sigma):
    n = field.shape[0]
    k = np.fft.fftfreq(n, d=1.0 / n)
    k2 = k[:, None] ** 2 + k[None, : n // 2 + 1] ** 2
    mult = np.exp(-2.0 * math.pi ** 2 * sigma ** 2 * k2)
    return np.fft.irfft2(np.fft.rfft2(field) * mult, s=field.shape)


def _heat_smooth_line(field, sigma, h):
    # reflected (Neumann) heat smoothing via DCT-II
    n = field.size
    k = np.arange(n)
    freq = math.pi * k / (n * h)
    mult = np.exp(-0.5 * sigma ** 2 * freq ** 2)
    return idct(dct(field, type=2) * mult, type=2) / (2.0 * n)


def mollify(geom: ConeGeometry, phi0: np.ndarray, j: int, sigma0: float = 2.0,
            reference: np.ndarray | None = None) -> np.ndarray:
    """Heat-kernel mollification at scale sigma_j = sigma0 * 2^-j.

    The additive constant is chosen so that sup(ref - phi_j) = sup(phi_j - ref)
    (the sup-symmetric normalization); ``reference`` defaults to ``phi0``.
    On the torus the discrete heat kernel is a positive Fourier multiplier, so
    the weak positivity of the density is preserved exactly.
    """
    if j < 1:
        raise InitialDataError("mollification index j must be >= 1")
    sigma = sigma0 * 2.0 ** (-j)
    h = 1.0 / geom.n if geom.kind == "torus" else geom.ops.h
    if sigma < 2.0 * h * (1.0 - 1e-12):
        raise InitialDataError(
            f"mollification under-resolved: sigma_{j} = {sigma:.3g} < 2h = {2*h:.3g}")
    if geom.kind == "torus":
        smooth = _heat_smooth_torus(phi0, sigma)
    else:
        smooth = _heat_smooth_line(phi0, sigma, geom.ops.h)
    ref = phi0 if reference is None else reference
    shift = 0.5 * (np.max(ref - smooth) - np.max(smooth - ref))
    return smooth + shift


def sup_symmetrize(field: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Shift so that sup(reference - field) = sup(field - reference)."""
    shift = 0.5 * (np.max(reference - field) - np.max(field - reference))
    return field + shift


def mollified_family(geom: ConeGeometry, data: InitialData, j_list,
                     sigma0: float = 2.0):
    """The indexed mollified family phi_{0,j}, j in j_list (increasing)."""
    return {int(j): mollify(geom, data.phi0, int(j), sigma0) for j in j_list}
