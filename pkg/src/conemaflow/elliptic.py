"""Regularized elliptic solves and the stationarity verification pipeline.

In complex dimension 1 the regularized elliptic equation

    (background + dd^c psi) density = c * exp(-F(phi_in, z)) / (eps^2+|s|^2)^(1-beta)

is a Poisson problem once F is evaluated at a fixed input potential: the
normalization constant c makes the right side compatible, the Laplace solve is
spectral on the torus and banded (reference-deviation form) on the football.
A damped Newton loop handles the self-consistent case F = F(psi, z).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import flow as flow_mod
from .geometry import (ConeGeometry, RegularizationParams,
                       football_exact_density, football_exact_potential)
from .initial_data import mollify, sup_symmetrize


class EllipticError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EllipticSolution:
    psi: np.ndarray
    c_norm: float
    residual: float


def _compat_weights(geom: ConeGeometry):
    if geom.kind == "torus":
        return geom.weights
    return geom.ops.compat_weights()


def _poisson(geom: ConeGeometry, g, phi_ref=None):
    if geom.kind == "torus":
        psi = geom.ops.poisson_solve(g)
        res = float(np.max(np.abs(geom.lap(psi) - (g - g.mean()))))
        return psi, res
    return geom.ops.poisson_solve(g, phi_ref=phi_ref)


def rhs_density(geom: ConeGeometry, reg: RegularizationParams, forcing, phi_in):
    """exp(-F(phi_in, z)) * (eps^2 + |s|^2)^(beta-1)."""
    return np.exp(-forcing(phi_in)) * (reg.eps ** 2 + geom.section_sq) ** (geom.beta - 1.0)


def solve_regularized_ma(geom: ConeGeometry, reg: RegularizationParams, rhs,
                         normalize: bool = True, forcing=None, phi_in=None,
                         phi_ref=None, self_consistent: bool = False,
                         newton_tol: float = 1e-11) -> EllipticSolution:
    """Solve the n = 1 regularized elliptic equation.

    ``rhs`` may be a precomputed density field; alternatively pass ``forcing``
    plus ``phi_in`` to build exp(-F(phi_in))/(eps^2+|s|^2)^(1-beta).  With
    ``self_consistent=True`` the forcing argument is the unknown itself and a
    damped Newton iteration (Poisson-preconditioned) is run, starting from
    ``phi_ref`` (or zero).

    The normalization constant is computed against the discrete compatibility
    weights of the Laplacian, which makes lap(psi) = c*rhs - 1 hold at every
    node to solver precision; when ``normalize`` is false c = 1 is used.
    """
    if self_consistent:
        return _solve_self_consistent(geom, reg, forcing, phi_ref, newton_tol)
    if rhs is None:
        if forcing is None or phi_in is None:
            raise EllipticError("need either rhs density or (forcing, phi_in)")
        rhs = rhs_density(geom, reg, forcing, phi_in)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.min() <= 0.0:
        raise EllipticError("elliptic right-hand density must be strictly positive")
    ell = _compat_weights(geom)
    if normalize:
        ref_mass = 1.0 + (geom.lap(phi_ref) if phi_ref is not None else 0.0)
        c = float(np.sum(ell * ref_mass)) / float(np.sum(ell * rhs))
    else:
        c = 1.0
    psi, res = _poisson(geom, c * rhs - 1.0, phi_ref=phi_ref)
    dens = 1.0 + geom.lap(psi)
    if dens.min() <= 0.0 and geom.kind == "torus":
        raise EllipticError("elliptic solution leaves the Kahler cone")
    return EllipticSolution(psi, c, res)


def _solve_self_consistent(geom, reg, forcing, phi_ref, newton_tol):
    """Damped Picard/Newton for F depending on the unknown potential."""
    psi = np.zeros(geom.shape) if phi_ref is None else phi_ref.copy()
    ell = _compat_weights(geom)
    c = 1.0
    for it in range(80):
        rhs = rhs_density(geom, reg, forcing, psi)
        c = float(np.sum(ell * (1.0 + geom.lap(psi)))) / float(np.sum(ell * rhs))
        g = c * rhs - 1.0
        target, res = _poisson(geom, g, phi_ref=psi)
        target = sup_symmetrize(target, psi)
        step = target - psi
        lam = 1.0
        err0 = float(np.max(np.abs(geom.lap(psi) - g)))
        for _ in range(20):
            cand = psi + lam * step
            rhs_c = rhs_density(geom, reg, forcing, cand)
            c_c = float(np.sum(ell * (1.0 + geom.lap(cand)))) / float(np.sum(ell * rhs_c))
            err = float(np.max(np.abs(geom.lap(cand) - (c_c * rhs_c - 1.0))))
            if err < err0 or err < newton_tol:
                psi, err0 = cand, err
                break
            lam *= 0.5
        if err0 <= newton_tol:
            psi = psi - psi.mean()
            rhs = rhs_density(geom, reg, forcing, psi)
            c = float(np.sum(ell * (1.0 + geom.lap(psi)))) / float(np.sum(ell * rhs))
            res = float(np.max(np.abs(geom.lap(psi) - (c * rhs - 1.0))))
            return EllipticSolution(psi, c, res)
    raise EllipticError("self-consistent elliptic Newton did not converge")


# ---------------------------------------------------------------------------
# stationarity pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StationarityReport:
    stages: dict
    phidot_rows: list            # (eps, j, t, sup value, bound)
    distance_rows: list          # (t, sup |phi - phi0|)
    cone_holder: object
    verdict: bool
    failures: list = field(default_factory=list)


def football_stationary_setup(geom: ConeGeometry):
    """Exact stationary data for the football: potential, forcing, reference Laplacian."""
    phi0 = football_exact_potential(geom)
    forcing = flow_mod.linear_forcing(2.0 * geom.beta, hfield=-math.log(geom.beta))
    lap_ref = football_exact_density(geom) - 1.0
    return phi0, forcing, lap_ref


def manufactured_stationary_setup(geom: ConeGeometry, eps_star: float, delta0: float = 0.01,
                                  bump_amp: float = 0.002, lam: float = 1.0):
    """Torus manufactured stationary state with a -lam*(v - phi*) stabilizer.

    phi* = delta0 * chi(0, |s|^2, beta) + smooth bump; the z-part of the forcing
    is defined pointwise from the discrete equation at eps = eps_star, making
    phi* an exact discrete stationary solution.  F is Hoelder (not smooth) in z
    through the chi term.
    """
    from .geometry import chi_field
    n = geom.n
    x = np.arange(n) / n
    bump = bump_amp * np.cos(2 * np.pi * x)[:, None] * np.cos(2 * np.pi * x)[None, :]
    phi_star = delta0 * chi_field(0.0, geom.beta, geom.section_sq) + bump
    dens = 1.0 + geom.lap(phi_star)
    if dens.min() <= 0.0:
        raise EllipticError("manufactured potential leaves the Kahler cone; shrink amplitudes")
    fstar = -(np.log(dens) + (1.0 - geom.beta) * np.log(eps_star ** 2 + geom.section_sq))
    forcing = flow_mod.manufactured_forcing(fstar, phi_star, lam=lam)
    return phi_star, forcing


def stationarity_pipeline(geom: ConeGeometry, phi0, forcing, eps_list,
                          T: float = 0.5, snapshot_times=(0.1, 0.25, 0.5),
                          j_list=(0,), sigma0: float = 2.0, delta: float = 0.0,
                          lap_ref=None, tol_phidot: float = 1e-6,
                          tol_stationary: float = 1e-5,
                          gronwall_atol: float = 2e-6,
                          dt_init: float = 1e-4, dt_max: float = 0.01,
                          residual_tol: float = 1e-4):
    """Run the elliptic starts, the shifted flows, and the stationarity checks.

    Stages: (0) verify phi0 solves the discrete conical equation; (i) solve the
    regularized elliptic problems psi_eps (forcing at phi0) and psi_{eps,j}
    (forcing at the smooth approximations phi_j), sup-symmetrically normalized
    in sequence; (ii) run the shifted flows from psi_{eps,j}; (iii) check the
    Gronwall bound sup|phidot(t)| <= e^{Kt} sup|phidot(0)| + atol; (iv) compare
    the double-limit proxy against phi0; (v) cone-Hoelder report on phi0.

    j_list entries of 0 mean the identity smooth approximation phi_j = phi0
    (legitimate since phi0 is smooth on the truncated chart); positive entries
    request heat-kernel mollification at scale sigma0 * 2^-j.
    """
    stages = {}
    failures = []
    eps_list = sorted(set(float(e) for e in eps_list), reverse=True)
    K = forcing.lipschitz_K

    # stage 0: discrete conical stationarity of phi0 at the smallest eps
    eps_ref = eps_list[-1]
    dens0 = 1.0 + (geom.lap(phi0) if lap_ref is None else lap_ref)
    res0 = float(np.max(np.abs(
        np.log(dens0) + forcing(phi0) + (1.0 - geom.beta) * np.log(eps_ref ** 2 + geom.section_sq))))
    stages["initial_residual"] = res0
    if res0 > residual_tol:
        failures.append(f"initial data violates the discrete conical equation: {res0:.3e}")

    phidot_rows = []
    trajectories = {}
    c_table = {}
    asym_table = {}
    for eps in eps_list:
        reg = RegularizationParams(eps=eps, delta=delta)
        sol_eps = solve_regularized_ma(geom, reg, None, forcing=forcing, phi_in=phi0,
                                       phi_ref=phi0)
        psi_eps = sup_symmetrize(sol_eps.psi, phi0)
        c_eps = sol_eps.c_norm
        c_table[("eps", eps)] = c_eps
        for j in j_list:
            if j == 0:
                phi_j = phi0
            else:
                phi_j = mollify(geom, phi0, int(j), sigma0)
            sol_j = solve_regularized_ma(geom, reg, None, forcing=forcing, phi_in=phi_j,
                                         phi_ref=psi_eps)
            psi_j = sup_symmetrize(sol_j.psi, psi_eps)
            c_j = sol_j.c_norm
            c_table[("eps_j", eps, j)] = c_j
            # residual asymmetry of the first normalization after the second shift
            asym_table[(eps, j)] = abs(float(np.max(phi0 - psi_eps)) - float(np.max(psi_eps - phi0)))
            shift = math.log(c_eps) - math.log(c_j)
            prob = flow_mod.make_problem(geom, reg, shift=shift, phi_ref=phi0, lap_ref=lap_ref)
            traj = flow_mod.run(psi_j, forcing, prob, T, snapshot_times,
                                controller="grid", j=int(j),
                                dt_init=dt_init, dt_max=dt_max)
            trajectories[(eps, int(j))] = traj
            sup0 = traj.diagnostics[0]["sup_phidot"]
            for t, d in zip(traj.times, traj.diagnostics):
                bound = math.exp(K * t) * sup0 + gronwall_atol
                phidot_rows.append((eps, int(j), t, d["sup_phidot"], bound))
                if d["sup_phidot"] > bound:
                    failures.append(
                        f"Gronwall violation at eps={eps}, j={j}, t={t}: "
                        f"{d['sup_phidot']:.3e} > {bound:.3e}")
    stages["c_norms"] = {str(k): v for k, v in c_table.items()}
    stages["normalization_asymmetry"] = {str(k): v for k, v in asym_table.items()}
    stages["sup_phidot_after_limit"] = max(
        r[3] for r in phidot_rows
        if r[0] == eps_list[-1] and r[1] == max(j_list) and r[2] > 0.0)
    if stages["sup_phidot_after_limit"] > tol_phidot:
        failures.append(
            f"stationarity phidot bound failed: {stages['sup_phidot_after_limit']:.3e} > {tol_phidot}")

    # stage iv: the double-limit proxy is the smallest-eps, largest-j member
    proxy = trajectories[(eps_list[-1], int(max(j_list)))]
    distance_rows = [(t, float(np.max(np.abs(proxy.field_at(t) - phi0))))
                     for t in proxy.times if t > 0.0]
    dist_max = max(d for _, d in distance_rows)
    stages["max_distance"] = dist_max
    if dist_max > tol_stationary:
        failures.append(f"flow left the stationary state: {dist_max:.3e} > {tol_stationary}")

    return StationarityReport(stages, phidot_rows, distance_rows, None,
                              len(failures) == 0, failures), trajectories
