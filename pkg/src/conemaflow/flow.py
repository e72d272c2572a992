"""Backward-Euler time stepping for the regularized parabolic flow.

In complex dimension 1 the evolution is the scalar fully nonlinear equation

    d(phi)/dt = log(1 + lap(phi)) + F(phi, z) + (1 - beta) log(eps^2 + |s|^2),

stepped implicitly: each step solves the residual equation by damped Newton,
with FFT-preconditioned conjugate-gradient inner solves on the torus and
banded direct solves on the radial football model.  Implicit stepping is the
robustness requirement near t = 0 with weak data, where the log-Laplacian
degenerates as the density approaches zero and an explicit CFL would demand
dt ~ h^2 * density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .geometry import ConeGeometry, RegularizationParams, RegularizedGeometry, make_regularized


class FlowError(RuntimeError):
    pass


class PositivityBreakdown(FlowError):
    """The density hit the floor at minimal dt: the step left the Kahler cone."""


# ---------------------------------------------------------------------------
# forcing
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ForcingModel:
    """F(v, z) together with its v-derivative and recorded Lipschitz constant.

    kinds:
      zero          F = 0
      linear        F = mu*v + h(z)
      manufactured  F = fstar(z) - lam*(v - target(z)); pins ``target`` as the
                    unique attracting stationary state
      custom        F = interp(v) + g(z), tabulated in v
    """

    kind: str
    mu: float = 0.0
    hfield: object = 0.0
    fstar: object = None
    target: object = None
    lam: float = 1.0
    v_table: object = None
    f_table: object = None
    zfield: object = 0.0
    lipschitz_K: float = 0.0

    def __call__(self, v):
        if self.kind == "zero":
            return np.zeros_like(v)
        if self.kind == "linear":
            return self.mu * v + self.hfield
        if self.kind == "manufactured":
            return self.fstar - self.lam * (v - self.target)
        if self.kind == "custom":
            return np.interp(v, self.v_table, self.f_table) + self.zfield
        raise FlowError(f"unknown forcing kind {self.kind!r}")

    def dv(self, v):
        if self.kind == "zero":
            return np.zeros_like(v)
        if self.kind == "linear":
            return np.full_like(v, self.mu)
        if self.kind == "manufactured":
            return np.full_like(v, -self.lam)
        if self.kind == "custom":
            dv = np.gradient(self.f_table, self.v_table)
            return np.interp(v, self.v_table, dv)
        raise FlowError(f"unknown forcing kind {self.kind!r}")


def zero_forcing():
    return ForcingModel("zero", lipschitz_K=0.0)


def linear_forcing(mu, hfield=0.0):
    return ForcingModel("linear", mu=mu, hfield=hfield, lipschitz_K=abs(mu))


def manufactured_forcing(fstar, target, lam=1.0):
    return ForcingModel("manufactured", fstar=fstar, target=target, lam=lam,
                        lipschitz_K=abs(lam))


def custom_forcing(v_table, f_table, zfield=0.0):
    K = float(np.max(np.abs(np.gradient(f_table, v_table))))
    return ForcingModel("custom", v_table=np.asarray(v_table, float),
                        f_table=np.asarray(f_table, float), zfield=zfield,
                        lipschitz_K=K)


def sampled_lipschitz(F: ForcingModel, vmin, vmax, samples=64) -> float:
    vs = np.linspace(vmin, vmax, samples)
    best = 0.0
    for a, b in zip(vs[:-1], vs[1:]):
        fa, fb = F(np.array(a)), F(np.array(b))
        best = max(best, float(np.max(np.abs(fb - fa))) / (b - a))
    return best


# ---------------------------------------------------------------------------
# problem bundle and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EpsProblem:
    """Everything the stepper needs for one (geometry, eps) member.

    On the football model the density is evaluated as
    1 + lap_ref + lap_flux(phi - phi_ref): the reference Laplacian is exact
    (analytic or high-order) while the evolving deviation goes through the
    symmetric flux-form operator, whose backward-Euler systems are provably
    invertible; with conical reference data the deviation stays tiny and the
    flux closure error scales with it.
    """

    geom: ConeGeometry
    reg: RegularizationParams
    rg: RegularizedGeometry
    source: np.ndarray          # (1-beta) log(eps^2+|s|^2) + optional constant shift
    shift: float = 0.0          # e.g. log(c_eps) - log(c_eps_j) in stationarity runs
    phi_ref: np.ndarray | None = None
    lap_ref: np.ndarray | None = None

    @property
    def eps(self):
        return self.reg.eps

    def density(self, phi):
        if self.geom.kind == "torus":
            return 1.0 + self.geom.lap(phi)
        if self.phi_ref is None:
            return 1.0 + self.geom.ops.lap_flux(phi)
        return 1.0 + self.lap_ref + self.geom.ops.lap_flux(phi - self.phi_ref)


def make_problem(geom: ConeGeometry, reg: RegularizationParams, shift: float = 0.0,
                 warn_rho: bool = False, phi_ref=None, lap_ref=None) -> EpsProblem:
    rg = make_regularized(geom, reg, warn_rho=warn_rho)
    src = rg.source + shift
    src.setflags(write=False)
    if phi_ref is not None and lap_ref is None:
        lap_ref = geom.lap(phi_ref)
    return EpsProblem(geom, reg, rg, src, shift, phi_ref, lap_ref)


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    phi: np.ndarray
    density: np.ndarray         # cached area density of the evolving metric
    eps: float
    j: int
    dt_last: float
    newton_iters: int = 0

    def validate(self, problem: "EpsProblem", tol: float = 1e-12):
        recomputed = problem.density(self.phi)
        if float(np.max(np.abs(recomputed - self.density))) > tol:
            raise FlowError("density cache inconsistent with potential")
        if self.density.min() <= 0.0:
            raise FlowError("density must be positive")
        return True


def make_state(problem: "EpsProblem", phi, j: int = 0, t: float = 0.0) -> FlowState:
    phi = np.asarray(phi, dtype=float)
    dens = problem.density(phi)
    if dens.min() <= 0.0:
        raise FlowError("initial potential leaves the Kahler cone (density <= 0)")
    return FlowState(t, phi, dens, problem.eps, j, 0.0)


def rhs_field(state_phi, dens, problem: EpsProblem, forcing: ForcingModel):
    """The analytic right-hand side; also the definition of phi-dot."""
    return np.log(dens) + forcing(state_phi) + problem.source


def stationary_residual(state: FlowState, forcing: ForcingModel,
                        problem: EpsProblem) -> float:
    """sup-norm of the flow right-hand side (zero at a stationary solution)."""
    return float(np.max(np.abs(rhs_field(state.phi, state.density, problem, forcing))))


# ---------------------------------------------------------------------------
# linear solvers for the Newton systems
# ---------------------------------------------------------------------------

def _pcg_torus(ops, dens, fprime, dt, rhs, tol, maxiter=400):
    """PCG on the density-weighted symmetrization of the Newton operator.

    Operator: A v = dens*v - dt*lap(v) - dt*dens*fprime*v (symmetric);
    preconditioner: constant-coefficient Helmholtz inverse via FFT.
    """
    wrhs = dens * rhs

    def Aop(v):
        return dens * v - dt * _kernels.lap5_periodic(v, ops.inv_h2) - dt * (dens * fprime) * v

    a0 = float(np.mean(dens * (1.0 - dt * fprime)))
    if a0 <= 0.0:
        raise FlowError("Newton operator lost positivity (dt too large for forcing)")
    x = np.zeros_like(rhs)
    r = wrhs.copy()
    z = ops.helmholtz_solve(r, a0, dt)
    p = z.copy()
    rz = float(np.sum(r * z))
    bnorm = float(np.max(np.abs(wrhs))) or 1.0
    for _ in range(maxiter):
        Ap = Aop(p)
        alpha = rz / float(np.sum(p * Ap))
        x += alpha * p
        r -= alpha * Ap
        if float(np.max(np.abs(r))) <= tol * bnorm:
            return x
        z = ops.helmholtz_solve(r, a0, dt)
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise FlowError("PCG stalled in the Newton linear solve")


def _banded_football(ops, dens, fprime, dt, rhs):
    from scipy.linalg import solve_banded
    ab = ops.flux_banded(1.0 / (ops.w * dens), fprime, dt)
    return solve_banded((1, 1), ab, rhs)


def _newton_linear_solve(problem, dens, fprime, dt, rhs, tol):
    if problem.geom.kind == "torus":
        return _pcg_torus(problem.geom.ops, dens, fprime, dt, rhs, tol)
    return _banded_football(problem.geom.ops, dens, fprime, dt, rhs)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepOptions:
    newton_tol: float = 1e-11
    newton_dt_tol: float = 2e-7   # dt-scaled defect floor (per unit time)
    newton_maxiter: int = 50
    density_floor: float = 1e-8
    max_dt_halvings: int = 30
    lin_tol: float = 1e-10


def _newton_solve_step(problem, forcing, phi_old, dt, opts):
    """One backward-Euler solve; returns (phi_new, dens_new, iters) or None."""
    geom = problem.geom
    phi = phi_old.copy()
    dens = problem.density(phi)
    # predictor: explicit Euler from the current RHS
    phi = phi + dt * rhs_field(phi, dens, problem, forcing)
    dens = problem.density(phi)
    if dens.min() <= opts.density_floor:
        phi = phi_old.copy()
        dens = problem.density(phi)

    def residual(p, d):
        return p - phi_old - dt * rhs_field(p, d, problem, forcing)

    tol = max(opts.newton_tol, dt * opts.newton_dt_tol)
    res = residual(phi, dens)
    rnorm = float(np.max(np.abs(res)))
    for it in range(1, opts.newton_maxiter + 1):
        if rnorm <= tol:
            return phi, dens, it - 1
        fprime = forcing.dv(phi)
        try:
            v = _newton_linear_solve(problem, dens, fprime, dt, -res, opts.lin_tol)
        except FlowError:
            return None
        lam = 1.0
        for _ in range(9):
            cand = phi + lam * v
            cdens = problem.density(cand)
            if cdens.min() > opts.density_floor:
                cres = residual(cand, cdens)
                cnorm = float(np.max(np.abs(cres)))
                if cnorm <= (1.0 - 0.25 * lam) * rnorm or cnorm <= tol:
                    phi, dens, res, rnorm = cand, cdens, cres, cnorm
                    break
            lam *= 0.5
        else:
            return None
    if rnorm <= tol * 10.0:
        return phi, dens, opts.newton_maxiter
    return None


def step(state: FlowState, forcing: ForcingModel, problem: EpsProblem, dt: float,
         opts: StepOptions = StepOptions()) -> FlowState:
    """One accepted backward-Euler step; halves dt on failure (up to the cap)."""
    if dt <= 0.0:
        raise FlowError("dt must be positive")
    remaining = dt
    t = state.t
    phi = state.phi
    sub_dt = dt
    halvings = 0
    iters_total = 0
    while remaining > 1e-300:
        sub_dt = min(sub_dt, remaining)
        out = _newton_solve_step(problem, forcing, phi, sub_dt, opts)
        if out is None:
            halvings += 1
            if halvings > opts.max_dt_halvings:
                raise PositivityBreakdown(
                    f"positivity breakdown at t={t:.6g}: density floor at minimal dt")
            sub_dt *= 0.5
            continue
        phi, dens, iters = out
        iters_total += iters
        t += sub_dt
        remaining -= sub_dt
    return FlowState(t, phi, dens, state.eps, state.j, sub_dt, iters_total)


def build_time_grid(T, snapshot_times, dt_init=1e-6, growth=1.15, dt_max=0.02):
    """Deterministic geometric-ramp time grid hitting every snapshot exactly."""
    snaps = sorted(set(float(s) for s in snapshot_times if 0.0 < s <= T)) + [float(T)]
    snaps = sorted(set(snaps))
    ts = [0.0]
    dt = dt_init
    t = 0.0
    for target in snaps:
        while t < target - 1e-14:
            stepped = min(dt, target - t)
            t += stepped
            ts.append(t)
            dt = min(dt * growth, dt_max)
        t = target
        ts[-1] = target
    return np.array(ts)


@dataclass(frozen=True, eq=False)
class Trajectory:
    eps: float
    j: int
    times: tuple
    fields: tuple               # snapshot potentials
    diagnostics: tuple          # per-snapshot dicts
    error_budget: float = 0.0   # accumulated local-error estimate

    def field_at(self, t):
        for tt, f in zip(self.times, self.fields):
            if abs(tt - t) <= 1e-12 * max(1.0, abs(t)):
                return f
        raise KeyError(f"no snapshot at t = {t}")


def _snapshot_diag(problem, forcing, state):
    phid = rhs_field(state.phi, state.density, problem, forcing)
    return {
        "t": state.t,
        "eps": state.eps,
        "j": state.j,
        "sup_phi": float(state.phi.max()),
        "inf_phi": float(state.phi.min()),
        "min_density": float(state.density.min()),
        "max_density": float(state.density.max()),
        "sup_phidot": float(np.max(np.abs(phid))),
        "newton_iters": state.newton_iters,
        "dt_last": state.dt_last,
    }


def run(initial, forcing: ForcingModel, problem: EpsProblem, T: float,
        snapshot_times, controller: str = "pi", j: int = 0,
        opts: StepOptions = StepOptions(), pi_tol: float = 1e-7,
        dt_init: float = 1e-6, dt_growth: float = 1.15, dt_max: float = 0.02,
        time_grid=None, horizon=None) -> Trajectory:
    """Integrate to time T, recording snapshots.

    controller "pi": adaptive dt from a PI update on the local-error estimate
    (half the jump of the analytic RHS over the step) plus a Newton-iteration
    governor.  controller "grid": follow ``time_grid`` (or the deterministic
    geometric ramp) exactly; this is what family runs use so that pairwise
    comparison arguments hold step-for-step.
    """
    if horizon is not None and T > horizon + 1e-12:
        raise FlowError(f"T = {T} exceeds the existence horizon estimate {horizon}")
    state = make_state(problem, initial, j)
    snaps = sorted(set(float(s) for s in snapshot_times if 0.0 < s <= T))
    if T not in snaps and T > 0.0:
        snaps.append(float(T))
    out_t, out_f, out_d = [0.0], [state.phi.copy()], [_snapshot_diag(problem, forcing, state)]
    budget = 0.0

    if T == 0.0:
        return Trajectory(problem.eps, j, tuple(out_t), tuple(out_f), tuple(out_d), 0.0)

    if controller == "grid":
        grid = build_time_grid(T, snaps, dt_init, dt_growth, dt_max) if time_grid is None else time_grid
        phid_prev = rhs_field(state.phi, state.density, problem, forcing)
        for t0, t1 in zip(grid[:-1], grid[1:]):
            state = step(state, forcing, problem, t1 - t0, opts)
            state = replace(state, t=float(t1))
            phid = rhs_field(state.phi, state.density, problem, forcing)
            budget += 0.5 * (t1 - t0) * float(np.max(np.abs(phid - phid_prev)))
            phid_prev = phid
            if any(abs(t1 - s) <= 1e-12 for s in snaps):
                out_t.append(float(t1))
                out_f.append(state.phi.copy())
                out_d.append(_snapshot_diag(problem, forcing, state))
        return Trajectory(problem.eps, j, tuple(out_t), tuple(out_f), tuple(out_d), budget)

    if controller != "pi":
        raise FlowError(f"unknown controller {controller!r}")

    dt = dt_init
    err_prev = pi_tol
    phid_prev = rhs_field(state.phi, state.density, problem, forcing)
    pending = list(snaps)
    while pending:
        target = pending[0]
        while state.t < target - 1e-14:
            dt_eff = min(dt, dt_max, target - state.t)
            new_state = step(state, forcing, problem, dt_eff, opts)
            phid = rhs_field(new_state.phi, new_state.density, problem, forcing)
            err = 0.5 * dt_eff * float(np.max(np.abs(phid - phid_prev)))
            if err > 4.0 * pi_tol and dt_eff > 4.0 * opts.density_floor:
                dt = max(dt_eff * 0.5, 1e-12)
                continue
            state = new_state
            budget += err
            phid_prev = phid
            fac = 0.9 * (pi_tol / max(err, 1e-300)) ** 0.5 \
                * (err_prev / max(err, 1e-300)) ** 0.25
            if state.newton_iters > 12:
                fac = min(fac, 0.5)
            dt = dt_eff * float(np.clip(fac, 0.2, 2.0))
            err_prev = max(err, 1e-300)
        state = replace(state, t=target)
        out_t.append(target)
        out_f.append(state.phi.copy())
        out_d.append(_snapshot_diag(problem, forcing, state))
        pending.pop(0)
    return Trajectory(problem.eps, j, tuple(out_t), tuple(out_f), tuple(out_d), budget)


# ---------------------------------------------------------------------------
# existence horizon
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HorizonEstimate:
    A: float
    s_grid: np.ndarray
    fbar: np.ndarray
    times: np.ndarray
    values: np.ndarray
    Tbar: float
    R_max: float

    def G(self, t):
        return float(np.interp(t, self.times, self.values))


def existence_horizon(forcing: ForcingModel, A: float, geom: ConeGeometry,
                      reg_family, R_max=None, t_scan=10.0,
                      n_steps=4000) -> HorizonEstimate:
    """Comparison-ODE horizon: integrate G' = Fbar(G), G(0) = A.

    Fbar(s) = max over the eps-family and grid nodes of F(s + delta*chi, z)
    plus the family bound on |f_eps|; the horizon Tbar is the largest time
    with |G| <= R_max (default 4*max(A,1/4)).
    """
    if R_max is None:
        R_max = 4.0 * max(abs(A), 0.25)
    regs = list(reg_family)
    c_f = 0.0
    chis = []
    for reg in regs:
        rgeo = make_regularized(geom, reg, warn_rho=False)
        c_f = max(c_f, rgeo.sup_f_eps)
        chis.append(reg.delta * rgeo.chi)
    s_grid = np.linspace(-R_max, R_max, 257)
    fbar = np.full(s_grid.size, -np.inf)
    for chi in chis:
        for i, s in enumerate(s_grid):
            fbar[i] = max(fbar[i], float(np.max(forcing(s + chi))))
    fbar += c_f

    def fbar_at(sv):
        if abs(sv) > R_max:
            raise FlowError("comparison ODE left the tabulated range")
        return float(np.interp(sv, s_grid, fbar))

    dt = t_scan / n_steps
    times = [0.0]
    values = [float(A)]
    G = float(A)
    Tbar = t_scan
    for k in range(n_steps):
        try:
            k1 = fbar_at(G)
            k2 = fbar_at(G + 0.5 * dt * k1)
            k3 = fbar_at(G + 0.5 * dt * k2)
            k4 = fbar_at(G + dt * k3)
        except FlowError:
            Tbar = times[-1]
            break
        G_new = G + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if abs(G_new) > R_max:
            Tbar = times[-1]
            break
        G = G_new
        times.append((k + 1) * dt)
        values.append(G)
    else:
        Tbar = t_scan
    return HorizonEstimate(float(A), s_grid, fbar, np.array(times), np.array(values),
                           float(Tbar), float(R_max))
