"""The double limit: mollification index up, regularization down.

All family members share one geometry, forcing, horizon and snapshot grid and
are stepped on one deterministic time grid, so the discrete comparison
arguments (contraction in j, monotonicity in eps) hold step-for-step and the
measured margins are solver-tolerance-sized.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import flow as flow_mod
from .geometry import ConeGeometry, RegularizationParams
from .initial_data import InitialData, mollify


class ContinuationError(RuntimeError):
    pass


def worker_count():
    return max(1, int(os.environ.get("CONEMAFLOW_THREADS", "1")))


@dataclass(frozen=True, eq=False)
class FamilyRun:
    geom: ConeGeometry
    forcing: object
    eps_list: tuple              # strictly decreasing
    j_list: tuple                # strictly increasing
    T: float
    snapshot_times: tuple
    delta: float
    trajectories: dict           # (eps, j) -> Trajectory
    problems: dict               # eps -> EpsProblem
    initial_family: dict         # j -> phi_{0,j}
    phi0: np.ndarray
    horizon: object = None
    disc_error: float = 0.0      # Richardson discretization-error estimate
    tol_contraction: float = 0.02

    def member(self, eps, j):
        return self.trajectories[(float(eps), int(j))]


def run_family(geom: ConeGeometry, data: InitialData, forcing, eps_list, j_list,
               T, snapshot_times, delta: float, sigma0: float = 2.0,
               rho: float = 0.25, opts=flow_mod.StepOptions(),
               dt_init=1e-6, dt_growth=1.15, dt_max=0.02,
               enforce_horizon=True, horizon_span=4.0,
               tol_contraction=0.02, estimate_disc_error=True) -> FamilyRun:
    """Run the full (eps, j) matrix on a shared time grid."""
    eps_list = tuple(float(e) for e in eps_list)
    j_list = tuple(int(j) for j in j_list)
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ContinuationError("eps-list must be strictly decreasing")
    if any(b <= a for a, b in zip(j_list, j_list[1:])):
        raise ContinuationError("j-list must be strictly increasing")

    family = {j: mollify(geom, data.phi0, j, sigma0) for j in j_list}
    regs = [RegularizationParams(eps=e, delta=delta, rho=rho) for e in eps_list]
    problems = {e: flow_mod.make_problem(geom, r) for e, r in zip(eps_list, regs)}

    horizon = None
    if enforce_horizon:
        A = max(float(np.max(np.abs(family[j] - regs[k].delta * problems[eps_list[k]].rg.chi)))
                for j in j_list for k in range(len(eps_list)))
        horizon = flow_mod.existence_horizon(forcing, A, geom, regs,
                                             R_max=horizon_span * max(A, 0.25))
        if T > horizon.Tbar + 1e-12:
            raise ContinuationError(
                f"T = {T} exceeds the existence-horizon estimate {horizon.Tbar:.4g}")

    grid = flow_mod.build_time_grid(T, snapshot_times, dt_init, dt_growth, dt_max)

    def one(key):
        eps, j = key
        return key, flow_mod.run(family[j], forcing, problems[eps], T, snapshot_times,
                                 controller="grid", j=j, opts=opts, time_grid=grid)

    keys = [(e, j) for e in eps_list for j in j_list]
    nw = worker_count()
    if nw > 1:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            results = dict(pool.map(one, keys))
    else:
        results = dict(map(one, keys))

    disc = 0.0
    if estimate_disc_error:
        disc = _discretization_estimate(geom, family, forcing, problems, eps_list,
                                        j_list, T, snapshot_times, opts, grid,
                                        dt_init, dt_growth, dt_max)
    return FamilyRun(geom, forcing, eps_list, j_list, float(T), tuple(sorted(
        float(s) for s in snapshot_times if 0.0 < s <= T)), delta, results, problems,
        family, data.phi0, horizon, disc, tol_contraction)


def _discretization_estimate(geom, family, forcing, problems, eps_list, j_list,
                             T, snapshot_times, opts, grid, dt_init, dt_growth, dt_max):
    """Richardson estimate on the coarsest member: halve the time grid."""
    eps, j = eps_list[0], j_list[0]
    base = flow_mod.run(family[j], forcing, problems[eps], T, snapshot_times,
                        controller="grid", j=j, opts=opts, time_grid=grid)
    fine_grid = np.union1d(grid, 0.5 * (grid[:-1] + grid[1:]))
    fine = flow_mod.run(family[j], forcing, problems[eps], T, snapshot_times,
                        controller="grid", j=j, opts=opts, time_grid=fine_grid)
    dt_err = max(float(np.max(np.abs(a - b)))
                 for a, b in zip(base.fields[1:], fine.fields[1:]))
    # spatial part: the first-order time error doubles the halved-grid gap
    return 2.0 * dt_err + 1e-14


# ---------------------------------------------------------------------------
# limits
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CauchyTable:
    eps: float
    rows: list                   # (j, l, measured, bound)
    verdict: bool


def j_limit(family: FamilyRun, eps):
    """Limit proxy in the mollification index plus the Cauchy/contraction table.

    The measured sup-distance of every pair must obey the comparison bound
    e^{K T} ||phi_{0,j} - phi_{0,l}||_inf within the configured tolerance, and
    consecutive-pair distances must decay along the family.
    """
    eps = float(eps)
    if len(family.j_list) < 3:
        raise ContinuationError("j_limit needs at least 3 family members per eps")
    K = family.forcing.lipschitz_K
    rows = []
    ok = True
    for a in range(len(family.j_list)):
        for b in range(a + 1, len(family.j_list)):
            j, l = family.j_list[a], family.j_list[b]
            tj, tl = family.member(eps, j), family.member(eps, l)
            measured = max(float(np.max(np.abs(fj - fl)))
                           for fj, fl in zip(tj.fields, tl.fields))
            d0 = float(np.max(np.abs(family.initial_family[j] - family.initial_family[l])))
            bound = math.exp(K * family.T) * d0 * (1.0 + family.tol_contraction)
            rows.append((j, l, measured, bound))
            if measured > bound:
                ok = False
                raise ContinuationError(
                    f"contraction violated at eps={eps}, pair (j={j}, l={l}): "
                    f"{measured:.3e} > {bound:.3e}")
    pairs = list(zip(family.j_list, family.j_list[1:]))
    consec = [measured for (j, l, measured, _) in rows if (j, l) in pairs]
    if any(b > a * 1.05 + 1e-13 for a, b in zip(consec, consec[1:])):
        ok = False
    return family.member(eps, family.j_list[-1]), CauchyTable(eps, rows, ok)


@dataclass(frozen=True, eq=False)
class MonotonicityReport:
    rows: list                   # (eps_small, eps_big, t, min margin)
    annulus_rows: list           # (eps_pair, C2 distance on annulus)
    tol_mono: float
    verdict: bool


def eps_limit(family: FamilyRun, t_probe=None, annulus_radius=0.25):
    """Pointwise eps-monotonicity and the limit proxy in the regularization.

    For consecutive eps_1 < eps_2 the potentials must satisfy
    phi_{eps_1} <= phi_{eps_2} + tol_mono at every node and probe time; the
    C2 distance of consecutive members on an annulus away from the cone points
    must decay, witnessing locally smooth convergence.
    """
    if len(family.eps_list) < 3:
        raise ContinuationError("eps_limit needs at least 3 eps members")
    if t_probe is None:
        t_probe = list(family.snapshot_times)
    else:
        t_probe = [t for t in t_probe if t in family.snapshot_times] \
            or list(family.snapshot_times)
    tol = 10.0 * family.disc_error
    jmax = family.j_list[-1]
    rows = []
    ok = True
    for e_big, e_small in zip(family.eps_list, family.eps_list[1:]):
        tb, ts = family.member(e_big, jmax), family.member(e_small, jmax)
        for t in t_probe:
            margin = float(np.min(tb.field_at(t) - ts.field_at(t)))
            rows.append((e_small, e_big, t, margin))
            if margin < -tol:
                ok = False
    mask = family.geom.dist_to_divisor() >= annulus_radius
    ann_rows = []
    tl = family.snapshot_times[-1]
    prev = None
    for e_big, e_small in zip(family.eps_list, family.eps_list[1:]):
        diff = family.member(e_small, jmax).field_at(tl) - family.member(e_big, jmax).field_at(tl)
        c2 = _c2_norm(family.geom, diff, mask)
        ann_rows.append(((e_small, e_big), c2))
    for (_, a), (_, b) in zip(ann_rows, ann_rows[1:]):
        if b > a * 1.1 + 1e-13:
            ok = False
    return (family.member(family.eps_list[-1], jmax),
            MonotonicityReport(rows, ann_rows, tol, ok))


def _c2_norm(geom, f, mask):
    lap = geom.lap(f)
    gsq = geom.grad_sq(f)
    return float(np.max(np.abs(f)[mask]) + np.max(np.sqrt(gsq)[mask])
                 + np.max(np.abs(lap)[mask]))


@dataclass(frozen=True, eq=False)
class ModulusTable:
    rows: list                   # (t, sup distance)
    verdict: bool


def initial_continuity(traj, phi0, decades_factor: float = 0.1):
    """Modulus of continuity at t -> 0: the sup-distance table must fall to
    ``decades_factor`` of its first value over the probed range with a
    decreasing tail."""
    rows = [(t, float(np.max(np.abs(f - phi0))))
            for t, f in zip(traj.times, traj.fields) if t > 0.0]
    rows.sort()
    small = [r for r in rows if r[0] <= 1e-2 + 1e-15]
    ok = True
    if len(small) >= 2:
        vals = [v for _, v in small]  # ascending in t
        # the modulus must shrink toward t -> 0: a non-decreasing tail
        # (value at smaller t exceeding the next one) is a failure
        if any(a > b * (1.0 + 1e-9) for a, b in zip(vals, vals[1:])):
            ok = False
        if vals[0] > decades_factor * vals[-1]:
            ok = False
    return ModulusTable(rows, ok)
