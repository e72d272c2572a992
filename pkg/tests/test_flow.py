import math

import numpy as np
import pytest

from conemaflow import flow
from conemaflow.geometry import RegularizationParams, make_geometry

OPTS = flow.StepOptions()


@pytest.fixture(scope="module")
def torus_beta1():
    return make_geometry("torus", 1.0, 32)


@pytest.fixture(scope="module")
def torus_half():
    return make_geometry("torus", 0.5, 64)


def problem_for(geom, eps, delta=0.0):
    return flow.make_problem(geom, RegularizationParams(eps=eps, delta=delta))


# ---------------------------------------------------------------------------
# steps and trivial solutions
# ---------------------------------------------------------------------------

def test_zero_stationary(torus_beta1):
    # beta = 1, F = 0: the source term vanishes and phi = 0 is stationary
    prob = problem_for(torus_beta1, eps=0.3)
    state = flow.make_state(prob, np.zeros(torus_beta1.shape))
    out = flow.step(state, flow.zero_forcing(), prob, 0.05)
    assert np.max(np.abs(out.phi)) < 1e-11
    assert out.t == pytest.approx(0.05)


def test_constant_reduction_matches_ode(torus_beta1):
    # phi0 = c, F(v) = -v: spatial terms vanish, phi(t) = c e^{-t};
    # backward Euler must track it to O(dt^2) per step
    prob = problem_for(torus_beta1, eps=0.3)
    F = flow.linear_forcing(-1.0)
    c = 0.7
    state = flow.make_state(prob, np.full(torus_beta1.shape, c))
    dt = 0.01
    for k in range(1, 21):
        state = flow.step(state, F, prob, dt)
        exact = c * math.exp(-state.t)
        assert abs(float(state.phi[0, 0]) - exact) <= 3.0 * k * dt ** 2
    assert np.ptp(state.phi) < 1e-12


def test_step_halves_dt_and_validates(torus_half):
    from conemaflow.initial_data import make_test_potential
    prob = problem_for(torus_half, eps=0.1)
    data = make_test_potential(torus_half, "random_fourier_clipped", seed=0, amplitude=0.01)
    state = flow.make_state(prob, data.phi0)
    out = flow.step(state, flow.zero_forcing(), prob, 0.02)
    out.validate(prob, tol=1e-11)
    assert out.density.min() > 0.0


def test_run_t_zero_single_state(torus_beta1):
    prob = problem_for(torus_beta1, eps=0.3)
    traj = flow.run(np.zeros(torus_beta1.shape), flow.zero_forcing(), prob, 0.0, [])
    assert traj.times == (0.0,)


def test_run_constant_source(torus_beta1):
    # F = const c0 (mu = 0), beta = 1, phi0 = 0: phi(t) = c0 * t exactly
    prob = problem_for(torus_beta1, eps=0.3)
    F = flow.linear_forcing(0.0, hfield=0.25)
    traj = flow.run(np.zeros(torus_beta1.shape), F, prob, 0.5, [0.1, 0.5],
                    controller="grid")
    phi_end = traj.field_at(0.5)
    assert np.max(np.abs(phi_end - 0.125)) < 1e-10


def test_run_pi_controller_matches_grid(torus_half):
    from conemaflow.initial_data import make_test_potential
    data = make_test_potential(torus_half, "cone_bump", amplitude=0.01, radius=0.35)
    prob = problem_for(torus_half, eps=0.1)
    F = flow.zero_forcing()
    kw = dict(snapshot_times=[0.05], T=0.05)
    tg = flow.run(data.phi0, F, prob, kw["T"], kw["snapshot_times"],
                  controller="grid", dt_init=1e-5, dt_max=2e-3)
    tp = flow.run(data.phi0, F, prob, kw["T"], kw["snapshot_times"],
                  controller="pi", pi_tol=1e-8, dt_init=1e-5, dt_max=2e-3)
    gap = np.max(np.abs(tg.field_at(0.05) - tp.field_at(0.05)))
    assert gap <= 5.0 * (tg.error_budget + tp.error_budget)


def test_stationary_residual_trivial(torus_beta1):
    prob = problem_for(torus_beta1, eps=0.3)
    state = flow.make_state(prob, np.zeros(torus_beta1.shape))
    assert flow.stationary_residual(state, flow.zero_forcing(), prob) == pytest.approx(0.0, abs=1e-14)


def test_stationary_residual_refinement_order():
    # continuum-manufactured forcing: residual of the sampled exact solution
    # decreases at the stencil order under grid refinement
    errs = []
    for n in (64, 128, 256):
        geom = make_geometry("torus", 0.5, n)
        x = np.arange(n) / n
        phi_star = 0.01 * np.cos(2 * np.pi * x)[:, None] * np.cos(2 * np.pi * x)[None, :]
        lap_exact = -2.0 * (2 * np.pi) ** 2 * phi_star
        src = 0.5 * np.log(0.01 + geom.section_sq)
        fstar = -(np.log(1.0 + lap_exact) + src)
        prob = flow.make_problem(geom, RegularizationParams(eps=0.1, delta=0.0))
        F = flow.manufactured_forcing(fstar, phi_star, lam=0.0)
        state = flow.make_state(prob, phi_star)
        errs.append(flow.stationary_residual(state, F, prob))
    o1 = math.log2(errs[0] / errs[1])
    o2 = math.log2(errs[1] / errs[2])
    assert min(o1, o2) > 1.7


# ---------------------------------------------------------------------------
# smooth-case smoke: eps has no effect at beta = 1
# ---------------------------------------------------------------------------

def test_beta_one_eps_independent(torus_beta1):
    from conemaflow.initial_data import make_test_potential
    data = make_test_potential(torus_beta1, "cone_bump", amplitude=0.005, radius=0.3)
    outs = []
    for eps in (0.2, 0.05):
        prob = problem_for(torus_beta1, eps=eps)
        traj = flow.run(data.phi0, flow.zero_forcing(), prob, 0.1, [0.1],
                        controller="grid", dt_init=1e-4, dt_max=5e-3)
        outs.append(traj.field_at(0.1))
    assert np.max(np.abs(outs[0] - outs[1])) < 1e-12


# ---------------------------------------------------------------------------
# existence horizon
# ---------------------------------------------------------------------------

def test_horizon_constant_rhs(torus_half):
    # F = 0 with delta = 0 and beta = 1/2: Fbar = sup|f_eps| > 0,
    # G is affine and Tbar = (R_max - A)/C_f
    regs = [RegularizationParams(eps=0.1, delta=0.0)]
    from conemaflow.geometry import f_eps_field
    cf = float(np.max(np.abs(f_eps_field(torus_half, regs[0]))))
    hor = flow.existence_horizon(flow.zero_forcing(), 1.0, torus_half, regs)
    assert hor.fbar == pytest.approx(cf, rel=1e-12)
    expected = (hor.R_max - 1.0) / cf
    if expected < 10.0:
        assert hor.Tbar == pytest.approx(expected, abs=0.01)
    assert hor.G(0.5) == pytest.approx(1.0 + 0.5 * cf, rel=1e-6)


def test_horizon_linear_growth(torus_beta1):
    # F(v) = v, beta = 1, delta = 0: C_f = 0 and G = A e^t
    regs = [RegularizationParams(eps=0.1, delta=0.0)]
    hor = flow.existence_horizon(flow.linear_forcing(1.0), 0.5, torus_beta1, regs)
    for t in (0.1, 0.5, 1.0):
        assert hor.G(t) == pytest.approx(0.5 * math.exp(t), rel=1e-5)


def test_horizon_blowup_quadratic(torus_beta1):
    # F(v) = v^2: G = 1/(1-t) blows up at t = 1; the integrator must halt
    # at Tbar ~ 1 - 1/R_max (closed-form crossing of the tabulation range)
    regs = [RegularizationParams(eps=0.1, delta=0.0)]
    v = np.linspace(-8.0, 8.0, 4001)
    F = flow.custom_forcing(v, v ** 2)
    hor = flow.existence_horizon(F, 1.0, torus_beta1, regs, R_max=8.0)
    assert hor.Tbar < 1.0
    assert hor.Tbar == pytest.approx(1.0 - 1.0 / 8.0, abs=0.01)


def test_horizon_bounds_flow_max(torus_half):
    # discrete maximum principle: max(shifted phi) stays under G(t)
    from conemaflow.initial_data import make_test_potential
    from conemaflow.geometry import resolve_delta, make_regularized
    delta, _ = resolve_delta(torus_half, [0.1], 0.1)
    reg = RegularizationParams(eps=0.1, delta=delta)
    data = make_test_potential(torus_half, "cone_bump", amplitude=0.01)
    rg = make_regularized(torus_half, reg, warn_rho=False)
    shifted0 = data.phi0 - delta * rg.chi
    A = float(np.max(np.abs(shifted0)))
    hor = flow.existence_horizon(flow.zero_forcing(), A, torus_half, [reg])
    prob = flow.make_problem(torus_half, reg)
    traj = flow.run(data.phi0, flow.zero_forcing(), prob, 0.2, [0.05, 0.1, 0.2],
                    controller="grid")
    for t, f in zip(traj.times, traj.fields):
        if t == 0.0:
            continue
        assert float(np.max(f - delta * rg.chi)) <= hor.G(t) + 1e-6


def test_run_respects_horizon(torus_beta1):
    prob = problem_for(torus_beta1, eps=0.3)
    with pytest.raises(flow.FlowError, match="horizon"):
        flow.run(np.zeros(torus_beta1.shape), flow.zero_forcing(), prob, 1.0, [1.0],
                 horizon=0.5)


def test_time_grid_hits_snapshots():
    grid = flow.build_time_grid(0.5, [1e-4, 1e-3, 1e-2, 0.1, 0.25, 0.5])
    for s in (1e-4, 1e-3, 1e-2, 0.1, 0.25, 0.5):
        assert np.any(np.abs(grid - s) < 1e-15)
    assert np.all(np.diff(grid) > 0)


def test_forcing_lipschitz_recorded():
    F = flow.linear_forcing(-2.0)
    assert F.lipschitz_K == 2.0
    measured = flow.sampled_lipschitz(F, -1.0, 1.0)
    assert measured <= F.lipschitz_K + 1e-12
