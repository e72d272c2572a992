import numpy as np
import pytest

from conemaflow import continuation as cont
from conemaflow import estimates as est
from conemaflow import flow
from conemaflow.geometry import (RegularizationParams, football_exact_density,
                                 make_geometry, resolve_delta)
from conemaflow.initial_data import make_test_potential


@pytest.fixture(scope="module")
def family():
    geom = make_geometry("torus", 0.5, 64)
    data = make_test_potential(geom, "cone_bump", amplitude=0.01, radius=0.35)
    delta, _ = resolve_delta(geom, [0.2, 0.1, 0.05], 0.1)
    return cont.run_family(
        geom, data, flow.zero_forcing(), [0.2, 0.1, 0.05], [3, 4, 5],
        T=0.2, snapshot_times=[1e-3, 1e-2, 0.05, 0.1, 0.2], delta=delta,
        dt_init=1e-5, dt_max=5e-3)


def test_family_halves_ordering(family):
    coarse, fine = est.family_halves(family)
    assert len(coarse) == len(fine) == 4
    assert coarse[0] == (0.2, 3)
    assert fine[-1] == (0.05, 5)


def test_envelope_constants():
    times = [0.1, 0.2, 0.4]
    assert est.envelope_constant(times, [10.0, 5.0, 2.5], "c_over_t") == pytest.approx(1.0)
    vals = [np.exp(2.0 / t) for t in times]
    assert est.envelope_constant(times, vals, "exp_c_over_t") == pytest.approx(2.0)
    lo = [t / 3.0 for t in times]
    assert est.envelope_constant(times, lo, "t_over_c") == pytest.approx(3.0)


def test_uniform_linf(family):
    rec = est.uniform_linf_check(family)
    assert rec.verdict, rec.notes
    assert rec.measured > 0.0
    # trivially bounded by the horizon cap
    assert rec.measured <= family.horizon.G(family.T) + 1.0


def test_det_ratio(family):
    rec = est.det_ratio_check(family)
    assert rec.verdict, rec.envelope
    assert rec.envelope["C_lower_coarse"] > 0.0
    assert rec.envelope["C_joint_fine"] <= 1.1 * rec.envelope["C_joint_coarse"] + 1e-9


def test_gradient_saturation_and_envelope(family):
    # the eps-transient of the conical response saturates geometrically; the
    # double-exponential envelope constant is finite (degenerate-zero at desk
    # scale since the sups sit far below e)
    rec = est.gradient_check(family, eta=0.05, spread_binding=False)
    assert rec.verdict, rec.envelope
    assert np.isfinite(rec.envelope["C_envelope"])
    assert rec.envelope["limit_bound"] >= rec.measured
    # at fixed eps the mollification family is tight
    assert rec.envelope["j_spread"] <= 0.10


def test_gradient_closed_form_mode():
    # single Fourier mode on the flat background: sup |grad|^2 = (2 pi a)^2
    geom = make_geometry("torus", 1.0, 128)
    x = np.arange(128) / 128
    a = 0.003
    phi = a * np.sin(2 * np.pi * x)[:, None] * np.ones(128)
    g2 = geom.grad_sq(phi)
    assert float(g2.max()) == pytest.approx((2 * np.pi * a) ** 2, rel=2e-3)


def test_metric_equivalence(family):
    rec = est.metric_equivalence_check(family, eta=0.05)
    assert rec.verdict
    assert rec.envelope["cone_comparison_C"] >= 1.0


def test_phidot_derivatives(family):
    rec = est.phidot_derivative_check(family, eta=0.05)
    assert rec.verdict, rec.envelope


def test_phidot_trivial_on_stationary():
    # spatially constant solution under F(v) = -v: phidot is spatially constant
    geom = make_geometry("torus", 1.0, 32)
    prob = flow.make_problem(geom, RegularizationParams(eps=0.3, delta=0.0))
    F = flow.linear_forcing(-1.0)
    traj = flow.run(np.full(geom.shape, 0.4), F, prob, 0.1, [0.05, 0.1],
                    controller="grid", dt_init=1e-4, dt_max=2e-3)
    f = traj.field_at(0.1)
    dens = prob.density(f)
    phid = flow.rhs_field(f, dens, prob, F)
    assert float(np.max(geom.grad_sq(phid))) < 1e-18
    assert float(np.max(np.abs(geom.lap(phid)))) < 1e-13


# ---------------------------------------------------------------------------
# Hoelder estimators
# ---------------------------------------------------------------------------

def test_holder_constant_field():
    geom = make_geometry("torus", 0.5, 64)
    val, triple = est.holder_seminorm(geom, np.full(geom.shape, 3.3), 0.5)
    assert val == 0.0


def test_holder_sqrt_profile():
    # u = dist^0.5 has Hoelder-0.5 seminorm ~ 1 and diverges at alpha = 0.7
    geom = make_geometry("torus", 0.5, 128)
    u = geom.dist_to_divisor() ** 0.5
    v05, _ = est.holder_seminorm(geom, u, 0.5)
    assert 0.8 <= v05 <= 1.8
    geom256 = make_geometry("torus", 0.5, 256)
    u256 = geom256.dist_to_divisor() ** 0.5
    v07_128, _ = est.holder_seminorm(geom, u, 0.7)
    v07_256, _ = est.holder_seminorm(geom256, u256, 0.7)
    # the closest sampled pairs halve in distance, so the alpha = 0.7 quotient
    # of a 0.5-Hoelder profile grows by ~2^0.2
    assert v07_256 > 1.10 * v07_128


def test_holder_monotone_in_region_and_subadditive():
    geom = make_geometry("torus", 0.5, 64)
    rng = np.random.default_rng(3)
    u = rng.standard_normal(geom.shape)
    v = rng.standard_normal(geom.shape)
    d = geom.dist_to_divisor()
    small = d >= 0.3
    big = d >= 0.15
    vs, _ = est.holder_seminorm(geom, u, 0.5, region=small)
    vb, _ = est.holder_seminorm(geom, u, 0.5, region=big)
    assert vs <= vb + 1e-12
    su, _ = est.holder_seminorm(geom, u, 0.5)
    sv, _ = est.holder_seminorm(geom, v, 0.5)
    suv, _ = est.holder_seminorm(geom, u + v, 0.5)
    assert suv <= su + sv + 1e-12


def test_holder_alpha_validation():
    geom = make_geometry("torus", 0.5, 32)
    with pytest.raises(est.EstimateFailure):
        est.holder_seminorm(geom, np.zeros(geom.shape), 1.5)
    with pytest.raises(est.EstimateFailure):
        est.cone_holder_report(geom, np.zeros(geom.shape), 2.5)


def test_cone_holder_model_potential_stable():
    # the model cone potential |s|^{2 beta}/beta^2 is smooth in its own cone
    # chart: the report is finite and refinement-stable at alpha = 0.5
    vals = {}
    for n in (128, 256):
        geom = make_geometry("torus", 0.5, n)
        fieldv = geom.section_sq ** geom.beta / geom.beta ** 2
        vals[n], rows = est.cone_holder_report(geom, fieldv, 0.5)
        assert rows
    assert vals[256] <= 1.5 * vals[128] + 1e-9


def test_cone_holder_football_exact():
    geom = make_geometry("football", 0.75, 1024, rho_max=12.0)
    from conemaflow.geometry import football_exact_potential
    phi0 = football_exact_potential(geom)
    chart = est.ConeChart(0.75, annuli=(0.05, 0.1, 0.2))
    val, rows = est.cone_holder_report(geom, phi0, 0.5 * min(1.0, 1 / 0.75 - 1), chart=chart)
    assert np.isfinite(val) and val > 0.0


# ---------------------------------------------------------------------------
# barrier, uniqueness, curvature
# ---------------------------------------------------------------------------

def test_barrier(family):
    rec = est.barrier_check(family, t_probe=(1e-3, 1e-2))
    assert rec.verdict, rec.rows[:4]
    # at the smallest probe time the barrier sits below the flow by o(1)
    margins = [r[3] for r in rec.rows]
    assert min(margins) >= -rec.tolerance


def test_jeffres_identical_trajectories(family):
    t1 = family.member(0.1, 5)
    rec = est.jeffres_uniqueness_diag(family.geom, t1, t1, a=0.01, q=0.5,
                                      K=0.0, eta=0.05, tol_unique=1e-12)
    assert rec.verdict
    assert rec.measured == 0.0
    # with a > 0 the perturbed maximum sits at the section-norm maximum,
    # far from the divisor
    assert all(d >= 0.05 for _, _, d in rec.rows)


def test_jeffres_a_zero_plain_difference(family):
    t1 = family.member(0.1, 3)
    t2 = family.member(0.1, 5)
    rec = est.jeffres_uniqueness_diag(family.geom, t1, t2, a=0.0, q=0.5,
                                      K=0.0, eta=0.05, tol_unique=1.0)
    plain = max(float(np.max(np.abs(a - b)))
                for ta, a in zip(t1.times, t1.fields) if ta >= 0.05
                for tb, b in zip(t2.times, t2.fields) if tb == ta)
    assert rec.measured == pytest.approx(plain)


def test_curvature_flat_stationary():
    geom = make_geometry("torus", 1.0, 64)
    s, K = est.curvature_proxies(geom, np.ones(geom.shape))
    assert np.max(np.abs(s)) == 0.0
    assert np.max(np.abs(K)) == 0.0


def test_curvature_football_oracle():
    # the exact cone metric has constant curvature 2*beta; the round
    # background has curvature 2 (both verified symbolically pre-build)
    for beta in (0.5, 0.75):
        geom = make_geometry("football", beta, 1024, rho_max=10.0)
        dens = football_exact_density(geom)
        _, K = est.curvature_proxies(geom, dens)
        interior = slice(5, -5)
        assert np.max(np.abs(K[interior] - 2.0 * beta)) < 1e-5
        _, K0 = est.curvature_proxies(geom, np.ones(geom.shape))
        assert np.max(np.abs(K0[interior] - 2.0)) < 1e-6


def test_local_curvature_scaling(family):
    rec = est.local_curvature_check(family, eta=0.05, annuli=(0.125, 0.25))
    assert rec.verdict, rec.envelope


def test_report_assembly_deterministic(family):
    recs = [est.uniform_linf_check(family), est.det_ratio_check(family)]
    r1 = est.assemble_report(recs).to_json()
    recs2 = [est.uniform_linf_check(family), est.det_ratio_check(family)]
    r2 = est.assemble_report(recs2).to_json()
    assert r1 == r2
