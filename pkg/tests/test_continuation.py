import numpy as np
import pytest

from conemaflow import continuation as cont
from conemaflow import flow
from conemaflow.geometry import make_geometry, resolve_delta
from conemaflow.initial_data import make_test_potential


@pytest.fixture(scope="module")
def small_family():
    geom = make_geometry("torus", 0.5, 64)
    data = make_test_potential(geom, "cone_bump", amplitude=0.01, radius=0.35)
    delta, _ = resolve_delta(geom, [0.2, 0.1, 0.05], 0.1)
    return cont.run_family(
        geom, data, flow.zero_forcing(), [0.2, 0.1, 0.05], [3, 4, 5],
        T=0.2, snapshot_times=[1e-3, 1e-2, 0.05, 0.1, 0.2], delta=delta,
        dt_init=1e-5, dt_max=5e-3)


def test_family_ordering_validation():
    geom = make_geometry("torus", 0.5, 32)
    data = make_test_potential(geom, "cone_bump", amplitude=0.01)
    with pytest.raises(cont.ContinuationError, match="decreasing"):
        cont.run_family(geom, data, flow.zero_forcing(), [0.1, 0.2], [3, 4, 5],
                        T=0.05, snapshot_times=[0.05], delta=0.01)
    with pytest.raises(cont.ContinuationError, match="increasing"):
        cont.run_family(geom, data, flow.zero_forcing(), [0.2, 0.1], [5, 3, 4],
                        T=0.05, snapshot_times=[0.05], delta=0.01)


def test_contraction_bound(small_family):
    # zero forcing: K = 0 and the measured pair distances must stay within
    # (1 + tol) of the initial mollification gaps
    for eps in small_family.eps_list:
        proxy, table = cont.j_limit(small_family, eps)
        assert table.verdict
        for j, l, measured, bound in table.rows:
            assert measured <= bound


def test_j_limit_proxy_is_largest_j(small_family):
    proxy, _ = cont.j_limit(small_family, 0.1)
    assert proxy is small_family.member(0.1, 5)


def test_eps_monotonicity(small_family):
    proxy, report = cont.eps_limit(small_family)
    assert report.verdict, report.rows
    for e_small, e_big, t, margin in report.rows:
        assert margin >= -report.tol_mono
    assert proxy is small_family.member(0.05, 5)


def test_eps_annulus_c2_decay(small_family):
    _, report = cont.eps_limit(small_family)
    vals = [v for _, v in report.annulus_rows]
    assert vals[1] <= vals[0] * 1.1


def test_initial_continuity(small_family):
    proxy, _ = cont.eps_limit(small_family)
    table = cont.initial_continuity(proxy, small_family.phi0, decades_factor=0.5)
    assert len(table.rows) >= 3
    ts = [t for t, _ in table.rows]
    assert 1e-3 in ts and 1e-2 in ts


def test_limit_consistency_truncated_family(small_family):
    # dropping the smallest eps changes the limit proxy by no more than the
    # last eps-increment's measured member gap
    jmax = small_family.j_list[-1]
    full = small_family.member(0.05, jmax)
    trunc = small_family.member(0.1, jmax)
    t_end = small_family.snapshot_times[-1]
    change = float(np.max(np.abs(full.field_at(t_end) - trunc.field_at(t_end))))
    increment_gap = max(
        float(np.max(np.abs(full.field_at(t) - trunc.field_at(t))))
        for t in small_family.snapshot_times)
    assert change <= increment_gap * (1.0 + 1e-12)


def test_identical_smooth_family_degenerate():
    # smooth data mollified at large scales barely changes: all pair distances
    # collapse toward zero and the contraction holds with slack
    geom = make_geometry("torus", 1.0, 128)
    x = np.arange(128) / 128
    smooth = 0.001 * np.cos(2 * np.pi * x)[:, None] * np.ones(128)
    from conemaflow.initial_data import InitialData
    dens = 1.0 + geom.lap(smooth)
    data = InitialData(smooth, dens, 99.0, 1.0, "smooth", {})
    fam = cont.run_family(geom, data, flow.zero_forcing(), [0.3, 0.2, 0.1],
                          [5, 6, 7], T=0.05, snapshot_times=[0.05],
                          delta=0.0, dt_init=1e-4, dt_max=5e-3)
    _, table = cont.j_limit(fam, 0.2)
    for j, l, measured, bound in table.rows:
        assert measured <= max(bound, 1e-10)
    # beta = 1: eps plays no role, members at different eps coincide
    t_end = 0.05
    d = np.max(np.abs(fam.member(0.3, 7).field_at(t_end)
                      - fam.member(0.1, 7).field_at(t_end)))
    assert d < 1e-12


def test_horizon_enforced():
    geom = make_geometry("torus", 0.5, 32)
    data = make_test_potential(geom, "cone_bump", amplitude=0.01)
    with pytest.raises(cont.ContinuationError, match="horizon"):
        cont.run_family(geom, data, flow.zero_forcing(), [0.2, 0.1, 0.05],
                        [3, 4, 5], T=50.0, snapshot_times=[50.0], delta=0.0125)
