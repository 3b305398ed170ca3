import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from selfadapt.domain import ActionKind, AdaptationAction
from selfadapt.world_model import (
    StateDistribution,
    WMQuery,
    WorldModel,
    WorldModelError,
    erlang_c,
    mmc_response_time,
)

from oracles import erlang_c_factorial, response_oracle


@pytest.mark.parametrize("c", [1, 2, 3, 5, 8])
@pytest.mark.parametrize("rho", [0.05, 0.3, 0.6, 0.8, 0.95, 0.999])
def test_erlang_c_matches_factorial_form(c, rho):
    a = rho * c
    assert erlang_c(c, a) == pytest.approx(erlang_c_factorial(c, a), rel=1e-12)


def test_single_server_reduces_to_mm1():
    lam, s = 10.0, 0.06
    assert mmc_response_time(lam, s, 1) == pytest.approx(s / (1 - lam * s))


def test_zero_arrivals_give_bare_service_time():
    assert erlang_c(3, 0.0) == 0.0
    assert mmc_response_time(0.0, 0.06, 2) == 0.06


def test_unstable_queue():
    assert erlang_c(2, 2.0) == 1.0
    assert mmc_response_time(40.0, 0.06, 2) == math.inf


@given(lam=st.floats(0.1, 45.0), c=st.integers(1, 3), d1=st.floats(0, 1), d2=st.floats(0, 1))
def test_prediction_monotone_in_servers_and_dimmer(lam, c, d1, d2):
    wm = WorldModel()
    lo, hi = sorted((d1, d2))
    s_lo, s_hi = wm.service_demand(lo), wm.service_demand(hi)
    assert mmc_response_time(lam, s_lo, c) <= mmc_response_time(lam, s_hi, c)
    if c < 3:
        assert mmc_response_time(lam, s_hi, c + 1) <= mmc_response_time(lam, s_hi, c)


def test_monotonicity_grid_through_simulate(make_snap):
    wm = WorldModel()
    for lam in (5.0, 15.0, 25.0, 40.0):
        prev_servers = math.inf
        for active in (1, 2, 3):
            d = wm.simulate(WMQuery(AdaptationAction.no_op(), make_snap(rate=lam, active=active)))
            assert d.mean_response_time <= prev_servers
            prev_servers = d.mean_response_time
        prev_dimmer = 0.0
        for dim in (0.0, 0.25, 0.5, 0.75, 1.0):
            d = wm.simulate(WMQuery(AdaptationAction.set_dimmer(dim), make_snap(rate=lam, active=3)))
            assert d.mean_response_time >= prev_dimmer
            prev_dimmer = d.mean_response_time


def test_simulate_matches_oracle(make_snap):
    wm = WorldModel()
    d = wm.simulate(WMQuery(AdaptationAction.no_op(), make_snap(rate=20.0, active=2, dimmer=0.5)))
    assert d.mean_response_time == pytest.approx(response_oracle(20.0, 0.05, 2))
    assert d.mean_utilization == pytest.approx(20.0 * 0.05 / 2)
    assert not d.saturated


def test_saturation_is_reported(make_snap):
    d = WorldModel().simulate(WMQuery(AdaptationAction.no_op(), make_snap(rate=60.0, active=2)))
    assert d.saturated and d.mean_response_time == 5.0 and d.mean_utilization == 1.0


def test_add_server_waits_for_boot(make_snap):
    wm = WorldModel(boot_delay=60.0)
    s = make_snap(rate=20.0, active=1)
    short = wm.simulate(WMQuery(AdaptationAction(ActionKind.ADD_SERVER), s, horizon=30.0))
    long = wm.simulate(WMQuery(AdaptationAction(ActionKind.ADD_SERVER), s, horizon=120.0))
    assert (short.servers, long.servers) == (1, 2)
    assert long.mean_response_time < short.mean_response_time


def test_add_server_with_dimmer_restored_stays_under_sla(make_snap):
    # two servers during a 32/s spike with the dimmer at 0.7 (0.05 s mandatory, 0.03 s optional):
    # a third server lets full content come back well inside the 0.75 s bound
    wm = WorldModel(mandatory_service_time=0.05, optional_service_time=0.03)
    s = make_snap(rate=32.0, active=2, dimmer=0.7, util=0.95)
    now = wm.simulate(WMQuery(AdaptationAction.no_op(), s))
    restored = wm.simulate(WMQuery(AdaptationAction(ActionKind.ADD_SERVER), make_snap(rate=32.0, active=2, dimmer=1.0)))
    assert now.saturated
    assert restored.servers == 3 and restored.dimmer == 1.0
    assert restored.mean_response_time == pytest.approx(response_oracle(32.0, 0.08, 3))
    assert restored.mean_response_time < 0.75


def test_update_moves_bias_by_smoothing(make_snap):
    wm = WorldModel(smoothing=0.5)
    before = make_snap(t=10.0, rate=10.0, active=1, dimmer=0.0)
    pred = mmc_response_time(10.0, 0.04, 1)
    after = make_snap(t=20.0, rt=pred + 0.1, rate=10.0, active=1, dimmer=0.0, util=0.4)
    r = wm.update(before, AdaptationAction.no_op(), after)
    assert r == pytest.approx(0.1)
    assert wm.calibration.rt_bias == pytest.approx(0.05)
    assert wm.calibration.rt_var == pytest.approx(0.5 * 0.5 * 0.01)
    d = wm.simulate(WMQuery(AdaptationAction.no_op(), after))
    assert d.mean_response_time == pytest.approx(pred + 0.05)


def test_update_clips_large_residuals(make_snap):
    wm = WorldModel(smoothing=1.0, residual_clip=0.25)
    before = make_snap(t=10.0, rate=10.0, active=1)
    after = make_snap(t=20.0, rt=30.0, rate=10.0, active=1)
    assert wm.update(before, AdaptationAction.no_op(), after) == 0.25


def test_update_skips_uninformative_windows(make_snap):
    wm = WorldModel()
    assert wm.update(make_snap(t=10.0), AdaptationAction.no_op(), make_snap(t=20.0, requests=0)) is None
    assert wm.update(make_snap(t=10.0, rate=90.0, active=1), AdaptationAction.no_op(), make_snap(t=20.0, rate=90.0)) is None
    with pytest.raises(WorldModelError):
        wm.update(make_snap(t=20.0), AdaptationAction.no_op(), make_snap(t=10.0))


def test_distribution_helpers():
    d = StateDistribution(0.5, 0.1, 0.5, 0.01, 2, 1.0, 10.0)
    assert d.prob_rt_exceeds(0.5) == pytest.approx(0.5)
    assert d.prob_rt_exceeds(0.5 + 1.96 * 0.1) == pytest.approx(0.025, abs=1e-3)
    assert d.interval() == pytest.approx((0.5 - 0.196, 0.5 + 0.196))
    point = StateDistribution(0.5, 0.0, 0.5, 0.0, 2, 1.0, 10.0)
    assert point.prob_rt_exceeds(0.4) == 1.0 and point.prob_rt_exceeds(0.6) == 0.0


def test_validation():
    with pytest.raises(WorldModelError):
        WorldModel(smoothing=0)
    with pytest.raises(WorldModelError):
        StateDistribution(0.5, -1.0, 0.5, 0.0, 1, 1.0, 1.0)
    with pytest.raises(WorldModelError):
        WMQuery(AdaptationAction.no_op(), None, horizon=0)


def test_query_and_model_roundtrip(make_snap):
    q = WMQuery(AdaptationAction.set_dimmer(0.4), make_snap(), 90.0, 12.0)
    assert WMQuery.from_dict(q.to_dict()) == q
    wm = WorldModel(smoothing=0.3)
    wm.update(make_snap(t=10.0), AdaptationAction.no_op(), make_snap(t=20.0, rt=0.4))
    back = WorldModel.loads(wm.dumps())
    assert back.calibration == wm.calibration and back.smoothing == 0.3


def test_simulate_has_no_side_effects_on_calibration(make_snap):
    wm = WorldModel()
    before = wm.dumps()
    for _ in range(5):
        wm.simulate(WMQuery(AdaptationAction.no_op(), make_snap()))
    assert wm.dumps() == before and wm.simulations == 5


def test_unbiased_observations_keep_bias_near_zero(make_snap):
    wm = WorldModel()
    lam, active, dim = 20.0, 2, 1.0
    pred = mmc_response_time(lam, wm.service_demand(dim), active)
    util = lam * wm.service_demand(dim) / active
    prev = make_snap(t=10.0, rate=lam, active=active, dimmer=dim, util=util)
    for k in range(2, 60):
        obs = make_snap(t=10.0 * k, rt=pred, rate=lam, active=active, dimmer=dim, util=util)
        wm.update(prev, AdaptationAction.no_op(), obs)
        prev = obs
    assert abs(wm.calibration.rt_bias) < 1e-9 and abs(wm.calibration.util_bias) < 1e-9


def test_systematic_bias_pulls_prediction_monotonically(make_snap):
    wm = WorldModel()
    lam = 20.0
    pred = mmc_response_time(lam, wm.service_demand(1.0), 2)
    prev = make_snap(t=10.0, rate=lam, active=2)
    means = [wm.simulate(WMQuery(AdaptationAction.no_op(), prev)).mean_response_time]
    for k in range(2, 40):
        obs = make_snap(t=10.0 * k, rt=pred + 0.05, rate=lam, active=2)
        wm.update(prev, AdaptationAction.no_op(), obs)
        means.append(wm.simulate(WMQuery(AdaptationAction.no_op(), obs)).mean_response_time)
        prev = obs
    assert all(b > a for a, b in zip(means, means[1:]))
    assert means[-1] < pred + 0.05 and means[-1] == pytest.approx(pred + 0.05, abs=0.002)
