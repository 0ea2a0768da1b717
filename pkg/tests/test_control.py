import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrbs.control import (
    CircRefMode,
    CircRefPolicy,
    Controller,
    ControllerConfig,
    EnergyCapPolicy,
    PIGains,
    Reference,
    apply_allowed,
    circ_reference,
    control_step,
    energy_cap_reference,
    feedforward_md,
    pi_update,
    schedule_group_modes,
)
from mrbs.core_model import GroupMode, default_string
from mrbs.dynamics import Measurements, run_open_loop
from mrbs.errors import DegenerateDenominator, DemandExceedsCapability
from mrbs.modulation import ModulationCommand
from mrbs.scenario import config_from_dict, run_scenario


def test_pi_examples():
    g = PIGains(kp=0.5, ki=2.0)
    assert pi_update(g, 0.0, 0.0, 1e-3) == (0.0, 0.0)
    assert pi_update(PIGains(kp=1.0, ki=0.0), 0.0, 0.2, 1e-3)[0] == pytest.approx(0.2)
    integ = 0.0
    g = PIGains(kp=0.0, ki=10.0)
    for _ in range(100):
        u, integ = pi_update(g, integ, 1.0, 1e-3)
    assert u == pytest.approx(1.0)


def test_pi_gain_validation():
    with pytest.raises(ValueError):
        PIGains(kp=1, ki=-1)
    with pytest.raises(ValueError):
        PIGains(kp=1, ki=1, out_min=1, out_max=0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200), st.floats(0, 10), st.floats(0, 100))
def test_pi_anti_windup(errors, kp, ki):
    g = PIGains(kp=kp, ki=ki, out_min=-0.5, out_max=0.5)
    integ = 0.0
    for e in errors:
        u, integ = pi_update(g, integ, e, 1e-3)
        assert -0.5 <= u <= 0.5
        # the integrator only moves while the output is inside the clamp
        assert -0.5 - 1e-12 <= integ <= 0.5 + 1e-12


def test_feedforward_examples():
    assert feedforward_md(22.4, 22.4, 0.6) == 0.0
    assert feedforward_md(22.7, 22.4, 0.6) == pytest.approx(0.3 * 0.4 / 45.1, rel=1e-9)
    assert feedforward_md(22.7, 22.4, 0.6) == pytest.approx(0.0026608, rel=1e-4)
    assert feedforward_md(22.7, 22.4, 0.6, 5.0, 0.02) == pytest.approx(0.0017699, rel=1e-4)


def test_feedforward_degenerate():
    with pytest.raises(DegenerateDenominator):
        feedforward_md(0.0, 0.0, 0.5, 0.0, 0.0)


@given(st.floats(18, 26), st.floats(18, 26), st.floats(0, 0.95), st.floats(-20, 20), st.floats(0.0, 0.1))
def test_feedforward_sign(va, vb, m0, i, r):
    md = feedforward_md(va, vb, m0, i, r)
    drive = va - vb - i * r
    if m0 < 1 and abs(drive) > 1e-9:
        assert (md > 0) == (drive > 0)
    assert abs(md) <= 1 - m0 + 1e-12


def test_circ_reference_examples():
    assert circ_reference(CircRefPolicy(), 0.5, 0.4) == 0.0
    soc = CircRefPolicy(CircRefMode.SOC_BALANCE, k_soc=10.0)
    assert circ_reference(soc, 0.5, 0.4) == pytest.approx(1.0)
    both = CircRefPolicy(CircRefMode.SOC_PLUS_LOAD, k_soc=10.0, k_load=0.1)
    assert circ_reference(both, 0.5, 0.4, i_load=10.0) == pytest.approx(2.0)
    env = CircRefPolicy(CircRefMode.SOC_BALANCE, k_soc=10.0, envelope=True)
    assert circ_reference(env, 0.5, 0.4, t=0.005, omega=2 * math.pi * 50) == pytest.approx(1.0)


def test_energy_cap_reference_signs():
    cap = EnergyCapPolicy()
    assert energy_cap_reference(600.0, cap, n=2) == 0.0
    # light load: the energy modules have headroom, so power modules recharge
    assert energy_cap_reference(370.0, cap, n=2) > 0
    # heavy load: the energy modules would exceed their cap
    assert energy_cap_reference(2550.0 * 2 / 5, cap, n=2) < 0


def test_schedule_group_modes():
    cfg = default_string()
    low = schedule_group_modes(cfg, 30.0)
    assert GroupMode.BYPASS in low[0]
    assert {GroupMode.SERIES, GroupMode.PARALLEL} <= low[1]
    assert {GroupMode.PARALLEL, GroupMode.BOOST} <= low[2]
    assert low[3] == low[4] == frozenset({GroupMode.PARALLEL})
    zero = schedule_group_modes(cfg, 0.0)
    assert not any(GroupMode.SERIES in s for s in zero)
    full = schedule_group_modes(cfg, 105.0)
    assert all(GroupMode.SERIES in s for s in full)
    with pytest.raises(DemandExceedsCapability):
        schedule_group_modes(cfg, 500.0)


def test_apply_allowed_forces_bypass():
    allowed = [frozenset({GroupMode.BYPASS})] + [frozenset({GroupMode.PARALLEL})] * 2
    m0g, md2, forced = apply_allowed(allowed, [0.6] * 3, [0.0, 0.01, 0.02])
    assert forced == (True, False, False)
    assert md2.tolist() == [0.0, 0.0, 0.0]
    assert m0g.tolist() == [0.0, 0.0, 0.0]


def _meas(cfg, t=0.0, v_out=0.0, i_circ=None, period=5e-4):
    n = cfg.n_modules
    ocv = np.array([b.ocv(b.soc_init) for b in cfg.batteries])
    return Measurements(
        t=t, period=period, v_out=v_out, i_out=0.0, i_load=0.0,
        i_dis=np.zeros(n), v_b=ocv.copy(), p_b=np.zeros(n),
        soc=np.array([b.soc_init for b in cfg.batteries]),
        i_circ=np.zeros(n) if i_circ is None else np.asarray(i_circ), ocv=ocv,
    )


def test_zero_errors_give_feedforward_only():
    cfg = default_string()
    ctrl = Controller(cfg, ControllerConfig(), lambda t: Reference(50.0, 0.0))
    meas = _meas(cfg)
    cmd = control_step(ctrl, meas)
    a = abs(cmd.m0)
    assert a == pytest.approx(50.0 / meas.ocv.sum())
    for g in range(1, 5):
        assert cmd.md2[g] == pytest.approx(feedforward_md(meas.ocv[g - 1], meas.ocv[g], a, 0.0, cfg.r_eq(g)))


def test_matched_voltages_give_zero_md2():
    cfg = default_string(v_init=(22.5,) * 5)
    ctrl = Controller(cfg, ControllerConfig(), lambda t: Reference(50.0, 0.0))
    cmd = ctrl.update(_meas(cfg))
    assert cmd.md2 == (0.0,) * 5


def test_m0_rises_while_output_is_low():
    cfg = default_string()
    ctrl = Controller(cfg, ControllerConfig(), lambda t: Reference(50.0, 0.0))
    m0 = []
    for k in range(200):
        m0.append(ctrl.update(_meas(cfg, t=k * 5e-4, v_out=40.0)).m0)
    assert all(b >= a for a, b in zip(m0, m0[1:]))
    assert m0[-1] > m0[0]
    assert m0[-1] <= ControllerConfig().m0_max


def test_md2_respects_clamp():
    cfg = default_string()
    ctrl = Controller(cfg, ControllerConfig(), lambda t: Reference(100.0, 0.0))
    for k in range(100):
        cmd = ctrl.update(_meas(cfg, t=k * 5e-4, v_out=100.0, i_circ=[0, 80, -80, 80, -80]))
        a = abs(cmd.m0)
        assert all(abs(d) <= min(0.15, 1 - a) + 1e-12 for d in cmd.md2)


@pytest.mark.parametrize("target, m0", [(5.0, 0.6), (-3.0, 0.5), (2.0, 0.4)])
def test_feedforward_fixed_point_in_plant(target, m0):
    v = (22.7, 22.4) if target != 2.0 else (22.4, 22.7)
    cfg = default_string(v_init=v, n_energy=1, capacity=1e4)
    b = cfg.batteries
    md = feedforward_md(b[0].ocv(b[0].soc_init), b[1].ocv(b[1].soc_init), m0, target, cfg.r_eq(1))
    tr = run_open_loop(cfg, ModulationCommand(m0, (0.0, md)), 0.06)
    assert tr.periods["i_circ"][-20:, 1].mean() == pytest.approx(target, rel=0.02)


def test_zero_reference_with_equal_voltages():
    raw = {
        "modules": [{"role": "energy", "v_init": 22.5}] * 3,
        "scenario": {"duration": 0.1, "reference": [{"t": 0, "volts": 40}], "load": [{"t": 0, "r": 6.0}]},
    }
    cfg, sc, params = config_from_dict(raw)
    trace, metrics, _ = run_scenario(cfg, sc, params)
    tail = trace.t >= 0.06
    assert np.max(np.abs(trace.groups[tail, 1:, 0])) < 0.005 * cfg.i_out_rated
