import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrbs.core_model import (
    BatteryModel,
    BatteryState,
    CoupledInductorParams,
    GroupMode,
    ModuleRole,
    StringConfig,
    battery_step,
    default_string,
    effective_inductances,
    split_branch_currents,
    string_output_voltage,
)
from mrbs.errors import LengthMismatch, NonPositiveDifferentialInductance, ValidationError

V_TABLE = [22.7, 22.7, 22.4, 22.4, 22.4]
currents = st.floats(-500, 500, allow_nan=False)


def test_symmetric_coupled_inductor():
    l_cm, l_dm = effective_inductances(CoupledInductorParams(25e-6, 25e-6, 25e-6))
    assert l_cm == 0.0
    assert l_dm == pytest.approx(100e-6, rel=1e-15)


def test_loosely_coupled_inductor():
    l_cm, l_dm = effective_inductances(CoupledInductorParams(30e-6, 30e-6, 20e-6))
    assert l_cm == pytest.approx(5e-6)
    assert l_dm == pytest.approx(100e-6)


def test_non_positive_differential_inductance():
    with pytest.raises(NonPositiveDifferentialInductance):
        effective_inductances(CoupledInductorParams(25e-6, 25e-6, 25e-6, delta_l=-100e-6))


@given(st.floats(1e-7, 1e-2))
def test_tight_coupling_gives_four_times_self(l):
    l_cm, l_dm = effective_inductances(CoupledInductorParams(l, l, l))
    assert l_cm == 0.0
    assert l_dm == pytest.approx(4 * l, rel=1e-12)


@pytest.mark.parametrize(
    "kw, field",
    [
        ({"l1": 0.0}, "inductor.l1"),
        ({"m12": 30e-6}, "inductor.m12"),
        ({"m21": 20e-6}, "inductor.m21"),
        ({"esr": -1.0}, "inductor.esr"),
    ],
)
def test_inductor_validation(kw, field):
    with pytest.raises(ValidationError) as exc:
        CoupledInductorParams(**kw)
    assert field in [p for p, _ in exc.value.problems]


@pytest.mark.parametrize(
    "i_out, i_circ, expected",
    [(10.0, 0.0, (5.0, 5.0)), (10.0, 2.0, (7.0, 3.0)), (0.0, 3.0, (3.0, -3.0))],
)
def test_split_branch_currents(i_out, i_circ, expected):
    assert split_branch_currents(i_out, i_circ, 0.5) == pytest.approx(expected)


@given(currents, currents)
def test_split_sums_to_output(i_out, i_circ):
    i1, i2 = split_branch_currents(i_out, i_circ, 0.5)
    assert i1 + i2 == pytest.approx(i_out, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize(
    "flags, expected",
    [([1, 1, 0, 0, 0], 45.4), ([0, 0, 0, 0, 0], 0.0), ([1, 1, 1, 1, 1], 112.6)],
)
def test_string_output_voltage(flags, expected):
    assert string_output_voltage(flags, V_TABLE) == pytest.approx(expected)


def test_string_output_voltage_length_mismatch():
    with pytest.raises(LengthMismatch):
        string_output_voltage([1, 0], V_TABLE)


volts = st.lists(st.floats(0.1, 60), min_size=5, max_size=5)
flags = st.lists(st.integers(0, 1), min_size=5, max_size=5)


@given(flags, volts, volts, st.floats(-3, 3))
def test_output_voltage_linear_in_vb(s, a, b, k):
    combo = [x + k * y for x, y in zip(a, b)]
    lhs = string_output_voltage(s, combo)
    rhs = string_output_voltage(s, a) + k * string_output_voltage(s, b)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


@given(flags, volts, st.integers(0, 4))
def test_adding_series_module_never_lowers_output(s, v, k):
    more = list(s)
    more[k] = 1
    assert string_output_voltage(more, v) >= string_output_voltage(s, v)


def test_battery_step_zero_current():
    m = BatteryModel()
    s = battery_step(BatteryState(0.5), m, 0.0, 10.0)
    assert s.soc == 0.5 and not s.saturated


def test_battery_step_full_discharge_clamps():
    m = BatteryModel(capacity=5.0)
    s = battery_step(BatteryState(0.5), m, -5.0, 3600.0)
    assert s.soc == 0.0 and s.saturated


def test_battery_step_charge():
    m = BatteryModel(capacity=5.0)
    s = battery_step(BatteryState(0.5), m, 5.0, 360.0)
    assert s.soc == pytest.approx(0.6)


@given(st.floats(0.0, 1.0), st.floats(-50, 50), st.floats(1e-6, 10.0), st.floats(0.5, 100))
def test_battery_step_conserves_charge(soc, i_b, dt, cap):
    m = BatteryModel(capacity=cap)
    s = battery_step(BatteryState(soc), m, i_b, dt)
    if not s.saturated:
        assert (s.soc - soc) * cap * 3600.0 == pytest.approx(i_b * dt, rel=1e-6, abs=1e-9)
    assert 0.0 <= s.soc <= 1.0
    assert s.v_terminal == pytest.approx(m.ocv(s.soc) + i_b * m.r_internal)


def test_saturation_flag_is_sticky():
    m = BatteryModel(capacity=1.0)
    s = battery_step(BatteryState(0.99), m, 100.0, 3600.0)
    s = battery_step(s, m, -0.1, 1.0)
    assert s.saturated


def test_ocv_curve_defaults_and_inverse():
    m = BatteryModel()
    assert m.ocv(0.0) == 22.0
    assert m.ocv(1.0) == 23.0
    assert m.ocv(0.6) == pytest.approx(22.5)
    assert m.soc_for_ocv(22.7) == pytest.approx(0.76)


@pytest.mark.parametrize(
    "kw, field",
    [
        ({"capacity": 0}, "battery.capacity"),
        ({"r_internal": -1e-3}, "battery.r_internal"),
        ({"soc_init": 1.5}, "battery.soc_init"),
        ({"ocv_curve": ((0.2, 23.0), (1.0, 22.0))}, "battery.ocv_curve"),
    ],
)
def test_battery_validation(kw, field):
    with pytest.raises(ValidationError) as exc:
        BatteryModel(**kw)
    assert field in [p for p, _ in exc.value.problems]


def test_default_string_layout():
    cfg = default_string()
    assert cfg.n_modules == 5
    assert cfg.n_energy == 2
    assert [b.ocv(b.soc_init) for b in cfg.batteries] == pytest.approx(V_TABLE)
    assert cfg.r_eq(1) == pytest.approx(4e-3 + 0.02 + 0.005)


def test_string_config_reports_every_problem():
    b = BatteryModel()
    modules = [(b, ModuleRole.POWER), (b, ModuleRole.ENERGY), (b, ModuleRole.POWER)]
    with pytest.raises(ValidationError) as exc:
        StringConfig(modules=modules, inductors=[CoupledInductorParams()], alpha=1.5)
    paths = [p for p, _ in exc.value.problems]
    assert "inductors" in paths and "alpha" in paths and "modules" in paths


def test_group_mode_codes_round_trip():
    for m in GroupMode:
        assert GroupMode.from_code(m.code) is m
    assert len({m.code for m in GroupMode}) == 5
