import json

import numpy as np
import pytest
import yaml

from mrbs import cli
from mrbs.core_model import effective_inductances
from mrbs.dynamics import SimTrace, trace_columns
from mrbs.errors import ParseError, TripLimitExceeded, ValidationError
from mrbs.scenario import (
    DesignSpec,
    bundled_config,
    compare_report,
    config_from_dict,
    design_report,
    load_config,
    run_scenario,
)


def _raw(name="scenario2"):
    return yaml.safe_load(bundled_config(name).read_text())


def _write(tmp_path, raw, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


def _short(raw, duration=0.04):
    raw["scenario"]["duration"] = duration
    raw["scenario"]["reference"] = raw["scenario"]["reference"][:1]
    raw["scenario"]["load"] = raw["scenario"]["load"][:1]
    raw["expect"] = [{"metric": "energy_residual_rel", "max": 0.005}]
    return raw


def test_bundled_scenario1_matches_parameter_table():
    cfg, sc, params = load_config("scenario1")
    assert cfg.n_modules == 5 and cfg.n_energy == 2
    assert cfg.f_carrier == 2000.0
    assert all(effective_inductances(i) == pytest.approx((0.0, 100e-6)) for i in cfg.inductors)
    assert cfg.filter == pytest.approx((0.5e-3, 600e-6))
    assert [(s.t, s.r) for s in sc.load] == [(0.0, 6.0), (0.6, 2.0)]
    assert [(s.t, s.volts) for s in sc.reference] == [(0.0, 70.0), (0.3, 105.0)]
    assert sc.phases() == [(0.0, 0.3), (0.3, 0.6), (0.6, 0.9)]
    assert sc.controller.energy_cap is not None
    assert params.dt == 1e-6


def test_full_length_stretches_timeline():
    _, sc, _ = load_config("scenario1")
    full = sc.full_length()
    assert full.duration == pytest.approx(3.0)
    assert [p for p in full.breakpoints()] == pytest.approx([0.0, 1.0, 2.0, 3.0])


def test_empty_file_is_parse_error(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    with pytest.raises(ParseError):
        load_config(p)


def test_malformed_yaml_is_parse_error(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("modules: [\n")
    with pytest.raises(ParseError):
        load_config(p)


def test_missing_file_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_config(tmp_path / "nope.yaml")


def test_inductor_count_mismatch(tmp_path):
    raw = _raw()
    raw["inductors"] = raw["inductors"][:3]
    with pytest.raises(ValidationError) as exc:
        load_config(_write(tmp_path, raw))
    assert any(p == "inductors" for p, _ in exc.value.problems)


def test_every_problem_reported_with_paths():
    raw = _raw()
    raw["modules"][1]["capacity_ah"] = -1
    raw["inductors"][2]["m12"] = 1.0
    raw["string"]["alpha"] = "half"
    raw["scenario"]["load"][0]["t"] = 0.1
    raw["scenario"]["reference"][0]["waveform"] = "square"
    with pytest.raises(ValidationError) as exc:
        config_from_dict(raw)
    paths = [p for p, _ in exc.value.problems]
    for expected in (
        "modules[1].battery.capacity",
        "inductors[2].inductor.m12",
        "string.alpha",
        "scenario.load[0].t",
        "scenario.reference[0].waveform",
    ):
        assert expected in paths, paths


def test_defaults_fill_missing_sections():
    raw = {
        "modules": [{"role": "energy", "v_init": 22.7}] + [{"role": "power", "v_init": 22.4}] * 2,
        "scenario": {"duration": 0.1, "reference": [{"t": 0, "volts": 40}], "load": [{"t": 0, "r": 6}]},
    }
    cfg, sc, params = config_from_dict(raw)
    assert len(cfg.inductors) == 2
    assert cfg.r_ds_on == 1e-3 and cfg.alpha == 0.5
    assert sc.controller.energy_cap is None
    assert params.record_decimation == 20


def test_zero_duration_run():
    raw = _raw()
    raw["scenario"]["duration"] = 0.0
    cfg, sc, params = config_from_dict(raw)
    trace, metrics, manifest = run_scenario(cfg, sc, params)
    assert len(trace) == 0
    assert not metrics.defined and metrics.phases == []


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    cfg, sc, params = config_from_dict(_short(_raw(), 0.06))
    out = tmp_path_factory.mktemp("short")
    return (cfg, sc, params, out) + run_scenario(cfg, sc, params, out_dir=out, plots=True)


def test_outputs_written(short_run):
    cfg, sc, params, out, trace, metrics, manifest = short_run
    for name in ("trace.csv", "metrics.json", "manifest.json", "output.png", "modules.png", "circulating.png"):
        assert (out / name).exists(), name
    man = json.loads((out / "manifest.json").read_text())
    assert man["config_hash"] == manifest.config_hash and len(man["config_hash"]) == 64
    assert json.loads((out / "metrics.json").read_text())["phases"][0]["t1"] == pytest.approx(0.06)


def test_trace_file_round_trips(short_run):
    *_, out, trace, metrics, manifest = short_run
    back = SimTrace.from_csv(out / "trace.csv")
    assert np.array_equal(back.t, trace.t)
    assert np.array_equal(back.v_out, trace.v_out)
    assert np.array_equal(back.groups, trace.groups)


def test_metrics_match_energy_audit(short_run):
    cfg, sc, params, out, trace, metrics, manifest = short_run
    ph = metrics.phases[0]
    a = trace.audit
    delivered = (a["chemical"][-1] - a["chemical"][0]) - (a["battery_loss"][-1] - a["battery_loss"][0])
    from_powers = sum(ph.p_module) * (ph.t1 - ph.t0)
    assert from_powers == pytest.approx(delivered, rel=1e-3)
    assert sum(ph.energy_module) == pytest.approx(delivered, rel=1e-3)
    assert 0 < metrics.efficiency <= 1


def test_config_hash_tracks_inputs():
    raw = _short(_raw())
    cfg, sc, params = config_from_dict(raw)
    from mrbs.scenario import config_hash

    h = config_hash(cfg, sc, params)
    raw["string"]["r_ds_on"] = 2e-3
    assert config_hash(*config_from_dict(raw)) != h
    assert config_hash(cfg, sc, params) == h


def test_engine_error_flushes_partial_trace(tmp_path):
    raw = _short(_raw())
    raw["sim"]["trip_current"] = 0.05
    raw["modules"][0]["v_init"] = 23.0
    cfg, sc, params = config_from_dict(raw)
    with pytest.raises(TripLimitExceeded):
        run_scenario(cfg, sc, params, out_dir=tmp_path)
    text = (tmp_path / "trace.csv").read_text()
    assert text.splitlines()[-1].startswith("# error,")


def test_design_report_lines():
    from mrbs.scenario import load_config

    cfg, _, _ = load_config("scenario1")
    rep = design_report(cfg, DesignSpec(v_b_max=23.0, md2=0.05, delta_i_diff=1.0, f_sw=10e3))
    lines = {ln.name: ln for ln in rep.lines}
    assert lines["conventional inductance for delta_i"].value == pytest.approx(230e-6, rel=1e-3)
    assert design_report(cfg, DesignSpec(md2=0.0)).lines[0].value == 0.0
    default = {ln.name: ln for ln in design_report(cfg).lines}
    lf = default["filter inductance minimum"]
    assert lf.value == pytest.approx(23.0 * 0.95 / (0.15 * 50 * 5 * 2000))
    assert lf.ok and default["output capacitance minimum"].ok
    assert "230" in design_report(cfg, DesignSpec(f_sw=10e3)).render().replace("0.00023", "230")


def test_compare_report():
    rep = compare_report()
    assert len(rep.table) == 51
    assert all(rep.verdicts.values())
    assert rep.table[-1][3] == pytest.approx(0.205, abs=1e-3)
    assert len(compare_report(rhos=[0.3]).table) == 2


def test_trace_columns_are_frozen():
    assert trace_columns(2) == [
        "t", "v_out", "i_out", "p_out", "v_ref",
        "i_b1", "v_b1", "p_b1", "soc1", "i_b2", "v_b2", "p_b2", "soc2",
        "i_circ0", "i_L1_0", "i_L2_0", "mode0", "i_circ1", "i_L1_1", "i_L2_1", "mode1",
    ]


# --- command line -----------------------------------------------------------


def test_cli_validate(capsys, tmp_path):
    assert cli.main(["validate", "scenario1"]) == 0
    assert "ok" in capsys.readouterr().out
    raw = _raw()
    raw["inductors"] = raw["inductors"][:3]
    assert cli.main(["validate", str(_write(tmp_path, raw))]) == 1
    assert "inductors" in capsys.readouterr().err
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert cli.main(["validate", str(empty)]) == 1


def test_cli_sim_and_assert(tmp_path, capsys):
    cfg = _write(tmp_path, _short(_raw()))
    out = tmp_path / "run"
    code = cli.main(["sim", str(cfg), "--out", str(out), "--assert", "--no-plots", "--csv-decimation", "50"])
    assert code == 0
    assert "PASS" in capsys.readouterr().out
    trace = SimTrace.from_csv(out / "trace.csv")
    assert np.allclose(np.diff(trace.t), 50e-6)
    raw = _short(_raw())
    raw["expect"] = [{"metric": "max_abs_icirc", "max": 0.0}]
    assert cli.main(["sim", str(_write(tmp_path, raw, "fail.yaml")), "--out", str(out), "--assert", "--no-plots"]) == 3


def test_cli_engine_error(tmp_path):
    raw = _short(_raw())
    raw["sim"]["trip_current"] = 0.05
    raw["modules"][0]["v_init"] = 23.0
    assert cli.main(["sim", str(_write(tmp_path, raw)), "--out", str(tmp_path / "r"), "--no-plots"]) == 2


def test_cli_rejects_coarse_dt(tmp_path):
    assert cli.main(["sim", "scenario2", "--dt", "1e-4", "--out", str(tmp_path)]) == 1


def test_cli_compare(tmp_path, capsys):
    assert cli.main(["compare", "--points", "5", "--out", str(tmp_path), "--assert"]) == 0
    assert (tmp_path / "compare.csv").read_text().splitlines()[0] == "rho,p_proposed,p_benchmark,core_ratio"
    assert (tmp_path / "compare.png").exists()
    assert cli.main(["compare", "--rho-max", "0.9"]) == 1


def test_cli_design(capsys, tmp_path):
    assert cli.main(["design", "scenario1", "--f-sw", "10000", "--out", str(tmp_path)]) == 0
    assert "0.00023" in capsys.readouterr().out
    assert json.loads((tmp_path / "design.json").read_text())["title"] == "design report"


def test_halving_dt_keeps_steady_state_metrics():
    raw = _raw()
    raw["scenario"]["duration"] = 0.2
    raw["scenario"]["reference"] = raw["scenario"]["reference"][:1]
    raw["sim"]["record_decimation"] = 100
    base = run_scenario(*config_from_dict(raw))[1].phases[0]
    raw["sim"]["dt"] = 0.5e-6
    raw["sim"]["record_decimation"] = 200
    fine = run_scenario(*config_from_dict(raw))[1].phases[0]
    assert fine.p_out_tail == pytest.approx(base.p_out_tail, rel=5e-3)
    assert np.allclose(fine.p_module_tail, base.p_module_tail, rtol=5e-3)
    assert fine.v_amp_tail == pytest.approx(base.v_amp_tail, rel=5e-3)
