"""Scenario definitions, configuration loading, metrics and reports."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .analysis import (
    CoreDesignParams,
    OperatingPoint,
    core_area_product,
    loss_sweep,
    magnetize_current_bound,
    min_diff_inductance,
    min_filter_inductance,
    min_output_capacitance,
    switching_losses,
)
from .control import (
    CircRefMode,
    CircRefPolicy,
    Controller,
    ControllerConfig,
    EnergyCapPolicy,
    PIGains,
    Reference,
)
from .core_model import (
    DEFAULT_OCV_CURVE,
    BatteryModel,
    CoupledInductorParams,
    ModuleRole,
    StringConfig,
    SwitchTimings,
    effective_inductances,
)
from .dynamics import SimParams, SimTrace, energy_residual, run
from .errors import MRBSError, ParseError, ValidationError

WAVEFORMS = ("sinusoid", "dc")
BUNDLED = ("scenario1", "scenario2")


@dataclass(frozen=True)
class RefStep:
    t: float
    volts: float
    waveform: str = "sinusoid"
    freq: float = 50.0

    def reference(self) -> Reference:
        return Reference(self.volts, 0.0 if self.waveform == "dc" else self.freq)


@dataclass(frozen=True)
class LoadStep:
    t: float
    r: float
    l: float = 100e-6


def _pick(steps, t):
    cur = steps[0]
    for s in steps:
        if t >= s.t - 1e-12:
            cur = s
        else:
            break
    return cur


@dataclass(frozen=True)
class Scenario:
    """Reference and load schedules plus the controller that runs them.

    ``full_length_scale`` stretches every breakpoint (and the duration) when
    the full-length timeline is requested.
    """

    name: str
    duration: float
    reference: tuple
    load: tuple
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    tail_fraction: float = 0.4
    full_length_scale: float = 1.0
    expect: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "reference", tuple(self.reference))
        object.__setattr__(self, "load", tuple(self.load))
        object.__setattr__(self, "expect", tuple(self.expect))
        problems = self.problems()
        if problems:
            raise ValidationError(problems)

    def problems(self, prefix="scenario"):
        out = []
        if not self.duration >= 0:
            out.append((f"{prefix}.duration", "must be >= 0"))
        for key, steps in (("reference", self.reference), ("load", self.load)):
            if not steps:
                out.append((f"{prefix}.{key}", "needs at least one entry"))
                continue
            if steps[0].t != 0:
                out.append((f"{prefix}.{key}[0].t", "first entry must start at t=0"))
            for i in range(1, len(steps)):
                if not steps[i].t > steps[i - 1].t:
                    out.append((f"{prefix}.{key}[{i}].t", "entries must be strictly time-sorted"))
        for i, s in enumerate(self.reference):
            if s.waveform not in WAVEFORMS:
                out.append((f"{prefix}.reference[{i}].waveform", f"must be one of {WAVEFORMS}"))
            if s.waveform == "sinusoid" and not s.freq > 0:
                out.append((f"{prefix}.reference[{i}].freq", "must be > 0"))
        for i, s in enumerate(self.load):
            if not (s.r > 0 and s.l > 0):
                out.append((f"{prefix}.load[{i}]", "r and l must be > 0"))
        if not 0 < self.tail_fraction <= 1:
            out.append((f"{prefix}.tail_fraction", "must lie in (0, 1]"))
        if not self.full_length_scale > 0:
            out.append((f"{prefix}.full_length_scale", "must be > 0"))
        return out

    def reference_at(self, t: float) -> Reference:
        return _pick(self.reference, t).reference()

    def v_ref(self, t: float) -> float:
        return self.reference_at(t).at(t)

    def load_at(self, t: float) -> tuple:
        s = _pick(self.load, t)
        return s.r, s.l

    def breakpoints(self) -> list:
        ts = sorted({s.t for s in self.reference} | {s.t for s in self.load} | {0.0})
        return [t for t in ts if t < self.duration] + [self.duration]

    def phases(self) -> list:
        b = self.breakpoints()
        return list(zip(b[:-1], b[1:]))

    def full_length(self) -> "Scenario":
        k = self.full_length_scale
        return replace(
            self,
            duration=self.duration * k,
            reference=tuple(replace(s, t=s.t * k) for s in self.reference),
            load=tuple(replace(s, t=s.t * k) for s in self.load),
            full_length_scale=1.0,
        )


PHASE_METRICS = ("p_module_tail", "p_spread_tail", "i_module_tail", "i_rms_tail", "p_out_tail", "v_amp_tail", "efficiency_tail")
RUN_METRICS = ("efficiency", "max_abs_icirc", "energy_residual_rel", "tracking_error_rms")


@dataclass(frozen=True)
class Expectation:
    """A check on the run metrics used by ``--assert``.

    ``phase`` and ``module`` are 0-based; ``module`` may be None for
    per-phase scalars.  The value passes if it lies within ``rel_tol`` of
    ``target`` (when given) and inside ``[lo, hi]``.
    """

    metric: str
    phase: int | None = None
    module: int | None = None
    target: float | None = None
    rel_tol: float = 0.0
    lo: float = -math.inf
    hi: float = math.inf
    label: str = ""

    def value(self, m: "SummaryMetrics") -> float:
        if self.metric in RUN_METRICS:
            return float(getattr(m, self.metric))
        v = getattr(m.phases[self.phase], self.metric)
        return float(v if self.module is None else v[self.module])

    def check(self, m: "SummaryMetrics") -> tuple:
        try:
            v = self.value(m)
        except (IndexError, TypeError):
            return False, math.nan
        ok = math.isfinite(v) and self.lo <= v <= self.hi
        if self.target is not None:
            ok = ok and abs(v - self.target) <= self.rel_tol * abs(self.target)
        return ok, v

    def describe(self) -> str:
        where = "" if self.phase is None else f"phase {self.phase}"
        if self.module is not None:
            where += f" module {self.module + 1}"
        bound = []
        if self.target is not None:
            bound.append(f"{self.target:g} +/- {100 * self.rel_tol:g}%")
        if self.lo > -math.inf:
            bound.append(f">= {self.lo:g}")
        if self.hi < math.inf:
            bound.append(f"<= {self.hi:g}")
        return " ".join(x for x in (self.label, self.metric, where.strip(), " and ".join(bound)) if x)


def check_expectations(scenario: "Scenario", metrics: "SummaryMetrics") -> list:
    """Evaluate every expectation; returns ``(expectation, ok, value)`` rows."""
    return [(e, *e.check(metrics)) for e in scenario.expect]


# --- configuration ----------------------------------------------------------


class _Reader:
    """Pulls typed fields out of nested mappings, collecting problems."""

    def __init__(self):
        self.problems = []

    def section(self, data, key, path):
        v = data.get(key, {}) if isinstance(data, dict) else {}
        if v is None:
            return {}
        if not isinstance(v, dict):
            self.problems.append((f"{path}{key}", "must be a mapping"))
            return {}
        return v

    def num(self, data, key, path, default):
        if not isinstance(data, dict) or key not in data or data[key] is None:
            return default
        v = data[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            try:
                v = float(v)
            except (TypeError, ValueError):
                self.problems.append((f"{path}{key}", f"expected a number, got {data[key]!r}"))
                return default
        v = float(v)
        if not math.isfinite(v):
            self.problems.append((f"{path}{key}", "must be finite"))
            return default
        return v

    def integer(self, data, key, path, default):
        v = self.num(data, key, path, default)
        if v is None:
            return None
        if v != int(v):
            self.problems.append((f"{path}{key}", "expected an integer"))
            return default
        return int(v)

    def flag(self, data, key, path, default):
        if not isinstance(data, dict) or key not in data:
            return default
        v = data[key]
        if not isinstance(v, bool):
            self.problems.append((f"{path}{key}", "expected true or false"))
            return default
        return v

    def text(self, data, key, path, default, choices=None):
        if not isinstance(data, dict) or key not in data:
            return default
        v = str(data[key])
        if choices and v not in choices:
            self.problems.append((f"{path}{key}", f"must be one of {tuple(choices)}"))
            return default
        return v

    def items(self, data, key, path):
        if not isinstance(data, dict) or data.get(key) is None:
            return None
        v = data[key]
        if not isinstance(v, list):
            self.problems.append((f"{path}{key}", "must be a list"))
            return None
        return v

    def build(self, cls, path, **kw):
        try:
            return cls(**kw)
        except ValidationError as exc:
            self.problems.extend((f"{path}{p}" if not p.startswith(path) else p, m) for p, m in exc.problems)
        except (TypeError, ValueError) as exc:
            self.problems.append((path.rstrip(".") or cls.__name__, str(exc)))
        return None


def _modules(rd: _Reader, raw) -> list:
    entries = rd.items(raw, "modules", "")
    if entries is None:
        rd.problems.append(("modules", "required list of module entries"))
        return []
    out = []
    for i, m in enumerate(entries):
        path = f"modules[{i}]."
        if not isinstance(m, dict):
            rd.problems.append((path.rstrip("."), "must be a mapping"))
            continue
        role = rd.text(m, "role", path, "power", choices=[r.value for r in ModuleRole])
        curve = m.get("ocv_curve", DEFAULT_OCV_CURVE)
        try:
            curve = tuple((float(s), float(v)) for s, v in curve)
        except (TypeError, ValueError):
            rd.problems.append((f"{path}ocv_curve", "expected a list of [soc, volts] pairs"))
            curve = DEFAULT_OCV_CURVE
        model = rd.build(
            BatteryModel,
            path,
            capacity=rd.num(m, "capacity_ah", path, 5.0),
            r_internal=rd.num(m, "r_internal", path, 0.010),
            ocv_curve=curve,
            soc_init=0.5,
        )
        if model is None:
            continue
        if "v_init" in m and "soc_init" in m:
            rd.problems.append((path.rstrip("."), "give either v_init or soc_init, not both"))
        soc = rd.num(m, "soc_init", path, None)
        v = rd.num(m, "v_init", path, None)
        if v is not None:
            lo, hi = model.ocv_curve[0][1], model.ocv_curve[-1][1]
            if not lo <= v <= hi:
                rd.problems.append((f"{path}v_init", f"{v} V outside the OCV curve range [{lo}, {hi}]"))
                continue
            soc = model.soc_for_ocv(v)
        model = rd.build(
            BatteryModel, path, capacity=model.capacity, r_internal=model.r_internal,
            ocv_curve=model.ocv_curve, soc_init=0.5 if soc is None else soc,
        )
        if model is not None:
            out.append((model, ModuleRole(role)))
    return out


def _inductors(rd: _Reader, raw, n: int) -> list:
    entries = rd.items(raw, "inductors", "")
    if entries is None:
        return [CoupledInductorParams() for _ in range(max(n - 1, 0))]
    out = []
    for i, e in enumerate(entries):
        path = f"inductors[{i}]."
        if not isinstance(e, dict):
            rd.problems.append((path.rstrip("."), "must be a mapping"))
            continue
        l1 = rd.num(e, "l1", path, 25e-6)
        ind = rd.build(
            CoupledInductorParams,
            path,
            l1=l1,
            l2=rd.num(e, "l2", path, l1),
            m12=rd.num(e, "m12", path, l1),
            m21=rd.num(e, "m21", path, None),
            delta_l=rd.num(e, "delta_l", path, 0.0),
            delta_r=rd.num(e, "delta_r", path, 0.0),
            esr=rd.num(e, "esr", path, 0.005),
        )
        if ind is not None:
            out.append(ind)
    return out


def _pi(rd, sec, key, base: PIGains) -> PIGains:
    path = f"control.{key}."
    d = rd.section(sec, key, "control.")
    g = rd.build(
        PIGains, path,
        kp=rd.num(d, "kp", path, base.kp), ki=rd.num(d, "ki", path, base.ki),
        out_min=rd.num(d, "min", path, base.out_min), out_max=rd.num(d, "max", path, base.out_max),
    )
    return g or base


def _controller(rd: _Reader, raw) -> ControllerConfig:
    sec = rd.section(raw, "control", "")
    base = ControllerConfig()
    pol = rd.section(sec, "policy", "control.")
    policy = rd.build(
        CircRefPolicy, "control.policy.",
        mode=CircRefMode(rd.text(pol, "mode", "control.policy.", "zero", [m.value for m in CircRefMode])),
        k_soc=rd.num(pol, "k_soc", "control.policy.", 0.0),
        k_load=rd.num(pol, "k_load", "control.policy.", 0.0),
        envelope=rd.flag(pol, "envelope", "control.policy.", False),
    )
    cap = None
    if isinstance(sec, dict) and sec.get("energy_cap") is not None:
        c = rd.section(sec, "energy_cap", "control.")
        p = "control.energy_cap."
        cap = rd.build(
            EnergyCapPolicy, p,
            p_energy_max=rd.num(c, "p_energy_max", p, 300.0),
            gain=rd.num(c, "gain", p, EnergyCapPolicy().gain),
            window=rd.num(c, "window", p, 0.02),
        )
    cc = ControllerConfig(
        pi_v=_pi(rd, sec, "pi_v", base.pi_v),
        pi_i=_pi(rd, sec, "pi_i", base.pi_i),
        m0_max=rd.num(sec, "m0_max", "control.", base.m0_max),
        md_max=rd.num(sec, "md_max", "control.", base.md_max),
        policy=policy or CircRefPolicy(),
        energy_cap=cap,
        i_ref_max=rd.num(sec, "i_ref_max", "control.", None),
        feedforward=rd.flag(sec, "feedforward", "control.", True),
    )
    if not 0 < cc.m0_max <= 1:
        rd.problems.append(("control.m0_max", "must lie in (0, 1]"))
    if not 0 <= cc.md_max <= 1:
        rd.problems.append(("control.md_max", "must lie in [0, 1]"))
    return cc


def _scenario(rd: _Reader, raw, cc: ControllerConfig, name: str):
    sec = rd.section(raw, "scenario", "")
    refs, loads = [], []
    for key, out in (("reference", refs), ("load", loads)):
        entries = rd.items(sec, key, "scenario.")
        if entries is None:
            rd.problems.append((f"scenario.{key}", "required list of schedule entries"))
            continue
        for i, e in enumerate(entries):
            path = f"scenario.{key}[{i}]."
            if not isinstance(e, dict):
                rd.problems.append((path.rstrip("."), "must be a mapping"))
                continue
            if key == "reference":
                out.append(RefStep(
                    t=rd.num(e, "t", path, 0.0),
                    volts=rd.num(e, "volts", path, 0.0),
                    waveform=rd.text(e, "waveform", path, "sinusoid", WAVEFORMS),
                    freq=rd.num(e, "freq", path, 50.0),
                ))
            else:
                out.append(LoadStep(t=rd.num(e, "t", path, 0.0), r=rd.num(e, "r", path, 6.0), l=rd.num(e, "l", path, 100e-6)))
    expect = []
    for i, e in enumerate(rd.items(raw, "expect", "") or []):
        path = f"expect[{i}]."
        if not isinstance(e, dict):
            rd.problems.append((path.rstrip("."), "must be a mapping"))
            continue
        metric = rd.text(e, "metric", path, None, PHASE_METRICS + RUN_METRICS)
        if metric is None:
            rd.problems.append((f"{path}metric", "required"))
            continue
        phase = rd.integer(e, "phase", path, None)
        if metric in PHASE_METRICS and phase is None:
            rd.problems.append((f"{path}phase", f"required for {metric}"))
        expect.append(Expectation(
            metric=metric, phase=phase, module=rd.integer(e, "module", path, None),
            target=rd.num(e, "target", path, None), rel_tol=rd.num(e, "rel_tol", path, 0.0),
            lo=rd.num(e, "min", path, -math.inf), hi=rd.num(e, "max", path, math.inf),
            label=str(e.get("label", "")),
        ))
    if not refs or not loads:
        return None
    return rd.build(
        Scenario, "",
        name=str(raw.get("name", name)),
        duration=rd.num(sec, "duration", "scenario.", 0.0),
        reference=refs, load=loads, controller=cc,
        tail_fraction=rd.num(sec, "tail_fraction", "scenario.", 0.4),
        full_length_scale=rd.num(sec, "full_length_scale", "scenario.", 1.0),
        expect=expect,
    )


def config_from_dict(raw: Any, name: str = "scenario") -> tuple:
    """Validate a parsed configuration mapping.

    Returns ``(StringConfig, Scenario, SimParams)``; raises
    :class:`ValidationError` listing every problem with its field path.
    """
    if not isinstance(raw, dict):
        raise ValidationError([("", "top level must be a mapping")])
    rd = _Reader()
    modules = _modules(rd, raw)
    inductors = _inductors(rd, raw, len(modules))
    s = rd.section(raw, "string", "")
    p = "string."
    st = rd.section(s, "switch_timings", p)
    timings = rd.build(
        SwitchTimings, "string.switch_timings.",
        **{k: rd.num(st, k, "string.switch_timings.", 20e-9) for k in ("t_ri", "t_fi", "t_rv", "t_fv")},
    )
    flt = rd.section(s, "filter", p)
    tg = rd.items(s, "transfer_groups", p)
    cc = _controller(rd, raw)
    scenario = _scenario(rd, raw, cc, name)
    first_load = scenario.load[0] if scenario else LoadStep(0.0, 6.0)
    cfg = None
    if modules and timings is not None:
        cfg = rd.build(
            StringConfig, "",
            modules=tuple(modules),
            inductors=tuple(inductors),
            alpha=rd.num(s, "alpha", p, 0.5),
            r_ds_on=rd.num(s, "r_ds_on", p, 1e-3),
            switch_timings=timings,
            f_carrier=rd.num(s, "f_carrier", p, 2000.0),
            load=(first_load.r, first_load.l),
            filter=(rd.num(flt, "l", "string.filter.", 0.5e-3), rd.num(flt, "c", "string.filter.", 600e-6)),
            i_out_rated=rd.num(s, "i_out_rated", p, 50.0),
            transfer_groups=None if tg is None else tuple(tg),
            k_dynamic=rd.num(s, "k_dynamic", p, 0.0),
            z_dyn=rd.num(s, "z_dyn", p, 0.0),
            dv_offset=rd.num(s, "dv_offset", p, 0.0),
        )
    sim = rd.section(raw, "sim", "")
    params = None
    try:
        params = SimParams(
            dt=rd.num(sim, "dt", "sim.", 1e-6),
            t_end=0.0,
            trip_current=rd.num(sim, "trip_current", "sim.", None),
            record_decimation=rd.integer(sim, "record_decimation", "sim.", 20),
        )
        if cfg is not None:
            params.check(cfg)
    except ValueError as exc:
        rd.problems.append(("sim", str(exc)))
    if rd.problems:
        raise ValidationError(rd.problems)
    return cfg, scenario, params


def load_config(path) -> tuple:
    """Read and validate a YAML configuration file.

    A bare bundled name (``scenario1``, ``scenario2``) resolves to the copy
    shipped with the package.
    """
    p = bundled_config(path) if str(path) in BUNDLED else Path(path)
    try:
        text = Path(p).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {p}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"{p}: {exc}") from exc
    if raw is None:
        raise ParseError(f"{p}: empty configuration")
    return config_from_dict(raw, name=Path(p).stem)


def bundled_config(name: str) -> Path:
    if name not in BUNDLED:
        raise ValueError(f"no bundled config named {name!r}")
    return Path(str(resources.files("mrbs") / "configs" / f"{name}.yaml"))


def config_hash(cfg: StringConfig, scenario: Scenario, params: SimParams) -> str:
    blob = json.dumps(
        {"string": repr(cfg), "scenario": repr(scenario), "sim": repr(params)}, sort_keys=True
    ).encode()
    return hashlib.sha256(blob).hexdigest()


# --- metrics ------------------------------------------------------------------


@dataclass
class PhaseMetrics:
    t0: float
    t1: float
    p_module: list  # whole-phase mean discharge power per module
    p_module_tail: list  # steady-state (tail) mean
    i_module_tail: list  # tail mean battery current, charging positive
    i_rms_tail: list
    p_out_tail: float
    v_amp_tail: float
    energy_module: list  # battery energy delivered over the phase
    efficiency_tail: float
    p_spread_tail: float  # (max - min) / |mean| of the tail module powers


@dataclass
class SummaryMetrics:
    phases: list
    efficiency: float
    max_abs_icirc: float
    tracking_error_rms: float
    energy_residual_rel: float
    defined: bool = True
    error: str | None = None

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


@dataclass
class RunManifest:
    config_hash: str
    version: str
    started: str
    finished: str
    seed: int | None = None
    outputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _audit_index(t_periods, t):
    return int(np.searchsorted(t_periods, t - 1e-12))


def _efficiency(audit, i0, i1) -> float:
    delivered = (audit["chemical"][i1] - audit["chemical"][i0]) - (audit["battery_loss"][i1] - audit["battery_loss"][i0])
    load = audit["load"][i1] - audit["load"][i0]
    if delivered <= 0:
        return math.nan
    return float(load / delivered)


def _spread(p) -> float:
    mean = float(np.mean(p))
    return float((np.max(p) - np.min(p)) / abs(mean)) if mean else math.inf


def summarize(trace: SimTrace, scenario: Scenario) -> SummaryMetrics:
    """Phase-wise metrics; steady-state values average the phase tail."""
    n = trace.n_modules
    P = trace.periods
    if len(trace) == 0 or not P or len(P["t"]) == 0:
        return SummaryMetrics([], math.nan, 0.0, math.nan, math.nan, defined=False, error=trace.error)
    tp = P["t"]
    period = tp[1] - tp[0] if len(tp) > 1 else scenario.duration
    t_last = tp[-1] + period
    phases = []
    for a, b in scenario.phases():
        if t_last < b - 1e-9:
            b = t_last
        if b <= a:
            continue
        tail = b - scenario.tail_fraction * (b - a)
        whole = (tp >= a - 1e-12) & (tp < b - 1e-12)
        sel = (tp >= tail - 1e-12) & (tp < b - 1e-12)
        if not sel.any():
            sel = whole
        s_tr = (trace.t > tail) & (trace.t <= b + 1e-12)
        i_b = trace.modules[s_tr, :, 0]
        i1 = _audit_index(tp, b)
        e_mod = P["p_b"][whole].sum(0) * period
        ia = _audit_index(tp, tail)
        ref = scenario.reference_at(a)
        v = trace.v_out[s_tr]
        if ref.freq:
            amp = float(2 * np.mean(v * np.sin(2 * math.pi * ref.freq * trace.t[s_tr]))) if v.size else math.nan
        else:
            amp = float(np.mean(v)) if v.size else math.nan
        phases.append(
            PhaseMetrics(
                t0=float(a),
                t1=float(b),
                p_module=P["p_b"][whole].mean(0).tolist(),
                p_module_tail=P["p_b"][sel].mean(0).tolist(),
                i_module_tail=(-P["i_dis"][sel].mean(0)).tolist(),
                i_rms_tail=np.sqrt(np.mean(i_b**2, axis=0)).tolist() if i_b.size else [math.nan] * n,
                p_out_tail=float(np.mean(trace.p_out[s_tr])) if s_tr.any() else math.nan,
                v_amp_tail=amp,
                energy_module=e_mod.tolist(),
                efficiency_tail=_efficiency(trace.audit, ia, i1) if i1 > ia else math.nan,
                p_spread_tail=_spread(P["p_b"][sel].mean(0)),
            )
        )
    res, thr = energy_residual(trace.audit)
    ic = np.abs(trace.groups[:, 1:, 0]) if n > 1 else np.zeros((len(trace), 0))
    return SummaryMetrics(
        phases=phases,
        efficiency=_efficiency(trace.audit, 0, -1),
        max_abs_icirc=float(ic.max()) if ic.size else 0.0,
        tracking_error_rms=float(np.sqrt(np.mean((trace.v_out - trace.v_ref) ** 2))),
        energy_residual_rel=float(abs(res) / thr) if thr > 0 else 0.0,
        error=trace.error,
    )


# --- running ------------------------------------------------------------------


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_scenario(cfg: StringConfig, scenario: Scenario, params: SimParams, out_dir=None, plots: bool = False):
    """Run one scenario and optionally write its outputs.

    With ``out_dir`` set, writes ``trace.csv``, ``metrics.json`` and
    ``manifest.json`` (plus PNG figures when ``plots`` is true).  Engine
    errors still flush the partial trace, which ends with an error row.
    """
    started = _now()
    ctrl = Controller(cfg, scenario.controller, scenario.reference_at)
    t_end = params.t_end or scenario.duration
    run_params = replace(params, t_end=t_end)
    failure = None
    try:
        trace = run(cfg, ctrl, scenario, run_params)
    except MRBSError as exc:
        trace = getattr(exc, "trace", None) or SimTrace.empty(cfg.n_modules)
        trace.error = trace.error or str(exc)
        failure = exc
    metrics = summarize(trace, scenario)
    manifest = RunManifest(
        config_hash=config_hash(cfg, scenario, run_params),
        version=__version__,
        started=started,
        finished=_now(),
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace.to_csv(out / "trace.csv")
        manifest.outputs["trace"] = str(out / "trace.csv")
        (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2))
        manifest.outputs["metrics"] = str(out / "metrics.json")
        if plots and len(trace):
            from .plotting import render_trace

            for p in render_trace(trace, out, title=scenario.name):
                manifest.outputs.setdefault("figures", []).append(str(p))
        manifest.outputs["manifest"] = str(out / "manifest.json")
        (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2))
    if failure is not None:
        raise failure
    return trace, metrics, manifest


# --- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class DesignSpec:
    """Ripple and operating targets for the sizing report."""

    v_b_max: float = 23.0
    md2: float = 0.05
    delta_i_diff: float = 1.0
    f_sw: float | None = None  # defaults to the configured carrier
    i_circ_rated: float = 10.0
    m0: float = 0.95
    v_out: float = 105.0
    duty: float = 0.5
    r_out: float | None = None  # defaults to the configured load
    ripple_v: float = 0.01
    core: CoreDesignParams = CoreDesignParams()


@dataclass
class ReportLine:
    name: str
    value: float
    unit: str
    configured: float | None = None
    ok: bool | None = None

    def render(self) -> str:
        s = f"{self.name:<40} {self.value:>12.6g} {self.unit}"
        if self.configured is not None:
            s += f"  (configured {self.configured:.6g} {self.unit}: {'PASS' if self.ok else 'FAIL'})"
        return s


@dataclass
class Report:
    title: str
    lines: list
    table: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)

    def render(self) -> str:
        out = [self.title, "=" * len(self.title)]
        out += [ln.render() for ln in self.lines]
        if self.table:
            out.append("")
            out.append(" ".join(f"{h:>12}" for h in self.table[0]))
            for row in self.table[1:]:
                out.append(" ".join(f"{x:>12.6g}" if isinstance(x, float) else f"{x!s:>12}" for x in row))
        for k, v in self.verdicts.items():
            out.append(f"{k}: {'PASS' if v else 'FAIL'}")
        return "\n".join(out)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def design_report(cfg: StringConfig, spec: DesignSpec = DesignSpec()) -> Report:
    """Component sizing against the configured string."""
    f_sw = spec.f_sw or cfg.f_carrier
    n = cfg.n_modules
    _, l_dm = effective_inductances(cfg.inductors[0]) if cfg.inductors else (0.0, 0.0)
    l_min = min_diff_inductance(spec.v_b_max, spec.md2, spec.delta_i_diff, f_sw)
    i_peak = magnetize_current_bound(spec.i_circ_rated, spec.v_b_max, spec.md2, l_dm, f_sw) if l_dm > 0 else math.inf
    ap = core_area_product(l_dm, i_peak, spec.core) if math.isfinite(i_peak) else math.inf
    lf_min = min_filter_inductance(spec.v_b_max, spec.m0, cfg.i_out_rated, n, f_sw)
    r_out = spec.r_out or cfg.load[0]
    # The phase-shifted carriers put the output ripple at 2 N f_carrier.
    f_out = 2 * n * f_sw
    c_min = min_output_capacitance(spec.v_out, spec.duty, r_out, spec.ripple_v * spec.v_out, f_out)
    lines = [
        ReportLine("conventional inductance for delta_i", l_min, "H"),
        ReportLine("coupled-inductor differential inductance", l_dm, "H"),
        ReportLine("magnetising peak current bound", i_peak, "A"),
        ReportLine("core area product (differential)", ap, "Ap"),
        ReportLine("filter inductance minimum", lf_min, "H", cfg.filter[0], cfg.filter[0] >= lf_min),
        ReportLine("output capacitance minimum", c_min, "F", cfg.filter[1], cfg.filter[1] >= c_min),
        ReportLine("switching loss at rated current", switching_losses(
            OperatingPoint(i_out=cfg.i_out_rated, v_b=spec.v_b_max, r_ds=cfg.r_ds_on, f_sw=f_sw, timings=cfg.switch_timings)
        ), "W"),
    ]
    return Report("design report", lines)


def compare_report(op_base: OperatingPoint = OperatingPoint(), rhos: Sequence[float] | None = None) -> Report:
    """Loss and core-size comparison over a circulating-current ratio grid."""
    if rhos is None:
        rhos = np.linspace(0.01, 0.5, 50)
    rows = loss_sweep(op_base, rhos)
    table = [("rho", "p_proposed", "p_benchmark", "core_ratio")]
    table += [(r.rho, r.p_proposed, r.p_benchmark, r.core_ratio) for r in rows]
    ratios = [r.core_ratio for r in rows]
    verdicts = {
        "proposed < benchmark on every row": all(r.p_proposed < r.p_benchmark for r in rows),
        "core ratio increases with rho": all(b > a for a, b in zip(ratios, ratios[1:])),
    }
    last = rows[-1]
    lines = [ReportLine(f"core ratio at rho={last.rho:g}", last.core_ratio, "")]
    return Report("loss and core comparison", lines, table, verdicts)
