"""Two-loop controller: output-voltage loop for m0, circulating-current loops
for md2, reference policies and the group-mode scheduler."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .core_model import GroupMode, ModuleRole, StringConfig
from .errors import DegenerateDenominator, DemandExceedsCapability
from .modulation import ModulationCommand


@dataclass(frozen=True)
class PIGains:
    kp: float
    ki: float
    out_min: float = -math.inf
    out_max: float = math.inf

    def __post_init__(self):
        if not self.out_min < self.out_max:
            raise ValueError("out_min must be < out_max")
        if self.ki < 0:
            raise ValueError("ki must be >= 0")


def pi_update(gains: PIGains, integ: float, error: float, dt: float) -> tuple[float, float]:
    """One PI step; returns ``(command, new_integrator)``.

    The integrator is frozen whenever the output sits on a clamp and the
    error would push it further out.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    cand = integ + gains.ki * error * dt
    u = gains.kp * error + cand
    if (u > gains.out_max and error > 0) or (u < gains.out_min and error < 0):
        cand = integ
        u = gains.kp * error + cand
    return min(max(u, gains.out_min), gains.out_max), cand


class CircRefMode(Enum):
    ZERO = "zero"
    SOC_BALANCE = "soc_balance"
    SOC_PLUS_LOAD = "soc_plus_load"
    ENERGY_CAP = "energy_cap"


@dataclass(frozen=True)
class CircRefPolicy:
    mode: CircRefMode = CircRefMode.ZERO
    k_soc: float = 0.0
    k_load: float = 0.0
    # Multiply the reference by sin(omega t) to follow an AC output.
    envelope: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", CircRefMode(self.mode))


@dataclass(frozen=True)
class EnergyCapPolicy:
    p_energy_max: float = 300.0
    # Reference slew per watt of power error, A/(W s).
    gain: float = 2.0
    window: float = 0.02

    def __post_init__(self):
        if not self.p_energy_max > 0:
            raise ValueError("p_energy_max must be > 0")
        if self.gain < 0:
            raise ValueError("gain must be >= 0")


def feedforward_md(v_bj: float, v_bj1: float, m0: float, i_circ_target: float = 0.0, r_eq: float = 0.0) -> float:
    """Open-loop transfer index from volt-second balance.

    Forward transfer (positive result) uses ``sum + i*R`` in the
    denominator; reverse transfer mirrors the balance through the other
    bridge, giving ``sum - i*R``.
    """
    num = v_bj - v_bj1 - i_circ_target * r_eq
    den = v_bj + v_bj1 + i_circ_target * r_eq if num >= 0 else v_bj + v_bj1 - i_circ_target * r_eq
    if not den > 0:
        raise DegenerateDenominator(f"feedforward denominator {den!r} is not positive")
    return num * (1.0 - abs(m0)) / den


def circ_reference(policy: CircRefPolicy, soc_avg: float, soc_next: float, i_load: float = 0.0, t: float = 0.0, omega: float = 0.0) -> float:
    if policy.mode is CircRefMode.ZERO:
        return 0.0
    ref = policy.k_soc * (soc_avg - soc_next)
    if policy.mode is CircRefMode.SOC_PLUS_LOAD:
        ref += policy.k_load * i_load
    if policy.envelope:
        ref *= math.sin(omega * t)
    return ref


def energy_cap_reference(p_b_energy: float, cap: EnergyCapPolicy, n: int = 1) -> float:
    """Reference slew (A/s) driving ``n`` energy modules toward their cap.

    Positive output pushes current from the energy side toward the power
    side: energy modules discharge harder and the power modules recharge.
    """
    return cap.gain * (n * cap.p_energy_max - p_b_energy)


def schedule_group_modes(cfg: StringConfig, demand: float) -> tuple:
    """Allowed modes per ring group (outer group first).

    The outer bridges either bypass or, once any voltage is demanded, join
    the series chain.  Series permission is extended group by group as the
    demanded level count grows; energy transfer is allowed at the
    energy/power boundary and on any configured transfer group.
    """
    n = cfg.n_modules
    levels_v = [b.ocv(b.soc_init) for b in cfg.batteries]
    capability = 0.95 * sum(levels_v)
    if demand < 0 or demand > capability:
        raise DemandExceedsCapability(f"demand {demand!r} V outside [0, {capability:.4g}] V")
    v_level = 0.95 * min(levels_v)
    levels = math.ceil(demand / v_level - 1e-12) if demand > 0 else 0
    transfer = {cfg.n_energy} if 0 < cfg.n_energy < n else set()
    if cfg.transfer_groups is not None:
        transfer |= set(cfg.transfer_groups)
    out = [frozenset({GroupMode.BYPASS, GroupMode.SERIES} if levels else {GroupMode.BYPASS})]
    for g in range(1, n):
        allowed = {GroupMode.PARALLEL}
        if g < levels or levels >= n:
            allowed.add(GroupMode.SERIES)
        if g == 1 and levels:
            allowed.add(GroupMode.SERIES)
        if g in transfer:
            allowed |= {GroupMode.BUCK, GroupMode.BOOST}
        out.append(frozenset(allowed))
    return tuple(out)


@dataclass
class ControllerConfig:
    pi_v: PIGains = PIGains(kp=0.002, ki=0.3, out_min=-0.5, out_max=0.5)
    pi_i: PIGains = PIGains(kp=0.001, ki=0.1, out_min=-0.15, out_max=0.15)
    m0_max: float = 0.95
    md_max: float = 0.15
    policy: CircRefPolicy = CircRefPolicy()
    energy_cap: EnergyCapPolicy | None = None
    i_ref_max: float | None = None
    feedforward: bool = True
    # Optional fixed allowed-mode sets per ring group.
    allowed: tuple | None = None


@dataclass
class ControllerState:
    integ_v: float = 0.0
    integ_i: np.ndarray = None
    cap_ref: np.ndarray = None
    last: ModulationCommand | None = None
    saturated: bool = False


@dataclass(frozen=True)
class Reference:
    """Output reference: amplitude ``value`` of a sinusoid at ``freq`` Hz,
    or a DC level when ``freq`` is 0."""

    value: float
    freq: float = 50.0

    def at(self, t: float) -> float:
        if self.freq == 0:
            return self.value
        return self.value * math.sin(2 * math.pi * self.freq * t)


class Controller:
    """Per-carrier-period controller.

    ``reference`` maps time to a :class:`Reference`.  The voltage loop acts on
    the output amplitude, estimated as the in-phase Fourier component over
    one reference cycle, on top of an ``A / sum(v_b)`` feedforward.
    """

    def __init__(self, cfg: StringConfig, ccfg: ControllerConfig, reference: Callable[[float], Reference]):
        self.cfg = cfg
        self.cc = ccfg
        self.reference = reference
        n = cfg.n_modules
        self.state = ControllerState(integ_i=np.zeros(n), cap_ref=np.zeros(n))
        self.r_eq = np.array([0.0] + [cfg.r_eq(g) for g in range(1, n)])
        self.r_int = np.array([b.r_internal for b in cfg.batteries])
        self._hist = deque()
        self._p_hist = deque()
        self._p_sum = np.zeros(n)
        self.i_ref_max = ccfg.i_ref_max if ccfg.i_ref_max is not None else 2.0 * cfg.i_out_rated
        self.energy = np.array([r is ModuleRole.ENERGY for r in cfg.roles])

    # -- voltage loop --------------------------------------------------

    def _amplitude(self, ref: Reference, meas) -> float | None:
        if meas.t <= 0:
            return None
        t_mid = meas.t - 0.5 * meas.period
        self._hist.append((t_mid, meas.v_out))
        window = 1.0 / ref.freq if ref.freq else 20e-3
        while self._hist and self._hist[0][0] < meas.t - window - 1e-12:
            self._hist.popleft()
        if self._hist[0][0] > meas.t - window + meas.period:
            return None
        ts = np.array([h[0] for h in self._hist])
        vs = np.array([h[1] for h in self._hist])
        if ref.freq == 0:
            return float(np.mean(vs))
        return float(2.0 * np.mean(vs * np.sin(2 * math.pi * ref.freq * ts)))

    def _m0(self, meas) -> float:
        cc = self.cc
        t_mid = meas.t + 0.5 * meas.period
        ref = self.reference(t_mid)
        v_sum = float(np.sum(meas.ocv))
        amp = self._amplitude(ref, meas)
        u = 0.0
        if amp is not None:
            u, self.state.integ_v = pi_update(cc.pi_v, self.state.integ_v, ref.value - amp, meas.period)
        mag = min(max(ref.value / v_sum + u, -cc.m0_max), cc.m0_max)
        shape = 1.0 if ref.freq == 0 else math.sin(2 * math.pi * ref.freq * t_mid)
        return mag * shape

    # -- circulating references -----------------------------------------

    def _refs(self, meas, m0) -> np.ndarray:
        cc = self.cc
        n = self.cfg.n_modules
        refs = np.zeros(n)
        soc_avg = float(np.mean(meas.soc))
        ref = self.reference(meas.t)
        omega = 2 * math.pi * ref.freq
        for g in range(1, n):
            refs[g] = circ_reference(cc.policy, soc_avg, meas.soc[g], meas.i_load, meas.t, omega)
        cap = cc.energy_cap
        if cap is not None and meas.t > 0:
            self._p_hist.append(meas.p_b.copy())
            self._p_sum += meas.p_b
            while len(self._p_hist) * meas.period > cap.window + 1e-12:
                self._p_sum -= self._p_hist.popleft()
            p_bar = self._p_sum / len(self._p_hist)
            n_e = int(np.count_nonzero(self.energy))
            n_p = n - n_e
            target = np.where(self.energy, cap.p_energy_max, (p_bar.sum() - n_e * cap.p_energy_max) / max(n_p, 1))
            err = np.cumsum(target - p_bar)
            for g in range(1, n):
                slew = cap.gain * err[g - 1]
                new = self.state.cap_ref[g] + slew * meas.period
                self.state.cap_ref[g] = min(max(new, -self.i_ref_max), self.i_ref_max)
            refs += self.state.cap_ref
        return np.clip(refs, -self.i_ref_max, self.i_ref_max)

    # -- main ------------------------------------------------------------

    def update(self, meas) -> ModulationCommand:
        cc = self.cc
        n = self.cfg.n_modules
        m0 = self._m0(meas)
        a = abs(m0)
        refs = self._refs(meas, m0)
        v_est = meas.v_b + self.r_int * meas.i_dis if meas.t > 0 else meas.ocv
        md2 = np.zeros(n)
        m0g = np.full(n, a)
        sat = False
        for g in range(1, n):
            ff = 0.0
            if cc.feedforward:
                ff = feedforward_md(v_est[g - 1], v_est[g], a, refs[g], self.r_eq[g])
            err = refs[g] - meas.i_circ[g]
            u, cand = pi_update(cc.pi_i, self.state.integ_i[g], err, meas.period)
            md = ff - u
            lim = min(cc.md_max, 1.0 - a)
            if abs(md) > lim:
                md = math.copysign(lim, md)
                sat = True
                # freeze when the clamp is pushed further
                if (md > 0) == (u < 0):
                    cand = self.state.integ_i[g]
            if a < abs(md):
                # bypassed this period: no authority, hold the integrator
                cand = self.state.integ_i[g]
            self.state.integ_i[g] = cand
            md2[g] = md
        forced = None
        if cc.allowed is not None:
            m0g, md2, forced = apply_allowed(cc.allowed, m0g, md2)
        self.state.saturated = sat
        cmd = ModulationCommand(m0=m0, md2=tuple(md2), omega=2 * math.pi * self.cfg.f_carrier, m0_group=tuple(m0g), force_bypass=forced)
        self.state.last = cmd
        return cmd


def apply_allowed(allowed: Sequence, m0g, md2):
    """Restrict per-group indices to an allowed-mode set."""
    m0g = np.array(m0g, dtype=float)
    md2 = np.array(md2, dtype=float)
    forced = [False] * len(md2)
    for g, modes in enumerate(allowed):
        if GroupMode.BUCK not in modes and GroupMode.BOOST not in modes:
            md2[g] = 0.0
        if GroupMode.SERIES not in modes:
            m0g[g] = abs(md2[g])
        if GroupMode.SERIES not in modes and GroupMode.PARALLEL not in modes and GroupMode.BYPASS in modes:
            m0g[g] = 0.0
            md2[g] = 0.0
            forced[g] = True
    return m0g, md2, tuple(forced)


def control_step(ctrl: Controller, measurements) -> ModulationCommand:
    return ctrl.update(measurements)
