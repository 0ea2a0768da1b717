"""Value types and pure functions for the modular battery string.

A string holds ``N`` battery modules in a row.  Adjacent modules ``j`` and
``j+1`` form interconnection group ``j`` (1-based, ``1..N-1``), each with its
own coupled inductor.  Group 0 is the pair of outer bridges (left bridge of
module 1, right bridge of module N) that close the string through the output
filter; it carries no coupled inductor.

Sign conventions used everywhere:

* battery current ``i_b`` is positive when the battery is charging;
* circulating current ``i_circ`` of group ``j`` is positive when it flows
  from module ``j`` toward module ``j+1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import LengthMismatch, NonPositiveDifferentialInductance, ValidationError

DEFAULT_OCV_CURVE = ((0.2, 22.0), (1.0, 23.0))


class GroupMode(Enum):
    SERIES = "S"
    PARALLEL = "P"
    BUCK = "BU"
    BOOST = "BO"
    BYPASS = "BY"

    @property
    def code(self) -> int:
        return _MODE_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "GroupMode":
        return _MODES_BY_CODE[int(code)]


_MODE_CODES = {
    GroupMode.SERIES: 0,
    GroupMode.PARALLEL: 1,
    GroupMode.BUCK: 2,
    GroupMode.BOOST: 3,
    GroupMode.BYPASS: 4,
}
_MODES_BY_CODE = {v: k for k, v in _MODE_CODES.items()}


class ModuleRole(Enum):
    ENERGY = "energy"
    POWER = "power"


@dataclass(frozen=True)
class BatteryModel:
    """Open-circuit-voltage plus series-resistance battery.

    ``ocv_curve`` is a sequence of ``(soc, volts)`` breakpoints; the curve is
    interpolated linearly and held flat outside the first/last breakpoint.
    """

    capacity: float = 5.0  # Ah
    r_internal: float = 0.010  # ohm
    ocv_curve: tuple = DEFAULT_OCV_CURVE
    soc_init: float = 0.5

    def __post_init__(self):
        curve = tuple((float(s), float(v)) for s, v in self.ocv_curve)
        object.__setattr__(self, "ocv_curve", curve)
        problems = self.problems()
        if problems:
            raise ValidationError(problems)

    def problems(self, prefix="battery"):
        out = []
        if not self.capacity > 0:
            out.append((f"{prefix}.capacity", "must be > 0"))
        if not self.r_internal >= 0:
            out.append((f"{prefix}.r_internal", "must be >= 0"))
        if not 0.0 <= self.soc_init <= 1.0:
            out.append((f"{prefix}.soc_init", "must lie in [0, 1]"))
        if len(self.ocv_curve) < 1:
            out.append((f"{prefix}.ocv_curve", "needs at least one breakpoint"))
        else:
            socs = [s for s, _ in self.ocv_curve]
            volts = [v for _, v in self.ocv_curve]
            if any(b <= a for a, b in zip(socs, socs[1:])):
                out.append((f"{prefix}.ocv_curve", "SOC breakpoints must be strictly increasing"))
            if any(b < a for a, b in zip(volts, volts[1:])):
                out.append((f"{prefix}.ocv_curve", "voltage must be non-decreasing in SOC"))
        return out

    def ocv(self, soc: float) -> float:
        socs, volts = zip(*self.ocv_curve)
        return float(np.interp(soc, socs, volts))

    def soc_for_ocv(self, volts: float) -> float:
        """Smallest SOC whose OCV reaches ``volts`` (clamped to the curve)."""
        socs, vs = zip(*self.ocv_curve)
        if volts <= vs[0]:
            return float(socs[0])
        if volts >= vs[-1]:
            return float(socs[-1])
        for (s0, v0), (s1, v1) in zip(self.ocv_curve, self.ocv_curve[1:]):
            if v0 <= volts <= v1 and v1 > v0:
                return s0 + (s1 - s0) * (volts - v0) / (v1 - v0)
        return float(socs[-1])


@dataclass(frozen=True)
class BatteryState:
    soc: float
    i_b: float = 0.0
    v_terminal: float = 0.0
    saturated: bool = False

    @classmethod
    def initial(cls, model: BatteryModel) -> "BatteryState":
        return cls(soc=model.soc_init, i_b=0.0, v_terminal=model.ocv(model.soc_init))


@dataclass(frozen=True)
class CoupledInductorParams:
    l1: float = 25e-6
    l2: float = 25e-6
    m12: float = 25e-6
    m21: float | None = None
    delta_l: float = 0.0
    # Added straight onto the common-mode inductance; carried in henries.
    delta_r: float = 0.0
    esr: float = 0.005

    def __post_init__(self):
        if self.m21 is None:
            object.__setattr__(self, "m21", self.m12)
        problems = self.problems()
        if problems:
            raise ValidationError(problems)

    def problems(self, prefix="inductor"):
        out = []
        if not self.l1 > 0:
            out.append((f"{prefix}.l1", "must be > 0"))
        if not self.l2 > 0:
            out.append((f"{prefix}.l2", "must be > 0"))
        if self.l1 > 0 and self.l2 > 0 and abs(self.m12) > math.sqrt(self.l1 * self.l2) * (1 + 1e-12):
            out.append((f"{prefix}.m12", "|m12| must not exceed sqrt(l1*l2)"))
        if self.m21 != self.m12:
            out.append((f"{prefix}.m21", "mutual inductances must be reciprocal (m21 == m12)"))
        if not self.esr >= 0:
            out.append((f"{prefix}.esr", "must be >= 0"))
        return out


@dataclass(frozen=True)
class SwitchTimings:
    t_ri: float = 20e-9
    t_fi: float = 20e-9
    t_rv: float = 20e-9
    t_fv: float = 20e-9

    @property
    def total(self) -> float:
        return self.t_ri + self.t_fi + self.t_rv + self.t_fv


@dataclass(frozen=True)
class StringConfig:
    """Everything needed to simulate one string.

    Defaults follow the simulation column of the system-parameter table
    (2 kHz carrier, 25 uH coupled inductors, 1 mOhm switches, 0.5 mH /
    600 uF output filter, 100 uH load inductance).
    """

    modules: tuple
    inductors: tuple
    alpha: float = 0.5
    r_ds_on: float = 1e-3
    switch_timings: SwitchTimings = SwitchTimings()
    f_carrier: float = 2000.0
    load: tuple = (6.0, 100e-6)
    filter: tuple = (0.5e-3, 600e-6)
    i_out_rated: float = 50.0
    # Groups (1-based) allowed to run buck/boost energy transfer.  ``None``
    # enables every inter-module group.
    transfer_groups: tuple | None = None
    k_dynamic: float = 0.0
    z_dyn: float = 0.0
    dv_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "modules", tuple((b, ModuleRole(r)) for b, r in self.modules))
        object.__setattr__(self, "inductors", tuple(self.inductors))
        if self.transfer_groups is not None:
            object.__setattr__(self, "transfer_groups", tuple(int(g) for g in self.transfer_groups))
        problems = self.problems()
        if problems:
            raise ValidationError(problems)

    def problems(self):
        out = []
        n = len(self.modules)
        if n < 2:
            out.append(("modules", "need at least two modules"))
        if len(self.inductors) != n - 1:
            out.append(("inductors", f"expected {n - 1} inductors for {n} modules, got {len(self.inductors)}"))
        roles = [r for _, r in self.modules]
        n_energy = sum(r is ModuleRole.ENERGY for r in roles)
        if any(r is not ModuleRole.ENERGY for r in roles[:n_energy]):
            out.append(("modules", "energy modules must form a contiguous prefix"))
        if not 0.0 < self.alpha < 1.0:
            out.append(("alpha", "must lie in (0, 1)"))
        for name in ("r_ds_on", "f_carrier", "i_out_rated"):
            if not getattr(self, name) > 0:
                out.append((name, "must be > 0"))
        if len(self.load) != 2 or not all(x > 0 for x in self.load):
            out.append(("load", "needs positive (R, L)"))
        if len(self.filter) != 2 or not all(x > 0 for x in self.filter):
            out.append(("filter", "needs positive (L_filter, C_out)"))
        if self.transfer_groups is not None:
            for g in self.transfer_groups:
                if not 1 <= g <= n - 1:
                    out.append(("transfer_groups", f"group {g} outside 1..{n - 1}"))
        if self.z_dyn < 0:
            out.append(("z_dyn", "must be >= 0"))
        return out

    @property
    def n_modules(self) -> int:
        return len(self.modules)

    @property
    def batteries(self) -> tuple:
        return tuple(b for b, _ in self.modules)

    @property
    def roles(self) -> tuple:
        return tuple(r for _, r in self.modules)

    @property
    def n_energy(self) -> int:
        return sum(r is ModuleRole.ENERGY for r in self.roles)

    def transfer_enabled(self, group: int) -> bool:
        return self.transfer_groups is None or group in self.transfer_groups

    def r_eq(self, group: int) -> float:
        """Loop resistance of group ``group`` (1-based) in parallel mode."""
        b = self.batteries
        return 4 * self.r_ds_on + b[group - 1].r_internal + b[group].r_internal + self.inductors[group - 1].esr

    def with_load(self, r: float, l: float | None = None) -> "StringConfig":
        return replace(self, load=(r, self.load[1] if l is None else l))


def default_string(
    v_init: Sequence[float] = (22.7, 22.7, 22.4, 22.4, 22.4),
    n_energy: int = 2,
    capacity: float = 5.0,
    r_internal: float = 0.010,
    **kwargs,
) -> StringConfig:
    """Five-module string at the simulation operating point."""
    modules = []
    for k, v in enumerate(v_init):
        model = BatteryModel(capacity=capacity, r_internal=r_internal)
        model = replace(model, soc_init=model.soc_for_ocv(v))
        modules.append((model, ModuleRole.ENERGY if k < n_energy else ModuleRole.POWER))
    inductors = tuple(CoupledInductorParams() for _ in range(len(modules) - 1))
    return StringConfig(modules=tuple(modules), inductors=inductors, **kwargs)


def effective_inductances(p: CoupledInductorParams) -> tuple[float, float]:
    """Common-mode and differential-mode inductance of a coupled pair."""
    l_cm = 0.5 * (p.l1 - p.m12) + p.delta_r
    l_dm = p.l1 + p.m12 + p.l2 + p.m21 + p.delta_l
    if not l_dm > 0:
        raise NonPositiveDifferentialInductance(f"differential-mode inductance {l_dm!r} H is not positive")
    return l_cm, l_dm


def split_branch_currents(i_out: float, i_circ: float, alpha: float = 0.5) -> tuple[float, float]:
    return alpha * i_out + i_circ, alpha * i_out - i_circ


def string_output_voltage(series_flags: Sequence[int], v_b: Sequence[float]) -> float:
    if len(series_flags) != len(v_b):
        raise LengthMismatch(f"{len(series_flags)} flags for {len(v_b)} voltages")
    return float(sum(s * v for s, v in zip(series_flags, v_b)))


def battery_step(state: BatteryState, model: BatteryModel, i_b: float, dt: float) -> BatteryState:
    """Coulomb-count one step; clamps SOC to [0, 1] and flags saturation."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    soc = state.soc + i_b * dt / (3600.0 * model.capacity)
    saturated = soc < 0.0 or soc > 1.0
    soc = min(max(soc, 0.0), 1.0)
    return BatteryState(
        soc=soc,
        i_b=i_b,
        v_terminal=model.ocv(soc) + i_b * model.r_internal,
        saturated=saturated or state.saturated,
    )
