"""Phase-shifted-carrier modulation of the interconnection groups.

Each group ``g`` owns a triangular carrier ``c_g``.  Its two facing bridges
compare the carrier against ``m0 - md2`` (lower bridge) and ``m0 + md2``
(upper bridge); the resulting state pair fixes the group mode.

Groups are arranged on a ring: group 0 sits between the last and the first
module (the outer bridges), group ``g >= 1`` between modules ``g-1`` and ``g``
(0-based module indices).  A group in Series or Bypass splits the ring; the
modules between two such boundaries are paralleled into one *arc*.  An arc is
inserted into the output path when the boundary on its left is in Series, so
the number of output levels equals the number of Series groups.

Negative ``m0`` (the negative half cycle of an AC reference) is handled by
mirroring: ``|m0|`` drives the comparisons and the output polarity flips.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .core_model import GroupMode
from .errors import InconsistentState, IndexOutOfRange, InvalidIndices

SERIES = GroupMode.SERIES.code
PARALLEL = GroupMode.PARALLEL.code
BUCK = GroupMode.BUCK.code
BOOST = GroupMode.BOOST.code
BYPASS = GroupMode.BYPASS.code


class BridgeState(Enum):
    STATE0 = 0
    STATE1 = 1


@dataclass(frozen=True)
class BridgeStatePair:
    lower: BridgeState
    upper: BridgeState


@dataclass(frozen=True)
class CarrierSet:
    n_carriers: int
    f_carrier: float
    offsets: tuple | None = None

    def __post_init__(self):
        if self.n_carriers < 1:
            raise ValueError("n_carriers must be >= 1")
        if not self.f_carrier > 0:
            raise ValueError("f_carrier must be > 0")
        if self.offsets is None:
            offs = tuple(2 * math.pi * k / self.n_carriers for k in range(self.n_carriers))
            object.__setattr__(self, "offsets", offs)
        else:
            offs = tuple(float(o) for o in self.offsets)
            object.__setattr__(self, "offsets", offs)
            if len(offs) != self.n_carriers:
                raise ValueError("one offset per carrier required")
            if any(not 0 <= o < 2 * math.pi for o in offs) or any(b <= a for a, b in zip(offs, offs[1:])):
                raise ValueError("offsets must be strictly increasing within [0, 2*pi)")

    @property
    def period(self) -> float:
        return 1.0 / self.f_carrier

    def values(self, t) -> np.ndarray:
        """Carrier values for every carrier at times ``t``; shape ``t.shape + (n,)``."""
        t = np.asarray(t, dtype=float)
        phase = (t[..., None] * self.f_carrier + np.asarray(self.offsets) / (2 * math.pi)) % 1.0
        return _tri(phase)


def _tri(phase):
    return np.where(phase < 0.5, 2.0 * phase, 2.0 - 2.0 * phase)


@dataclass(frozen=True)
class ModulationCommand:
    """Indices for one carrier period.

    ``m0_group`` optionally overrides ``|m0|`` per group, which is how the
    mode scheduler keeps a group out of Series.
    """

    m0: float
    md2: tuple
    omega: float = 0.0
    m0_group: tuple | None = None
    force_bypass: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "md2", tuple(float(x) for x in self.md2))
        if self.m0_group is not None:
            object.__setattr__(self, "m0_group", tuple(abs(float(x)) for x in self.m0_group))
            if len(self.m0_group) != len(self.md2):
                raise ValueError("m0_group and md2 lengths differ")
        if not abs(self.m0) <= 1.0:
            raise InvalidIndices(f"|m0| = {abs(self.m0)!r} exceeds 1")

    @property
    def polarity(self) -> int:
        return -1 if self.m0 < 0 else 1

    def bypass_flags(self) -> tuple:
        forced = self.force_bypass or (False,) * len(self.md2)
        return tuple(bool(f) or bypass_check(a, d) for f, a, d in zip(forced, self.m0_groups, self.md2))

    @property
    def m0_groups(self) -> tuple:
        if self.m0_group is not None:
            return self.m0_group
        return (abs(self.m0),) * len(self.md2)


def carrier_value(cs: CarrierSet, k: int, t: float) -> float:
    if not 0 <= k < cs.n_carriers:
        raise IndexOutOfRange(f"carrier {k} not in 0..{cs.n_carriers - 1}")
    phase = (t * cs.f_carrier + cs.offsets[k] / (2 * math.pi)) % 1.0
    return 2.0 * phase if phase < 0.5 else 2.0 - 2.0 * phase


def bridge_states(m0: float, md2_k: float, c_k: float) -> BridgeStatePair:
    lower = BridgeState.STATE1 if m0 - md2_k > c_k else BridgeState.STATE0
    upper = BridgeState.STATE1 if m0 + md2_k > c_k else BridgeState.STATE0
    return BridgeStatePair(lower, upper)


def classify_group_mode(pair: BridgeStatePair, md2_sign: float) -> GroupMode:
    s1, s0 = BridgeState.STATE1, BridgeState.STATE0
    if pair.lower is s1 and pair.upper is s1:
        return GroupMode.SERIES
    if pair.lower is s0 and pair.upper is s0:
        return GroupMode.PARALLEL
    if pair.lower is s0 and md2_sign > 0:
        return GroupMode.BUCK
    if pair.lower is s1 and md2_sign < 0:
        return GroupMode.BOOST
    raise InconsistentState(f"bridge pair ({pair.lower.name}, {pair.upper.name}) with md2 sign {md2_sign!r}")


def mode_durations(m0: float, md2: float, t_sw: float) -> tuple[float, float, float]:
    """Series, parallel and transfer dwell times over one switching period.

    Magnitudes are used (a negative ``md2`` mirrors the transfer interval to
    the opposite bridge).  ``t_s`` and ``t_b`` are snapped to the float grid of
    ``t_sw`` so that the three durations sum to ``t_sw`` exactly.
    """
    if not t_sw > 0:
        raise ValueError("t_sw must be > 0")
    a, d = abs(m0), abs(md2)
    if not (d <= a and a + d <= 1.0):
        raise InvalidIndices(f"indices m0={m0!r}, md2={md2!r} give a negative dwell time")
    g = math.ulp(t_sw)
    t_s = round(t_sw * (a - d) / g) * g
    t_b = round(2.0 * t_sw * d / g) * g
    t_p = t_sw - t_s - t_b
    if t_p < 0.0:
        t_s += t_p
        t_p = 0.0
    return t_s, t_p, t_b


def bypass_check(m0: float, md2: float) -> bool:
    two_d = abs(2.0 * md2)
    return two_d > abs(m0 - md2) and two_d > abs(m0 + md2)


def group_modes(m0_abs, md2, bypass, carriers) -> np.ndarray:
    """Vectorised mode codes.

    ``m0_abs``, ``md2``, ``bypass`` broadcast against ``carriers`` whose last
    axis runs over groups.
    """
    lower = (m0_abs - md2) > carriers
    upper = (m0_abs + md2) > carriers
    modes = np.where(
        lower & upper,
        SERIES,
        np.where(~lower & ~upper, PARALLEL, np.where(upper, BUCK, BOOST)),
    ).astype(np.int8)
    return np.where(bypass, np.int8(BYPASS), modes).astype(np.int8)


def _time_below(phase, theta):
    """Measure (in carrier cycles) of ``[0, phase)`` where the carrier is
    below ``theta``."""
    whole = np.floor(phase)
    fr = phase - whole
    half = 0.5 * theta
    return whole * theta + np.minimum(fr, half) + np.maximum(0.0, fr - 1.0 + half)


def dwell_fractions(m0_abs, md2, bypass, cs: CarrierSet, t_edges) -> np.ndarray:
    """Exact per-step mode fractions between consecutive ``t_edges``.

    Returns an array shaped ``(len(t_edges) - 1, n_groups, 4)`` holding the
    fractions spent in (Parallel, Buck, Boost, Bypass); the Series share is
    the remainder.
    """
    m0_abs = np.asarray(m0_abs, dtype=float)
    md2 = np.asarray(md2, dtype=float)
    bypass = np.asarray(bypass, dtype=bool)
    t_edges = np.asarray(t_edges, dtype=float)
    phase = t_edges[:, None] * cs.f_carrier + np.asarray(cs.offsets) / (2 * math.pi)
    span = np.diff(phase, axis=0)
    lo = np.clip(m0_abs - md2, 0.0, 1.0)
    hi = np.clip(m0_abs + md2, 0.0, 1.0)
    f_lo = np.diff(_time_below(phase, lo), axis=0) / span
    f_hi = np.diff(_time_below(phase, hi), axis=0) / span
    out = np.zeros(span.shape + (4,))
    pos = md2 >= 0
    out[..., 0] = 1.0 - np.where(pos, f_hi, f_lo)
    out[..., 1] = np.where(pos, f_hi - f_lo, 0.0)
    out[..., 2] = np.where(pos, 0.0, f_lo - f_hi)
    out[..., :3] = np.where(bypass[None, :, None], 0.0, out[..., :3])
    out[..., 3] = np.where(bypass[None, :], 1.0, 0.0)
    return np.clip(out, 0.0, 1.0)


def arc_weights(modes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ring-arc bookkeeping for a block of mode rows.

    Returns ``(weight, flags, arc_start)``, each shaped like ``modes``.
    ``weight[k]`` is ``1/arc_size`` for a module in an inserted arc and 0
    otherwise; ``flags[k]`` is 1 for the first module of each inserted arc;
    ``arc_start[k]`` is the index of the boundary group opening module k's
    arc, or -1 when the ring has no boundary.
    """
    modes = np.atleast_2d(modes)
    n = modes.shape[-1]
    boundary = (modes == SERIES) | (modes == BYPASS)
    start = np.full(modes.shape, -1, dtype=np.int64)
    for back in range(n - 1, -1, -1):
        g = (np.arange(n) - back) % n
        start = np.where(boundary[:, g], g[None, :], start)
    has = start >= 0
    safe = np.where(has, start, 0)
    inserted = has & np.take_along_axis(modes == SERIES, safe, axis=1)
    size = np.zeros(modes.shape, dtype=np.int64)
    for k in range(n):
        size += (start == start[:, k : k + 1]) & has
    weight = np.where(inserted, 1.0 / np.maximum(size, 1), 0.0)
    flags = (inserted & (start == np.arange(n)[None, :])).astype(np.int8)
    return weight, flags, start


@dataclass(frozen=True)
class GateSchedule:
    """Sampled gate pattern; row ``i`` covers ``[t[i], t[i] + dt)``."""

    t: np.ndarray
    dt: float
    lower: np.ndarray
    upper: np.ndarray
    modes: np.ndarray
    series_flags: np.ndarray
    weights: np.ndarray
    polarity: int = 1

    @property
    def n_groups(self) -> int:
        return self.modes.shape[1]

    def mode_at(self, i: int, group: int) -> GroupMode:
        return GroupMode.from_code(self.modes[i, group])

    def dwell(self, group: int, t0: float = 0.0, t1: float | None = None) -> dict:
        """Total time per mode for ``group`` over ``[t0, t1)``."""
        t1 = self.t[-1] + self.dt if t1 is None else t1
        sel = (self.t >= t0 - 1e-15) & (self.t < t1 - 1e-15)
        col = self.modes[sel, group]
        return {m: float(np.count_nonzero(col == m.code)) * self.dt for m in GroupMode}

    def intervals(self):
        """Yield ``(t_start, group, GroupMode)`` at every mode change."""
        for g in range(self.n_groups):
            col = self.modes[:, g]
            if col.size == 0:
                continue
            change = np.flatnonzero(np.diff(col)) + 1
            for i in np.concatenate(([0], change)):
                yield float(self.t[i]), g, GroupMode.from_code(col[i])

    def write_csv(self, path) -> None:
        rows = sorted(self.intervals(), key=lambda r: (r[0], r[1]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_start", "group", "mode"])
            for t, g, m in rows:
                w.writerow([repr(t), g, m.value])


def build_gate_schedule(cmd: ModulationCommand, cs: CarrierSet, horizon: float, dt: float) -> GateSchedule:
    if dt > cs.period / 20 * (1 + 1e-12):
        raise ValueError("dt must not exceed 1/(20 f_carrier)")
    if len(cmd.md2) != cs.n_carriers:
        raise ValueError("one md2 per carrier/group required")
    m0 = np.asarray(cmd.m0_groups)
    md2 = np.asarray(cmd.md2)
    for a, d, b in zip(m0, md2, cmd.bypass_flags()):
        if not b:
            mode_durations(a, d, cs.period)
    n = int(round(horizon / dt))
    t = np.arange(n) * dt
    c = cs.values(t)
    # Evaluated once per carrier period; the command is constant here.
    bypass = np.array(cmd.bypass_flags())
    lower = (m0 - md2) > c
    upper = (m0 + md2) > c
    modes = group_modes(m0, md2, bypass, c) if n else np.zeros((0, cs.n_carriers), np.int8)
    if n:
        weights, flags, _ = arc_weights(modes)
    else:
        weights = np.zeros((0, cs.n_carriers))
        flags = np.zeros((0, cs.n_carriers), np.int8)
    return GateSchedule(
        t=t,
        dt=dt,
        lower=lower,
        upper=upper,
        modes=modes,
        series_flags=flags,
        weights=weights,
        polarity=cmd.polarity,
    )
