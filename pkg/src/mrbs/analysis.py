"""Closed-form sizing and loss comparison.

Conduction losses are evaluated from term tables.  Each term names a branch
current, a weight and a duty factor; a group's loss is
``2 * r_ds * sum(weight * current**2 * duty)``, the factor 2 accounting for
the negative half cycle.  A switch carrying a branch current alone appears as
``(x, 1)``; two switches sharing it appear as ``(x/2, 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .core_model import SwitchTimings

K_T = 48200.0


class Topology(Enum):
    PROPOSED = "proposed"
    BENCHMARK = "benchmark"


@dataclass(frozen=True)
class CoreDesignParams:
    k_t: float = K_T
    gamma: float = 0.0
    b_max: float = 0.3
    k_i: float = 1.0
    k_u: float = 0.4
    delta_t: float = 40.0

    def __post_init__(self):
        if not (self.k_t > 0 and self.b_max > 0 and self.k_i > 0 and self.k_u > 0 and self.delta_t > 0):
            raise ValueError("core design parameters must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass(frozen=True)
class OperatingPoint:
    i_out: float = 10.0
    i_circ: float = 0.0
    m0: float = 0.6
    md2: float = 0.05
    v_b: float = 22.4
    r_ds: float = 1e-3
    f_sw: float = 2000.0
    timings: SwitchTimings = SwitchTimings()

    def __post_init__(self):
        if self.i_out < 0:
            raise ValueError("i_out must be >= 0")


@dataclass(frozen=True)
class LossTerm:
    current: str  # "a", "b", "a/2", "b/2"
    weight: float
    duty: str  # key into _duty_factors
    source: str


@dataclass(frozen=True)
class LossBreakdown:
    topology: Topology
    per_group: tuple
    switching: float
    conduction: float = field(init=False)
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "per_group", tuple(float(x) for x in self.per_group))
        object.__setattr__(self, "conduction", float(sum(self.per_group)))
        object.__setattr__(self, "total", self.conduction + self.switching)


def _terms(rows):
    return tuple(LossTerm(*r) for r in rows)


def _bench_group(g):
    base = 10 * (g - 1)
    s = lambda k: f"S{k + base}"
    return _terms(
        [
            ("a", 1, "one", s(18)),
            ("b", 1, "1-2md", s(22)),
            ("a", 1, "1-m0+md", s(15)),
            ("b", 1, "1-m0+md", s(23)),
            ("a/2", 2, "m0-md", f"{s(21)}+{s(17)}"),
            ("b/2", 2, "2md", s(24)),
        ]
    )


# a = i_out/2 + i_circ, b = i_out/2 - i_circ
TERM_TABLES = {
    Topology.PROPOSED: (
        _terms(
            [
                ("a/2", 2, "1-m0-md", "outer bridge, leg A pair"),
                ("b/2", 2, "1-m0-md", "outer bridge, leg B pair"),
            ]
        ),
        _terms(
            [
                ("a/2", 2, "m0-md", "S17+S18"),
                ("b/2", 2, "m0+md", "S21+S22"),
                ("a", 1, "1-m0-md", "S15"),
                ("a", 1, "1-m0-md", "S18"),
                ("b", 1, "1-m0-md", "S22"),
                ("b", 1, "1-m0-md", "S23"),
            ]
        ),
        _terms(
            [
                ("a", 1, "1-m0+md", "S25"),
                ("a", 1, "1-m0+md", "S28"),
                ("b", 1, "1-m0+md", "S33"),
                ("b", 1, "1-m0-md", "S32"),
                ("b", 1, "2md", "S34"),
            ]
        ),
        _terms(
            [
                ("a", 1, "1-m0-md", "S35"),
                ("a", 1, "1-m0-md", "S38"),
                ("b", 1, "1-m0-md", "S42"),
                ("b", 1, "1-m0-md", "S43"),
            ]
        ),
        _terms(
            [
                ("a", 1, "1-m0-md", "S45"),
                ("a", 1, "1-m0-md", "S48"),
                ("b", 1, "1-m0-md", "S52"),
                ("b", 1, "1-m0-md", "S53"),
            ]
        ),
    ),
    Topology.BENCHMARK: (
        _terms(
            [
                ("b/2", 2, "1-2md", "outer bridge, leg B pair"),
                ("a/2", 2, "1-2md", "outer bridge, leg A pair"),
            ]
        ),
        _bench_group(1),
        _bench_group(2),
        _bench_group(3),
        _bench_group(4),
    ),
}


def _duty_factors(m0, md):
    return {
        "one": 1.0,
        "m0-md": m0 - md,
        "m0+md": m0 + md,
        "1-m0-md": 1.0 - m0 - md,
        "1-m0+md": 1.0 - m0 + md,
        "2md": 2.0 * md,
        "1-2md": 1.0 - 2.0 * md,
    }


def _branch_currents(i_out, i_circ):
    a = i_out / 2 + i_circ
    b = i_out / 2 - i_circ
    return {"a": a, "b": b, "a/2": a / 2, "b/2": b / 2}


def group_conduction(terms: Sequence[LossTerm], op: OperatingPoint) -> float:
    cur = _branch_currents(op.i_out, op.i_circ)
    duty = _duty_factors(abs(op.m0), abs(op.md2))
    return 2.0 * op.r_ds * sum(t.weight * cur[t.current] ** 2 * duty[t.duty] for t in terms)


def conduction_losses(op: OperatingPoint, topology: Topology = Topology.PROPOSED) -> LossBreakdown:
    per_group = [group_conduction(terms, op) for terms in TERM_TABLES[Topology(topology)]]
    return LossBreakdown(Topology(topology), per_group, switching_losses(op))


def switching_losses(op: OperatingPoint) -> float:
    return 5.0 * op.v_b * op.i_out * op.f_sw * op.timings.total


def core_area_product(l: float, i_peak: float, p: CoreDesignParams = CoreDesignParams()) -> float:
    inner = p.k_t * l * i_peak**2 * np.sqrt(1 + p.gamma) / (p.b_max * p.k_i * np.sqrt(p.k_u * p.delta_t))
    return float(inner ** (8.0 / 7.0))


def core_area_ratio(rho: float) -> float:
    if not rho > 0:
        raise ValueError("rho must be > 0")
    if np.isinf(rho):
        return 1.0
    return float((rho / (0.5 + rho)) ** (16.0 / 7.0))


def min_diff_inductance(v_b_max: float, md2: float, delta_i_diff: float, f_sw: float) -> float:
    if not (delta_i_diff > 0 and f_sw > 0):
        raise ValueError("delta_i_diff and f_sw must be > 0")
    return 2.0 * v_b_max * md2 / (delta_i_diff * f_sw)


def magnetize_current_bound(i_circ_rated: float, v_bj1: float, md2: float, l_eff_dm: float, f_sw: float) -> float:
    return i_circ_rated + 2.0 * v_bj1 * md2 / (l_eff_dm * f_sw)


def min_filter_inductance(v_b: float, m0: float, i_out_rated: float, n_modules: int, f_sw: float) -> float:
    return v_b * m0 / (0.15 * i_out_rated * n_modules * f_sw)


def min_output_capacitance(v_out: float, duty: float, r_out: float, delta_v: float, f_sw: float) -> float:
    return v_out * duty / (r_out * delta_v * f_sw)


@dataclass(frozen=True)
class SweepRow:
    rho: float
    p_proposed: float
    p_benchmark: float
    core_ratio: float


def loss_sweep(op_base: OperatingPoint, rhos: Sequence[float]) -> list:
    rows = []
    for rho in rhos:
        if not 0 < rho <= 0.5:
            raise ValueError(f"rho {rho!r} outside (0, 0.5]")
        op = OperatingPoint(**{**op_base.__dict__, "i_circ": rho * op_base.i_out})
        rows.append(
            SweepRow(
                rho=float(rho),
                p_proposed=conduction_losses(op, Topology.PROPOSED).total,
                p_benchmark=conduction_losses(op, Topology.BENCHMARK).total,
                core_ratio=core_area_ratio(rho),
            )
        )
    return rows
