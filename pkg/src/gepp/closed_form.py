"""Closed-form thresholds from corner action-value differences.

On the side p2 = l0 the threshold rho1 is where Balanced and Bet1 tie; on
p2 = l1, rho2 is where Balanced and Bet2 tie.  Writing both action values
through corner quantities gives a rational formula in each of four cases.
The cases depend on which action is optimal at the continuation beliefs,
which in turn depends on the threshold being computed, so every formula
is evaluated and the self-consistent one is kept.

Corner differences are ``d(i, j, k1, k2) = V_i(k1, k2) - V_j(k1, k2)``
with k = 0 for lambda0 and k = 1 for lambda1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Action, ModelParams, tau
from .solver import BorderValueFunction, action_values_at

B, B1, B2 = int(Action.BALANCED), int(Action.BET1), int(Action.BET2)


@dataclass(frozen=True)
class DeltaTable:
    """Action values at the four corners; ``table[i, j, k1, k2]`` holds d_ij."""

    corner_values: np.ndarray  # (3, 2, 2): action, k1, k2
    table: np.ndarray  # (3, 3, 2, 2)

    def d(self, i: int, j: int, k1: int, k2: int) -> float:
        return float(self.table[i, j, k1, k2])


def delta_table_from_corners(corner_values) -> DeltaTable:
    cv = np.array(corner_values, dtype=float).reshape(3, 2, 2)
    return DeltaTable(cv, cv[:, None, :, :] - cv[None, :, :, :])


def compute_delta_table(values: BorderValueFunction) -> DeltaTable:
    pr = values.grid.params
    lam = (pr.lambda0, pr.lambda1)
    cv = np.empty((3, 2, 2))
    for k1 in (0, 1):
        for k2 in (0, 1):
            cv[:, k1, k2] = action_values_at(values, lam[k1], lam[k2])
    return delta_table_from_corners(cv)


def _ratio(num: float, den: float) -> float:
    return num / den if den != 0.0 else math.nan


def rho1_candidates(dt: DeltaTable, params: ModelParams) -> dict[int, float]:
    l0, rl, rh, beta = params.lambda0, params.r_low, params.r_high, params.beta
    d = dt.d
    return {
        1: _ratio(l0 * rl + beta * l0 * d(B2, B, 0, 1),
                  rh - rl + beta * l0 * (d(B1, B, 1, 1) + d(B2, B, 0, 1))),
        2: _ratio(l0 * rl + beta * (1 - l0) * d(B, B2, 0, 0),
                  rh - rl + beta * l0 * d(B1, B, 1, 1) + beta * (1 - l0) * d(B, B2, 0, 0)),
        3: _ratio(l0 * rl + beta * l0 * d(B2, B, 0, 1),
                  rh - rl + beta * l0 * d(B2, B, 0, 1) + beta * (1 - l0) * d(B, B1, 1, 0)),
        # Balanced at (lambda1, T(lambda0)), Bet2 at (lambda0, T(lambda0)).
        # The (lambda0, lambda1) terms cancel because Bet2 is optimal there.
        4: _ratio(l0 * rl + beta * (1 - l0) * d(B, B2, 0, 0),
                  rh - rl + beta * (1 - l0) * (d(B, B2, 0, 0) + d(B, B1, 1, 0))),
    }


def rho1_case4_as_printed(dt: DeltaTable, params: ModelParams) -> float:
    """Case-4 variant carrying d(Bet2, Bet1) at (lambda0, lambda1).

    Kept for comparison only: it takes Bet1 as optimal at (lambda0,
    lambda1), which the side exclusion rules out, and it disagrees with the
    scanned threshold whenever that case is active.
    """
    l0, rl, rh, beta = params.lambda0, params.r_low, params.r_high, params.beta
    d = dt.d
    return _ratio(l0 * rl + beta * l0 * d(B2, B1, 0, 1) + beta * (1 - l0) * d(B, B1, 0, 0),
                  rh - rl + beta * l0 * d(B2, B1, 0, 1)
                  + beta * (1 - l0) * (d(B, B1, 1, 0) + d(B, B1, 0, 0)))


def rho2_candidates(dt: DeltaTable, params: ModelParams) -> dict[int, float]:
    l1, rl, rh, beta = params.lambda1, params.r_low, params.r_high, params.beta
    d = dt.d
    return {
        1: _ratio(l1 * (rh - rl) - beta * l1 * d(B2, B, 0, 1) - beta * (1 - l1) * d(B, B1, 0, 0),
                  rl - beta * l1 * d(B2, B, 0, 1) - beta * (1 - l1) * d(B, B1, 0, 0)),
        2: _ratio(l1 * (rh - rl) - beta * l1 * d(B2, B, 0, 1),
                  rl - beta * l1 * d(B2, B, 0, 1) - beta * (1 - l1) * d(B, B1, 1, 0)),
        3: _ratio(l1 * (rh - rl) - beta * (1 - l1) * d(B, B1, 0, 0),
                  rl - beta * l1 * d(B2, B, 1, 1) - beta * (1 - l1) * d(B, B1, 0, 0)),
        4: _ratio(l1 * (rh - rl),
                  rl - beta * l1 * d(B2, B, 1, 1) - beta * (1 - l1) * d(B, B1, 1, 0)),
    }


def rho1_conditions(case: int, rho1: float, rho2_hint: float, params: ModelParams) -> bool:
    t0 = tau(params.lambda0, params)
    below_rho2 = t0 < rho2_hint
    within_rho1 = t0 <= rho1
    return {1: below_rho2 and within_rho1, 2: below_rho2 and not within_rho1,
            3: not below_rho2 and within_rho1, 4: not below_rho2 and not within_rho1}[case]


def rho2_conditions(case: int, rho2: float, rho1_hint: float, params: ModelParams) -> bool:
    t = tau(rho2, params)
    at_or_above = t >= rho2
    above_rho1 = t > rho1_hint
    return {1: at_or_above and above_rho1, 2: at_or_above and not above_rho1,
            3: not at_or_above and above_rho1, 4: not at_or_above and not above_rho1}[case]


@dataclass(frozen=True)
class CaseSelection:
    value: float
    case: int  # 0 when no case is self-consistent
    candidates: dict[int, float]
    consistent: dict[int, bool]
    ambiguous: bool

    @property
    def found(self) -> bool:
        return self.case != 0


def _select(cands: dict[int, float], consistent: dict[int, bool], scan_hint: float | None) -> CaseSelection:
    ok = [c for c in sorted(cands) if consistent[c]]
    if not ok:
        return CaseSelection(math.nan, 0, cands, consistent, False)
    if len(ok) > 1 and scan_hint is not None and math.isfinite(scan_hint):
        ok.sort(key=lambda c: (abs(cands[c] - scan_hint), c))
    return CaseSelection(cands[ok[0]], ok[0], cands, consistent, len(ok) > 1)


def rho1_closed_form(deltas: DeltaTable, params: ModelParams, rho2_hint: float,
                     scan_hint: float | None = None) -> tuple[float, int]:
    sel = select_rho1(deltas, params, rho2_hint, scan_hint)
    return sel.value, sel.case


def select_rho1(deltas: DeltaTable, params: ModelParams, rho2_hint: float,
                scan_hint: float | None = None) -> CaseSelection:
    cands = rho1_candidates(deltas, params)
    consistent = {c: math.isfinite(v) and rho1_conditions(c, v, rho2_hint, params) for c, v in cands.items()}
    return _select(cands, consistent, scan_hint)


def rho2_closed_form(deltas: DeltaTable, params: ModelParams, rho1_hint: float,
                     scan_hint: float | None = None) -> tuple[float, int]:
    sel = select_rho2(deltas, params, rho1_hint, scan_hint)
    return sel.value, sel.case


def select_rho2(deltas: DeltaTable, params: ModelParams, rho1_hint: float,
                scan_hint: float | None = None) -> CaseSelection:
    cands = rho2_candidates(deltas, params)
    consistent = {c: math.isfinite(v) and rho2_conditions(c, v, rho1_hint, params) for c, v in cands.items()}
    return _select(cands, consistent, scan_hint)


@dataclass(frozen=True)
class ClosedFormResult:
    rho1_cf: float
    rho1_case: int
    rho2_cf: float
    rho2_case: int
    consistency: dict = field(default_factory=dict)
    deferred: bool = False

    def as_dict(self) -> dict:
        return {"rho1_cf": self.rho1_cf, "rho1_case": self.rho1_case,
                "rho2_cf": self.rho2_cf, "rho2_case": self.rho2_case,
                "deferred_to_scan": self.deferred, "consistency": self.consistency}


def closed_form_thresholds(values: BorderValueFunction, rho1_hint: float, rho2_hint: float,
                           structure: str | None = None) -> ClosedFormResult:
    """Both thresholds, using the scanned (refined) ones as case hints.

    For a zero-threshold scan verdict the formulas have no meaning; the
    result is still filled in but marked as deferred to the scan.
    """
    pr = values.grid.params
    dt = compute_delta_table(values)
    s1 = select_rho1(dt, pr, rho2_hint, rho1_hint)
    s2 = select_rho2(dt, pr, rho1_hint, rho2_hint)
    in_range = lambda v: math.isfinite(v) and pr.lambda0 <= v <= pr.lambda1  # noqa: E731
    consistency = {
        "rho1": {"candidates": {str(k): v for k, v in s1.candidates.items()},
                 "self_consistent": {str(k): v for k, v in s1.consistent.items()},
                 "ambiguous": s1.ambiguous, "in_range": in_range(s1.value),
                 "case4_as_printed": rho1_case4_as_printed(dt, pr)},
        "rho2": {"candidates": {str(k): v for k, v in s2.candidates.items()},
                 "self_consistent": {str(k): v for k, v in s2.consistent.items()},
                 "ambiguous": s2.ambiguous, "in_range": in_range(s2.value)},
    }
    return ClosedFormResult(s1.value, s1.case, s2.value, s2.case, consistency,
                            deferred=(structure == "zero-threshold"))
