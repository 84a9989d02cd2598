"""One full analysis of a parameter set: solve, certify, extract, compare."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .closed_form import ClosedFormResult, closed_form_thresholds
from .lp import LpVerificationReport, build_lp, verify_solution
from .model import ModelParams
from .solver import (DEFAULT_N, DEFAULT_TOL, BorderGrid, BorderValueFunction, build_grid,
                     solve_policy_iteration, solve_value_iteration)
from .structure import (TWO_THRESHOLD, PolicyMap, StructureReport, ThresholdReport, check_structure,
                        extract_policy, scan_thresholds)

LP_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Analysis:
    params: ModelParams
    grid: BorderGrid
    vi: BorderValueFunction
    pi: BorderValueFunction
    solver_gap: float
    lp_report: LpVerificationReport
    policy: PolicyMap
    thresholds: ThresholdReport
    closed_form: ClosedFormResult
    structure: StructureReport

    def summary(self) -> dict:
        r1n, r2n = self.thresholds.normalized(self.params)
        out = {
            "params": self.params.as_dict(),
            "grid_n": self.grid.n_cells,
            "n_states": self.grid.n_states,
            "tol": self.vi.tol,
            "vi_residual": self.vi.residual,
            "vi_sweeps": self.vi.iterations,
            "pi_residual": self.pi.residual,
            "pi_rounds": self.pi.iterations,
            "solver_agreement": self.solver_gap,
            "lp": self.lp_report.as_dict(),
            "thresholds": self.thresholds.as_dict(),
            "normalized": {"rho1": r1n, "rho2": r2n},
            "closed_form": self.closed_form.as_dict(),
            "structure_checks": self.structure.as_dict(),
            "structure_checks_passed": self.structure.passed,
        }
        if self.thresholds.structure == TWO_THRESHOLD:
            out["cf_minus_scan"] = {"rho1": self.closed_form.rho1_cf - self.thresholds.rho1_refined,
                                    "rho2": self.closed_form.rho2_cf - self.thresholds.rho2_refined}
        return out


def analyze(params: ModelParams, grid_n: int = DEFAULT_N, tol: float = DEFAULT_TOL,
            lp_tol: float = LP_TOL, tie_tol: float | None = None) -> Analysis:
    grid = build_grid(params, grid_n)
    vi = solve_value_iteration(grid, tol)
    pi = solve_policy_iteration(grid, tol)
    gap = float(np.abs(vi.values - pi.values).max())
    lp_report = verify_solution(build_lp(grid), pi, lp_tol)
    policy = extract_policy(pi) if tie_tol is None else extract_policy(pi, tie_tol)
    thr = scan_thresholds(policy)
    cf = closed_form_thresholds(pi, thr.rho1_refined, thr.rho2_refined, thr.structure)
    struct = check_structure(pi, policy)
    return Analysis(params, grid, vi, pi, gap, lp_report, policy, thr, cf, struct)
