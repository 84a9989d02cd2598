import io

import numpy as np
import pytest
from scipy.optimize import linprog

from gepp.lp import build_lp, export_lp, lp_for, read_lp, verify_solution
from gepp.model import PAPER_PARAMS
from gepp.solver import BorderValueFunction, build_grid, solve_policy_iteration


def _text(inst) -> str:
    buf = io.StringIO()
    export_lp(inst, buf)
    return buf.getvalue()


def test_smoke_instance_counts():
    inst = lp_for(PAPER_PARAMS, 4)
    assert inst.n_variables == 16
    assert inst.n_constraints == 48
    text = _text(inst)
    assert sum(line.startswith(" c_") for line in text.splitlines()) == 48
    assert text.rstrip().endswith("End")


def test_export_is_byte_stable_and_round_trips(tmp_path):
    a, b = lp_for(PAPER_PARAMS, 6), lp_for(PAPER_PARAMS, 6)
    assert _text(a) == _text(b)
    path = tmp_path / "m.lp"
    export_lp(a, path)
    assert path.read_text() == _text(a)
    back = read_lp(path)
    assert back.same_as(a)
    assert _text(back) == _text(a)


def test_rows_are_stochastic_and_match_solver_kernel(small_grid):
    inst = build_lp(small_grid)
    f = inst.transitions()
    np.testing.assert_allclose(np.asarray(f.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    g, mats = small_grid.kernel
    for a in range(3):
        rows = np.flatnonzero(inst.row_action == a)
        np.testing.assert_allclose(f[rows].toarray(), mats[a].toarray(), atol=1e-12)
        np.testing.assert_allclose(inst.rhs[rows], g[a], atol=1e-15)


def test_transitions_undefined_without_discount():
    with pytest.raises(ValueError):
        lp_for(PAPER_PARAMS.replace(beta=0.0), 4).transitions()


def test_verify_accepts_solution_and_rejects_perturbations(small_grid, small_pi):
    inst = build_lp(small_grid)
    rep = verify_solution(inst, small_pi)
    assert rep.passed and rep.verdict == "pass"
    assert rep.max_constraint_violation <= 1e-9 and rep.per_state_tightness_gap <= 1e-9

    up = BorderValueFunction(small_grid, small_pi.values + 1e-3, 0.0, "test", 1e-9)
    rep = verify_solution(inst, up)
    assert not rep.passed and rep.per_state_tightness_gap > 1e-6 and rep.max_constraint_violation == 0.0

    down = BorderValueFunction(small_grid, small_pi.values - 1e-3, 0.0, "test", 1e-9)
    rep = verify_solution(inst, down)
    assert not rep.passed and rep.max_constraint_violation > 1e-6
    assert set(rep.as_dict()) == {"max_violation", "max_tightness_gap", "verdict"}


def test_verify_rejects_grid_mismatch(small_pi):
    with pytest.raises(ValueError):
        verify_solution(lp_for(PAPER_PARAMS, 8), small_pi)


@pytest.mark.parametrize("params", [PAPER_PARAMS, PAPER_PARAMS.replace(lambda0=0.3, r_high=3.8)])
def test_independent_lp_solve_matches_policy_iteration(params):
    grid = build_grid(params, 12)
    inst = build_lp(grid)
    res = linprog(inst.objective, A_ub=-inst.matrix.toarray(), b_ub=-inst.rhs,
                  bounds=[(None, None)] * inst.n_variables, method="highs")
    assert res.status == 0
    pi = solve_policy_iteration(grid, 1e-10)
    np.testing.assert_allclose(res.x, pi.values, atol=1e-6)
