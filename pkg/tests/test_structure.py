import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gepp.model import PAPER_PARAMS, Action
from gepp.pipeline import analyze
from gepp.solver import EDGE_BOTTOM, EDGE_TOP, action_values_at, build_grid, solve_policy_iteration
from gepp.structure import (ANOMALOUS, TWO_THRESHOLD, ZERO_THRESHOLD, balanced_fraction, check_structure,
                            extract_policy, scan_thresholds, square_layout, square_policy)

TOL = 1e-9


@pytest.fixture(scope="module")
def paper_policy(paper_analysis):
    return paper_analysis.policy


def test_paper_parameters_two_threshold(paper_analysis):
    thr = paper_analysis.thresholds
    assert thr.structure == TWO_THRESHOLD
    lo, hi = thr.rho1_bracket
    assert lo <= thr.rho1_refined <= hi or abs(thr.rho1_refined - thr.rho1_scan) <= 1.5 * thr.grid_spacing
    assert abs(thr.rho1_scan - thr.rho1_refined) <= thr.grid_spacing
    assert abs(thr.rho2_scan - thr.rho2_refined) <= thr.grid_spacing
    assert paper_analysis.structure.passed


def test_refined_thresholds_are_sign_changes(paper_analysis):
    v = paper_analysis.pi
    thr = paper_analysis.thresholds
    l0, l1 = PAPER_PARAMS.lambda0, PAPER_PARAMS.lambda1
    eps = 1e-6
    d = lambda x: float(np.subtract(*action_values_at(v, x, l0)[[0, 1]]))  # noqa: E731
    assert d(thr.rho1_refined - eps) > 0 > d(thr.rho1_refined + eps)
    d2 = lambda x: float(np.subtract(*action_values_at(v, x, l1)[[0, 2]]))  # noqa: E731
    assert d2(thr.rho2_refined - eps) < 0 < d2(thr.rho2_refined + eps)


def test_refined_threshold_matches_exact_oracle(paper_analysis, paper_oracle):
    assert paper_analysis.thresholds.rho1_refined == pytest.approx(paper_oracle.rho1(), abs=1e-5)


def test_zero_threshold_regime():
    a = analyze(PAPER_PARAMS.replace(lambda0=0.5), grid_n=128)
    assert a.thresholds.structure == ZERO_THRESHOLD
    assert (a.policy.action_per_state == Action.BALANCED).all()
    assert a.thresholds.normalized(a.params) == (1.0, 1.0)
    assert a.structure.passed


def test_myopic_thresholds():
    a = analyze(PAPER_PARAMS.replace(beta=0.0), grid_n=64)
    t = a.thresholds
    assert t.structure == TWO_THRESHOLD
    assert t.rho1_refined == pytest.approx(0.2, abs=1e-9)
    assert t.rho2_refined == pytest.approx(0.45, abs=1e-9)
    assert abs(t.rho1_scan - 0.2) <= t.grid_spacing


def test_balanced_region_grows_with_lambda0():
    f = [balanced_fraction(analyze(PAPER_PARAMS.replace(lambda0=x), grid_n=64).policy) for x in (0.1, 0.3, 0.5)]
    assert f[0] < f[1] < f[2] == 1.0


def test_side_exclusion_injected_fault(paper_policy):
    g = paper_policy.grid
    node = int(np.flatnonzero(np.isclose(g.nodes, 0.5))[0])
    s = int(g.index[EDGE_BOTTOM, node])
    acts = paper_policy.action_per_state.copy()
    acts[s] = Action.BET2
    bad = paper_policy.with_actions(acts)
    rep = check_structure(bad.values, bad)
    assert not rep.results["side_exclusion"].passed
    assert scan_thresholds(bad).structure == ANOMALOUS


def test_contiguity_and_mirror_injected_faults(paper_policy):
    g = paper_policy.grid
    bottom = g.index[EDGE_BOTTOM]
    acts = paper_policy.action_per_state.copy()
    bet1 = bottom[acts[bottom] == Action.BET1]
    acts[bet1[len(bet1) // 2]] = Action.BALANCED  # hole in the Bet1 run
    bad = paper_policy.with_actions(acts)
    rep = check_structure(bad.values, bad)
    assert not rep.results["contiguity"].passed
    assert not rep.results["balanced_mirror"].passed
    assert scan_thresholds(bad).structure == ANOMALOUS


def test_tie_tolerance_exempts_only_near_ties(paper_policy):
    # relabel the last Balanced node before the switch as Bet1
    g = paper_policy.grid
    q = paper_policy.values.q_values
    bottom = g.index[EDGE_BOTTOM]
    acts = paper_policy.action_per_state.copy()
    s = int(bottom[np.flatnonzero(acts[bottom] == Action.BET1)[0] - 1])
    acts[s] = Action.BET1
    moved = paper_policy.with_actions(acts)
    gap = float(q[0, s] - q[1, s])
    assert gap > 0
    assert check_structure(moved.values, moved, tol=2 * gap).passed
    assert not check_structure(moved.values, moved, tol=0.5 * gap).passed


def test_lemma5_value_level(paper_values):
    q = paper_values.q_values
    g = paper_values.grid
    b = g.index[EDGE_BOTTOM]
    t = g.index[EDGE_TOP]
    assert (q[2, b] <= np.maximum(q[0, b], q[1, b]) + TOL).all()
    assert (q[1, t] <= np.maximum(q[0, t], q[2, t]) + TOL).all()


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_action_value_mirror_identities(paper_values, x, y):
    a = action_values_at(paper_values, x, y)
    b = action_values_at(paper_values, y, x)
    assert a[1] == pytest.approx(b[2], abs=10 * TOL)
    assert a[0] == pytest.approx(b[0], abs=10 * TOL)


def test_square_layout(paper_values):
    sq = square_policy(paper_values, 101)
    lay = square_layout(sq)
    assert lay["ok"], lay
    assert lay["fractions"]["bet1"] == pytest.approx(lay["fractions"]["bet2"])
    rep = check_structure(paper_values, extract_policy(paper_values), square=sq)
    assert rep.passed


def test_policy_csv(paper_policy):
    buf = io.StringIO()
    paper_policy.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "p1,p2,action,v_balanced,v_bet1,v_bet2"
    assert len(lines) == paper_policy.grid.n_states + 1
    assert {ln.split(",")[2] for ln in lines[1:]} == {"balanced", "bet1", "bet2"}


def test_square_csv_shapes(small_pi):
    sq = square_policy(small_pi, 5)
    buf = io.StringIO()
    sq.write_csv(buf)
    assert len(buf.getvalue().splitlines()) == 26
    with pytest.raises(ValueError):
        square_policy(small_pi, 1)


def test_policy_act_agrees_with_grid(small_pi):
    pol = extract_policy(small_pi)
    g = small_pi.grid
    np.testing.assert_array_equal(pol.act(g.p1, g.p2), pol.action_per_state)


def test_high_rate_stays_two_threshold():
    v = solve_policy_iteration(build_grid(PAPER_PARAMS.replace(lambda0=0.7, r_high=3.8), 128), TOL)
    assert scan_thresholds(extract_policy(v)).structure == TWO_THRESHOLD
    assert (extract_policy(v).edge_actions(EDGE_TOP) == Action.BET2).any()
