import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gepp.model import PAPER_PARAMS, Action, Belief, validate_params
from gepp.solver import (EDGE_BOTTOM, EDGE_LEFT, EDGE_RIGHT, EDGE_TOP, ConvergenceError, action_values_at,
                         bellman_backup, bellman_residual, build_grid, evaluate_policy, query_value,
                         read_values_csv, solve_policy_iteration, solve_value_iteration)
from oracles import ChainOracle, balanced_affine

TOL = 1e-9


# -- grid --------------------------------------------------------------------

def test_grid_layout(small_grid):
    g = small_grid
    n = g.n_cells
    assert g.n_states == 4 * n
    # every state appears, corners shared between edges
    assert set(np.unique(g.index)) == set(range(g.n_states))
    assert g.index[EDGE_LEFT, 0] == g.index[EDGE_BOTTOM, 0]
    assert g.index[EDGE_RIGHT, n] == g.index[EDGE_TOP, n]
    assert set(g.corners.values()) == {g.index[EDGE_BOTTOM, 0], g.index[EDGE_BOTTOM, n],
                                       g.index[EDGE_TOP, 0], g.index[EDGE_TOP, n]}
    for s in range(g.n_states):
        b = g.belief(s)
        assert g.find_state(b) == s
        assert min(abs(b.p1 - v) for v in (0.1, 0.9)) < 1e-12 or min(abs(b.p2 - v) for v in (0.1, 0.9)) < 1e-12


def test_grid_mirror_is_coordinate_swap(small_grid):
    g = small_grid
    m = g.mirror
    np.testing.assert_array_equal(m[m], np.arange(g.n_states))
    np.testing.assert_array_equal(g.p1[m], g.p2)
    np.testing.assert_array_equal(g.p2[m], g.p1)


def test_grid_locate_snaps_and_interpolates(small_grid):
    g = small_grid
    k, w = g.locate(g.nodes[5] + 1e-12)
    assert (int(k), float(w)) == (5, 0.0)
    k, w = g.locate(0.5 * (g.nodes[3] + g.nodes[4]))
    assert int(k) == 3 and float(w) == pytest.approx(0.5)
    k, w = g.locate(g.params.lambda1)
    assert g.nodes[int(k)] + float(w) * g.spacing == pytest.approx(g.params.lambda1)


def test_grid_rejects_tiny_n():
    with pytest.raises(ValueError):
        build_grid(PAPER_PARAMS, 1)


def test_degenerate_rectangle_is_iid():
    # lambda0 = lambda1 = p: channels are i.i.d. every slot, belief is always p
    p = validate_params((0.4, 0.4, 2, 3, 0.9))
    g = build_grid(p, 8)
    assert g.degenerate and g.n_states == 1
    v = solve_value_iteration(g, TOL)
    expected = max(2 * 0.4 * 2, 0.4 * 3) / (1 - 0.9)
    assert v.values[0] == pytest.approx(expected, abs=1e-8)
    assert solve_policy_iteration(g, TOL).values[0] == pytest.approx(expected, abs=1e-10)


# -- solvers -----------------------------------------------------------------

def test_myopic_solve_and_query():
    p = PAPER_PARAMS.replace(beta=0.0)
    g = build_grid(p, 16)
    v = solve_value_iteration(g, TOL)
    assert v.iterations == 1
    np.testing.assert_allclose(v.values, np.maximum((g.p1 + g.p2) * 2, np.maximum(g.p1, g.p2) * 3))
    val, av = query_value(Belief(0.5, 0.5), v)
    assert val == 2.0 and av.best_action() is Action.BALANCED


def test_always_balanced_matches_affine_closed_form(small_grid):
    # Balanced only moves to corners, so the grid evaluation is exact
    v = evaluate_policy(small_grid, Action.BALANCED)
    c0, c1 = balanced_affine(PAPER_PARAMS)
    np.testing.assert_allclose(v, c0 + c1 * (small_grid.p1 + small_grid.p2), atol=1e-9)
    assert c0 + c1 == pytest.approx(20.0, abs=1e-12)


def test_value_iteration_residual_and_contraction(small_vi):
    beta = PAPER_PARAMS.beta
    assert small_vi.residual <= TOL
    d = np.array(small_vi.sweep_deltas)
    assert np.all(d[1:] <= beta * d[:-1] * (1 + 1e-9) + 1e-14)


def test_value_iteration_and_policy_iteration_agree(small_vi, small_pi):
    assert small_pi.residual <= TOL
    assert np.abs(small_vi.values - small_pi.values).max() <= 2 * TOL


def test_value_iteration_cap_raises(small_grid):
    with pytest.raises(ConvergenceError):
        solve_value_iteration(small_grid, TOL, max_iter=5)


def test_solved_values_are_read_only(small_pi):
    with pytest.raises(ValueError):
        small_pi.values[0] = 1.0


def test_symmetry_and_convexity(paper_values):
    v = paper_values
    g = v.grid
    assert np.abs(v.values - v.values[g.mirror]).max() <= 10 * TOL
    for e in (EDGE_BOTTOM, EDGE_TOP, EDGE_LEFT, EDGE_RIGHT):
        assert np.diff(v.edge_values(e), 2).min() >= -10 * TOL


def test_backup_matches_matrix_form(paper_values):
    v = paper_values
    g = v.grid
    q = action_values_at(v, g.p1, g.p2)
    np.testing.assert_allclose(q, v.q_values, atol=1e-11)
    for s in (0, 17, g.n_states - 1):
        val, _ = query_value(g.belief(s), v)
        assert val == pytest.approx(v.values[s], abs=TOL)
    av = bellman_backup(g.belief(3), v)
    assert av.as_array() == pytest.approx(v.q_values[:, 3])


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_query_value_symmetric(paper_values, x, y):
    a, _ = query_value(Belief(x, y), paper_values)
    b, _ = query_value(Belief(y, x), paper_values)
    assert a == pytest.approx(b, abs=10 * TOL)


# -- against the exact chain oracle ------------------------------------------

def test_grid_overestimates_exact_values_by_a_shrinking_amount(paper_oracle):
    # interpolating a convex function from above makes the grid MDP optimistic
    exact = paper_oracle.corner_values().max(axis=0)
    errs = []
    for n in (32, 128, 512):
        v = solve_policy_iteration(build_grid(PAPER_PARAMS, n), TOL)
        g = v.grid
        grid_corners = np.array([[v.values[g.corners[k1, k2]] for k2 in (0, 1)] for k1 in (0, 1)])
        diff = grid_corners - exact
        assert diff.min() >= -1e-9
        assert diff.max() <= PAPER_PARAMS.beta / (1 - PAPER_PARAMS.beta) * v.cell_bound()
        errs.append(diff.max())
    assert errs[0] > errs[1] > errs[2]


def test_exact_in_zero_threshold_regime():
    # Balanced everywhere only visits corners, so no interpolation enters
    p = validate_params((0.5, 0.9, 2, 3, 0.9))
    v = solve_policy_iteration(build_grid(p, 8), TOL)
    o = ChainOracle(p)
    g = v.grid
    for (k1, k2), s in g.corners.items():
        assert v.values[s] == pytest.approx(o.v[k1, k2, 0], abs=1e-9)


# -- csv round trip ------------------------------------------------------------

def test_values_csv_round_trip(small_pi):
    buf = io.StringIO()
    small_pi.write_csv(buf)
    text = buf.getvalue()
    assert text.splitlines()[0] == "edge_id,q,p1,p2,value,v_balanced,v_bet1,v_bet2"
    back = read_values_csv(small_pi.grid, io.StringIO(text))
    np.testing.assert_array_equal(back.values, small_pi.values)
    assert back.solver == "external"
    assert back.residual == pytest.approx(bellman_residual(small_pi.grid, small_pi.values))


def test_values_csv_must_cover_grid(small_pi):
    buf = io.StringIO()
    small_pi.write_csv(buf)
    lines = buf.getvalue().splitlines()
    with pytest.raises(ValueError, match="cover"):
        read_values_csv(small_pi.grid, io.StringIO("\n".join(lines[:-3]) + "\n"))
