"""Value function of the belief MDP on the reachable rectangle border.

Once both channels have been observed, every belief lies on one of the four
sides of [lambda0, lambda1]^2.  The solver discretizes those sides with N
uniform cells each and treats the result as a finite MDP: Balanced moves to
a corner, betting moves to a side at coordinate tau(q), which is generally
off-grid and is split between the two neighbouring nodes.  Beliefs off the
border are answered by one exact backup against the border values.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._io import fmt, open_sink
from .model import BELIEF_ATOL, Action, Belief, ModelParams, tau

log = logging.getLogger(__name__)

EDGE_BOTTOM, EDGE_TOP, EDGE_LEFT, EDGE_RIGHT = 0, 1, 2, 3
EDGE_NAMES = ("bottom", "top", "left", "right")

DEFAULT_N = 512
DEFAULT_TOL = 1e-9


class ConvergenceError(RuntimeError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class BorderGrid:
    """Uniform discretization of the four border segments.

    ``index[e, i]`` is the state id of node i on edge e.  Edges are bottom
    (q, l0), top (q, l1), left (l0, q), right (l1, q).  Corners are owned by
    the bottom and top edges, so states are numbered bottom 0..N, top
    0..N, then the interior nodes of left and right: 4N states in all.
    """

    params: ModelParams
    n_cells: int
    nodes: np.ndarray
    index: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    edge_id: np.ndarray
    node_id: np.ndarray
    mirror: np.ndarray

    @property
    def n_states(self) -> int:
        return int(self.p1.shape[0])

    @property
    def degenerate(self) -> bool:
        return self.params.lambda1 - self.params.lambda0 <= 0.0

    @property
    def spacing(self) -> float:
        return (self.params.lambda1 - self.params.lambda0) / self.n_cells

    @property
    def corners(self) -> dict[tuple[int, int], int]:
        """State ids keyed by (k1, k2), k = 0 for lambda0 and 1 for lambda1."""
        n = self.n_cells
        return {
            (0, 0): int(self.index[EDGE_BOTTOM, 0]),
            (1, 0): int(self.index[EDGE_BOTTOM, n]),
            (0, 1): int(self.index[EDGE_TOP, 0]),
            (1, 1): int(self.index[EDGE_TOP, n]),
        }

    def belief(self, s: int) -> Belief:
        return Belief(float(self.p1[s]), float(self.p2[s]))

    def locate(self, x):
        """Left node and weight of the right node for coordinate(s) x.

        x must lie in [lambda0, lambda1]; nodes within 1e-9 (in cell units)
        are snapped so on-node lookups carry weight exactly 0.
        """
        x = np.asarray(x, dtype=float)
        n = self.n_cells
        if self.degenerate:
            return np.zeros(x.shape, dtype=np.intp), np.zeros(x.shape)
        u = (x - self.params.lambda0) / (self.params.lambda1 - self.params.lambda0) * n
        u = np.clip(u, 0.0, float(n))
        r = np.rint(u)
        u = np.where(np.abs(u - r) <= BELIEF_ATOL, r, u)
        k = np.minimum(np.floor(u).astype(np.intp), n - 1)
        return k, u - k

    def find_state(self, b: Belief, atol: float = BELIEF_ATOL) -> int | None:
        hit = np.flatnonzero((np.abs(self.p1 - b.p1) <= atol) & (np.abs(self.p2 - b.p2) <= atol))
        return int(hit[0]) if hit.size else None

    def edge_coordinate(self, s: int) -> float:
        return float(self.nodes[self.node_id[s]])

    @cached_property
    def kernel(self) -> tuple[np.ndarray, tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]]:
        """Expected rewards (3, S) and row-stochastic transition matrices."""
        return _build_kernel(self)


def build_grid(params: ModelParams, n_cells: int = DEFAULT_N) -> BorderGrid:
    if int(n_cells) != n_cells or n_cells < 2:
        raise ValueError(f"n_cells must be an integer >= 2, got {n_cells}")
    n = int(n_cells)
    l0, l1 = params.lambda0, params.lambda1
    nodes = l0 + (l1 - l0) * np.arange(n + 1) / n
    nodes[-1] = l1

    if l1 - l0 <= 0.0:
        index = np.zeros((4, n + 1), dtype=np.intp)
        one = np.array([l0])
        return BorderGrid(params, n, nodes, index, one, one.copy(),
                          np.zeros(1, np.intp), np.zeros(1, np.intp), np.zeros(1, np.intp))

    i = np.arange(n + 1)
    inner = np.arange(1, n)
    index = np.empty((4, n + 1), dtype=np.intp)
    index[EDGE_BOTTOM] = i
    index[EDGE_TOP] = n + 1 + i
    index[EDGE_LEFT, 1:n] = 2 * n + 2 + (inner - 1)
    index[EDGE_RIGHT, 1:n] = 3 * n + 1 + (inner - 1)
    index[EDGE_LEFT, 0], index[EDGE_LEFT, n] = index[EDGE_BOTTOM, 0], index[EDGE_TOP, 0]
    index[EDGE_RIGHT, 0], index[EDGE_RIGHT, n] = index[EDGE_BOTTOM, n], index[EDGE_TOP, n]

    s = 4 * n
    p1, p2 = np.empty(s), np.empty(s)
    edge_id, node_id = np.empty(s, np.intp), np.empty(s, np.intp)
    for e, ids in ((EDGE_BOTTOM, i), (EDGE_TOP, i), (EDGE_LEFT, inner), (EDGE_RIGHT, inner)):
        st = index[e, ids]
        edge_id[st], node_id[st] = e, ids
        fixed = (l0, l1, l0, l1)[e]
        if e in (EDGE_BOTTOM, EDGE_TOP):
            p1[st], p2[st] = nodes[ids], fixed
        else:
            p1[st], p2[st] = fixed, nodes[ids]

    # (q, l0) <-> (l0, q) and (q, l1) <-> (l1, q)
    mirror = np.empty(s, np.intp)
    mirror[index[EDGE_BOTTOM]] = index[EDGE_LEFT]
    mirror[index[EDGE_LEFT]] = index[EDGE_BOTTOM]
    mirror[index[EDGE_TOP]] = index[EDGE_RIGHT]
    mirror[index[EDGE_RIGHT]] = index[EDGE_TOP]

    return BorderGrid(params, n, nodes, index, p1, p2, edge_id, node_id, mirror)


def _build_kernel(grid: BorderGrid):
    pr = grid.params
    s = grid.n_states
    p1, p2 = grid.p1, grid.p2
    rows = np.arange(s)
    c = grid.corners
    idx = grid.index

    g = np.vstack([(p1 + p2) * pr.r_low, p1 * pr.r_high, p2 * pr.r_high])

    def csr(data, cols, reps):
        return sp.csr_matrix((np.concatenate(data), (np.tile(rows, reps), np.concatenate(cols))),
                             shape=(s, s))

    full = lambda st: np.full(s, st, dtype=np.intp)  # noqa: E731
    pb = csr([(1 - p1) * (1 - p2), p1 * (1 - p2), (1 - p1) * p2, p1 * p2],
             [full(c[0, 0]), full(c[1, 0]), full(c[0, 1]), full(c[1, 1])], 4)

    k, w = grid.locate(tau(p2, pr))
    k1 = np.minimum(k + 1, grid.n_cells)
    pbet1 = csr([(1 - p1) * (1 - w), (1 - p1) * w, p1 * (1 - w), p1 * w],
                [idx[EDGE_LEFT, k], idx[EDGE_LEFT, k1], idx[EDGE_RIGHT, k], idx[EDGE_RIGHT, k1]], 4)

    k, w = grid.locate(tau(p1, pr))
    k1 = np.minimum(k + 1, grid.n_cells)
    pbet2 = csr([(1 - p2) * (1 - w), (1 - p2) * w, p2 * (1 - w), p2 * w],
                [idx[EDGE_BOTTOM, k], idx[EDGE_BOTTOM, k1], idx[EDGE_TOP, k], idx[EDGE_TOP, k1]], 4)

    mats = []
    for m in (pb, pbet1, pbet2):
        m.sum_duplicates()
        m.eliminate_zeros()
        mats.append(m)
    return g, tuple(mats)


@dataclass(frozen=True)
class ActionValues:
    v_balanced: float
    v_bet1: float
    v_bet2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v_balanced, self.v_bet1, self.v_bet2])

    def __getitem__(self, a: Action) -> float:
        return float(self.as_array()[int(a)])

    @property
    def best_value(self) -> float:
        return max(self.v_balanced, self.v_bet1, self.v_bet2)

    def best_action(self, tie_tol: float = 0.0) -> Action:
        return Action(int(greedy_actions(self.as_array()[:, None], tie_tol)[0]))


def greedy_actions(q: np.ndarray, tie_tol: float = 0.0) -> np.ndarray:
    """Argmax over axis 0 with preference BALANCED > BET1 > BET2 on ties."""
    best = q.max(axis=0)
    near = q >= best - tie_tol
    return np.argmax(near, axis=0)


@dataclass(frozen=True, eq=False)
class BorderValueFunction:
    grid: BorderGrid
    values: np.ndarray
    residual: float
    solver: str
    tol: float
    iterations: int = 0
    sweep_deltas: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @cached_property
    def q_values(self) -> np.ndarray:
        """Action values (3, S) at every grid state."""
        g, mats = self.grid.kernel
        beta = self.grid.params.beta
        q = np.vstack([g[a] + beta * (mats[a] @ self.values) for a in range(3)])
        q.setflags(write=False)
        return q

    def edge_values(self, edge: int) -> np.ndarray:
        return self.values[self.grid.index[edge]]

    def cell_bound(self) -> float:
        """Largest value change across one grid cell on any edge.

        Bounds the interpolation error of a continuation value; one backup
        discounts it by beta.
        """
        if self.grid.degenerate:
            return 0.0
        return float(max(np.abs(np.diff(self.edge_values(e))).max() for e in range(4)))

    def write_csv(self, dest) -> None:
        q = self.q_values
        g = self.grid
        with open_sink(dest) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["edge_id", "q", "p1", "p2", "value", "v_balanced", "v_bet1", "v_bet2"])
            for s in range(g.n_states):
                w.writerow([int(g.edge_id[s]), fmt(g.nodes[g.node_id[s]]), fmt(g.p1[s]), fmt(g.p2[s]),
                            fmt(self.values[s]), fmt(q[0, s]), fmt(q[1, s]), fmt(q[2, s])])


def bellman_residual(grid: BorderGrid, v: np.ndarray) -> float:
    g, mats = grid.kernel
    beta = grid.params.beta
    tv = np.max([g[a] + beta * (mats[a] @ v) for a in range(3)], axis=0)
    return float(np.abs(tv - v).max())


def solve_value_iteration(grid: BorderGrid, tol: float = DEFAULT_TOL,
                          max_iter: int = 1_000_000) -> BorderValueFunction:
    """Jacobi value iteration from V = 0.

    Stops once the sup-norm update drops to tol*(1-beta)/(2*beta), which
    puts the iterate within tol of the fixed point of the grid MDP.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    g, mats = grid.kernel
    beta = grid.params.beta
    v = np.zeros(grid.n_states)
    if beta == 0.0:
        v = g.max(axis=0)
        return BorderValueFunction(grid, v, 0.0, "value-iteration", tol, 1, (float(np.abs(v).max()),))

    stop = tol * (1.0 - beta) / (2.0 * beta)
    deltas = []
    for it in range(1, max_iter + 1):
        vn = np.maximum(np.maximum(g[0] + beta * (mats[0] @ v), g[1] + beta * (mats[1] @ v)),
                        g[2] + beta * (mats[2] @ v))
        delta = float(np.abs(vn - v).max())
        deltas.append(delta)
        v = vn
        if delta <= stop:
            break
    else:
        raise ConvergenceError(f"value iteration did not converge in {max_iter} sweeps "
                               f"(last delta {deltas[-1]:.3e})")
    res = bellman_residual(grid, v)
    log.debug("value iteration: %d sweeps, residual %.3e", it, res)
    return BorderValueFunction(grid, v, res, "value-iteration", tol, it, tuple(deltas))


def evaluate_policy(grid: BorderGrid, actions) -> np.ndarray:
    """Exact value of a stationary policy: solve (I - beta P_pi) v = g_pi."""
    g, mats = grid.kernel
    beta = grid.params.beta
    actions = np.broadcast_to(np.asarray(actions, dtype=np.intp), (grid.n_states,))
    s = grid.n_states
    g_pi = g[actions, np.arange(s)]
    if beta == 0.0:
        return g_pi.copy()
    p_pi = sp.csr_matrix((s, s))
    for a in range(3):
        mask = sp.diags((actions == a).astype(float))
        p_pi = p_pi + mask @ mats[a]
    system = (sp.identity(s, format="csc") - beta * p_pi).tocsc()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", spla.MatrixRankWarning)
        v = np.atleast_1d(spla.spsolve(system, g_pi))
    if not np.all(np.isfinite(v)):
        raise SingularSystemError("policy evaluation system is singular")
    return v


def solve_policy_iteration(grid: BorderGrid, tol: float = DEFAULT_TOL,
                           max_iter: int = 10_000) -> BorderValueFunction:
    """Howard policy iteration started from the myopic policy."""
    g, mats = grid.kernel
    beta = grid.params.beta
    policy = greedy_actions(g)
    # an action only replaces the incumbent if it wins by more than this
    switch_eps = 1e-12 * max(1.0, float(np.abs(g).max()) / max(1e-12, 1.0 - beta))
    cols = np.arange(grid.n_states)
    for it in range(1, max_iter + 1):
        v = evaluate_policy(grid, policy)
        q = np.vstack([g[a] + beta * (mats[a] @ v) for a in range(3)])
        incumbent = q[policy, cols]
        challenger = greedy_actions(q)
        improve = q[challenger, cols] > incumbent + switch_eps
        if not improve.any():
            break
        policy = np.where(improve, challenger, policy)
    else:
        raise ConvergenceError(f"policy iteration did not stabilise in {max_iter} rounds")
    res = bellman_residual(grid, v)
    if res > tol:
        raise ConvergenceError(f"policy iteration residual {res:.3e} exceeds tol {tol:.3e}")
    log.debug("policy iteration: %d rounds, residual %.3e", it, res)
    return BorderValueFunction(grid, v, res, "policy-iteration", tol, it)


def action_values_at(values: BorderValueFunction, p1, p2) -> np.ndarray:
    """One backup at arbitrary belief(s); returns an array of shape (3, ...)."""
    grid = values.grid
    pr = grid.params
    v = values.values
    idx = grid.index
    n = grid.n_cells
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    beta = pr.beta
    c = grid.corners

    vb = (p1 + p2) * pr.r_low + beta * (
        (1 - p1) * (1 - p2) * v[c[0, 0]] + p1 * (1 - p2) * v[c[1, 0]]
        + (1 - p1) * p2 * v[c[0, 1]] + p1 * p2 * v[c[1, 1]])

    def along(edge, x):
        k, w = grid.locate(x)
        k1 = np.minimum(k + 1, n)
        return (1 - w) * v[idx[edge, k]] + w * v[idx[edge, k1]]

    t2 = tau(p2, pr)
    v1 = p1 * pr.r_high + beta * ((1 - p1) * along(EDGE_LEFT, t2) + p1 * along(EDGE_RIGHT, t2))
    t1 = tau(p1, pr)
    v2 = p2 * pr.r_high + beta * ((1 - p2) * along(EDGE_BOTTOM, t1) + p2 * along(EDGE_TOP, t1))
    return np.stack([vb, v1, v2])


def bellman_backup(state: Belief, values: BorderValueFunction) -> ActionValues:
    q = action_values_at(values, state.p1, state.p2)
    return ActionValues(float(q[0]), float(q[1]), float(q[2]))


def query_value(b: Belief, values: BorderValueFunction) -> tuple[float, ActionValues]:
    av = bellman_backup(b, values)
    return av.best_value, av


def read_values_csv(grid: BorderGrid, source, tol: float = DEFAULT_TOL) -> BorderValueFunction:
    """Load a value vector written by ``write_csv`` (or an external solver)."""
    fh = open(source, newline="") if not hasattr(source, "read") else source
    try:
        rows = list(csv.DictReader(fh))
    finally:
        if fh is not source:
            fh.close()
    v = np.full(grid.n_states, math.nan)
    for r in rows:
        e = int(r["edge_id"])
        if grid.degenerate:
            i = 0
        else:
            i = int(round((float(r["q"]) - grid.params.lambda0) / grid.spacing))
        if not 0 <= i <= grid.n_cells or not 0 <= e <= 3:
            raise ValueError(f"row outside grid: {r}")
        v[grid.index[e, i]] = float(r["value"])
    if np.isnan(v).any():
        raise ValueError("values file does not cover every grid state")
    return BorderValueFunction(grid, v, bellman_residual(grid, v), "external", tol)
