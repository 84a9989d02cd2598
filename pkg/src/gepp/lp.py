"""The border-grid MDP as a linear program, plus an LP-optimality check.

The program is

    minimize    sum_p V(p)
    subject to  V(p) - beta * sum_y f_a(p, y) V(y) >= g_a(p)   for all p, a

with one ``>=`` row per (state, action).  Rows are built from
``model.transition_kernel`` one state at a time, independently of the
vectorized matrices the solvers use, so ``verify_solution`` is a genuine
second route.  Files use the CPLEX LP text format and are byte-stable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._io import fmt, open_sink
from .model import ACTIONS, Action, ModelParams, expected_reward, transition_kernel
from .solver import (EDGE_BOTTOM, EDGE_LEFT, EDGE_RIGHT, EDGE_TOP, BorderGrid,
                     BorderValueFunction, build_grid)

_TERMS_PER_OBJ_LINE = 8


@dataclass(frozen=True, eq=False)
class LpInstance:
    params: ModelParams
    n_cells: int
    matrix: sp.csr_matrix  # (3S, S) left-hand sides of the >= rows
    rhs: np.ndarray  # g_a(p) per row
    objective: np.ndarray  # all ones
    row_state: np.ndarray
    row_action: np.ndarray

    @property
    def n_variables(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.matrix.shape[0]

    def transitions(self) -> sp.csr_matrix:
        """Recover f_a(p, .) per row; undefined for beta = 0."""
        beta = self.params.beta
        if beta == 0.0:
            raise ValueError("transition coefficients are not recoverable when beta = 0")
        eye = sp.csr_matrix((np.ones(self.n_constraints), (np.arange(self.n_constraints), self.row_state)),
                            shape=self.matrix.shape)
        return ((eye - self.matrix) / beta).tocsr()

    def same_as(self, other: "LpInstance") -> bool:
        a, b = self.matrix.tocsr(), other.matrix.tocsr()
        a.sort_indices()
        b.sort_indices()
        return (self.params == other.params and self.n_cells == other.n_cells
                and a.shape == b.shape
                and np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
                and np.array_equal(a.data, b.data)
                and np.array_equal(self.rhs, other.rhs)
                and np.array_equal(self.objective, other.objective)
                and np.array_equal(self.row_state, other.row_state)
                and np.array_equal(self.row_action, other.row_action))


@dataclass(frozen=True)
class LpVerificationReport:
    max_constraint_violation: float
    per_state_tightness_gap: float
    tol: float
    worst_violation_row: int
    worst_gap_state: int

    @property
    def passed(self) -> bool:
        return self.max_constraint_violation <= self.tol and self.per_state_tightness_gap <= self.tol

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def as_dict(self) -> dict:
        return {
            "max_violation": self.max_constraint_violation,
            "max_tightness_gap": self.per_state_tightness_gap,
            "verdict": self.verdict,
        }


def _row_weights(grid: BorderGrid, b, a: Action) -> dict[int, float]:
    """Successor distribution of one grid state over grid states."""
    out: dict[int, float] = {}
    l0 = grid.params.lambda0
    for o in transition_kernel(b, a, grid.params):
        x1, x2 = o.next_belief.p1, o.next_belief.p2
        # the observed coordinate is exactly l0 or l1; the other may be off-grid
        if a == Action.BET1:
            edge, coord = (EDGE_LEFT if x1 == l0 else EDGE_RIGHT), x2
        elif a == Action.BET2:
            edge, coord = (EDGE_BOTTOM if x2 == l0 else EDGE_TOP), x1
        else:
            edge, coord = (EDGE_BOTTOM if x2 == l0 else EDGE_TOP), x1
        k, w = grid.locate(coord)
        k, w = int(k), float(w)
        for node, weight in ((k, 1.0 - w), (min(k + 1, grid.n_cells), w)):
            if weight == 0.0:
                continue
            st = int(grid.index[edge, node])
            out[st] = out.get(st, 0.0) + o.probability * weight
    return out


def build_lp(grid: BorderGrid) -> LpInstance:
    beta = grid.params.beta
    s = grid.n_states
    rows, cols, data = [], [], []
    rhs = np.empty(3 * s)
    row_state = np.repeat(np.arange(s), 3)
    row_action = np.tile(np.arange(3), s)
    for st in range(s):
        b = grid.belief(st)
        for a in ACTIONS:
            r = 3 * st + int(a)
            rhs[r] = expected_reward(b, a, grid.params)
            coef = {st: 1.0}
            for y, f in _row_weights(grid, b, a).items():
                coef[y] = coef.get(y, 0.0) - beta * f
            for y in sorted(coef):
                if coef[y] != 0.0:
                    rows.append(r)
                    cols.append(y)
                    data.append(coef[y])
    m = sp.csr_matrix((data, (rows, cols)), shape=(3 * s, s))
    m.sort_indices()
    return LpInstance(grid.params, grid.n_cells, m, rhs, np.ones(s), row_state, row_action)


def _term(coef: float, name: str, first: bool) -> str:
    if coef < 0:
        return f"- {fmt(-coef)} {name}" if not first else f"-{fmt(-coef)} {name}"
    return f"+ {fmt(coef)} {name}" if not first else f"{fmt(coef)} {name}"


def export_lp(instance: LpInstance, destination) -> None:
    """Write the instance in CPLEX LP format to a path or text handle."""
    pr = instance.params
    lines = [
        "\\ gepp border-grid linear program",
        f"\\ lambda0 = {fmt(pr.lambda0)}",
        f"\\ lambda1 = {fmt(pr.lambda1)}",
        f"\\ r_low = {fmt(pr.r_low)}",
        f"\\ r_high = {fmt(pr.r_high)}",
        f"\\ beta = {fmt(pr.beta)}",
        f"\\ n_cells = {instance.n_cells}",
        "Minimize",
    ]
    obj = [(c, f"v_{j}") for j, c in enumerate(instance.objective) if c != 0.0]
    for start in range(0, len(obj), _TERMS_PER_OBJ_LINE):
        chunk = obj[start:start + _TERMS_PER_OBJ_LINE]
        text = " ".join(_term(c, n, first=(start == 0 and i == 0)) for i, (c, n) in enumerate(chunk))
        lines.append((" obj: " if start == 0 else "   ") + text)
    lines.append("Subject To")
    m = instance.matrix
    for r in range(instance.n_constraints):
        lo, hi = m.indptr[r], m.indptr[r + 1]
        terms = " ".join(_term(c, f"v_{j}", first=(i == 0))
                         for i, (j, c) in enumerate(zip(m.indices[lo:hi], m.data[lo:hi])))
        name = f"c_{instance.row_state[r]}_{Action(instance.row_action[r]).short}"
        lines.append(f" {name}: {terms} >= {fmt(instance.rhs[r])}")
    lines.append("Bounds")
    lines.extend(f" v_{j} free" for j in range(instance.n_variables))
    lines.append("End")
    with open_sink(destination) as fh:
        fh.write("\n".join(lines) + "\n")


_TERM_RE = re.compile(r"([+-]?)\s*([0-9.eE+-]+|inf|nan)?\s*(v_\d+)")
_ROW_RE = re.compile(r"^\s*(c_(\d+)_(\w+)):\s*(.*?)\s*>=\s*(\S+)\s*$")


def _parse_terms(text: str) -> list[tuple[int, float]]:
    out = []
    for sign, num, name in _TERM_RE.findall(text):
        c = float(num) if num else 1.0
        out.append((int(name[2:]), -c if sign == "-" else c))
    return out


def read_lp(source) -> LpInstance:
    """Parse a file written by ``export_lp`` back into an ``LpInstance``."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    meta: dict[str, str] = {}
    section = None
    obj_terms: list[tuple[int, float]] = []
    rows, cols, data, rhs, row_state, row_action = [], [], [], [], [], []
    free: set[int] = set()
    for raw in text.splitlines():
        if raw.startswith("\\"):
            if "=" in raw:
                k, v = raw[1:].split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        line = raw.strip()
        if not line:
            continue
        head = line.lower()
        if head in ("minimize", "subject to", "bounds", "end"):
            section = head
            continue
        if section == "minimize":
            obj_terms.extend(_parse_terms(line.split(":", 1)[1] if ":" in line else line))
        elif section == "subject to":
            mt = _ROW_RE.match(raw)
            if not mt:
                raise ValueError(f"cannot parse constraint line: {raw!r}")
            r = len(rhs)
            for j, c in _parse_terms(mt.group(4)):
                rows.append(r)
                cols.append(j)
                data.append(c)
            rhs.append(float(mt.group(5)))
            row_state.append(int(mt.group(2)))
            row_action.append(int(Action.parse(mt.group(3))))
        elif section == "bounds":
            name, kind = line.split()
            if kind != "free":
                raise ValueError(f"unsupported bound {line!r}")
            free.add(int(name[2:]))
    params = ModelParams.from_dict({k: float(meta[k]) for k in ("lambda0", "lambda1", "r_low", "r_high", "beta")})
    n_var = max(free) + 1 if free else max(cols) + 1
    objective = np.zeros(n_var)
    for j, c in obj_terms:
        objective[j] += c
    m = sp.csr_matrix((data, (rows, cols)), shape=(len(rhs), n_var))
    m.sort_indices()
    return LpInstance(params, int(meta["n_cells"]), m, np.array(rhs), objective,
                      np.array(row_state, dtype=np.intp), np.array(row_action, dtype=np.intp))


def verify_solution(instance: LpInstance, values: BorderValueFunction, tol: float = 1e-6) -> LpVerificationReport:
    """Certify ``values`` as the LP optimum: feasible, and one tight row per state."""
    grid = values.grid
    if (grid.params != instance.params or grid.n_cells != instance.n_cells
            or grid.n_states != instance.n_variables):
        raise ValueError("value function and LP instance describe different grids")
    slack = instance.matrix @ values.values - instance.rhs  # V(p) - lhs_a(p)
    worst_row = int(np.argmin(slack))
    violation = max(0.0, float(-slack[worst_row]))
    per_state = np.full(instance.n_variables, np.inf)
    np.minimum.at(per_state, instance.row_state, slack)
    worst_state = int(np.argmax(per_state))
    gap = max(0.0, float(per_state[worst_state]))
    return LpVerificationReport(violation, gap, tol, worst_row, worst_state)


def lp_for(params: ModelParams, n_cells: int) -> LpInstance:
    return build_lp(build_grid(params, n_cells))
