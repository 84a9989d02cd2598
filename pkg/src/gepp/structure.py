"""Greedy policy extraction, threshold scanning and structural checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from ._io import fmt, open_sink
from .model import Action
from .solver import (EDGE_BOTTOM, EDGE_LEFT, EDGE_NAMES, EDGE_RIGHT, EDGE_TOP,
                     BorderGrid, BorderValueFunction, action_values_at, greedy_actions)

ZERO_THRESHOLD = "zero-threshold"
TWO_THRESHOLD = "two-threshold"
ANOMALOUS = "anomalous"

DEFAULT_TIE_TOL = 1e-8
REFINE_XTOL = 1e-12


@dataclass(frozen=True, eq=False)
class PolicyMap:
    values: BorderValueFunction
    action_per_state: np.ndarray
    tie_tol: float
    tie_breaks: int

    @property
    def grid(self) -> BorderGrid:
        return self.values.grid

    def edge_actions(self, edge: int) -> np.ndarray:
        return self.action_per_state[self.grid.index[edge]]

    def with_actions(self, actions) -> "PolicyMap":
        """Copy carrying a different (e.g. hand-built) action assignment."""
        return PolicyMap(self.values, np.asarray(actions, dtype=np.intp), self.tie_tol, self.tie_breaks)

    def act(self, p1, p2) -> np.ndarray:
        """Greedy action at arbitrary belief(s) via one backup."""
        return greedy_actions(action_values_at(self.values, p1, p2), self.tie_tol)

    def write_csv(self, dest) -> None:
        q = self.values.q_values
        g = self.grid
        with open_sink(dest) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p1", "p2", "action", "v_balanced", "v_bet1", "v_bet2"])
            for s in range(g.n_states):
                w.writerow([fmt(g.p1[s]), fmt(g.p2[s]), Action(self.action_per_state[s]).short,
                            fmt(q[0, s]), fmt(q[1, s]), fmt(q[2, s])])


def extract_policy(values: BorderValueFunction, tie_tol: float = DEFAULT_TIE_TOL) -> PolicyMap:
    q = values.q_values
    actions = greedy_actions(q, tie_tol)
    ties = int(((q >= q.max(axis=0) - tie_tol).sum(axis=0) >= 2).sum())
    return PolicyMap(values, actions, tie_tol, ties)


@dataclass(frozen=True, eq=False)
class SquarePolicy:
    """Greedy policy on an M x M grid over the full belief square [0, 1]^2.

    Arrays are indexed [i2, i1] (rows follow p2, columns follow p1).
    """

    axis: np.ndarray
    q: np.ndarray  # (3, M, M)
    actions: np.ndarray
    tie_tol: float

    def write_csv(self, dest) -> None:
        m = self.axis.size
        with open_sink(dest) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p1", "p2", "action", "value", "v_balanced", "v_bet1", "v_bet2"])
            for i2 in range(m):
                for i1 in range(m):
                    qq = self.q[:, i2, i1]
                    w.writerow([fmt(self.axis[i1]), fmt(self.axis[i2]), Action(self.actions[i2, i1]).short,
                                fmt(qq.max()), fmt(qq[0]), fmt(qq[1]), fmt(qq[2])])

    def write_value_csv(self, dest) -> None:
        m = self.axis.size
        with open_sink(dest) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p1", "p2", "value"])
            for i2 in range(m):
                for i1 in range(m):
                    w.writerow([fmt(self.axis[i1]), fmt(self.axis[i2]), fmt(self.q[:, i2, i1].max())])


def square_policy(values: BorderValueFunction, m: int = 101, tie_tol: float = DEFAULT_TIE_TOL) -> SquarePolicy:
    if m < 2:
        raise ValueError("m must be >= 2")
    axis = np.linspace(0.0, 1.0, m)
    p1, p2 = np.meshgrid(axis, axis)
    q = action_values_at(values, p1, p2)
    return SquarePolicy(axis, q, greedy_actions(q, tie_tol), tie_tol)


@dataclass(frozen=True)
class ThresholdReport:
    rho1_scan: float
    rho2_scan: float
    structure: str
    grid_spacing: float
    rho1_refined: float
    rho2_refined: float
    rho1_bracket: tuple[float, float] | None = None
    rho2_bracket: tuple[float, float] | None = None
    notes: tuple[str, ...] = ()

    def normalized(self, params) -> tuple[float, float]:
        """(rho1 - l0)/(l1 - l0) and (l1 - rho2)/(l1 - l0): relative Balanced lengths."""
        span = params.lambda1 - params.lambda0
        if span <= 0:
            return float("nan"), float("nan")
        return ((self.rho1_refined - params.lambda0) / span, (params.lambda1 - self.rho2_refined) / span)

    def as_dict(self) -> dict:
        return {
            "structure": self.structure,
            "rho1_scan": self.rho1_scan,
            "rho2_scan": self.rho2_scan,
            "rho1_refined": self.rho1_refined,
            "rho2_refined": self.rho2_refined,
            "rho1_bracket": self.rho1_bracket,
            "rho2_bracket": self.rho2_bracket,
            "grid_spacing": self.grid_spacing,
            "notes": list(self.notes),
        }


def _single_switch(seq: np.ndarray, first: int, second: int) -> int | None:
    """Index i with seq[:i+1] == first and seq[i+1:] == second, else None."""
    n = seq.size
    if not np.isin(seq, (first, second)).all():
        return None
    k = int(np.count_nonzero(seq == first))
    if 0 < k < n and (seq[:k] == first).all():
        return k - 1
    return None


def _refine(f, lo: float, hi: float, lo_bound: float, hi_bound: float, spacing: float) -> float:
    """Root of f in [lo, hi], widening by one cell per side if needed."""
    for _ in range(3):
        flo, fhi = f(lo), f(hi)
        if flo == 0.0:
            return lo
        if fhi == 0.0:
            return hi
        if np.sign(flo) != np.sign(fhi):
            return float(brentq(f, lo, hi, xtol=REFINE_XTOL, rtol=4 * np.finfo(float).eps))
        lo, hi = max(lo_bound, lo - spacing), min(hi_bound, hi + spacing)
    return 0.5 * (lo + hi)


def scan_thresholds(policy: PolicyMap) -> ThresholdReport:
    """Locate the switch points on the p2 = l0 and p2 = l1 sides.

    Bottom side must read Balanced...Balanced Bet1...Bet1 and the top side
    Bet2...Bet2 Balanced...Balanced.  Thresholds are reported as bracket
    midpoints and, separately, refined to the root of the action-value
    difference along the side.
    """
    grid = policy.grid
    pr = grid.params
    l0, l1 = pr.lambda0, pr.lambda1
    h = grid.spacing
    acts = policy.action_per_state
    notes = []

    if (acts == Action.BALANCED).all():
        return ThresholdReport(l1, l0, ZERO_THRESHOLD, h, l1, l0, notes=("balanced on every border node",))

    bottom = policy.edge_actions(EDGE_BOTTOM)
    top = policy.edge_actions(EDGE_TOP)
    i1 = _single_switch(bottom, Action.BALANCED, Action.BET1)
    i2 = _single_switch(top, Action.BET2, Action.BALANCED)
    if i1 is None:
        notes.append("p2=lambda0 side is not Balanced->Bet1 with a single switch")
    if i2 is None:
        notes.append("p2=lambda1 side is not Bet2->Balanced with a single switch")
    if i1 is None or i2 is None:
        return ThresholdReport(float("nan"), float("nan"), ANOMALOUS, h, float("nan"), float("nan"),
                               notes=tuple(notes))

    nodes = grid.nodes
    b1 = (float(nodes[i1]), float(nodes[i1 + 1]))
    b2 = (float(nodes[i2]), float(nodes[i2 + 1]))

    def f1(x):
        q = action_values_at(policy.values, x, l0)
        return float(q[0] - q[1])

    def f2(x):
        q = action_values_at(policy.values, x, l1)
        return float(q[0] - q[2])

    r1 = _refine(f1, *b1, l0, l1, h)
    r2 = _refine(f2, *b2, l0, l1, h)
    return ThresholdReport(0.5 * sum(b1), 0.5 * sum(b2), TWO_THRESHOLD, h, r1, r2, b1, b2, tuple(notes))


@dataclass
class PropertyResult:
    name: str
    passed: bool
    violations: list = field(default_factory=list)


@dataclass
class StructureReport:
    results: dict[str, PropertyResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def as_dict(self) -> dict:
        return {k: {"passed": r.passed, "violations": r.violations[:20], "n_violations": len(r.violations)}
                for k, r in self.results.items()}


def _tie_ok(q: np.ndarray, s: int, a: int, tie_tol: float) -> bool:
    """Action a is (within tie_tol) optimal at state s."""
    return bool(q[a, s] >= q[:, s].max() - tie_tol)


def _contiguous(seq_states: np.ndarray, acts: np.ndarray, q: np.ndarray, a: int, tie_tol: float):
    """Nodes between the first and last a-node that break the run of a."""
    pos = np.flatnonzero(acts[seq_states] == a)
    if pos.size < 2:
        return []
    bad = []
    for i in range(pos[0], pos[-1] + 1):
        s = int(seq_states[i])
        if acts[s] != a and not _tie_ok(q, s, a, tie_tol):
            bad.append(s)
    return bad


def check_structure(values: BorderValueFunction, policy: PolicyMap, tol: float | None = None,
                    square: SquarePolicy | None = None) -> StructureReport:
    """Contiguity, mirror symmetry of the regions, and side exclusions.

    A node is exempt where the action the check expects is itself optimal
    within the tie tolerance.
    """
    tie = policy.tie_tol if tol is None else tol
    grid = values.grid
    q = values.q_values
    acts = policy.action_per_state
    mirror = grid.mirror
    res: dict[str, PropertyResult] = {}

    # (a) Bb contiguous along both dimensions, B1 along p1, B2 along p2
    bad = []
    for e in (EDGE_BOTTOM, EDGE_TOP):
        for a in (Action.BALANCED, Action.BET1):
            bad += [(EDGE_NAMES[e], Action(a).short, s) for s in _contiguous(grid.index[e], acts, q, a, tie)]
    for e in (EDGE_LEFT, EDGE_RIGHT):
        for a in (Action.BALANCED, Action.BET2):
            bad += [(EDGE_NAMES[e], Action(a).short, s) for s in _contiguous(grid.index[e], acts, q, a, tie)]
    if square is not None:
        sq = square.q.reshape(3, -1)
        sa = square.actions.reshape(-1)
        ids = np.arange(sa.size).reshape(square.actions.shape)
        for r in range(ids.shape[0]):
            for a in (Action.BALANCED, Action.BET1):
                bad += [("square-row", Action(a).short, int(s)) for s in _contiguous(ids[r], sa, sq, a, tie)]
        for c in range(ids.shape[1]):
            for a in (Action.BALANCED, Action.BET2):
                bad += [("square-col", Action(a).short, int(s)) for s in _contiguous(ids[:, c], sa, sq, a, tie)]
    res["contiguity"] = PropertyResult("contiguity", not bad, bad)

    # (b) Bet1 at s <=> Bet2 at mirror(s)
    bad = []
    for s in range(grid.n_states):
        m = int(mirror[s])
        if acts[s] == Action.BET1 and not _tie_ok(q, m, Action.BET2, tie):
            bad.append((s, m))
        if acts[s] == Action.BET2 and not _tie_ok(q, m, Action.BET1, tie):
            bad.append((s, m))
    res["bet_mirror"] = PropertyResult("bet_mirror", not bad, bad)

    # (c) Balanced region closed under mirroring
    bad = [(s, int(mirror[s])) for s in range(grid.n_states)
           if acts[s] == Action.BALANCED and not _tie_ok(q, int(mirror[s]), Action.BALANCED, tie)]
    res["balanced_mirror"] = PropertyResult("balanced_mirror", not bad, bad)

    # (d) no Bet2 on p2 = l0, no Bet1 on p2 = l1
    # exempt only a genuine tie between the forbidden action and an allowed one
    bad = []
    for e, forbidden in ((EDGE_BOTTOM, Action.BET2), (EDGE_TOP, Action.BET1)):
        allowed = [a for a in range(3) if a != forbidden]
        for s in grid.index[e]:
            s = int(s)
            if acts[s] != forbidden:
                continue
            tied = _tie_ok(q, s, forbidden, tie) and q[allowed, s].max() >= q[:, s].max() - tie
            if not tied:
                bad.append((EDGE_NAMES[e], s))
    res["side_exclusion"] = PropertyResult("side_exclusion", not bad, bad)
    return StructureReport(res)


def square_layout(square: SquarePolicy) -> dict:
    """Where each action sits on the full square.

    Expected layout: Bet2 strictly above the diagonal (upper-left), Bet1
    strictly below it (lower-right), Balanced on the diagonal.
    """
    m = square.axis.size
    acts = square.actions
    q = square.q
    i2, i1 = np.indices(acts.shape)

    def optimal(a):
        return q[a] >= q.max(axis=0) - square.tie_tol

    diag = np.arange(m)
    diag_ok = bool(optimal(Action.BALANCED)[diag, diag].all())
    bet2_misplaced = int(((acts == Action.BET2) & ~(i2 > i1)).sum())
    bet1_misplaced = int(((acts == Action.BET1) & ~(i1 > i2)).sum())
    return {
        "diagonal_balanced": diag_ok,
        "bet2_outside_upper_left": bet2_misplaced,
        "bet1_outside_lower_right": bet1_misplaced,
        "bet2_at_upper_left_corner": bool(acts[m - 1, 0] == Action.BET2),
        "bet1_at_lower_right_corner": bool(acts[0, m - 1] == Action.BET1),
        "fractions": {Action(a).short: float((acts == a).mean()) for a in range(3)},
        "ok": bool(diag_ok and bet2_misplaced == 0 and bet1_misplaced == 0
                   and acts[m - 1, 0] == Action.BET2 and acts[0, m - 1] == Action.BET1),
    }


def balanced_fraction(policy: PolicyMap) -> float:
    return float((policy.action_per_state == Action.BALANCED).mean())
