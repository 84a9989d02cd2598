"""Monte Carlo evaluation of allocation policies on sampled channel paths.

Hidden channel paths do not depend on the actions taken, so they are drawn
first from per-chunk Philox streams and every policy is rolled out against
the same paths (common random numbers).  Episodes are processed in fixed
chunks, which makes results identical for any number of workers.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from ._io import fmt, open_sink
from .model import Action, Belief, ModelParams, tau
from .structure import PolicyMap

PolicyRule = Callable[[np.ndarray, np.ndarray], np.ndarray]
PolicySource = Union[PolicyMap, Action, PolicyRule]

FROM_BELIEF = "from-belief"
FIXED = "fixed"


@dataclass(frozen=True)
class SimConfig:
    episodes: int = 10_000
    seed: int = 0
    initial_belief: Belief = Belief(0.5, 0.5)
    initial_state_sampling: str = FROM_BELIEF
    initial_states: tuple[int, int] | None = None
    horizon: int | None = None
    truncation_error: float | None = None  # default 1e-6 * 2 R_l / (1 - beta)
    chunk_size: int = 8192
    trace_episodes: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.initial_state_sampling not in (FROM_BELIEF, FIXED):
            raise ValueError(f"initial_state_sampling must be {FROM_BELIEF!r} or {FIXED!r}")
        if self.initial_state_sampling == FIXED and self.initial_states is None:
            raise ValueError("fixed initial sampling needs initial_states")


def value_scale(params: ModelParams) -> float:
    """Upper bound on the discounted value: at most 2 R_l bits per slot."""
    return 2.0 * params.r_low / (1.0 - params.beta)


def truncation_bound(params: ModelParams, horizon: int) -> float:
    return params.beta**horizon * value_scale(params)


def horizon_for(params: ModelParams, truncation_error: float | None = None) -> int:
    if params.beta == 0.0:
        return 1
    eps = 1e-6 * value_scale(params) if truncation_error is None else truncation_error
    t = math.ceil(math.log(eps / value_scale(params)) / math.log(params.beta))
    t = max(t, 1)
    while truncation_bound(params, t) > eps:
        t += 1
    return t


@dataclass(frozen=True)
class RolloutResult:
    mean_discounted_bits: float
    std_error: float
    episodes: int
    truncation_bound: float
    horizon: int
    seed: int
    returns: np.ndarray = field(repr=False, compare=False)
    trace: list = field(default_factory=list, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {"mean_discounted_bits": self.mean_discounted_bits, "std_error": self.std_error,
                "episodes": self.episodes, "truncation_bound": self.truncation_bound,
                "horizon": self.horizon, "seed": self.seed}

    def write_trace_csv(self, dest) -> None:
        with open_sink(dest) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "t", "action", "g1", "g2", "observed1", "observed2", "x1", "x2", "bits"])
            for r in self.trace:
                w.writerow([r["episode"], r["t"], Action(r["action"]).short, r["g1"], r["g2"],
                            int(r["observed1"]), int(r["observed2"]), fmt(r["x1"]), fmt(r["x2"]),
                            fmt(r["bits"])])


def step_channels(state: np.ndarray, params: ModelParams, rng: np.random.Generator) -> np.ndarray:
    """Advance good(1)/bad(0) states one slot; channels move independently."""
    state = np.asarray(state)
    p_good = np.where(state == 1, params.lambda1, params.lambda0)
    return (rng.random(state.shape) < p_good).astype(np.int8)


def _resolve(source: PolicySource) -> PolicyRule:
    if isinstance(source, PolicyMap):
        return source.act
    if isinstance(source, Action):
        a = int(source)
        return lambda p1, p2: np.full(np.shape(p1), a, dtype=np.intp)
    if callable(source):
        return source
    raise TypeError(f"invalid policy source: {source!r}")


def myopic_rule(params: ModelParams) -> PolicyRule:
    """Maximize the immediate expected reward (the beta = 0 policy)."""
    def rule(p1, p2):
        g = np.stack([(p1 + p2) * params.r_low, p1 * params.r_high, p2 * params.r_high])
        best = g.max(axis=0)
        return np.argmax(g >= best - 1e-12, axis=0)
    return rule


def _chunks(cfg: SimConfig) -> list[tuple[int, int, np.random.SeedSequence]]:
    n = cfg.episodes
    sizes = [min(cfg.chunk_size, n - s) for s in range(0, n, cfg.chunk_size)]
    seqs = np.random.SeedSequence(cfg.seed).spawn(len(sizes))
    starts = np.cumsum([0] + sizes[:-1])
    return list(zip(starts.tolist(), sizes, seqs))


def _run_chunk(rules: list[PolicyRule], params: ModelParams, cfg: SimConfig, horizon: int,
               start: int, size: int, seq: np.random.SeedSequence, n_trace: int):
    rng = np.random.Generator(np.random.Philox(seq))
    b0 = cfg.initial_belief
    if cfg.initial_state_sampling == FROM_BELIEF:
        u = rng.random((size, 2))
        g = np.stack([u[:, 0] < b0.p1, u[:, 1] < b0.p2], axis=1).astype(np.int8)
    else:
        g = np.tile(np.asarray(cfg.initial_states, dtype=np.int8), (size, 1))
    paths = np.empty((horizon, size, 2), dtype=np.int8)
    paths[0] = g
    for t in range(1, horizon):
        paths[t] = step_channels(paths[t - 1], params, rng)

    l0, l1, rl, rh, beta = params.lambda0, params.lambda1, params.r_low, params.r_high, params.beta
    out, traces = [], []
    for rule in rules:
        x1 = np.full(size, b0.p1)
        x2 = np.full(size, b0.p2)
        total = np.zeros(size)
        disc = 1.0
        trace = []
        for t in range(horizon):
            g1, g2 = paths[t, :, 0], paths[t, :, 1]
            a = np.asarray(rule(x1, x2), dtype=np.intp)
            bits = np.where(a == Action.BALANCED, rl * (g1 + g2), np.where(a == Action.BET1, rh * g1, rh * g2))
            total += disc * bits
            obs1 = a != Action.BET2
            obs2 = a != Action.BET1
            for e in range(min(n_trace, size)):
                trace.append({"episode": start + e, "t": t, "action": int(a[e]), "g1": int(g1[e]),
                              "g2": int(g2[e]), "observed1": bool(obs1[e]), "observed2": bool(obs2[e]),
                              "x1": float(x1[e]), "x2": float(x2[e]), "bits": float(bits[e])})
            x1 = np.where(obs1, np.where(g1 == 1, l1, l0), tau(x1, params))
            x2 = np.where(obs2, np.where(g2 == 1, l1, l0), tau(x2, params))
            disc *= beta
        out.append(total)
        traces.append(trace)
    return out, traces


def _simulate(sources: list[PolicySource], cfg: SimConfig, params: ModelParams):
    rules = [_resolve(s) for s in sources]
    horizon = cfg.horizon if cfg.horizon is not None else horizon_for(params, cfg.truncation_error)
    chunks = _chunks(cfg)
    jobs = [(rules, params, cfg, horizon, st, sz, sq, cfg.trace_episodes if i == 0 else 0)
            for i, (st, sz, sq) in enumerate(chunks)]
    workers = max(1, min(cfg.workers, len(jobs)))
    if workers == 1:
        parts = [_run_chunk(*j) for j in jobs]
    else:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda j: _run_chunk(*j), jobs))
    returns = [np.concatenate([p[0][k] for p in parts]) for k in range(len(rules))]
    traces = [sum((p[1][k] for p in parts), []) for k in range(len(rules))]
    return returns, traces, horizon


def _summary(x: np.ndarray) -> tuple[float, float]:
    n = x.size
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return mean, se


def rollout_policy(source: PolicySource, cfg: SimConfig, params: ModelParams) -> RolloutResult:
    returns, traces, horizon = _simulate([source], cfg, params)
    mean, se = _summary(returns[0])
    return RolloutResult(mean, se, cfg.episodes, truncation_bound(params, horizon), horizon, cfg.seed,
                         returns[0], traces[0])


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    mean: float
    std_error: float
    diff_vs_reference: float
    paired_std_error: float
    rank: int

    def as_dict(self) -> dict:
        return {"name": self.name, "mean": self.mean, "std_error": self.std_error,
                "diff_vs_reference": self.diff_vs_reference, "paired_std_error": self.paired_std_error,
                "rank": self.rank}


def compare_policies(sources: dict[str, PolicySource], cfg: SimConfig, params: ModelParams) -> list[ComparisonRow]:
    """Evaluate policies on shared channel paths; rows ranked by mean.

    Differences and their paired standard errors are taken against the
    first source given.
    """
    if len(sources) < 2:
        raise ValueError("need at least two policy sources")
    names = list(sources)
    returns, _, _ = _simulate([sources[k] for k in names], cfg, params)
    ref = returns[0]
    stats = []
    for name, r in zip(names, returns):
        mean, se = _summary(r)
        dmean, dse = _summary(r - ref)
        stats.append((name, mean, se, dmean, dse if name != names[0] else 0.0))
    order = sorted(range(len(stats)), key=lambda i: (-stats[i][1], i))
    rank = {i: k + 1 for k, i in enumerate(order)}
    return [ComparisonRow(*stats[i], rank=rank[i]) for i in order]


def write_comparison_csv(rows: list[ComparisonRow], dest) -> None:
    with open_sink(dest) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "name", "mean", "std_error", "diff_vs_reference", "paired_std_error"])
        for r in rows:
            w.writerow([r.rank, r.name, fmt(r.mean), fmt(r.std_error), fmt(r.diff_vs_reference),
                        fmt(r.paired_std_error)])


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("GEPP_THREADS", "1")))
    except ValueError:
        return 1
