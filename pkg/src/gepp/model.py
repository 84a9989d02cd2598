"""Two-channel Gilbert-Elliott power allocation: parameters, beliefs, dynamics.

Each channel is a two-state Markov chain (good=1, bad=0) with
P(good | good) = lambda1 and P(good | bad) = lambda0.  Every slot the
transmitter either splits power evenly (BALANCED, R_l bits per good
channel) or puts all power on one channel (BET1 / BET2, R_h bits if that
channel is good).  A channel that carries power has its state revealed at
the end of the slot; an idle channel's belief is propagated by ``tau``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Any, Iterable

BELIEF_ATOL = 1e-9


class ParamError(ValueError):
    """Raised when model parameters violate the model assumptions."""


class Action(enum.IntEnum):
    BALANCED = 0
    BET1 = 1
    BET2 = 2

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def parse(cls, text: str) -> "Action":
        key = text.strip().lower()
        for a, s in _SHORT.items():
            if key in (s, a.name.lower()):
                return a
        raise ValueError(f"unknown action {text!r}")


_SHORT = {Action.BALANCED: "balanced", Action.BET1: "bet1", Action.BET2: "bet2"}
ACTIONS = tuple(Action)


@dataclass(frozen=True)
class ModelParams:
    lambda0: float
    lambda1: float
    r_low: float
    r_high: float
    beta: float

    @property
    def alpha(self) -> float:
        return self.lambda1 - self.lambda0

    @property
    def fixed_point(self) -> float:
        """Stationary probability of the good state, lambda0 / (1 - alpha)."""
        if self.alpha >= 1.0:
            # lambda0 = 0, lambda1 = 1: every belief is a fixed point of tau
            return math.nan
        return self.lambda0 / (1.0 - self.alpha)

    def as_dict(self) -> dict[str, float]:
        return {
            "lambda0": self.lambda0,
            "lambda1": self.lambda1,
            "r_low": self.r_low,
            "r_high": self.r_high,
            "beta": self.beta,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ModelParams":
        missing = [k for k in ("lambda0", "lambda1", "r_low", "r_high", "beta") if k not in raw]
        if missing:
            raise ParamError(f"missing parameter(s): {', '.join(missing)}")
        return validate_params(
            (raw["lambda0"], raw["lambda1"], raw["r_low"], raw["r_high"], raw["beta"])
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes: float) -> "ModelParams":
        d = self.as_dict()
        d.update(changes)
        return ModelParams.from_dict(d)


PAPER_PARAMS = ModelParams(lambda0=0.1, lambda1=0.9, r_low=2.0, r_high=3.0, beta=0.9)


def validate_params(raw: Iterable[float]) -> ModelParams:
    """Build ``ModelParams`` from (lambda0, lambda1, r_low, r_high, beta).

    Raises ParamError naming the first violated assumption.
    """
    vals = list(raw)
    if len(vals) != 5:
        raise ParamError(f"expected 5 numbers, got {len(vals)}")
    try:
        l0, l1, rl, rh, beta = (float(v) for v in vals)
    except (TypeError, ValueError) as exc:
        raise ParamError(f"non-numeric parameter: {exc}") from None
    if not all(math.isfinite(v) for v in (l0, l1, rl, rh, beta)):
        raise ParamError("parameters must be finite")
    if not 0.0 <= l0 <= 1.0:
        raise ParamError(f"lambda0 must lie in [0, 1], got {l0}")
    if not 0.0 <= l1 <= 1.0:
        raise ParamError(f"lambda1 must lie in [0, 1], got {l1}")
    if l0 > l1:
        raise ParamError(f"lambda0 > lambda1 ({l0} > {l1}): positive correlation required")
    if not rl > 0.0:
        raise ParamError(f"r_low must be positive, got {rl}")
    if not rl < rh:
        raise ParamError(f"r_high not > r_low ({rh} <= {rl})")
    if not rh < 2.0 * rl:
        raise ParamError(f"r_high not < 2*r_low ({rh} >= {2.0 * rl})")
    if not 0.0 <= beta < 1.0:
        raise ParamError(f"beta must lie in [0, 1), got {beta}")
    return ModelParams(l0, l1, rl, rh, beta)


@dataclass(frozen=True)
class Belief:
    p1: float
    p2: float

    def __post_init__(self):
        for name in ("p1", "p2"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"belief coordinate {name}={v} outside [0, 1]")

    def mirror(self) -> "Belief":
        return Belief(self.p2, self.p1)

    def isclose(self, other: "Belief", atol: float = BELIEF_ATOL) -> bool:
        return abs(self.p1 - other.p1) <= atol and abs(self.p2 - other.p2) <= atol


@dataclass(frozen=True)
class TransitionOutcome:
    probability: float
    next_belief: Belief
    immediate_bits: float


def tau(p, params: ModelParams):
    """Next-slot belief of an unobserved channel: alpha*p + lambda0.

    Works elementwise on numpy arrays as well as on floats.
    """
    return params.alpha * p + params.lambda0


def tau_n(p: float, n: int, params: ModelParams) -> float:
    if n < 0:
        raise ValueError("n must be >= 0")
    a = params.alpha
    if n == 0:
        return p
    if a >= 1.0:
        # removable singularity of the closed form; iterate directly
        x = p
        for _ in range(n):
            x = tau(x, params)
        return x
    an = a**n
    return params.lambda0 / (1.0 - a) * (1.0 - an) + an * p


def expected_reward(b: Belief, a: Action, params: ModelParams) -> float:
    if a == Action.BALANCED:
        return (b.p1 + b.p2) * params.r_low
    if a == Action.BET1:
        return b.p1 * params.r_high
    return b.p2 * params.r_high


def transition_kernel(b: Belief, a: Action, params: ModelParams) -> list[TransitionOutcome]:
    """Outcomes of taking ``a`` at belief ``b``.

    Zero-probability branches are dropped and coincident successors merged,
    so a degenerate belief such as (1, 1) yields a single outcome.
    """
    l0, l1 = params.lambda0, params.lambda1
    rl, rh = params.r_low, params.r_high
    p1, p2 = b.p1, b.p2
    raw: list[tuple[float, float, float, float]] = []
    if a == Action.BALANCED:
        for g1, q1 in ((0, 1.0 - p1), (1, p1)):
            for g2, q2 in ((0, 1.0 - p2), (1, p2)):
                raw.append((q1 * q2, l1 if g1 else l0, l1 if g2 else l0, rl * (g1 + g2)))
    elif a == Action.BET1:
        t2 = tau(p2, params)
        raw.append((1.0 - p1, l0, t2, 0.0))
        raw.append((p1, l1, t2, rh))
    else:
        t1 = tau(p1, params)
        raw.append((1.0 - p2, t1, l0, 0.0))
        raw.append((p2, t1, l1, rh))

    out: list[TransitionOutcome] = []
    for prob, x1, x2, bits in raw:
        if prob == 0.0:
            continue
        nb = Belief(min(max(x1, 0.0), 1.0), min(max(x2, 0.0), 1.0))
        for i, o in enumerate(out):
            if o.next_belief == nb and o.immediate_bits == bits:
                out[i] = TransitionOutcome(o.probability + prob, nb, bits)
                break
        else:
            out.append(TransitionOutcome(prob, nb, bits))
    return out
