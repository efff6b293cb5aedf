"""Customer trust evaluation.

Every action a customer performs is scored with

    Pa = (1 - Na / Totala) * Wa ** m

where ``Na`` counts negative actions, ``Totala`` counts all actions (both
including the one being scored), ``Wa`` is the weight of the action class and
``m`` is the security level.  The running trust degree is an exponential
moving average of the scores and decides both the customer's category and
whether the gateway lets a request through.

Everything here is pure: functions take a state and return a new one.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Mapping

from .errors import InvalidArgument


class ActionClass(enum.Enum):
    POSITIVE = "Positive"
    WRONG = "Wrong"
    MALICIOUS = "Malicious"

    @property
    def weight(self) -> float:
        return _WEIGHTS[self]

    @property
    def negative(self) -> bool:
        return self is not ActionClass.POSITIVE


_WEIGHTS = {
    ActionClass.POSITIVE: 1.0,
    ActionClass.WRONG: 0.5,
    ActionClass.MALICIOUS: 0.0,
}


class Category(enum.Enum):
    TRUSTED = "Trusted"
    INNOCENT = "Innocent"
    UNTRUSTED = "Untrusted"


@dataclass(frozen=True)
class TrustConfig:
    security_level: int = 1
    connection_threshold: float = 0.4
    trusted_threshold: float = 0.7
    innocent_threshold: float = 0.4
    smoothing: float = 0.5
    initial_trust: float = 0.5

    def __post_init__(self):
        if not isinstance(self.security_level, int) or self.security_level < 1:
            raise InvalidArgument(f"security_level must be an integer >= 1, got {self.security_level!r}")
        if not 0.0 < self.connection_threshold <= 1.0:
            raise InvalidArgument("connection_threshold must lie in (0, 1]")
        if not 0.0 < self.innocent_threshold < self.trusted_threshold < 1.0:
            raise InvalidArgument("thresholds must satisfy 0 < innocent < trusted < 1")
        if not 0.0 <= self.smoothing < 1.0:
            raise InvalidArgument("smoothing must lie in [0, 1)")
        if not 0.0 <= self.initial_trust <= 1.0:
            raise InvalidArgument("initial_trust must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "TrustConfig":
        """Build from ``trust.*`` style config keys; unknown keys are ignored."""
        kwargs = {}
        for f in dataclasses.fields(cls):
            raw = values.get(f.name, values.get(f"trust.{f.name}"))
            if raw is None:
                continue
            kwargs[f.name] = int(raw) if f.name == "security_level" else float(raw)
        return cls(**kwargs)


@dataclass(frozen=True)
class TrustState:
    customer_id: str
    total_actions: int
    negative_actions: int
    trust_degree: float
    last_pa: float
    category: Category

    @classmethod
    def fresh(cls, customer_id: str, cfg: TrustConfig) -> "TrustState":
        t0 = cfg.initial_trust
        return cls(customer_id, 0, 0, t0, t0, classify(t0, cfg))


@dataclass(frozen=True)
class ActionRecord:
    customer_id: str
    action: ActionClass
    timestamp: int
    note: str = ""


def action_weight(action: ActionClass) -> float:
    return action.weight


def action_value(na: int, totala: int, action: ActionClass, m: int) -> float:
    """Score one action given the (already incremented) counters."""
    if totala < 1:
        raise InvalidArgument("totala must be >= 1")
    if not 0 <= na <= totala:
        raise InvalidArgument(f"na must lie in [0, totala], got na={na} totala={totala}")
    if m < 1:
        raise InvalidArgument("security level m must be >= 1")
    return (1.0 - na / totala) * action.weight ** m


def classify(t: float, cfg: TrustConfig) -> Category:
    if t >= cfg.trusted_threshold:
        return Category.TRUSTED
    if t >= cfg.innocent_threshold:
        return Category.INNOCENT
    return Category.UNTRUSTED


def record_action(state: TrustState, action: ActionClass, cfg: TrustConfig) -> TrustState:
    total = state.total_actions + 1
    negative = state.negative_actions + (1 if action.negative else 0)
    pa = action_value(negative, total, action, cfg.security_level)
    alpha = cfg.smoothing
    t = alpha * state.trust_degree + (1.0 - alpha) * pa
    # guard against drift past the unit interval from rounding
    t = min(1.0, max(0.0, t))
    return dataclasses.replace(
        state,
        total_actions=total,
        negative_actions=negative,
        trust_degree=t,
        last_pa=pa,
        category=classify(t, cfg),
    )


def authorize_connection(state: TrustState, cfg: TrustConfig) -> bool:
    return state.trust_degree >= cfg.connection_threshold
