"""Two-step consensus: switch between localization and mapping from the
evolution of the weighted node degree and, when it deviates, the weighted
Fiedler value."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .spectral import EPS_CONN


class NonFiniteInput(ValueError):
    pass


class Mode(enum.Enum):
    LOCALIZATION = "LOCALIZATION"
    MAPPING = "MAPPING"


class Event(enum.Enum):
    NONE = "NONE"
    ENTER_MAPPING_DISCONNECT = "ENTER_MAPPING_DISCONNECT"
    ENTER_MAPPING_DEGRADED = "ENTER_MAPPING_DEGRADED"
    EXIT_MAPPING = "EXIT_MAPPING"

    @property
    def enters_mapping(self) -> bool:
        return self in (Event.ENTER_MAPPING_DISCONNECT, Event.ENTER_MAPPING_DEGRADED)


@dataclass(frozen=True)
class DecisionConfig:
    window: int = 50
    sigma_floor_relative: float = 1e-3
    sigma_floor_absolute: float = 1e-6
    k2: float = 2.0
    k4: float = 4.0
    recovery_hysteresis: int = 5
    min_mapping_dwell: int = 10

    def __post_init__(self) -> None:
        if self.window < 5:
            raise ValueError("window must be >= 5")
        if not self.k4 > self.k2 > 0:
            raise ValueError("need k4 > k2 > 0")
        if self.recovery_hysteresis < 1:
            raise ValueError("recovery_hysteresis must be >= 1")

    def sigma_eff(self, mu: float, sigma: float) -> float:
        return max(sigma, self.sigma_floor_relative * abs(mu), self.sigma_floor_absolute)


@dataclass
class DecisionState:
    mode: Mode = Mode.LOCALIZATION
    running_window: deque = field(default_factory=deque)
    frozen_mu: float | None = None
    frozen_sigma: float | None = None
    recovery_count: int = 0
    dwell_count: int = 0
    recent_mapping: deque = field(default_factory=deque)
    last_event: Event = Event.NONE

    @property
    def mu(self) -> float:
        return float(np.mean(self.running_window)) if self.running_window else math.nan

    @property
    def sigma(self) -> float:
        if len(self.running_window) < 2:
            return 0.0
        return float(np.std(self.running_window, ddof=1))

    @classmethod
    def forced_mapping(cls) -> DecisionState:
        """Mapping with no pre-mapping statistics: it can never recover (bootstrap)."""
        return cls(mode=Mode.MAPPING)


@dataclass
class StepResult:
    mode: Mode
    event: Event
    lambda2: float | None  # None when it was not evaluated
    mu: float
    sigma: float


class LazyValue:
    """Evaluates ``fn`` at most once; ``calls`` counts real evaluations."""

    def __init__(self, fn: Callable[[], float]) -> None:
        self._fn = fn
        self._value: float | None = None
        self.calls = 0

    def __call__(self) -> float:
        if self._value is None:
            self.calls += 1
            self._value = float(self._fn())
        return self._value


def _ingest(state: DecisionState, cfg: DecisionConfig, d_bar: float) -> None:
    state.running_window.append(d_bar)
    while len(state.running_window) > cfg.window:
        state.running_window.popleft()


def step(state: DecisionState, cfg: DecisionConfig, d_bar: float,
         lambda2: Callable[[], float]) -> StepResult:
    """Advance the state machine by one keyframe (mutates ``state``).

    ``lambda2`` is only called when the rules need it.
    """
    if not math.isfinite(d_bar):
        raise NonFiniteInput(f"d_bar must be finite, got {d_bar}")

    def checked_lambda2() -> float:
        value = lambda2()
        if not math.isfinite(value):
            raise NonFiniteInput(f"lambda2 must be finite, got {value}")
        return value

    lam: float | None = None
    event = Event.NONE
    if state.mode is Mode.LOCALIZATION:
        mu, sigma = state.mu, state.sigma
        if len(state.running_window) < cfg.window:
            _ingest(state, cfg, d_bar)
        else:
            s = cfg.sigma_eff(mu, sigma)
            if abs(d_bar - mu) <= cfg.k2 * s:
                _ingest(state, cfg, d_bar)
            else:
                lam = checked_lambda2()
                if lam <= EPS_CONN:
                    event = Event.ENTER_MAPPING_DISCONNECT
                elif d_bar < mu - cfg.k4 * s:
                    event = Event.ENTER_MAPPING_DEGRADED
                else:
                    _ingest(state, cfg, d_bar)
                if event is not Event.NONE:
                    state.mode = Mode.MAPPING
                    state.frozen_mu, state.frozen_sigma = mu, sigma
                    state.recovery_count = 0
                    state.dwell_count = 0
                    state.recent_mapping = deque(maxlen=cfg.recovery_hysteresis)
        state.last_event = event
        return StepResult(state.mode, event, lam, mu, sigma)

    # MAPPING
    mu, sigma = state.frozen_mu, state.frozen_sigma
    if state.recent_mapping.maxlen != cfg.recovery_hysteresis:
        state.recent_mapping = deque(state.recent_mapping, maxlen=cfg.recovery_hysteresis)
    state.recent_mapping.append(d_bar)
    state.dwell_count += 1
    if state.dwell_count < cfg.min_mapping_dwell or mu is None:
        pass
    else:
        s = cfg.sigma_eff(mu, sigma)
        in_bounds = abs(d_bar - mu) <= cfg.k2 * s
        if in_bounds:
            lam = checked_lambda2()
        if in_bounds and lam > EPS_CONN:
            state.recovery_count += 1
            if state.recovery_count >= cfg.recovery_hysteresis:
                event = Event.EXIT_MAPPING
                state.mode = Mode.LOCALIZATION
                state.running_window = deque(state.recent_mapping)
                state.frozen_mu = state.frozen_sigma = None
                state.recovery_count = 0
                state.dwell_count = 0
        else:
            state.recovery_count = 0
    state.last_event = event
    return StepResult(state.mode, event, lam,
                      math.nan if mu is None else mu,
                      math.nan if sigma is None else sigma)
