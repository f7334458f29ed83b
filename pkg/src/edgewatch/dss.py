"""Per-session decision-support state machine.

Monitoring --hit--> Warned --hit within window--> Cooldown --timeout--> Monitoring
                      |
                      +--window expired, no hit--> Monitoring

A *hit* is any Violation detection whose confidence is strictly greater than
the configured threshold. Driver and Passenger detections never drive the
machine.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, replace

from .detector import Detection, DetectionClass, SceneFrame
from .errors import TimeRegression


class Phase(enum.Enum):
    MONITORING = "Monitoring"
    WARNED = "Warned"
    COOLDOWN = "Cooldown"


class ActionKind(enum.Enum):
    NONE = "None"
    WARN = "Warn"
    RECORD_INCIDENT = "RecordIncident"


@dataclass(frozen=True)
class DssConfig:
    confidence_threshold: float = 0.80
    warn_window_ms: int = 30_000
    cooldown_ms: int = 10_000

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must be in (0, 1)")
        if self.warn_window_ms <= 0 or self.cooldown_ms <= 0:
            raise ValueError("warn_window_ms and cooldown_ms must be positive")


@dataclass(frozen=True)
class DssState:
    session_id: bytes
    phase: Phase = Phase.MONITORING
    phase_entered_at: int = 0
    incident_count: int = 0

    def __post_init__(self):
        if len(self.session_id) != 16:
            raise ValueError("session_id must be 16 bytes")

    @classmethod
    def new(cls, session_id: bytes | None = None, t_ms: int = 0) -> "DssState":
        return cls(session_id or os.urandom(16), Phase.MONITORING, t_ms, 0)


@dataclass(frozen=True)
class DssAction:
    kind: ActionKind = ActionKind.NONE
    frame: SceneFrame | None = None
    detection: Detection | None = None


NO_ACTION = DssAction()


def strongest_hit(detections, threshold: float) -> Detection | None:
    """Highest-confidence violation above ``threshold``; first one wins ties."""
    best = None
    for d in detections:
        if d.cls is DetectionClass.VIOLATION and d.confidence > threshold:
            if best is None or d.confidence > best.confidence:
                best = d
    return best


def step(state: DssState, frame: SceneFrame, detections: list[Detection],
         config: DssConfig = DssConfig()) -> tuple[DssState, DssAction]:
    """Advance the machine by one frame. Pure: no hidden state or clock."""
    t = frame.t_ms
    if t < state.phase_entered_at:
        raise TimeRegression(
            f"frame at t={t} ms precedes phase entry at {state.phase_entered_at} ms"
        )
    elapsed = t - state.phase_entered_at
    hit = strongest_hit(detections, config.confidence_threshold)

    if state.phase is Phase.MONITORING:
        if hit is not None:
            return replace(state, phase=Phase.WARNED, phase_entered_at=t), DssAction(
                ActionKind.WARN, frame, hit
            )
        return state, NO_ACTION

    if state.phase is Phase.WARNED:
        if elapsed <= config.warn_window_ms:
            if hit is not None:
                new = replace(
                    state,
                    phase=Phase.COOLDOWN,
                    phase_entered_at=t,
                    incident_count=state.incident_count + 1,
                )
                return new, DssAction(ActionKind.RECORD_INCIDENT, frame, hit)
            return state, NO_ACTION
        if hit is not None:
            # stale warning: a late hit opens a fresh episode
            return replace(state, phase_entered_at=t), DssAction(ActionKind.WARN, frame, hit)
        return replace(state, phase=Phase.MONITORING, phase_entered_at=t), NO_ACTION

    # Cooldown ignores hits so one episode yields one incident
    if elapsed >= config.cooldown_ms:
        return replace(state, phase=Phase.MONITORING, phase_entered_at=t), NO_ACTION
    return state, NO_ACTION


def warn_line(session_id: bytes, t_ms: int) -> str:
    return f"WARN {session_id.hex()} {t_ms}"


class DecisionSupport:
    """Stateful convenience wrapper that drives :func:`step` over a stream."""

    def __init__(self, session_id: bytes, config: DssConfig = DssConfig(), start_ms: int = 0):
        self.config = config
        self.state = DssState(session_id, Phase.MONITORING, start_ms, 0)
        self.log: list[str] = []

    def observe(self, frame: SceneFrame, detections) -> DssAction:
        self.state, action = step(self.state, frame, detections, self.config)
        if action.kind is ActionKind.WARN:
            self.log.append(warn_line(self.state.session_id, frame.t_ms))
        return action
