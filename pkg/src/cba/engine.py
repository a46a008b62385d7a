"""Learning engine: routes each sensed state to autonomous execution or a
teacher request, folds demonstrations and retroactive corrections into the
dataset, and retrains the policy model on its cadence.

The engine never touches the simulator. It consumes sensed states, emits
action directives (None while a previously issued action is still playing
out), and talks to whoever is teaching through a narrow channel object.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol, Sequence

import numpy as np

from .autonomy_gate import (
    GateDecision,
    SplitConfig,
    ThresholdMode,
    ThresholdSet,
    compute_confidence_thresholds,
    compute_distance_threshold,
    decide,
    nearest_neighbor_distance,
)
from .domain import Action, DemoSource, StateVector, TrainingPoint, normalize_state
from .policy_model import Classification, GmmPolicy, ModelConfig, fit
from .world import action_duration

log = logging.getLogger(__name__)


class TeacherChannel(Protocol):
    """What the engine needs from a teacher, human or scripted."""

    def notify_request(self) -> None: ...

    def notify_autonomous(self, action: Action, state: StateVector) -> None: ...

    def poll_demonstration(self) -> object: ...

    def poll_correction(self) -> object: ...


class EngineMode(Enum):
    CE_SINGLE = "ce_single"
    CE_MULTI = "ce_multi"
    CD_ONLY = "cd_only"
    CBA = "cba"

    @property
    def corrections_enabled(self) -> bool:
        return self in (EngineMode.CD_ONLY, EngineMode.CBA)

    @property
    def gating_enabled(self) -> bool:
        return self is not EngineMode.CD_ONLY


@dataclass(frozen=True)
class EngineConfig:
    mode: EngineMode
    model: ModelConfig = ModelConfig()
    split: SplitConfig = SplitConfig()
    distance_multiplier: float = 3.0
    fixed_confidence_threshold: float = 0.9
    retrain_cadence: int = 10
    correction_grace: int = 3

    def __post_init__(self):
        if self.retrain_cadence < 1:
            raise ValueError("retrain_cadence must be positive")
        if self.correction_grace < 0:
            raise ValueError("correction_grace must be non-negative")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "model": {
                "k_max": self.model.k_max,
                "cov_floor": self.model.cov_floor,
                "em_tol": self.model.em_tol,
                "em_max_iter": self.model.em_max_iter,
                "seed": self.model.seed,
            },
            "split": {
                "train_ratio": self.split.train_ratio,
                "seed": self.split.seed,
                "aggregation": self.split.aggregation.value,
            },
            "distance_multiplier": self.distance_multiplier,
            "fixed_confidence_threshold": self.fixed_confidence_threshold,
            "retrain_cadence": self.retrain_cadence,
            "correction_grace": self.correction_grace,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        from .autonomy_gate import Aggregation

        return cls(
            mode=EngineMode(d["mode"]),
            model=ModelConfig(
                k_max=int(d["model"]["k_max"]),
                cov_floor=float(d["model"]["cov_floor"]),
                em_tol=float(d["model"]["em_tol"]),
                em_max_iter=int(d["model"]["em_max_iter"]),
                seed=int(d["model"]["seed"]),
            ),
            split=SplitConfig(
                train_ratio=float(d["split"]["train_ratio"]),
                seed=int(d["split"]["seed"]),
                aggregation=Aggregation(d["split"]["aggregation"]),
            ),
            distance_multiplier=float(d["distance_multiplier"]),
            fixed_confidence_threshold=float(d["fixed_confidence_threshold"]),
            retrain_cadence=int(d["retrain_cadence"]),
            correction_grace=int(d["correction_grace"]),
        )


# -- event log ----------------------------------------------------------------


@dataclass(frozen=True)
class DemonstrationRequested:
    kind = "demonstration_requested"
    timestep: int
    state: StateVector
    reason: str

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "timestep": self.timestep,
            "state": self.state.to_dict(),
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DemonstrationRequested":
        return cls(d["timestep"], StateVector.from_dict(d["state"]), d["reason"])


@dataclass(frozen=True)
class DemonstrationReceived:
    kind = "demonstration_received"
    timestep: int
    state: StateVector
    action: Action
    source: DemoSource

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "timestep": self.timestep,
            "state": self.state.to_dict(),
            "action": self.action.wire,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DemonstrationReceived":
        return cls(
            d["timestep"],
            StateVector.from_dict(d["state"]),
            Action.from_wire(d["action"]),
            DemoSource(d["source"]),
        )


@dataclass(frozen=True)
class AutonomousExecuted:
    kind = "autonomous_executed"
    timestep: int
    state: StateVector
    action: Action
    confidence: float
    boundary_id: int
    nn_distance: float

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "timestep": self.timestep,
            "state": self.state.to_dict(),
            "action": self.action.wire,
            "confidence": self.confidence,
            "boundary_id": self.boundary_id,
            "nn_distance": self.nn_distance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AutonomousExecuted":
        return cls(
            d["timestep"],
            StateVector.from_dict(d["state"]),
            Action.from_wire(d["action"]),
            float(d["confidence"]),
            int(d["boundary_id"]),
            float(d["nn_distance"]),
        )


@dataclass(frozen=True)
class CorrectionReceived:
    kind = "correction_received"
    timestep: int
    anchor_state: StateVector
    original_action: Action
    corrected_action: Action

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "timestep": self.timestep,
            "anchor_state": self.anchor_state.to_dict(),
            "original_action": self.original_action.wire,
            "corrected_action": self.corrected_action.wire,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionReceived":
        return cls(
            d["timestep"],
            StateVector.from_dict(d["anchor_state"]),
            Action.from_wire(d["original_action"]),
            Action.from_wire(d["corrected_action"]),
        )


@dataclass(frozen=True)
class Retrained:
    kind = "retrained"
    timestep: int
    dataset_size: int
    n_components: int
    thresholds: ThresholdSet

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "timestep": self.timestep,
            "dataset_size": self.dataset_size,
            "n_components": self.n_components,
            "thresholds": self.thresholds.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Retrained":
        return cls(
            d["timestep"],
            int(d["dataset_size"]),
            int(d["n_components"]),
            ThresholdSet.from_dict(d["thresholds"]),
        )


@dataclass(frozen=True)
class ResumedByEnvironment:
    kind = "resumed_by_environment"
    timestep: int
    state: StateVector

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "timestep": self.timestep,
            "state": self.state.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResumedByEnvironment":
        return cls(d["timestep"], StateVector.from_dict(d["state"]))


@dataclass(frozen=True)
class TeacherInputRejected:
    kind = "teacher_input_rejected"
    timestep: int
    payload: str
    context: str

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "timestep": self.timestep,
            "payload": self.payload,
            "context": self.context,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherInputRejected":
        return cls(d["timestep"], d["payload"], d["context"])


EngineEvent = (
    DemonstrationRequested
    | DemonstrationReceived
    | AutonomousExecuted
    | CorrectionReceived
    | Retrained
    | ResumedByEnvironment
    | TeacherInputRejected
)

EVENT_TYPES = {
    cls.kind: cls
    for cls in (
        DemonstrationRequested,
        DemonstrationReceived,
        AutonomousExecuted,
        CorrectionReceived,
        Retrained,
        ResumedByEnvironment,
        TeacherInputRejected,
    )
}


def event_from_dict(d: dict) -> EngineEvent:
    try:
        cls = EVENT_TYPES[d["kind"]]
    except KeyError:
        raise ValueError(f"unknown event kind {d.get('kind')!r}") from None
    return cls.from_dict(d)


@dataclass(frozen=True)
class StepResult:
    directive: Optional[Action]
    events: tuple[EngineEvent, ...] = ()


# -- engine -------------------------------------------------------------------


class CbaEngine:
    """One tick at a time: poll corrections, run out in-progress actions,
    then either execute autonomously or hold for a demonstration."""

    def __init__(self, config: EngineConfig, teacher: TeacherChannel):
        self.config = config
        self.teacher = teacher
        self.dataset: list[TrainingPoint] = []
        self.model: Optional[GmmPolicy] = None
        self.thresholds: ThresholdSet = ThresholdSet.initial()

        self._features: list[np.ndarray] = []
        self._matrix: Optional[np.ndarray] = None
        self._seq = 0
        self._since_retrain = 0
        self._ticks_left = 0
        self._pending_request = False
        self._anchor: Optional[StateVector] = None
        self._anchor_action: Optional[Action] = None
        self._window_until = -1
        self._executing_autonomous = False

        self.requests_made = 0
        self.autonomous_count = 0
        self.retrain_count = 0
        self.demos_by_source = {source: 0 for source in DemoSource}

    # observable state ----------------------------------------------------

    @property
    def pending_request(self) -> bool:
        return self._pending_request

    @property
    def executing_autonomous(self) -> bool:
        return self._executing_autonomous

    @property
    def ticks_remaining(self) -> int:
        return self._ticks_left

    def correction_window_open(self, timestep: int) -> bool:
        return (
            self.config.mode.corrections_enabled
            and self._anchor is not None
            and timestep <= self._window_until
        )

    @property
    def dataset_size(self) -> int:
        return len(self.dataset)

    # dataset -------------------------------------------------------------

    def _add_point(self, state: StateVector, action: Action, source: DemoSource) -> TrainingPoint:
        point = TrainingPoint(
            state=state, action=action, sequence_id=self._seq, source=source
        )
        self._seq += 1
        self.dataset.append(point)
        self._features.append(normalize_state(state))
        self._matrix = None
        self.demos_by_source[source] += 1
        return point

    def _feature_matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.vstack(self._features)
        return self._matrix

    def bootstrap(
        self, demos: Sequence[tuple[StateVector, Action]], timestep: int = 0
    ) -> list[EngineEvent]:
        """Seed the dataset from an initial teaching session; one retrain."""
        if not demos:
            raise ValueError("bootstrap needs at least one demonstration")
        events: list[EngineEvent] = []
        for state, action in demos:
            self._add_point(state, action, DemoSource.INIT_SESSION)
            events.append(
                DemonstrationReceived(timestep, state, action, DemoSource.INIT_SESSION)
            )
        self._retrain(timestep, events)
        return events

    # learning ------------------------------------------------------------

    def _retrain(self, timestep: int, events: list[EngineEvent]) -> None:
        self._since_retrain = 0
        self.retrain_count += 1
        self.model = fit(self.dataset, self.config.model)
        mode = self.config.mode
        if not mode.gating_enabled:
            self.thresholds = ThresholdSet.all_passing()
        else:
            tau_dist = compute_distance_threshold(
                self._feature_matrix(), self.config.distance_multiplier
            )
            if mode is EngineMode.CE_SINGLE:
                self.thresholds = ThresholdSet(
                    tau_dist=tau_dist,
                    mode=ThresholdMode.SINGLE_FIXED,
                    tau_conf_fixed=self.config.fixed_confidence_threshold,
                )
            else:
                by_boundary = compute_confidence_thresholds(
                    self.dataset, self.model, self.config.model, self.config.split
                )
                self.thresholds = ThresholdSet(
                    tau_dist=tau_dist,
                    mode=ThresholdMode.MULTIPLE_ADJUSTABLE,
                    tau_conf_by_boundary=by_boundary,
                )
        events.append(
            Retrained(
                timestep, len(self.dataset), self.model.total_components, self.thresholds
            )
        )

    def _gate(
        self, state: StateVector
    ) -> tuple[GateDecision, Optional[Classification], float]:
        if self.model is None:
            return GateDecision.request("no_model"), None, math.inf
        nn = nearest_neighbor_distance(self._feature_matrix(), normalize_state(state))
        classification = self.model.classify(state)
        return decide(classification, nn, self.thresholds), classification, nn

    # tick ----------------------------------------------------------------

    def step(self, state: StateVector, timestep: int) -> StepResult:
        events: list[EngineEvent] = []
        self._poll_correction(timestep, events)

        if self._ticks_left > 0:
            self._ticks_left -= 1
            return StepResult(None, tuple(events))

        if self._pending_request:
            return StepResult(self._resolve_pending(state, timestep, events), tuple(events))

        decision, classification, nn = self._gate(state)
        if decision.autonomous:
            directive = self._commit_autonomous(
                state, decision, classification, nn, timestep, events
            )
            return StepResult(directive, tuple(events))

        self._pending_request = True
        self.requests_made += 1
        events.append(DemonstrationRequested(timestep, state, decision.reason))
        self.teacher.notify_request()
        # a present teacher may answer within the same tick
        return StepResult(self._resolve_pending(state, timestep, events), tuple(events))

    def _poll_correction(self, timestep: int, events: list[EngineEvent]) -> None:
        if not self.config.mode.corrections_enabled or self._anchor is None:
            return
        if timestep > self._window_until:
            self._anchor = None
            self._anchor_action = None
            return
        raw = self.teacher.poll_correction()
        if raw is None:
            return
        if not isinstance(raw, Action):
            events.append(TeacherInputRejected(timestep, repr(raw), "correction"))
            return
        anchor, original = self._anchor, self._anchor_action
        self._anchor = None
        self._anchor_action = None
        self._add_point(anchor, raw, DemoSource.CORRECTIVE)
        events.append(CorrectionReceived(timestep, anchor, original, raw))
        self._retrain(timestep, events)

    def _resolve_pending(
        self, state: StateVector, timestep: int, events: list[EngineEvent]
    ) -> Optional[Action]:
        raw = self.teacher.poll_demonstration()
        if raw is not None:
            if not isinstance(raw, Action):
                events.append(TeacherInputRejected(timestep, repr(raw), "demonstration"))
                return None
            self._pending_request = False
            self._add_point(state, raw, DemoSource.CE_REQUEST)
            events.append(DemonstrationReceived(timestep, state, raw, DemoSource.CE_REQUEST))
            self._since_retrain += 1
            if self._since_retrain >= self.config.retrain_cadence:
                self._retrain(timestep, events)
            return self._issue_demonstrated(raw)
        # nothing from the teacher: re-check the gate in case a correction
        # retrain landed while we were holding
        decision, classification, nn = self._gate(state)
        if decision.autonomous:
            self._pending_request = False
            events.append(ResumedByEnvironment(timestep, state))
            return self._commit_autonomous(
                state, decision, classification, nn, timestep, events
            )
        return None

    def _commit_autonomous(
        self,
        state: StateVector,
        decision: GateDecision,
        classification: Classification,
        nn: float,
        timestep: int,
        events: list[EngineEvent],
    ) -> Action:
        action = decision.action
        self._anchor = state
        self._anchor_action = action
        self._window_until = timestep + action_duration(action) + self.config.correction_grace
        self._executing_autonomous = True
        self._ticks_left = action_duration(action) - 1
        self.autonomous_count += 1
        events.append(
            AutonomousExecuted(
                timestep,
                state,
                action,
                classification.confidence,
                classification.boundary_id,
                nn,
            )
        )
        self.teacher.notify_autonomous(action, state)
        return action

    def _issue_demonstrated(self, action: Action) -> Action:
        # teacher took over: retroactive correction of the old action lapses
        self._anchor = None
        self._anchor_action = None
        self._executing_autonomous = False
        self._ticks_left = action_duration(action) - 1
        return action
