"""Shared value types: driving states, actions, demonstrations, feature scaling.

All learned components operate on a normalized feature space; the scaling is an
affine per-feature map recorded alongside any fitted model so that raw-unit
changes never leak into distances or densities.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Sequence

import numpy as np

N_LANES = 5
LANE_MIN = 0
LANE_MAX = N_LANES - 1

# Sensor saturation in world units (meters). An empty or off-road lane is
# indistinguishable from a car at maximum range.
SENSE_RANGE = 25.0
NO_CAR = SENSE_RANGE

N_FEATURES = 4


class Action(IntEnum):
    """Discrete driving actions.

    The integer values define the canonical ordering used for deterministic
    tie-breaking everywhere (classification ties, boundary enumeration).
    """

    FORWARD = 0
    LEFT = 1
    RIGHT = 2

    @property
    def wire(self) -> str:
        return self.name.lower()

    @classmethod
    def from_wire(cls, name: str) -> "Action":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown action {name!r}") from None


class DemoSource(Enum):
    """How a training point entered the dataset."""

    INIT_SESSION = "init_session"
    CE_REQUEST = "ce_request"
    CORRECTIVE = "corrective"


@dataclass(frozen=True)
class StateVector:
    """Sensed driving state: lane index plus signed nearest-car distances.

    Distances are measured in the lanes (lane-1, lane, lane+1) relative to the
    agent, positive ahead, clipped to [-SENSE_RANGE, SENSE_RANGE]. Off-road
    neighbors and empty lanes read NO_CAR.
    """

    lane: int
    d_left: float
    d_center: float
    d_right: float

    def __post_init__(self) -> None:
        if not LANE_MIN <= self.lane <= LANE_MAX:
            raise ValueError(f"lane {self.lane} outside [{LANE_MIN}, {LANE_MAX}]")
        for name in ("d_left", "d_center", "d_right"):
            v = getattr(self, name)
            if not -SENSE_RANGE - 1e-9 <= v <= SENSE_RANGE + 1e-9:
                raise ValueError(f"{name}={v} outside +-{SENSE_RANGE}")

    def features(self) -> tuple[float, float, float, float]:
        return (float(self.lane), self.d_left, self.d_center, self.d_right)

    def to_dict(self) -> dict:
        return {
            "lane": self.lane,
            "d_left": self.d_left,
            "d_center": self.d_center,
            "d_right": self.d_right,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateVector":
        return cls(int(d["lane"]), float(d["d_left"]), float(d["d_center"]), float(d["d_right"]))


@dataclass(frozen=True)
class TrainingPoint:
    """One demonstrated decision: the sensed state and the teacher's action."""

    state: StateVector
    action: Action
    sequence_id: int
    source: DemoSource

    def to_dict(self) -> dict:
        return {
            "state": self.state.to_dict(),
            "action": self.action.wire,
            "sequence_id": self.sequence_id,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingPoint":
        return cls(
            StateVector.from_dict(d["state"]),
            Action.from_wire(d["action"]),
            int(d["sequence_id"]),
            DemoSource(d["source"]),
        )


@dataclass(frozen=True)
class FeatureScaler:
    """Per-feature affine map onto [0, 1]; lo maps to 0 and hi to 1."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lo) != len(self.hi):
            raise ValueError("lo/hi length mismatch")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("each hi must exceed its lo")

    def transform(self, features: Sequence[float]) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        return (np.asarray(features, dtype=np.float64) - lo) / (hi - lo)

    def transform_many(self, rows: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        return (np.asarray(rows, dtype=np.float64) - lo) / (hi - lo)

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(tuple(float(v) for v in d["lo"]), tuple(float(v) for v in d["hi"]))


# Canonical scaler for the driving domain: lane/4, (d + 25)/50.
DOMAIN_SCALER = FeatureScaler(
    lo=(float(LANE_MIN), -SENSE_RANGE, -SENSE_RANGE, -SENSE_RANGE),
    hi=(float(LANE_MAX), SENSE_RANGE, SENSE_RANGE, SENSE_RANGE),
)


def normalize_state(state: StateVector, scaler: FeatureScaler = DOMAIN_SCALER) -> np.ndarray:
    return scaler.transform(state.features())


def normalize_states(
    states: Iterable[StateVector], scaler: FeatureScaler = DOMAIN_SCALER
) -> np.ndarray:
    rows = np.array([s.features() for s in states], dtype=np.float64)
    if rows.size == 0:
        return rows.reshape(0, N_FEATURES)
    return scaler.transform_many(rows)


def derived_rng(*parts: int | str) -> np.random.Generator:
    """Deterministic child generator for a tuple of seed parts.

    String parts are folded in through a stable hash so stream names
    ("traffic", "sense") cannot collide with plain integer seeds.
    """
    entropy = [
        int.from_bytes(hashlib.sha256(p.encode()).digest()[:8], "big")
        if isinstance(p, str)
        else p
        for p in parts
    ]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
