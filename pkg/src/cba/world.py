"""Fixed-timestep highway simulation in the agent's reference frame.

The agent drives at a constant 60 mph and never moves longitudinally in its
own frame; traffic cars drift backward at the speed difference. Lanes 0 and 4
are shoulders and never carry traffic. All randomness is split into two
independent streams: traffic generation and sensor noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .domain import NO_CAR, SENSE_RANGE, Action, StateVector, derived_rng

MPH_TO_MPS = 0.44704
DT = 0.2
AGENT_SPEED_MPH = 60.0
CAR_LENGTH = 4.0
LANE_CHANGE_TICKS = 5
N_LANES = 5
TRAFFIC_LANES = (1, 2, 3)
DEFAULT_SPEED_RANGE = (20.0, 40.0)

PATTERN_SCHEMA = "traffic-pattern/1"


def per_tick_closure(speed_mph: float) -> float:
    """Backward drift of a traffic car per timestep, in road units."""
    return (AGENT_SPEED_MPH - speed_mph) * MPH_TO_MPS * DT


def action_duration(action: Action) -> int:
    return 1 if action is Action.FORWARD else LANE_CHANGE_TICKS


class PatternKind(Enum):
    RANDOM_TRAINING = "random_training"
    FIXED_EVALUATION = "fixed_evaluation"


@dataclass(frozen=True)
class SpawnEvent:
    timestep: int
    lane: int
    speed_mph: float

    def to_list(self) -> list:
        return [self.timestep, self.lane, self.speed_mph]

    @classmethod
    def from_list(cls, row: Sequence) -> "SpawnEvent":
        return cls(int(row[0]), int(row[1]), float(row[2]))


@dataclass(frozen=True)
class TrafficPattern:
    """Arrival process parameters, optionally frozen into an explicit schedule.

    arrival_rates are per-timestep spawn probabilities for lanes 1..3. A
    FIXED_EVALUATION pattern carries the fully materialized spawn schedule and
    ignores the rates at run time, so it is identical across consumers.
    """

    kind: PatternKind
    seed: int
    arrival_rates: tuple[float, float, float]
    speed_range: tuple[float, float] = DEFAULT_SPEED_RANGE
    schedule: tuple[SpawnEvent, ...] | None = None
    version: str = PATTERN_SCHEMA

    def __post_init__(self):
        if self.kind is PatternKind.FIXED_EVALUATION and self.schedule is None:
            raise ValueError("fixed_evaluation pattern requires a schedule")
        lo, hi = self.speed_range
        if not lo < hi:
            raise ValueError("speed_range must be increasing")

    @classmethod
    def random(
        cls,
        seed: int,
        center_rate: float,
        side_factor: float = 0.35,
        speed_range: tuple[float, float] = DEFAULT_SPEED_RANGE,
    ) -> "TrafficPattern":
        side = center_rate * side_factor
        return cls(
            kind=PatternKind.RANDOM_TRAINING,
            seed=seed,
            arrival_rates=(side, center_rate, side),
            speed_range=speed_range,
        )

    def to_dict(self) -> dict:
        doc = {
            "schema": self.version,
            "kind": self.kind.value,
            "seed": self.seed,
            "arrival_rates": list(self.arrival_rates),
            "speed_range": list(self.speed_range),
        }
        if self.schedule is not None:
            doc["schedule"] = [e.to_list() for e in self.schedule]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrafficPattern":
        if doc.get("schema") != PATTERN_SCHEMA:
            raise ValueError(f"unknown pattern schema: {doc.get('schema')!r}")
        schedule = None
        if "schedule" in doc:
            schedule = tuple(SpawnEvent.from_list(r) for r in doc["schedule"])
        return cls(
            kind=PatternKind(doc["kind"]),
            seed=int(doc["seed"]),
            arrival_rates=tuple(float(r) for r in doc["arrival_rates"]),
            speed_range=tuple(float(v) for v in doc["speed_range"]),
            schedule=schedule,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrafficPattern":
        return cls.from_dict(json.loads(Path(path).read_text()))


def freeze_pattern(pattern: TrafficPattern, n_timesteps: int) -> TrafficPattern:
    """Materialize a random pattern's first n_timesteps into a fixed schedule."""
    world = DrivingWorld(pattern, WorldConfig(noise_sigma=0.0))
    for _ in range(n_timesteps):
        world.step(None)
    return replace(
        pattern,
        kind=PatternKind.FIXED_EVALUATION,
        schedule=tuple(world.spawn_log),
    )


@dataclass(frozen=True)
class WorldConfig:
    noise_sigma: float = 0.5
    start_lane: int = 2
    horizon: float = 60.0
    spawn_headway: float = 8.0

    def __post_init__(self):
        if not 0 <= self.start_lane < N_LANES:
            raise ValueError("start_lane out of range")


@dataclass
class Car:
    lane: int
    position: float
    speed_mph: float


@dataclass(frozen=True)
class EvalReport:
    lane_occupancy: tuple[float, float, float, float, float]
    collision_rate: float
    timesteps: int

    def __post_init__(self):
        if abs(sum(self.lane_occupancy) - 1.0) > 1e-9:
            raise ValueError("lane occupancy must sum to 1")
        if not 0.0 <= self.collision_rate <= 1.0:
            raise ValueError("collision_rate out of [0, 1]")

    @property
    def collision_timesteps(self) -> int:
        return round(self.collision_rate * self.timesteps)

    def to_dict(self) -> dict:
        return {
            "lane_occupancy": [repr(v) for v in self.lane_occupancy],
            "collision_rate": repr(self.collision_rate),
            "timesteps": self.timesteps,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(
            lane_occupancy=tuple(float(v) for v in doc["lane_occupancy"]),
            collision_rate=float(doc["collision_rate"]),
            timesteps=int(doc["timesteps"]),
        )


def tv_distance(p: Sequence[float], q: Sequence[float]) -> float:
    """Total-variation distance between two occupancy vectors."""
    if len(p) != len(q):
        raise ValueError("length mismatch")
    return 0.5 * float(sum(abs(a - b) for a, b in zip(p, q)))


class DrivingWorld:
    """Mutable simulator state; one instance per episode."""

    def __init__(
        self,
        pattern: TrafficPattern,
        config: WorldConfig = WorldConfig(),
        noise_seed: int = 0,
    ):
        self.pattern = pattern
        self.config = config
        self.cars: list[Car] = []
        self.spawn_log: list[SpawnEvent] = []
        self._timestep = 0
        self._lane_from = config.start_lane
        self._lane_to = config.start_lane
        self._substep = LANE_CHANGE_TICKS
        self._traffic_rng = derived_rng(pattern.seed, "traffic")
        self._noise_rng = derived_rng(noise_seed, "sense")
        self._schedule_ptr = 0

    # -- agent geometry ------------------------------------------------

    @property
    def timestep(self) -> int:
        return self._timestep

    @property
    def lane_from(self) -> int:
        return self._lane_from

    @property
    def lane_to(self) -> int:
        return self._lane_to

    @property
    def lateral_fraction(self) -> float:
        return self._substep / LANE_CHANGE_TICKS

    @property
    def in_transition(self) -> bool:
        return self._substep < LANE_CHANGE_TICKS

    @property
    def agent_lane(self) -> int:
        """Nearest integer lane, used for sensing and occupancy accounting."""
        return self._lane_from if self.lateral_fraction < 0.5 else self._lane_to

    def occupied_lanes(self) -> tuple[int, ...]:
        if self.in_transition and self._lane_from != self._lane_to:
            return (self._lane_from, self._lane_to)
        return (self._lane_from,)

    # -- stepping ------------------------------------------------------

    def step(self, action: Action | None) -> None:
        self._timestep += 1
        if action in (Action.LEFT, Action.RIGHT) and not self.in_transition:
            delta = -1 if action is Action.LEFT else 1
            # shoulder clamp: the maneuver still runs its full course
            self._lane_to = min(max(self._lane_from + delta, 0), N_LANES - 1)
            self._substep = 0
        if self.in_transition:
            self._substep += 1
            if self._substep == LANE_CHANGE_TICKS:
                self._lane_from = self._lane_to
        for car in self.cars:
            car.position -= per_tick_closure(car.speed_mph)
        horizon = self.config.horizon
        self.cars = [c for c in self.cars if c.position >= -horizon]
        self._spawn()

    def _spawn(self) -> None:
        if self.pattern.kind is PatternKind.FIXED_EVALUATION:
            sched = self.pattern.schedule
            while (
                self._schedule_ptr < len(sched)
                and sched[self._schedule_ptr].timestep == self._timestep
            ):
                ev = sched[self._schedule_ptr]
                self.cars.append(Car(ev.lane, self.config.horizon, ev.speed_mph))
                self._schedule_ptr += 1
            return
        for lane, rate in zip(TRAFFIC_LANES, self.pattern.arrival_rates):
            if self._traffic_rng.uniform() >= rate:
                continue
            in_lane = [c for c in self.cars if c.lane == lane]
            gate = self.config.horizon - self.config.spawn_headway
            if any(c.position > gate for c in in_lane):
                continue
            speed = self._admissible_speed(in_lane)
            self.cars.append(Car(lane, self.config.horizon, speed))
            self.spawn_log.append(SpawnEvent(self._timestep, lane, speed))

    def _admissible_speed(self, in_lane: list[Car]) -> float:
        """Sample a speed that never overtakes a car already in the lane."""
        lo, hi = self.pattern.speed_range
        for _ in range(8):
            speed = float(self._traffic_rng.uniform(lo, hi))
            if self._speed_admissible(speed, in_lane):
                return speed
        # Matching the fastest existing car closes no gap on it and loses
        # ground to every slower one, so it is always admissible.
        return max(c.speed_mph for c in in_lane)

    def _speed_admissible(self, speed: float, in_lane: list[Car]) -> bool:
        c_new = per_tick_closure(speed)
        spawn_pos = self.config.horizon
        for car in in_lane:
            c_ex = per_tick_closure(car.speed_mph)
            if c_new <= c_ex:
                continue
            gap = spawn_pos - car.position - CAR_LENGTH
            t_contact = gap / (c_new - c_ex)
            t_exit = (car.position + self.config.horizon) / c_ex
            if t_contact < t_exit + 2.0:
                return False
        return True

    # -- observation ---------------------------------------------------

    def sense(self) -> StateVector:
        """Noisy three-lane distance reading centered on the agent's lane.

        Exactly three noise draws are consumed per call regardless of
        occupancy, so the noise stream position depends only on call count.
        """
        lane = self.agent_lane
        draws = self._noise_rng.normal(0.0, 1.0, 3)
        dists = []
        for i, target in enumerate((lane - 1, lane, lane + 1)):
            if target < 0 or target >= N_LANES:
                dists.append(NO_CAR)
                continue
            in_lane = [c for c in self.cars if c.lane == target]
            if not in_lane:
                dists.append(NO_CAR)
                continue
            nearest = min(in_lane, key=lambda c: abs(c.position))
            raw = nearest.position + self.config.noise_sigma * draws[i]
            dists.append(float(np.clip(raw, -SENSE_RANGE, SENSE_RANGE)))
        return StateVector(lane, dists[0], dists[1], dists[2])

    def collision(self) -> bool:
        occupied = self.occupied_lanes()
        return any(
            c.lane in occupied and abs(c.position) < CAR_LENGTH for c in self.cars
        )

    def snapshot(self) -> dict:
        return {
            "timestep": self._timestep,
            "agent": {
                "lane_from": self._lane_from,
                "lane_to": self._lane_to,
                "fraction": self.lateral_fraction,
            },
            "cars": [[c.lane, round(c.position, 3), round(c.speed_mph, 2)] for c in self.cars],
        }


def evaluate(
    act: Callable[[StateVector], Action | None],
    pattern: TrafficPattern,
    n: int = 1000,
    config: WorldConfig = WorldConfig(),
    noise_seed: int = 0,
) -> EvalReport:
    """Drive a fixed policy for exactly n timesteps and report the metrics.

    The policy is consulted only at decision points (previous action
    complete); lane changes run to completion before the next query.
    """
    if pattern.kind is not PatternKind.FIXED_EVALUATION:
        raise ValueError("evaluation requires a fixed_evaluation pattern")
    world = DrivingWorld(pattern, config, noise_seed)
    occupancy = [0] * N_LANES
    collisions = 0
    remaining = 0
    for _ in range(n):
        directive = None
        if remaining <= 0:
            choice = act(world.sense())
            if choice is not None:
                directive = choice
                remaining = action_duration(choice)
            else:
                remaining = 1
        world.step(directive)
        remaining -= 1
        occupancy[world.agent_lane] += 1
        if world.collision():
            collisions += 1
    return EvalReport(
        lane_occupancy=tuple(c / n for c in occupancy),
        collision_rate=collisions / n,
        timesteps=n,
    )


def calibrate_center_rate(
    seed: int,
    target: float = 0.30,
    tolerance: float = 0.005,
    side_factor: float = 0.35,
    n_timesteps: int = 12000,
    eval_timesteps: int = 1000,
    max_iter: int = 40,
) -> tuple[float, TrafficPattern, EvalReport]:
    """Binary-search the center-lane arrival rate for the straight-driving
    collision target, returning the frozen pattern that achieved it."""
    lo, hi = 0.005, 0.40

    def score(rate: float) -> tuple[TrafficPattern, EvalReport]:
        pat = freeze_pattern(
            TrafficPattern.random(seed, rate, side_factor), n_timesteps
        )
        rep = evaluate(
            lambda s: Action.FORWARD, pat, eval_timesteps, WorldConfig(), noise_seed=seed
        )
        return pat, rep

    best = None
    best_err = float("inf")
    for _ in range(max_iter):
        mid = (lo + hi) / 2
        pat, rep = score(mid)
        err = rep.collision_rate - target
        if abs(err) < best_err:
            best_err = abs(err)
            best = (mid, pat, rep)
        if abs(err) <= tolerance:
            break
        if err < 0:
            lo = mid
        else:
            hi = mid
    return best
