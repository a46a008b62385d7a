"""Scripted teacher: a deterministic safe-driving policy plus a mistake
monitor that issues corrections while the agent acts on its own.

The policy reads ground truth (the rendered scene a human would watch), not
the agent's noisy sensors. Safety logic is built around one asymmetry of the
road: shoulders never carry traffic, so lanes 1 and 3 always have an escape
route, while lane 2 can be boxed in. The policy therefore treats the center
lane as desirable only when the road around it is empty, which keeps it
collision-free at any traffic density without the ability to brake.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .domain import Action, StateVector
from .world import (
    CAR_LENGTH,
    LANE_CHANGE_TICKS,
    N_LANES,
    TRAFFIC_LANES,
    DrivingWorld,
    EvalReport,
    TrafficPattern,
    WorldConfig,
    action_duration,
    per_tick_closure,
)


@dataclass(frozen=True)
class OracleConfig:
    # occupancy preference, best first: center, left, left shoulder,
    # right shoulder, right
    ranking: tuple[int, int, int, int, int] = (2, 1, 0, 4, 3)
    # own-lane gap below which the agent must leave the lane; must exceed
    # 4 + 5 * worst closure (21.9 units) or the escape merge itself collides
    flee_trigger: float = 24.0
    # required clearance ahead in a lane entered voluntarily: covers the
    # merge in, one decision tick and a possible immediate flee back out
    homing_clearance: float = 45.0
    # the center lane is entered or kept only while every traffic lane is
    # empty within this range; see module docstring
    center_entry_clearance: float = 50.0
    merge_margin_ahead: float = 2.0
    merge_margin_behind: float = 1.0
    hysteresis_ticks: int = 10
    horizon: float = 50.0


def gap_ahead(world: DrivingWorld, lane: int, horizon: float) -> float:
    """Distance to the nearest car ahead in a lane, inf when none in range."""
    best = float("inf")
    for car in world.cars:
        if car.lane == lane and 0.0 < car.position <= horizon:
            best = min(best, car.position)
    return best


def merge_window_clear(world: DrivingWorld, lane: int, config: OracleConfig) -> bool:
    """True when a lane change into `lane` cannot touch any of its cars."""
    for car in world.cars:
        if car.lane != lane or car.position > config.horizon:
            continue
        p = car.position
        if p <= -(CAR_LENGTH + config.merge_margin_behind):
            continue
        travel = LANE_CHANGE_TICKS * per_tick_closure(car.speed_mph)
        if p - travel > CAR_LENGTH + config.merge_margin_ahead:
            continue
        return False
    return True


class OraclePolicy:
    """Deterministic rule policy over ground-truth world state."""

    def __init__(self, config: OracleConfig = OracleConfig()):
        self.config = config
        self._rank = {lane: i for i, lane in enumerate(config.ranking)}

    def _center_clear(self, world: DrivingWorld) -> bool:
        c = self.config.center_entry_clearance
        return all(gap_ahead(world, lane, c) == float("inf") for lane in TRAFFIC_LANES)

    def _toward(self, current: int, target: int) -> Action:
        return Action.LEFT if target < current else Action.RIGHT

    def act(self, world: DrivingWorld, allow_homing: bool = True) -> Action:
        cfg = self.config
        lane = world.agent_lane
        own_gap = gap_ahead(world, lane, cfg.horizon)
        threatened = own_gap < cfg.flee_trigger
        if lane == 2 and not threatened:
            # leave the boxable lane at first sight of any traffic ahead
            threatened = any(
                gap_ahead(world, l, cfg.horizon) < cfg.center_entry_clearance - 1.0
                for l in TRAFFIC_LANES
            )
        if threatened:
            neighbors = [l for l in (lane - 1, lane + 1) if 0 <= l < N_LANES]
            neighbors.sort(key=self._rank.__getitem__)
            for sustainable_only in (True, False):
                for nb in neighbors:
                    if sustainable_only and nb == 2 and not self._center_clear(world):
                        continue
                    if merge_window_clear(world, nb, cfg):
                        return self._toward(lane, nb)
            return Action.FORWARD
        if allow_homing:
            dest = 2 if self._center_clear(world) else 1
            if dest != lane:
                step = lane + (1 if dest > lane else -1)
                step_ok = step != 2 or self._center_clear(world)
                if (
                    step_ok
                    and merge_window_clear(world, step, cfg)
                    and gap_ahead(world, step, cfg.horizon) >= cfg.homing_clearance
                ):
                    return self._toward(lane, step)
        return Action.FORWARD


class SettleTracker:
    """Watches the world for lane-change completions; gates homing moves."""

    def __init__(self, hysteresis_ticks: int):
        self.hysteresis = hysteresis_ticks
        self._last_settle = None
        self._was_in_transition = False

    def observe(self, world: DrivingWorld) -> None:
        if self._was_in_transition and not world.in_transition:
            self._last_settle = world.timestep
        self._was_in_transition = world.in_transition

    def homing_allowed(self, timestep: int) -> bool:
        if self._last_settle is None:
            return True
        return timestep - self._last_settle >= self.hysteresis


@dataclass(frozen=True)
class MonitorConfig:
    reaction_latency: int = 2
    imminent_margin: float = 15.0
    shoulder_dwell_budget: int = 60
    oscillation_window: int = 40
    oscillation_reversals: int = 3


class MistakeMonitor:
    """Fires corrections when autonomous behavior goes visibly wrong.

    At every autonomous decision the monitor records what the policy would
    have done instead; when a predicate fires, that remembered action is
    delivered after the configured reaction latency. At most one correction
    is in flight at a time, and a correction is only sent when the remembered
    action actually disagrees with what the agent chose.
    """

    def __init__(
        self,
        policy: OraclePolicy,
        settle: SettleTracker,
        config: MonitorConfig = MonitorConfig(),
    ):
        self.policy = policy
        self.settle = settle
        self.config = config
        self._agent_action: Action | None = None
        self._oracle_action: Action | None = None
        self._pending: tuple[int, Action] | None = None
        self._dwell = 0
        self._turns: deque[tuple[int, Action]] = deque()
        self._was_in_transition = False
        self._pending_turn: Action | None = None
        self.fired: list[tuple[int, str]] = []

    def observe_decision(self, world: DrivingWorld, action: Action) -> None:
        self._agent_action = action
        self._oracle_action = self.policy.act(
            world, allow_homing=self.settle.homing_allowed(world.timestep)
        )
        if action in (Action.LEFT, Action.RIGHT):
            self._pending_turn = action

    def observe_tick(self, world: DrivingWorld, autonomous: bool) -> None:
        if self._was_in_transition and not world.in_transition:
            if self._pending_turn is not None:
                self._turns.append((world.timestep, self._pending_turn))
                self._pending_turn = None
        self._was_in_transition = world.in_transition
        cutoff = world.timestep - self.config.oscillation_window
        while self._turns and self._turns[0][0] < cutoff:
            self._turns.popleft()

        if not autonomous:
            # the teacher is hands-on; retroactive corrections lapse
            self._dwell = 0
            self._pending = None
            return

        if world.collision():
            self._fire(world, "collision")
            return
        if (
            self._agent_action is Action.FORWARD
            and not world.in_transition
            and gap_ahead(world, world.agent_lane, self.policy.config.horizon)
            < self.config.imminent_margin
        ):
            self._fire(world, "imminent_collision")
            return
        if world.agent_lane in (0, N_LANES - 1):
            self._dwell += 1
            if self._dwell >= self.config.shoulder_dwell_budget:
                self._dwell = 0
                self._fire(world, "shoulder_dwell")
                return
        else:
            self._dwell = 0
        if self._reversals() >= self.config.oscillation_reversals:
            self._turns.clear()
            self._fire(world, "oscillation", override=Action.FORWARD)

    def _reversals(self) -> int:
        directions = [a for _, a in self._turns]
        return sum(1 for x, y in zip(directions, directions[1:]) if x is not y)

    def _fire(self, world: DrivingWorld, kind: str, override: Action | None = None) -> None:
        if self._pending is not None:
            return
        action = override if override is not None else self._oracle_action
        if action is None or action is self._agent_action:
            return
        self.fired.append((world.timestep, kind))
        self._pending = (world.timestep + self.config.reaction_latency, action)

    def poll(self, timestep: int) -> Action | None:
        if self._pending is None or timestep < self._pending[0]:
            return None
        action = self._pending[1]
        self._pending = None
        if action is self._agent_action:
            # the learner already switched to this action on its own
            return None
        return action


class OracleTeacher:
    """TeacherChannel backed by the scripted policy and mistake monitor."""

    def __init__(
        self,
        world: DrivingWorld,
        oracle_config: OracleConfig = OracleConfig(),
        monitor_config: MonitorConfig = MonitorConfig(),
        corrections_enabled: bool = True,
    ):
        self.world = world
        self.policy = OraclePolicy(oracle_config)
        self.settle = SettleTracker(oracle_config.hysteresis_ticks)
        self.monitor = MistakeMonitor(self.policy, self.settle, monitor_config)
        self.corrections_enabled = corrections_enabled
        self._request_pending = False
        self.demonstrations_given = 0
        self.corrections_given = 0

    # TeacherChannel interface -----------------------------------------

    def notify_request(self) -> None:
        self._request_pending = True

    def notify_autonomous(self, action: Action, state: StateVector) -> None:
        if self.corrections_enabled:
            self.monitor.observe_decision(self.world, action)

    def poll_demonstration(self) -> Action | None:
        if not self._request_pending:
            return None
        self._request_pending = False
        self.demonstrations_given += 1
        return self.act_now()

    def poll_correction(self) -> Action | None:
        if not self.corrections_enabled:
            return None
        action = self.monitor.poll(self.world.timestep)
        if action is not None:
            self.corrections_given += 1
        return action

    # driving and bookkeeping ------------------------------------------

    def act_now(self) -> Action:
        """The policy's choice for the world as it stands."""
        return self.policy.act(
            self.world, allow_homing=self.settle.homing_allowed(self.world.timestep)
        )

    def after_step(self, autonomous: bool) -> None:
        """Observe the world once per simulator tick, after it advances."""
        self.settle.observe(self.world)
        if self.corrections_enabled:
            self.monitor.observe_tick(self.world, autonomous)


def oracle_self_drive(
    pattern: TrafficPattern,
    n: int = 1000,
    world_config: WorldConfig = WorldConfig(),
    oracle_config: OracleConfig = OracleConfig(),
    noise_seed: int = 0,
) -> EvalReport:
    """Drive the scripted policy alone for n timesteps; the reference bar
    every learner is compared against."""
    world = DrivingWorld(pattern, world_config, noise_seed)
    policy = OraclePolicy(oracle_config)
    settle = SettleTracker(oracle_config.hysteresis_ticks)
    occupancy = [0] * N_LANES
    collisions = 0
    remaining = 0
    for _ in range(n):
        directive = None
        if remaining <= 0:
            choice = policy.act(world, allow_homing=settle.homing_allowed(world.timestep))
            directive = choice
            remaining = action_duration(choice)
        world.step(directive)
        settle.observe(world)
        remaining -= 1
        occupancy[world.agent_lane] += 1
        if world.collision():
            collisions += 1
    return EvalReport(
        lane_occupancy=tuple(c / n for c in occupancy),
        collision_rate=collisions / n,
        timesteps=n,
    )
