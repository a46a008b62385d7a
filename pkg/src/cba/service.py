"""Interactive teaching session over a websocket: streams frames and engine
events to a browser console, funnels a human teacher's demonstrations and
corrections into the engine, and archives replayable session records.

Wire schema: docs/wire_schema.md. One tick loop per process; the world is
sensed exactly once per simulated timestep (holds reuse the cached reading,
keeping the noise stream replayable no matter how long a human deliberates).
"""

from __future__ import annotations

import asyncio
import json
import logging
import uuid
from collections import deque
from contextlib import asynccontextmanager
from dataclasses import replace
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .domain import Action, DemoSource, StateVector
from .engine import (
    CbaEngine,
    DemonstrationReceived,
    CorrectionReceived,
    EngineEvent,
    EngineMode,
    event_from_dict,
)
from .harness import ExperimentConfig, default_evaluation_pattern
from .oracle import OracleTeacher
from .world import DrivingWorld, TrafficPattern, action_duration, evaluate

log = logging.getLogger(__name__)

WIRE_VERSION = "teach-wire/1"
ARCHIVE_VERSION = "interactive-session/1"
VALID_FPS = (5, 2)

OVERRIDABLE = (
    "regime",
    "world_seed",
    "noise_seed",
    "model_seed",
    "split_seed",
    "center_rate",
    "side_factor",
    "noise_sigma",
    "start_lane",
    "init_session_size",
    "fixed_confidence_threshold",
)


def scripted_init_session(world: DrivingWorld, n: int) -> list[tuple[StateVector, Action]]:
    """Oracle-driven bootstrap demonstrations; identical across regimes."""
    if n <= 0:
        return []
    scripted = OracleTeacher(world, corrections_enabled=False)
    pairs: list[tuple[StateVector, Action]] = []
    while len(pairs) < n:
        state = world.sense()
        action = scripted.act_now()
        pairs.append((state, action))
        for i in range(action_duration(action)):
            world.step(action if i == 0 else None)
            scripted.after_step(autonomous=False)
    return pairs


class HumanTeacher:
    """TeacherChannel fed by websocket input; one slot per input kind."""

    def __init__(self):
        self.demonstration: Optional[Action] = None
        self.correction: Optional[Action] = None

    def notify_request(self) -> None:
        pass

    def notify_autonomous(self, action: Action, state: StateVector) -> None:
        pass

    def poll_demonstration(self):
        value, self.demonstration = self.demonstration, None
        return value

    def poll_correction(self):
        value, self.correction = self.correction, None
        return value


class Session:
    """One live teaching session: world + engine + human channel."""

    def __init__(self, config: ExperimentConfig, fps: int, eval_pattern: TrafficPattern):
        self.config = config
        self.fps = fps
        self.eval_pattern = eval_pattern
        self.world = DrivingWorld(
            config.training_pattern(), config.world_config(), config.noise_seed
        )
        self.teacher = HumanTeacher()
        self.engine = CbaEngine(config.engine_config(), self.teacher)
        self.events: list[EngineEvent] = []
        self.paused = False
        self._hold_frame_sent = False

        pairs = scripted_init_session(self.world, config.init_session_size)
        if pairs:
            self.events.extend(self.engine.bootstrap(pairs, timestep=self.world.timestep))
        self.state = self.world.sense()

    @property
    def timestep(self) -> int:
        return self.world.timestep

    def correction_window_open(self) -> bool:
        return self.engine.correction_window_open(self.world.timestep)

    def tick(self) -> tuple[list[EngineEvent], bool]:
        """Advance one engine step; returns (new events, frame_due)."""
        if self.paused:
            return [], False
        result = self.engine.step(self.state, self.world.timestep)
        self.events.extend(result.events)

        if result.directive is None and self.engine.pending_request:
            # world stays frozen awaiting the teacher; one frame announces it
            frame_due = not self._hold_frame_sent
            self._hold_frame_sent = True
            return list(result.events), frame_due
        self._hold_frame_sent = False

        self.world.step(result.directive)
        self.state = self.world.sense()
        # a correction slot the engine chose not to consume is stale input
        if self.teacher.correction is not None and not self.correction_window_open():
            self.teacher.correction = None
        return list(result.events), True

    def classification_view(self) -> Optional[dict]:
        if self.engine.model is None:
            return None
        c = self.engine.model.classify(self.state)
        return {
            "action": c.action.wire,
            "confidence": c.confidence,
            "boundary_id": c.boundary_id,
        }

    def counters(self) -> dict:
        return {
            "dataset_size": self.engine.dataset_size,
            "requests": self.engine.requests_made,
            "autonomous": self.engine.autonomous_count,
            "retrains": self.engine.retrain_count,
            "demos_by_source": {k.value: v for k, v in self.engine.demos_by_source.items()},
        }

    def run_eval(self):
        model = self.engine.model
        if model is None:
            raise RuntimeError("no trained model yet")
        return evaluate(
            lambda s: model.classify(s).action,
            self.eval_pattern,
            n=self.config.eval_timesteps,
            config=self.config.world_config(),
            noise_seed=self.config.eval_noise_seed,
        )


class Subscriber:
    """Per-connection outbox: events are never dropped, frames latest-wins."""

    def __init__(self, ws: WebSocket, role: str):
        self.ws = ws
        self.role = role
        self.events: deque[dict] = deque()
        self.frame: Optional[dict] = None
        self.wake = asyncio.Event()

    def offer_event(self, msg: dict) -> None:
        self.events.append(msg)
        self.wake.set()

    def offer_frame(self, msg: dict) -> None:
        self.frame = msg
        self.wake.set()

    async def pump(self) -> None:
        while True:
            await self.wake.wait()
            self.wake.clear()
            while self.events:
                await self.ws.send_json(self.events.popleft())
            if self.frame is not None:
                frame, self.frame = self.frame, None
                await self.ws.send_json(frame)


class Hub:
    """Owns the session, the connections, and the wire transcript."""

    def __init__(self, base: ExperimentConfig, fps: int, eval_pattern: TrafficPattern,
                 session_dir: str | Path = "sessions"):
        self.id = uuid.uuid4().hex[:12]
        self.base = base
        self.fps = fps
        self.eval_pattern = eval_pattern
        self.session_dir = Path(session_dir)
        self.session: Optional[Session] = None
        self.subscribers: list[Subscriber] = []
        self.teacher_sub: Optional[Subscriber] = None
        self.transcript: list[dict] = []
        self._seq = 0

    # wire plumbing ------------------------------------------------------

    def _stamp(self, msg: dict) -> dict:
        self._seq += 1
        msg["session"] = self.id
        msg["seq"] = self._seq
        return msg

    def _record(self, direction: str, msg: dict) -> None:
        self.transcript.append({"dir": direction, "msg": msg})

    def broadcast_event(self, payload: dict) -> None:
        msg = self._stamp({"type": "event", "event": payload})
        self._record("out", msg)
        for sub in self.subscribers:
            sub.offer_event(msg)

    def broadcast_frame(self) -> None:
        s = self.session
        msg = self._stamp(
            {
                "type": "frame",
                "wire": WIRE_VERSION,
                "timestep": s.timestep,
                "world": s.world.snapshot(),
                "sensed": s.state.to_dict(),
                "classification": s.classification_view(),
                "thresholds": s.engine.thresholds.to_dict(),
                "pending_request": s.engine.pending_request,
                "correction_window_open": s.correction_window_open(),
                "paused": s.paused,
                "tick_rate": s.fps,
                "collision": s.world.collision(),
                "counters": s.counters(),
            }
        )
        self._record("out", msg)
        for sub in self.subscribers:
            sub.offer_frame(msg)

    def reply(self, sub: Subscriber, msg: dict) -> dict:
        msg = self._stamp(msg)
        self._record("out", msg)
        sub.offer_event(msg)
        return msg

    def error(self, sub: Subscriber, re: str, detail: str) -> None:
        self.reply(sub, {"type": "error", "re": re, "detail": detail})

    def ack(self, sub: Subscriber, re: str, **extra) -> None:
        self.reply(sub, {"type": "ack", "re": re, **extra})

    # tick loop ------------------------------------------------------------

    def do_tick(self) -> None:
        if self.session is None or self.session.paused:
            return
        events, frame_due = self.session.tick()
        for e in events:
            self.broadcast_event(e.to_dict())
        if frame_due:
            self.broadcast_frame()

    async def tick_forever(self) -> None:
        while True:
            fps = self.session.fps if self.session else self.fps
            await asyncio.sleep(1.0 / fps)
            try:
                self.do_tick()
            except Exception:
                log.exception("tick failed")

    # connections ----------------------------------------------------------

    def attach(self, ws: WebSocket) -> Subscriber:
        role = "teacher" if self.teacher_sub is None else "observer"
        sub = Subscriber(ws, role)
        self.subscribers.append(sub)
        if role == "teacher":
            self.teacher_sub = sub
        self.ack(
            sub,
            "connect",
            wire=WIRE_VERSION,
            role=role,
            started=self.session is not None,
            tick_rate=self.session.fps if self.session else self.fps,
        )
        return sub

    def detach(self, sub: Subscriber) -> None:
        if sub in self.subscribers:
            self.subscribers.remove(sub)
        if sub is self.teacher_sub:
            self.teacher_sub = None
            if self.session is not None and not self.session.paused:
                self.session.paused = True  # nobody is watching the learner

    # client messages --------------------------------------------------------

    def handle(self, sub: Subscriber, msg: dict) -> None:
        self._record("in", {"role": sub.role, "msg": msg})
        mtype = msg.get("type")
        if not isinstance(mtype, str):
            self.error(sub, "unknown", "message without a type")
            return
        if mtype in ("demonstrate", "correct", "start_session", "set_speed",
                     "pause_toggle", "save_session") and sub.role != "teacher":
            self.error(sub, mtype, "observers are read-only")
            return
        handler = getattr(self, f"_on_{mtype}", None)
        if handler is None:
            self.error(sub, mtype, f"unknown message type {mtype!r}")
            return
        try:
            handler(sub, msg)
        except Exception as exc:  # malformed payloads must not kill the session
            log.exception("client message failed")
            self.error(sub, mtype, str(exc))

    def _on_start_session(self, sub: Subscriber, msg: dict) -> None:
        if self.session is not None:
            self.error(sub, "start_session", "session already started")
            return
        overrides = msg.get("config") or {}
        unknown = set(overrides) - set(OVERRIDABLE) - {"fps"}
        if unknown:
            self.error(sub, "start_session", f"unknown config fields {sorted(unknown)}")
            return
        config = self.base
        fields = {k: v for k, v in overrides.items() if k != "fps"}
        if "regime" in fields:
            fields["regime"] = EngineMode(fields["regime"])
        if fields:
            config = replace(config, **fields)
        fps = int(overrides.get("fps", self.fps))
        if fps not in VALID_FPS:
            self.error(sub, "start_session", f"fps must be one of {VALID_FPS}")
            return
        self.session = Session(config, fps, self.eval_pattern)
        for e in self.session.events:
            self.broadcast_event(e.to_dict())
        self.ack(sub, "start_session", regime=config.regime.value,
                 init_demos=config.init_session_size, timestep=self.session.timestep)
        self.broadcast_frame()

    def _require_session(self, sub: Subscriber, re: str) -> Optional[Session]:
        if self.session is None:
            self.error(sub, re, "no session started")
            return None
        return self.session

    def _on_demonstrate(self, sub: Subscriber, msg: dict) -> None:
        s = self._require_session(sub, "demonstrate")
        if s is None:
            return
        if not s.engine.pending_request:
            self.error(sub, "demonstrate", "no demonstration request pending")
            return
        action = Action.from_wire(str(msg.get("action")))
        s.teacher.demonstration = action
        self.ack(sub, "demonstrate", action=action.wire)

    def _on_correct(self, sub: Subscriber, msg: dict) -> None:
        s = self._require_session(sub, "correct")
        if s is None:
            return
        if not s.correction_window_open():
            self.error(sub, "correct", "correction window is not open")
            return
        action = Action.from_wire(str(msg.get("action")))
        s.teacher.correction = action
        self.ack(sub, "correct", action=action.wire)

    def _on_set_speed(self, sub: Subscriber, msg: dict) -> None:
        s = self._require_session(sub, "set_speed")
        if s is None:
            return
        fps = msg.get("fps")
        if fps not in VALID_FPS:
            self.error(sub, "set_speed", f"fps must be one of {VALID_FPS}")
            return
        s.fps = int(fps)
        self.ack(sub, "set_speed", tick_rate=s.fps)

    def _on_pause_toggle(self, sub: Subscriber, msg: dict) -> None:
        s = self._require_session(sub, "pause_toggle")
        if s is None:
            return
        s.paused = not s.paused
        self.ack(sub, "pause_toggle", paused=s.paused)
        if not s.paused:
            self.broadcast_frame()

    def _on_request_eval(self, sub: Subscriber, msg: dict) -> None:
        s = self._require_session(sub, "request_eval")
        if s is None:
            return
        try:
            report = s.run_eval()
        except RuntimeError as exc:
            self.error(sub, "request_eval", str(exc))
            return
        msg_out = self._stamp({"type": "eval_result", "report": report.to_dict()})
        self._record("out", msg_out)
        for other in self.subscribers:
            other.offer_event(msg_out)

    def _on_save_session(self, sub: Subscriber, msg: dict) -> None:
        s = self._require_session(sub, "save_session")
        if s is None:
            return
        out = Path(msg.get("out_dir") or (self.session_dir / self.id))
        path = save_interactive_session(out, self, s)
        self.ack(sub, "save_session", path=str(path))


# -- archiving and replay --------------------------------------------------------


def save_interactive_session(out_dir: str | Path, hub: Hub, session: Session) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(
            {
                "experiment": session.config.to_dict(),
                "fps": session.fps,
                "session_id": hub.id,
                "final_timestep": session.timestep,
            },
            indent=2,
        )
    )
    with (out / "events.jsonl").open("w") as fh:
        for e in session.events:
            fh.write(json.dumps(e.to_dict()) + "\n")
    with (out / "transcript.jsonl").open("w") as fh:
        for row in hub.transcript:
            fh.write(json.dumps(row) + "\n")
    if session.engine.model is not None:
        (out / "model.json").write_text(json.dumps(session.engine.model.to_dict()))
    (out / "thresholds.json").write_text(
        json.dumps(session.engine.thresholds.to_dict(), indent=2)
    )
    manifest = {
        "version": ARCHIVE_VERSION,
        "files": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


class ReplayTeacher:
    """Feeds recorded demonstrations/corrections back at their timesteps."""

    def __init__(self, events: list[EngineEvent]):
        self.demos: dict[int, Action] = {
            e.timestep: e.action
            for e in events
            if isinstance(e, DemonstrationReceived) and e.source is DemoSource.CE_REQUEST
        }
        self.corrections: dict[int, Action] = {
            e.timestep: e.corrected_action
            for e in events
            if isinstance(e, CorrectionReceived)
        }
        self.now = -1

    def advance_to(self, timestep: int) -> None:
        self.now = timestep

    def notify_request(self) -> None:
        pass

    def notify_autonomous(self, action, state) -> None:
        pass

    def poll_demonstration(self):
        return self.demos.pop(self.now, None)

    def poll_correction(self):
        return self.corrections.pop(self.now, None)


def replay_interactive_session(
    out_dir: str | Path, eval_pattern: Optional[TrafficPattern] = None
) -> tuple[bool, Optional[int], list[EngineEvent]]:
    """Re-run an archived interactive session headlessly.

    Returns (match, first divergent event index or None, produced events).
    """
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    if manifest.get("version") != ARCHIVE_VERSION:
        raise ValueError(f"unsupported archive version {manifest.get('version')!r}")
    doc = json.loads((out / "config.json").read_text())
    config = ExperimentConfig.from_dict(doc["experiment"])
    final_timestep = int(doc["final_timestep"])
    stored = [
        event_from_dict(json.loads(line))
        for line in (out / "events.jsonl").read_text().splitlines()
        if line.strip()
    ]

    world = DrivingWorld(config.training_pattern(), config.world_config(), config.noise_seed)
    teacher = ReplayTeacher(stored)
    engine = CbaEngine(config.engine_config(), teacher)
    produced: list[EngineEvent] = []

    pairs = scripted_init_session(world, config.init_session_size)
    if pairs:
        produced.extend(engine.bootstrap(pairs, timestep=world.timestep))
    state = world.sense()

    while world.timestep <= final_timestep:
        teacher.advance_to(world.timestep)
        result = engine.step(state, world.timestep)
        produced.extend(result.events)
        if result.directive is None and engine.pending_request:
            # the recorded answer (if any) was consumed on this very tick, so
            # a persisting hold means the session was saved mid-request
            break
        world.step(result.directive)
        state = world.sense()

    first_divergence: Optional[int] = None
    for i, (a, b) in enumerate(zip(stored, produced)):
        if a.to_dict() != b.to_dict():
            first_divergence = i
            break
    if first_divergence is None and len(stored) != len(produced):
        first_divergence = min(len(stored), len(produced))
    return first_divergence is None, first_divergence, produced


# -- app ---------------------------------------------------------------------------


def build_app(
    regime: EngineMode = EngineMode.CBA,
    world_seed: int = 0,
    center_rate: Optional[float] = None,
    init_demos: int = 300,
    eval_pattern: Optional[TrafficPattern] = None,
    fps: int = 5,
    session_dir: str | Path = "sessions",
    auto_tick: bool = True,
) -> FastAPI:
    if eval_pattern is None:
        eval_pattern = default_evaluation_pattern()
    base = ExperimentConfig(regime=regime, world_seed=world_seed,
                            init_session_size=init_demos)
    if center_rate is not None:
        base = replace(base, center_rate=center_rate)
    hub = Hub(base, fps, eval_pattern, session_dir)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        task = asyncio.create_task(hub.tick_forever()) if auto_tick else None
        yield
        if task is not None:
            task.cancel()

    app = FastAPI(lifespan=lifespan)
    app.state.hub = hub

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        sub = hub.attach(ws)
        pump = asyncio.create_task(sub.pump())
        try:
            while True:
                try:
                    msg = await ws.receive_json()
                except json.JSONDecodeError:
                    hub.error(sub, "unknown", "message is not valid JSON")
                    continue
                if not isinstance(msg, dict):
                    hub.error(sub, "unknown", "message must be an object")
                    continue
                hub.handle(sub, msg)
        except WebSocketDisconnect:
            pass
        finally:
            pump.cancel()
            hub.detach(sub)

    if not auto_tick:
        @app.post("/tick")
        def manual_tick(n: int = 1):
            for _ in range(n):
                hub.do_tick()
            return {"timestep": hub.session.timestep if hub.session else None}

    return app
