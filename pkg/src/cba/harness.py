"""Training-run orchestration: initial teaching session, interactive loop,
periodic frozen-pattern evaluations, completion detection, regime comparison,
and on-disk session archives that replay bit-for-bit.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from .autonomy_gate import SplitConfig
from .domain import Action, DemoSource, StateVector
from .engine import (
    CbaEngine,
    CorrectionReceived,
    DemonstrationReceived,
    DemonstrationRequested,
    EngineConfig,
    EngineEvent,
    EngineMode,
    event_from_dict,
)
from .oracle import OracleTeacher, oracle_self_drive
from .policy_model import ModelConfig
from .world import (
    DrivingWorld,
    EvalReport,
    TrafficPattern,
    WorldConfig,
    action_duration,
    evaluate,
    tv_distance,
)

log = logging.getLogger(__name__)

# center-lane arrival rate calibrated so a never-braking straight driver
# collides about 30% of evaluation timesteps; regenerate via the
# calibrate-traffic command
DEFAULT_CENTER_RATE = 0.1315234375
DEFAULT_SIDE_FACTOR = 0.35

PACKAGED_PATTERN = "evaluation_pattern.json"


def default_evaluation_pattern() -> TrafficPattern:
    from importlib.resources import files

    path = files("cba").joinpath("patterns").joinpath(PACKAGED_PATTERN)
    return TrafficPattern.from_dict(json.loads(path.read_text()))


@dataclass(frozen=True)
class ExperimentConfig:
    regime: EngineMode
    world_seed: int = 0
    noise_seed: int = 0
    eval_noise_seed: int = 101
    model_seed: int = 7
    split_seed: int = 3
    center_rate: float = DEFAULT_CENTER_RATE
    side_factor: float = DEFAULT_SIDE_FACTOR
    noise_sigma: float = 0.5
    start_lane: int = 2
    init_session_size: int = 300
    retrain_cadence: int = 10
    correction_grace: int = 3
    distance_multiplier: float = 3.0
    fixed_confidence_threshold: float = 0.9
    eval_interval_demos: int = 100
    eval_timesteps: int = 1000
    completion_window: int = 2000
    max_demos: int = 3000
    max_timesteps: int = 500_000

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            mode=self.regime,
            model=ModelConfig(seed=self.model_seed),
            split=SplitConfig(seed=self.split_seed),
            distance_multiplier=self.distance_multiplier,
            fixed_confidence_threshold=self.fixed_confidence_threshold,
            retrain_cadence=self.retrain_cadence,
            correction_grace=self.correction_grace,
        )

    def training_pattern(self) -> TrafficPattern:
        return TrafficPattern.random(
            seed=self.world_seed,
            center_rate=self.center_rate,
            side_factor=self.side_factor,
        )

    def world_config(self) -> WorldConfig:
        return WorldConfig(noise_sigma=self.noise_sigma, start_lane=self.start_lane)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["regime"] = self.regime.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["regime"] = EngineMode(d["regime"])
        return cls(**d)


@dataclass(frozen=True)
class IntervalEval:
    total_demos: int
    timestep: int
    report: EvalReport

    def to_dict(self) -> dict:
        return {
            "total_demos": self.total_demos,
            "timestep": self.timestep,
            "report": self.report.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IntervalEval":
        return cls(int(d["total_demos"]), int(d["timestep"]), EvalReport.from_dict(d["report"]))


@dataclass
class RegimeReport:
    regime: str
    completed: bool
    completion_timestep: Optional[int]
    total_timesteps: int
    total_demos: int
    demos_by_source: dict[str, int]
    requests: int
    corrections: int
    training_collisions: int
    demo_sources: list[str]
    evals: list[IntervalEval]
    final_eval: Optional[EvalReport]

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "completed": self.completed,
            "completion_timestep": self.completion_timestep,
            "total_timesteps": self.total_timesteps,
            "total_demos": self.total_demos,
            "demos_by_source": dict(self.demos_by_source),
            "requests": self.requests,
            "corrections": self.corrections,
            "training_collisions": self.training_collisions,
            "demo_sources": list(self.demo_sources),
            "evals": [e.to_dict() for e in self.evals],
            "final_eval": self.final_eval.to_dict() if self.final_eval else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegimeReport":
        return cls(
            regime=d["regime"],
            completed=bool(d["completed"]),
            completion_timestep=d["completion_timestep"],
            total_timesteps=int(d["total_timesteps"]),
            total_demos=int(d["total_demos"]),
            demos_by_source={k: int(v) for k, v in d["demos_by_source"].items()},
            requests=int(d["requests"]),
            corrections=int(d["corrections"]),
            training_collisions=int(d["training_collisions"]),
            demo_sources=list(d["demo_sources"]),
            evals=[IntervalEval.from_dict(e) for e in d["evals"]],
            final_eval=EvalReport.from_dict(d["final_eval"]) if d["final_eval"] else None,
        )

    def tail_correction_share(self, tail: int = 100) -> float:
        """Fraction of the last `tail` demonstrations that were corrective."""
        window = self.demo_sources[-tail:]
        if not window:
            return 0.0
        return sum(1 for s in window if s == DemoSource.CORRECTIVE.value) / len(window)


class RunResult:
    """A finished training run plus everything needed to archive it."""

    def __init__(self, report: RegimeReport, events: list[EngineEvent], engine: CbaEngine,
                 config: ExperimentConfig):
        self.report = report
        self.events = events
        self.engine = engine
        self.config = config


def _drive(world: DrivingWorld, teacher: OracleTeacher, action: Action,
           autonomous: bool) -> int:
    """Apply one chosen action through its full duration; return collision
    rising edges observed while it played out."""
    edges = 0
    was = world.collision()
    for i in range(action_duration(action)):
        world.step(action if i == 0 else None)
        teacher.after_step(autonomous=autonomous)
        now = world.collision()
        if now and not was:
            edges += 1
        was = now
    return edges


def run_regime(
    config: ExperimentConfig,
    eval_pattern: Optional[TrafficPattern] = None,
    on_progress: Optional[Callable[[int, int], None]] = None,
) -> RunResult:
    """One full training session under a regime; deterministic in config."""
    if eval_pattern is None:
        eval_pattern = default_evaluation_pattern()

    world = DrivingWorld(
        config.training_pattern(), config.world_config(), config.noise_seed
    )
    teacher = OracleTeacher(
        world, corrections_enabled=config.regime.corrections_enabled
    )
    engine = CbaEngine(config.engine_config(), teacher)

    events: list[EngineEvent] = []
    demo_sources: list[str] = []
    training_collisions = 0
    last_request_tick = -1
    last_correction_tick = -1
    last_collision_tick = -1
    collision_active = False
    evals: list[IntervalEval] = []

    def model_eval() -> EvalReport:
        model = engine.model
        before = model.to_dict()
        report = evaluate(
            lambda s: model.classify(s).action,
            eval_pattern,
            n=config.eval_timesteps,
            config=config.world_config(),
            noise_seed=config.eval_noise_seed,
        )
        # evaluation must not perturb the learner
        assert model.to_dict() == before
        return report

    # initial teaching session: the teacher drives, the learner records
    pairs: list[tuple[StateVector, Action]] = []
    while len(pairs) < config.init_session_size:
        state = world.sense()
        action = teacher.act_now()
        pairs.append((state, action))
        training_collisions += _drive(world, teacher, action, autonomous=False)
    boot_events = engine.bootstrap(pairs, timestep=world.timestep)
    events.extend(boot_events)
    demo_sources.extend([DemoSource.INIT_SESSION.value] * len(pairs))
    bootstrap_tick = world.timestep

    evals.append(IntervalEval(engine.dataset_size, world.timestep, model_eval()))
    next_eval_at = (engine.dataset_size // config.eval_interval_demos + 1) * (
        config.eval_interval_demos
    )

    completed = False
    completion_timestep: Optional[int] = None

    while True:
        t = world.timestep
        if t >= config.max_timesteps or engine.dataset_size >= config.max_demos:
            break
        state = world.sense()
        result = engine.step(state, t)
        events.extend(result.events)
        for e in result.events:
            if isinstance(e, DemonstrationRequested):
                last_request_tick = t
            elif isinstance(e, DemonstrationReceived):
                demo_sources.append(e.source.value)
            elif isinstance(e, CorrectionReceived):
                last_correction_tick = t
                demo_sources.append(DemoSource.CORRECTIVE.value)

        if result.directive is None and engine.pending_request:
            raise RuntimeError("scripted teacher failed to answer a request")

        world.step(result.directive)
        teacher.after_step(autonomous=engine.executing_autonomous)
        now = world.collision()
        if now:
            last_collision_tick = world.timestep
            if not collision_active:
                training_collisions += 1
        collision_active = now

        if engine.dataset_size >= next_eval_at:
            evals.append(IntervalEval(engine.dataset_size, world.timestep, model_eval()))
            next_eval_at += config.eval_interval_demos

        if on_progress is not None and world.timestep % 1000 == 0:
            on_progress(world.timestep, engine.dataset_size)

        # completion: a long quiet stretch, with quiet defined per regime
        w = config.completion_window
        t_now = world.timestep
        if t_now - bootstrap_tick >= w and not engine.pending_request:
            quiet = True
            if config.regime is not EngineMode.CD_ONLY:
                quiet &= t_now - last_request_tick > w
            if config.regime.corrections_enabled:
                quiet &= t_now - last_correction_tick > w
                quiet &= t_now - last_collision_tick > w
            if quiet:
                completed = True
                completion_timestep = t_now
                break

    evals.append(IntervalEval(engine.dataset_size, world.timestep, model_eval()))

    report = RegimeReport(
        regime=config.regime.value,
        completed=completed,
        completion_timestep=completion_timestep,
        total_timesteps=world.timestep,
        total_demos=engine.dataset_size,
        demos_by_source={k.value: v for k, v in engine.demos_by_source.items()},
        requests=engine.requests_made,
        corrections=engine.demos_by_source[DemoSource.CORRECTIVE],
        training_collisions=training_collisions,
        demo_sources=demo_sources,
        evals=evals,
        final_eval=evals[-1].report,
    )
    return RunResult(report, events, engine, config)


# -- comparison and sweeps ------------------------------------------------------


def oracle_reference(
    config: ExperimentConfig, eval_pattern: Optional[TrafficPattern] = None
) -> EvalReport:
    if eval_pattern is None:
        eval_pattern = default_evaluation_pattern()
    return oracle_self_drive(
        eval_pattern,
        n=config.eval_timesteps,
        world_config=config.world_config(),
        noise_seed=config.eval_noise_seed,
    )


def compare_regimes(
    runs: Sequence[tuple[ExperimentConfig, RegimeReport]],
    oracle_eval: EvalReport,
) -> list[dict]:
    """Side-by-side table over matched-world runs."""
    seeds = {cfg.world_seed for cfg, _ in runs}
    if len(seeds) > 1:
        raise ValueError(f"regimes ran on different worlds: seeds {sorted(seeds)}")
    rows = []
    for cfg, rep in runs:
        final = rep.final_eval
        rows.append(
            {
                "regime": rep.regime,
                "completed": rep.completed,
                "total_demos": rep.total_demos,
                "requests": rep.requests,
                "corrections": rep.corrections,
                "training_collisions": rep.training_collisions,
                "eval_collision_rate": final.collision_rate if final else math.nan,
                "occupancy_tv_vs_teacher": (
                    tv_distance(final.lane_occupancy, oracle_eval.lane_occupancy)
                    if final
                    else math.nan
                ),
            }
        )
    return rows


def comparison_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def sweep_fixed_threshold(
    base: ExperimentConfig,
    grid: Sequence[float],
    eval_pattern: Optional[TrafficPattern] = None,
) -> list[tuple[float, RegimeReport]]:
    """Try each fixed confidence threshold; best first. Converged runs beat
    unconverged ones; ties break on evaluation collisions, then demo count."""
    if base.regime is not EngineMode.CE_SINGLE:
        raise ValueError("threshold sweeps only apply to the single-threshold regime")
    results = []
    for tau in grid:
        cfg = replace(base, fixed_confidence_threshold=tau)
        rep = run_regime(cfg, eval_pattern).report
        results.append((tau, rep))

    def rank(item):
        tau, rep = item
        coll = rep.final_eval.collision_rate if rep.final_eval else math.inf
        return (0 if rep.completed else 1, coll, rep.total_demos, tau)

    return sorted(results, key=rank)


# -- session archive -------------------------------------------------------------

MANIFEST_VERSION = "session/1"


def archive_session(out_dir: str | Path, result: RunResult) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(result.config.to_dict(), indent=2))
    with (out / "events.jsonl").open("w") as fh:
        for e in result.events:
            fh.write(json.dumps(e.to_dict()) + "\n")
    (out / "report.json").write_text(json.dumps(result.report.to_dict(), indent=2))
    if result.engine.model is not None:
        (out / "model.json").write_text(json.dumps(result.engine.model.to_dict()))
    (out / "thresholds.json").write_text(
        json.dumps(result.engine.thresholds.to_dict(), indent=2)
    )
    manifest = {
        "version": MANIFEST_VERSION,
        "files": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_session(out_dir: str | Path) -> tuple[ExperimentConfig, list[EngineEvent], RegimeReport]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported archive version {manifest.get('version')!r}")
    config = ExperimentConfig.from_dict(json.loads((out / "config.json").read_text()))
    events = [
        event_from_dict(json.loads(line))
        for line in (out / "events.jsonl").read_text().splitlines()
        if line.strip()
    ]
    report = RegimeReport.from_dict(json.loads((out / "report.json").read_text()))
    return config, events, report


def replay_session(
    out_dir: str | Path, eval_pattern: Optional[TrafficPattern] = None
) -> tuple[bool, RunResult]:
    """Re-run an archived session from its config and diff the event logs."""
    config, stored_events, _ = load_session(out_dir)
    fresh = run_regime(config, eval_pattern)
    stored = [e.to_dict() for e in stored_events]
    redone = [e.to_dict() for e in fresh.events]
    return stored == redone, fresh
