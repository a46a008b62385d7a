from collections import deque

import numpy as np
import pytest

from cba.autonomy_gate import SplitConfig, ThresholdSet
from cba.domain import Action, DemoSource, StateVector
from cba.engine import (
    AutonomousExecuted,
    CbaEngine,
    CorrectionReceived,
    DemonstrationReceived,
    DemonstrationRequested,
    EngineConfig,
    EngineMode,
    ResumedByEnvironment,
    Retrained,
    TeacherInputRejected,
    event_from_dict,
)
from cba.policy_model import ModelConfig

from conftest import gaussian_class_points, raw_from_normalized

A_MEAN = (0.25, 0.8, 0.8, 0.8)
B_MEAN = (0.75, 0.8, 0.1, 0.8)
FAR = (0.0, 0.3, 0.55, 0.35)


class ScriptedTeacher:
    """Deterministic channel: queues are consumed one item per poll."""

    def __init__(self, demos=(), corrections=()):
        self.demos = deque(demos)
        self.corrections = deque(corrections)
        self.requests = 0
        self.autonomous = []
        self.demo_polls = 0
        self.correction_polls = 0

    def notify_request(self):
        self.requests += 1

    def notify_autonomous(self, action, state):
        self.autonomous.append((action, state))

    def poll_demonstration(self):
        self.demo_polls += 1
        return self.demos.popleft() if self.demos else None

    def poll_correction(self):
        self.correction_polls += 1
        return self.corrections.popleft() if self.corrections else None


def config(mode, **kw):
    kw.setdefault("model", ModelConfig(seed=7))
    kw.setdefault("split", SplitConfig(seed=3))
    return EngineConfig(mode=mode, **kw)


def blob_demos(rng, mean, action, n=30, sigma=0.02):
    pts = gaussian_class_points(rng, mean, sigma, n, action)
    return [(p.state, p.action) for p in pts]


def two_class_engine(mode, teacher, rng):
    engine = CbaEngine(config(mode), teacher)
    demos = blob_demos(rng, A_MEAN, Action.FORWARD) + blob_demos(rng, B_MEAN, Action.LEFT)
    engine.bootstrap(demos)
    return engine


def kinds(events):
    return [e.kind for e in events]


def test_fresh_engine_requests_without_model():
    teacher = ScriptedTeacher()
    engine = CbaEngine(config(EngineMode.CBA), teacher)
    result = engine.step(raw_from_normalized(A_MEAN), 0)
    assert result.directive is None
    assert kinds(result.events) == ["demonstration_requested"]
    assert result.events[0].reason == "no_model"
    assert engine.pending_request
    assert teacher.requests == 1
    # holding: no second notification while the request stands
    engine.step(raw_from_normalized(A_MEAN), 1)
    assert teacher.requests == 1


def test_bootstrap_single_retrain(rng):
    teacher = ScriptedTeacher()
    engine = CbaEngine(config(EngineMode.CBA), teacher)
    demos = blob_demos(rng, A_MEAN, Action.FORWARD, n=12)
    events = engine.bootstrap(demos)
    assert kinds(events) == ["demonstration_received"] * 12 + ["retrained"]
    assert engine.retrain_count == 1
    assert engine.model is not None
    assert engine.demos_by_source[DemoSource.INIT_SESSION] == 12
    assert events[-1].dataset_size == 12


def test_in_distribution_executes_out_of_distribution_requests(rng):
    teacher = ScriptedTeacher()
    engine = two_class_engine(EngineMode.CBA, teacher, rng)

    at_a = raw_from_normalized(A_MEAN)
    res = engine.step(at_a, 0)
    assert res.directive is Action.FORWARD
    assert kinds(res.events) == ["autonomous_executed"]
    assert teacher.autonomous == [(Action.FORWARD, at_a)]

    far = raw_from_normalized(FAR)
    res = engine.step(far, 1)
    assert res.directive is None
    assert kinds(res.events) == ["demonstration_requested"]
    assert engine.pending_request


def test_demonstration_binds_to_presented_state(rng):
    teacher = ScriptedTeacher(demos=[Action.LEFT])
    engine = two_class_engine(EngineMode.CBA, teacher, rng)
    far = raw_from_normalized(FAR)

    res = engine.step(far, 0)
    assert res.directive is Action.LEFT
    assert kinds(res.events) == ["demonstration_requested", "demonstration_received"]
    assert not engine.pending_request
    point = engine.dataset[-1]
    assert point.state == far
    assert point.action is Action.LEFT
    assert point.source is DemoSource.CE_REQUEST

    # a demonstrated turn still occupies five ticks
    polls = teacher.demo_polls
    for t in (1, 2, 3, 4):
        res = engine.step(far, t)
        assert res.directive is None and res.events == ()
    assert teacher.demo_polls == polls


def test_retrain_cadence_every_tenth_demo():
    teacher = ScriptedTeacher(demos=[Action.FORWARD] * 25)
    engine = CbaEngine(
        config(EngineMode.CE_SINGLE, fixed_confidence_threshold=1.1), teacher
    )
    sizes = []
    for t in range(25):
        state = raw_from_normalized((0.5, 0.5 + 0.01 * t, 0.6, 0.4))
        res = engine.step(state, t)
        assert res.directive is Action.FORWARD
        sizes.extend(e.dataset_size for e in res.events if isinstance(e, Retrained))
    assert sizes == [10, 20]
    assert engine.retrain_count == 2


def test_correction_binds_to_anchor_and_retrains(rng):
    teacher = ScriptedTeacher(corrections=[None, Action.RIGHT])
    engine = two_class_engine(EngineMode.CBA, teacher, rng)
    states = [
        raw_from_normalized((A_MEAN[0], A_MEAN[1] - 0.002 * t, A_MEAN[2], A_MEAN[3]))
        for t in range(3)
    ]

    assert engine.step(states[0], 0).directive is Action.FORWARD
    assert engine.step(states[1], 1).directive is Action.FORWARD

    retrains_before = engine.retrain_count
    res = engine.step(states[2], 2)
    correction = res.events[0]
    assert isinstance(correction, CorrectionReceived)
    assert correction.anchor_state == states[1]
    assert correction.original_action is Action.FORWARD
    assert correction.corrected_action is Action.RIGHT
    assert engine.retrain_count == retrains_before + 1
    point = engine.dataset[-1]
    assert point.state == states[1]
    assert point.source is DemoSource.CORRECTIVE
    # the tick then proceeds to its own fresh decision
    assert isinstance(res.events[-1], (AutonomousExecuted, DemonstrationRequested))


def test_correction_lands_while_holding_for_demonstration(rng):
    teacher = ScriptedTeacher(corrections=[None, Action.LEFT])
    engine = two_class_engine(EngineMode.CBA, teacher, rng)
    s0 = raw_from_normalized(A_MEAN)
    far = raw_from_normalized(FAR)

    assert engine.step(s0, 0).directive is Action.FORWARD
    res = engine.step(far, 1)
    assert res.directive is None and engine.pending_request

    res = engine.step(far, 2)
    correction = next(e for e in res.events if isinstance(e, CorrectionReceived))
    assert correction.anchor_state == s0
    assert engine.pending_request  # still out of distribution; keep holding
    assert engine.dataset[-1].state == s0


def test_correction_window_expires(rng):
    teacher = ScriptedTeacher(corrections=[None, None, None, None, Action.RIGHT])
    engine = two_class_engine(EngineMode.CBA, teacher, rng)
    far = raw_from_normalized(FAR)

    assert engine.step(raw_from_normalized(A_MEAN), 0).directive is Action.FORWARD
    # forward completes at t=1; grace 3 keeps the window open through t=4
    for t in (1, 2, 3, 4, 5, 6):
        engine.step(far, t)
    assert teacher.correction_polls == 4
    assert engine.demos_by_source[DemoSource.CORRECTIVE] == 0
    assert teacher.corrections  # the late answer was never consumed


def test_cd_only_never_requests(rng):
    teacher = ScriptedTeacher()
    engine = CbaEngine(config(EngineMode.CD_ONLY), teacher)
    engine.bootstrap(blob_demos(rng, A_MEAN, Action.FORWARD))
    assert engine.thresholds.all_pass
    for t, mean in enumerate((A_MEAN, B_MEAN, FAR)):
        res = engine.step(raw_from_normalized(mean), t)
        assert res.directive is Action.FORWARD
    assert engine.requests_made == 0
    assert teacher.requests == 0


def test_ce_modes_never_poll_corrections(rng):
    teacher = ScriptedTeacher(corrections=[Action.RIGHT])
    engine = two_class_engine(EngineMode.CE_MULTI, teacher, rng)
    at_a = raw_from_normalized(A_MEAN)
    for t in range(4):
        engine.step(at_a, t)
    assert teacher.correction_polls == 0
    assert engine.demos_by_source[DemoSource.CORRECTIVE] == 0


def test_invalid_demonstration_rejected_then_retried(rng):
    teacher = ScriptedTeacher(demos=["left", Action.LEFT])
    engine = two_class_engine(EngineMode.CBA, teacher, rng)
    far = raw_from_normalized(FAR)

    res = engine.step(far, 0)
    assert res.directive is None
    rejected = [e for e in res.events if isinstance(e, TeacherInputRejected)]
    assert len(rejected) == 1 and rejected[0].context == "demonstration"
    assert engine.pending_request
    assert engine.dataset_size == 60

    res = engine.step(far, 1)
    assert res.directive is Action.LEFT
    assert engine.dataset[-1].action is Action.LEFT


def test_invalid_correction_rejected_window_intact(rng):
    teacher = ScriptedTeacher(corrections=[7, Action.RIGHT])
    engine = two_class_engine(EngineMode.CBA, teacher, rng)
    s0 = raw_from_normalized(A_MEAN)
    far = raw_from_normalized(FAR)

    engine.step(s0, 0)
    res = engine.step(far, 1)
    rejected = [e for e in res.events if isinstance(e, TeacherInputRejected)]
    assert len(rejected) == 1 and rejected[0].context == "correction"

    res = engine.step(far, 2)
    correction = next(e for e in res.events if isinstance(e, CorrectionReceived))
    assert correction.anchor_state == s0


def test_resumes_when_gate_opens_while_holding(rng):
    teacher = ScriptedTeacher()
    engine = two_class_engine(EngineMode.CBA, teacher, rng)
    far = raw_from_normalized(FAR)

    res = engine.step(far, 0)
    assert res.directive is None and engine.pending_request
    # emulate a retrain landing while holding: the gate now passes everywhere
    engine.thresholds = ThresholdSet.all_passing()
    res = engine.step(far, 1)
    assert res.directive is not None
    assert kinds(res.events) == ["resumed_by_environment", "autonomous_executed"]
    assert not engine.pending_request


def test_autonomous_turn_duration(rng):
    teacher = ScriptedTeacher()
    engine = two_class_engine(EngineMode.CBA, teacher, rng)
    at_b = raw_from_normalized(B_MEAN)

    res = engine.step(at_b, 0)
    assert res.directive is Action.LEFT
    for t in (1, 2, 3, 4):
        res = engine.step(at_b, t)
        assert res.directive is None
    assert len(teacher.autonomous) == 1
    engine.step(at_b, 5)
    assert len(teacher.autonomous) == 2


def test_replay_determinism(rng):
    def run():
        teacher = ScriptedTeacher(
            demos=[Action.LEFT, Action.FORWARD], corrections=[None, Action.RIGHT]
        )
        r = np.random.default_rng(99)
        engine = two_class_engine(EngineMode.CBA, teacher, r)
        log = []
        states = [A_MEAN, A_MEAN, FAR, FAR, B_MEAN, A_MEAN, FAR, B_MEAN]
        t = 0
        for mean in states:
            res = engine.step(raw_from_normalized(mean), t)
            log.extend(e.to_dict() for e in res.events)
            t += 1
        return log, engine

    log1, e1 = run()
    log2, e2 = run()
    assert log1 == log2
    assert e1.model.params_equal(e2.model)
    assert e1.thresholds.to_dict() == e2.thresholds.to_dict()


def test_event_serialization_round_trip():
    s = raw_from_normalized(A_MEAN)
    events = [
        DemonstrationRequested(3, s, "distance"),
        DemonstrationReceived(4, s, Action.LEFT, DemoSource.CE_REQUEST),
        AutonomousExecuted(5, s, Action.FORWARD, 0.97, 2, 0.01),
        CorrectionReceived(6, s, Action.FORWARD, Action.RIGHT),
        Retrained(7, 42, 5, ThresholdSet.all_passing()),
        ResumedByEnvironment(8, s),
        TeacherInputRejected(9, "'x'", "demonstration"),
    ]
    for event in events:
        assert event_from_dict(event.to_dict()) == event


def test_engine_config_round_trip():
    cfg = config(EngineMode.CE_MULTI, distance_multiplier=2.5, retrain_cadence=7)
    assert EngineConfig.from_dict(cfg.to_dict()) == cfg


def test_bad_event_kind_rejected():
    with pytest.raises(ValueError):
        event_from_dict({"kind": "nope"})
