"""Command-line front end: training runs, regime comparisons, threshold
sweeps, archive replay, traffic calibration, and the interactive service."""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from .engine import EngineMode
from .harness import (
    DEFAULT_CENTER_RATE,
    ExperimentConfig,
    archive_session,
    compare_regimes,
    comparison_csv,
    default_evaluation_pattern,
    oracle_reference,
    replay_session,
    run_regime,
    sweep_fixed_threshold,
)
from .world import TrafficPattern, calibrate_center_rate

REGIME_CHOICES = [m.value for m in EngineMode]


def _load_pattern(path: str | None) -> TrafficPattern:
    if path is None:
        return default_evaluation_pattern()
    return TrafficPattern.load(path)


def _config_from_options(regime: str, opts: dict) -> ExperimentConfig:
    return ExperimentConfig(
        regime=EngineMode(regime),
        world_seed=opts["world_seed"],
        center_rate=opts["center_rate"],
        init_session_size=opts["init_demos"],
        fixed_confidence_threshold=opts["fixed_threshold"],
        completion_window=opts["completion_window"],
        max_demos=opts["max_demos"],
        max_timesteps=opts["max_timesteps"],
    )


def _echo_report(rep, verbose=True):
    click.echo(f"regime:               {rep.regime}")
    click.echo(f"completed:            {rep.completed}"
               + (f" (timestep {rep.completion_timestep})" if rep.completed else ""))
    click.echo(f"total demonstrations: {rep.total_demos}")
    for source, n in sorted(rep.demos_by_source.items()):
        click.echo(f"  {source:<14} {n}")
    click.echo(f"training collisions:  {rep.training_collisions}")
    if rep.final_eval is not None:
        occ = ", ".join(f"{x:.3f}" for x in rep.final_eval.lane_occupancy)
        click.echo(f"final eval collision rate: {rep.final_eval.collision_rate:.4f}")
        click.echo(f"final eval lane occupancy: [{occ}]")


run_options = [
    click.option("--world-seed", default=0, show_default=True),
    click.option("--center-rate", default=DEFAULT_CENTER_RATE, show_default=True,
                 help="traffic arrival rate for the center lane"),
    click.option("--init-demos", default=300, show_default=True),
    click.option("--fixed-threshold", default=0.9, show_default=True,
                 help="confidence bar for the single-threshold regime"),
    click.option("--completion-window", default=2000, show_default=True),
    click.option("--max-demos", default=3000, show_default=True),
    click.option("--max-timesteps", default=500_000, show_default=True),
    click.option("--eval-pattern", "eval_pattern_path", type=click.Path(exists=True),
                 default=None, help="frozen traffic pattern JSON (default: packaged)"),
]


def with_run_options(fn):
    for opt in reversed(run_options):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Confidence-gated learning from demonstration, in a driving world."""


@main.command()
@click.option("--regime", type=click.Choice(REGIME_CHOICES), required=True)
@click.option("--out", type=click.Path(), default=None, help="archive directory")
@click.option("--progress/--no-progress", default=True)
@with_run_options
def run(regime, out, progress, eval_pattern_path, **opts):
    """Train one regime to completion (or its caps) and report."""
    config = _config_from_options(regime, opts)
    pattern = _load_pattern(eval_pattern_path)

    def on_progress(t, demos):
        click.echo(f"  t={t:>7}  demos={demos}", err=True)

    result = run_regime(config, pattern, on_progress if progress else None)
    _echo_report(result.report)
    if out:
        path = archive_session(out, result)
        click.echo(f"archived: {path}")


@main.command()
@click.option("--regimes", default="ce_single,ce_multi,cd_only,cba", show_default=True)
@click.option("--out", type=click.Path(), default=None, help="write the table as CSV")
@with_run_options
def compare(regimes, out, eval_pattern_path, **opts):
    """Run several regimes on one matched world and tabulate them."""
    pattern = _load_pattern(eval_pattern_path)
    names = [r.strip() for r in regimes.split(",") if r.strip()]
    runs = []
    for name in names:
        if name not in REGIME_CHOICES:
            raise click.BadParameter(f"unknown regime {name!r}")
        config = _config_from_options(name, opts)
        click.echo(f"running {name} ...", err=True)
        runs.append((config, run_regime(config, pattern).report))
    oracle_eval = oracle_reference(runs[0][0], pattern)
    rows = compare_regimes(runs, oracle_eval)
    text = comparison_csv(rows)
    click.echo(text.rstrip())
    if out:
        Path(out).write_text(text)
        click.echo(f"wrote {out}", err=True)


@main.command()
@click.option("--grid", default="0.1,0.3,0.5,0.7,0.9", show_default=True)
@with_run_options
def sweep(grid, eval_pattern_path, **opts):
    """Sweep the fixed confidence bar for the single-threshold regime."""
    pattern = _load_pattern(eval_pattern_path)
    config = _config_from_options(EngineMode.CE_SINGLE.value, opts)
    values = [float(v) for v in grid.split(",") if v.strip()]
    results = sweep_fixed_threshold(config, values, pattern)
    click.echo("bar     completed  demos  eval_collisions")
    for tau, rep in results:
        coll = rep.final_eval.collision_rate if rep.final_eval else float("nan")
        click.echo(f"{tau:<7g} {str(rep.completed):<10} {rep.total_demos:<6} {coll:.4f}")
    best = results[0][0]
    click.echo(f"best bar: {best}")


@main.command()
@click.argument("session_dir", type=click.Path(exists=True))
@click.option("--eval-pattern", "eval_pattern_path", type=click.Path(exists=True),
              default=None)
def replay(session_dir, eval_pattern_path):
    """Re-run an archived session from its config and diff the event logs."""
    pattern = _load_pattern(eval_pattern_path)
    ok, fresh = replay_session(session_dir, pattern)
    if ok:
        click.echo("MATCH: replay reproduced the archived event log exactly")
    else:
        click.echo("MISMATCH: replay diverged from the archived event log")
        sys.exit(1)


@main.command("calibrate-traffic")
@click.option("--seed", default=2024, show_default=True)
@click.option("--target", default=0.30, show_default=True)
@click.option("--tolerance", default=0.005, show_default=True)
@click.option("--timesteps", default=12_000, show_default=True,
              help="length of the frozen schedule")
@click.option("--out", type=click.Path(), default="evaluation_pattern.json",
              show_default=True)
def calibrate_traffic(seed, target, tolerance, timesteps, out):
    """Search the center-lane arrival rate for the straight-driver target
    and freeze the pattern that achieved it."""
    rate, pattern, report = calibrate_center_rate(
        seed, target=target, tolerance=tolerance, n_timesteps=timesteps
    )
    pattern.save(out)
    click.echo(f"center rate: {rate!r}")
    click.echo(f"always-forward collision rate: {report.collision_rate:.4f}")
    click.echo(f"frozen pattern: {out} ({len(pattern.schedule)} spawn events)")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True)
@click.option("--regime", type=click.Choice(REGIME_CHOICES),
              default=EngineMode.CBA.value, show_default=True)
@click.option("--world-seed", default=0, show_default=True)
@click.option("--center-rate", default=DEFAULT_CENTER_RATE, show_default=True)
@click.option("--init-demos", default=300, show_default=True,
              help="scripted bootstrap size; 0 starts with an empty dataset")
@click.option("--eval-pattern", "eval_pattern_path", type=click.Path(exists=True),
              default=None)
def serve(host, port, regime, world_seed, center_rate, init_demos, eval_pattern_path):
    """Serve the interactive teaching session over a websocket."""
    import uvicorn

    from .service import build_app

    app = build_app(
        regime=EngineMode(regime),
        world_seed=world_seed,
        center_rate=center_rate,
        init_demos=init_demos,
        eval_pattern=_load_pattern(eval_pattern_path),
    )
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
