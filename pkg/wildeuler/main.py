# wildeuler/main.py
import json
import sys
from pathlib import Path

import click
from prompt_toolkit import HTML, print_formatted_text

from . import __version__
from .config import load_config
from .errors import ConfigError, FieldDumpError, InvariantError, WildEulerError
from .pipeline import (
    DUMP_DIR, build_problem, first_step_after, load_state, read_report, run,
    run_admissibility, run_iterate, run_subsolution, save_state, validate,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_ERROR = 4


def _load(config_path, seed=None, steps=None, out=None):
    try:
        return load_config(config_path, seed=seed, steps=steps, out=out)
    except ConfigError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_CONFIG)


def _fail(error: Exception):
    if isinstance(error, InvariantError):
        click.echo(f"Invariant failure: {error}", err=True)
        sys.exit(EXIT_INVARIANT)
    click.echo(f"Error: {error}", err=True)
    sys.exit(EXIT_ERROR)


def _show(markup: str):
    # output resolved against the current sys.stdout
    print_formatted_text(HTML(markup), file=sys.stdout)


def _flag(passed: bool) -> str:
    return '<ansigreen>pass</ansigreen>' if passed else '<ansired>FAIL</ansired>'


def print_summary(report: dict):
    _show('<b>wildeuler run summary</b>')
    print(f"Fourier sign: {report['sign']:+d}")
    print(f"lambda: {report['lambda_tilde']:.6e}   chi: {report['chi_tilde']:.6e}")
    if report.get('T_bar') is not None:
        print(f"T_bar: {report['T_bar']:.6e}")
    deficits = report.get('deficits', [])
    if deficits:
        print(f"Deficit: {deficits[0]:.6e} -> {deficits[-1]:.6e} over {len(deficits) - 1} steps")
    if report.get('beta_impl') is not None:
        print(f"beta_impl: {report['beta_impl']:.6e}   F_impl: {report['f_impl']:.6e}")
    _show('<b>Checks:</b>')
    for name in sorted(report.get('checks', {})):
        check = report['checks'][name]
        _show(f"  {name}: {check['value']:.3e} (tol {check['tolerance']:.1e}) "
              f"{_flag(check['passed'])}")


@click.group()
@click.version_option(version=__version__)
def cli():
    """Convex-integration experiments for the semi-stationary isentropic Euler system"""


@cli.command('run')
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True), help='Run configuration (JSON)')
@click.option('--seed', type=int, help='Override iteration.seed')
@click.option('--out', type=click.Path(), help='Override output.directory')
@click.option('--steps', type=int, help='Override iteration.steps')
@click.option('--resume', type=click.Path(exists=True), help='Restart the iteration from an m dump')
def run_command(config_path, seed, out, steps, resume):
    """Subsolution, iteration, admissibility and report in one go"""
    config = _load(config_path, seed, steps, out)
    try:
        report = run(config, Path(resume) if resume else None)
    except WildEulerError as e:
        _fail(e)
    print_summary(report.to_dict())
    sys.exit(EXIT_OK if report.passed else EXIT_CHECK_FAILED)


@cli.command('subsolution')
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True))
@click.option('--seed', type=int)
@click.option('--out', type=click.Path())
def subsolution_command(config_path, seed, out):
    """Build the stationary and flat subsolutions and dump the time-symmetric data as step 0"""
    config = _load(config_path, seed, out=out)
    out_dir = Path(config.output_directory)
    try:
        problem = build_problem(config)
        state, flat = run_subsolution(config, problem)
    except WildEulerError as e:
        _fail(e)
    paths = save_state(state, out_dir / DUMP_DIR, 'step_0000')
    summary = {'stationary': problem.stationary.to_dict(), 'flat': flat.to_dict(), 'deficit': state.deficit}
    with open(out_dir / 'subsolution.json', 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    _show(f"<b>Subsolution</b> written to {paths['m'].parent}")
    print(f"sign {problem.stationary.sign:+d}, lambda {problem.stationary.lambda_tilde:.6e}, "
          f"deficit at t=0 {flat.deficit_at_zero:.6e}")
    sys.exit(EXIT_OK)


@cli.command('iterate')
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True))
@click.option('--resume', required=True, type=click.Path(exists=True), help='m dump to start from')
@click.option('--seed', type=int)
@click.option('--out', type=click.Path())
@click.option('--steps', type=int)
def iterate_command(config_path, resume, seed, out, steps):
    """Apply improvement steps to a dumped state"""
    config = _load(config_path, seed, steps, out)
    out_dir = Path(config.output_directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        state = load_state(resume, config)
        state, gains, _ = run_iterate(config, state, out_dir, first_step_after(resume), append=True)
    except WildEulerError as e:
        _fail(e)
    save_state(state, out_dir / DUMP_DIR, 'final')
    for gain in gains:
        print(f"deficit {gain.deficit_before:.6e} -> {gain.deficit_after:.6e}  k={gain.k_used}  balls={gain.balls}")
    sys.exit(EXIT_OK)


@cli.command('admissibility')
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True))
@click.option('--state', 'state_path', required=True, type=click.Path(exists=True), help='m dump of the state')
@click.option('--out', type=click.Path())
def admissibility_command(config_path, state_path, out):
    """Constants, chi profile, maximal time and energy residual for a dumped state"""
    config = _load(config_path, out=out)
    try:
        problem = build_problem(config)
        summary, energy = run_admissibility(config, problem, load_state(state_path, config))
    except WildEulerError as e:
        _fail(e)
    summary['energy'] = energy.to_dict() if energy is not None else None
    out_dir = Path(config.output_directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / 'admissibility.json', 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(f"T_bar {summary['T_bar']:.6e}")
    if energy is not None:
        _show(f"energy: worst {energy.worst_reduced:.3e}, least full {energy.full_min:.3e} {_flag(energy.passed)}")
    sys.exit(EXIT_OK if energy is None or energy.passed else EXIT_CHECK_FAILED)


@cli.command('validate')
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True))
@click.argument('dumps', nargs=-1, required=True, type=click.Path(exists=True))
def validate_command(config_path, dumps):
    """Recompute residual tables from m dumps (siblings U, chi, rho0 alongside)"""
    config = _load(config_path)
    all_passed = True
    tables = {}
    for path in dumps:
        try:
            table = validate(Path(path), config)
        except FieldDumpError as e:
            click.echo(f"Malformed dump: {e}", err=True)
            sys.exit(EXIT_ERROR)
        except WildEulerError as e:
            _fail(e)
        tables[path] = table
        all_passed &= table['passed']
    click.echo(json.dumps(tables, indent=2, sort_keys=True))
    sys.exit(EXIT_OK if all_passed else EXIT_CHECK_FAILED)


@cli.command('report')
@click.option('--out', required=True, type=click.Path(exists=True), help='Run output directory')
def report_command(out):
    """Print the summary of a finished run"""
    try:
        report = read_report(Path(out))
    except (OSError, json.JSONDecodeError) as e:
        click.echo(f"Cannot read report: {e}", err=True)
        sys.exit(EXIT_ERROR)
    print_summary(report)
    sys.exit(EXIT_OK if report.get('passed') else EXIT_CHECK_FAILED)


if __name__ == '__main__':
    cli()
