"""
Run orchestration: subsolution, iteration, admissibility and validation
phases, plus the on-disk artifacts they exchange
"""

import csv
import json
import logging
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy

from . import __version__
from .admissibility import (
    EnergyReport, PressureLaw, chi_solve, compute_constants, energy_residual,
    enforce_modulus, maximal_time, nonnegative_tests, pressure_law_from_config,
)
from .audit import RunLogger
from .config import RunConfig, save_config
from .constants import (
    STANDARD_TEST_SEED, STEPS_CSV_COLUMNS, STEPS_CSV_VERSION, TIMINGS_CSV_COLUMNS,
)
from .errors import FieldDumpError, InvariantError
from .field_dumps import read_dump, write_dump
from .oscillation import GainReport, ImprovementSettings, fit_beta, iterate, modulus_ratio
from .subsolution import (
    FlatSubsolution, StationarySubsolution, StateResiduals, SubsolutionState,
    approximate_flat_subsolution, build_stationary_subsolution, check_state,
    density_field, pressure_field, state_residuals, time_symmetric_data,
)
from .torus_fields import GridSpec, ScalarGridField
from .utils import format_float

logger = logging.getLogger('wildeuler.pipeline')

REPORT_FILE = 'report.json'
STEPS_FILE = 'steps.csv'
TIMINGS_FILE = 'timings.csv'
DUMP_DIR = 'dumps'
_STEP_PATTERN = re.compile(r'step_(\d+)_m\.wfld$')


@dataclass
class Problem:
    grid: GridSpec
    rho0: ScalarGridField
    law: PressureLaw
    stationary: StationarySubsolution


@dataclass
class RunReport:
    sign: int
    lambda_tilde: float
    chi_tilde: float
    T_bar: Optional[float] = None
    constants: Dict = field(default_factory=dict)
    chi_profile: Dict = field(default_factory=dict)
    f_impl: Optional[float] = None
    beta_impl: Optional[float] = None
    flat: Dict = field(default_factory=dict)
    deficits: List[float] = field(default_factory=list)
    steps: List[Dict] = field(default_factory=list)
    residuals: Dict = field(default_factory=dict)
    energy: Dict = field(default_factory=dict)
    checks: Dict = field(default_factory=dict)
    versions: Dict = field(default_factory=dict)

    def record_check(self, name: str, value: float, tolerance: float, passed: bool):
        self.checks[name] = {'value': value, 'tolerance': tolerance, 'passed': bool(passed)}

    @property
    def passed(self) -> bool:
        return all(check['passed'] for check in self.checks.values())

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['passed'] = self.passed
        data['steps_csv_version'] = STEPS_CSV_VERSION
        return data


def build_problem(config: RunConfig) -> Problem:
    grid = GridSpec(**config.grid)
    rho0 = density_field(grid, config.density.mean, config.density.modes)
    law = pressure_law_from_config(config.pressure)
    stationary = build_stationary_subsolution(rho0, law, config.chi_margin, config.chi_floor, 2.0 * grid.T)
    return Problem(grid, rho0, law, stationary)


def improvement_settings(config: RunConfig) -> ImprovementSettings:
    it = config.iteration
    return ImprovementSettings(it.cover_radius, it.amplitude, it.max_backoff, it.segment_samples)


# Dumps

def dump_paths(directory: Path, prefix: str) -> Dict[str, Path]:
    directory = Path(directory)
    return {
        'm': directory / f'{prefix}_m.wfld',
        'U': directory / f'{prefix}_U.wfld',
        'chi': directory / f'{prefix}_chi.wfld',
        'rho0': directory / 'rho0.wfld',
    }


def save_state(state: SubsolutionState, directory: Path, prefix: str) -> Dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = dump_paths(directory, prefix)
    n = state.grid.n
    write_dump(paths['m'], state.times, state.m, n)
    write_dump(paths['U'], state.times, state.U, n)
    chi = np.broadcast_to(state.chi.reshape((-1, 1) + (1,) * n), (state.times.size, 1) + state.grid.shape)
    write_dump(paths['chi'], state.times, chi, n)
    write_dump(paths['rho0'], np.zeros(1), state.rho0.values[None, None], n)
    return paths


def sibling_paths(m_path: Path) -> Dict[str, Path]:
    """U, chi and rho0 dumps stored next to an m dump"""
    m_path = Path(m_path)
    if not m_path.name.endswith('_m.wfld'):
        raise FieldDumpError(f"{m_path}: momentum dumps are named <prefix>_m.wfld")
    return dump_paths(m_path.parent, m_path.name[:-len('_m.wfld')])


def load_state(m_path: Path, config: RunConfig) -> SubsolutionState:
    """Rebuild a state from raw dumps alone; the pressure is re-evaluated from the law"""
    grid = GridSpec(**config.grid)
    paths = sibling_paths(m_path)
    dumps = {name: read_dump(path) for name, path in paths.items()}
    for name, dump in dumps.items():
        if dump.n != grid.n or dump.N != grid.N:
            raise FieldDumpError(f"{paths[name]}: dump grid n={dump.n}, N={dump.N} does not match the config")
    m, U, chi, rho = dumps['m'], dumps['U'], dumps['chi'], dumps['rho0']
    p = grid.n * (grid.n + 1) // 2
    if m.components != grid.n or U.components != p or chi.components != 1 or rho.components != 1:
        raise FieldDumpError("Dump component counts do not match the state layout")
    if not (np.array_equal(m.times, U.times) and np.array_equal(m.times, chi.times)):
        raise FieldDumpError("Dump time tables disagree")
    rho0 = ScalarGridField(grid, rho.values[0, 0])
    law = pressure_law_from_config(config.pressure)
    chi_samples = chi.values[(slice(None), 0) + (0,) * grid.n].copy()
    return SubsolutionState(grid, m.times, m.values, U.values, rho0, pressure_field(rho0, law), chi_samples)


def first_step_after(m_path: Path) -> int:
    match = _STEP_PATTERN.search(Path(m_path).name)
    return int(match.group(1)) + 1 if match else 1


# CSV

class StepWriter:
    """steps.csv holds deterministic columns only; wall times go to timings.csv"""

    def __init__(self, out_dir: Path, append: bool = False):
        self.steps_path = Path(out_dir) / STEPS_FILE
        self.timings_path = Path(out_dir) / TIMINGS_FILE
        fresh = not append or not self.steps_path.exists()
        mode = 'w' if fresh else 'a'
        self._steps = open(self.steps_path, mode, newline='')
        self._timings = open(self.timings_path, mode, newline='')
        self.steps = csv.writer(self._steps, lineterminator='\n')
        self.timings = csv.writer(self._timings, lineterminator='\n')
        if fresh:
            self.steps.writerow(STEPS_CSV_COLUMNS)
            self.timings.writerow(TIMINGS_CSV_COLUMNS)

    def write(self, step: int, report: GainReport, wall_time: float):
        self.steps.writerow([step, format_float(report.deficit_after), format_float(report.l2_gain),
                             report.k_used, format_float(report.hint_margin_min),
                             format_float(report.weak_drift)])
        self.timings.writerow([step, f"{wall_time:.6f}"])
        self._steps.flush()
        self._timings.flush()

    def close(self):
        self._steps.close()
        self._timings.close()


# Phases

def run_subsolution(config: RunConfig, problem: Problem) -> Tuple[SubsolutionState, FlatSubsolution]:
    """Flat subsolution on [-T, T] reflected onto [0, 2T]"""
    flat = approximate_flat_subsolution(problem.stationary, config.flat_iters, config.iteration.seed,
                                        config.flat_k_min, improvement_settings(config))
    state = time_symmetric_data(flat.state, problem.grid.T)
    check_state(state, 'time-symmetric data')
    return state, flat


def run_iterate(config: RunConfig, state: SubsolutionState, out_dir: Path, first_step: int = 1,
                append: bool = False) -> Tuple[SubsolutionState, List[GainReport], List[StateResiduals]]:
    writer = StepWriter(out_dir, append)
    residual_log: List[StateResiduals] = []
    dump_steps = set(config.dump_steps)
    clock = [time.perf_counter()]

    def on_step(step: int, current: SubsolutionState, report: GainReport):
        residuals = check_state(current, f"step {step}")
        residual_log.append(residuals)
        now = time.perf_counter()
        writer.write(step, report, now - clock[0])
        clock[0] = now
        if step in dump_steps:
            save_state(current, Path(out_dir) / DUMP_DIR, f'step_{step:04d}')

    try:
        state, reports = iterate(state, config.iteration.steps, config.iteration.seed, config.iteration.k_min,
                                 improvement_settings(config), check=False, on_step=on_step,
                                 first_step=first_step)
    finally:
        writer.close()
    return state, reports, residual_log


def run_admissibility(config: RunConfig, problem: Problem, state: SubsolutionState) -> Tuple[Dict, Optional[EnergyReport]]:
    grid = problem.grid
    stat = problem.stationary
    constants = compute_constants(problem.rho0, problem.law)
    threshold = grid.n * stat.lambda_tilde
    settings = config.admissibility
    chi0 = settings['margin'] * max(threshold, config.chi_floor)
    horizon = float(state.times[-1])
    profile = chi_solve(chi0, constants, horizon, settings['method'], settings['slack'])
    T_bar = maximal_time(profile, threshold, horizon=horizon)
    summary = {'constants': constants.to_dict(), 'chi_profile': profile.to_dict(), 'T_bar': T_bar,
               'threshold': threshold}

    last = int(np.searchsorted(state.times, T_bar, side='right')) - 1
    if last < 16:
        logger.warning(f"Admissibility window [0, {T_bar:.3e}] holds too few time samples for the energy check")
        return summary, None
    window = state.restrict(0, last)
    enforced = enforce_modulus(window, profile)
    tests = nonnegative_tests(grid, float(window.times[0]), float(window.times[-1]), settings['tests'],
                              STANDARD_TEST_SEED + 2)
    energy = energy_residual(enforced, profile, tests, problem.law, constants, config.tolerances['energy'])
    return summary, energy


def residual_table(residuals: StateResiduals) -> Dict:
    return residuals.to_dict()


def validate(m_path: Path, config: RunConfig) -> Dict:
    """Recompute the invariant suite from dumps alone"""
    state = load_state(m_path, config)
    table = residual_table(state_residuals(state))
    logger.info(f"Validated {m_path}: {table}")
    return table


def write_report(report: RunReport, out_dir: Path) -> Path:
    path = Path(out_dir) / REPORT_FILE
    with open(path, 'w') as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True, default=float)
    return path


def read_report(out_dir: Path) -> Dict:
    with open(Path(out_dir) / REPORT_FILE, 'r') as f:
        return json.load(f)


def _versions() -> Dict:
    return {'wildeuler': __version__, 'numpy': np.__version__, 'scipy': scipy.__version__}


def run(config: RunConfig, resume: Optional[Path] = None) -> RunReport:
    """Full pipeline; deterministic in (config, seed) apart from timings.csv"""
    out_dir = Path(config.output_directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_log = RunLogger(out_dir)
    try:
        save_config(config, out_dir / 'config.json')
        run_log.log_event('start', {'seed': config.iteration.seed, 'steps': config.iteration.steps})
        problem = build_problem(config)
        stat = problem.stationary
        report = RunReport(stat.sign, stat.lambda_tilde, stat.chi_profile.chi0, versions=_versions())
        report.record_check('stationary_residual', stat.residual, config.tolerances['subsolution'],
                            stat.residual <= config.tolerances['subsolution'])
        run_log.log_event('subsolution', stat.to_dict())

        if resume is not None:
            state = load_state(resume, config)
            first_step = first_step_after(resume)
            run_log.log_event('resume', {'dump': str(resume), 'first_step': first_step})
        else:
            state, flat = run_subsolution(config, problem)
            report.flat = flat.to_dict()
            first_step = 1
            save_state(state, out_dir / DUMP_DIR, 'step_0000')
        report.deficits.append(state.deficit)

        try:
            state, gains, residual_log = run_iterate(config, state, out_dir, first_step, append=resume is not None)
        except InvariantError as e:
            run_log.log_event('invariant_failure', {'invariant': e.invariant, 'value': e.value})
            raise
        report.deficits.extend(g.deficit_after for g in gains)
        report.steps = [g.to_dict() for g in gains]
        if gains:
            report.f_impl = min(g.f_impl for g in gains)
            report.beta_impl = fit_beta(report.deficits)
            report.record_check('deficit_decreasing', min(g.l2_gain for g in gains), 0.0,
                                all(g.l2_gain > 0 for g in gains))
        run_log.log_event('iterate', {'steps': len(gains), 'deficit': state.deficit})
        save_state(state, out_dir / DUMP_DIR, 'final')

        final = state_residuals(state)
        report.residuals = residual_table(final)
        tol = config.tolerances
        report.record_check('divergence', final.divergence, tol['divergence'], final.divergence <= tol['divergence'])
        report.record_check('weak_momentum', final.weak_momentum, tol['weak'], final.weak_momentum <= tol['weak'])
        report.record_check('weak_mass', final.weak_mass, tol['weak'], final.weak_mass <= tol['weak'])
        report.record_check('hyperinterior', final.hint_margin, 0.0, final.hint_margin > 0.0)
        ratio = modulus_ratio(state)
        report.residuals['modulus_ratio_mean'] = float(np.mean(ratio))
        report.residuals['modulus_ratio_max'] = float(np.max(ratio))

        summary, energy = run_admissibility(config, problem, state)
        report.T_bar = summary['T_bar']
        report.constants = summary['constants']
        report.chi_profile = summary['chi_profile']
        report.record_check('T_bar_positive', report.T_bar, 0.0, report.T_bar > 0.0)
        if energy is not None:
            report.energy = energy.to_dict()
            report.record_check('energy', energy.worst_reduced, energy.tolerance,
                                energy.worst_reduced <= energy.tolerance and energy.bound_violation <= energy.tolerance)
            report.record_check('energy_full', -energy.full_min, energy.tolerance, energy.full_min >= -energy.tolerance)
        run_log.log_event('admissibility', {'T_bar': report.T_bar, 'energy': report.energy.get('passed')})

        write_report(report, out_dir)
        run_log.log_event('done', {'passed': report.passed})
        return report
    finally:
        run_log.close()
