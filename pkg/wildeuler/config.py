# wildeuler/config.py
import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .constants import SEGMENT_SAMPLES, TOL_DIVERGENCE, TOL_ENERGY, TOL_SUBSOLUTION, TOL_WEAK
from .errors import ConfigError
from .utils import read_config_text

# Explicit exports for better module interface
__all__ = [
    'DEFAULT_CONFIG', 'RunConfig', 'DensitySpec', 'IterationSettings',
    'deep_merge', 'validate_config', 'load_config', 'config_from_dict', 'save_config',
]

DEFAULT_CONFIG = {
    'grid': {'n': 2, 'N': 64, 'dt': 1.0 / 64, 'T': 0.5},
    'density': {
        'mean': 2.0,
        'modes': [{'k': [1, 1], 'sin': 0.25}, {'k': [1, -1], 'sin': 0.25}],
    },
    'pressure': {'type': 'polytropic', 'k': 1.0, 'gamma': 2.0},
    'chi': {'margin': 1.5, 'floor': 1.0},
    'flat': {'iters': 3, 'k_min': 8},
    'iteration': {
        'steps': 4,
        'k_min': 8,
        'cover_radius': 0.13,
        'amplitude': 0.7,
        'max_backoff': 6,
        'segment_samples': SEGMENT_SAMPLES,
    },
    'admissibility': {'margin': 1.5, 'tests': 32, 'slack': 1.0, 'method': 'closed_form'},
    'tolerances': {
        'divergence': TOL_DIVERGENCE,
        'subsolution': TOL_SUBSOLUTION,
        'weak': TOL_WEAK,
        'energy': TOL_ENERGY,
    },
    'output': {'directory': 'wildeuler-out', 'dump_steps': []},
}


@dataclass(frozen=True)
class DensitySpec:
    mean: float
    modes: Tuple[Dict, ...]


@dataclass(frozen=True)
class IterationSettings:
    steps: int
    k_min: int
    cover_radius: float
    amplitude: float
    max_backoff: int
    segment_samples: int
    seed: int


@dataclass(frozen=True)
class RunConfig:
    grid: Dict
    density: DensitySpec
    pressure: Dict
    chi_margin: float
    chi_floor: float
    flat_iters: int
    flat_k_min: int
    iteration: IterationSettings
    admissibility: Dict
    tolerances: Dict
    output_directory: Path
    dump_steps: Tuple[int, ...]
    raw: Dict

    def to_dict(self) -> Dict:
        return copy.deepcopy(self.raw)


def deep_merge(base: Dict, override: Dict) -> Dict:
    """Merge override into a copy of base; nested dicts merge key by key"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def validate_config(config: Dict) -> List[str]:
    """All field-level problems as 'section.field: reason'"""
    errors = []

    def require(section: str, name: str, check, reason: str):
        value = config.get(section, {}).get(name)
        if value is None:
            errors.append(f"{section}.{name}: missing")
        elif not check(value):
            errors.append(f"{section}.{name}: {reason}")

    for section in DEFAULT_CONFIG:
        if not isinstance(config.get(section), dict):
            errors.append(f"{section}: must be an object")
    if errors:
        return errors

    require('grid', 'n', lambda v: _is_int(v) and v in (2, 3), "must be 2 or 3")
    require('grid', 'N', lambda v: _is_int(v) and v >= 8 and not v & (v - 1), "must be a power of two >= 8")
    require('grid', 'dt', lambda v: _is_number(v) and v > 0, "must be positive")
    require('grid', 'T', lambda v: _is_number(v) and v > 0, "must be positive")
    grid = config['grid']
    if all(_is_number(grid.get(key)) and grid.get(key) > 0 for key in ('dt', 'T')):
        steps = grid['T'] / grid['dt']
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            errors.append("grid.dt: must divide grid.T")

    require('density', 'mean', lambda v: _is_number(v) and v > 0, "must be positive")
    modes = config['density'].get('modes', [])
    if not isinstance(modes, list):
        errors.append("density.modes: must be a list")
    else:
        for i, mode in enumerate(modes):
            if not isinstance(mode, dict) or not isinstance(mode.get('k'), list):
                errors.append(f"density.modes[{i}]: needs an integer wavevector 'k'")
            elif len(mode['k']) != grid.get('n') or not all(_is_int(k) for k in mode['k']):
                errors.append(f"density.modes[{i}].k: must have {grid.get('n')} integer entries")
            elif any(not _is_number(mode.get(key, 0.0)) for key in ('cos', 'sin')):
                errors.append(f"density.modes[{i}]: cos and sin must be numbers")
        amplitude = sum(abs(m.get('cos', 0.0)) + abs(m.get('sin', 0.0)) for m in modes
                        if isinstance(m, dict) and all(_is_number(m.get(key, 0.0)) for key in ('cos', 'sin')))
        mean = config['density'].get('mean')
        if _is_number(mean) and amplitude >= mean:
            errors.append("density.modes: amplitudes may make the density nonpositive")

    kind = config['pressure'].get('type')
    if kind == 'polytropic':
        require('pressure', 'k', lambda v: _is_number(v) and v > 0, "must be positive")
        require('pressure', 'gamma', lambda v: _is_number(v) and v > 1, "must exceed 1")
    elif kind == 'tabulated':
        rho, p = config['pressure'].get('rho'), config['pressure'].get('p')
        if not isinstance(rho, list) or not isinstance(p, list) or len(rho) != len(p) or len(rho) < 3:
            errors.append("pressure.rho: rho and p must be lists of equal length >= 3")
    else:
        errors.append(f"pressure.type: unknown law '{kind}'")

    require('chi', 'margin', lambda v: _is_number(v) and v > 1, "must exceed 1")
    require('chi', 'floor', lambda v: _is_number(v) and v > 0, "must be positive")
    require('flat', 'iters', lambda v: _is_int(v) and v >= 0, "must be a nonnegative integer")
    require('flat', 'k_min', lambda v: _is_int(v) and v >= 1, "must be a positive integer")

    require('iteration', 'steps', lambda v: _is_int(v) and v >= 0, "must be a nonnegative integer")
    require('iteration', 'k_min', lambda v: _is_int(v) and v >= 1, "must be a positive integer")
    require('iteration', 'cover_radius', lambda v: _is_number(v) and 0 < v < 0.5, "must lie in (0, 0.5)")
    require('iteration', 'amplitude', lambda v: _is_number(v) and 0 < v < 1, "must lie in (0, 1)")
    require('iteration', 'max_backoff', lambda v: _is_int(v) and v >= 0, "must be a nonnegative integer")
    require('iteration', 'segment_samples', lambda v: _is_int(v) and v >= 1, "must be a positive integer")
    require('iteration', 'seed', lambda v: _is_int(v) and 0 <= v < 2 ** 64, "must be an unsigned 64-bit integer")

    require('admissibility', 'margin', lambda v: _is_number(v) and v > 1, "must exceed 1")
    require('admissibility', 'tests', lambda v: _is_int(v) and v >= 1, "must be a positive integer")
    require('admissibility', 'slack', lambda v: _is_number(v) and v >= 1, "must be at least 1")
    require('admissibility', 'method', lambda v: v in ('closed_form', 'rk4'), "must be 'closed_form' or 'rk4'")

    for name, value in config['tolerances'].items():
        if not _is_number(value) or value <= 0:
            errors.append(f"tolerances.{name}: must be positive")
    require('output', 'directory', lambda v: isinstance(v, str) and v, "must be a path")
    dumps = config['output'].get('dump_steps', [])
    if not isinstance(dumps, list) or not all(_is_int(s) and s >= 0 for s in dumps):
        errors.append("output.dump_steps: must be a list of nonnegative integers")
    return errors


def config_from_dict(data: Dict, seed: Optional[int] = None, steps: Optional[int] = None,
                     out: Optional[str] = None) -> RunConfig:
    """Merge over the defaults, apply overrides, validate and freeze"""
    merged = deep_merge(DEFAULT_CONFIG, data)
    if seed is not None:
        merged['iteration']['seed'] = seed
    if steps is not None:
        merged['iteration']['steps'] = steps
    if out is not None:
        merged['output']['directory'] = str(out)

    errors = validate_config(merged)
    if errors:
        raise ConfigError(errors)

    it = merged['iteration']
    return RunConfig(
        grid=dict(merged['grid']),
        density=DensitySpec(float(merged['density']['mean']), tuple(merged['density'].get('modes', []))),
        pressure=dict(merged['pressure']),
        chi_margin=float(merged['chi']['margin']),
        chi_floor=float(merged['chi']['floor']),
        flat_iters=int(merged['flat']['iters']),
        flat_k_min=int(merged['flat']['k_min']),
        iteration=IterationSettings(it['steps'], it['k_min'], float(it['cover_radius']), float(it['amplitude']),
                                    it['max_backoff'], it['segment_samples'], it['seed']),
        admissibility=dict(merged['admissibility']),
        tolerances=dict(merged['tolerances']),
        output_directory=Path(merged['output']['directory']),
        dump_steps=tuple(merged['output'].get('dump_steps', [])),
        raw=merged,
    )


def load_config(path, seed: Optional[int] = None, steps: Optional[int] = None,
                out: Optional[str] = None) -> RunConfig:
    try:
        content, _ = read_config_text(Path(path))
    except ValueError as e:
        raise ConfigError(f"config: {e}")
    try:
        data = json.loads(content)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON ({e})")
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    return config_from_dict(data, seed, steps, out)


def save_config(config: RunConfig, path: Path):
    with open(path, 'w') as f:
        json.dump(config.raw, f, indent=4, sort_keys=True)
