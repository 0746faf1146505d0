"""
Test-Driven Development tests for Task 008: Command-Line Pipeline and Reports
"""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from wildeuler.config import config_from_dict
from wildeuler.main import EXIT_CONFIG, EXIT_ERROR, cli
from wildeuler.oscillation import modulus_ratio
from wildeuler.pipeline import (
    DUMP_DIR, REPORT_FILE, STEPS_FILE, TIMINGS_FILE, first_step_after, load_state, run, validate,
)

REDUCED = {
    'grid': {'n': 2, 'N': 32, 'dt': 1.0 / 32, 'T': 0.5},
    'flat': {'iters': 1, 'k_min': 8},
    'iteration': {'steps': 2, 'k_min': 32, 'seed': 20240611},
    'admissibility': {'tests': 8},
    'output': {'dump_steps': [1]},
}


def write_config(tmp_path, data=None, name='config.json'):
    path = tmp_path / name
    path.write_text(json.dumps(REDUCED if data is None else data))
    return path


@pytest.fixture(scope='module')
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp('run')
    config = config_from_dict(REDUCED, out=str(out))
    return out, config, run(config)


class TestPipeline:
    """Test the full run on a reduced grid"""

    def test_artifacts(self, finished_run):
        """Test report, CSV files, dumps and run log"""
        out, _, report = finished_run
        for name in (REPORT_FILE, STEPS_FILE, TIMINGS_FILE, 'config.json', 'logs/run.log'):
            assert (out / name).exists()
        for prefix in ('step_0000', 'step_0001', 'final'):
            assert (out / DUMP_DIR / f'{prefix}_m.wfld').exists()
        rows = (out / STEPS_FILE).read_text().splitlines()
        assert rows[0] == 'step,deficit,gain,k_used,hint_margin_min,weak_drift'
        assert len(rows) == 3
        data = json.loads((out / REPORT_FILE).read_text())
        assert data['passed'] == report.passed
        assert len(data['deficits']) == 3
        assert 'wall_time' not in json.dumps(data)

    def test_deficits_decrease(self, finished_run):
        """Test that every step lowers the deficit"""
        _, _, report = finished_run
        assert all(b < a for a, b in zip(report.deficits[:-1], report.deficits[1:]))
        assert report.checks['deficit_decreasing']['passed']
        assert report.checks['divergence']['passed']

    def test_same_seed_same_steps(self, finished_run, tmp_path):
        """Test byte-identical steps.csv and report for a repeated run"""
        out, _, _ = finished_run
        again = run(config_from_dict(REDUCED, out=str(tmp_path)))
        assert (tmp_path / STEPS_FILE).read_bytes() == (out / STEPS_FILE).read_bytes()
        first = json.loads((out / REPORT_FILE).read_text())
        second = json.loads((tmp_path / REPORT_FILE).read_text())
        assert first['deficits'] == second['deficits']
        assert first['residuals'] == second['residuals']
        assert again.passed == first['passed']

    def test_other_seed_other_state(self, finished_run, tmp_path):
        """Test that a second seed ends at a distinct final state"""
        out, config, _ = finished_run
        data = dict(REDUCED, iteration=dict(REDUCED['iteration'], seed=7))
        other_config = config_from_dict(data, out=str(tmp_path))
        run(other_config)
        a = load_state(out / DUMP_DIR / 'final_m.wfld', config)
        b = load_state(tmp_path / DUMP_DIR / 'final_m.wfld', other_config)
        distance = np.sqrt(np.mean(np.sum((a.m - b.m) ** 2, axis=1)))
        assert distance > 10 * 1e-8

    def test_modulus_ratio_moves_toward_one(self, finished_run):
        """Test that |m|^2 / (rho0 chi) shifts toward 1 as steps accumulate"""
        out, config, _ = finished_run
        first = modulus_ratio(load_state(out / DUMP_DIR / 'step_0000_m.wfld', config))
        last = modulus_ratio(load_state(out / DUMP_DIR / 'final_m.wfld', config))
        assert np.max(last) < 1.0
        assert np.mean(last) > np.mean(first)
        assert np.mean(last >= 0.5) >= np.mean(first >= 0.5)

    def test_validate_reproduces_residuals(self, finished_run):
        """Test that dumps alone replay the final residual table"""
        out, config, report = finished_run
        table = validate(out / DUMP_DIR / 'final_m.wfld', config)
        for name in ('divergence', 'weak_momentum', 'weak_mass', 'hint_margin'):
            assert abs(table[name] - report.residuals[name]) <= 1e-12

    def test_first_step_after(self):
        """Test step numbering from dump names"""
        assert first_step_after('dumps/step_0007_m.wfld') == 8
        assert first_step_after('dumps/final_m.wfld') == 1


class TestCommandLine:
    """Test the click commands and their exit codes"""

    def test_missing_seed(self, tmp_path):
        """Test exit code 2 and the field name when no seed is given"""
        data = dict(REDUCED, iteration={'steps': 1})
        result = CliRunner().invoke(cli, ['run', '--config', str(write_config(tmp_path, data)),
                                          '--out', str(tmp_path / 'out')])
        assert result.exit_code == EXIT_CONFIG
        assert 'iteration.seed: missing' in result.output

    def test_bad_config(self, tmp_path):
        """Test exit code 2 for an invalid grid"""
        data = dict(REDUCED, grid={'n': 4, 'N': 32, 'dt': 1.0 / 32, 'T': 0.5})
        result = CliRunner().invoke(cli, ['validate', '--config', str(write_config(tmp_path, data)),
                                          str(write_config(tmp_path, name='x_m.wfld'))])
        assert result.exit_code == EXIT_CONFIG

    def test_validate_command(self, finished_run, tmp_path):
        """Test the validate command on a good dump"""
        out, _, _ = finished_run
        path = out / DUMP_DIR / 'final_m.wfld'
        result = CliRunner().invoke(cli, ['validate', '--config', str(write_config(tmp_path)), str(path)])
        tables = json.loads(result.output)
        assert tables[str(path)]['divergence'] <= 1e-8
        assert result.exit_code == (0 if tables[str(path)]['passed'] else 1)

    def test_corrupted_dump(self, finished_run, tmp_path):
        """Test that a damaged dump is reported as malformed"""
        out, _, _ = finished_run
        broken = tmp_path / 'dumps'
        broken.mkdir()
        for source in (out / DUMP_DIR).iterdir():
            (broken / source.name).write_bytes(source.read_bytes())
        target = broken / 'final_m.wfld'
        target.write_bytes(target.read_bytes()[:40])
        result = CliRunner().invoke(cli, ['validate', '--config', str(write_config(tmp_path)), str(target)])
        assert result.exit_code == EXIT_ERROR
        assert 'Malformed dump' in result.output

    def test_report_command(self, finished_run):
        """Test that report prints the stored summary"""
        out, _, report = finished_run
        result = CliRunner().invoke(cli, ['report', '--out', str(out)])
        assert result.exit_code == (0 if report.passed else 1)
        assert 'Fourier sign' in result.output

    def test_subsolution_command(self, tmp_path):
        """Test the subsolution command writes step 0"""
        out = tmp_path / 'sub'
        result = CliRunner().invoke(cli, ['subsolution', '--config', str(write_config(tmp_path)),
                                          '--out', str(out)])
        assert result.exit_code == 0
        assert (out / DUMP_DIR / 'step_0000_m.wfld').exists()
        summary = json.loads((out / 'subsolution.json').read_text())
        assert summary['stationary']['sign'] in (1, -1)
