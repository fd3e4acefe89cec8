import json

import numpy as np
import pytest

import cli
from run_config import RunConfig, config_from_mapping
from suite import (CHECK_REGISTRY, CheckReport, check_rng, get_check, manufactured_poisson, run_check,
                   run_suite, summary_lines, write_outputs)


def test_check_streams_are_reproducible_and_distinct():
    a = check_rng(5, 'liouville').standard_normal(4)
    b = check_rng(5, 'liouville').standard_normal(4)
    c = check_rng(5, 'wall_law').standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_unknown_check():
    with pytest.raises(ValueError, match='Unknown check'):
        get_check('no_such_check')


def test_sign_condition_passes_for_radial_field():
    report, tables = run_check('sign_condition', RunConfig())
    assert report.status == 'pass'
    assert report.measured['c_e_lower'] == pytest.approx(1.0)
    assert tables == {}


def test_sign_condition_fails_without_field():
    cfg = config_from_mapping({'field': {'name': 'zero'}})
    report, _ = run_check('sign_condition', cfg)
    assert report.status == 'fail'
    assert report.failed
    assert report.message


def test_report_provenance_tags():
    report = CheckReport(name='x', status='pass', seed=1, stream=2, measured={'err': np.float64(0.5)},
                         fitted={'rate': 2.0}, tolerances={'err': 1.0}, wall_time=3.0)
    d = report.to_dict()
    assert d['measured']['err'] == {'value': 0.5, 'provenance': 'measured'}
    assert d['fitted']['rate']['provenance'] == 'measured'
    assert d['tolerances']['err']['provenance'] == 'config'
    assert 'wall_time' not in d


def test_empty_selection_exits_cleanly():
    result = run_suite(config_from_mapping({'checks': []}))
    assert result.reports == []
    assert result.exit_code == 0
    assert summary_lines(result)[0].startswith('check')


@pytest.mark.slow
def test_write_outputs(tmp_path):
    cfg = config_from_mapping({'checks': ['sign_condition', 'collision'],
                               'collision': {'n_polar': 4, 'n_azimuth': 8, 'n_velocity': 4, 'orders': [4, 6]},
                               'sampling': {'collision_points': 3}})
    result = run_suite(cfg)
    assert [r.name for r in result.reports] == ['sign_condition', 'collision']
    out = write_outputs(result, cfg, tmp_path / 'out')
    report = json.loads((out / 'report.json').read_text(encoding='utf-8'))
    assert [c['name'] for c in report['checks']] == ['sign_condition', 'collision']
    assert report['config']['seed'] == 0
    assert report['exit_code'] == result.exit_code
    timings = json.loads((out / 'timings.json').read_text(encoding='utf-8'))
    assert set(timings) == {'sign_condition', 'collision'}
    csv = out / 'collision__moment_refinement.csv'
    assert csv.exists()
    assert b'\r\n' not in csv.read_bytes()


def test_registry_runs_in_registry_order():
    cfg = config_from_mapping({'checks': ['wall_law', 'sign_condition']})
    result = run_suite(cfg, names=['wall_law', 'sign_condition'])
    assert [r.name for r in result.reports] == [n for n in CHECK_REGISTRY if n in ('wall_law', 'sign_condition')]


def test_manufactured_poisson_converges(ball):
    coarse, _ = manufactured_poisson(ball, 6)
    fine, grid = manufactured_poisson(ball, 12)
    assert fine < coarse
    assert grid.total_volume == pytest.approx(4.0 * np.pi / 3.0)


def test_cli_reports_invalid_config(tmp_path, capsys):
    path = tmp_path / 'bad.yaml'
    path.write_text("solver:\n  horizon: 2.0\n", encoding='utf-8')
    assert cli.main(['suite', '--config', str(path), '--quiet']) == 2
    assert 'solver.horizon' in capsys.readouterr().err


def test_cli_missing_config(tmp_path):
    assert cli.main(['suite', '--config', str(tmp_path / 'absent.yaml'), '--quiet']) == 2


def test_cli_empty_suite(tmp_path):
    code = cli.main(['suite', '--checks', '--out', str(tmp_path / 'out'), '--quiet'])
    assert code == 0
    assert (tmp_path / 'out' / 'report.json').exists()


@pytest.mark.slow
def test_kernel_bounds_halving_compares_fitted_contributions():
    cfg = config_from_mapping({'checks': ['kernel_bounds'], 'kernel': {'sweep_points': 6, 'states': 3}})
    report, tables = run_check('kernel_bounds', cfg)
    times = tables['time_integral']
    np.testing.assert_allclose(times['nonlocal_doubled_varpi'], 0.5 * times['nonlocal_term'], rtol=1e-9)
    assert (times['lhs_doubled_varpi'] <= times['lhs'] * (1.0 + 1e-9)).all()
    c_time = report.fitted['time_constant']
    c_doubled = report.fitted['time_constant_doubled_varpi']
    assert report.measured['halving'] == pytest.approx(0.5 * c_doubled / c_time)
    assert report.tolerances['halving_at_most'] == 0.6
