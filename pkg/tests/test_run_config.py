from pathlib import Path

import pytest

from characteristics import IntegratorSettings
from collision import CollisionKernel
from domain_geometry import Ball, Ellipsoid
from errors import SchemaError
from kinematic_weight import KineticWeight
from run_config import (RunConfig, build_domain, build_external_potential, build_field, build_kernel,
                        build_kernel_spec, build_settings, build_solver_config, build_vpb_config,
                        build_weight, config_from_mapping, dump_config, parse_config)
from singular_integrals import SingularKernelSpec
from suite import CHECK_REGISTRY
from transport_solver import SolverConfig
from vpb_coupling import RadialPotential, VPBConfig, ZeroPotential


def test_defaults():
    cfg = parse_config(None)
    assert cfg == RunConfig()
    assert cfg.domain.name == 'ball'
    assert cfg.seed == 0
    assert cfg.selected_checks() == list(CHECK_REGISTRY)
    assert cfg.defaults_dump()['solver']['horizon'] == pytest.approx(0.1)


def test_unknown_key_is_rejected():
    with pytest.raises(SchemaError) as info:
        config_from_mapping({'domian': {'name': 'ball'}})
    assert [key for key, _, _ in info.value.issues] == ['domian']


def test_yaml_issue_carries_line(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text("domain:\n  name: ball\nsolver:\n  theta: 0.5\n", encoding='utf-8')
    with pytest.raises(SchemaError) as info:
        parse_config(path)
    key, line, _ = info.value.issues[0]
    assert key == 'solver.theta'
    assert line == 4
    assert 'line 4' in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / 'absent.yaml')


def test_root_must_be_a_mapping(tmp_path):
    path = tmp_path / 'list.yaml'
    path.write_text("- 1\n- 2\n", encoding='utf-8')
    with pytest.raises(SchemaError):
        parse_config(path)


@pytest.mark.parametrize('data', [
    {'solver': {'theta': 0.3}},
    {'solver': {'horizon': 1.0}},
    {'solver': {'theta': 0.1, 'horizon': 0.15}},
    {'kernel': {'theta': 0.0}},
    {'collision': {'kappa': 1.5}},
    {'seed': -1},
    {'field': {'name': 'gravity'}},
])
def test_invalid_values(data):
    with pytest.raises(SchemaError):
        config_from_mapping(data)


def test_unknown_check_is_rejected():
    with pytest.raises(SchemaError, match='Unknown check'):
        config_from_mapping({'checks': ['liouville', 'no_such_check']})


def test_selected_checks_keep_the_given_order():
    cfg = config_from_mapping({'checks': ['wall_law', 'liouville']})
    assert cfg.selected_checks() == ['wall_law', 'liouville']


def test_factories():
    cfg = config_from_mapping({'domain': {'name': 'ball', 'radius': 2.0}})
    domain = build_domain(cfg.domain)
    assert isinstance(domain, Ball)
    assert domain.radius == pytest.approx(2.0)
    assert isinstance(build_domain(config_from_mapping({'domain': {'name': 'ellipsoid'}}).domain), Ellipsoid)
    assert build_field(cfg.field).name == 'radial'
    assert isinstance(build_settings(cfg.integrator), IntegratorSettings)
    assert isinstance(build_kernel(cfg.collision), CollisionKernel)
    assert isinstance(build_weight(cfg), KineticWeight)
    assert isinstance(build_kernel_spec(cfg.kernel), SingularKernelSpec)
    solver = build_solver_config(cfg.solver, cfg.collision)
    assert isinstance(solver, SolverConfig)
    assert solver.horizon == pytest.approx(cfg.solver.horizon)
    assert isinstance(build_vpb_config(cfg.vpb), VPBConfig)


def test_external_potential_follows_the_field():
    assert isinstance(build_external_potential(RunConfig()), RadialPotential)
    zero = config_from_mapping({'field': {'name': 'zero'}})
    assert isinstance(build_external_potential(zero), ZeroPotential)


def test_dump_and_reload(tmp_path):
    cfg = config_from_mapping({'seed': 11, 'cycles': {'trials': 50}, 'checks': ['collision']})
    path = tmp_path / 'dumped.yaml'
    dump_config(cfg, path)
    assert parse_config(path) == cfg


def test_shipped_config_parses():
    cfg = parse_config(Path(__file__).resolve().parent.parent / 'configs' / 'ball_radial.yaml')
    assert cfg.seed == 7
    assert cfg.selected_checks() == list(CHECK_REGISTRY)
