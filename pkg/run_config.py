"""
Run Configuration Module

Schema, loader and factories for run configurations. A configuration is a
single YAML tree; unknown keys are rejected and every default is recorded in
the emitted report.

Example:
    domain: {name: ball, radius: 1.0}
    field: {name: radial, strength: 1.0}
    seed: 7
    checks: [liouville, wall_law]
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from ruamel.yaml import YAML
from ruamel.yaml.comments import CommentedMap, CommentedSeq

from characteristics import IntegratorSettings
from collision import CollisionKernel
from domain_geometry import DOMAIN_REGISTRY, LevelSetDomain, get_domain
from errors import SchemaError
from external_field import FIELD_REGISTRY, FieldSpec, get_field
from kinematic_weight import KineticWeight
from singular_integrals import SingularKernelSpec
from transport_solver import PICARD_MODES, SolverConfig
from vpb_coupling import ExternalPotential, RadialPotential, VPBConfig, ZeroPotential

logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class DomainSection(_Section):
    name: str = 'ball'
    radius: float = Field(1.0, gt=0.0)
    semi_axes: Triple = (2.0, 1.0, 1.0)
    center: Triple = (0.0, 0.0, 0.0)

    @field_validator('name')
    @classmethod
    def _known(cls, v):
        if v not in DOMAIN_REGISTRY:
            raise ValueError(f"Unknown domain: {v}. Available: {list(DOMAIN_REGISTRY.keys())}")
        return v


class FieldSection(_Section):
    name: str = 'radial'
    strength: float = 1.0
    center: Triple = (0.0, 0.0, 0.0)
    vector: Triple = (0.0, 0.0, -1.0)
    rate: float = 1.0

    @field_validator('name')
    @classmethod
    def _known(cls, v):
        if v not in FIELD_REGISTRY:
            raise ValueError(f"Unknown field: {v}. Available: {list(FIELD_REGISTRY.keys())}")
        return v


class IntegratorSection(_Section):
    step: float = Field(1e-2, gt=0.0)
    max_displacement: float = Field(0.02, gt=0.0)
    grazing_rtol: float = Field(1e-6, gt=0.0)
    horizon_scale: float = Field(10.0, gt=0.0)
    fd_rel: float = Field(1e-5, gt=0.0)
    touch_tol: float = Field(1e-8, gt=0.0)


class CollisionSection(_Section):
    kappa: float = 1.0
    n_polar: int = Field(16, ge=1)
    n_azimuth: int = Field(32, ge=1)
    n_velocity: int = Field(12, ge=1)
    v_max: float = Field(8.0, gt=0.0)
    orders: List[int] = [6, 8, 10]

    @field_validator('kappa')
    @classmethod
    def _kappa_window(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {v}")
        return v


class WeightSection(_Section):
    delta: Optional[float] = Field(None, gt=0.0)
    delta_prime: Optional[float] = Field(None, gt=0.0)
    trajectories: int = Field(200, ge=1)
    duration: float = Field(0.5, gt=0.0)
    control_factor: float = Field(10.0, gt=1.0)


class CyclesSection(_Section):
    trials: int = Field(2000, ge=1)
    l_max: int = Field(8, ge=1)
    delta: float = Field(0.05, gt=0.0)
    tail_samples: int = Field(2000, ge=1)
    chord_pairs: int = Field(10_000, ge=2)
    horizon: float = Field(1.0, gt=0.0)
    varpi: float = Field(1.0, gt=0.0)


class KernelSection(_Section):
    theta: float = 0.2
    kappa: float = 1.0
    beta: float = 1.5
    varpi: float = Field(10.0, gt=0.0)
    p: float = Field(2.0, gt=1.0)
    sweep_points: int = Field(50, ge=1)
    states: int = Field(20, ge=1)

    @field_validator('theta')
    @classmethod
    def _theta_window(cls, v):
        if not 0.0 < v < 0.25:
            raise ValueError(f"theta must lie in (0, 1/4), got {v}")
        return v


class SolverSection(_Section):
    horizon: float = 0.1
    time_steps: int = Field(2, ge=1)
    v_max: float = Field(8.0, gt=0.0)
    theta: float = 0.2
    varpi: float = Field(10.0, gt=0.0)
    p: float = Field(2.0, ge=1.0)
    l_max: int = Field(8, ge=1)
    n_samples: int = Field(256, ge=1)
    cycle_tol: float = Field(1e-2, gt=0.0)
    n_spatial: int = Field(5, ge=2)
    n_velocity: int = Field(4, ge=1)
    picard_mode: str = 'stochastic'
    picard_samples: int = Field(16, ge=1)
    budget_trials: int = Field(200, ge=1)
    m_max: int = Field(6, ge=1)
    eps: float = 0.1

    @field_validator('theta')
    @classmethod
    def _theta_window(cls, v):
        if not 0.0 < v < 0.25:
            raise ValueError(f"theta must lie in (0, 1/4), got {v}")
        return v

    @field_validator('picard_mode')
    @classmethod
    def _known_mode(cls, v):
        if v not in PICARD_MODES:
            raise ValueError(f"Unknown picard mode: {v}. Available: {list(PICARD_MODES)}")
        return v

    @field_validator('horizon')
    @classmethod
    def _horizon_window(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError(f"horizon must lie in (0, 1), got {v}")
        return v

    @model_validator(mode='after')
    def _theta_prime(self):
        if self.theta - self.horizon <= 0.0:
            raise ValueError(f"theta - horizon must be positive, got {self.theta - self.horizon:.4g}")
        return self


class VPBSection(_Section):
    steps: int = Field(3, ge=1)
    eps: float = 0.1
    strength: float = Field(1.0, gt=0.0)
    n_r: int = Field(10, ge=3)
    n_c: int = Field(6, ge=2)
    n_phi: int = Field(8, ge=3)
    box_cells: int = Field(10, ge=3)
    degree: int = Field(6, ge=2)
    compat_tol: float = Field(1e-8, gt=0.0)
    drift_tol: float = Field(1e-2, gt=0.0)
    cg_rtol: float = Field(1e-10, gt=0.0)
    holder_exponent: float = Field(0.5, gt=0.0, le=1.0)
    neumann_tol: float = Field(2.0, gt=0.0)
    alpha_tol: float = Field(1e-2, gt=0.0)


class SamplingSection(_Section):
    liouville: int = Field(100, ge=1)
    determinants: int = Field(20, ge=1)
    gamma: int = Field(10, ge=1)
    collision_points: int = Field(20, ge=1)
    ks: int = Field(2000, ge=10)


class RunConfig(_Section):
    domain: DomainSection = Field(default_factory=DomainSection)
    field: FieldSection = Field(default_factory=FieldSection)
    integrator: IntegratorSection = Field(default_factory=IntegratorSection)
    collision: CollisionSection = Field(default_factory=CollisionSection)
    weight: WeightSection = Field(default_factory=WeightSection)
    cycles: CyclesSection = Field(default_factory=CyclesSection)
    kernel: KernelSection = Field(default_factory=KernelSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    vpb: VPBSection = Field(default_factory=VPBSection)
    sampling: SamplingSection = Field(default_factory=SamplingSection)
    seed: int = Field(0, ge=0)
    output_dir: str = 'results'
    checks: Optional[List[str]] = None
    jobs: int = Field(1, ge=1)
    tolerance_scale: float = Field(1.0, gt=0.0)

    @field_validator('checks')
    @classmethod
    def _registered(cls, v):
        if v is None:
            return v
        from suite import CHECK_REGISTRY
        unknown = [name for name in v if name not in CHECK_REGISTRY]
        if unknown:
            raise ValueError(f"Unknown check: {unknown}. Available: {list(CHECK_REGISTRY.keys())}")
        return v

    def selected_checks(self) -> List[str]:
        """Explicit selection, or every registered check in registry order."""
        if self.checks is not None:
            return list(self.checks)
        from suite import CHECK_REGISTRY
        return list(CHECK_REGISTRY.keys())

    def defaults_dump(self) -> Dict[str, Any]:
        """Fully-defaulted tree, JSON-ready."""
        return self.model_dump(mode='json')


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _plain(node):
    if isinstance(node, dict):
        return {str(k): _plain(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_plain(v) for v in node]
    return node


def _line_of(tree, loc) -> Optional[int]:
    """1-based source line of the deepest key of loc present in the round-trip tree."""
    line = None
    node = tree
    for key in loc:
        if isinstance(node, CommentedMap) and key in node:
            line = node.lc.key(key)[0] + 1
            node = node[key]
        elif isinstance(node, CommentedSeq) and isinstance(key, int) and key < len(node):
            line = node.lc.item(key)[0] + 1
            node = node[key]
        else:
            break
    return line


def config_from_mapping(data: Optional[Dict], tree=None) -> RunConfig:
    """
    Validate a mapping.

    Raises:
        SchemaError: one entry per pydantic issue, with dotted key and line when known
    """
    try:
        return RunConfig.model_validate(_plain(data or {}))
    except ValidationError as exc:
        issues = []
        for err in exc.errors():
            loc = tuple(err['loc'])
            key = '.'.join(str(k) for k in loc) or '<root>'
            issues.append((key, _line_of(tree, loc) if tree is not None else None, err['msg']))
        raise SchemaError(issues) from None


def parse_config(path: Union[str, Path, None]) -> RunConfig:
    """
    Load and validate a YAML run configuration (None gives the defaults).

    Raises:
        FileNotFoundError: path does not exist
        SchemaError: validation failed
    """
    if path is None:
        return RunConfig()
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"config file not found: {source}")
    yaml = YAML()
    with source.open('r', encoding='utf-8') as fh:
        tree = yaml.load(fh)
    if tree is not None and not isinstance(tree, dict):
        raise SchemaError([('<root>', 1, 'the YAML root must be a mapping')])
    cfg = config_from_mapping(tree, tree)
    logger.info("loaded config %s (seed %d)", source, cfg.seed)
    return cfg


def dump_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    yaml = YAML()
    yaml.default_flow_style = False
    with Path(path).open('w', encoding='utf-8', newline='\n') as fh:
        yaml.dump(cfg.defaults_dump(), fh)


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------

def build_domain(section: DomainSection) -> LevelSetDomain:
    if section.name == 'ball':
        return get_domain('ball', radius=section.radius, center=section.center)
    return get_domain(section.name, semi_axes=section.semi_axes, center=section.center)


def build_field(section: FieldSection) -> FieldSpec:
    params = {
        'zero': {},
        'radial': {'strength': section.strength, 'center': section.center},
        'constant': {'vector': section.vector},
        'time_modulated': {'strength': section.strength, 'rate': section.rate},
    }[section.name]
    return get_field(section.name, **params)


def build_settings(section: IntegratorSection) -> IntegratorSettings:
    return IntegratorSettings(**section.model_dump())


def build_kernel(section: CollisionSection) -> CollisionKernel:
    return CollisionKernel(kappa=section.kappa, n_polar=section.n_polar, n_azimuth=section.n_azimuth,
                           n_velocity=section.n_velocity, v_max=section.v_max)


def build_weight(cfg: RunConfig, domain: Optional[LevelSetDomain] = None,
                 field: Optional[FieldSpec] = None) -> KineticWeight:
    return KineticWeight(domain or build_domain(cfg.domain), field or build_field(cfg.field),
                         delta=cfg.weight.delta, delta_prime=cfg.weight.delta_prime)


def build_kernel_spec(section: KernelSection, role: str = 'velocity') -> SingularKernelSpec:
    return SingularKernelSpec(theta=section.theta, kappa=section.kappa, beta=section.beta,
                              varpi=section.varpi, role=role, p=section.p)


def build_solver_config(section: SolverSection, collision: Optional[CollisionSection] = None) -> SolverConfig:
    params = section.model_dump(exclude={'m_max', 'eps'})
    if collision is not None:
        params['kappa'] = collision.kappa
    return SolverConfig(**params)


def build_vpb_config(section: VPBSection) -> VPBConfig:
    return VPBConfig(**section.model_dump(exclude={'steps', 'eps', 'strength'}))


def build_external_potential(cfg: RunConfig) -> ExternalPotential:
    """phi_E whose gradient is the configured field (radial or zero fields only)."""
    if cfg.field.name == 'radial':
        return RadialPotential(cfg.field.strength * cfg.vpb.strength, cfg.field.center)
    if cfg.field.name == 'zero':
        return ZeroPotential()
    return RadialPotential(cfg.vpb.strength, cfg.domain.center)
