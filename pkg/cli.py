"""
Command-Line Interface

Subcommands:
    trace            one characteristic: per-step CSV and exit record JSON
    velocity-lemma   near-boundary sandwich bound for the kinetic weight
    collision-check  collision identities and moment refinement tables
    cycles           diffuse-reflection cycles, gap bound and tail decay
    kernel-bounds    singular velocity-integral bounds
    solve-inflow     Duhamel evaluator and Green/trace balances
    picard           Picard iteration for the nonlinear problem
    vpb              self-consistent potential coupling
    suite            every selected check

Exit codes: 0 when every selected check passes, 1 on a failed or errored
check, 2 on an invalid configuration.

Usage:
    python cli.py suite --config configs/ball_radial.yaml --out results --jobs 4
    python cli.py cycles --trials 500 --lmax 6 --delta 0.05 --seed 3
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from characteristics import PhaseState, sample_trajectory
from errors import SchemaError, ToolkitError
from run_config import RunConfig, build_domain, build_field, build_settings, config_from_mapping, parse_config
from suite import run_suite, summary_lines, write_outputs

logger = logging.getLogger(__name__)

SUBCOMMAND_CHECKS: Dict[str, List[str]] = {
    'velocity-lemma': ['velocity_lemma'],
    'collision-check': ['collision'],
    'cycles': ['cycles'],
    'kernel-bounds': ['kernel_bounds'],
    'solve-inflow': ['duhamel', 'balances'],
    'picard': ['picard'],
    'vpb': ['vpb'],
}


def _configure_logging(level: int, suppress_warnings: bool = False) -> None:
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logging.captureWarnings(True)
    if suppress_warnings:
        logging.getLogger('py.warnings').setLevel(logging.ERROR)


def _override(cfg: RunConfig, section: Optional[str], **values) -> RunConfig:
    """Re-validated copy with the non-None values written into cfg[section] (or the root)."""
    data = cfg.model_dump()
    target = data if section is None else data[section]
    target.update({k: v for k, v in values.items() if v is not None})
    return config_from_mapping(data)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, default=None, help='YAML run configuration')
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--out', type=Path, default=None, help='output directory')
    common.add_argument('--jobs', type=int, default=None)
    common.add_argument('--tolerance-scale', type=float, default=None)
    common.add_argument('--plots', action='store_true', help='write PNG figures next to the CSV tables')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true')
    verbosity.add_argument('--quiet', action='store_true')

    parser = argparse.ArgumentParser(prog='kinetic-wall', description=__doc__.split('\n\n')[0])
    sub = parser.add_subparsers(dest='command', required=True)

    trace = sub.add_parser('trace', parents=[common], help='trace one characteristic')
    trace.add_argument('--x', type=float, nargs=3, default=[0.0, 0.0, 0.0])
    trace.add_argument('--v', type=float, nargs=3, default=[1.0, 0.0, 0.0])
    trace.add_argument('--t', type=float, default=1.0)
    trace.add_argument('--s-end', type=float, default=0.0)

    sub.add_parser('velocity-lemma', parents=[common])
    sub.add_parser('collision-check', parents=[common])
    cycles = sub.add_parser('cycles', parents=[common])
    cycles.add_argument('--trials', type=int, default=None)
    cycles.add_argument('--lmax', type=int, default=None)
    cycles.add_argument('--delta', type=float, default=None)
    sub.add_parser('kernel-bounds', parents=[common])
    sub.add_parser('solve-inflow', parents=[common])
    sub.add_parser('picard', parents=[common])
    vpb = sub.add_parser('vpb', parents=[common])
    vpb.add_argument('--steps', type=int, default=None)
    vpb.add_argument('--eps', type=float, default=None)
    vpb.add_argument('--n-r', type=int, default=None)
    vpb.add_argument('--box-cells', type=int, default=None)
    suite = sub.add_parser('suite', parents=[common])
    suite.add_argument('--checks', nargs='*', default=None, help='subset of registered checks')
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file plus global and subcommand overrides."""
    cfg = parse_config(args.config)
    cfg = _override(cfg, None, seed=args.seed, output_dir=None if args.out is None else str(args.out),
                    jobs=args.jobs, tolerance_scale=args.tolerance_scale)
    if args.command == 'cycles':
        cfg = _override(cfg, 'cycles', trials=args.trials, l_max=args.lmax, delta=args.delta)
    elif args.command == 'vpb':
        cfg = _override(cfg, 'vpb', steps=args.steps, eps=args.eps, n_r=args.n_r, box_cells=args.box_cells)
    elif args.command == 'suite' and args.checks is not None:
        cfg = _override(cfg, None, checks=args.checks)
    return cfg


def run_trace(cfg: RunConfig, args: argparse.Namespace) -> int:
    domain, field = build_domain(cfg.domain), build_field(cfg.field)
    state = PhaseState(args.t, np.array(args.x, dtype=float), np.array(args.v, dtype=float))
    table = sample_trajectory(domain, field, state, args.s_end, build_settings(cfg.integrator))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / 'trace.csv', index=False, encoding='utf-8', lineterminator='\n')
    record = table.attrs.get('exit')
    payload = {'exited': record is not None, **(record or {})}
    with (out / 'exit.json').open('w', encoding='utf-8', newline='\n') as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write('\n')
    print(f"trace: {len(table)} steps, exited={payload['exited']}, written to {out}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    _configure_logging(level, suppress_warnings=args.quiet)

    try:
        cfg = load_run_config(args)
    except (SchemaError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    if args.command == 'trace':
        try:
            return run_trace(cfg, args)
        except ToolkitError as exc:
            print(f"trace failed: {exc}", file=sys.stderr)
            return 1

    names = SUBCOMMAND_CHECKS.get(args.command)
    result = run_suite(cfg, names)
    out = write_outputs(result, cfg)
    if args.plots:
        from plotting import render_tables
        render_tables(result.tables, out)

    print("\n".join(summary_lines(result)))
    print(f"exit code {result.exit_code}; report in {out / 'report.json'}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
