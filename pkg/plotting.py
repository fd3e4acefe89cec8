"""
Diagnostic Plots

Plain charts for the tables the checks emit. One chart per table, one
message per chart.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

LINE_COLOR = '#d6673b'
BAND_COLOR = '#808080'


def _finish(fig, ax, path: Path, title: str, xlabel: str, ylabel: str) -> Path:
    ax.set_title(title, fontsize=12, pad=10)
    ax.set_xlabel(xlabel, fontsize=10)
    ax.set_ylabel(ylabel, fontsize=10)
    ax.grid(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_velocity_lemma(table: pd.DataFrame, path: Path) -> Path:
    """alpha along one trajectory between the two exponential bounds."""
    fig, ax = plt.subplots(figsize=(7, 5))
    ax.fill_between(table['tau'], table['bound_low'], table['bound_high'], color=BAND_COLOR, alpha=0.25,
                    label='bounds')
    ax.plot(table['tau'], table['alpha'], color=LINE_COLOR, linewidth=1.5, label='alpha')
    ax.set_yscale('log')
    ax.legend(frameon=False)
    return _finish(fig, ax, path, 'Kinetic weight along a trajectory', 'tau', 'alpha')


def plot_tail_decay(curve: pd.DataFrame, path: Path) -> Path:
    """Weighted tail estimate per cycle level with one standard error."""
    fig, ax = plt.subplots(figsize=(7, 5))
    est = curve['estimate'].to_numpy(dtype=float)
    err = curve['std_error'].to_numpy(dtype=float)
    ok = est > 0
    ax.errorbar(curve['level'][ok], est[ok], yerr=np.minimum(err[ok], 0.99 * est[ok]), color=LINE_COLOR,
                marker='o', markersize=5, linewidth=1.5, capsize=3)
    ax.set_yscale('log')
    return _finish(fig, ax, path, 'Tail of the diffuse cycles', 'cycle level', 'weighted probability')


def plot_picard_history(history: pd.DataFrame, path: Path) -> Path:
    """Sup-norm differences of successive iterates."""
    fig, ax = plt.subplots(figsize=(7, 5))
    diffs = history.dropna(subset=['sup_difference'])
    diffs = diffs[diffs['sup_difference'] > 0]
    ax.plot(diffs['m'], diffs['sup_difference'], color=LINE_COLOR, marker='o', markersize=5, linewidth=1.5)
    ax.set_yscale('log')
    return _finish(fig, ax, path, 'Picard iteration', 'm', 'sup |f^{m+1} - f^m|')


def plot_vpb_steps(diagnostics: pd.DataFrame, path: Path) -> Path:
    """Gradient and Hessian proxies of the self-consistent potential per step."""
    fig, ax = plt.subplots(figsize=(7, 5))
    ax.plot(diagnostics['m'], diagnostics['grad_sup'], color=LINE_COLOR, marker='o', linewidth=1.5,
            label='|grad phi|')
    ax.plot(diagnostics['m'], diagnostics['hessian_sup'], color=BAND_COLOR, marker='s', linewidth=1.5,
            label='|D^2 phi|')
    ax.legend(frameon=False)
    return _finish(fig, ax, path, 'Self-consistent potential', 'step', 'sup norm')


PLOTTERS: Dict[str, Callable[[pd.DataFrame, Path], Path]] = {
    'velocity_lemma_trajectory': plot_velocity_lemma,
    'tail_curve': plot_tail_decay,
    'picard_history': plot_picard_history,
    'vpb_steps': plot_vpb_steps,
}


def render_tables(tables: Dict[str, Dict[str, pd.DataFrame]], out_dir: Path) -> List[Path]:
    """PNG for every emitted table that has a plotter."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for check, by_label in tables.items():
        for label, df in by_label.items():
            if label in PLOTTERS and len(df):
                written.append(PLOTTERS[label](df, out_dir / f"{check}__{label}.png"))
    logger.info("wrote %d plots to %s", len(written), out_dir)
    return written
