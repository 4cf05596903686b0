"""Optional PNG figures for runs, tuning and comparisons."""

import logging
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from fuzzy_engine import FisDefinition  # noqa: E402
from scenarios import RunLog  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f" Wrote {path}")
    return path


def plot_run(log: RunLog, path: Union[str, Path], v_nominal: float = 100.0, title: str = "") -> Path:
    """Bus voltage, storage currents and SOCs stacked on a shared time axis."""
    path = Path(path)
    fig, ax = plt.subplots(3, 1, figsize=(8, 9), sharex=True)

    ax[0].plot(log.t, log.v_bus, label="v_bus")
    ax[0].axhline(v_nominal * 1.01, color="grey", linestyle="--", linewidth=0.8)
    ax[0].axhline(v_nominal * 0.99, color="grey", linestyle="--", linewidth=0.8)
    ax[0].set_ylabel("Bus voltage [V]")

    ax[1].plot(log.t, log.i_batt, label="battery")
    ax[1].plot(log.t, log.i_uc, label="ultracapacitor")
    ax[1].plot(log.t, log.i_ovd, label="OVD")
    ax[1].set_ylabel("Current [A]")
    ax[1].legend(loc="upper right")

    ax[2].plot(log.t, log.soc_b, label="SOC battery")
    ax[2].plot(log.t, log.soc_u, label="SOC ultracapacitor")
    ax[2].set_ylabel("SOC")
    ax[2].set_xlabel("Time [s]")
    ax[2].legend(loc="upper right")

    for axis in ax:
        axis.grid(True)
    if title:
        ax[0].set_title(title)
    return _save(fig, path)


def plot_convergence(history: Sequence[float], path: Union[str, Path]) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(np.arange(1, len(history) + 1), history, marker=".")
    ax.set_xlabel("Iteration")
    ax.set_ylabel("Best cost")
    ax.grid(True)
    return _save(fig, path)


def plot_q_table(q_table: Mapping[str, Mapping[str, float]], path: Union[str, Path]) -> Path:
    """Grouped bars of battery throughput: one group per regime, one bar per controller."""
    path = Path(path)
    regimes = list(q_table)
    kinds = list(next(iter(q_table.values()))) if q_table else []
    x = np.arange(len(regimes))
    width = 0.8 / max(1, len(kinds))

    fig, ax = plt.subplots(figsize=(8, 4))
    for i, kind in enumerate(kinds):
        ax.bar(x + i * width, [q_table[r][kind] for r in regimes], width, label=kind)
    ax.set_xticks(x + width * (len(kinds) - 1) / 2)
    ax.set_xticklabels(regimes)
    ax.set_ylabel("Battery throughput Q [A s]")
    ax.legend()
    ax.grid(True, axis="y")
    return _save(fig, path)


def plot_membership_functions(
    initial: FisDefinition,
    path: Union[str, Path],
    tuned: Optional[FisDefinition] = None,
) -> Path:
    """Output sets of the initial FIS (dashed) and, when given, the tuned FIS (solid)."""
    path = Path(path)
    outputs = initial.outputs
    fig, ax = plt.subplots(len(outputs), 1, figsize=(8, 3 * len(outputs)), squeeze=False)
    for axis, variable in zip(ax[:, 0], outputs):
        lo, hi = variable.universe
        x = np.linspace(lo, hi, 401)
        for i, mf in enumerate(variable.mfs):
            color = f"C{i}"
            axis.plot(x, np.exp(-0.5 * ((x - mf.center) / mf.sigma) ** 2), color=color, linestyle="--",
                      label=f"{mf.label} initial" if tuned is not None else mf.label)
            if tuned is not None:
                tuned_mf = tuned.output(variable.name).mf(mf.label)
                axis.plot(x, np.exp(-0.5 * ((x - tuned_mf.center) / tuned_mf.sigma) ** 2), color=color,
                          label=f"{mf.label} tuned")
        axis.set_ylabel(variable.name)
        axis.set_ylim(0.0, 1.05)
        axis.grid(True)
        axis.legend(loc="upper right", fontsize="small", ncol=2)
    ax[-1, 0].set_xlabel("Per-unit output")
    return _save(fig, path)


def plot_trajectories(trajectories: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Best-so-far center and width of every output set per iteration."""
    path = Path(path)
    labels = [c for c in trajectories.columns if c != "iteration"]
    variables = list(dict.fromkeys(label.split(".")[0] for label in labels))
    iterations = trajectories["iteration"] if "iteration" in trajectories else np.arange(1, len(trajectories) + 1)

    fig, ax = plt.subplots(len(variables), 2, figsize=(10, 3 * len(variables)), sharex=True, squeeze=False)
    for row, variable in enumerate(variables):
        for col, parameter in enumerate(("center", "sigma")):
            axis = ax[row, col]
            for label in labels:
                name, mf_label, kind = label.split(".")
                if name == variable and kind == parameter:
                    axis.plot(iterations, trajectories[label], label=mf_label)
            axis.set_ylabel(f"{variable} {parameter}")
            axis.grid(True)
            axis.legend(loc="upper right", fontsize="small")
    for axis in ax[-1]:
        axis.set_xlabel("Iteration")
    return _save(fig, path)


def plot_compare_overlays(
    logs: Mapping[str, RunLog],
    path: Union[str, Path],
    v_nominal: float = 100.0,
    title: str = "",
) -> Path:
    """Bus voltage, battery current and UC current of several controllers on one scenario."""
    path = Path(path)
    fig, ax = plt.subplots(3, 1, figsize=(8, 9), sharex=True)
    for name, log in logs.items():
        ax[0].plot(log.t, log.v_bus, label=name, linewidth=0.9)
        ax[1].plot(log.t, log.i_batt, label=name, linewidth=0.9)
        ax[2].plot(log.t, log.i_uc, label=name, linewidth=0.9)
    ax[0].axhline(v_nominal * 1.01, color="grey", linestyle="--", linewidth=0.8)
    ax[0].axhline(v_nominal * 0.99, color="grey", linestyle="--", linewidth=0.8)
    ax[0].set_ylabel("Bus voltage [V]")
    ax[1].set_ylabel("Battery current [A]")
    ax[2].set_ylabel("UC current [A]")
    ax[2].set_xlabel("Time [s]")
    for axis in ax:
        axis.grid(True)
        axis.legend(loc="upper right", fontsize="small")
    if title:
        ax[0].set_title(title)
    return _save(fig, path)
