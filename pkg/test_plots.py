import logging

import numpy as np
import pandas as pd
import pytest

from controllers import build_initial_fis
from plots import plot_compare_overlays, plot_membership_functions, plot_q_table, plot_trajectories
from pso_tuner import decode_fis, encode_fis, parameter_labels
from scenarios import LOG_COLUMNS, RunLog


def _log(offset):
    t = np.linspace(0.0, 1.0, 11)
    columns = {name: np.zeros_like(t) for name in LOG_COLUMNS if name != "t"}
    columns["v_bus"] = 100.0 + offset * np.sin(t)
    columns["i_batt"] = offset * t
    return RunLog.from_columns(0.1, t=t, **columns)


@pytest.fixture
def fis():
    return build_initial_fis()


def test_membership_functions_initial_and_tuned(tmp_path, fis, caplog):
    tuned = decode_fis(fis, encode_fis(fis) * 0.9)
    with caplog.at_level(logging.INFO, logger="plots"):
        path = plot_membership_functions(fis, tmp_path / "figs" / "mfs.png", tuned=tuned)
    assert path.stat().st_size > 0
    assert "Wrote" in caplog.text


def test_membership_functions_without_tuned(tmp_path, fis):
    assert plot_membership_functions(fis, tmp_path / "mfs.png").is_file()


def test_trajectories_from_tuning_frame(tmp_path, fis):
    labels = parameter_labels(fis)
    rows = np.tile(encode_fis(fis), (4, 1))
    frame = pd.DataFrame(rows, columns=labels)
    frame.insert(0, "iteration", range(1, 5))
    assert plot_trajectories(frame, tmp_path / "traj.png").stat().st_size > 0


def test_overlays_and_q_table(tmp_path):
    logs = {"pi": _log(1.0), "fuzzy_initial": _log(0.5)}
    assert plot_compare_overlays(logs, tmp_path / "overlay.png", title="balanced").is_file()
    q_table = {"balanced": {"q_pi": 40.0, "q_fuzzy_initial": 3.0, "q_fuzzy_tuned": 2.0}}
    assert plot_q_table(q_table, tmp_path / "q.png").is_file()
