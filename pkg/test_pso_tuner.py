import numpy as np
import pytest

import pso_tuner
from controllers import ControllerConfig, ControllerKind, build_initial_fis
from errors import FisEncodingError, InvalidParameterError, NumericalDivergenceError
from microgrid_plant import PlantParams
from pso_tuner import (
    DIVERGENCE_PENALTY,
    Bounds,
    SwarmConfig,
    TuningObjective,
    cost_from_log,
    decode_fis,
    default_bounds,
    encode_fis,
    parameter_labels,
    pso_optimize,
)
from scenarios import Regime, RunLog, make_scenario
from simulation import SimSettings, run_simulation


def sphere(x):
    return float(np.sum(np.asarray(x) ** 2))


def _log(t, **columns):
    t = np.asarray(t, dtype=float)
    return RunLog.from_columns(float(t[1] - t[0]), t=t, **columns)


@pytest.fixture
def template():
    return build_initial_fis()


@pytest.fixture
def short_objective(template):
    scenario = make_scenario(Regime.BALANCED, 0, duration=0.3)
    controller = ControllerConfig(kind=ControllerKind.FUZZY_INITIAL, fis=template)
    return TuningObjective(template, PlantParams(), controller, scenario, SimSettings(dt=1e-3))


# --- cost ------------------------------------------------------------------------------

def test_cost_of_a_perfect_run_is_zero():
    t = np.linspace(0.0, 10.0, 101)
    assert cost_from_log(_log(t, v_bus=np.full_like(t, 100.0))) == 0.0


def test_cost_of_a_constant_voltage_offset():
    t = np.linspace(0.0, 10.0, 101)
    assert cost_from_log(_log(t, v_bus=np.full_like(t, 101.0))) == pytest.approx(10.0)


@pytest.mark.parametrize("exponent, expected", [(2, 2.0), (1, 1.0)])
def test_cost_of_constant_battery_current(exponent, expected):
    t = np.linspace(0.0, 5.0, 51)
    log = _log(t, v_bus=np.full_like(t, 100.0), i_batt=np.full_like(t, -2.0))
    assert cost_from_log(log, battery_weight=0.1, exponent=exponent) == pytest.approx(expected)


def test_cost_rejects_other_exponents():
    t = np.linspace(0.0, 1.0, 11)
    with pytest.raises(InvalidParameterError):
        cost_from_log(_log(t, v_bus=np.full_like(t, 100.0)), exponent=3)


# --- encoding --------------------------------------------------------------------------

def test_encoding_covers_every_output_set(template):
    params = encode_fis(template)
    assert params.shape == (24,)
    labels = parameter_labels(template)
    assert len(labels) == 24
    assert labels[:2] == ["i_b.VN.center", "i_b.VN.sigma"]
    assert labels[-1] == "i_o.VP.sigma"


def test_decode_of_encode_is_identity(template):
    assert decode_fis(template, encode_fis(template)) == template


def test_decode_changes_only_the_addressed_set(template):
    params = encode_fis(template)
    params[2] = -0.4
    decoded = decode_fis(template, params)
    assert decoded.output("i_b").mfs[1].center == -0.4
    assert decoded.output("i_b").mfs[0] == template.output("i_b").mfs[0]
    assert decoded.output("i_u") == template.output("i_u")
    assert decoded.output("i_o") == template.output("i_o")
    assert decoded.inputs == template.inputs
    assert decoded.rules == template.rules


def test_decode_rejects_wrong_length(template):
    with pytest.raises(FisEncodingError):
        decode_fis(template, np.zeros(23))


def test_every_point_in_default_bounds_decodes(template):
    bounds = default_bounds(template)
    lo, hi = bounds.arrays()
    assert len(bounds) == 24
    assert np.all(lo[1::2] == 0.02) and np.all(hi[1::2] == 1.0)
    decode_fis(template, lo)
    decode_fis(template, hi)


def test_ovd_centers_stay_non_negative(template):
    lo, hi = default_bounds(template).arrays()
    labels = parameter_labels(template)
    for i, label in enumerate(labels):
        name, _, kind = label.split(".")
        if kind != "center":
            continue
        if name == "i_o":
            assert (lo[i], hi[i]) == (0.0, 1.0)
        else:
            assert (lo[i], hi[i]) == (-1.0, 1.0)
    initial = encode_fis(template)
    assert np.all((initial >= lo) & (initial <= hi))


def test_two_sided_bounds_on_request(template):
    lo, _ = default_bounds(template, one_sided=()).arrays()
    assert np.all(lo[0::2] == -1.0)


@pytest.mark.parametrize("lower, upper", [((0.0,), (0.0,)), ((0.0, 1.0), (1.0,)), ((), ())])
def test_bounds_validation(lower, upper):
    with pytest.raises(InvalidParameterError):
        Bounds(lower, upper)


@pytest.mark.parametrize("kwargs", [{"population": 0}, {"iterations": 0}, {"velocity_cap": 0.0}])
def test_swarm_config_validation(kwargs):
    with pytest.raises(InvalidParameterError):
        SwarmConfig(**kwargs)


# --- swarm -----------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sphere_converges(seed):
    result = pso_optimize(sphere, Bounds.uniform(-5.0, 5.0, 5), SwarmConfig(population=60, iterations=100, seed=seed))
    assert result.best_cost < 1e-3
    assert sphere(result.best_params) == pytest.approx(result.best_cost)


def test_best_cost_never_increases():
    result = pso_optimize(sphere, Bounds.uniform(-5.0, 5.0, 3), SwarmConfig(population=10, iterations=30, seed=4))
    assert len(result.history) == 30
    assert all(b <= a for a, b in zip(result.history, result.history[1:]))
    assert result.trajectory.shape == (30, 3)


def test_single_particle_at_the_optimum_stays_there():
    result = pso_optimize(
        sphere, Bounds.uniform(-1.0, 1.0, 4), SwarmConfig(population=1, iterations=5), initial=np.zeros(4)
    )
    np.testing.assert_array_equal(result.best_params, np.zeros(4))
    assert result.best_cost == 0.0
    assert result.initial_cost == 0.0


def test_same_seed_same_result():
    bounds = Bounds.uniform(-3.0, 3.0, 4)
    cfg = SwarmConfig(population=12, iterations=15, seed=21)
    a, b = pso_optimize(sphere, bounds, cfg), pso_optimize(sphere, bounds, cfg)
    np.testing.assert_array_equal(a.best_params, b.best_params)
    assert a.history == b.history


def test_evaluation_count():
    result = pso_optimize(sphere, Bounds.uniform(-1.0, 1.0, 2), SwarmConfig(population=7, iterations=4))
    assert result.evaluations == 7 * 5


def test_seeded_particle_is_clipped_into_bounds():
    result = pso_optimize(
        sphere, Bounds.uniform(1.0, 2.0, 2), SwarmConfig(population=1, iterations=1), initial=[0.0, 5.0]
    )
    assert result.initial_cost == pytest.approx(1.0 + 4.0)


def test_initial_position_must_match_dimensions():
    with pytest.raises(FisEncodingError):
        pso_optimize(sphere, Bounds.uniform(-1.0, 1.0, 2), SwarmConfig(population=2, iterations=1), initial=[0.0])


def test_no_particle_leaves_the_box():
    seen = []

    def recording(x):
        seen.append(np.array(x))
        return sphere(x - 10.0)

    pso_optimize(recording, Bounds.uniform(-1.0, 1.0, 3), SwarmConfig(population=8, iterations=10, seed=3))
    positions = np.array(seen)
    assert np.all(positions >= -1.0) and np.all(positions <= 1.0)


# --- tuning objective ------------------------------------------------------------------

def test_objective_matches_a_direct_simulation(short_objective, template):
    direct = run_simulation(
        short_objective.plant, short_objective.controller, short_objective.scenario, short_objective.settings
    )
    expected = cost_from_log(direct, short_objective.plant.v_nominal)
    assert short_objective(encode_fis(template)) == pytest.approx(expected, rel=1e-12)
    assert 0.0 <= expected < DIVERGENCE_PENALTY


def test_candidate_controller_is_tuned_kind(short_objective, template):
    controller = short_objective.controller_for(encode_fis(template))
    assert controller.kind is ControllerKind.FUZZY_TUNED
    assert controller.fis == template


def test_diverged_candidate_scores_the_penalty(short_objective, template, monkeypatch):
    def diverge(*args, **kwargs):
        raise NumericalDivergenceError(0.125, "bus voltage collapsed")

    monkeypatch.setattr(pso_tuner, "run_simulation", diverge)
    assert short_objective(encode_fis(template)) == DIVERGENCE_PENALTY


def test_tiny_tuning_run_is_no_worse_than_its_seed(short_objective, template):
    cfg = SwarmConfig(population=3, iterations=2, seed=0)
    result = pso_optimize(short_objective, default_bounds(template), cfg, initial=encode_fis(template))
    assert result.best_cost <= result.initial_cost
    assert result.history[-1] == result.best_cost
    decode_fis(template, result.best_params)
