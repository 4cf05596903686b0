import math

import numpy as np
import pytest

from controllers import build_initial_fis
from errors import InvalidParameterError, MissingInputError
from fuzzy_engine import (
    FisDefinition,
    FuzzyInferenceEngine,
    FuzzyVariable,
    MembershipFunction,
    Rule,
    RuleClause,
    dumps_fis,
    gaussian_membership,
    infer,
    infer_detailed,
    load_fis,
    loads_fis,
    rule_strength,
    save_fis,
)

SAMPLE_WIDTH = 2.0 / 200  # [-1, 1] at 201 samples


def _x_for_degree(degree, sigma=1.0):
    """Input at which a Gaussian centred on 0 has the given degree."""
    return sigma * math.sqrt(-2.0 * math.log(degree))


@pytest.fixture
def two_input_fis():
    inputs = (
        FuzzyVariable("a", (-5.0, 5.0), (MembershipFunction("Z", 0.0, 1.0),)),
        FuzzyVariable("b", (-5.0, 5.0), (MembershipFunction("Z", 0.0, 1.0),)),
    )
    outputs = (FuzzyVariable("y", (-1.0, 1.0), (MembershipFunction("P", 0.6, 0.1),)),)
    rules = (Rule((RuleClause("a", "Z"), RuleClause("b", "Z")), (("y", "P"),)),)
    return FisDefinition(inputs, outputs, rules)


@pytest.fixture
def initial_fis():
    return build_initial_fis()


# --- membership functions --------------------------------------------------------------

def test_gaussian_peak_is_exactly_one():
    assert gaussian_membership(0.5, MembershipFunction("A", 0.5, 0.2)) == 1.0


def test_gaussian_one_sigma_from_center():
    assert gaussian_membership(0.7, MembershipFunction("A", 0.5, 0.2)) == pytest.approx(math.exp(-0.5))


def test_gaussian_far_tail_underflows_to_non_negative():
    degree = gaussian_membership(-10.0, MembershipFunction("A", 0.5, 0.2))
    assert 0.0 <= degree < 1e-300


def test_gaussian_rejects_non_finite_input():
    with pytest.raises(InvalidParameterError):
        gaussian_membership(float("nan"), MembershipFunction("A", 0.0, 1.0))


@pytest.mark.parametrize("sigma", [0.0, -0.1, float("inf")])
def test_membership_function_rejects_bad_sigma(sigma):
    with pytest.raises(InvalidParameterError):
        MembershipFunction("A", 0.0, sigma)


def test_membership_degrees_stay_in_unit_interval():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        mf = MembershipFunction("A", rng.uniform(-10, 10), rng.uniform(1e-3, 10))
        x = rng.uniform(-50, 50)
        assert 0.0 <= gaussian_membership(x, mf) <= 1.0


def test_gaussian_is_symmetric_and_decreasing():
    mf = MembershipFunction("A", 0.3, 0.4)
    previous = 1.0
    for d in np.linspace(0.05, 2.0, 40):
        right = gaussian_membership(0.3 + d, mf)
        assert right == pytest.approx(gaussian_membership(0.3 - d, mf), abs=1e-15)
        assert right < previous
        previous = right


# --- variables, rules and definitions --------------------------------------------------

def test_variable_rejects_center_outside_universe():
    with pytest.raises(InvalidParameterError):
        FuzzyVariable("x", (0.0, 1.0), (MembershipFunction("A", 2.0, 0.1),))


def test_variable_rejects_empty_universe():
    with pytest.raises(InvalidParameterError):
        FuzzyVariable("x", (1.0, 1.0), (MembershipFunction("A", 1.0, 0.1),))


def test_rule_rejects_repeated_output():
    with pytest.raises(InvalidParameterError):
        Rule((RuleClause("a", "Z"),), (("y", "P"), ("y", "N")))


@pytest.mark.parametrize("weight", [0.0, 1.5])
def test_rule_rejects_weight_outside_range(weight):
    with pytest.raises(InvalidParameterError):
        Rule((RuleClause("a", "Z"),), (("y", "P"),), weight=weight)


def test_definition_rejects_unresolved_clause(two_input_fis):
    bad = Rule((RuleClause("a", "MISSING"),), (("y", "P"),))
    with pytest.raises(InvalidParameterError):
        FisDefinition(two_input_fis.inputs, two_input_fis.outputs, (bad,))


def test_definition_rejects_unused_output(two_input_fis):
    extra = FuzzyVariable("w", (0.0, 1.0), (MembershipFunction("A", 0.5, 0.1),))
    with pytest.raises(InvalidParameterError):
        FisDefinition(two_input_fis.inputs, two_input_fis.outputs + (extra,), two_input_fis.rules)


def test_definition_rejects_coarse_resolution(two_input_fis):
    with pytest.raises(InvalidParameterError):
        FisDefinition(two_input_fis.inputs, two_input_fis.outputs, two_input_fis.rules, defuzz_resolution=5)


# --- rule strength ---------------------------------------------------------------------

def test_single_clause_strength_is_its_degree(two_input_fis):
    rule = Rule((RuleClause("a", "Z"),), (("y", "P"),))
    assert rule_strength(rule, {"a": _x_for_degree(0.8)}, two_input_fis) == pytest.approx(0.8)


def test_conjunction_takes_the_minimum(two_input_fis):
    rule = two_input_fis.rules[0]
    values = {"a": _x_for_degree(0.9), "b": _x_for_degree(0.4)}
    assert rule_strength(rule, values, two_input_fis) == pytest.approx(0.4)


def test_negated_clause_is_the_complement(two_input_fis):
    rule = Rule((RuleClause("a", "Z", negated=True),), (("y", "P"),))
    assert rule_strength(rule, {"a": _x_for_degree(0.3)}, two_input_fis) == pytest.approx(0.7)


def test_weight_scales_strength(two_input_fis):
    rule = Rule((RuleClause("a", "Z"),), (("y", "P"),), weight=0.5)
    assert rule_strength(rule, {"a": 0.0}, two_input_fis) == pytest.approx(0.5)


def test_missing_input_raises(two_input_fis):
    with pytest.raises(MissingInputError):
        rule_strength(two_input_fis.rules[0], {"a": 0.0}, two_input_fis)
    with pytest.raises(KeyError):
        infer(two_input_fis, {"a": 0.0})


# --- inference -------------------------------------------------------------------------

def test_single_symmetric_consequent_defuzzifies_to_its_center(two_input_fis):
    y = infer(two_input_fis, {"a": 0.0, "b": 0.0})["y"]
    assert abs(y - 0.6) <= SAMPLE_WIDTH


def _mirrored_fis(rng):
    """Two rules with one antecedent firing sets mirrored about the middle of a random universe."""
    middle, half_width = rng.uniform(-3.0, 3.0), rng.uniform(0.5, 5.0)
    offset = rng.uniform(0.0, half_width)
    sigma = rng.uniform(0.02, 1.0) * half_width
    inputs = (FuzzyVariable("a", (-1.0, 1.0), (MembershipFunction("Z", rng.uniform(-1, 1), rng.uniform(0.05, 1.0)),)),)
    outputs = (FuzzyVariable("y", (middle - half_width, middle + half_width), (
        MembershipFunction("N", middle - offset, sigma),
        MembershipFunction("P", middle + offset, sigma),
    )),)
    rules = (
        Rule((RuleClause("a", "Z"),), (("y", "N"),)),
        Rule((RuleClause("a", "Z"),), (("y", "P"),)),
    )
    return FisDefinition(inputs, outputs, rules), middle, 2.0 * half_width / 200


def test_mirrored_consequents_cancel():
    rng = np.random.default_rng(23)
    for _ in range(1000):
        fis, middle, sample_width = _mirrored_fis(rng)
        zone = fis.inputs[0].mfs[0]
        a = zone.center + zone.sigma * rng.uniform(-3.0, 3.0)
        assert abs(infer(fis, {"a": a})["y"] - middle) <= sample_width
        assert abs(FuzzyInferenceEngine(fis).infer({"a": a})["y"] - middle) <= sample_width


def test_no_rule_fired_returns_midpoint_and_flags_it():
    inputs = (FuzzyVariable("a", (-100.0, 100.0), (MembershipFunction("L", -100.0, 0.1),)),)
    outputs = (FuzzyVariable("y", (0.0, 2.0), (MembershipFunction("P", 1.5, 0.1),)),)
    fis = FisDefinition(inputs, outputs, (Rule((RuleClause("a", "L"),), (("y", "P"),)),))

    result = infer_detailed(fis, {"a": 100.0})
    assert result.outputs["y"] == 1.0
    assert result.no_rule_fired == frozenset({"y"})

    compiled = FuzzyInferenceEngine(fis).infer_detailed({"a": 100.0})
    assert compiled.outputs["y"] == 1.0
    assert compiled.no_rule_fired == frozenset({"y"})


def test_inputs_are_clamped_to_universe(initial_fis):
    inside = {"e": 1.0, "ie": -1.0, "soc_b": 1.0, "soc_u": 0.0}
    outside = {"e": 7.0, "ie": -3.0, "soc_b": 1.4, "soc_u": -0.2}
    assert infer(initial_fis, outside) == infer(initial_fis, inside)


def test_initial_fis_discharges_battery_when_bus_sags(initial_fis):
    i_b = infer(initial_fis, {"e": 0.02, "ie": 0.01, "soc_b": 0.5, "soc_u": 0.5})["i_b"]
    assert 0.0 < i_b <= 1.0


def test_initial_fis_battery_output_is_monotone_in_error(initial_fis):
    outputs = [
        infer(initial_fis, {"e": e, "ie": e, "soc_b": 0.5, "soc_u": 0.5})["i_b"]
        for e in np.linspace(-1.0, 1.0, 21)
    ]
    assert all(b >= a - 1e-12 for a, b in zip(outputs, outputs[1:]))


def test_initial_fis_always_fires(initial_fis):
    rng = np.random.default_rng(3)
    for _ in range(200):
        values = {"e": rng.uniform(-1, 1), "ie": rng.uniform(-1, 1), "soc_b": rng.random(), "soc_u": rng.random()}
        assert not infer_detailed(initial_fis, values).no_rule_fired


def test_outputs_stay_inside_universe(initial_fis):
    rng = np.random.default_rng(11)
    for _ in range(1000):
        values = {"e": rng.uniform(-2, 2), "ie": rng.uniform(-2, 2), "soc_b": rng.random(), "soc_u": rng.random()}
        for name, y in infer(initial_fis, values).items():
            lo, hi = initial_fis.output(name).universe
            assert lo <= y <= hi


def test_inference_is_deterministic(initial_fis):
    engine = FuzzyInferenceEngine(initial_fis)
    rng = np.random.default_rng(31)
    for _ in range(1000):
        values = {"e": rng.uniform(-1.5, 1.5), "ie": rng.uniform(-1.5, 1.5), "soc_b": rng.random(), "soc_u": rng.random()}
        first = infer(initial_fis, values)
        assert infer(initial_fis, dict(values)) == first
        assert engine.infer(values) == engine.infer(dict(values))


def test_inference_with_random_sets_is_deterministic():
    rng = np.random.default_rng(37)
    for _ in range(1000):
        fis, _, _ = _mirrored_fis(rng)
        a = rng.uniform(-2.0, 2.0)
        assert infer(fis, {"a": a}) == infer(fis, {"a": a})


def test_compiled_engine_matches_reference(initial_fis):
    engine = FuzzyInferenceEngine(initial_fis)
    rng = np.random.default_rng(5)
    for _ in range(300):
        values = {"e": rng.uniform(-1.2, 1.2), "ie": rng.uniform(-1.2, 1.2), "soc_b": rng.random(), "soc_u": rng.random()}
        reference = infer_detailed(initial_fis, values)
        compiled = engine.infer_detailed(values)
        np.testing.assert_allclose(compiled.strengths, reference.strengths, atol=1e-12)
        for name, y in reference.outputs.items():
            assert compiled.outputs[name] == pytest.approx(y, abs=1e-9)


def test_engine_rejects_non_finite_input(initial_fis):
    with pytest.raises(InvalidParameterError):
        FuzzyInferenceEngine(initial_fis).infer({"e": float("nan"), "ie": 0.0, "soc_b": 0.5, "soc_u": 0.5})


def test_doubling_resolution_converges():
    coarse, fine = build_initial_fis(201), build_initial_fis(401)
    rng = np.random.default_rng(13)
    for _ in range(200):
        values = {"e": rng.uniform(-1, 1), "ie": rng.uniform(-1, 1), "soc_b": rng.random(), "soc_u": rng.random()}
        a, b = infer(coarse, values), infer(fine, values)
        for name in a:
            lo, hi = coarse.output(name).universe
            assert abs(a[name] - b[name]) < (hi - lo) / 200


# --- serialization ---------------------------------------------------------------------

def test_text_round_trip_is_lossless(initial_fis):
    nudged = initial_fis.with_output_mfs("i_b", [
        MembershipFunction(mf.label, mf.center / 3.0, mf.sigma * math.pi / 3.0) for mf in initial_fis.output("i_b").mfs
    ])
    assert loads_fis(dumps_fis(nudged)) == nudged


def test_file_round_trip(initial_fis, tmp_path):
    path = save_fis(initial_fis, tmp_path / "nested" / "fis.json")
    assert load_fis(path) == initial_fis


def test_malformed_documents_are_rejected():
    with pytest.raises(InvalidParameterError):
        loads_fis("{not json")
    with pytest.raises(InvalidParameterError):
        loads_fis('{"inputs": [], "outputs": []}')
