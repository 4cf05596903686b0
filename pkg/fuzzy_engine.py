"""
Mamdani fuzzy inference with Gaussian membership functions.

AND is min, NOT is the complement 1 - mu, implication clips each consequent at the
rule strength, aggregation is max, and the crisp value is the discrete centroid over
``defuzz_resolution`` uniform samples of the output universe.
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from errors import InvalidParameterError, MissingInputError

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 201
MIN_RESOLUTION = 11


def _finite(value: float, what: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise InvalidParameterError(f"{what} must be a real number, got {value!r}")
    if not math.isfinite(value):
        raise InvalidParameterError(f"{what} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class MembershipFunction:
    label: str
    center: float
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "center", _finite(self.center, f"center of {self.label}"))
        object.__setattr__(self, "sigma", _finite(self.sigma, f"sigma of {self.label}"))
        if self.sigma <= 0.0:
            raise InvalidParameterError(f"sigma of {self.label} must be > 0, got {self.sigma}")

    def degree(self, x: float) -> float:
        return gaussian_membership(x, self)


@dataclass(frozen=True)
class FuzzyVariable:
    name: str
    universe: Tuple[float, float]
    mfs: Tuple[MembershipFunction, ...]

    def __post_init__(self):
        lo, hi = (_finite(v, f"universe of {self.name}") for v in self.universe)
        if not lo < hi:
            raise InvalidParameterError(f"universe of {self.name} must satisfy lo < hi, got [{lo}, {hi}]")
        object.__setattr__(self, "universe", (lo, hi))
        object.__setattr__(self, "mfs", tuple(self.mfs))
        if not self.mfs:
            raise InvalidParameterError(f"variable {self.name} needs at least one membership function")
        labels = [mf.label for mf in self.mfs]
        if len(set(labels)) != len(labels):
            raise InvalidParameterError(f"duplicate membership labels in {self.name}: {labels}")
        for mf in self.mfs:
            if not lo <= mf.center <= hi:
                raise InvalidParameterError(
                    f"center {mf.center} of {self.name}.{mf.label} lies outside [{lo}, {hi}]"
                )

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(mf.label for mf in self.mfs)

    def mf(self, label: str) -> MembershipFunction:
        for candidate in self.mfs:
            if candidate.label == label:
                return candidate
        raise InvalidParameterError(f"variable {self.name} has no membership function {label!r}")

    def clamp(self, x: float) -> float:
        lo, hi = self.universe
        return min(max(x, lo), hi)


@dataclass(frozen=True)
class RuleClause:
    variable: str
    mf: str
    negated: bool = False


@dataclass(frozen=True)
class Rule:
    antecedents: Tuple[RuleClause, ...]
    consequents: Tuple[Tuple[str, str], ...]
    weight: float = 1.0
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "antecedents", tuple(self.antecedents))
        object.__setattr__(self, "consequents", tuple(tuple(c) for c in self.consequents))
        if not self.antecedents:
            raise InvalidParameterError("a rule needs at least one antecedent")
        if not self.consequents:
            raise InvalidParameterError("a rule needs at least one consequent")
        outputs = [name for name, _ in self.consequents]
        if len(set(outputs)) != len(outputs):
            raise InvalidParameterError(f"output variable repeated within one rule: {outputs}")
        weight = _finite(self.weight, "rule weight")
        if not 0.0 < weight <= 1.0:
            raise InvalidParameterError(f"rule weight must lie in (0, 1], got {weight}")
        object.__setattr__(self, "weight", weight)


@dataclass(frozen=True)
class FisDefinition:
    inputs: Tuple[FuzzyVariable, ...]
    outputs: Tuple[FuzzyVariable, ...]
    rules: Tuple[Rule, ...]
    defuzz_resolution: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "rules", tuple(self.rules))
        if int(self.defuzz_resolution) != self.defuzz_resolution or self.defuzz_resolution < MIN_RESOLUTION:
            raise InvalidParameterError(
                f"defuzz_resolution must be an integer >= {MIN_RESOLUTION}, got {self.defuzz_resolution}"
            )
        object.__setattr__(self, "defuzz_resolution", int(self.defuzz_resolution))
        names = [v.name for v in self.inputs + self.outputs]
        if len(set(names)) != len(names):
            raise InvalidParameterError(f"variable names must be unique, got {names}")

        inputs = {v.name: v for v in self.inputs}
        outputs = {v.name: v for v in self.outputs}
        used_outputs = set()
        for index, rule in enumerate(self.rules, start=1):
            for clause in rule.antecedents:
                if clause.variable not in inputs:
                    raise InvalidParameterError(f"rule {index}: unknown input variable {clause.variable!r}")
                inputs[clause.variable].mf(clause.mf)
            for name, label in rule.consequents:
                if name not in outputs:
                    raise InvalidParameterError(f"rule {index}: unknown output variable {name!r}")
                outputs[name].mf(label)
                used_outputs.add(name)
        missing = [name for name in outputs if name not in used_outputs]
        if missing:
            raise InvalidParameterError(f"output variables never used as a consequent: {missing}")

    def input(self, name: str) -> FuzzyVariable:
        for variable in self.inputs:
            if variable.name == name:
                return variable
        raise InvalidParameterError(f"unknown input variable {name!r}")

    def output(self, name: str) -> FuzzyVariable:
        for variable in self.outputs:
            if variable.name == name:
                return variable
        raise InvalidParameterError(f"unknown output variable {name!r}")

    def with_output_mfs(self, name: str, mfs: Sequence[MembershipFunction]) -> "FisDefinition":
        outputs = tuple(replace(v, mfs=tuple(mfs)) if v.name == name else v for v in self.outputs)
        return replace(self, outputs=outputs)


class InferenceResult(NamedTuple):
    outputs: Dict[str, float]
    strengths: Tuple[float, ...]
    no_rule_fired: FrozenSet[str]


def gaussian_membership(x: float, mf: MembershipFunction) -> float:
    """Degree of ``x`` in a Gaussian set, exp(-(x - c)^2 / (2 sigma^2))."""
    x = _finite(x, "membership input")
    sigma = _finite(mf.sigma, "sigma")
    if sigma <= 0.0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    z = (x - mf.center) / sigma
    # math.exp underflows quietly to 0.0 far in the tails
    return math.exp(-0.5 * z * z)


def _clause_degree(clause: RuleClause, input_values: Mapping[str, float], fis: FisDefinition) -> float:
    if clause.variable not in input_values:
        raise MissingInputError(f"input {clause.variable!r} was not supplied")
    variable = fis.input(clause.variable)
    x = variable.clamp(_finite(input_values[clause.variable], f"input {clause.variable}"))
    degree = gaussian_membership(x, variable.mf(clause.mf))
    return 1.0 - degree if clause.negated else degree


def rule_strength(rule: Rule, input_values: Mapping[str, float], fis: FisDefinition) -> float:
    """weight * min over clauses, with negated clauses complemented."""
    return rule.weight * min(_clause_degree(c, input_values, fis) for c in rule.antecedents)


def _centroid(xs: np.ndarray, aggregate: np.ndarray) -> Optional[float]:
    total = float(np.sum(aggregate))
    if total <= 0.0:
        return None
    return float(np.dot(xs, aggregate) / total)


def infer_detailed(fis: FisDefinition, input_values: Mapping[str, float]) -> InferenceResult:
    """Reference (uncompiled) inference; the compiled engine must agree with it."""
    for variable in fis.inputs:
        if variable.name not in input_values:
            raise MissingInputError(f"input {variable.name!r} was not supplied")
    strengths = tuple(rule_strength(rule, input_values, fis) for rule in fis.rules)

    outputs: Dict[str, float] = {}
    silent = set()
    for variable in fis.outputs:
        lo, hi = variable.universe
        xs = np.linspace(lo, hi, fis.defuzz_resolution)
        aggregate = np.zeros_like(xs)
        for rule, strength in zip(fis.rules, strengths):
            for name, label in rule.consequents:
                if name != variable.name:
                    continue
                mf = variable.mf(label)
                shape = np.exp(-0.5 * ((xs - mf.center) / mf.sigma) ** 2)
                aggregate = np.maximum(aggregate, np.minimum(shape, strength))
        crisp = _centroid(xs, aggregate)
        if crisp is None:
            crisp = 0.5 * (lo + hi)
            silent.add(variable.name)
            logger.debug(f" No rule fired for {variable.name}, using universe midpoint")
        outputs[variable.name] = crisp
    return InferenceResult(outputs, strengths, frozenset(silent))


def infer(fis: FisDefinition, input_values: Mapping[str, float]) -> Dict[str, float]:
    return infer_detailed(fis, input_values).outputs


class FuzzyInferenceEngine:
    """
    A FisDefinition compiled into index arrays so one inference is a handful of
    numpy operations. Used inside the simulation loop; the result matches ``infer``.
    """

    def __init__(self, fis: FisDefinition):
        self.fis = fis
        self.input_names = tuple(v.name for v in fis.inputs)
        self.output_names = tuple(v.name for v in fis.outputs)

        # one flat row per input membership function
        mf_index: Dict[Tuple[str, str], int] = {}
        owners: List[int] = []
        centers: List[float] = []
        sigmas: List[float] = []
        for position, variable in enumerate(fis.inputs):
            for mf in variable.mfs:
                mf_index[(variable.name, mf.label)] = len(centers)
                owners.append(position)
                centers.append(mf.center)
                sigmas.append(mf.sigma)
        self._owners = np.array(owners, dtype=int)
        self._centers = np.array(centers)
        self._sigmas = np.array(sigmas)
        self._lo = np.array([v.universe[0] for v in fis.inputs])
        self._hi = np.array([v.universe[1] for v in fis.inputs])

        # padded clause matrix; the pad slot always reads 1.0 so it never wins the min
        pad = len(centers)
        width = max(len(rule.antecedents) for rule in fis.rules) if fis.rules else 1
        clause_idx = np.full((len(fis.rules), width), pad, dtype=int)
        clause_neg = np.zeros((len(fis.rules), width), dtype=bool)
        for r, rule in enumerate(fis.rules):
            for c, clause in enumerate(rule.antecedents):
                clause_idx[r, c] = mf_index[(clause.variable, clause.mf)]
                clause_neg[r, c] = clause.negated
        self._clause_idx = clause_idx
        self._clause_neg = clause_neg
        self._weights = np.array([rule.weight for rule in fis.rules])

        self._grids = []
        for variable in fis.outputs:
            lo, hi = variable.universe
            xs = np.linspace(lo, hi, fis.defuzz_resolution)
            shapes = np.array([np.exp(-0.5 * ((xs - mf.center) / mf.sigma) ** 2) for mf in variable.mfs])
            labels = {mf.label: i for i, mf in enumerate(variable.mfs)}
            rule_rows, shape_rows = [], []
            for r, rule in enumerate(fis.rules):
                for name, label in rule.consequents:
                    if name == variable.name:
                        rule_rows.append(r)
                        shape_rows.append(labels[label])
            self._grids.append((
                variable.name,
                0.5 * (lo + hi),
                xs,
                shapes[np.array(shape_rows, dtype=int)],
                np.array(rule_rows, dtype=int),
            ))

    def rule_strengths(self, input_values: Mapping[str, float]) -> np.ndarray:
        try:
            raw = [input_values[name] for name in self.input_names]
        except KeyError as e:
            raise MissingInputError(f"input {e.args[0]!r} was not supplied")
        x = np.array(raw, dtype=float)
        if not np.all(np.isfinite(x)):
            raise InvalidParameterError(f"non-finite fuzzy input: {dict(zip(self.input_names, raw))}")
        x = np.minimum(np.maximum(x, self._lo), self._hi)
        z = (x[self._owners] - self._centers) / self._sigmas
        degrees = np.append(np.exp(-0.5 * z * z), 1.0)
        clause = degrees[self._clause_idx]
        clause = np.where(self._clause_neg, 1.0 - clause, clause)
        return self._weights * clause.min(axis=1)

    def infer_detailed(self, input_values: Mapping[str, float]) -> InferenceResult:
        strengths = self.rule_strengths(input_values)
        outputs: Dict[str, float] = {}
        silent = set()
        for name, midpoint, xs, shapes, rule_rows in self._grids:
            clipped = np.minimum(shapes, strengths[rule_rows][:, None])
            crisp = _centroid(xs, clipped.max(axis=0))
            if crisp is None:
                crisp = midpoint
                silent.add(name)
                logger.debug(f" No rule fired for {name}, using universe midpoint")
            outputs[name] = crisp
        return InferenceResult(outputs, tuple(float(s) for s in strengths), frozenset(silent))

    def infer(self, input_values: Mapping[str, float]) -> Dict[str, float]:
        return self.infer_detailed(input_values).outputs


# --- serialization -------------------------------------------------------------------

def _variable_to_dict(variable: FuzzyVariable) -> dict:
    return {
        "name": variable.name,
        "universe": [variable.universe[0], variable.universe[1]],
        "mfs": [{"label": mf.label, "center": mf.center, "sigma": mf.sigma} for mf in variable.mfs],
    }


def _variable_from_dict(data: Mapping) -> FuzzyVariable:
    try:
        return FuzzyVariable(
            name=str(data["name"]),
            universe=tuple(data["universe"]),
            mfs=tuple(
                MembershipFunction(str(mf["label"]), mf["center"], mf["sigma"]) for mf in data["mfs"]
            ),
        )
    except (KeyError, TypeError) as e:
        raise InvalidParameterError(f"malformed fuzzy variable entry: {e}")


def fis_to_dict(fis: FisDefinition) -> dict:
    rules = []
    for rule in fis.rules:
        entry = {
            "if": [{"variable": c.variable, "mf": c.mf, "negated": c.negated} for c in rule.antecedents],
            "then": [{"variable": name, "mf": label} for name, label in rule.consequents],
            "weight": rule.weight,
        }
        if rule.note:
            entry["note"] = rule.note
        rules.append(entry)
    return {
        "defuzz_resolution": fis.defuzz_resolution,
        "inputs": [_variable_to_dict(v) for v in fis.inputs],
        "outputs": [_variable_to_dict(v) for v in fis.outputs],
        "rules": rules,
    }


def fis_from_dict(data: Mapping) -> FisDefinition:
    try:
        rules = tuple(
            Rule(
                antecedents=tuple(
                    RuleClause(str(c["variable"]), str(c["mf"]), bool(c.get("negated", False)))
                    for c in entry["if"]
                ),
                consequents=tuple((str(c["variable"]), str(c["mf"])) for c in entry["then"]),
                weight=entry.get("weight", 1.0),
                note=str(entry.get("note", "")),
            )
            for entry in data["rules"]
        )
        return FisDefinition(
            inputs=tuple(_variable_from_dict(v) for v in data["inputs"]),
            outputs=tuple(_variable_from_dict(v) for v in data["outputs"]),
            rules=rules,
            defuzz_resolution=data.get("defuzz_resolution", DEFAULT_RESOLUTION),
        )
    except (KeyError, TypeError) as e:
        raise InvalidParameterError(f"malformed FIS document: {e}")


def dumps_fis(fis: FisDefinition) -> str:
    # json writes floats with repr(), the shortest string that round-trips exactly
    return json.dumps(fis_to_dict(fis), indent=2)


def loads_fis(text: str) -> FisDefinition:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidParameterError(f"FIS document is not valid JSON: {e}")
    return fis_from_dict(data)


def save_fis(fis: FisDefinition, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_fis(fis) + "\n", encoding="utf-8")
    logger.info(f" FIS written to {path}")
    return path


def load_fis(path: Union[str, Path]) -> FisDefinition:
    path = Path(path)
    return loads_fis(path.read_text(encoding="utf-8"))
