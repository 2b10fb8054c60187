import re
from dataclasses import dataclass, field
from enum import auto, StrEnum
from functools import cached_property
from typing import NamedTuple

import numpy as np

from layer_rsa.errors import ValidationError
from layer_rsa.utils import frozen_array

LAYER_ID_PATTERN = re.compile(r"^(?P<model>.+):(?P<index>\d+)$")
PAIR_LABEL_PATTERN = re.compile(r"^(?P<first>.+?:\d+)-(?P<second>.+:\d+)$")


class Measure(StrEnum):
    """
    Dissimilarity measure used for first-order RDMs.
    """

    correlation = auto()
    euclidean = auto()
    mahalanobis = auto()


class Statistic(StrEnum):
    """
    Rank statistic used to compare RDM rows or whole RDMs.
    """

    kendall_a = auto()
    spearman = auto()


class Method(StrEnum):
    """
    Method tag of a correlation report.
    """

    spearman = auto()
    kendall_a = auto()
    pearson = auto()


class FixationMeasure(StrEnum):
    total_fixation = auto()
    first_pass = auto()


class SkipPolicy(StrEnum):
    """
    How words a participant never fixated enter the participant average.
    """

    zero = auto()
    exclude = auto()


class LayerOrder(StrEnum):
    """
    How the producer numbers layers; analysis uses 1 = topmost.
    """

    top_down = "top-down"
    bottom_up = "bottom-up"


class LayerGroup(StrEnum):
    low = auto()
    middle = auto()
    high = auto()
    out = auto()
    excluded = auto()


class CoefficientForm(StrEnum):
    """
    Sign convention of a third-order coefficient: V_Corr or 1 - V_Corr.
    """

    agreement = auto()
    disagreement = auto()


@dataclass(frozen=True)
class ConditionSet:
    """
    Ordered, duplicate-free experimental conditions (sentence ids).
    """

    ids: tuple[str, ...]

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        if not ids:
            raise ValidationError("empty condition set")
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate condition")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    @cached_property
    def positions(self) -> dict[str, int]:
        return {cid: pos for pos, cid in enumerate(self.ids)}


class LayerId(NamedTuple):
    """
    Model-qualified layer, written "<model>:<index>".
    """

    model: str
    index: int

    @classmethod
    def parse(cls, text: str) -> "LayerId":
        """
        Parse a layer id such as "bert:11".

        Args:
            text: Layer id string

        Returns:
            LayerId object
        """
        match = LAYER_ID_PATTERN.match(str(text).strip())
        if match is None:
            raise ValidationError(f"invalid layer id: {text!r}", kind="invalid_layer")
        return cls(match["model"], int(match["index"]))

    def __str__(self) -> str:
        return f"{self.model}:{self.index}"


class LayerPair(NamedTuple):
    """
    Unordered pair of layers, stored in canonical order.
    """

    first: LayerId
    second: LayerId

    @classmethod
    def of(cls, a: LayerId, b: LayerId) -> "LayerPair":
        """
        Build the canonical pair: by index within a model, by model tag across models.

        Args:
            a: One layer
            b: The other layer

        Returns:
            LayerPair object
        """
        if a == b:
            raise ValidationError(f"layer pair needs two distinct layers: {a}", kind="invalid_pair")
        first, second = sorted((a, b))
        return cls(first, second)

    @classmethod
    def parse(cls, label: str) -> "LayerPair":
        match = PAIR_LABEL_PATTERN.match(str(label).strip())
        if match is None:
            raise ValidationError(f"invalid layer pair: {label!r}", kind="invalid_pair")
        return cls.of(LayerId.parse(match["first"]), LayerId.parse(match["second"]))

    @property
    def same_model(self) -> bool:
        return self.first.model == self.second.model

    @property
    def adjacent(self) -> bool:
        return self.same_model and abs(self.first.index - self.second.index) == 1

    @property
    def label(self) -> str:
        return f"{self.first}-{self.second}"


class TokenActivations(NamedTuple):
    """
    Per-token hidden states of one sentence at one layer.
    """

    condition_id: str
    layer: LayerId
    vectors: np.ndarray


class TokenFixationTable(NamedTuple):
    """
    Word-by-participant fixation durations (ms) of one sentence.
    """

    condition_id: str
    words: tuple[str, ...]
    durations: np.ndarray
    measure: FixationMeasure


@dataclass(frozen=True)
class ActivityMatrix:
    """
    Pooled activity patterns, one row per condition, for one layer.
    """

    conditions: ConditionSet
    layer: LayerId
    data: np.ndarray

    def __post_init__(self):
        data = frozen_array(self.data)
        if data.ndim != 2 or data.shape[0] != self.conditions.n:
            raise ValidationError(
                f"activity matrix shape {data.shape} does not match {self.conditions.n} conditions",
                kind="dimension_mismatch",
            )
        if not np.isfinite(data).all():
            raise ValidationError("invalid activation")
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FeatureVector:
    """
    One scalar annotation per condition (fixation, Yngve, log frequency, senses).
    """

    conditions: ConditionSet
    name: str
    values: np.ndarray

    def __post_init__(self):
        values = frozen_array(self.values)
        if values.shape != (self.conditions.n,):
            raise ValidationError(
                f"feature {self.name!r} has {values.size} values for {self.conditions.n} conditions",
                kind="dimension_mismatch",
            )
        if not np.isfinite(values).all():
            raise ValidationError(f"feature {self.name!r} has non-finite values", kind="invalid_feature")
        object.__setattr__(self, "values", values)

    def aligned(self, conditions: ConditionSet) -> "FeatureVector":
        """
        Reorder the vector to another ordering of the same conditions.

        Args:
            conditions: Target condition order

        Returns:
            FeatureVector in the target order
        """
        if conditions == self.conditions:
            return self
        if set(conditions.ids) != set(self.conditions.ids):
            raise ValidationError("condition-set mismatch")
        order = [self.conditions.positions[cid] for cid in conditions.ids]
        return FeatureVector(conditions, self.name, self.values[order])


@dataclass(frozen=True)
class RDM:
    """
    Representational dissimilarity matrix over a condition set.
    """

    conditions: ConditionSet
    measure: Measure
    data: np.ndarray
    label: str = ""
    # conditions whose pattern was constant (correlation distance fell back to 1.0)
    constant_rows: tuple[str, ...] = field(default=())

    def __post_init__(self):
        data = frozen_array(self.data)
        n = self.conditions.n
        if data.shape != (n, n):
            raise ValidationError(
                f"RDM shape {data.shape} does not match {n} conditions", kind="dimension_mismatch"
            )
        if not np.isfinite(data).all() or (data < 0).any():
            raise ValidationError("RDM entries must be finite and non-negative", kind="invalid_rdm")
        if (np.diag(data) != 0).any():
            raise ValidationError("RDM diagonal must be zero", kind="invalid_rdm")
        if not np.array_equal(data, data.T):
            raise ValidationError("RDM must be symmetric", kind="invalid_rdm")
        if self.measure == Measure.correlation and (data > 2).any():
            raise ValidationError("correlation distances must lie in [0, 2]", kind="invalid_rdm")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "measure", Measure(self.measure))

    @property
    def n(self) -> int:
        return self.conditions.n

    def upper_triangle(self) -> np.ndarray:
        """
        Strict upper triangle, row-major, as a flat vector.
        """
        return self.data[np.triu_indices(self.n, k=1)]


class CorrelationReport(NamedTuple):
    """
    Correlation coefficient with raw and Bonferroni-adjusted p-values.
    """

    coefficient: float
    n: int
    p_raw: float
    p_adjusted: float
    n_tests: int
    method: Method


@dataclass(frozen=True)
class DisagreementVector:
    """
    Per-condition agreement (V_Corr) between the RDM rows of two layers.
    """

    pair: LayerPair
    conditions: ConditionSet
    agreement: np.ndarray
    statistic: Statistic

    def __post_init__(self):
        agreement = frozen_array(self.agreement)
        if agreement.shape != (self.conditions.n,):
            raise ValidationError("agreement length does not match conditions", kind="dimension_mismatch")
        object.__setattr__(self, "agreement", agreement)

    @property
    def disagreement(self) -> np.ndarray:
        return 1.0 - self.agreement


class ThirdOrderReport(NamedTuple):
    """
    Correlation of a predictor (layer pair or feature) with a target feature.

    The report coefficient is in agreement form (V_Corr); the disagreement
    form (1 - V_Corr) is its negation.
    """

    predictor: str
    target: str
    report: CorrelationReport

    @property
    def disagreement_coefficient(self) -> float:
        return -self.report.coefficient

    def coefficient(self, form: CoefficientForm) -> float:
        if form == CoefficientForm.disagreement:
            return self.disagreement_coefficient
        return self.report.coefficient


@dataclass(frozen=True)
class RSM:
    """
    Whole-RDM correlations between K RDMs.
    """

    labels: tuple[str, ...]
    data: np.ndarray
    statistic: Statistic

    def __post_init__(self):
        data = frozen_array(self.data)
        k = len(self.labels)
        if data.shape != (k, k):
            raise ValidationError(f"RSM shape {data.shape} does not match {k} labels", kind="dimension_mismatch")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "data", data)
