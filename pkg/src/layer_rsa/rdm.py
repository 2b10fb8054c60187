import logging
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, LinAlgError, solve_triangular
from scipy.spatial.distance import cdist

from layer_rsa.base import BaseMeasure
from layer_rsa.config import DEFAULT_RIDGE
from layer_rsa.errors import InputError, ValidationError
from layer_rsa.get_logger import get_logger
from layer_rsa.ingest import layer_from_stem
from layer_rsa.types import ActivityMatrix, ConditionSet, Measure, RDM
from layer_rsa.utils import frozen_array, MATRIX_FLOAT_FORMAT

logger = get_logger("layer_rsa.rdm", logging.INFO)

# centered norms below this count as constant patterns
CONSTANT_NORM = 1e-12

# relative eigenvalue floor below which a covariance is treated as singular
SPD_TOLERANCE = 1e-12


class CovarianceEstimate(NamedTuple):
    """
    Regularized covariance of activity patterns, for the Mahalanobis distance.
    """

    matrix: np.ndarray
    ridge: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def cholesky(self) -> np.ndarray:
        """
        Lower Cholesky factor of the covariance.

        Returns:
            Lower-triangular factor L with L L^T = matrix
        """
        cov = np.asarray(self.matrix, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValidationError("covariance must be square", kind="dimension_mismatch")
        if not np.isfinite(cov).all() or not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
            raise ValidationError("singular covariance")
        cov = (cov + cov.T) / 2

        eigvals = np.linalg.eigvalsh(cov)
        if eigvals[0] <= SPD_TOLERANCE * max(eigvals[-1], 0.0):
            raise ValidationError("singular covariance")

        try:
            factor, lower = cho_factor(cov, lower=True)
        except LinAlgError:
            raise ValidationError("singular covariance")
        return np.tril(factor)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValidationError(
            f"pattern lengths differ: {a.shape} vs {b.shape}", kind="dimension_mismatch"
        )
    return a, b


def correlation_distance(a: np.ndarray, b: np.ndarray) -> float:
    """
    Correlation distance 1 - Pearson(a, b) with explicit mean-centering.

    Constant patterns have no defined correlation; the pair gets the
    uncorrelated distance 1.0 and a warning.

    Args:
        a: Activity pattern
        b: Activity pattern of the same length

    Returns:
        Distance in [0, 2]
    """
    a, b = _check_pair(a, b)
    if a.size < 2:
        raise ValidationError("correlation distance needs at least 2 dimensions", kind="dimension_mismatch")

    ac = a - a.mean()
    bc = b - b.mean()
    ss_a = np.dot(ac, ac)
    ss_b = np.dot(bc, bc)
    if ss_a < CONSTANT_NORM**2 or ss_b < CONSTANT_NORM**2:
        logger.warning("Constant activity pattern, using correlation distance 1.0")
        return 1.0

    r = np.dot(ac, bc) / np.sqrt(ss_a * ss_b)
    return float(1.0 - np.clip(r, -1.0, 1.0))


def euclidean_distance(a: np.ndarray, b: np.ndarray) -> float:
    """
    Euclidean distance ||a - b||.

    Args:
        a: Activity pattern
        b: Activity pattern of the same length

    Returns:
        Non-negative distance
    """
    a, b = _check_pair(a, b)
    diff = a - b
    return float(np.sqrt(np.dot(diff, diff)))


def mahalanobis_distance(a: np.ndarray, b: np.ndarray, cov: CovarianceEstimate) -> float:
    """
    Mahalanobis distance sqrt((a-b)^T S^-1 (a-b)), via a Cholesky solve.

    Args:
        a: Activity pattern
        b: Activity pattern of the same length
        cov: Covariance estimate of matching dimension

    Returns:
        Non-negative distance
    """
    a, b = _check_pair(a, b)
    if cov.dim != a.size:
        raise ValidationError(
            f"covariance is {cov.dim}-dimensional, patterns are {a.size}-dimensional",
            kind="dimension_mismatch",
        )
    z = solve_triangular(cov.cholesky(), a - b, lower=True)
    return float(np.sqrt(np.dot(z, z)))


def estimate_covariance(matrix: ActivityMatrix, ridge: float = DEFAULT_RIDGE) -> CovarianceEstimate:
    """
    Sample covariance of the rows plus a ridge of ridge * trace / H on the diagonal.

    Args:
        matrix: Pooled activity patterns
        ridge: Ridge coefficient (>= 0)

    Returns:
        CovarianceEstimate object
    """
    if ridge < 0:
        raise ValidationError("ridge must be >= 0", kind="invalid_ridge")
    if matrix.conditions.n < 2:
        raise ValidationError("covariance needs at least 2 conditions", kind="too_few_conditions")

    cov = np.atleast_2d(np.cov(matrix.data, rowvar=False, ddof=1))
    dim = cov.shape[0]

    # all-constant data has zero trace; the ridge is then taken as absolute
    trace = np.trace(cov)
    scale = trace / dim if trace > 0 else 1.0
    cov = cov + ridge * scale * np.eye(dim)

    return CovarianceEstimate(matrix=frozen_array(cov), ridge=float(ridge))


class CorrelationDistance(BaseMeasure):
    measure = Measure.correlation

    def __init__(self):
        self.sum_squares: np.ndarray = np.zeros(0)
        self.constant_rows: np.ndarray = np.zeros(0, dtype=bool)

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return correlation_distance(a, b)

    def prepare(self, data: np.ndarray) -> np.ndarray:
        centered = data - data.mean(axis=1, keepdims=True)
        self.sum_squares = np.einsum("ij,ij->i", centered, centered)
        self.constant_rows = self.sum_squares < CONSTANT_NORM**2
        return centered

    def block(self, data: np.ndarray, rows: slice) -> np.ndarray:
        gram = data[rows] @ data[rows.start :].T
        denom = np.sqrt(np.outer(self.sum_squares[rows], self.sum_squares[rows.start :]))

        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.clip(gram / denom, -1.0, 1.0)

        # constant patterns sit at the uncorrelated point
        constant = self.constant_rows[rows, None] | self.constant_rows[None, rows.start :]
        return np.where(constant, 1.0, 1.0 - r)


class EuclideanDistance(BaseMeasure):
    measure = Measure.euclidean

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return euclidean_distance(a, b)

    def block(self, data: np.ndarray, rows: slice) -> np.ndarray:
        return cdist(data[rows], data[rows.start :], metric="euclidean")


class MahalanobisDistance(EuclideanDistance):
    """
    Mahalanobis distance as the Euclidean distance between whitened patterns.
    """

    measure = Measure.mahalanobis

    def __init__(self, cov: CovarianceEstimate):
        self.cov = cov
        self.factor = cov.cholesky()

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return mahalanobis_distance(a, b, self.cov)

    def prepare(self, data: np.ndarray) -> np.ndarray:
        if data.shape[1] != self.cov.dim:
            raise ValidationError(
                f"covariance is {self.cov.dim}-dimensional, patterns are {data.shape[1]}-dimensional",
                kind="dimension_mismatch",
            )
        return solve_triangular(self.factor, data.T, lower=True).T


def get_measure(measure: Measure, cov: CovarianceEstimate | None = None) -> BaseMeasure:
    """
    Get the measure object for a measure tag.

    Args:
        measure: Measure tag
        cov: Covariance estimate, required for the Mahalanobis distance

    Returns:
        BaseMeasure object
    """
    match Measure(measure):
        case Measure.correlation:
            return CorrelationDistance()
        case Measure.euclidean:
            return EuclideanDistance()
        case Measure.mahalanobis:
            if cov is None:
                raise ValidationError(
                    "mahalanobis measure requires a covariance estimate", kind="missing_covariance"
                )
            return MahalanobisDistance(cov)


def build_rdm(
    matrix: ActivityMatrix,
    measure: Measure = Measure.correlation,
    cov: CovarianceEstimate | None = None,
    threads: int = 1,
) -> RDM:
    """
    Build the first-order RDM of a layer's pooled activity patterns.

    Args:
        matrix: Pooled activity patterns
        measure: Dissimilarity measure
        cov: Covariance estimate, required for the Mahalanobis distance
        threads: Number of worker threads

    Returns:
        RDM object
    """
    dissimilarity = get_measure(measure, cov)
    if isinstance(dissimilarity, CorrelationDistance) and matrix.dim < 2:
        raise ValidationError("correlation distance needs at least 2 dimensions", kind="dimension_mismatch")

    data = dissimilarity.matrix(matrix.data, threads=threads)

    constant_rows: tuple[str, ...] = ()
    if isinstance(dissimilarity, CorrelationDistance) and dissimilarity.constant_rows.any():
        constant_rows = tuple(np.asarray(matrix.conditions.ids)[dissimilarity.constant_rows])
        logger.warning(
            f"{matrix.layer}: {len(constant_rows)} constant patterns, "
            f"correlation distance set to 1.0 for their pairs: {', '.join(constant_rows[:10])}"
        )

    return RDM(
        conditions=matrix.conditions,
        measure=dissimilarity.measure,
        data=data,
        label=str(matrix.layer),
        constant_rows=constant_rows,
    )


def write_rdm(rdm: RDM, path: Path) -> None:
    """
    Write an RDM as CSV; the first row and column hold condition ids and the
    corner cell holds the layer label.

    Args:
        rdm: RDM object
        path: Output CSV file

    Returns:
        None
    """
    frame = pd.DataFrame(rdm.data, index=list(rdm.conditions.ids), columns=list(rdm.conditions.ids))
    frame.to_csv(
        path,
        index_label=rdm.label or "id",
        float_format=MATRIX_FLOAT_FORMAT,
        lineterminator="\n",
        encoding="utf-8",
    )


def read_rdm(path: Path, measure: Measure = Measure.correlation) -> RDM:
    """
    Read an RDM written by write_rdm.

    Args:
        path: RDM CSV file
        measure: Measure the RDM was built with

    Returns:
        RDM object
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, index_col=0)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot read RDM {path}: {e}", kind="rdm_unreadable")

    if list(frame.index) != list(frame.columns):
        raise ValidationError(f"{path}: row and column condition ids differ", kind="invalid_rdm")

    try:
        data = frame.to_numpy().astype(np.float64)
    except ValueError as e:
        raise ValidationError(f"{path}: non-numeric RDM cell: {e}", kind="invalid_rdm")

    label = frame.index.name
    if not label or label == "id":
        # files named like <model>_<index>.csv carry their layer in the name
        try:
            label = str(layer_from_stem(Path(path).stem))
        except ValidationError:
            label = Path(path).stem
    return RDM(
        conditions=ConditionSet(tuple(frame.index)),
        measure=measure,
        data=data,
        label=label,
    )
