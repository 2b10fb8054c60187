import logging
from typing import NamedTuple, Sequence

import numba
import numpy as np
import pandas as pd
import patsy
import statsmodels.api as sm
from numba import njit, prange
from scipy.special import betainc
from scipy.stats import rankdata

from layer_rsa.errors import ValidationError
from layer_rsa.get_logger import get_logger
from layer_rsa.types import CorrelationReport, Method

logger = get_logger("layer_rsa.rankstats", logging.INFO)

# centered norms below this count as zero variance
ZERO_VARIANCE = 1e-12

# permutation draws generated per batch in permutation p-values
PERMUTATION_BATCH = 1_000


class AnovaRow(NamedTuple):
    term: str
    ss: float
    df: int
    ms: float
    f: float
    p: float


class AnovaTable(NamedTuple):
    """
    Type II two-way ANOVA table. F and p are NaN when undefined (no residual variance).
    """

    terms: tuple[AnovaRow, ...]
    residual: AnovaRow
    total_ss: float
    model_ss: float
    interaction: bool

    def term(self, name: str) -> AnovaRow:
        for row in self.terms:
            if row.term == name:
                return row
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        """
        Table as a DataFrame, one row per term plus the residual row.
        """
        return pd.DataFrame([*self.terms, self.residual], columns=AnovaRow._fields)


def set_threads(threads: int) -> None:
    """
    Cap the numba worker threads used by the row-wise statistics.

    Args:
        threads: Requested number of threads

    Returns:
        None
    """
    numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))


def _as_vector(values: Sequence[float], name: str = "values") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional", kind="dimension_mismatch")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contain non-finite entries", kind="non_finite")
    return arr


def _as_pair(x: Sequence[float], y: Sequence[float], min_n: int) -> tuple[np.ndarray, np.ndarray]:
    x = _as_vector(x, "x")
    y = _as_vector(y, "y")
    if x.shape != y.shape:
        raise ValidationError(f"length mismatch: {x.size} vs {y.size}", kind="dimension_mismatch")
    if x.size < min_n:
        raise ValidationError(f"need at least {min_n} observations, got {x.size}", kind="too_few_observations")
    return x, y


def rank_with_ties(values: Sequence[float]) -> np.ndarray:
    """
    1-based fractional ranks; tied values share the mean of their rank span.

    Args:
        values: Finite values

    Returns:
        Array of ranks
    """
    arr = _as_vector(values)
    if arr.size < 1:
        raise ValidationError("cannot rank an empty sequence", kind="too_few_observations")
    return rankdata(arr, method="average")


def _centered_correlation(xc: np.ndarray, yc: np.ndarray) -> float | None:
    ss_x = np.dot(xc, xc)
    ss_y = np.dot(yc, yc)
    if ss_x < ZERO_VARIANCE**2 or ss_y < ZERO_VARIANCE**2:
        return None
    r = np.dot(xc, yc) / np.sqrt(ss_x * ss_y)
    return float(np.clip(r, -1.0, 1.0))


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Pearson correlation coefficient.

    Args:
        x: Values
        y: Values of the same length

    Returns:
        Coefficient in [-1, 1]
    """
    x, y = _as_pair(x, y, min_n=2)
    r = _centered_correlation(x - x.mean(), y - y.mean())
    if r is None:
        raise ValidationError("zero variance")
    return r


def student_t_sf(t: float, df: float) -> float:
    """
    Upper-tail probability P(T > t) of Student's t distribution, through the
    regularized incomplete beta function I_x(df/2, 1/2) with x = df / (df + t^2).

    Args:
        t: Statistic
        df: Degrees of freedom (>= 1)

    Returns:
        Probability in [0, 1]
    """
    if not df >= 1:
        raise ValidationError(f"degrees of freedom must be >= 1, got {df}", kind="invalid_df")
    if np.isnan(t):
        raise ValidationError("t statistic is NaN", kind="non_finite")

    x = df / (df + t * t) if np.isfinite(t) else 0.0
    tail = 0.5 * float(betainc(df / 2.0, 0.5, x))
    return tail if t >= 0 else 1.0 - tail


def f_sf(f: float, df_num: float, df_den: float) -> float:
    """
    Upper-tail probability P(F > f) of the F distribution, through the
    regularized incomplete beta function.

    Args:
        f: Statistic (>= 0)
        df_num: Numerator degrees of freedom
        df_den: Denominator degrees of freedom

    Returns:
        Probability in [0, 1], NaN when f is NaN
    """
    if np.isnan(f):
        return float("nan")
    if df_num < 1 or df_den < 1:
        raise ValidationError("degrees of freedom must be >= 1", kind="invalid_df")
    if np.isinf(f):
        return 0.0
    return float(betainc(df_den / 2.0, df_num / 2.0, df_den / (df_den + df_num * max(f, 0.0))))


def bonferroni(p_raw: float, n_tests: int) -> float:
    """
    Bonferroni-adjusted p-value, min(1, n_tests * p_raw).
    """
    if n_tests < 1:
        raise ValidationError("n_tests must be >= 1", kind="invalid_n_tests")
    return min(1.0, n_tests * p_raw)


def _permutation_p(rx: np.ndarray, ry: np.ndarray, rho: float, permutations: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    xc = rx - rx.mean()
    yc = ry - ry.mean()
    norm = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))

    exceed = 0
    remaining = permutations
    while remaining > 0:
        batch = min(remaining, PERMUTATION_BATCH)
        shuffled = rng.permuted(np.tile(yc, (batch, 1)), axis=1)
        rhos = shuffled @ xc / norm
        # tolerance keeps exact ties with the observed statistic in the count
        exceed += int(np.count_nonzero(np.abs(rhos) >= abs(rho) - 1e-12))
        remaining -= batch

    return (1 + exceed) / (1 + permutations)


def spearman_rho(
    x: Sequence[float],
    y: Sequence[float],
    n_tests: int = 1,
    permutations: int = 0,
    seed: int = 0,
) -> CorrelationReport:
    """
    Spearman's rho with a two-sided p-value.

    The p-value uses the t approximation t = rho * sqrt((n-2) / (1-rho^2))
    against Student's t with n-2 degrees of freedom, or a seeded permutation
    test when permutations > 0.

    Args:
        x: Values
        y: Values of the same length (n >= 3)
        n_tests: Number of tests for the Bonferroni adjustment
        permutations: Number of permutation draws (0 for the t approximation)
        seed: Seed of the permutation draws

    Returns:
        CorrelationReport object
    """
    x, y = _as_pair(x, y, min_n=3)
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")

    rho = _centered_correlation(rx - rx.mean(), ry - ry.mean())
    if rho is None:
        raise ValidationError("zero rank variance")

    n = x.size
    if permutations > 0:
        p_raw = _permutation_p(rx, ry, rho, permutations, seed)
    elif abs(rho) >= 1.0:
        p_raw = 0.0
    else:
        t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
        p_raw = min(1.0, 2.0 * student_t_sf(abs(t), n - 2))

    return CorrelationReport(
        coefficient=rho,
        n=n,
        p_raw=p_raw,
        p_adjusted=bonferroni(p_raw, n_tests),
        n_tests=n_tests,
        method=Method.spearman,
    )


@njit(cache=True)
def _tau_a_counts(x, y):
    # Knight's algorithm: sort by x (ties broken by y), count discordant pairs
    # as merge-sort inversions in y, and correct for ties in x, y and (x, y)
    n = x.shape[0]

    order = np.argsort(y)
    x = x[order]
    y = y[order]
    order = np.argsort(x, kind="mergesort")
    x = x[order]
    y = y[order]

    same_x = 0
    same_xy = 0
    run_x = 1
    run_xy = 1
    for j in range(1, n):
        if x[j] == x[j - 1]:
            run_x += 1
            if y[j] == y[j - 1]:
                run_xy += 1
            else:
                same_xy += (run_xy * (run_xy - 1)) // 2
                run_xy = 1
        else:
            same_x += (run_x * (run_x - 1)) // 2
            run_x = 1
            same_xy += (run_xy * (run_xy - 1)) // 2
            run_xy = 1
    same_x += (run_x * (run_x - 1)) // 2
    same_xy += (run_xy * (run_xy - 1)) // 2

    discordant = 0
    holder = np.empty_like(y)
    chunk = 1
    while chunk < n:
        for start in range(0, n, 2 * chunk):
            left = start
            end_left = min(left + chunk, n)
            right = end_left
            end_right = min(right + chunk, n)

            index = left
            while left < end_left and right < end_right:
                if y[left] > y[right]:
                    holder[index] = y[right]
                    right += 1
                    # every remaining element of the left run is discordant with it
                    discordant += end_left - left
                else:
                    holder[index] = y[left]
                    left += 1
                index += 1
            while right < end_right:
                holder[index] = y[right]
                right += 1
                index += 1
            while left < end_left:
                holder[index] = y[left]
                left += 1
                index += 1

        y, holder = holder, y
        chunk *= 2

    same_y = 0
    run_y = 1
    for j in range(1, n):
        if y[j] == y[j - 1]:
            run_y += 1
        else:
            same_y += (run_y * (run_y - 1)) // 2
            run_y = 1
    same_y += (run_y * (run_y - 1)) // 2

    total = (n * (n - 1)) // 2
    # concordant - discordant
    numerator = total - same_x - same_y + same_xy - 2 * discordant
    return numerator, total


@njit(parallel=True, cache=True)
def _tau_a_rows(a, b, exclude_diagonal):
    n_rows = a.shape[0]
    out = np.empty(n_rows, dtype=np.float64)
    for i in prange(n_rows):
        if exclude_diagonal:
            x = np.concatenate((a[i, :i], a[i, i + 1 :]))
            y = np.concatenate((b[i, :i], b[i, i + 1 :]))
        else:
            x = a[i].copy()
            y = b[i].copy()
        numerator, total = _tau_a_counts(x, y)
        out[i] = numerator / total
    return out


def kendall_tau_a(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Kendall's tau-a, (C - D) / (n (n - 1) / 2). Tied pairs count toward
    neither C nor D but stay in the denominator.

    Args:
        x: Values
        y: Values of the same length (n >= 2)

    Returns:
        Coefficient in [-1, 1]
    """
    x, y = _as_pair(x, y, min_n=2)
    numerator, total = _tau_a_counts(x.copy(), y.copy())
    return numerator / total


def _row_pairs(a: np.ndarray, b: np.ndarray, min_cols: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValidationError(f"row matrices differ in shape: {a.shape} vs {b.shape}", kind="dimension_mismatch")
    if a.shape[1] < min_cols:
        raise ValidationError(f"rows need at least {min_cols} entries", kind="too_few_observations")
    return a, b


def kendall_tau_a_rows(a: np.ndarray, b: np.ndarray, exclude_diagonal: bool = False) -> np.ndarray:
    """
    Kendall's tau-a between corresponding rows of two square or rectangular matrices.

    Args:
        a: Matrix
        b: Matrix of the same shape
        exclude_diagonal: Drop entry (i, i) from row i before correlating

    Returns:
        One coefficient per row
    """
    a, b = _row_pairs(a, b, min_cols=3 if exclude_diagonal else 2)
    if exclude_diagonal and a.shape[0] > a.shape[1]:
        raise ValidationError("diagonal exclusion needs a square matrix", kind="dimension_mismatch")
    return _tau_a_rows(a, b, exclude_diagonal)


def spearman_rows(a: np.ndarray, b: np.ndarray, exclude_diagonal: bool = False) -> np.ndarray:
    """
    Spearman's rho between corresponding rows of two matrices.

    Args:
        a: Matrix
        b: Matrix of the same shape
        exclude_diagonal: Drop entry (i, i) from row i before correlating

    Returns:
        One coefficient per row
    """
    a, b = _row_pairs(a, b, min_cols=4 if exclude_diagonal else 3)
    if exclude_diagonal:
        if a.shape[0] != a.shape[1]:
            raise ValidationError("diagonal exclusion needs a square matrix", kind="dimension_mismatch")
        keep = ~np.eye(a.shape[0], dtype=bool)
        a = a[keep].reshape(a.shape[0], -1)
        b = b[keep].reshape(b.shape[0], -1)

    ra = rankdata(a, method="average", axis=1)
    rb = rankdata(b, method="average", axis=1)
    ra -= ra.mean(axis=1, keepdims=True)
    rb -= rb.mean(axis=1, keepdims=True)

    ss_a = np.einsum("ij,ij->i", ra, ra)
    ss_b = np.einsum("ij,ij->i", rb, rb)
    if (ss_a < ZERO_VARIANCE**2).any() or (ss_b < ZERO_VARIANCE**2).any():
        raise ValidationError("zero rank variance")

    return np.clip(np.einsum("ij,ij->i", ra, rb) / np.sqrt(ss_a * ss_b), -1.0, 1.0)


def _ssr(values: np.ndarray, design: np.ndarray) -> float:
    return float(sm.OLS(values, design).fit().ssr)


def anova_two_way(
    values: Sequence[float],
    factor_a: Sequence[object],
    factor_b: Sequence[object],
    names: tuple[str, str] = ("a", "b"),
) -> AnovaTable:
    """
    Two-way ANOVA with Type II sums of squares from least-squares model
    comparisons under effects (sum-to-zero) coding.

    The interaction is included only when every combination of observed
    levels has at least one observation.

    Args:
        values: Response values
        factor_a: Level of the first factor per observation
        factor_b: Level of the second factor per observation
        names: Term names of the two factors

    Returns:
        AnovaTable object
    """
    values = _as_vector(values)
    a = np.asarray([str(v) for v in factor_a])
    b = np.asarray([str(v) for v in factor_b])
    if not (values.size == a.size == b.size):
        raise ValidationError("values and factors differ in length", kind="dimension_mismatch")

    levels_a, levels_b = np.unique(a), np.unique(b)
    for name, levels in zip(names, (levels_a, levels_b)):
        if levels.size < 2:
            raise ValidationError(f"degenerate factor {name!r}: only one level", kind="degenerate_factor")

    cells = pd.crosstab(a, b)
    interaction = bool((cells.to_numpy() > 0).all())
    if not interaction:
        logger.warning(f"Empty {names[0]} x {names[1]} cells, interaction term dropped")

    df_a, df_b = levels_a.size - 1, levels_b.size - 1
    df_ab = df_a * df_b if interaction else 0
    df_res = values.size - 1 - df_a - df_b - df_ab
    if df_res <= 0:
        raise ValidationError(f"residual degrees of freedom {df_res} <= 0", kind="no_residual_df")

    data = pd.DataFrame({"a": a, "b": b})
    design = {
        formula: np.asarray(patsy.dmatrix(formula, data))
        for formula in ("C(a, Sum)", "C(b, Sum)", "C(a, Sum) + C(b, Sum)", "C(a, Sum) * C(b, Sum)")
    }

    ssr_a = _ssr(values, design["C(a, Sum)"])
    ssr_b = _ssr(values, design["C(b, Sum)"])
    ssr_ab = _ssr(values, design["C(a, Sum) + C(b, Sum)"])
    ssr_full = _ssr(values, design["C(a, Sum) * C(b, Sum)"]) if interaction else ssr_ab

    total_ss = float(np.sum((values - values.mean()) ** 2))
    if np.ptp(values) == 0:
        # constant response: nothing to explain
        ssr_a = ssr_b = ssr_ab = ssr_full = 0.0

    terms = [(names[0], ssr_b - ssr_ab, df_a), (names[1], ssr_a - ssr_ab, df_b)]
    if interaction:
        terms.append((f"{names[0]}:{names[1]}", ssr_ab - ssr_full, df_ab))

    ms_res = ssr_full / df_res
    undefined = ssr_full <= 1e-14 * total_ss
    if undefined:
        logger.warning("No residual variance, F statistics are undefined")

    rows = []
    for term, ss, df in terms:
        ss = max(ss, 0.0)
        ms = ss / df
        f = float("nan") if undefined else ms / ms_res
        rows.append(AnovaRow(term=term, ss=ss, df=df, ms=ms, f=f, p=f_sf(f, df, df_res)))

    residual = AnovaRow(term="residual", ss=ssr_full, df=df_res, ms=ms_res, f=float("nan"), p=float("nan"))
    return AnovaTable(
        terms=tuple(rows),
        residual=residual,
        total_ss=total_ss,
        model_ss=total_ss - ssr_full,
        interaction=interaction,
    )
