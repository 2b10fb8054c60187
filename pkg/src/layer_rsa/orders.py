import logging
from itertools import combinations
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from layer_rsa.errors import InputError, ValidationError
from layer_rsa.get_logger import get_logger
from layer_rsa.rankstats import (
    AnovaTable,
    anova_two_way,
    kendall_tau_a,
    kendall_tau_a_rows,
    spearman_rho,
    spearman_rows,
)
from layer_rsa.types import (
    CoefficientForm,
    ConditionSet,
    CorrelationReport,
    DisagreementVector,
    FeatureVector,
    LayerGroup,
    LayerId,
    LayerOrder,
    LayerPair,
    Method,
    RDM,
    RSM,
    Statistic,
    ThirdOrderReport,
)
from layer_rsa.utils import format_report_float, MATRIX_FLOAT_FORMAT

logger = get_logger("layer_rsa.orders", logging.INFO)

REPORT_COLUMNS = [
    "pair",
    "feature",
    "coefficient",
    "disagreement_coefficient",
    "n",
    "p_raw",
    "p_bonferroni",
    "n_tests",
    "method",
]

ADJACENT = "adjacent"
NON_ADJACENT = "non-adjacent"


class GroupSummary(NamedTuple):
    group: LayerGroup
    count: int
    mean: float
    std: float


class GroupAnova(NamedTuple):
    """
    Layer-group ANOVA with per-group summaries (population standard deviation).
    """

    table: AnovaTable
    summaries: tuple[GroupSummary, ...]
    n_excluded: int
    n_cross_model: int


class HeatmapGrid(NamedTuple):
    """
    Symmetric layer-by-layer grid of coefficients; the diagonal is NaN.
    """

    labels: tuple[str, ...]
    values: np.ndarray


def _check_same_conditions(a: ConditionSet, b: ConditionSet) -> None:
    if a != b:
        raise ValidationError("condition-set mismatch")


def rdm_pair(rdm_a: RDM, rdm_b: RDM) -> LayerPair:
    """
    Layer pair of two RDMs, taken from their layer labels.
    """
    return LayerPair.of(LayerId.parse(rdm_a.label), LayerId.parse(rdm_b.label))


def per_condition_agreement(
    rdm_a: RDM,
    rdm_b: RDM,
    statistic: Statistic = Statistic.kendall_a,
    include_self: bool = False,
    pair: LayerPair | None = None,
) -> DisagreementVector:
    """
    Second-order agreement per condition: the rank correlation between
    corresponding rows of two RDMs.

    Args:
        rdm_a: RDM of one layer
        rdm_b: RDM of the other layer, over the same conditions in the same order
        statistic: Row statistic
        include_self: Keep the zero self-dissimilarity cell in each row
        pair: Layer pair; taken from the RDM labels when omitted

    Returns:
        DisagreementVector object
    """
    _check_same_conditions(rdm_a.conditions, rdm_b.conditions)
    if rdm_a.n < 4:
        raise ValidationError(f"per-condition agreement needs N >= 4, got {rdm_a.n}", kind="too_few_conditions")

    pair = pair or rdm_pair(rdm_a, rdm_b)
    match Statistic(statistic):
        case Statistic.kendall_a:
            agreement = kendall_tau_a_rows(rdm_a.data, rdm_b.data, exclude_diagonal=not include_self)
        case Statistic.spearman:
            agreement = spearman_rows(rdm_a.data, rdm_b.data, exclude_diagonal=not include_self)

    return DisagreementVector(pair=pair, conditions=rdm_a.conditions, agreement=agreement, statistic=statistic)


def all_pairs_agreement(
    rdms: Sequence[RDM],
    statistic: Statistic = Statistic.kendall_a,
    include_self: bool = False,
) -> list[DisagreementVector]:
    """
    Per-condition agreement for every unordered pair of RDMs, in canonical pair order.

    Args:
        rdms: RDMs labeled with their layer ids
        statistic: Row statistic
        include_self: Keep the zero self-dissimilarity cells

    Returns:
        List of DisagreementVector objects
    """
    by_layer = {LayerId.parse(rdm.label): rdm for rdm in rdms}
    if len(by_layer) != len(rdms):
        raise ValidationError("duplicate layer among RDMs", kind="duplicate_layer")

    pairs = sorted(LayerPair.of(a, b) for a, b in combinations(by_layer, 2))
    return [
        per_condition_agreement(by_layer[p.first], by_layer[p.second], statistic, include_self, pair=p)
        for p in tqdm(pairs, desc="Layer pairs", disable=None)
    ]


def rsm(rdms: Sequence[RDM], statistic: Statistic = Statistic.kendall_a) -> RSM:
    """
    Compare whole RDMs by correlating their strict upper triangles.

    Args:
        rdms: At least two RDMs over a shared condition set
        statistic: Rank statistic

    Returns:
        RSM object with a unit diagonal
    """
    if len(rdms) < 2:
        raise ValidationError("RSM needs at least 2 RDMs", kind="too_few_rdms")
    for rdm in rdms[1:]:
        if rdm.conditions != rdms[0].conditions:
            raise ValidationError("mismatched condition sets", kind="condition_set_mismatch")

    triangles = [rdm.upper_triangle() for rdm in rdms]
    k = len(rdms)
    data = np.eye(k)
    for a, b in tqdm(list(combinations(range(k), 2)), desc="RSM cells", disable=None):
        match Statistic(statistic):
            case Statistic.kendall_a:
                value = kendall_tau_a(triangles[a], triangles[b])
            case Statistic.spearman:
                value = spearman_rho(triangles[a], triangles[b]).coefficient
        data[a, b] = data[b, a] = value

    labels = tuple(rdm.label or f"rdm{i}" for i, rdm in enumerate(rdms))
    return RSM(labels=labels, data=data, statistic=statistic)


def third_order(
    disagreement: DisagreementVector,
    feature: FeatureVector,
    n_tests: int = 1,
    permutations: int = 0,
    seed: int = 0,
) -> ThirdOrderReport:
    """
    Spearman correlation of a pair's per-condition agreement with a feature vector.

    The report coefficient is in agreement form; the disagreement form
    (1 - agreement) is its negation.

    Args:
        disagreement: Per-condition agreement of a layer pair
        feature: Feature vector over the same conditions
        n_tests: Number of tests for the Bonferroni adjustment
        permutations: Permutation draws for the p-value (0 for the t approximation)
        seed: Seed of the permutation draws

    Returns:
        ThirdOrderReport object
    """
    _check_same_conditions(disagreement.conditions, feature.conditions)
    report = spearman_rho(disagreement.agreement, feature.values, n_tests, permutations, seed)
    return ThirdOrderReport(predictor=disagreement.pair.label, target=feature.name, report=report)


def feature_correlation(
    predictor: FeatureVector,
    target: FeatureVector,
    n_tests: int = 1,
    permutations: int = 0,
    seed: int = 0,
) -> ThirdOrderReport:
    """
    Spearman correlation between two feature vectors, e.g. log frequency vs total fixation.

    Args:
        predictor: Feature vector
        target: Feature vector over the same conditions (any order)
        n_tests: Number of tests for the Bonferroni adjustment
        permutations: Permutation draws for the p-value
        seed: Seed of the permutation draws

    Returns:
        ThirdOrderReport object
    """
    target = target.aligned(predictor.conditions)
    report = spearman_rho(predictor.values, target.values, n_tests, permutations, seed)
    return ThirdOrderReport(predictor=predictor.name, target=target.name, report=report)


def top_pairs(reports: Sequence[ThirdOrderReport], k: int) -> list[ThirdOrderReport]:
    """
    The k reports with the largest absolute coefficient; ties keep label order.

    Args:
        reports: Third-order reports
        k: Number of reports to keep

    Returns:
        List of at most k reports, strongest first
    """
    if k < 1:
        raise ValidationError("top must be >= 1", kind="invalid_top")
    ranked = sorted(reports, key=lambda r: (-abs(r.report.coefficient), r.predictor, r.target))
    return ranked[:k]


def analysis_index(index: int, n_layers: int, layer_order: LayerOrder = LayerOrder.top_down) -> int:
    """
    Map a producer layer index to the analysis numbering, 1 = topmost.
    """
    if not 1 <= index <= n_layers:
        raise ValidationError(f"layer index {index} out of range 1..{n_layers}", kind="index_out_of_range")
    if LayerOrder(layer_order) == LayerOrder.bottom_up:
        return n_layers + 1 - index
    return index


def assign_layer_group(
    pair: LayerPair, n_layers: int = 24, layer_order: LayerOrder = LayerOrder.top_down
) -> LayerGroup:
    """
    Assign a same-model layer pair to a band group.

    Layers split into three equal bands (low, middle, high). A pair inside one
    band gets that band; otherwise it is out when the indices are at least a
    band width apart, and excluded when it straddles bands at a shorter distance.

    Args:
        pair: Same-model layer pair
        n_layers: Number of layers of the model (a multiple of 3)
        layer_order: Numbering of the pair's layer indices

    Returns:
        LayerGroup
    """
    if not pair.same_model:
        raise ValidationError(f"band groups need a same-model pair, got {pair.label}", kind="cross_model_pair")
    if n_layers < 3 or n_layers % 3:
        raise ValidationError(f"n_layers must be a positive multiple of 3, got {n_layers}", kind="invalid_n_layers")

    i = analysis_index(pair.first.index, n_layers, layer_order)
    j = analysis_index(pair.second.index, n_layers, layer_order)
    width = n_layers // 3

    band_i, band_j = (i - 1) // width, (j - 1) // width
    if band_i == band_j:
        return (LayerGroup.low, LayerGroup.middle, LayerGroup.high)[band_i]
    if abs(i - j) > width - 1:
        return LayerGroup.out
    return LayerGroup.excluded


def group_anova(
    correlations: Sequence[float],
    pairs: Sequence[LayerPair],
    n_layers: int = 24,
    layer_order: LayerOrder = LayerOrder.top_down,
) -> GroupAnova:
    """
    Two-way ANOVA of per-pair correlations with layer group and adjacency as factors.

    Cross-model and band-excluded pairs are dropped before the analysis.

    Args:
        correlations: One value per pair
        pairs: Layer pairs
        n_layers: Number of layers per model
        layer_order: Numbering of the layer indices

    Returns:
        GroupAnova object
    """
    values = np.asarray(correlations, dtype=np.float64)
    if values.shape != (len(pairs),):
        raise ValidationError("one correlation per pair required", kind="dimension_mismatch")

    n_cross_model = sum(not p.same_model for p in pairs)
    if n_cross_model:
        logger.warning(f"Dropped {n_cross_model} cross-model pairs from the group ANOVA")

    rows = [
        (value, assign_layer_group(pair, n_layers, layer_order), pair.adjacent)
        for value, pair in zip(values, pairs)
        if pair.same_model
    ]
    n_excluded = sum(group == LayerGroup.excluded for _, group, _ in rows)
    if n_excluded:
        logger.warning(f"Dropped {n_excluded} band-straddling pairs from the group ANOVA")

    frame = pd.DataFrame(
        [(value, str(group), ADJACENT if adjacent else NON_ADJACENT) for value, group, adjacent in rows],
        columns=["value", "group", "adjacency"],
    )
    frame = frame.loc[frame["group"] != LayerGroup.excluded]

    table = anova_two_way(frame["value"], frame["group"], frame["adjacency"], names=("group", "adjacency"))

    summaries = tuple(
        GroupSummary(
            group=LayerGroup(group),
            count=len(per_group),
            mean=float(per_group.mean()),
            std=float(np.std(per_group.to_numpy(), ddof=0)),
        )
        for group in (LayerGroup.low, LayerGroup.middle, LayerGroup.high, LayerGroup.out)
        if len(per_group := frame.loc[frame["group"] == group, "value"])
    )
    return GroupAnova(table=table, summaries=summaries, n_excluded=n_excluded, n_cross_model=n_cross_model)


def heatmap_grid(
    reports: Sequence[ThirdOrderReport],
    n_layers: int,
    form: CoefficientForm = CoefficientForm.disagreement,
    layer_order: LayerOrder = LayerOrder.top_down,
) -> HeatmapGrid:
    """
    Arrange per-pair coefficients in a symmetric layer-by-layer grid.

    Rows and columns run from the topmost layer down. A single-model grid is
    labeled by analysis index (1 = topmost); a multi-model grid keeps the
    producer ids, ordered top-down within each model.

    Args:
        reports: Exactly one report per unordered pair of n_layers layers
        n_layers: Number of layers in the grid
        form: Coefficient form placed in the cells
        layer_order: Numbering of the layer indices in the reports

    Returns:
        HeatmapGrid object
    """
    cells: dict[LayerPair, float] = {}
    for report in reports:
        pair = LayerPair.parse(report.predictor)
        if pair in cells:
            raise ValidationError(f"duplicate pair {pair.label}", kind="duplicate_pair")
        cells[pair] = report.coefficient(form)

    layers = sorted({layer for pair in cells for layer in pair})
    if len(layers) != n_layers:
        raise ValidationError(
            f"reports cover {len(layers)} layers, expected {n_layers}", kind="missing_pair"
        )

    single_model = len({layer.model for layer in layers}) == 1
    if single_model:
        layers.sort(key=lambda layer: analysis_index(layer.index, n_layers, layer_order))
    elif LayerOrder(layer_order) == LayerOrder.bottom_up:
        layers.sort(key=lambda layer: (layer.model, -layer.index))

    values = np.full((n_layers, n_layers), np.nan)
    for a, b in combinations(range(n_layers), 2):
        pair = LayerPair.of(layers[a], layers[b])
        if pair not in cells:
            raise ValidationError(f"missing pair {pair.label}")
        values[a, b] = values[b, a] = cells[pair]

    if single_model:
        labels = tuple(str(analysis_index(layer.index, n_layers, layer_order)) for layer in layers)
    else:
        labels = tuple(str(layer) for layer in layers)
    return HeatmapGrid(labels=labels, values=values)


def write_heatmap_grid(grid: HeatmapGrid, path: Path) -> None:
    """
    Write a grid as CSV with the layer labels as header row and column; diagonal cells stay empty.
    """
    frame = pd.DataFrame(grid.values, index=list(grid.labels), columns=list(grid.labels))
    frame.to_csv(
        path,
        index_label="layer",
        na_rep="",
        float_format=MATRIX_FLOAT_FORMAT,
        lineterminator="\n",
        encoding="utf-8",
    )


def read_heatmap_grid(path: Path) -> HeatmapGrid:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, index_col=0)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot read grid {path}: {e}", kind="grid_unreadable")

    try:
        values = frame.replace("", "nan").to_numpy().astype(np.float64)
    except ValueError as e:
        raise ValidationError(f"{path}: {e}", kind="invalid_grid")
    return HeatmapGrid(labels=tuple(frame.columns), values=values)


def write_rsm(matrix: RSM, path: Path) -> None:
    frame = pd.DataFrame(matrix.data, index=list(matrix.labels), columns=list(matrix.labels))
    frame.to_csv(
        path, index_label="rdm", float_format=MATRIX_FLOAT_FORMAT, lineterminator="\n", encoding="utf-8"
    )


def write_disagreement(vectors: Sequence[DisagreementVector], path: Path) -> None:
    """
    Write disagreement vectors as CSV.

    A single vector gives columns id,agreement,disagreement; several vectors
    are written in long format with a leading pair column.

    Args:
        vectors: DisagreementVector objects
        path: Output CSV file

    Returns:
        None
    """
    if not vectors:
        raise ValidationError("no disagreement vectors to write", kind="empty_output")

    frames = [
        pd.DataFrame(
            {
                "pair": vector.pair.label,
                "id": vector.conditions.ids,
                "agreement": vector.agreement,
                "disagreement": vector.disagreement,
            }
        )
        for vector in vectors
    ]
    frame = pd.concat(frames, ignore_index=True)
    if len(vectors) == 1:
        frame = frame.drop(columns="pair")

    frame.to_csv(path, index=False, float_format=MATRIX_FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")


def pair_from_stem(stem: str) -> LayerPair:
    """
    Layer pair from a file name like "bert_11-bert_12" or "bert:11-bert:12".
    """
    try:
        return LayerPair.parse(stem)
    except ValidationError:
        pass

    first, sep, second = stem.partition("-")
    while sep:
        a_model, _, a_index = first.rpartition("_")
        b_model, _, b_index = second.rpartition("_")
        if a_model and b_model and a_index.isdigit() and b_index.isdigit():
            return LayerPair.of(LayerId(a_model, int(a_index)), LayerId(b_model, int(b_index)))
        head, sep, second = second.partition("-")
        first = f"{first}-{head}"

    raise ValidationError(
        f"cannot infer layer pair from file name {stem!r}; write a long-format file instead",
        kind="unknown_pair",
    )


def read_disagreement(
    path: Path, statistic: Statistic = Statistic.kendall_a, pair: LayerPair | None = None
) -> list[DisagreementVector]:
    """
    Read a disagreement CSV in plain or long format.

    Args:
        path: CSV file written by write_disagreement
        statistic: Row statistic the file was computed with
        pair: Layer pair of a plain file; inferred from the file name when omitted

    Returns:
        List of DisagreementVector objects in file order
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot read disagreement file {path}: {e}", kind="disagreement_unreadable")

    if missing := {"id", "agreement"} - set(frame.columns):
        raise ValidationError(f"{path}: missing columns {', '.join(sorted(missing))}", kind="invalid_disagreement")

    if "pair" not in frame.columns:
        frame.insert(0, "pair", (pair or pair_from_stem(Path(path).stem)).label)

    vectors = []
    for label, group in frame.groupby("pair", sort=False):
        try:
            agreement = group["agreement"].to_numpy().astype(np.float64)
        except ValueError as e:
            raise ValidationError(f"{path}: {e}", kind="invalid_disagreement")
        vectors.append(
            DisagreementVector(
                pair=LayerPair.parse(label),
                conditions=ConditionSet(tuple(group["id"])),
                agreement=agreement,
                statistic=Statistic(statistic),
            )
        )
    return vectors


def reports_frame(reports: Sequence[ThirdOrderReport]) -> pd.DataFrame:
    """
    Reports as a table in report-file column order, numbers formatted to 6 significant digits.
    """
    rows = [
        {
            "pair": r.predictor,
            "feature": r.target,
            "coefficient": format_report_float(r.report.coefficient),
            "disagreement_coefficient": format_report_float(r.disagreement_coefficient),
            "n": r.report.n,
            "p_raw": format_report_float(r.report.p_raw),
            "p_bonferroni": format_report_float(r.report.p_adjusted),
            "n_tests": r.report.n_tests,
            "method": str(r.report.method),
        }
        for r in reports
    ]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def write_reports(reports: Sequence[ThirdOrderReport], path: Path) -> None:
    """
    Write third-order reports as a tab-separated table.
    """
    reports_frame(reports).to_csv(path, sep="\t", index=False, lineterminator="\n", encoding="utf-8")


def read_reports(path: Path) -> list[ThirdOrderReport]:
    """
    Read a report table written by write_reports.

    Args:
        path: TSV file

    Returns:
        List of ThirdOrderReport objects
    """
    try:
        frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot read report file {path}: {e}", kind="report_unreadable")

    if missing := [c for c in REPORT_COLUMNS if c not in frame.columns]:
        raise ValidationError(f"{path}: missing columns {', '.join(missing)}", kind="invalid_report")

    try:
        return [
            ThirdOrderReport(
                predictor=row["pair"],
                target=row["feature"],
                report=CorrelationReport(
                    coefficient=float(row["coefficient"]),
                    n=int(row["n"]),
                    p_raw=float(row["p_raw"]),
                    p_adjusted=float(row["p_bonferroni"]),
                    n_tests=int(row["n_tests"]),
                    method=Method(row["method"]),
                ),
            )
            for row in frame.to_dict(orient="records")
        ]
    except ValueError as e:
        raise ValidationError(f"{path}: {e}", kind="invalid_report")


def write_anova(result: GroupAnova, path: Path) -> None:
    """
    Write the ANOVA table followed by the group summaries, tab-separated.
    """
    table = result.table.to_frame()
    for column in ["ss", "ms", "f", "p"]:
        table[column] = table[column].map(format_report_float)

    summaries = pd.DataFrame(result.summaries, columns=GroupSummary._fields)
    summaries["group"] = summaries["group"].astype(str)
    for column in ["mean", "std"]:
        summaries[column] = summaries[column].map(format_report_float)

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        table.to_csv(fh, sep="\t", index=False, lineterminator="\n")
        fh.write("\n")
        summaries.to_csv(fh, sep="\t", index=False, lineterminator="\n")
