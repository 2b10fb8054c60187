import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from layer_rsa.errors import InputError, ValidationError
from layer_rsa.get_logger import get_logger
from layer_rsa.types import (
    ActivityMatrix,
    ConditionSet,
    FeatureVector,
    FixationMeasure,
    LayerId,
    SkipPolicy,
    TokenActivations,
    TokenFixationTable,
)
from layer_rsa.utils import MATRIX_FLOAT_FORMAT

logger = get_logger("layer_rsa.ingest", logging.INFO)

FIXATION_COLUMNS = ["id", "word_index", "word", "participant", "duration_ms", "measure"]


def mean_pool(tokens: TokenActivations) -> np.ndarray:
    """
    Mean-pool a sentence's token vectors into one activity pattern.

    Sums run along contiguous memory, so numpy applies pairwise summation.

    Args:
        tokens: Per-token activations (T x H)

    Returns:
        Length-H pattern
    """
    vectors = np.asarray(tokens.vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValidationError("empty sentence")
    if not np.isfinite(vectors).all():
        raise ValidationError("invalid activation")

    return np.ascontiguousarray(vectors.T).sum(axis=1) / vectors.shape[0]


def build_activity_matrix(
    records: Sequence[TokenActivations], conditions: ConditionSet
) -> ActivityMatrix:
    """
    Pool one layer's records into an activity matrix in condition-set order.

    Args:
        records: Exactly one record per condition, all from the same layer
        conditions: Condition order

    Returns:
        ActivityMatrix object
    """
    layers = {rec.layer for rec in records}
    if len(layers) != 1:
        raise ValidationError(
            f"expected records of one layer, got {len(layers)}", kind="mixed_layers"
        )
    layer = layers.pop()

    rows: list[np.ndarray | None] = [None] * conditions.n
    dim = None
    for rec in records:
        pos = conditions.positions.get(rec.condition_id)
        if pos is None:
            raise ValidationError(f"{layer}: unknown condition {rec.condition_id!r}", kind="unknown_condition")
        if rows[pos] is not None:
            raise ValidationError(f"duplicate condition {rec.condition_id!r} in {layer}", kind="duplicate_condition")

        pooled = mean_pool(rec)
        if dim is None:
            dim = pooled.size
        elif pooled.size != dim:
            raise ValidationError(
                f"dimension mismatch in {layer}: {rec.condition_id!r} has {pooled.size}, expected {dim}",
                kind="dimension_mismatch",
            )
        rows[pos] = pooled

    missing = [cid for cid, row in zip(conditions.ids, rows) if row is None]
    if missing:
        raise ValidationError(
            f"incomplete layer {layer}: missing {', '.join(missing[:10])}", kind="incomplete_layer"
        )

    return ActivityMatrix(conditions=conditions, layer=layer, data=np.vstack(rows))


def build_activity_matrices(
    records: Iterable[TokenActivations], conditions: ConditionSet
) -> dict[LayerId, ActivityMatrix]:
    """
    Group records by layer and build one activity matrix per layer.

    Args:
        records: Records of any number of layers
        conditions: Condition order

    Returns:
        Activity matrices keyed by layer, in layer order
    """
    by_layer: dict[LayerId, list[TokenActivations]] = defaultdict(list)
    for rec in records:
        by_layer[rec.layer].append(rec)

    return {
        layer: build_activity_matrix(by_layer[layer], conditions)
        for layer in tqdm(sorted(by_layer), desc="Pooling layers", disable=None)
    }


def aggregate_fixations(
    table: TokenFixationTable, skip_policy: SkipPolicy = SkipPolicy.zero
) -> float:
    """
    Sentence-level reading measure: average each word over participants, sum
    over words and divide by the number of words.

    Args:
        table: Word-by-participant durations (ms)
        skip_policy: zero counts unfixated words as 0 ms in the participant
            average; exclude averages only over participants who fixated the word

    Returns:
        Milliseconds per word
    """
    durations = np.asarray(table.durations, dtype=np.float64)
    if len(table.words) == 0:
        raise ValidationError("empty sentence")
    if durations.ndim != 2 or durations.shape[0] != len(table.words):
        raise ValidationError(
            f"{table.condition_id}: durations shape {durations.shape} does not match {len(table.words)} words",
            kind="dimension_mismatch",
        )
    if durations.shape[1] == 0:
        raise ValidationError(f"{table.condition_id}: no participants", kind="no_participants")
    if not np.isfinite(durations).all() or (durations < 0).any():
        raise ValidationError(f"{table.condition_id}: durations must be finite and >= 0", kind="invalid_duration")

    if SkipPolicy(skip_policy) == SkipPolicy.exclude:
        fixated = (durations > 0).sum(axis=1)
        totals = durations.sum(axis=1)
        word_means = np.divide(totals, fixated, out=np.zeros_like(totals), where=fixated > 0)
    else:
        word_means = durations.mean(axis=1)

    return float(word_means.sum() / len(table.words))


def build_feature_vector(
    tables: Sequence[TokenFixationTable],
    conditions: ConditionSet,
    skip_policy: SkipPolicy = SkipPolicy.zero,
) -> FeatureVector:
    """
    One aggregated reading measure per condition (V_totfix or V_firstpass).

    Args:
        tables: One fixation table per condition, all of the same measure
        conditions: Condition order
        skip_policy: Handling of unfixated words

    Returns:
        FeatureVector named after the measure
    """
    measures = {FixationMeasure(t.measure) for t in tables}
    if len(measures) > 1:
        raise ValidationError("mixed measure tags", kind="mixed_measures")
    if not measures:
        raise ValidationError("no fixation tables", kind="incomplete_feature")

    values = np.full(conditions.n, np.nan)
    seen = np.zeros(conditions.n, dtype=bool)
    for table in tables:
        pos = conditions.positions.get(table.condition_id)
        if pos is None:
            raise ValidationError(f"unknown condition {table.condition_id!r}", kind="unknown_condition")
        if seen[pos]:
            raise ValidationError(f"duplicate condition {table.condition_id!r}", kind="duplicate_condition")
        seen[pos] = True
        values[pos] = aggregate_fixations(table, skip_policy)

    if not seen.all():
        missing = np.asarray(conditions.ids)[~seen]
        raise ValidationError(f"missing condition {', '.join(missing[:10])}", kind="missing_condition")

    return FeatureVector(conditions=conditions, name=str(measures.pop()), values=values)


def layer_stem(layer: LayerId) -> str:
    """
    File-name stem for a layer, e.g. "bert_11".
    """
    return f"{layer.model}_{layer.index}"


def layer_from_stem(stem: str) -> LayerId:
    model, _, index = stem.rpartition("_")
    if not model or not index.isdigit():
        raise ValidationError(f"cannot infer layer from file name {stem!r}", kind="invalid_layer")
    return LayerId(model, int(index))


def load_activations(path: Path) -> list[TokenActivations]:
    """
    Load token activations from a JSON-lines file, one record per (condition, layer).

    Args:
        path: JSONL file with id, layer and vectors keys

    Returns:
        List of TokenActivations objects in file order
    """
    records = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as e:
                    raise InputError(f"{path}:{line_no}: invalid JSON: {e}", kind="activations_unreadable")

                try:
                    vectors = np.array(raw["vectors"], dtype=np.float64)
                    records.append(TokenActivations(str(raw["id"]), LayerId.parse(raw["layer"]), vectors))
                except KeyError as e:
                    raise ValidationError(f"{path}:{line_no}: missing key {e}", kind="invalid_record")
                except (TypeError, ValueError) as e:
                    if isinstance(e, ValidationError):
                        raise
                    raise ValidationError(f"{path}:{line_no}: invalid activation: {e}", kind="invalid_activation")
    except OSError as e:
        if isinstance(e, InputError):
            raise
        raise InputError(f"cannot read activations {path}: {e}", kind="activations_unreadable")

    logger.info(f"Loaded {len(records)} activation records from {path}")
    return records


def write_activations(records: Iterable[TokenActivations], path: Path) -> None:
    """
    Write token activations as JSON lines; floats keep their exact binary64 value.

    Args:
        records: TokenActivations objects
        path: Output JSONL file

    Returns:
        None
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            record = {
                "id": rec.condition_id,
                "layer": str(rec.layer),
                "vectors": np.asarray(rec.vectors, dtype=np.float64).tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def condition_order(records: Iterable[TokenActivations]) -> ConditionSet:
    """
    Conditions in order of first appearance.
    """
    return ConditionSet(tuple(dict.fromkeys(rec.condition_id for rec in records)))


def load_conditions(path: Path) -> ConditionSet:
    """
    Load a condition order file, one id per line.

    Args:
        path: Text file

    Returns:
        ConditionSet object
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InputError(f"cannot read conditions {path}: {e}", kind="conditions_unreadable")
    return ConditionSet(tuple(line.strip() for line in lines if line.strip()))


def write_pooled_matrix(matrix: ActivityMatrix, path: Path) -> None:
    """
    Write pooled patterns as CSV with header id,d0,...,d{H-1}.
    """
    frame = pd.DataFrame(
        matrix.data,
        index=pd.Index(matrix.conditions.ids, name="id"),
        columns=[f"d{h}" for h in range(matrix.dim)],
    )
    frame.to_csv(path, float_format=MATRIX_FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")


def read_pooled_matrix(path: Path, layer: LayerId | None = None) -> ActivityMatrix:
    """
    Read a pooled-matrix CSV.

    Args:
        path: CSV file written by write_pooled_matrix
        layer: Layer of the matrix; inferred from a "<model>_<index>" file name when omitted

    Returns:
        ActivityMatrix object
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot read pooled matrix {path}: {e}", kind="matrix_unreadable")

    if frame.columns[0] != "id":
        raise ValidationError(f"{path}: first column must be 'id'", kind="invalid_matrix")

    try:
        data = frame.iloc[:, 1:].to_numpy().astype(np.float64)
    except ValueError as e:
        raise ValidationError(f"{path}: invalid activation: {e}", kind="invalid_activation")

    return ActivityMatrix(
        conditions=ConditionSet(tuple(frame["id"])),
        layer=layer or layer_from_stem(Path(path).stem),
        data=data,
    )


def load_fixation_tables(
    path: Path, measure: FixationMeasure | None = None
) -> list[TokenFixationTable]:
    """
    Load word-level fixation records and build one table per (sentence, measure).

    Every participant seen in the file for a measure is a column of every
    table of that measure; missing (word, participant) cells are 0 ms and
    repeated rows for a cell are summed.

    Args:
        path: CSV with columns id,word_index,word,participant,duration_ms,measure
        measure: Keep only this measure

    Returns:
        List of TokenFixationTable objects, sentences in first-appearance order
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot read fixations {path}: {e}", kind="fixations_unreadable")

    if missing := [c for c in FIXATION_COLUMNS if c not in frame.columns]:
        raise ValidationError(f"{path}: missing columns {', '.join(missing)}", kind="invalid_fixations")

    try:
        frame["word_index"] = frame["word_index"].astype(int)
        frame["duration_ms"] = frame["duration_ms"].astype(np.float64)
        frame["measure"] = frame["measure"].map(FixationMeasure)
    except ValueError as e:
        raise ValidationError(f"{path}: {e}", kind="invalid_fixations")

    if measure is not None:
        frame = frame.loc[frame["measure"] == FixationMeasure(measure)]

    tables = []
    for tag, per_measure in frame.groupby("measure", sort=True):
        participants = sorted(per_measure["participant"].unique())
        for cid, sentence in per_measure.groupby("id", sort=False):
            words = sentence.drop_duplicates("word_index").sort_values("word_index")
            durations = sentence.pivot_table(
                index="word_index",
                columns="participant",
                values="duration_ms",
                aggfunc="sum",
                fill_value=0.0,
            ).reindex(index=words["word_index"], columns=participants, fill_value=0.0)

            tables.append(
                TokenFixationTable(
                    condition_id=str(cid),
                    words=tuple(words["word"]),
                    durations=durations.to_numpy(dtype=np.float64),
                    measure=FixationMeasure(tag),
                )
            )

    logger.info(f"Loaded {len(tables)} fixation tables from {path}")
    return tables


def write_feature_vector(feature: FeatureVector, path: Path) -> None:
    """
    Write a feature vector as CSV with columns id,value.
    """
    frame = pd.DataFrame({"id": feature.conditions.ids, "value": feature.values})
    frame.to_csv(path, index=False, float_format=MATRIX_FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")


def read_feature_vector(path: Path, name: str | None = None) -> FeatureVector:
    """
    Read a feature vector CSV.

    Args:
        path: CSV with columns id,value
        name: Feature name, defaults to the file stem

    Returns:
        FeatureVector object
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot read feature vector {path}: {e}", kind="feature_unreadable")

    if list(frame.columns[:2]) != ["id", "value"]:
        raise ValidationError(f"{path}: expected columns id,value", kind="invalid_feature")

    try:
        values = frame["value"].to_numpy().astype(np.float64)
    except ValueError as e:
        raise ValidationError(f"{path}: {e}", kind="invalid_feature")

    return FeatureVector(
        conditions=ConditionSet(tuple(frame["id"])),
        name=name or Path(path).stem,
        values=values,
    )
