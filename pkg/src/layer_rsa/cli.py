import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

from layer_rsa import __version__
from layer_rsa.config import RunConfig
from layer_rsa.errors import InputError, RSAError, ValidationError
from layer_rsa.get_logger import get_logger
from layer_rsa.ingest import (
    build_activity_matrices,
    build_feature_vector,
    condition_order,
    layer_stem,
    load_activations,
    load_conditions,
    load_fixation_tables,
    read_feature_vector,
    read_pooled_matrix,
    write_feature_vector,
    write_pooled_matrix,
)
from layer_rsa.lingfeat import FEATURE_KINDS, load_lexicon, load_sentences, load_trees, sentence_features, tree_features
from layer_rsa.orders import (
    all_pairs_agreement,
    feature_correlation,
    group_anova,
    heatmap_grid,
    read_disagreement,
    read_reports,
    reports_frame,
    rsm,
    third_order,
    top_pairs,
    write_anova,
    write_disagreement,
    write_heatmap_grid,
    write_reports,
    write_rsm,
)
from layer_rsa.rankstats import set_threads
from layer_rsa.rdm import build_rdm, estimate_covariance, read_rdm, write_rdm
from layer_rsa.synth import generate, generate_group_correlations, group_reports, SynthSpec, write_synth
from layer_rsa.types import (
    ActivityMatrix,
    CoefficientForm,
    ConditionSet,
    FixationMeasure,
    LayerId,
    LayerOrder,
    LayerPair,
    Measure,
    SkipPolicy,
    Statistic,
)
from layer_rsa.utils import file_sha256

logger = get_logger("layer_rsa.cli", logging.INFO)

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2


def _require_output(config: RunConfig) -> Path:
    if config.output is None:
        raise ValidationError(f"{config.command} needs --output", kind="missing_output")
    return config.output


def _conditions_for(config: RunConfig, fallback: ConditionSet) -> ConditionSet:
    return load_conditions(config.conditions) if config.conditions is not None else fallback


def _load_matrices(config: RunConfig, path: Path) -> dict[LayerId, ActivityMatrix]:
    """
    Activity matrices from an activation JSON-lines file or a pooled-matrix CSV.
    """
    layer = LayerId.parse(config.layer) if config.layer else None

    if path.suffix.lower() == ".csv":
        matrix = read_pooled_matrix(path, layer)
        if config.conditions is not None:
            conditions = load_conditions(config.conditions)
            if set(conditions.ids) != set(matrix.conditions.ids):
                raise ValidationError("condition-set mismatch")
            rows = [matrix.conditions.positions[cid] for cid in conditions.ids]
            matrix = ActivityMatrix(conditions, matrix.layer, matrix.data[rows])
        return {matrix.layer: matrix}

    records = load_activations(path)
    if layer is not None:
        records = [rec for rec in records if rec.layer == layer]
        if not records:
            raise ValidationError(f"no records for layer {layer} in {path}", kind="incomplete_layer")

    conditions = _conditions_for(config, condition_order(records))
    return build_activity_matrices(records, conditions)


def cmd_pool(config: RunConfig) -> list[Path]:
    """
    Write one pooled-matrix CSV per layer into the output directory.
    """
    output = _require_output(config)
    output.mkdir(parents=True, exist_ok=True)

    written = []
    for path in config.inputs:
        for layer, matrix in _load_matrices(config, path).items():
            target = output / f"{layer_stem(layer)}.csv"
            write_pooled_matrix(matrix, target)
            logger.info(f"Pooled {layer}: {matrix.conditions.n} x {matrix.dim} -> {target}")
            written.append(target)
    return written


def cmd_rdm(config: RunConfig) -> list[Path]:
    """
    Build first-order RDMs. A single layer is written to the output file; several
    layers are written to the output directory as <model>_<index>.csv.
    """
    output = _require_output(config)
    if len(config.inputs) != 1:
        raise ValidationError("rdm takes exactly one input file", kind="invalid_arguments")

    matrices = _load_matrices(config, config.inputs[0])
    if len(matrices) > 1:
        output.mkdir(parents=True, exist_ok=True)

    written = []
    for layer, matrix in matrices.items():
        cov = None
        if config.measure == Measure.mahalanobis:
            cov = estimate_covariance(matrix, ridge=config.ridge)

        rdm = build_rdm(matrix, config.measure, cov=cov, threads=config.threads)
        target = output / f"{layer_stem(layer)}.csv" if len(matrices) > 1 else output
        write_rdm(rdm, target)
        logger.info(f"RDM {layer} ({config.measure}): {rdm.n} x {rdm.n} -> {target}")
        written.append(target)
    return written


def cmd_rsm(config: RunConfig) -> list[Path]:
    output = _require_output(config)
    matrix = rsm([read_rdm(path, config.measure) for path in config.inputs], config.statistic)
    write_rsm(matrix, output)
    logger.info(f"RSM of {len(matrix.labels)} RDMs ({config.statistic}) -> {output}")
    if config.print_summary:
        print(json.dumps({"labels": list(matrix.labels), "rsm": matrix.data.tolist()}))
    return [output]


def cmd_disagree(config: RunConfig) -> list[Path]:
    """
    Per-condition agreement for every pair of the given RDMs.
    """
    output = _require_output(config)
    if len(config.inputs) < 2:
        raise ValidationError("disagree needs at least 2 RDMs", kind="too_few_rdms")

    rdms = [read_rdm(path, config.measure) for path in config.inputs]
    vectors = all_pairs_agreement(rdms, config.statistic, config.include_self)
    write_disagreement(vectors, output)
    logger.info(f"Disagreement of {len(vectors)} layer pairs ({config.statistic}) -> {output}")
    return [output]


def cmd_third(config: RunConfig) -> list[Path]:
    """
    Correlate disagreement vectors and feature predictors with a target feature.
    All rows of one invocation form one Bonferroni family.
    """
    output = _require_output(config)
    if config.feature is None:
        raise ValidationError("third needs --feature", kind="missing_feature")

    target = read_feature_vector(config.feature)
    vectors = [v for path in config.inputs for v in read_disagreement(path, config.statistic)]
    predictors = [read_feature_vector(path) for path in config.predictors]
    if not vectors and not predictors:
        raise ValidationError("third needs disagreement files or --predictors", kind="invalid_arguments")

    n_tests = config.n_tests or len(vectors) + len(predictors)
    kwargs = dict(n_tests=n_tests, permutations=config.permutations, seed=config.seed)
    reports = [third_order(v, target.aligned(v.conditions), **kwargs) for v in vectors]
    reports += [feature_correlation(p, target, **kwargs) for p in predictors]

    if config.top is not None:
        reports = top_pairs(reports, config.top)

    write_reports(reports, output)
    logger.info(f"{len(reports)} third-order reports against {target.name} (n_tests={n_tests}) -> {output}")
    if config.print_summary:
        print(reports_frame(reports).to_string(index=False))
    return [output]


def cmd_features(config: RunConfig) -> list[Path]:
    """
    Extract one feature vector: yngve, logfreq, senses or fixation.
    """
    output = _require_output(config)
    if len(config.inputs) != 1:
        raise ValidationError("features takes exactly one input file", kind="invalid_arguments")
    path = config.inputs[0]

    match config.feature_kind:
        case "fixation":
            tables = load_fixation_tables(path, config.fixation_measure)
            conditions = _conditions_for(config, ConditionSet(tuple(dict.fromkeys(t.condition_id for t in tables))))
            feature = build_feature_vector(tables, conditions, config.skip_policy)
        case "yngve":
            feature = tree_features(load_trees(path), "yngve", strip_punct=config.strip_punct)
        case "logfreq" | "senses":
            if config.lexicon is None:
                raise ValidationError(f"{config.feature_kind} needs --lexicon", kind="missing_lexicon")
            # every word has at least one sense
            lexicon = load_lexicon(config.lexicon, default=1.0 if config.feature_kind == "senses" else 0.0)
            if config.from_trees:
                feature = tree_features(load_trees(path), config.feature_kind, lexicon, config.strip_punct)
            else:
                feature = sentence_features(load_sentences(path), config.feature_kind, lexicon, config.strip_punct)
        case _:
            raise ValidationError(f"unknown feature kind {config.feature_kind!r}", kind="invalid_feature_kind")

    if config.conditions is not None and config.feature_kind != "fixation":
        feature = feature.aligned(load_conditions(config.conditions))

    write_feature_vector(feature, output)
    logger.info(f"Feature {feature.name}: {feature.conditions.n} conditions -> {output}")
    return [output]


def _pair_values(config: RunConfig) -> tuple[list[LayerPair], list[float], list]:
    reports, pairs = [], []
    for report in (r for path in config.inputs for r in read_reports(path)):
        try:
            pairs.append(LayerPair.parse(report.predictor))
        except ValidationError:
            # feature-feature rows written by third --predictors
            logger.info(f"Skipping non-pair row {report.predictor!r}")
            continue
        reports.append(report)

    if config.model is not None:
        keep = [i for i, p in enumerate(pairs) if p.first.model == config.model and p.same_model]
        reports = [reports[i] for i in keep]
        pairs = [pairs[i] for i in keep]
    return pairs, [r.coefficient(config.form) for r in reports], reports


def cmd_anova(config: RunConfig) -> list[Path]:
    """
    Layer-group x adjacency ANOVA over per-pair coefficients from report files.
    """
    output = _require_output(config)
    pairs, values, _ = _pair_values(config)

    result = group_anova(values, pairs, config.n_layers, config.layer_order)
    write_anova(result, output)

    group = result.table.term("group")
    logger.info(f"Group ANOVA: F({group.df}, {result.table.residual.df}) = {group.f:.4g}, p = {group.p:.3g} -> {output}")
    if config.print_summary:
        print(result.table.to_frame().to_string(index=False))
    return [output]


def cmd_synth(config: RunConfig) -> list[Path]:
    output = _require_output(config)

    match config.synth_kind:
        case "activations":
            spec = SynthSpec(
                seed=config.seed,
                n_conditions=config.n_conditions,
                dim=config.dim,
                n_layers=config.n_layers,
                noise_gain=config.noise_gain,
            )
            return write_synth(generate(spec), output)
        case "groups":
            correlations = generate_group_correlations(config.seed, config.n_layers, config.middle_shift)
            write_reports(group_reports(correlations, config.n_conditions), output)
            logger.info(f"{len(correlations)} synthetic group correlations -> {output}")
            return [output]
        case _:
            raise ValidationError(f"unknown synth kind {config.synth_kind!r}", kind="invalid_synth")


def cmd_heatmap(config: RunConfig) -> list[Path]:
    output = _require_output(config)
    _, _, reports = _pair_values(config)

    grid = heatmap_grid(reports, config.n_layers, config.form, config.layer_order)
    write_heatmap_grid(grid, output)
    logger.info(f"Heatmap grid {len(grid.labels)} x {len(grid.labels)} ({config.form}) -> {output}")
    return [output]


COMMANDS: dict[str, Callable[[RunConfig], list[Path]]] = {
    "pool": cmd_pool,
    "rdm": cmd_rdm,
    "rsm": cmd_rsm,
    "disagree": cmd_disagree,
    "third": cmd_third,
    "features": cmd_features,
    "anova": cmd_anova,
    "synth": cmd_synth,
    "heatmap": cmd_heatmap,
}


def build_parser() -> argparse.ArgumentParser:
    """
    Argument parser; options left out stay None so config-file values apply.
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with option values")
    common.add_argument("-o", "--output", type=Path, help="Output file or directory")
    common.add_argument("--threads", type=int, help="Worker threads (default: $RSA_THREADS or 1)")
    common.add_argument("--manifest", action="store_true", default=None, help="Write <output>.manifest.json")
    common.add_argument("--print", dest="print_summary", action="store_true", default=None, help="Print a summary to stdout")
    common.add_argument("--conditions", type=Path, help="Condition order file, one id per line")
    common.add_argument("--measure", "--metric", dest="measure", choices=[m.value for m in Measure])
    common.add_argument("--statistic", choices=[s.value for s in Statistic])
    common.add_argument("--seed", type=int)

    parser = argparse.ArgumentParser(
        prog="layer_rsa",
        description="Representational similarity analysis of layer disagreement in language models.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    pool = sub.add_parser("pool", parents=[common], help="Mean-pool token activations per layer")
    pool.add_argument("inputs", nargs="+", type=Path)
    pool.add_argument("--layer", help="Only this layer, e.g. bert:11")

    rdm = sub.add_parser("rdm", parents=[common], help="Build first-order RDMs")
    rdm.add_argument("inputs", nargs=1, type=Path)
    rdm.add_argument("--layer", help="Only this layer, e.g. bert:11")
    rdm.add_argument("--ridge", type=float, help="Covariance ridge for the Mahalanobis distance (default 0)")

    rsm_parser = sub.add_parser("rsm", parents=[common], help="Correlate whole RDMs")
    rsm_parser.add_argument("inputs", nargs="+", type=Path)

    disagree = sub.add_parser("disagree", parents=[common], help="Per-condition agreement of layer pairs")
    disagree.add_argument("inputs", nargs="+", type=Path)
    disagree.add_argument("--include-self", action="store_true", default=None)

    third = sub.add_parser("third", parents=[common], help="Correlate disagreement with a feature")
    third.add_argument("inputs", nargs="*", type=Path)
    third.add_argument("--feature", type=Path, required=False, help="Target feature vector CSV")
    third.add_argument("--predictors", nargs="+", type=Path, help="Feature vectors used as predictors")
    third.add_argument("--n-tests", type=int, help="Bonferroni family size (default: number of rows)")
    third.add_argument("--top", type=int, help="Keep the strongest K rows")
    third.add_argument("--permutations", type=int, help="Permutation p-values with this many draws")

    features = sub.add_parser("features", parents=[common], help="Extract a feature vector")
    features.add_argument("feature_kind", choices=[*FEATURE_KINDS, "fixation"])
    features.add_argument("inputs", nargs=1, type=Path)
    features.add_argument("--lexicon", type=Path, help="TSV word<TAB>value")
    features.add_argument("--from-trees", action="store_true", default=None, help="Take words from a tree file")
    features.add_argument("--strip-punct", action="store_true", default=None)
    features.add_argument("--fixation-measure", choices=[m.value for m in FixationMeasure])
    features.add_argument("--skip-policy", choices=[p.value for p in SkipPolicy])

    for name, help_text in [("anova", "Layer-group ANOVA"), ("heatmap", "Layer-by-layer grid")]:
        group_parser = sub.add_parser(name, parents=[common], help=help_text)
        group_parser.add_argument("inputs", nargs="+", type=Path)
        group_parser.add_argument("--n-layers", type=int)
        group_parser.add_argument("--layer-order", choices=[o.value for o in LayerOrder])
        group_parser.add_argument("--form", choices=[f.value for f in CoefficientForm])
        group_parser.add_argument("--model", help="Only pairs of this model")

    synth = sub.add_parser("synth", parents=[common], help="Generate synthetic data")
    synth.add_argument("--kind", dest="synth_kind", choices=["activations", "groups"])
    synth.add_argument("--n-conditions", type=int)
    synth.add_argument("--dim", type=int)
    synth.add_argument("--n-layers", type=int)
    synth.add_argument("--noise-gain", type=float)
    synth.add_argument("--middle-shift", type=float)

    return parser


def write_manifest(config: RunConfig, outputs: Sequence[Path]) -> Path:
    """
    Write provenance next to the output: input digests, resolved configuration and version.

    Args:
        config: Resolved configuration
        outputs: Files written by the command

    Returns:
        Path of the manifest file
    """
    inputs = [*config.inputs, *config.predictors]
    inputs += [p for p in (config.feature, config.conditions, config.lexicon) if p is not None]

    manifest = {
        "tool": "layer_rsa",
        "version": __version__,
        "command": config.command,
        "config": config.to_record(),
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    path = Path(f"{config.output}.manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def run(config: RunConfig) -> list[Path]:
    """
    Run one command with a resolved configuration.

    Args:
        config: RunConfig object

    Returns:
        Paths of the written files
    """
    logger.info(f"layer_rsa {__version__} {config.command} (threads={config.threads})")
    set_threads(config.threads)

    outputs = COMMANDS[config.command](config)
    if config.manifest:
        outputs.append(write_manifest(config, outputs))
    return outputs


def main(argv: Sequence[str] | None = None) -> int:
    """
    Command-line entry point.

    Args:
        argv: Arguments without the program name

    Returns:
        Exit code: 0 on success, 1 on I/O errors, 2 on validation errors
    """
    args = vars(build_parser().parse_args(argv))
    config_file = args.pop("config", None)

    try:
        config = RunConfig.from_sources(args, config_file)
        run(config)
    except RSAError as e:
        print(json.dumps(e.to_record()), file=sys.stderr)
        return EXIT_VALIDATION if isinstance(e, ValidationError) else EXIT_IO
    except OSError as e:
        error = InputError(str(e), kind="io_error")
        print(json.dumps(error.to_record()), file=sys.stderr)
        return EXIT_IO

    return EXIT_OK
