import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from layer_rsa.errors import InputError, ValidationError
from layer_rsa.types import (
    CoefficientForm,
    FixationMeasure,
    LayerOrder,
    Measure,
    SkipPolicy,
    Statistic,
)

THREADS_ENV = "RSA_THREADS"

# library default for the Mahalanobis ridge; the CLI default is 0 (opt-in)
DEFAULT_RIDGE = 1e-3


def get_default_threads() -> int:
    """
    Get the worker count from the environment, falling back to 1.

    Returns:
        Number of worker threads
    """
    value = os.environ.get(THREADS_ENV, "").strip()
    if not value:
        return 1
    try:
        threads = int(value)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {value!r}", kind="invalid_config")
    if threads < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1", kind="invalid_config")
    return threads


# option name -> type used to coerce values coming from a JSON config file
_ENUM_FIELDS = {
    "measure": Measure,
    "statistic": Statistic,
    "skip_policy": SkipPolicy,
    "layer_order": LayerOrder,
    "fixation_measure": FixationMeasure,
    "form": CoefficientForm,
}
_PATH_FIELDS = {"output", "conditions", "lexicon", "feature"}
_PATH_LIST_FIELDS = {"inputs", "predictors"}


@dataclass(frozen=True)
class RunConfig:
    command: str = ""
    inputs: tuple[Path, ...] = ()
    output: Path | None = None
    measure: Measure = Measure.correlation
    statistic: Statistic = Statistic.kendall_a
    n_tests: int | None = None
    skip_policy: SkipPolicy = SkipPolicy.zero
    layer_order: LayerOrder = LayerOrder.top_down
    seed: int = 0
    ridge: float = 0.0
    threads: int = field(default_factory=get_default_threads)
    include_self: bool = False
    strip_punct: bool = False
    manifest: bool = False
    print_summary: bool = False
    # command-specific options
    layer: str | None = None
    conditions: Path | None = None
    feature_kind: str | None = None
    fixation_measure: FixationMeasure = FixationMeasure.total_fixation
    lexicon: Path | None = None
    from_trees: bool = False
    feature: Path | None = None
    predictors: tuple[Path, ...] = ()
    top: int | None = None
    n_layers: int = 24
    form: CoefficientForm = CoefficientForm.disagreement
    model: str | None = None
    permutations: int = 0
    synth_kind: str = "activations"
    n_conditions: int = 256
    dim: int = 32
    noise_gain: float = 1.0
    middle_shift: float = 0.2

    def __post_init__(self):
        if self.threads < 1:
            raise ValidationError("threads must be >= 1", kind="invalid_config")
        if self.n_tests is not None and self.n_tests < 1:
            raise ValidationError("n_tests must be >= 1", kind="invalid_config")
        if self.ridge < 0:
            raise ValidationError("ridge must be >= 0", kind="invalid_config")

    @classmethod
    def from_sources(
        cls, flags: dict[str, object], config_file: Path | None = None
    ) -> "RunConfig":
        """
        Merge dataclass defaults, a JSON config file and command-line flags.

        Flags win over the config file; flags that were not given must be None.

        Args:
            flags: Option values parsed from the command line
            config_file: Optional JSON file with option values

        Returns:
            RunConfig object
        """
        names = {f.name for f in fields(cls)}
        values: dict[str, object] = {}

        if config_file is not None:
            values.update(cls._read_config_file(config_file, names))

        # the environment overrides the config file, flags override both
        if os.environ.get(THREADS_ENV, "").strip():
            values["threads"] = get_default_threads()

        values.update({k: v for k, v in flags.items() if k in names and v is not None})
        return cls(**cls._coerce(values))

    @staticmethod
    def _read_config_file(path: Path, names: set[str]) -> dict[str, object]:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise InputError(f"cannot read config file {path}: {e}", kind="config_unreadable")
        except json.JSONDecodeError as e:
            raise InputError(f"config file {path} is not valid JSON: {e}", kind="config_unreadable")

        if not isinstance(raw, dict):
            raise ValidationError("config file must contain a JSON object", kind="invalid_config")

        # config files may use dashes like the flags do
        raw = {k.replace("-", "_"): v for k, v in raw.items()}
        if unknown := sorted(set(raw) - names):
            raise ValidationError(f"unknown config options: {', '.join(unknown)}", kind="invalid_config")
        return raw

    @staticmethod
    def _coerce(values: dict[str, object]) -> dict[str, object]:
        try:
            for name, enum in _ENUM_FIELDS.items():
                if name in values:
                    values[name] = enum(values[name])
        except ValueError as e:
            raise ValidationError(str(e), kind="invalid_config")

        for name in _PATH_FIELDS & values.keys():
            values[name] = Path(values[name])
        for name in _PATH_LIST_FIELDS & values.keys():
            values[name] = tuple(Path(p) for p in values[name])
        return values

    def to_record(self) -> dict[str, object]:
        """
        JSON-serializable view of the configuration.

        Returns:
            Dictionary of option values
        """
        record = asdict(self)
        for key, value in record.items():
            if isinstance(value, Path):
                record[key] = str(value)
            elif isinstance(value, tuple):
                record[key] = [str(v) for v in value]
        return record
