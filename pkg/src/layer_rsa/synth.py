import logging
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import NamedTuple

import numpy as np

from layer_rsa.errors import ValidationError
from layer_rsa.get_logger import get_logger
from layer_rsa.ingest import write_activations, write_feature_vector
from layer_rsa.orders import assign_layer_group
from layer_rsa.types import (
    ActivityMatrix,
    ConditionSet,
    CorrelationReport,
    FeatureVector,
    LayerGroup,
    LayerId,
    LayerPair,
    Method,
    ThirdOrderReport,
    TokenActivations,
)

logger = get_logger("layer_rsa.synth", logging.INFO)

SYNTH_MODEL = "synth"
ACTIVATIONS_FILE = "activations.jsonl"
DIFFICULTY_FILE = "difficulty.csv"

# group correlations before the middle-band shift
GROUP_BASE = 0.7


def stream_generator(seed: int, stream: int) -> np.random.Generator:
    """
    Counter-based generator for one independent stream.

    Philox4x64-10 keyed by the seed, with the 256-bit counter starting at the
    words [0, 0, stream, 0] (least significant first), so every (seed, stream)
    is reproducible on its own.

    Args:
        seed: 64-bit seed
        stream: Stream id

    Returns:
        numpy Generator
    """
    counter = np.array([0, 0, stream, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=seed, counter=counter))


def stream_normals(seed: int, stream: int, size: int) -> np.ndarray:
    """
    Standard normal draws of one stream with the Box-Muller transform.

    The raw 64-bit outputs w_0, w_1, ... of the stream map to uniforms
    u_k = ((w_k >> 11) + 0.5) * 2**-53 in (0, 1). Each pair (u_2i, u_2i+1) gives
    z_2i = r * cos(2 pi u_2i+1) and z_2i+1 = r * sin(2 pi u_2i+1) with
    r = sqrt(-2 ln u_2i). The first size values are returned.

    Args:
        seed: 64-bit seed
        stream: Stream id
        size: Number of draws

    Returns:
        Array of standard normal values
    """
    n_pairs = (size + 1) // 2
    raw = stream_generator(seed, stream).bit_generator.random_raw(2 * n_pairs)
    uniforms = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    radius = np.sqrt(-2.0 * np.log(uniforms[0::2]))
    angle = 2.0 * np.pi * uniforms[1::2]
    normals = np.empty(2 * n_pairs)
    normals[0::2] = radius * np.cos(angle)
    normals[1::2] = radius * np.sin(angle)
    return normals[:size]


@dataclass(frozen=True)
class SynthSpec:
    """
    Synthetic dataset with planted difficulty.

    Layer l of condition s is b_s + noise_gain * difficulty[s] * drift[l] * eps_{s,l},
    with b_s and eps_{s,l} standard normal vectors.
    """

    seed: int = 0
    n_conditions: int = 256
    dim: int = 32
    n_layers: int = 4
    noise_gain: float = 1.0
    # defaults: evenly spaced in [0, 1]
    difficulty: tuple[float, ...] | None = None
    drift_profile: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer", kind="invalid_synth")
        if self.n_conditions < 8:
            raise ValidationError("synthetic data needs N >= 8", kind="invalid_synth")
        if self.dim < 4:
            raise ValidationError("synthetic data needs H >= 4", kind="invalid_synth")
        if self.n_layers < 2:
            raise ValidationError("synthetic data needs at least 2 layers", kind="invalid_synth")
        if self.noise_gain < 0:
            raise ValidationError("noise_gain must be >= 0", kind="invalid_synth")

        difficulty = self.difficulty_values
        if difficulty.shape != (self.n_conditions,) or (difficulty < 0).any() or (difficulty > 1).any():
            raise ValidationError("difficulty must hold N values in [0, 1]", kind="invalid_synth")
        if self.drift_values.shape != (self.n_layers,):
            raise ValidationError("drift profile must hold one value per layer", kind="invalid_synth")

    @property
    def difficulty_values(self) -> np.ndarray:
        if self.difficulty is None:
            return np.linspace(0.0, 1.0, self.n_conditions)
        return np.asarray(self.difficulty, dtype=np.float64)

    @property
    def drift_values(self) -> np.ndarray:
        if self.drift_profile is None:
            return np.linspace(0.0, 1.0, self.n_layers)
        return np.asarray(self.drift_profile, dtype=np.float64)

    @property
    def conditions(self) -> ConditionSet:
        width = max(4, len(str(self.n_conditions)))
        return ConditionSet(tuple(f"s{i:0{width}d}" for i in range(1, self.n_conditions + 1)))

    @property
    def layers(self) -> list[LayerId]:
        return [LayerId(SYNTH_MODEL, idx) for idx in range(1, self.n_layers + 1)]


class SynthData(NamedTuple):
    matrices: dict[LayerId, ActivityMatrix]
    difficulty: FeatureVector


def generate(spec: SynthSpec) -> SynthData:
    """
    Generate per-layer activity matrices with planted difficulty.

    Args:
        spec: SynthSpec object

    Returns:
        SynthData object
    """
    n, dim, n_layers = spec.n_conditions, spec.dim, spec.n_layers
    difficulty = spec.difficulty_values
    drift = spec.drift_values

    data = np.empty((n_layers, n, dim))
    for s in range(n):
        stream = s * (n_layers + 1)
        base = stream_normals(spec.seed, stream, dim)
        for layer in range(n_layers):
            eps = stream_normals(spec.seed, stream + 1 + layer, dim)
            data[layer, s] = base + spec.noise_gain * difficulty[s] * drift[layer] * eps

    conditions = spec.conditions
    matrices = {
        layer_id: ActivityMatrix(conditions=conditions, layer=layer_id, data=data[layer])
        for layer, layer_id in enumerate(spec.layers)
    }
    logger.info(f"Generated {n_layers} layers of {n} x {dim} synthetic patterns (seed {spec.seed})")
    return SynthData(matrices=matrices, difficulty=FeatureVector(conditions, "difficulty", difficulty))


def to_activations(data: SynthData) -> list[TokenActivations]:
    """
    Single-token activation records, so that mean pooling returns the patterns unchanged.
    """
    return [
        TokenActivations(condition_id=cid, layer=layer, vectors=matrix.data[pos : pos + 1])
        for layer, matrix in data.matrices.items()
        for pos, cid in enumerate(matrix.conditions.ids)
    ]


def write_synth(data: SynthData, output_dir: Path) -> list[Path]:
    """
    Write the activation JSON-lines file and the difficulty feature CSV.

    Args:
        data: SynthData object
        output_dir: Output directory (created if missing)

    Returns:
        Paths of the written files
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    activations = output_dir / ACTIVATIONS_FILE
    difficulty = output_dir / DIFFICULTY_FILE
    write_activations(to_activations(data), activations)
    write_feature_vector(data.difficulty, difficulty)
    return [activations, difficulty]


def generate_group_correlations(
    seed: int = 0,
    n_layers: int = 24,
    middle_shift: float = 0.2,
    noise: float = 0.05,
) -> list[tuple[LayerPair, float]]:
    """
    One synthetic correlation per same-model layer pair, with the middle band shifted.

    Args:
        seed: 64-bit seed
        n_layers: Number of layers (a multiple of 3)
        middle_shift: Offset added to middle-band pairs
        noise: Standard deviation of the per-pair noise

    Returns:
        List of (pair, correlation) tuples in canonical pair order
    """
    if noise < 0:
        raise ValidationError("noise must be >= 0", kind="invalid_synth")

    layers = [LayerId(SYNTH_MODEL, idx) for idx in range(1, n_layers + 1)]
    correlations = []
    for stream, (a, b) in enumerate(combinations(layers, 2)):
        pair = LayerPair.of(a, b)
        shift = middle_shift if assign_layer_group(pair, n_layers) == LayerGroup.middle else 0.0
        value = GROUP_BASE + shift + noise * stream_normals(seed, stream, 1)[0]
        correlations.append((pair, float(value)))
    return correlations


def group_reports(
    correlations: list[tuple[LayerPair, float]], n_conditions: int, target: str = "synthetic"
) -> list[ThirdOrderReport]:
    """
    Wrap group correlations as reports whose disagreement-form coefficient is the correlation.
    """
    nan = float("nan")
    return [
        ThirdOrderReport(
            predictor=pair.label,
            target=target,
            report=CorrelationReport(
                coefficient=-value, n=n_conditions, p_raw=nan, p_adjusted=nan, n_tests=1, method=Method.spearman
            ),
        )
        for pair, value in correlations
    ]
