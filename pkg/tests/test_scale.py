import time

import pytest

from layer_rsa.orders import all_pairs_agreement, third_order
from layer_rsa.rdm import build_rdm
from layer_rsa.synth import generate, SynthSpec
from layer_rsa.types import Measure


@pytest.mark.slow
def test_full_size_pipeline():
    """RDMs, disagreement and third-order reports at N=2368, H=1024, 3 layers."""
    start = time.perf_counter()
    data = generate(SynthSpec(seed=0, n_conditions=2368, dim=1024, n_layers=3))
    rdms = [build_rdm(matrix, Measure.correlation, threads=4) for matrix in data.matrices.values()]
    vectors = all_pairs_agreement(rdms)
    reports = [third_order(v, data.difficulty, n_tests=len(vectors)) for v in vectors]
    elapsed = time.perf_counter() - start

    assert len(reports) == 3
    assert reports[1].report.coefficient < 0
    assert elapsed < 300
