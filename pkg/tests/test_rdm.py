import numpy as np
import pytest

from conftest import make_conditions, pearson_oracle
from layer_rsa.errors import ValidationError
from layer_rsa.rdm import (
    build_rdm,
    correlation_distance,
    CovarianceEstimate,
    estimate_covariance,
    euclidean_distance,
    get_measure,
    mahalanobis_distance,
    read_rdm,
    write_rdm,
)
from layer_rsa.types import ActivityMatrix, LayerId, Measure, RDM


def _matrix(data, layer=LayerId("bert", 1)) -> ActivityMatrix:
    data = np.asarray(data, dtype=float)
    return ActivityMatrix(make_conditions(data.shape[0]), layer, data)


class TestDistances:
    def test_correlation_distance_examples(self):
        assert correlation_distance([1, 2, 3], [2, 4, 6]) == pytest.approx(0.0, abs=1e-15)
        assert correlation_distance([1, 2, 3], [3, 2, 1]) == pytest.approx(2.0, abs=1e-15)

    def test_near_identical_patterns(self):
        expected = 1.0 - pearson_oracle([1, 2, 3], [1, 2, 4])
        assert correlation_distance([1, 2, 3], [1, 2, 4]) == pytest.approx(expected, abs=1e-12)
        assert correlation_distance([1, 2, 3], [1, 2, 4]) == pytest.approx(0.0180, abs=1e-4)

    def test_correlation_affine_invariance(self, rng):
        for _ in range(50):
            a, b = rng.normal(size=10), rng.normal(size=10)
            alpha, beta = rng.uniform(0.1, 10.0), rng.normal(scale=5.0)
            d = correlation_distance(a, b)
            assert correlation_distance(alpha * a + beta, b) == pytest.approx(d, abs=1e-10)
            assert correlation_distance(-alpha * a + beta, b) == pytest.approx(2.0 - d, abs=1e-10)

    def test_constant_pattern_falls_back(self):
        assert correlation_distance([1, 1, 1], [1, 2, 3]) == 1.0

    def test_euclidean_distance(self):
        assert euclidean_distance([0, 0], [3, 4]) == 5.0

    def test_length_mismatch(self):
        with pytest.raises(ValidationError, match="pattern lengths differ"):
            euclidean_distance([1, 2], [1, 2, 3])

    def test_mahalanobis_scaled_axis(self):
        cov = CovarianceEstimate(np.diag([4.0, 1.0, 1.0]), ridge=0.0)
        assert mahalanobis_distance([3.0, 1.0, 1.0], [1.0, 1.0, 1.0], cov) == pytest.approx(1.0, abs=1e-15)

    def test_mahalanobis_identity_equals_euclidean(self, rng):
        cov = CovarianceEstimate(np.eye(6), ridge=0.0)
        for _ in range(20):
            a, b = rng.normal(size=6), rng.normal(size=6)
            assert mahalanobis_distance(a, b, cov) == pytest.approx(euclidean_distance(a, b), abs=1e-10)


class TestBuildRdm:
    """Structure of first-order RDMs."""

    def test_random_matrices(self, rng):
        for _ in range(100):
            n, dim = int(rng.integers(2, 30)), int(rng.integers(2, 12))
            matrix = _matrix(rng.normal(size=(n, dim)))
            for measure in (Measure.correlation, Measure.euclidean):
                rdm = build_rdm(matrix, measure)
                assert np.array_equal(rdm.data, rdm.data.T)
                assert (np.diag(rdm.data) == 0).all()
                if measure == Measure.correlation:
                    assert ((rdm.data >= 0) & (rdm.data <= 2)).all()

    @pytest.mark.parametrize("measure", list(Measure))
    def test_blocks_match_pairwise(self, rng, measure):
        matrix = _matrix(rng.normal(size=(12, 5)))
        cov = estimate_covariance(matrix) if measure == Measure.mahalanobis else None
        rdm = build_rdm(matrix, measure, cov=cov)
        pairwise = get_measure(measure, cov)
        for i in range(12):
            for j in range(i + 1, 12):
                expected = pairwise.distance(matrix.data[i], matrix.data[j])
                assert rdm.data[i, j] == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("measure", [Measure.correlation, Measure.euclidean])
    def test_column_permutation_invariance(self, rng, measure):
        data = rng.normal(size=(20, 9))
        permuted = data[:, rng.permutation(9)]
        np.testing.assert_allclose(
            build_rdm(_matrix(permuted), measure).data, build_rdm(_matrix(data), measure).data, atol=1e-12
        )

    def test_mahalanobis_identity_equals_euclidean(self, rng):
        matrix = _matrix(rng.normal(size=(15, 4)))
        cov = CovarianceEstimate(np.eye(4), ridge=0.0)
        mahalanobis = build_rdm(matrix, Measure.mahalanobis, cov=cov)
        euclidean = build_rdm(matrix, Measure.euclidean)
        np.testing.assert_allclose(mahalanobis.data, euclidean.data, atol=1e-10)

    def test_three_conditions(self):
        rdm = build_rdm(_matrix([[0, 0], [3, 4], [6, 8]]), Measure.euclidean)
        np.testing.assert_allclose(rdm.data, [[0, 5, 10], [5, 0, 5], [10, 5, 0]])
        assert rdm.label == "bert:1"

    def test_constant_rows_recorded(self):
        rdm = build_rdm(_matrix([[1, 1, 1], [1, 2, 3], [3, 1, 2]]), Measure.correlation)
        assert rdm.constant_rows == ("c000",)
        assert rdm.data[0, 1] == 1.0 and rdm.data[0, 2] == 1.0

    def test_correlation_needs_two_dimensions(self):
        with pytest.raises(ValidationError):
            build_rdm(_matrix([[1.0], [2.0], [3.0]]), Measure.correlation)

    def test_mahalanobis_needs_covariance(self, rng):
        with pytest.raises(ValidationError, match="covariance"):
            build_rdm(_matrix(rng.normal(size=(5, 3))), Measure.mahalanobis)

    def test_thread_count_does_not_change_output(self, rng):
        matrix = _matrix(rng.normal(size=(600, 8)))
        for measure in (Measure.correlation, Measure.euclidean):
            single = build_rdm(matrix, measure, threads=1)
            multi = build_rdm(matrix, measure, threads=4)
            assert np.array_equal(single.data, multi.data)


class TestCovariance:
    def test_rank_deficient_without_ridge(self, rng):
        matrix = _matrix(rng.normal(size=(4, 10)))
        cov = estimate_covariance(matrix, ridge=0.0)
        with pytest.raises(ValidationError, match="singular covariance"):
            build_rdm(matrix, Measure.mahalanobis, cov=cov)

    def test_ridge_makes_it_invertible(self, rng):
        matrix = _matrix(rng.normal(size=(4, 10)))
        rdm = build_rdm(matrix, Measure.mahalanobis, cov=estimate_covariance(matrix, ridge=1e-3))
        assert (rdm.data[np.triu_indices(4, k=1)] > 0).all()

    def test_ridge_scale(self, rng):
        data = rng.normal(size=(50, 3))
        cov = estimate_covariance(_matrix(data), ridge=0.5)
        sample = np.cov(data, rowvar=False, ddof=1)
        np.testing.assert_allclose(cov.matrix, sample + 0.5 * np.trace(sample) / 3 * np.eye(3))

    def test_two_condition_example(self):
        cov = estimate_covariance(_matrix([[0, 0], [2, 2]]), ridge=0.0)
        np.testing.assert_allclose(cov.matrix, [[2, 2], [2, 2]])

    def test_negative_ridge(self, rng):
        with pytest.raises(ValidationError):
            estimate_covariance(_matrix(rng.normal(size=(5, 2))), ridge=-1.0)


class TestRdmFiles:
    def test_round_trip(self, rng, tmp_path):
        rdm = build_rdm(_matrix(rng.normal(size=(7, 4))), Measure.correlation)
        path = tmp_path / "bert_1.csv"
        write_rdm(rdm, path)
        loaded = read_rdm(path, Measure.correlation)
        assert np.array_equal(loaded.data, rdm.data)
        assert loaded.conditions == rdm.conditions
        assert loaded.label == "bert:1"

    def test_unlabeled_file_takes_layer_from_name(self, rng, tmp_path):
        rdm = build_rdm(_matrix(rng.normal(size=(5, 3))), Measure.euclidean)
        path = tmp_path / "bert_11.csv"
        write_rdm(RDM(rdm.conditions, rdm.measure, rdm.data), path)
        assert read_rdm(path, Measure.euclidean).label == "bert:11"

    def test_unlabeled_file_with_free_name(self, rng, tmp_path):
        rdm = build_rdm(_matrix(rng.normal(size=(5, 3))), Measure.euclidean)
        path = tmp_path / "pooled.csv"
        write_rdm(RDM(rdm.conditions, rdm.measure, rdm.data), path)
        assert read_rdm(path, Measure.euclidean).label == "pooled"

    def test_asymmetric_file_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,a,b\na,0,1\nb,2,0\n")
        with pytest.raises(ValidationError, match="symmetric"):
            read_rdm(path, Measure.euclidean)
