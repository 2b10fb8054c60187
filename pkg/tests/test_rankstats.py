from itertools import permutations

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import gammaln

from conftest import pearson_oracle, spearman_oracle, tau_a_counts_oracle, tau_a_oracle
from layer_rsa.errors import ValidationError
from layer_rsa.rankstats import (
    anova_two_way,
    bonferroni,
    f_sf,
    kendall_tau_a,
    kendall_tau_a_rows,
    pearson_r,
    rank_with_ties,
    spearman_rho,
    spearman_rows,
    student_t_sf,
)
from layer_rsa.types import Method


def _random_tied_vectors(rng, count: int):
    for _ in range(count):
        n = int(rng.integers(3, 25))
        yield rng.integers(0, 5, size=n).astype(float), rng.integers(0, 5, size=n).astype(float)


def _t_sf_quadrature(t: float, df: float) -> float:
    log_norm = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * np.log(df * np.pi)

    def density(u):
        return np.exp(log_norm - (df + 1) / 2 * np.log1p(u * u / df))

    upper, _ = integrate.quad(density, abs(t), np.inf, epsabs=1e-14, epsrel=1e-13, limit=500)
    return upper if t >= 0 else 1.0 - upper


class TestKendallTauA:
    """Kendall's tau-a against pair enumeration."""

    def test_tied_pair_stays_in_denominator(self):
        """x=[1,1,2], y=[1,2,3] gives exactly 2/3."""
        assert kendall_tau_a([1, 1, 2], [1, 2, 3]) == 2 / 3

    def test_random_vectors_with_ties(self, rng):
        for x, y in _random_tied_vectors(rng, 1000):
            assert kendall_tau_a(x, y) == tau_a_oracle(x, y)

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_all_permutations(self, n):
        base = np.arange(1, n + 1, dtype=float)
        for perm in permutations(base):
            assert kendall_tau_a(base, perm) == tau_a_oracle(base, perm)

    def test_argument_symmetry(self, rng):
        for x, y in _random_tied_vectors(rng, 200):
            assert kendall_tau_a(x, y) == kendall_tau_a(y, x)

    def test_monotone_transform_invariance(self, rng):
        for x, y in _random_tied_vectors(rng, 200):
            assert kendall_tau_a(x**3 + 2.0, np.exp(y)) == kendall_tau_a(x, y)

    def test_counts_are_exact_integers(self, rng):
        x = rng.integers(0, 3, size=40).astype(float)
        y = rng.integers(0, 3, size=40).astype(float)
        numerator, total = tau_a_counts_oracle(x, y)
        assert kendall_tau_a(x, y) * total == pytest.approx(numerator, abs=1e-9)

    def test_rows_match_per_row_oracle(self, rng):
        a = rng.integers(0, 6, size=(9, 9)).astype(float)
        b = rng.integers(0, 6, size=(9, 9)).astype(float)
        rows = kendall_tau_a_rows(a, b, exclude_diagonal=True)
        for i in range(9):
            keep = np.arange(9) != i
            assert rows[i] == tau_a_oracle(a[i, keep], b[i, keep])

    def test_rows_with_diagonal(self, rng):
        a = rng.random((5, 7))
        b = rng.random((5, 7))
        rows = kendall_tau_a_rows(a, b)
        for i in range(5):
            assert rows[i] == tau_a_oracle(a[i], b[i])

    def test_input_arrays_untouched(self, rng):
        x = rng.random(20)
        y = rng.random(20)
        x_before, y_before = x.copy(), y.copy()
        kendall_tau_a(x, y)
        np.testing.assert_array_equal(x, x_before)
        np.testing.assert_array_equal(y, y_before)


class TestSpearmanAndPearson:
    """Correlation coefficients against definitional oracles."""

    def test_ranks_with_ties(self):
        np.testing.assert_array_equal(rank_with_ties([10, 20, 20, 5]), [2, 3.5, 3.5, 1])

    def test_spearman_random_vectors_with_ties(self, rng):
        for x, y in _random_tied_vectors(rng, 1000):
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
            assert spearman_rho(x, y).coefficient == pytest.approx(spearman_oracle(x, y), abs=1e-12)

    def test_pearson_random_vectors(self, rng):
        for x, y in _random_tied_vectors(rng, 1000):
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
            assert pearson_r(x, y) == pytest.approx(pearson_oracle(x, y), abs=1e-12)

    @pytest.mark.parametrize("n", [3, 4, 5, 6])
    def test_spearman_all_permutations(self, n):
        base = np.arange(1, n + 1, dtype=float)
        for perm in permutations(base):
            assert spearman_rho(base, perm).coefficient == pytest.approx(spearman_oracle(base, perm), abs=1e-12)

    def test_p_value_matches_scipy(self, rng):
        x = rng.random(50)
        y = x + rng.random(50)
        report = spearman_rho(x, y)
        expected = stats.spearmanr(x, y)
        assert report.coefficient == pytest.approx(expected.statistic, abs=1e-12)
        assert report.p_raw == pytest.approx(expected.pvalue, rel=1e-8, abs=1e-15)
        assert report.method == Method.spearman

    def test_bonferroni_in_report(self, rng):
        x = rng.random(30)
        y = x + 2 * rng.random(30)
        report = spearman_rho(x, y, n_tests=9)
        assert report.p_adjusted == min(1.0, 9 * report.p_raw)
        assert report.n_tests == 9

    def test_perfect_correlation(self):
        report = spearman_rho([1, 2, 3, 4], [10, 20, 30, 40])
        assert report.coefficient == 1.0
        assert report.p_raw == 0.0

    def test_zero_rank_variance(self):
        with pytest.raises(ValidationError, match="zero rank variance"):
            spearman_rho([1, 1, 1, 1], [1, 2, 3, 4])

    def test_too_few_observations(self):
        with pytest.raises(ValidationError):
            spearman_rho([1, 2], [2, 1])

    def test_spearman_monotone_transform_invariance(self, rng):
        for _ in range(50):
            x, y = rng.normal(size=30), rng.normal(size=30)
            assert spearman_rho(np.exp(x), y).coefficient == spearman_rho(x, y).coefficient
            assert spearman_rho(x**3, 2.0 * y + 1.0).coefficient == spearman_rho(x, y).coefficient

    def test_spearman_reversal_negates(self, rng):
        for _ in range(50):
            x, y = rng.random(30), rng.normal(size=30)
            assert spearman_rho(1.0 - x, y).coefficient == -spearman_rho(x, y).coefficient

    def test_permutation_p_value_is_seeded(self, rng):
        x = rng.random(12)
        y = x + rng.random(12)
        first = spearman_rho(x, y, permutations=2000, seed=7)
        second = spearman_rho(x, y, permutations=2000, seed=7)
        assert first.p_raw == second.p_raw
        assert 1 / 2001 <= first.p_raw <= 1.0

    def test_spearman_rows_match_scalar(self, rng):
        a = rng.random((6, 6))
        b = rng.random((6, 6))
        rows = spearman_rows(a, b, exclude_diagonal=True)
        for i in range(6):
            keep = np.arange(6) != i
            assert rows[i] == pytest.approx(spearman_oracle(a[i, keep], b[i, keep]), abs=1e-12)


class TestSpecialFunctions:
    """Tail probabilities of the t and F distributions."""

    @pytest.mark.parametrize("df", [1, 2, 8, 30, 2366])
    def test_student_t_against_quadrature(self, df):
        for t in np.linspace(-10, 10, 41):
            assert student_t_sf(t, df) == pytest.approx(_t_sf_quadrature(t, df), abs=1e-9)

    @pytest.mark.parametrize("df", [1, 2, 8, 30, 2366])
    def test_student_t_symmetry(self, df):
        for t in np.linspace(-10, 10, 41):
            assert student_t_sf(t, df) + student_t_sf(-t, df) == pytest.approx(1.0, abs=1e-12)

    def test_student_t_at_zero(self):
        assert student_t_sf(0.0, 5) == pytest.approx(0.5, abs=1e-15)

    def test_student_t_rejects_small_df(self):
        with pytest.raises(ValidationError):
            student_t_sf(1.0, 0.5)

    @pytest.mark.parametrize("df_num,df_den", [(1, 10), (3, 215), (2, 8)])
    def test_f_sf_matches_scipy(self, df_num, df_den):
        for f in [0.0, 0.3, 1.0, 4.2, 25.0]:
            assert f_sf(f, df_num, df_den) == pytest.approx(stats.f.sf(f, df_num, df_den), abs=1e-12)

    def test_f_sf_nan(self):
        assert np.isnan(f_sf(float("nan"), 1, 5))

    def test_bonferroni_clamps(self):
        assert bonferroni(0.01, 9) == pytest.approx(0.09)
        assert bonferroni(0.3, 9) == 1.0


def _cell_means_oracle(values, a, b):
    values = np.asarray(values, dtype=float)
    grand = values.mean()
    levels_a, levels_b = sorted(set(a)), sorted(set(b))
    a, b = np.asarray(a), np.asarray(b)

    ss_a = sum((a == la).sum() * (values[a == la].mean() - grand) ** 2 for la in levels_a)
    ss_b = sum((b == lb).sum() * (values[b == lb].mean() - grand) ** 2 for lb in levels_b)
    ss_cells, ss_res = 0.0, 0.0
    for la in levels_a:
        for lb in levels_b:
            cell = values[(a == la) & (b == lb)]
            ss_cells += cell.size * (cell.mean() - grand) ** 2
            ss_res += ((cell - cell.mean()) ** 2).sum()
    return ss_a, ss_b, ss_cells - ss_a - ss_b, ss_res


class TestAnovaTwoWay:
    """Two-way ANOVA against cell-means computations."""

    def test_balanced_two_by_two(self):
        values = [4.0, 5.0, 6.0, 7.0, 9.0, 8.0, 3.0, 2.0, 4.0, 10.0, 12.0, 11.0]
        a = ["x"] * 6 + ["y"] * 6
        b = (["p"] * 3 + ["q"] * 3) * 2
        table = anova_two_way(values, a, b)

        ss_a, ss_b, ss_ab, ss_res = _cell_means_oracle(values, a, b)
        df_res = len(values) - 4
        for name, ss in [("a", ss_a), ("b", ss_b), ("a:b", ss_ab)]:
            row = table.term(name)
            assert row.df == 1
            assert row.ss == pytest.approx(ss, abs=1e-9)
            assert row.f == pytest.approx(ss / (ss_res / df_res), abs=1e-9)
        assert table.residual.ss == pytest.approx(ss_res, abs=1e-9)
        assert table.residual.df == df_res

    def test_total_identity_unbalanced(self, rng):
        for _ in range(20):
            n = int(rng.integers(20, 60))
            a = rng.choice(["l", "m", "h"], size=n)
            b = rng.choice(["adj", "non"], size=n)
            values = rng.normal(size=n)
            table = anova_two_way(values, a, b)

            total = ((values - values.mean()) ** 2).sum()
            assert table.total_ss == pytest.approx(total, abs=1e-9)
            assert table.model_ss + table.residual.ss == pytest.approx(total, abs=1e-9)
            if table.interaction:
                _, _, _, ss_res = _cell_means_oracle(values, a, b)
                assert table.residual.ss == pytest.approx(ss_res, abs=1e-9)

    def test_constant_response(self):
        table = anova_two_way([1.0] * 8, ["x", "y"] * 4, ["p"] * 4 + ["q"] * 4)
        assert table.term("a").ss == 0.0
        assert np.isnan(table.term("a").f)

    def test_empty_cell_drops_interaction(self, rng):
        a = ["x", "x", "y", "y", "z", "z", "z", "x", "y"]
        b = ["p", "q", "p", "q", "p", "p", "p", "p", "q"]
        table = anova_two_way(rng.normal(size=9), a, b)
        assert not table.interaction
        assert [row.term for row in table.terms] == ["a", "b"]
        assert table.residual.df == 9 - 1 - 2 - 1

    def test_degenerate_factor(self):
        with pytest.raises(ValidationError, match="degenerate factor"):
            anova_two_way([1.0, 2.0, 3.0], ["x"] * 3, ["p", "q", "p"])
