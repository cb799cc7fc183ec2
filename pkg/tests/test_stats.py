import math

import numpy as np
import pytest

from errors import StatsError
from stats import (Moments, betainc, excess_kurtosis, pairwise_wins, pearson, pooled_weight_kurtosis,
                   student_t_two_sided_p, welch_t)


def t_two_sided_by_quadrature(t, df, n=200001):
    """Direct Student-t tail from the density, integrated with the trapezoid rule."""
    x = np.linspace(0.0, abs(t), n)
    log_c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    pdf = np.exp(log_c - (df + 1) / 2 * np.log1p(x * x / df))
    h = x[1] - x[0]
    area = h * (pdf.sum() - (pdf[0] + pdf[-1]) / 2)
    return 1.0 - 2.0 * area


def test_two_point_distribution_has_kurtosis_minus_two():
    assert excess_kurtosis([-1.0, 1.0] * 50).excess_kurtosis == pytest.approx(-2.0, abs=1e-12)


def test_uniform_and_normal_kurtosis():
    rng = np.random.default_rng(0)
    assert excess_kurtosis(rng.uniform(-1, 1, 10**6)).excess_kurtosis == pytest.approx(-1.2, abs=0.05)
    assert excess_kurtosis(rng.standard_normal(10**6)).excess_kurtosis == pytest.approx(0.0, abs=0.05)


def test_kurtosis_is_affine_invariant(rng):
    x = rng.standard_t(5, 5000)
    base = excess_kurtosis(x).excess_kurtosis
    assert excess_kurtosis(-3.0 * x + 7.0).excess_kurtosis == pytest.approx(base, abs=1e-9)


def test_kurtosis_preconditions():
    with pytest.raises(StatsError):
        excess_kurtosis([1.0, 2.0, 3.0])
    with pytest.raises(StatsError):
        excess_kurtosis([0.5] * 10)


def test_merged_moments_equal_the_whole(rng):
    x = rng.standard_normal(10007) * 3 + 1
    merged = Moments()
    for chunk in np.array_split(x, 7):
        merged = merged + Moments.of(chunk)
    whole = Moments.of(x)
    assert merged.n == whole.n
    assert merged.mean == pytest.approx(whole.mean, rel=1e-12)
    for field in ("m2", "m3", "m4"):
        assert getattr(merged, field) == pytest.approx(getattr(whole, field), rel=1e-9, abs=1e-6)


def test_pooled_kurtosis(rng):
    tensors = {
        "blocks.0.mlp.fc.weight": rng.standard_normal((300, 400)),
        "blocks.1.mlp.fc.weight": rng.standard_normal((400, 300)),
        "blocks.0.mlp.fc.bias": rng.standard_normal(300) * 100,
    }
    pooled = pooled_weight_kurtosis(tensors, chunk_size=10000)
    assert pooled.n == 240000
    assert pooled.excess_kurtosis == pytest.approx(0.0, abs=0.05)

    reordered = dict(reversed(list(tensors.items())))
    assert pooled_weight_kurtosis(reordered, chunk_size=10000) == pooled


def test_pooled_kurtosis_of_one_tensor_matches_direct(rng):
    w = rng.laplace(size=(64, 64))
    pooled = pooled_weight_kurtosis({"blocks.0.attn.out.weight": w}, chunk_size=1000)
    assert pooled.excess_kurtosis == pytest.approx(excess_kurtosis(w).excess_kurtosis, abs=1e-9)


def test_pooled_kurtosis_needs_a_selection(rng):
    with pytest.raises(StatsError):
        pooled_weight_kurtosis({"tok_embed.weight": rng.standard_normal((8, 4))})


def test_pearson_extremes_and_reference(rng):
    x = rng.standard_normal(50)
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)

    a, b = np.array([1.0, 2.0, 3.0]), np.array([2.0, 4.0, 7.0])
    cov = np.mean((a - a.mean()) * (b - b.mean()))
    assert pearson(a, b) == pytest.approx(cov / (a.std() * b.std()), abs=1e-12)


def test_pearson_affine_equivariance(rng):
    x, y = rng.standard_normal(40), rng.standard_normal(40)
    r = pearson(x, y)
    assert pearson(2.5 * x + 1, y) == pytest.approx(r, abs=1e-12)
    assert pearson(-0.5 * x + 1, y) == pytest.approx(-r, abs=1e-12)


def test_pearson_errors():
    with pytest.raises(StatsError):
        pearson([1, 2, 3], [1, 2])
    with pytest.raises(StatsError):
        pearson([1, 1, 1], [1, 2, 3])


def test_betainc_edges():
    assert betainc(2.0, 3.0, 0.0) == 0.0
    assert betainc(2.0, 3.0, 1.0) == 1.0
    # I_x(1, 1) is the uniform CDF
    assert betainc(1.0, 1.0, 0.3) == pytest.approx(0.3, abs=1e-12)
    assert betainc(2.0, 5.0, 0.4) + betainc(5.0, 2.0, 0.6) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(StatsError):
        betainc(0.0, 1.0, 0.5)


def test_student_t_matches_published_table():
    # two-sided 5% critical value for 10 degrees of freedom
    assert student_t_two_sided_p(2.228, 10) == pytest.approx(0.05, abs=1e-3)
    assert student_t_two_sided_p(0.0, 3) == 1.0


@pytest.mark.parametrize("t, df", [(0.5, 3.0), (2.228, 10.0), (-5.46, 3.7), (1.3, 27.4)])
def test_student_t_matches_quadrature(t, df):
    assert student_t_two_sided_p(t, df) == pytest.approx(t_two_sided_by_quadrature(t, df), rel=1e-6, abs=1e-9)


def test_welch_on_fixed_samples():
    a = [12.7, 13.1, 12.9]
    b = [16.2, 15.8, 16.6]
    result = welch_t(a, b)
    va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
    se = va / 3 + vb / 3
    assert result.t == pytest.approx((np.mean(a) - np.mean(b)) / math.sqrt(se), rel=1e-12)
    assert result.df == pytest.approx(se ** 2 / ((va / 3) ** 2 / 2 + (vb / 3) ** 2 / 2), rel=1e-12)
    assert result.p_two_sided == pytest.approx(t_two_sided_by_quadrature(result.t, result.df), rel=1e-6)
    assert result.p_two_sided < 0.01


def test_welch_symmetry_and_identity(rng):
    a, b = rng.standard_normal(6), rng.standard_normal(9) + 0.4
    ab, ba = welch_t(a, b), welch_t(b, a)
    assert ab.t == -ba.t
    assert ab.p_two_sided == ba.p_two_sided
    same = welch_t(a, a)
    assert same.t == 0.0
    assert same.p_two_sided == 1.0


def test_welch_preconditions():
    with pytest.raises(StatsError):
        welch_t([1.0], [1.0, 2.0])
    with pytest.raises(StatsError):
        welch_t([1.0, 1.0], [1.0, 2.0])


def test_pairwise_wins():
    assert str(pairwise_wins([16, 16, 16], [12, 12, 12])) == "0/9"
    assert pairwise_wins([2, 4], [1, 3]).wins == 1
    record = pairwise_wins([5], [5])
    assert (record.wins, record.ties, record.total) == (0, 1, 1)
    assert pairwise_wins([1, 2], [3, 4], lower_is_better=False).wins == 0


def test_wins_partition_the_pairs(rng):
    a = rng.integers(0, 5, 7).astype(float)
    b = rng.integers(0, 5, 4).astype(float)
    forward, backward = pairwise_wins(a, b), pairwise_wins(b, a)
    assert forward.wins + backward.wins + forward.ties == len(a) * len(b)
    assert forward.losses == backward.wins
